"""Attack metrics: success rate, clean accuracy, differentiable SSIM, and a
feature-space perceptual distance proxy."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageDataset, TriggerSpec, apply_trigger
from .errors import DataError, ModelError
from .models import ModelHandle, predict, to_nchw


def asr(handle: ModelHandle, dataset: ImageDataset, trigger: TriggerSpec,
        target_label: int, exclude_target: bool = True, batch_size: int = 256) -> float:
    """Fraction of triggered test samples classified as the target label.

    Samples whose true label already equals the target are excluded from the
    denominator by default (set exclude_target=False for the raw convention).
    """
    images, labels = dataset.images, dataset.labels
    if exclude_target:
        keep = labels != target_label
        images = images[keep]
        if len(images) == 0:
            raise DataError("asr denominator empty: every sample carries the target label")
    triggered = apply_trigger(images, trigger)
    return float(np.mean(predict(handle, triggered, batch_size) == target_label))


def cda(handle: ModelHandle, dataset: ImageDataset, batch_size: int = 256) -> float:
    """Accuracy of the (possibly backdoored) model on unmodified samples."""
    if len(dataset) == 0:
        raise DataError("cda on an empty dataset")
    return float(np.mean(predict(handle, dataset.images, batch_size) == dataset.labels))


# ---------------------------------------------------------------------------
# SSIM


@dataclass
class SSIMParams:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    c1: float = 0.01**2
    c2: float = 0.03**2
    window: str = "auto"  # auto | gaussian | uniform
    window_size: int = 11
    sigma: float = 1.5

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) <= 0:
            raise DataError("SSIM exponents must be positive")
        if min(self.c1, self.c2) <= 0:
            raise DataError("SSIM stabilizers must be positive")


def _window_kernel(params: SSIMParams, h: int, w: int) -> torch.Tensor:
    kind, size = params.window, params.window_size
    if kind == "auto":
        # gaussian 11x11 for >=32px images, small uniform window below that
        if min(h, w) >= 32:
            kind, size = "gaussian", 11
        else:
            kind, size = "uniform", min(7, h, w)
    size = min(size, h, w)
    if kind == "gaussian":
        ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
        g = torch.exp(-(ax**2) / (2 * params.sigma**2))
        k = torch.outer(g, g)
    elif kind == "uniform":
        k = torch.ones(size, size, dtype=torch.float64)
    else:
        raise DataError(f"unknown SSIM window {kind!r}")
    return (k / k.sum()).to(torch.float32)


def ssim_torch(x: torch.Tensor, y: torch.Tensor, params: SSIMParams | None = None) -> torch.Tensor:
    """Windowed SSIM between two (N, C, H, W) tensors, differentiable in both.

    Windows slide in valid mode, channels are treated as independent planes,
    and the result is the mean over batch, channels, and window positions.
    With unit exponents the luminance and contrast/structure terms collapse to
    the classic two-factor form, which avoids square roots on the gradient
    path; arbitrary exponents fall back to the explicit three-term product.
    """
    params = params or SSIMParams()
    if x.shape != y.shape:
        raise DataError(f"SSIM shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    n, c, h, w = x.shape
    kernel = _window_kernel(params, h, w).to(x.dtype)
    k = kernel.expand(c, 1, *kernel.shape)

    def smooth(t):
        return F.conv2d(t, k, groups=c)

    mu_x, mu_y = smooth(x), smooth(y)
    var_x = smooth(x * x) - mu_x**2
    var_y = smooth(y * y) - mu_y**2
    cov = smooth(x * y) - mu_x * mu_y
    c1, c2 = params.c1, params.c2
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    if params.alpha == params.beta == params.gamma == 1.0:
        cs = (2 * cov + c2) / (var_x + var_y + c2)
        return (lum * cs).mean()
    eps = 1e-12
    sx = torch.sqrt(var_x.clamp_min(eps))
    sy = torch.sqrt(var_y.clamp_min(eps))
    c3 = c2 / 2
    contrast = (2 * sx * sy + c2) / (var_x + var_y + c2)
    structure = (cov + c3) / (sx * sy + c3)
    val = lum.clamp_min(eps) ** params.alpha \
        * contrast.clamp_min(eps) ** params.beta \
        * structure.clamp_min(eps) ** params.gamma
    return val.mean()


def ssim(a: np.ndarray, b: np.ndarray, params: SSIMParams | None = None) -> float:
    """SSIM between two images (H, W, C) or batches (N, H, W, C) in [0, 1]."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise DataError(f"SSIM shape mismatch: {a.shape} vs {b.shape}")
    with torch.no_grad():
        val = ssim_torch(to_nchw(a), to_nchw(b), params)
    return float(val)


# ---------------------------------------------------------------------------
# perceptual distance proxy


def conv_feature_fn(handle: ModelHandle, batch_size: int = 256):
    """Feature extractor over the clean victim's conv stack (cnn_small only)."""
    if handle.arch != "cnn_small":
        raise ModelError("the perceptual proxy uses a convolutional victim's features")

    def feature_fn(images: np.ndarray) -> list[np.ndarray]:
        x = to_nchw(images)
        handle.module.eval()
        layers: list[list[np.ndarray]] = []
        with torch.no_grad():
            for i in range(0, len(x), batch_size):
                feats = handle.module.conv_features(x[i : i + batch_size])
                if not layers:
                    layers = [[] for _ in feats]
                for slot, f in zip(layers, feats):
                    slot.append(f.numpy())
        return [np.concatenate(slot) for slot in layers]

    return feature_fn


def lpips_proxy(a: np.ndarray, b: np.ndarray, feature_fn) -> float:
    """Mean unit-normalized squared feature distance across layers.

    Zero exactly when the two inputs produce identical features. Only the
    ordering of values is meaningful; absolute magnitudes are not calibrated
    against any reference perceptual metric.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise DataError(f"lpips_proxy shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    feats_a = feature_fn(a)
    feats_b = feature_fn(b)
    eps = 1e-10
    total = 0.0
    for fa, fb in zip(feats_a, feats_b):
        na = fa / np.sqrt((fa**2).sum(axis=1, keepdims=True) + eps)
        nb = fb / np.sqrt((fb**2).sum(axis=1, keepdims=True) + eps)
        total += float(((na - nb) ** 2).mean())
    return total / len(feats_a)


# ---------------------------------------------------------------------------
# metric records


@dataclass
class MetricRecord:
    name: str
    value: float
    dataset_tag: str = ""
    model_tag: str = ""
    trigger_tag: str = ""
    timestamp: float = field(default_factory=time.time)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise DataError(f"metric {self.name} is non-finite")


def append_records(records: list[MetricRecord], csv_path: str | Path,
                   json_path: str | Path | None = None) -> None:
    """Append records to a run-level CSV, mirrored as JSON lines."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not csv_path.exists()
    with open(csv_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["name", "value", "dataset_tag", "model_tag",
                             "trigger_tag", "timestamp"])
        for r in records:
            writer.writerow([r.name, f"{r.value:.6f}", r.dataset_tag, r.model_tag,
                             r.trigger_tag, f"{r.timestamp:.3f}"])
    if json_path is not None:
        with open(json_path, "a") as fh:
            for r in records:
                fh.write(json.dumps(r.__dict__) + "\n")
