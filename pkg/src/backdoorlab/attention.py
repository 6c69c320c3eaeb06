"""Attention-map extraction and trigger-mask selection.

The residual attention classifier is trained on the full dataset; maps are
then queried on target-class samples, averaged, and the sample closest to the
average supplies the mask: the l*l pixels with the highest attention weights.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import ImageDataset, derive_seed, resize_bilinear
from .errors import DataError, ModelError
from .models import ModelHandle, TrainHyper, build_model, to_nchw, train_clean


@dataclass
class AttentionMap:
    grid: np.ndarray        # (H, W) float32, non-negative
    sample_id: int = -1
    label: int = -1

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if not np.all(np.isfinite(self.grid)):
            raise DataError("attention map contains non-finite values")


@dataclass
class Mask:
    coords: np.ndarray      # (l*l, 2) int64 (row, col)
    provenance: str         # attention | corner | random
    source_sample_id: int = -1
    image_hw: tuple[int, int] | None = None
    side: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        seen = {tuple(rc) for rc in self.coords.tolist()}
        if len(seen) != len(self.coords):
            raise DataError("mask contains duplicate coordinates")

    def __len__(self) -> int:
        return len(self.coords)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        if self.image_hw is None or self.side is None:
            raise DataError("cannot save a mask without image_hw and side")
        path.write_text(json.dumps({
            "height": self.image_hw[0],
            "width": self.image_hw[1],
            "l": self.side,
            "coords": self.coords.tolist(),
            "provenance": self.provenance,
            "source_sample_id": self.source_sample_id,
        }, indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Mask":
        d = json.loads(Path(path).read_text())
        return cls(np.asarray(d["coords"]), d["provenance"], d["source_sample_id"],
                   (d["height"], d["width"]), d["l"])


def train_ran(dataset: ImageDataset, hyper: TrainHyper, channels=(32, 64, 1)) -> ModelHandle:
    """Train the residual attention classifier on the full labeled split."""
    handle = build_model("ran_lite", dataset.num_classes, dataset.image_shape,
                         hyper.seed, channels=tuple(channels))
    return train_clean(handle, dataset, hyper)


def attention_map(ran: ModelHandle, image: np.ndarray, sample_id: int = -1,
                  label: int = -1) -> AttentionMap:
    """Final-module map for one image, clamped non-negative and upscaled to
    the image resolution with bilinear interpolation."""
    if ran.arch != "ran_lite":
        raise ModelError(f"attention maps come from ran_lite, got {ran.arch}")
    if not ran.trained:
        raise ModelError("attention_map requires a trained attention network")
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3:
        raise DataError(f"expected one (H, W, C) image, got shape {img.shape}")
    ran.module.eval()
    with torch.no_grad():
        fmap = ran.module.feature_map(to_nchw(img))[0, 0].numpy()
    fmap = np.maximum(fmap, 0.0)
    grid = resize_bilinear(fmap, img.shape[0], img.shape[1])
    return AttentionMap(grid, sample_id, label)


def select_representative_map(maps: list[AttentionMap]) -> AttentionMap:
    """The map closest (L2) to the elementwise average; ties -> lowest sample id."""
    if not maps:
        raise DataError("no attention maps given")
    shape = maps[0].grid.shape
    for m in maps:
        if m.grid.shape != shape:
            raise DataError(f"map shape mismatch: {m.grid.shape} vs {shape}")
    stack = np.stack([m.grid for m in maps]).astype(np.float64)
    mean = stack.mean(axis=0)
    dists = np.sqrt(((stack - mean) ** 2).sum(axis=(1, 2)))
    order = sorted(range(len(maps)), key=lambda i: (dists[i], maps[i].sample_id))
    return maps[order[0]]


def mask_from_map(amap: AttentionMap, side: int) -> Mask:
    """Top l*l pixels by attention weight; ties break row-major."""
    h, w = amap.grid.shape
    k = side * side
    if k > h * w:
        raise DataError(f"mask of {k} pixels does not fit a {h}x{w} map")
    flat = amap.grid.ravel()
    rows, cols = np.divmod(np.arange(h * w), w)
    # lexsort: last key is primary -> sort by (-value, row, col)
    order = np.lexsort((cols, rows, -flat.astype(np.float64)))[:k]
    coords = np.stack([rows[order], cols[order]], axis=1)
    return Mask(coords, "attention", amap.sample_id, (h, w), side)


def baseline_mask(image_hw: tuple[int, int], side: int, kind: str = "corner",
                  seed: int | None = None) -> Mask:
    """Corner: contiguous bottom-right square. Random: seeded distinct pixels."""
    h, w = image_hw
    if side > h or side > w:
        raise DataError(f"side {side} exceeds image {h}x{w}")
    if kind == "corner":
        rows, cols = np.mgrid[h - side : h, w - side : w]
        coords = np.stack([rows.ravel(), cols.ravel()], axis=1)
        return Mask(coords, "corner", -1, (h, w), side)
    if kind == "random":
        if seed is None:
            raise DataError("random mask needs a seed")
        rng = np.random.default_rng(seed)
        flat = rng.choice(h * w, size=side * side, replace=False)
        coords = np.stack(np.divmod(np.sort(flat), w), axis=1)
        return Mask(coords, "random", -1, (h, w), side)
    raise DataError(f"unknown baseline mask kind {kind!r}")


def target_class_mask(ran: ModelHandle, dataset: ImageDataset, target_label: int,
                      side: int, n_samples: int = 50, seed: int = 0,
                      map_hw: tuple[int, int] | None = None) -> Mask:
    """Derive the attention mask for a target class.

    Samples up to ``n_samples`` target-class images, extracts their maps,
    picks the representative one, and takes its top pixels. ``map_hw`` rescales
    the representative map first, for victims that consume resized inputs.
    """
    idx = dataset.class_indices(target_label)
    if idx.size == 0:
        raise DataError(f"no samples of class {target_label} in {dataset.name}")
    rng = np.random.default_rng(derive_seed(seed, "mask-samples"))
    if idx.size > n_samples:
        idx = np.sort(rng.choice(idx, size=n_samples, replace=False))
    maps = [attention_map(ran, dataset.images[i], sample_id=int(i), label=target_label)
            for i in idx]
    rep = select_representative_map(maps)
    if map_hw is not None and rep.grid.shape != tuple(map_hw):
        rep = AttentionMap(resize_bilinear(rep.grid, map_hw[0], map_hw[1]),
                           rep.sample_id, rep.label)
    return mask_from_map(rep, side)
