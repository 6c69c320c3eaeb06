"""Model handles: construction, training, activation capture, checkpoints.

A ModelHandle wraps a torch module with its architecture descriptor so
triggers, defenses, and the CLI can treat victims opaquely. Training owns the
module exclusively; all read paths (logits, activations) run under no_grad
and leave parameters untouched.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..data import ImageDataset
from ..errors import ModelError, TrainingDiverged
from .cnn import CnnSmall
from .ran import RanLite
from .vit import VitLite

ARCHS = ("cnn_small", "vit_lite", "ran_lite")
VICTIM_ARCHS = ("cnn_small", "vit_lite")


def set_determinism(seed: int, strict: bool = True) -> None:
    """Fix all torch RNG state; strict mode also pins algorithm choices."""
    torch.manual_seed(seed)
    if strict:
        torch.use_deterministic_algorithms(True, warn_only=True)


@dataclass
class TrainHyper:
    epochs: int
    lr: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    optimizer: str = "adam"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size <= 0:
            raise ModelError("epochs must be >= 0, lr and batch_size positive")


@dataclass
class ModelHandle:
    arch: str
    params: dict
    num_classes: int
    input_shape: tuple[int, int, int]  # (H, W, C)
    module: torch.nn.Module
    seed: int
    trained: bool = False
    history: list = field(default_factory=list)

    def clone(self) -> "ModelHandle":
        return ModelHandle(self.arch, dict(self.params), self.num_classes,
                           self.input_shape, copy.deepcopy(self.module), self.seed,
                           self.trained, list(self.history))

    def state_snapshot(self) -> dict:
        return {k: v.detach().clone() for k, v in self.module.state_dict().items()}

    def load_snapshot(self, snap: dict) -> None:
        self.module.load_state_dict(snap)


def _construct(arch: str, num_classes: int, input_shape, params: dict) -> torch.nn.Module:
    if arch == "cnn_small":
        return CnnSmall(num_classes, input_shape, **params)
    if arch == "vit_lite":
        return VitLite(num_classes, input_shape, **params)
    if arch == "ran_lite":
        return RanLite(num_classes, input_shape, **params)
    raise ModelError(f"unknown architecture {arch!r}")


def build_model(arch: str, num_classes: int, input_shape, seed: int, **params) -> ModelHandle:
    input_shape = tuple(int(v) for v in input_shape)
    torch.manual_seed(seed)
    module = _construct(arch, num_classes, input_shape, params)
    return ModelHandle(arch, params, num_classes, input_shape, module, seed)


def build_victim(arch: str, num_classes: int, input_shape, seed: int, **params) -> ModelHandle:
    """Initialize a victim classifier; the same seed gives identical parameters."""
    if arch not in VICTIM_ARCHS:
        raise ModelError(f"victim architecture must be one of {VICTIM_ARCHS}, got {arch!r}")
    return build_model(arch, num_classes, input_shape, seed, **params)


def to_nchw(images: np.ndarray) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def _check_shape(handle: ModelHandle, images: np.ndarray) -> None:
    if tuple(images.shape[-3:]) != handle.input_shape:
        raise ModelError(
            f"model expects {handle.input_shape} images, got {tuple(images.shape[-3:])}"
        )


def logits(handle: ModelHandle, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forward pass without gradients; returns (N, num_classes) float32."""
    _check_shape(handle, images)
    x = to_nchw(images)
    handle.module.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(handle.module(x[i : i + batch_size]).numpy())
    return np.concatenate(outs) if outs else np.empty((0, handle.num_classes), np.float32)


def predict(handle: ModelHandle, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax labels; ties resolve to the lower class index."""
    return np.argmax(logits(handle, images, batch_size), axis=1)


def evaluate(handle: ModelHandle, dataset: ImageDataset, batch_size: int = 256) -> float:
    if len(dataset) == 0:
        raise ModelError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(handle, dataset.images, batch_size) == dataset.labels))


def train_supervised(handle: ModelHandle, images: np.ndarray, labels: np.ndarray,
                     epochs: int, lr: float, batch_size: int, seed: int,
                     sample_weights: np.ndarray | None = None,
                     optimizer: str = "adam", weight_decay: float = 0.0) -> list[dict]:
    """Shared training loop (cross-entropy, seeded batch order).

    ``sample_weights`` rescales each sample's loss term; the batch loss is the
    weight-normalized mean. Returns one record per epoch and raises
    TrainingDiverged if the loss leaves the finite range.
    """
    _check_shape(handle, images)
    x = to_nchw(images)
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    w = None
    if sample_weights is not None:
        w = torch.from_numpy(np.asarray(sample_weights, dtype=np.float32))
    if optimizer == "adam":
        opt = torch.optim.Adam(handle.module.parameters(), lr=lr, weight_decay=weight_decay)
    elif optimizer == "sgd":
        opt = torch.optim.SGD(handle.module.parameters(), lr=lr, momentum=0.9,
                              weight_decay=weight_decay)
    else:
        raise ModelError(f"unknown optimizer {optimizer!r}")
    gen = torch.Generator().manual_seed(seed)
    records = []
    handle.module.train()
    for epoch in range(epochs):
        order = torch.randperm(len(x), generator=gen)
        total_loss, n_correct = 0.0, 0
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            out = handle.module(x[idx])
            per_sample = F.cross_entropy(out, y[idx], reduction="none")
            if w is not None:
                bw = w[idx]
                loss = (per_sample * bw).sum() / bw.sum().clamp_min(1e-12)
            else:
                loss = per_sample.mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += float(loss.detach()) * len(idx)
            n_correct += int((out.argmax(1) == y[idx]).sum())
        records.append({
            "epoch": epoch,
            "loss": total_loss / len(x),
            "accuracy": n_correct / len(x),
        })
    handle.module.eval()
    return records


def train_clean(handle: ModelHandle, dataset: ImageDataset, hyper: TrainHyper) -> ModelHandle:
    """Supervised training on the clean train split; mutates and returns the handle."""
    if dataset.split != "train":
        raise ModelError(f"train_clean expects the train split, got {dataset.split!r}")
    records = train_supervised(
        handle, dataset.images, dataset.labels, hyper.epochs, hyper.lr,
        hyper.batch_size, hyper.seed, optimizer=hyper.optimizer,
        weight_decay=hyper.weight_decay,
    )
    handle.history.extend(records)
    handle.trained = True
    return handle


def get_layer(handle: ModelHandle, layer_id: str) -> torch.nn.Module:
    mods = dict(handle.module.named_modules())
    if layer_id not in mods:
        raise ModelError(f"unknown layer id {layer_id!r} for {handle.arch}; "
                         f"known: {sorted(k for k in mods if k)}")
    return mods[layer_id]


def capture_activations(handle: ModelHandle, layer_id: str, images: np.ndarray,
                        batch_size: int = 256) -> np.ndarray:
    """Pre-activation outputs of one layer, flattened to (N, units). Pure read."""
    layer = get_layer(handle, layer_id)
    _check_shape(handle, images)
    x = to_nchw(images)
    captured: list[np.ndarray] = []

    def hook(_mod, _inp, out):
        captured.append(out.detach().reshape(out.shape[0], -1).numpy().copy())

    h = layer.register_forward_hook(hook)
    try:
        handle.module.eval()
        with torch.no_grad():
            for i in range(0, len(x), batch_size):
                handle.module(x[i : i + batch_size])
    finally:
        h.remove()
    if not captured:
        raise ModelError(f"layer {layer_id!r} never ran in the forward pass")
    return np.concatenate(captured)


# ---------------------------------------------------------------------------
# checkpoints: little-endian float32 parameter block + JSON manifest


def save_checkpoint(handle: ModelHandle, prefix: str | Path) -> tuple[Path, Path]:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    state = handle.module.state_dict()
    layout = []
    blocks = []
    for name, tensor in state.items():
        arr = tensor.detach().numpy().astype("<f4")
        layout.append({"name": name, "shape": list(arr.shape)})
        blocks.append(arr.tobytes())
    bin_path = prefix.with_suffix(".bin")
    json_path = prefix.with_suffix(".json")
    bin_path.write_bytes(b"".join(blocks))
    manifest = {
        "arch": handle.arch,
        "params": handle.params,
        "num_classes": handle.num_classes,
        "input_shape": list(handle.input_shape),
        "seed": handle.seed,
        "trained": handle.trained,
        "history": handle.history,
        "layout": layout,
    }
    json_path.write_text(json.dumps(manifest, indent=2))
    return bin_path, json_path


def load_checkpoint(prefix: str | Path) -> ModelHandle:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    handle = build_model(manifest["arch"], manifest["num_classes"],
                         tuple(manifest["input_shape"]), manifest["seed"],
                         **manifest["params"])
    raw = prefix.with_suffix(".bin").read_bytes()
    state = {}
    offset = 0
    for entry in manifest["layout"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    if offset != len(raw):
        raise ModelError(f"checkpoint block size mismatch: read {offset}, file {len(raw)}")
    handle.module.load_state_dict(state)
    handle.trained = manifest["trained"]
    handle.history = manifest["history"]
    return handle
