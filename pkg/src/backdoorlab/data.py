"""Dataset loading, trigger blending, and poisoned-set construction.

Images are float32 arrays of shape (N, H, W, C) with values in [0, 1];
labels are int64 class indices. Everything here is pure and reentrant:
functions never mutate their inputs and are safe to call from parallel
workers.
"""
from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32


def derive_seed(master: int, tag: str) -> int:
    """Stable per-purpose seed derived from a master seed and a short tag."""
    return (int(master) * 2654435761 + zlib.crc32(tag.encode())) % (2**31)


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"
    name: str = "unnamed"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(
                f"count mismatch: {len(self.images)} images vs {len(self.labels)} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixel values outside [0, 1]")
        bad = np.nonzero((self.labels < 0) | (self.labels >= self.num_classes))[0]
        if bad.size:
            raise DataError(f"label out of range at index {bad[0]}: {self.labels[bad[0]]}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, split: str | None = None) -> "ImageDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageDataset(
            self.images[idx].copy(), self.labels[idx].copy(), self.num_classes,
            split or self.split, self.name,
        )

    def class_indices(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]


@dataclass
class TriggerSpec:
    """A portable trigger: pixel coordinates, per-pixel values, and a blend weight.

    ``transparency`` is the weight of the original pixels: 0 means the trigger
    fully replaces the masked pixels, values near 1 are nearly invisible.
    """

    coords: np.ndarray        # (K, 2) int64 (row, col)
    values: np.ndarray        # (K, C) float32 in [0, 1]
    transparency: float
    side_hint: int
    image_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if len(self.coords) != len(self.values):
            raise DataError("coords and values length mismatch")
        if not (0.0 <= self.transparency < 1.0):
            raise DataError(f"transparency must be in [0, 1), got {self.transparency}")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise DataError("trigger values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.coords)

    def save(self, prefix: str | Path) -> tuple[Path, Path]:
        """Write ``<prefix>.bin`` (little-endian float32 values) + ``<prefix>.json``."""
        prefix = Path(prefix)
        if self.image_shape is None:
            raise DataError("cannot save a trigger without image_shape")
        h, w, c = self.image_shape
        bin_path = prefix.with_suffix(".bin")
        json_path = prefix.with_suffix(".json")
        bin_path.write_bytes(self.values.astype("<f4").tobytes())
        sidecar = {
            "height": int(h),
            "width": int(w),
            "channels": int(c),
            "mask_coords": self.coords.tolist(),
            "transparency": float(self.transparency),
            "side_hint": int(self.side_hint),
        }
        json_path.write_text(json.dumps(sidecar, indent=2))
        return bin_path, json_path

    @classmethod
    def load(cls, prefix: str | Path) -> "TriggerSpec":
        prefix = Path(prefix)
        sidecar = json.loads(prefix.with_suffix(".json").read_text())
        coords = np.asarray(sidecar["mask_coords"], dtype=np.int64)
        raw = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f4")
        c = sidecar["channels"]
        if raw.size != len(coords) * c:
            raise DataError(
                f"trigger value block has {raw.size} floats, expected {len(coords) * c}"
            )
        return cls(
            coords=coords,
            values=raw.reshape(len(coords), c).copy(),
            transparency=sidecar["transparency"],
            side_hint=sidecar["side_hint"],
            image_shape=(sidecar["height"], sidecar["width"], sidecar["channels"]),
        )


@dataclass
class PoisonPlan:
    target_label: int
    ratio: float
    poisoned_indices: np.ndarray  # sorted, unique
    seed: int

    def __post_init__(self):
        self.poisoned_indices = np.asarray(self.poisoned_indices, dtype=np.int64)


def make_poison_plan(dataset: ImageDataset, target_label: int, ratio: float, seed: int) -> PoisonPlan:
    """Choose round(ratio * N) sample indices uniformly without replacement."""
    if not (0.0 <= ratio <= 1.0):
        raise DataError(f"poison ratio must be in [0, 1], got {ratio}")
    if not (0 <= target_label < dataset.num_classes):
        raise DataError(f"target label {target_label} out of range")
    n = len(dataset)
    count = int(round(ratio * n))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=count, replace=False) if count else np.empty(0, np.int64)
    return PoisonPlan(target_label, ratio, np.sort(chosen), seed)


def apply_trigger(image: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Blend the trigger into one image (H, W, C) or a batch (N, H, W, C).

    Masked pixels become t*image + (1-t)*value; all other pixels are
    untouched (exact copies). Output is clipped to [0, 1].
    """
    img = np.asarray(image, dtype=np.float32)
    single = img.ndim == 3
    batch = img[None] if single else img
    _, h, w, c = batch.shape
    rows, cols = trigger.coords[:, 0], trigger.coords[:, 1]
    if rows.size and (rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w):
        raise DataError("trigger coordinate out of image bounds")
    out = batch.copy()
    t = trigger.transparency
    blended = t * batch[:, rows, cols, :] + (1.0 - t) * trigger.values[None, :, :]
    out[:, rows, cols, :] = np.clip(blended, 0.0, 1.0)
    return out[0] if single else out


def build_poisoned_set(dataset: ImageDataset, trigger: TriggerSpec, plan: PoisonPlan) -> ImageDataset:
    """Copy the dataset, stamping the trigger and the target label at planned indices."""
    idx = plan.poisoned_indices
    if idx.size and (idx.min() < 0 or idx.max() >= len(dataset)):
        raise DataError("poison plan index out of range")
    if not (0 <= plan.target_label < dataset.num_classes):
        raise DataError(f"target label {plan.target_label} out of range")
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    if idx.size:
        images[idx] = apply_trigger(dataset.images[idx], trigger)
        labels[idx] = plan.target_label
    return ImageDataset(images, labels, dataset.num_classes, dataset.split, dataset.name)


def _bilinear_weights(n_in: int, n_out: int):
    """Corner-aligned source indices and weights along one axis."""
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out, dtype=np.float64)
    else:
        src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(src).astype(np.int64), 0, max(n_in - 1, 0))
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (src - lo).astype(np.float32)
    return lo, hi, frac


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of (H, W), (H, W, C), or (N, H, W, C) arrays."""
    if out_h < 1 or out_w < 1:
        raise DataError("output size must be >= 1")
    img = np.asarray(image, dtype=np.float32)
    squeeze_channel = img.ndim == 2
    if squeeze_channel:
        img = img[..., None]
    single = img.ndim == 3
    batch = img[None] if single else img
    _, h, w, _ = batch.shape
    r_lo, r_hi, r_f = _bilinear_weights(h, out_h)
    c_lo, c_hi, c_f = _bilinear_weights(w, out_w)
    top = batch[:, r_lo][:, :, c_lo] * (1 - c_f)[None, None, :, None] \
        + batch[:, r_lo][:, :, c_hi] * c_f[None, None, :, None]
    bot = batch[:, r_hi][:, :, c_lo] * (1 - c_f)[None, None, :, None] \
        + batch[:, r_hi][:, :, c_hi] * c_f[None, None, :, None]
    out = top * (1 - r_f)[None, :, None, None] + bot * r_f[None, :, None, None]
    out = out.astype(np.float32)
    if single:
        out = out[0]
    if squeeze_channel:
        out = out[..., 0]
    return out


def resize_dataset(dataset: ImageDataset, out_h: int, out_w: int) -> ImageDataset:
    """Resize every image; used to feed low-res datasets to the 224px transformer."""
    if dataset.image_shape[:2] == (out_h, out_w):
        return dataset
    images = np.clip(resize_bilinear(dataset.images, out_h, out_w), 0.0, 1.0)
    return ImageDataset(images, dataset.labels.copy(), dataset.num_classes,
                        dataset.split, f"{dataset.name}@{out_h}x{out_w}")


# ---------------------------------------------------------------------------
# loaders


def _load_cifar_binary(path: Path, num_classes: int = 10) -> ImageDataset:
    """Public CIFAR-10 binary batches: 1 label byte + 3072 channel-major pixel bytes."""
    if path.is_dir():
        files = sorted(path.glob("*.bin"))
        if not files:
            raise DataError(f"no .bin batches under {path}")
    else:
        files = [path]
    images, labels = [], []
    for f in files:
        raw = f.read_bytes()
        if len(raw) % CIFAR_RECORD_BYTES:
            raise DataError(
                f"{f}: size {len(raw)} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record"
            )
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        lab = arr[:, 0].astype(np.int64)
        bad = np.nonzero(lab >= num_classes)[0]
        if bad.size:
            raise DataError(f"{f}: label out of range at record {bad[0]}: {lab[bad[0]]}")
        # channel-major (3, 32, 32) -> (32, 32, 3)
        imgs = arr[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        images.append(imgs.astype(np.float32) / 255.0)
        labels.append(lab)
    return ImageDataset(np.concatenate(images), np.concatenate(labels), num_classes,
                        name="cifar_binary")


def _load_image_folder(path: Path) -> ImageDataset:
    """Directory of PNG files plus a labels.csv of (filename, label) rows."""
    from PIL import Image

    labels_csv = path / "labels.csv"
    if not labels_csv.exists():
        raise DataError(f"missing {labels_csv}")
    with open(labels_csv, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    pngs = sorted(p.name for p in path.glob("*.png"))
    if len(rows) != len(pngs):
        raise DataError(f"count mismatch: {len(pngs)} PNGs vs {len(rows)} label rows")
    images, labels = [], []
    for i, (fname, label) in enumerate(rows):
        f = path / fname
        if not f.exists():
            raise DataError(f"labels.csv row {i}: missing file {fname}")
        arr = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0
        images.append(arr)
        labels.append(int(label))
    images = np.stack(images)
    labels = np.asarray(labels, dtype=np.int64)
    return ImageDataset(images, labels, int(labels.max()) + 1, name=path.name)


def make_synthetic(n: int, height: int = 32, width: int = 32, channels: int = 3,
                   num_classes: int = 4, seed: int = 0, split: str = "train",
                   name: str = "synthetic") -> ImageDataset:
    """Seeded synthetic classification set: class-specific central blob patterns
    over per-sample low-frequency textured backgrounds.

    Class structure lives well inside the image (a border margin stays pure
    background), so corner pixels carry no label information. The textured
    background and per-sample jitter keep single images hard to memorize. The
    same seed yields the same class templates for the train and test splits;
    only the per-sample noise stream differs between splits.
    """
    template_rng = np.random.default_rng(derive_seed(seed, "templates"))
    margin_r = max(2, height // 5)
    margin_c = max(2, width // 5)
    blob_parts = np.zeros((num_classes, 3, height, width, channels), dtype=np.float32)
    yy, xx = np.mgrid[0:height, 0:width]
    for k in range(num_classes):
        for b in range(3):
            cy = template_rng.uniform(margin_r, height - margin_r)
            cx = template_rng.uniform(margin_c, width - margin_c)
            sigma = template_rng.uniform(0.05, 0.11) * min(height, width)
            amp = template_rng.uniform(0.6, 1.0)
            color = template_rng.uniform(0.2, 1.0, size=channels)
            blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
            blob_parts[k, b] = blob[:, :, None] * color[None, None, :]
        peak = blob_parts[k].sum(axis=0).max()
        if peak > 0:
            blob_parts[k] /= peak

    rng = np.random.default_rng(derive_seed(seed, f"samples-{split}"))
    labels = rng.integers(0, num_classes, size=n)
    images = np.empty((n, height, width, channels), dtype=np.float32)
    shift_max = max(1, height // 10)
    coarse = max(2, height // 2)
    for i in range(n):
        # per-sample jitter: blob dropout, amplitude spread, small shifts
        keep = rng.random(3) < 0.85
        if not keep.any():
            keep[rng.integers(0, 3)] = True
        t = blob_parts[labels[i]][keep].sum(axis=0)
        dy, dx = rng.integers(-shift_max, shift_max + 1, size=2)
        t = np.roll(np.roll(t, dy, axis=0), dx, axis=1)
        field = rng.uniform(0.15, 0.75, size=(coarse, coarse, channels))
        background = resize_bilinear(field, height, width)
        img = background + 0.45 * t * rng.uniform(0.35, 1.25)
        img += rng.normal(0.0, 0.10, size=img.shape)
        img += rng.uniform(-0.06, 0.06)
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageDataset(images, labels, num_classes, split, name)


def load_dataset(path: str | Path | None = None, format: str = "synthetic",
                 **kwargs) -> ImageDataset:
    """Load a dataset; ``format`` is one of cifar_binary, image_folder, synthetic."""
    if format == "synthetic":
        return make_synthetic(**kwargs)
    if path is None:
        raise DataError(f"format {format!r} requires a path")
    p = Path(path)
    if not p.exists():
        raise DataError(f"dataset path does not exist: {p}")
    if format == "cifar_binary":
        ds = _load_cifar_binary(p, **kwargs)
    elif format == "image_folder":
        ds = _load_image_folder(p)
    else:
        raise DataError(f"unknown dataset format {format!r}")
    return ds
