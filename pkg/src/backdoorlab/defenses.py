"""Defense evaluation harness.

Every routine takes a (model, trigger) pair produced by the attack pipeline
and measures whether the backdoor survives or is exposed. Defenses that
mutate the model (pruning, distillation) operate on private copies; the
analysis routines are pure reads.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageDataset, TriggerSpec, apply_trigger, derive_seed
from .errors import DataError, ModelError, OptimizationError
from .metrics import asr as asr_metric
from .metrics import cda as cda_metric
from .models import ModelHandle, PatchOps, capture_activations, to_nchw, train_supervised

log = logging.getLogger(__name__)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


@dataclass
class DefenseReport:
    defense: str
    data: dict = field(default_factory=dict)
    verdict: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(
            {"defense": self.defense, "data": _jsonable(self.data),
             "verdict": _jsonable(self.verdict)}, indent=2))
        return path

    def save_curve(self, key: str, path: str | Path, header: list[str]) -> Path:
        """Write one curve/histogram entry of ``data`` as CSV rows."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = self.data[key]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow(list(np.atleast_1d(row)))
        return path


# ---------------------------------------------------------------------------
# STRIP


def prediction_entropy(handle: ModelHandle, images: np.ndarray,
                       batch_size: int = 256) -> np.ndarray:
    """Shannon entropy (bits) of the softmax prediction per image."""
    from .models import logits as model_logits

    lg = model_logits(handle, images, batch_size)
    p = torch.softmax(torch.from_numpy(lg), dim=1).numpy()
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(p), 0.0)
    return -terms.sum(axis=1)


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    a, b = np.sort(a), np.sort(b)
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / len(a)
    cdf_b = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.abs(cdf_a - cdf_b).max())


def histogram_overlap(a: np.ndarray, b: np.ndarray, bins: int = 20) -> float:
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        return 1.0
    ha, _ = np.histogram(a, bins=bins, range=(lo, hi))
    hb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    return float(np.minimum(ha / len(a), hb / len(b)).sum())


def strip_entropies(handle: ModelHandle, samples: np.ndarray, overlay_pool: np.ndarray,
                    n_copies: int, seed: int) -> np.ndarray:
    """Mean prediction entropy of each sample across overlay blends.

    Each input is superimposed (pixelwise mean) with ``n_copies`` distinct
    pool images; the entropy of each blend's prediction is averaged.
    """
    if len(overlay_pool) < n_copies:
        raise DataError(f"overlay pool of {len(overlay_pool)} smaller than {n_copies} copies")
    rng = np.random.default_rng(seed)
    means = np.empty(len(samples), dtype=np.float64)
    chunk = max(1, 512 // n_copies)
    for start in range(0, len(samples), chunk):
        block = samples[start : start + chunk]
        blends = []
        for x in block:
            overlays = overlay_pool[rng.choice(len(overlay_pool), n_copies, replace=False)]
            blends.append(0.5 * (x[None] + overlays))
        ent = prediction_entropy(handle, np.concatenate(blends))
        means[start : start + len(block)] = ent.reshape(len(block), n_copies).mean(axis=1)
    return means


def strip_analyze(handle: ModelHandle, samples: np.ndarray, overlay_pool: np.ndarray,
                  n_copies: int = 20, trigger: TriggerSpec | None = None,
                  fpr_budget: float = 0.01, seed: int = 0) -> DefenseReport:
    """Entropy distributions of clean vs triggered inputs plus detection stats.

    The detection threshold is the ``fpr_budget`` quantile of the clean
    entropy distribution; inputs below it are flagged as backdoored.
    """
    clean_ent = strip_entropies(handle, samples, overlay_pool, n_copies, seed)
    threshold = float(np.percentile(clean_ent, 100 * fpr_budget))
    data = {
        "clean_entropies": clean_ent,
        "threshold": threshold,
        "n_copies": n_copies,
        "fpr_budget": fpr_budget,
    }
    verdict = {
        "clean_mean": float(clean_ent.mean()),
        "clean_std": float(clean_ent.std()),
    }
    if trigger is not None:
        triggered = apply_trigger(samples, trigger)
        trig_ent = strip_entropies(handle, triggered, overlay_pool, n_copies,
                                   derive_seed(seed, "strip-triggered"))
        data["triggered_entropies"] = trig_ent
        verdict.update({
            "triggered_mean": float(trig_ent.mean()),
            "mean_gap": float(abs(trig_ent.mean() - clean_ent.mean())),
            "detection_rate": float(np.mean(trig_ent < threshold)),
            "ks_statistic": ks_statistic(clean_ent, trig_ent),
            "histogram_overlap": histogram_overlap(clean_ent, trig_ent),
        })
    return DefenseReport("strip", data, verdict)


# ---------------------------------------------------------------------------
# pruning


def prunable_layer(handle: ModelHandle) -> str:
    if handle.arch == "cnn_small":
        return "fc1"
    raise ModelError(f"{handle.arch} exposes no prunable unit layer")


def prune_sweep(handle: ModelHandle, val_dataset: ImageDataset, trigger: TriggerSpec,
                target_label: int, cda_floor: float = 0.8,
                chunk: int | None = None) -> DefenseReport:
    """Cumulatively silence units in ascending order of mean clean activation.

    Records (fraction pruned, ASR, CDA) after every chunk until the clean
    accuracy first drops below ``cda_floor``; reports the ASR at that
    crossing. The model is cloned, the input handle is untouched.
    """
    if not (0.0 < cda_floor < 1.0):
        raise DataError("cda_floor must be in (0, 1)")
    layer_id = prunable_layer(handle)
    victim = handle.clone()
    acts = capture_activations(victim, layer_id, val_dataset.images)
    mean_act = np.maximum(acts, 0.0).mean(axis=0)
    order = np.argsort(mean_act, kind="stable")
    n_units = len(order)
    chunk = chunk or max(1, n_units // 25)

    layer = dict(victim.module.named_modules())[layer_id]
    curve = [(0.0,
              asr_metric(victim, val_dataset, trigger, target_label),
              cda_metric(victim, val_dataset))]
    asr_at_floor = None
    pruned = 0
    with torch.no_grad():
        while pruned < n_units:
            units = order[pruned : pruned + chunk]
            layer.weight[units, :] = 0.0
            if layer.bias is not None:
                layer.bias[units] = 0.0
            pruned += len(units)
            a = asr_metric(victim, val_dataset, trigger, target_label)
            c = cda_metric(victim, val_dataset)
            curve.append((pruned / n_units, a, c))
            if c < cda_floor:
                asr_at_floor = a
                break
    crossed = asr_at_floor is not None
    return DefenseReport(
        "prune",
        {"curve": [list(p) for p in curve], "layer": layer_id, "cda_floor": cda_floor},
        {"asr_at_floor": asr_at_floor if crossed else curve[-1][1],
         "floor_crossed": crossed,
         "pruned_fraction_at_floor": curve[-1][0]},
    )


# ---------------------------------------------------------------------------
# trigger reversal + anomaly scoring


@dataclass
class ReversedTrigger:
    label: int
    mask: np.ndarray      # (H, W) in [0, 1]
    pattern: np.ndarray   # (H, W, C) in [0, 1]
    norm: float           # L1 norm of the mask


def reverse_trigger(handle: ModelHandle, label: int, val_images: np.ndarray,
                    budget: int = 300, l1_weight: float = 1e-3, lr: float = 0.1,
                    batch_size: int = 64, seed: int = 0,
                    success_goal: float = 0.97) -> ReversedTrigger:
    """Reverse-engineer a minimal blend that drives every input to ``label``.

    Optimizes a sigmoid-parameterized mask and pattern minimizing
    cross-entropy to the label plus an L1 penalty on the mask. The penalty
    weight starts at ``l1_weight`` and adapts: it grows while the blend keeps
    the label (shrinking the mask) and backs off when the label is lost.
    Returns the smallest-norm iterate that still met the success goal.
    """
    h, w, c = val_images.shape[1:]
    raw_mask = torch.full((h, w), -2.0, requires_grad=True)
    raw_pattern = torch.zeros((c, h, w), requires_grad=True)
    opt = torch.optim.Adam([raw_mask, raw_pattern], lr=lr)
    frozen = [p for p in handle.module.parameters() if p.requires_grad]
    for p in frozen:
        p.requires_grad_(False)
    handle.module.eval()
    rng = np.random.default_rng(seed)
    lam = l1_weight
    best = None
    try:
        for step in range(budget):
            idx = rng.choice(len(val_images), min(batch_size, len(val_images)),
                             replace=False)
            x = to_nchw(val_images[idx])
            m = torch.sigmoid(raw_mask)
            p = torch.sigmoid(raw_pattern)
            blended = (1 - m) * x + m * p
            logits_b = handle.module(blended)
            loss = F.cross_entropy(logits_b,
                                   torch.full((len(idx),), label, dtype=torch.long))
            loss = loss + lam * m.abs().sum()
            if not torch.isfinite(loss):
                raise OptimizationError(f"trigger reversal diverged at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                success = float((logits_b.argmax(1) == label).float().mean())
                norm = float(torch.sigmoid(raw_mask).abs().sum())
            if success >= success_goal:
                if best is None or norm < best[0]:
                    best = (norm, torch.sigmoid(raw_mask).detach().clone(),
                            torch.sigmoid(raw_pattern).detach().clone())
                lam = min(lam * 1.3, 1.0)
            else:
                lam = max(lam / 1.3, 1e-5)
    finally:
        for p in frozen:
            p.requires_grad_(True)
    if best is None:
        final_mask = torch.sigmoid(raw_mask).detach()
        best = (float(final_mask.abs().sum()), final_mask,
                torch.sigmoid(raw_pattern).detach())
    norm, mask_t, pattern_t = best
    return ReversedTrigger(label, mask_t.numpy(), pattern_t.numpy().transpose(1, 2, 0),
                           norm)


def mad_anomaly(norms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Median-absolute-deviation anomaly indices for per-label trigger norms.

    index_i = |norm_i - median| / (1.4826 * MAD). Labels with index > 2 AND a
    below-median norm are flagged. All-equal norms give all-zero indices; a
    zero MAD with unequal norms marks every deviating label as infinitely
    anomalous.
    """
    norms = np.asarray(norms, dtype=np.float64)
    if len(norms) < 3:
        raise DataError("anomaly scoring needs norms for at least 3 labels")
    med = np.median(norms)
    abs_dev = np.abs(norms - med)
    mad = np.median(abs_dev)
    if mad == 0:
        indices = np.where(abs_dev > 0, np.inf, 0.0)
    else:
        indices = abs_dev / (1.4826 * mad)
    flagged = (indices > 2.0) & (norms < med)
    return indices, flagged


def nc_scan(handle: ModelHandle, val_dataset: ImageDataset, budget: int = 300,
            l1_weight: float = 1e-3, lr: float = 0.1, seed: int = 0,
            labels: list[int] | None = None) -> DefenseReport:
    """Run trigger reversal for every label and score anomalies."""
    labels = list(range(handle.num_classes)) if labels is None else labels
    norms = []
    for lab in labels:
        rev = reverse_trigger(handle, lab, val_dataset.images, budget=budget,
                              l1_weight=l1_weight, lr=lr,
                              seed=derive_seed(seed, f"nc-{lab}"))
        norms.append(rev.norm)
        log.info("nc label %d: mask norm %.3f", lab, rev.norm)
    norms = np.asarray(norms)
    indices, flagged = mad_anomaly(norms)
    return DefenseReport(
        "nc",
        {"labels": labels, "norms": norms, "anomaly_indices": indices,
         "flagged": flagged.astype(int), "budget": budget, "l1_weight": l1_weight},
        {"flagged_labels": [int(l) for l, f in zip(labels, flagged) if f],
         "max_index": float(indices.max())},
    )


# ---------------------------------------------------------------------------
# distillation repair


def activation_attention_map(features: torch.Tensor) -> torch.Tensor:
    """Channel-summed squared activations, flattened and L2-normalized per sample."""
    if features.dim() == 4:          # conv: (B, C, H, W) -> (B, H*W)
        amap = (features**2).sum(dim=1).flatten(1)
    elif features.dim() == 3:        # tokens: (B, n, d) -> (B, n)
        amap = (features**2).sum(dim=2)
    else:
        raise ModelError(f"unsupported feature rank {features.dim()}")
    return amap / amap.norm(dim=1, keepdim=True).clamp_min(1e-12)


def attention_alignment(student_features: torch.Tensor,
                        teacher_features: torch.Tensor) -> torch.Tensor:
    """Squared distance between normalized attention maps, mean over the batch."""
    s = activation_attention_map(student_features)
    t = activation_attention_map(teacher_features)
    return ((s - t) ** 2).sum(dim=1).mean()


def _distill_layer(handle: ModelHandle) -> str:
    if handle.arch == "cnn_small":
        return f"conv{len(handle.module.channels)}"
    if handle.arch == "vit_lite":
        return f"block{handle.module.depth}"
    raise ModelError(f"no distillation layer defined for {handle.arch}")


def nad_distill(handle: ModelHandle, clean_subset: ImageDataset,
                eval_dataset: ImageDataset, trigger: TriggerSpec | None = None,
                target_label: int | None = None, finetune_epochs: int = 2,
                distill_epochs: int = 2, lr: float = 5e-4, beta: float = 100.0,
                batch_size: int = 64, seed: int = 0) -> tuple[ModelHandle, DefenseReport]:
    """Distillation repair: fine-tune a teacher on clean data, then retrain the
    model with cross-entropy plus attention-map alignment to the teacher.

    Returns the repaired model and a report with before/after (ASR, CDA).
    """
    layer_id = _distill_layer(handle)
    before = {"cda": cda_metric(handle, eval_dataset)}
    if trigger is not None:
        before["asr"] = asr_metric(handle, eval_dataset, trigger, target_label)

    teacher = handle.clone()
    train_supervised(teacher, clean_subset.images, clean_subset.labels,
                     finetune_epochs, lr, batch_size, derive_seed(seed, "nad-teacher"))
    student = handle.clone()

    t_layer = dict(teacher.module.named_modules())[layer_id]
    s_layer = dict(student.module.named_modules())[layer_id]
    grabbed: dict[str, torch.Tensor] = {}
    hooks = [
        t_layer.register_forward_hook(lambda m, i, o: grabbed.__setitem__("t", o)),
        s_layer.register_forward_hook(lambda m, i, o: grabbed.__setitem__("s", o)),
    ]
    x_all = to_nchw(clean_subset.images)
    y_all = torch.from_numpy(clean_subset.labels)
    opt = torch.optim.Adam(student.module.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(derive_seed(seed, "nad-student"))
    teacher.module.eval()
    student.module.train()
    try:
        for _ in range(distill_epochs):
            order = torch.randperm(len(x_all), generator=gen)
            for i in range(0, len(order), batch_size):
                idx = order[i : i + batch_size]
                with torch.no_grad():
                    teacher.module(x_all[idx])
                t_feat = grabbed["t"].detach()
                out = student.module(x_all[idx])
                loss = F.cross_entropy(out, y_all[idx]) \
                    + beta * attention_alignment(grabbed["s"], t_feat)
                opt.zero_grad()
                loss.backward()
                opt.step()
    finally:
        for h in hooks:
            h.remove()
    student.module.eval()

    after = {"cda": cda_metric(student, eval_dataset)}
    if trigger is not None:
        after["asr"] = asr_metric(student, eval_dataset, trigger, target_label)
    report = DefenseReport(
        "nad",
        {"layer": layer_id, "beta": beta, "finetune_epochs": finetune_epochs,
         "distill_epochs": distill_epochs},
        {"before": before, "after": after,
         "asr_drop": (before.get("asr", 0.0) - after.get("asr", 0.0))
         if trigger is not None else None,
         "cda_drop": before["cda"] - after["cda"]},
    )
    return student, report


# ---------------------------------------------------------------------------
# transformer patch processing


def _patched_predict(handle: ModelHandle, images: np.ndarray, drop_frac: float,
                     shuffle_frac: float, seed: int, batch_size: int = 128) -> np.ndarray:
    module = handle.module
    n_patches = module.num_patches
    rng = np.random.default_rng(seed)
    x = to_nchw(images)
    preds = []
    module.eval()
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            n_keep = int(round((1.0 - drop_frac) * n_patches))
            keep = np.sort(rng.choice(n_patches, size=n_keep, replace=False))
            perm = np.arange(n_keep)
            n_shuffle = int(round(shuffle_frac * n_keep))
            if n_shuffle >= 2:
                chosen = rng.choice(n_keep, size=n_shuffle, replace=False)
                perm[np.sort(chosen)] = perm[chosen[np.argsort(rng.random(n_shuffle))]]
            ops = PatchOps(keep=keep, perm=perm)
            out = module(x[i : i + batch_size], patch_ops=ops).numpy()
            preds.append(np.argmax(out, axis=1))
    return np.concatenate(preds)


def patch_process_defense(handle: ModelHandle, dataset: ImageDataset,
                          drop_frac: float, shuffle_frac: float,
                          trigger: TriggerSpec | None = None,
                          target_label: int | None = None,
                          seed: int = 0) -> DefenseReport:
    """Drop and shuffle patch tokens before positional encoding, then measure
    how clean accuracy and the attack respond."""
    if handle.arch != "vit_lite":
        raise ModelError("patch processing applies to the transformer victim only")
    if not (0.0 <= drop_frac <= 1.0 and 0.0 <= shuffle_frac <= 1.0):
        raise DataError("fractions must lie in [0, 1]")
    labels = dataset.labels
    undefended = drop_frac == 0.0 and shuffle_frac == 0.0
    if undefended:
        from .models import predict
        preds = predict(handle, dataset.images)
    else:
        preds = _patched_predict(handle, dataset.images, drop_frac, shuffle_frac, seed)
    cda_v = float(np.mean(preds == labels))
    verdict = {"cda": cda_v, "drop_frac": drop_frac, "shuffle_frac": shuffle_frac}
    if trigger is not None:
        keep = labels != target_label
        triggered = apply_trigger(dataset.images[keep], trigger)
        if undefended:
            from .models import predict
            t_preds = predict(handle, triggered)
        else:
            t_preds = _patched_predict(handle, triggered, drop_frac, shuffle_frac,
                                       derive_seed(seed, "patch-trig"))
        verdict["asr"] = float(np.mean(t_preds == target_label))
    return DefenseReport("patch", {"drop_frac": drop_frac, "shuffle_frac": shuffle_frac},
                         verdict)
