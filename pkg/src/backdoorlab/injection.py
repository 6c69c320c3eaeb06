"""Backdoor injection: alternating retraining rounds and the trigger/model
co-optimization loop.

Each co-optimization iteration re-optimizes the trigger against the current
model, then retrains the model for one round. Retraining rounds alternate:
mixed rounds append trigger-stamped, target-labeled copies of part of a fresh
train subset; clean rounds use only benign samples with their true labels.
The first retraining round of a run is always a mixed one, so a single
iteration already injects the backdoor.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .attention import Mask
from .config import AttackConfig
from .data import (ImageDataset, PoisonPlan, TriggerSpec, build_poisoned_set,
                   derive_seed, make_poison_plan)
from .errors import DataError
from .metrics import asr, cda
from .models import ModelHandle, train_supervised
from .trigger import NeuronHandle, default_neuron_layer, optimize_trigger, select_neuron

log = logging.getLogger(__name__)


@dataclass
class CoOptRecord:
    k: int
    mode: str            # mixed | clean
    asr: float
    cda: float
    trigger_loss: float
    trigger_snapshot: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class CoOptResult:
    trigger: TriggerSpec
    model: ModelHandle
    trace: list[CoOptRecord]
    best_iteration: int
    clean_baseline_cda: float
    cda_floor_met: bool
    neuron: NeuronHandle | None = None

    def save_trace(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text("".join(r.to_json() + "\n" for r in self.trace))
        return path


def retrain_mode(k: int) -> str:
    return "mixed" if k % 2 == 0 else "clean"


def alternating_retrain_round(handle: ModelHandle, dataset: ImageDataset,
                              trigger: TriggerSpec, k: int, config: AttackConfig) -> ModelHandle:
    """One retraining round on a fresh random subset of the train split.

    Even k: the clean subset (true labels) is mixed with trigger-stamped,
    target-labeled copies of ``poison_ratio`` of the train split; the batch
    loss weights poisoned terms 1 and clean terms ``omega``. Odd k: clean
    subset only.
    """
    if k < 1:
        raise DataError(f"retraining round index must be >= 1, got {k}")
    rng = np.random.default_rng(derive_seed(config.seed, f"retrain-round-{k}"))
    n = len(dataset)
    subset_idx = np.sort(rng.choice(n, size=max(1, int(round(config.retrain_frac * n))),
                                    replace=False))
    subset = dataset.subset(subset_idx)
    images, labels = subset.images, subset.labels
    weights = None
    if retrain_mode(k) == "mixed" and config.poison_ratio > 0:
        plan = make_poison_plan(dataset, config.target_label, config.poison_ratio,
                                derive_seed(config.seed, f"poison-round-{k}"))
        victims = dataset.subset(plan.poisoned_indices)
        poisoned = build_poisoned_set(
            victims, trigger,
            PoisonPlan(config.target_label, 1.0, np.arange(len(victims)), plan.seed),
        )
        images = np.concatenate([images, poisoned.images])
        labels = np.concatenate([labels, poisoned.labels])
        # loss = mean(poison CE) + omega * mean(clean CE): per-sample weights
        # equalize the two groups' aggregate mass before the omega factor
        weights = np.concatenate([
            np.full(len(subset), config.omega, dtype=np.float32),
            np.full(len(poisoned), len(subset) / len(poisoned), dtype=np.float32),
        ])
    lr = config.retrain_lr
    if retrain_mode(k) == "clean":
        lr *= config.clean_lr_scale
    train_supervised(handle, images, labels, config.retrain_epochs, lr,
                     config.retrain_batch, derive_seed(config.seed, f"retrain-batches-{k}"),
                     sample_weights=weights)
    return handle


def co_optimize(clean_model: ModelHandle, dataset: ImageDataset, config: AttackConfig,
                mask: Mask, eval_dataset: ImageDataset,
                neuron: NeuronHandle | None = None,
                alternating: bool | None = None) -> CoOptResult:
    """Alternate trigger optimization and model retraining for up to
    ``config.max_iters`` rounds.

    Stops early once both ASR and CDA move less than the tolerance for two
    consecutive iterations. Returns the best-ASR iterate whose CDA stays
    within 3 points of the clean baseline; when no iterate meets that floor,
    the best-ASR iterate is returned with ``cda_floor_met`` False.
    """
    if not clean_model.trained:
        raise DataError("co_optimize needs a trained clean model")
    alternating = config.alternating if alternating is None else alternating
    baseline = cda(clean_model, eval_dataset)
    model = clean_model.clone()

    if neuron is None and config.weights.theta > 1.0:
        target_idx = dataset.class_indices(config.target_label)
        if target_idx.size:
            neuron = select_neuron(model, dataset.images[target_idx],
                                   default_neuron_layer(model))

    trace: list[CoOptRecord] = []
    snapshots: list[tuple[TriggerSpec, dict]] = []
    prev_asr = prev_cda = None
    plateau = 0
    warm_values = None
    for i in range(1, config.max_iters + 1):
        trig, history = optimize_trigger(model, mask, dataset, config, neuron=neuron,
                                         init_values=warm_values)
        warm_values = trig.values
        # round parity: first round injects (mixed), later rounds alternate
        round_k = (i + 1) if alternating else 2
        alternating_retrain_round(model, dataset, trig, round_k, config)
        a = asr(model, eval_dataset, trig, config.target_label,
                config.exclude_target_in_asr)
        c = cda(model, eval_dataset)
        trace.append(CoOptRecord(i, retrain_mode(round_k), a, c,
                                 history[-1]["loss"] if history else float("nan"), i - 1))
        snapshots.append((trig, model.state_snapshot()))
        log.info("co-opt iter %d (%s): asr=%.4f cda=%.4f", i, retrain_mode(round_k), a, c)
        if prev_asr is not None and abs(a - prev_asr) < config.tolerance \
                and abs(c - prev_cda) < config.tolerance:
            plateau += 1
            if plateau >= 2:
                break
        else:
            plateau = 0
        prev_asr, prev_cda = a, c

    floor = baseline - 0.03
    eligible = [r for r in trace if r.cda >= floor]
    floor_met = bool(eligible)
    if not floor_met:
        log.warning("no co-opt iterate kept CDA within 3 points of the %.4f baseline", baseline)
        eligible = trace
    best = max(eligible, key=lambda r: (r.asr, r.cda))
    trig, snap = snapshots[best.k - 1]
    model.load_snapshot(snap)
    return CoOptResult(trig, model, trace, best.k, baseline, floor_met, neuron)


ABLATION_VARIANTS = ("base", "base+attn", "base+attn+iter", "all")


@dataclass
class VariantResult:
    variant: str
    asr: float
    cda: float
    mask_provenance: str


def run_ablation(dataset: ImageDataset, config: AttackConfig, variants,
                 clean_model: ModelHandle, attention_mask: Mask | None,
                 eval_dataset: ImageDataset) -> list[VariantResult]:
    """Attack-component ablation under a shared seed and clean model.

    base: corner mask, one trigger pass, one mixed retrain. +attn swaps in the
    attention mask. +iter enables the co-optimization loop with mixed-only
    retraining. all additionally alternates clean rounds.
    """
    from .attention import baseline_mask

    variants = list(variants)
    if not variants:
        raise DataError("run_ablation needs at least one variant")
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise DataError(f"unknown ablation variants {unknown}")
    if any(v != "base" for v in variants) and attention_mask is None:
        raise DataError("attention-based variants need an attention mask")
    corner = baseline_mask(dataset.image_shape[:2], config.trigger_side, "corner")

    rows = []
    for variant in variants:
        mask = corner if variant == "base" else attention_mask
        single_pass = variant in ("base", "base+attn")
        cfg = replace(config,
                      max_iters=1 if single_pass else config.max_iters,
                      alternating=variant == "all")
        result = co_optimize(clean_model, dataset, cfg, mask, eval_dataset)
        rows.append(VariantResult(variant, result.trace[result.best_iteration - 1].asr,
                                  result.trace[result.best_iteration - 1].cda,
                                  mask.provenance))
    return rows
