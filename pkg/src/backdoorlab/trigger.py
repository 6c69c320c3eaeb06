"""Key-neuron selection and trigger value optimization.

The trigger is optimized over a fixed pixel mask with Adam, minimizing
cross-entropy toward the target label plus a max-norm visibility term and a
structural-similarity penalty. The gradient flowing through one selected
neuron (the unit most activated by target-class samples) is amplified by a
configurable factor during backpropagation.
"""
from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .attention import Mask
from .config import AttackConfig, QoEWeights
from .data import ImageDataset, TriggerSpec, derive_seed
from .errors import DataError, ModelError, OptimizationError
from .metrics import SSIMParams, ssim_torch
from .models import ModelHandle, capture_activations, get_layer, to_nchw

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NeuronHandle:
    layer_id: str
    index: int


def default_neuron_layer(handle: ModelHandle) -> str:
    """First fully-connected layer for the CNN, head layer for the transformer."""
    if handle.arch == "cnn_small":
        return "fc1"
    if handle.arch == "vit_lite":
        return "head"
    raise ModelError(f"no neuron-residing layer defined for {handle.arch}")


def best_unit(activations: np.ndarray) -> int:
    """Rank units by positive-activation count, then mean, then lower index."""
    acts = np.asarray(activations)
    counts = (acts > 0).sum(axis=0)
    means = acts.mean(axis=0)
    n_units = acts.shape[1]
    order = np.lexsort((np.arange(n_units), -means, -counts))
    return int(order[0])


def select_neuron(handle: ModelHandle, target_images: np.ndarray,
                  layer_id: str | None = None) -> NeuronHandle:
    """Unit with the most positive pre-activations over target-class samples.

    Ties break toward the larger mean activation, then the lower unit index.
    For the transformer the head layer is always used, whatever was requested.
    """
    if len(target_images) == 0:
        raise DataError("select_neuron needs at least one target-class sample")
    if handle.arch == "vit_lite":
        layer_id = "head"
    elif layer_id is None:
        layer_id = default_neuron_layer(handle)
    acts = capture_activations(handle, layer_id, target_images)
    return NeuronHandle(layer_id, best_unit(acts))


class _GradScale(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, factor):
        ctx.factor = factor
        return x

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.factor, None


class NeuronBoost:
    """Forward hook that multiplies the gradient through one unit by theta."""

    def __init__(self, handle: ModelHandle, neuron: NeuronHandle, theta: float):
        if theta < 1:
            raise OptimizationError(f"augmentation factor must be >= 1, got {theta}")
        self.layer = get_layer(handle, neuron.layer_id)
        self.neuron = neuron
        self.theta = float(theta)
        self.fired = 0
        self._hook = None

    def _apply(self, _mod, _inp, out):
        if self.neuron.index >= out.shape[1]:
            raise ModelError(
                f"neuron index {self.neuron.index} out of range for "
                f"layer {self.neuron.layer_id} with {out.shape[1]} units"
            )
        self.fired += 1
        boosted = out.clone()
        boosted[:, self.neuron.index] = _GradScale.apply(out[:, self.neuron.index], self.theta)
        return boosted

    def __enter__(self):
        self._hook = self.layer.register_forward_hook(self._apply)
        return self

    def __exit__(self, *exc):
        self._hook.remove()
        if self.fired == 0:
            log.warning("neuron %s never appeared on a forward path; boost had no effect",
                        self.neuron)
        return False


@contextmanager
def neuron_boost(handle: ModelHandle, neuron: NeuronHandle | None, theta: float):
    if neuron is None or theta == 1.0:
        yield None
        return
    with NeuronBoost(handle, neuron, theta) as b:
        yield b


def blend_batch(x: torch.Tensor, coords: np.ndarray, values: torch.Tensor,
                transparency: float) -> torch.Tensor:
    """Differentiable trigger blend on an NCHW batch."""
    rows = torch.as_tensor(coords[:, 0], dtype=torch.long)
    cols = torch.as_tensor(coords[:, 1], dtype=torch.long)
    out = x.clone()
    out[:, :, rows, cols] = transparency * x[:, :, rows, cols] \
        + (1.0 - transparency) * values.T.unsqueeze(0)
    return out


def qoe_loss_terms(handle: ModelHandle, values: torch.Tensor, coords: np.ndarray,
                   x: torch.Tensor, target_label: int, weights: QoEWeights,
                   transparency: float, ssim_params: SSIMParams | None = None):
    """Loss tensor plus its parts; keeps the autograd graph alive."""
    x_t = blend_batch(x, coords, values, transparency)
    logits_t = handle.module(x_t)
    labels = torch.full((len(x),), target_label, dtype=torch.long)
    ce = F.cross_entropy(logits_t, labels)
    linf = (x_t - x).abs().amax(dim=(1, 2, 3)).mean()
    sim = ssim_torch(x, x_t, ssim_params)
    loss = ce + weights.lam * linf + weights.eta * (1.0 - sim)
    parts = {"ce": float(ce.detach()), "linf": float(linf.detach()),
             "ssim": float(sim.detach())}
    return loss, parts


def qoe_loss(handle: ModelHandle, trigger_values: np.ndarray, mask: Mask,
             batch: np.ndarray, target_label: int, weights: QoEWeights,
             transparency: float, neuron: NeuronHandle | None = None,
             theta: float | None = None):
    """Scalar QoE-augmented loss and its gradient over the masked trigger values.

    The model is treated as frozen; the returned gradient has the shape of
    ``trigger_values``. When a neuron is given, its gradient path is amplified
    during backpropagation.
    """
    values = torch.tensor(np.asarray(trigger_values, dtype=np.float32), requires_grad=True)
    x = to_nchw(batch)
    handle.module.eval()
    theta = weights.theta if theta is None else theta
    with neuron_boost(handle, neuron, theta):
        loss, parts = qoe_loss_terms(handle, values, mask.coords, x, target_label,
                                     weights, transparency)
        if not torch.isfinite(loss):
            raise OptimizationError("QoE loss is non-finite")
        loss.backward()
    return float(loss), values.grad.numpy().copy(), parts


def init_trigger_values(dataset: ImageDataset, mask: Mask, target_label: int) -> np.ndarray:
    """Starting values: the per-coordinate pixel mean of target-class samples
    (falls back to the whole split when the class is empty). Keeps the initial
    blend close to natural image statistics."""
    idx = dataset.class_indices(target_label)
    pool = dataset.images[idx] if idx.size else dataset.images
    rows, cols = mask.coords[:, 0], mask.coords[:, 1]
    return pool[:, rows, cols, :].mean(axis=0).astype(np.float32)


def optimize_trigger(handle: ModelHandle, mask: Mask, dataset: ImageDataset,
                     config: AttackConfig, neuron: NeuronHandle | None = None,
                     ssim_params: SSIMParams | None = None,
                     init_values: np.ndarray | None = None):
    """Adam over the masked trigger values against a frozen model.

    Values are clamped to [0, 1] after every step; the best-loss iterate is
    returned as a TriggerSpec carrying the configured transparency, together
    with the per-step loss history. ``init_values`` warm-starts the iterate
    (the co-optimization loop passes the previous round's trigger).
    """
    h, w, c = dataset.image_shape
    rows, cols = mask.coords[:, 0], mask.coords[:, 1]
    if rows.size and (rows.max() >= h or cols.max() >= w):
        raise DataError(f"mask does not fit {h}x{w} images")
    if init_values is not None:
        init = np.asarray(init_values, dtype=np.float32).reshape(len(mask.coords), c)
    else:
        init = init_trigger_values(dataset, mask, config.target_label)
    spec = lambda vals: TriggerSpec(mask.coords.copy(), vals, config.transparency,
                                    config.trigger_side, dataset.image_shape)
    if config.trigger_steps == 0:
        return spec(init), []

    values = torch.nn.Parameter(torch.tensor(init))
    opt = torch.optim.Adam([values], lr=config.trigger_lr)
    frozen = [p for p in handle.module.parameters() if p.requires_grad]
    for p in frozen:
        p.requires_grad_(False)
    handle.module.eval()

    rng = np.random.default_rng(derive_seed(config.seed, "trigger-batches"))
    order = rng.permutation(len(dataset))
    cursor = 0
    best_loss, best_values = np.inf, init
    history = []
    finite_steps = 0
    try:
        with neuron_boost(handle, neuron, config.weights.theta):
            for step in range(config.trigger_steps):
                if cursor + config.trigger_batch > len(order):
                    order = rng.permutation(len(dataset))
                    cursor = 0
                idx = order[cursor : cursor + config.trigger_batch]
                cursor += config.trigger_batch
                x = to_nchw(dataset.images[idx])
                loss, parts = qoe_loss_terms(
                    handle, values, mask.coords, x, config.target_label,
                    config.weights, config.transparency, ssim_params)
                if not torch.isfinite(loss):
                    continue
                finite_steps += 1
                loss_val = float(loss.detach())
                if loss_val < best_loss:
                    best_loss = loss_val
                    best_values = values.detach().numpy().copy()
                opt.zero_grad()
                loss.backward()
                opt.step()
                with torch.no_grad():
                    values.clamp_(0.0, 1.0)
                history.append({"step": step, "loss": loss_val, **parts})
    finally:
        for p in frozen:
            p.requires_grad_(True)
    if finite_steps == 0:
        raise OptimizationError("every trigger optimization step produced a non-finite loss")
    return spec(np.clip(best_values, 0.0, 1.0)), history
