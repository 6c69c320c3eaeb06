"""Residual attention classifier: stacked trunk/soft-mask modules whose final
single-channel output serves as a per-pixel attention map."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ModelError


class AttentionModule(nn.Module):
    """One attention stage: output = (1 + mask(x)) * trunk(x).

    The mask branch is a downsample/upsample bottleneck with a sigmoid, so its
    values lie in [0, 1]; the trunk is a plain conv pair.
    """

    def __init__(self, in_ch: int, out_ch: int, nonneg_trunk: bool = False):
        super().__init__()
        # replicate padding keeps the stack translation-invariant and avoids
        # spurious high attention along image borders
        conv = lambda i, o: nn.Conv2d(i, o, 3, padding=1, padding_mode="replicate")
        trunk_layers = [
            conv(in_ch, out_ch),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(),
            conv(out_ch, out_ch),
            nn.BatchNorm2d(out_ch),
        ]
        if nonneg_trunk:
            # final stage: intensity-coded map, high values mark feature evidence
            trunk_layers.append(nn.ReLU())
        self.trunk = nn.Sequential(*trunk_layers)
        self.mask_body = nn.Sequential(
            nn.MaxPool2d(2),
            conv(in_ch, out_ch),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(),
            conv(out_ch, out_ch),
        )

    def mask(self, x: torch.Tensor) -> torch.Tensor:
        m = self.mask_body(x)
        m = F.interpolate(m, size=x.shape[-2:], mode="bilinear", align_corners=True)
        return torch.sigmoid(m)

    @staticmethod
    def combine(trunk_out: torch.Tensor, mask_out: torch.Tensor) -> torch.Tensor:
        return (1.0 + mask_out) * trunk_out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.combine(self.trunk(x), self.mask(x))


class RanLite(nn.Module):
    """Desk-scale residual attention network.

    Three attention modules with channel plan (32, 64, 1); the last module's
    single-channel output is the attention map (8x8 for a 32x32 input). A
    linear head over the flattened map trains the whole stack as a classifier.
    The convolutional path is resolution-agnostic; only the classifier head is
    tied to the training resolution.
    """

    def __init__(self, num_classes: int, input_shape: tuple[int, int, int],
                 channels=(32, 64, 1), stem_ch: int = 16):
        super().__init__()
        h, w, c = input_shape
        if channels[-1] != 1:
            raise ModelError("final attention module must emit a single channel")
        self.input_shape = input_shape
        self.channels = tuple(channels)
        self.stem = nn.Sequential(
            nn.Conv2d(c, stem_ch, 3, padding=1, padding_mode="replicate"),
            nn.BatchNorm2d(stem_ch))
        in_ch = stem_ch
        for i, out_ch in enumerate(self.channels, start=1):
            last = i == len(self.channels)
            setattr(self, f"module{i}", AttentionModule(in_ch, out_ch, nonneg_trunk=last))
            in_ch = out_ch
        self.pool = nn.MaxPool2d(2)
        n_pools = len(self.channels) - 1
        self.map_hw = (h // (2**n_pools), w // (2**n_pools))
        if min(self.map_hw) < 2:
            raise ModelError(f"input {h}x{w} too small for {n_pools} pooling stages")
        self.head = nn.Linear(self.map_hw[0] * self.map_hw[1], num_classes)

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        """Raw final-module map, (B, 1, H/4, W/4) for the default plan."""
        x = F.relu(self.stem(x))
        n = len(self.channels)
        for i in range(1, n + 1):
            x = getattr(self, f"module{i}")(x)
            if i < n:
                x = self.pool(F.relu(x))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        m = self.feature_map(x)
        if m.shape[-2:] != torch.Size(self.map_hw):
            raise ModelError(
                f"classifier head expects a {self.map_hw} map, got {tuple(m.shape[-2:])}"
            )
        return self.head(m.flatten(1))
