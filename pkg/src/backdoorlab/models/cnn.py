"""Small convolutional victim: 4 conv blocks + 2 fully-connected layers."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ModelError


class CnnSmall(nn.Module):
    """conv(3x3)+ReLU+pool x4, then fc1+ReLU, then a linear head.

    Layer ids for activation capture / pruning: conv1..conv4 (pre-activation
    feature maps), fc1 (pre-activation vector), head (logits).
    """

    def __init__(self, num_classes: int, input_shape: tuple[int, int, int],
                 channels=(32, 64, 128, 128), fc_width: int = 256):
        super().__init__()
        h, w, c = input_shape
        if h < 16 or w < 16:
            raise ModelError(f"cnn_small needs at least 16x16 inputs, got {h}x{w}")
        self.input_shape = input_shape
        self.channels = tuple(channels)
        self.fc_width = fc_width
        in_ch = c
        for i, out_ch in enumerate(self.channels, start=1):
            setattr(self, f"conv{i}", nn.Conv2d(in_ch, out_ch, 3, padding=1))
            in_ch = out_ch
        self.pool = nn.MaxPool2d(2)
        fh, fw = h, w
        for _ in self.channels:
            fh, fw = fh // 2, fw // 2
        if fh < 1 or fw < 1:
            raise ModelError(f"input {h}x{w} too small for {len(self.channels)} pool stages")
        self.flat_dim = self.channels[-1] * fh * fw
        self.fc1 = nn.Linear(self.flat_dim, fc_width)
        self.head = nn.Linear(fc_width, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i in range(1, len(self.channels) + 1):
            x = self.pool(F.relu(getattr(self, f"conv{i}")(x)))
        x = x.flatten(1)
        x = F.relu(self.fc1(x))
        return self.head(x)

    def conv_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Post-ReLU feature maps of every conv block (for the perceptual proxy)."""
        feats = []
        for i in range(1, len(self.channels) + 1):
            x = self.pool(F.relu(getattr(self, f"conv{i}")(x)))
            feats.append(x)
        return feats
