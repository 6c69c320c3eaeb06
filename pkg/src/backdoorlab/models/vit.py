"""Toy vision transformer trained from scratch: patch embedding, MHSA encoder
blocks, class token, and a single fully-connected head."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ModelError


def mhsa_forward(tokens: torch.Tensor, wq: torch.Tensor, wk: torch.Tensor,
                 wv: torch.Tensor, wo: torch.Tensor, num_heads: int,
                 bq=None, bk=None, bv=None, bo=None):
    """Multi-head self-attention over a token matrix.

    ``tokens`` is (..., n, d). Per head: softmax(Q Kᵀ / sqrt(d_head)) V, with
    Q/K/V the per-head slices of the shared projections. Heads are
    concatenated and mapped through ``wo``. Returns (output, attention) where
    attention has shape (..., num_heads, n, n) and rows summing to 1.
    """
    d = tokens.shape[-1]
    if d % num_heads:
        raise ModelError(f"embed dim {d} not divisible by {num_heads} heads")
    d_head = d // num_heads

    def proj(w, b):
        y = tokens @ w.T
        if b is not None:
            y = y + b
        return y

    q, k, v = proj(wq, bq), proj(wk, bk), proj(wv, bv)
    shape = q.shape[:-1] + (num_heads, d_head)
    q = q.reshape(shape).transpose(-3, -2)  # (..., heads, n, d_head)
    k = k.reshape(shape).transpose(-3, -2)
    v = v.reshape(shape).transpose(-3, -2)
    attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d_head), dim=-1)
    out = attn @ v
    out = out.transpose(-3, -2).reshape(tokens.shape)
    out = out @ wo.T
    if bo is not None:
        out = out + bo
    return out, attn


class Mhsa(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ModelError(f"embed dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out, _ = mhsa_forward(x, self.q.weight, self.k.weight, self.v.weight,
                              self.o.weight, self.num_heads,
                              self.q.bias, self.k.bias, self.v.bias, self.o.bias)
        return out


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Mhsa(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


@dataclass
class PatchOps:
    """Token-level edits applied after patch embedding, before positional encoding."""

    keep: np.ndarray | None = None  # patch indices to retain (class token always kept)
    perm: np.ndarray | None = None  # permutation of the retained patch tokens


class VitLite(nn.Module):
    """Layer ids: patch_embed, block1..blockN, head (logits on the class token)."""

    def __init__(self, num_classes: int, input_shape: tuple[int, int, int],
                 patch_size: int = 16, depth: int = 4, dim: int = 128,
                 num_heads: int = 4, mlp_ratio: float = 2.0):
        super().__init__()
        h, w, c = input_shape
        if h % patch_size or w % patch_size:
            raise ModelError(f"input {h}x{w} not divisible by patch size {patch_size}")
        self.input_shape = input_shape
        self.patch_size = patch_size
        self.depth = depth
        self.dim = dim
        self.num_heads = num_heads
        self.num_patches = (h // patch_size) * (w // patch_size)
        self.patch_embed = nn.Conv2d(c, dim, patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_patches + 1, dim))
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.pos_embed, std=0.02)
        for i in range(1, depth + 1):
            setattr(self, f"block{i}", EncoderBlock(dim, num_heads, mlp_ratio))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, num_classes)

    def tokens(self, x: torch.Tensor, patch_ops: PatchOps | None = None) -> torch.Tensor:
        t = self.patch_embed(x).flatten(2).transpose(1, 2)  # (B, n, dim)
        if patch_ops is not None:
            if patch_ops.keep is not None:
                t = t[:, torch.as_tensor(patch_ops.keep, dtype=torch.long), :]
            if patch_ops.perm is not None:
                t = t[:, torch.as_tensor(patch_ops.perm, dtype=torch.long), :]
        cls = self.cls_token.expand(t.shape[0], -1, -1)
        t = torch.cat([cls, t], dim=1)
        # positional encoding happens after any drop/shuffle: surviving tokens
        # receive the embeddings of their new sequence positions
        return t + self.pos_embed[:, : t.shape[1], :]

    def encode(self, x: torch.Tensor, patch_ops: PatchOps | None = None) -> torch.Tensor:
        t = self.tokens(x, patch_ops)
        for i in range(1, self.depth + 1):
            t = getattr(self, f"block{i}")(t)
        return self.norm(t)

    def forward(self, x: torch.Tensor, patch_ops: PatchOps | None = None) -> torch.Tensor:
        return self.head(self.encode(x, patch_ops)[:, 0])
