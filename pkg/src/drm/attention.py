"""Multi-head attention, self/cross-attention units and the Hybrid Attention layer.

Tokens are ``(n, d)`` tensors or padded ``(B, n, d)`` batches. Boolean masks
use ``True`` for "query may attend to key"; masked logits become -inf, so
masked keys receive exactly zero weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % num_heads:
            raise ValueError(f"d_model={d_model} is not divisible by num_heads={num_heads}")
        self.d_model = d_model
        self.num_heads = num_heads
        self.d_head = d_model // num_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def attention_weights(self, q: torch.Tensor, k: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Post-softmax weights, shape ``(..., heads, n_q, n_k)``."""
        if k.shape[-1] != self.d_model or q.shape[-1] != self.d_model:
            raise ValueError(f"expected feature dim {self.d_model}, got {q.shape[-1]} and {k.shape[-1]}")
        n_q, n_k = q.shape[-2], k.shape[-2]
        qh = self._heads(self.q_proj(q))
        kh = self._heads(self.k_proj(k))
        logits = qh @ kh.transpose(-1, -2) / math.sqrt(self.d_head)
        if mask is not None:
            if mask.shape[-2:] != (n_q, n_k):
                raise ValueError(f"mask shape {tuple(mask.shape)} does not end in {(n_q, n_k)}")
            if not bool(mask.any(dim=-1).all()):
                raise ValueError("attention mask has a query row with no allowed key")
            logits = logits.masked_fill(~mask.unsqueeze(-3), float("-inf"))
        return torch.softmax(logits, dim=-1)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        # (..., n, d) -> (..., heads, n, d_head)
        return x.view(*x.shape[:-1], self.num_heads, self.d_head).transpose(-2, -3)

    def forward(self, q, k, v, mask=None, return_weights: bool = False):
        """Tokens are ``(n, d)`` or batched ``(B, n, d)``; ``mask`` is ``(n_q, n_k)`` or ``(B, n_q, n_k)``."""
        weights = self.attention_weights(q, k, mask)
        heads = self.dropout(weights) @ self._heads(self.v_proj(v))
        merged = heads.transpose(-2, -3).reshape(*q.shape[:-1], self.d_model)
        out = self.out_proj(merged)
        return (out, weights) if return_weights else out


class AttentionUnit(nn.Module):
    """Pre-norm transformer unit: attention + residual, feed-forward + residual.

    With ``cross=False`` this is an SA unit (keys are the queries' own stream);
    with ``cross=True`` a CA unit whose keys/values come from ``context``.
    """

    def __init__(self, d_model: int, num_heads: int, cross: bool, ff_mult: int = 2, dropout: float = 0.0):
        super().__init__()
        self.cross = cross
        self.norm_q = nn.LayerNorm(d_model)
        self.norm_kv = nn.LayerNorm(d_model) if cross else None
        self.attn = MultiHeadAttention(d_model, num_heads, dropout)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model),
            nn.GELU(),
            nn.Linear(ff_mult * d_model, d_model),
        )

    def forward(self, x, context=None, mask=None, return_weights: bool = False):
        q = self.norm_q(x)
        if self.cross:
            if context is None:
                raise ValueError("cross-attention unit needs a context stream")
            kv = self.norm_kv(context)
        else:
            kv = q
        attended, weights = self.attn(q, kv, kv, mask, return_weights=True)
        h = x + attended
        out = h + self.ff(self.norm_ff(h))
        return (out, weights) if return_weights else out


@dataclass
class HAMasks:
    """Masks for one HA layer; ``None`` means unrestricted."""

    sa_x: torch.Tensor | None = None
    sa_y: torch.Tensor | None = None
    ca_xy: torch.Tensor | None = None  # X queries Y
    ca_yx: torch.Tensor | None = None  # Y queries X

    def swapped(self) -> "HAMasks":
        return HAMasks(self.sa_y, self.sa_x, self.ca_yx, self.ca_xy)


class HALayer(nn.Module):
    """X' = SA(X) + CA(X, Y);  Y' = SA(Y) + CA(Y, X)."""

    def __init__(self, d_model: int, num_heads: int, ff_mult: int = 2, dropout: float = 0.0):
        super().__init__()
        self.sa_x = AttentionUnit(d_model, num_heads, cross=False, ff_mult=ff_mult, dropout=dropout)
        self.ca_x = AttentionUnit(d_model, num_heads, cross=True, ff_mult=ff_mult, dropout=dropout)
        self.sa_y = AttentionUnit(d_model, num_heads, cross=False, ff_mult=ff_mult, dropout=dropout)
        self.ca_y = AttentionUnit(d_model, num_heads, cross=True, ff_mult=ff_mult, dropout=dropout)

    def forward(self, x, y, masks: HAMasks | None = None, return_weights: bool = False):
        m = masks or HAMasks()
        if x.shape[-1] != y.shape[-1]:
            raise ValueError(f"stream dims differ: {x.shape[-1]} vs {y.shape[-1]}")
        cx, w_xy = self.ca_x(x, y, mask=m.ca_xy, return_weights=True)
        cy, w_yx = self.ca_y(y, x, mask=m.ca_yx, return_weights=True)
        x_new = self.sa_x(x, mask=m.sa_x) + cx
        y_new = self.sa_y(y, mask=m.sa_y) + cy
        if return_weights:
            return x_new, y_new, {"ca_xy": w_xy, "ca_yx": w_yx}
        return x_new, y_new


def ha_layer(x, y, layer: HALayer, masks: HAMasks | None = None):
    return layer(x, y, masks)


class HAStack(nn.Module):
    def __init__(self, num_layers: int, d_model: int, num_heads: int, ff_mult: int = 2, dropout: float = 0.0):
        super().__init__()
        self.layers = nn.ModuleList(HALayer(d_model, num_heads, ff_mult, dropout) for _ in range(num_layers))

    def forward(self, x, y, masks: HAMasks | None = None, return_weights: bool = False):
        weights = []
        for layer in self.layers:
            x, y, w = layer(x, y, masks, return_weights=True)
            weights.append(w)
        return (x, y, weights) if return_weights else (x, y)


class EntityEncoder(nn.Module):
    """4-layer HA over visual (X) and semantic (Y) entity streams; output X + Y."""

    def __init__(self, d_v: int, d_s: int, d_model: int = 64, num_heads: int = 4, num_layers: int = 4,
                 ff_mult: int = 2, dropout: float = 0.0):
        super().__init__()
        self.in_x = nn.Linear(d_v, d_model)
        # Y^(0) lives in d_s; both streams must share d_model
        self.in_y = nn.Linear(d_s, d_model)
        self.stack = HAStack(num_layers, d_model, num_heads, ff_mult, dropout)
        # closing norm of a pre-norm stack; the summed streams grow ~2x per HA layer
        self.out_norm = nn.LayerNorm(d_model)

    def forward(self, v, s, same_sample: torch.Tensor | None = None):
        if v.shape[0] == 0:
            raise ValueError("entity encoder needs at least one entity")
        if v.shape[0] != s.shape[0]:
            raise ValueError("visual and semantic streams must have equal length")
        m = HAMasks(same_sample, same_sample, same_sample, same_sample)
        x, y = self.stack(self.in_x(v), self.in_y(s), m)
        return self.out_norm(x + y)


def entity_encoder(v, s, encoder: EntityEncoder, same_sample=None):
    return encoder(v, s, same_sample)
