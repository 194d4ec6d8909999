"""Label-query transformer decoder and the per-class classifier head.

Each decoder block runs query self-attention, cross-attention into the
patch memory, and a feed-forward sublayer, each with a post-norm residual.
Positional embeddings are learned, added to queries and memory keys only
(values stay raw), so attention logits carry position while content flows
untouched.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


class MultiHeadAttention(nn.Module):
    """Standard multi-head attention with separate q/k/v input projections."""

    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        if d_model % num_heads != 0:
            raise ConfigError(f"attention: d_model {d_model} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor) -> torch.Tensor:
        b, n, d = query.shape
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = F.softmax(logits, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out_proj(out)


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, num_heads: int, ffn_factor: int = 4):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, num_heads)
        self.cross_attn = MultiHeadAttention(d_model, num_heads)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, ffn_factor * d_model),
            nn.ReLU(),
            nn.Linear(ffn_factor * d_model, d_model),
        )
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)

    def forward(
        self,
        queries: torch.Tensor,
        memory: torch.Tensor,
        query_pos: torch.Tensor,
        memory_pos: torch.Tensor,
    ) -> torch.Tensor:
        if memory.shape[1] == 0:
            raise ConfigError("decoder: zero-length memory")
        q_bar = queries + query_pos
        x = self.norm1(queries + self.self_attn(q_bar, q_bar, queries))
        x = self.norm2(x + self.cross_attn(x + query_pos, memory + memory_pos, memory))
        return self.norm3(x + self.ffn(x))


class DecoderStack(nn.Module):
    """L decoder layers plus this stack's learned queries and positions.

    Queries start life as the GCN-refined label embeddings (copied in by
    the model) and train freely afterwards.
    """

    def __init__(
        self,
        num_classes: int,
        memory_len: int,
        d_model: int,
        num_heads: int,
        num_layers: int,
        ffn_factor: int = 4,
    ):
        super().__init__()
        self.layers = nn.ModuleList(
            DecoderLayer(d_model, num_heads, ffn_factor) for _ in range(num_layers)
        )
        self.queries = nn.Parameter(torch.zeros(num_classes, d_model))
        self.query_pos = nn.Parameter(torch.empty(num_classes, d_model))
        self.memory_pos = nn.Parameter(torch.empty(memory_len, d_model))
        nn.init.normal_(self.query_pos, std=0.02)
        nn.init.normal_(self.memory_pos, std=0.02)

    def forward(self, memory: torch.Tensor) -> torch.Tensor:
        batch = memory.shape[0]
        x = self.queries.unsqueeze(0).expand(batch, -1, -1)
        for layer in self.layers:
            x = layer(x, memory, self.query_pos, self.memory_pos)
        return x


class ClassifierHead(nn.Module):
    """Per-class projection over the concatenated final queries.

    ``in_width`` is branches * stages * d_model; each class has its own
    weight row applied to its own concatenated query.
    """

    def __init__(self, num_classes: int, in_width: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, in_width))
        self.bias = nn.Parameter(torch.zeros(num_classes))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, per_class_features: torch.Tensor) -> torch.Tensor:
        # (B, C, in_width) x (C, in_width) -> (B, C) logits
        return torch.einsum("bcw,cw->bc", per_class_features, self.weight) + self.bias
