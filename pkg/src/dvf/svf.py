"""Semantic-oriented visual filtering: pick the top-k patch tokens before the last layer.

Ranking signal per patch i::

    semantic[i]  = sum over heads of class->patch attention (penultimate layer)
    importance[i] = sigmoid(w . token_i + b)
    fused[i]     = semantic[i] + semantic[i] * importance[i]

Only the class token and the k best-ranked patch tokens enter the last layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from dvf.encoder import TokenState
from dvf.errors import ConfigurationError, InternalError

DEFAULT_K = 12


class ImportanceGenerator(nn.Module):
    """Per-token affine score squashed by a sigmoid. Zero-initialized, so it starts at 0.5 everywhere."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.proj(tokens)).squeeze(-1)


@dataclass
class SvfSelection:
    semantic_score: torch.Tensor
    importance: torch.Tensor | None
    fused_score: torch.Tensor
    ids: torch.Tensor
    k: int

    def to_json(self, index: int = 0) -> dict:
        def row(t):
            return None if t is None else t[index].detach().cpu().tolist()

        return {
            "k": self.k,
            "ids": row(self.ids),
            "fused_score": row(self.fused_score),
            "semantic_score": row(self.semantic_score),
            "importance": row(self.importance),
        }


def aggregate_heads(class_attention: torch.Tensor) -> torch.Tensor:
    """(..., M, N) -> (..., N), summed over heads."""
    return class_attention.sum(dim=-2)


def token_importance(tokens: torch.Tensor, gen: ImportanceGenerator) -> torch.Tensor:
    return gen(tokens)


def fuse_scores(semantic: torch.Tensor, importance: torch.Tensor) -> torch.Tensor:
    if semantic.shape != importance.shape:
        raise ConfigurationError(f"score shapes differ: {tuple(semantic.shape)} vs {tuple(importance.shape)}")
    return semantic + semantic * importance


def select_topk(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest scores along the last axis, descending, ties to the lower index."""
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ConfigurationError(f"k must lie in [1, {n}], got {k}")
    return torch.sort(scores, dim=-1, descending=True, stable=True).indices[..., :k]


def rebuild_sequence(state: TokenState, ids: torch.Tensor, gate: torch.Tensor | None = None) -> TokenState:
    """Class token followed by the patch tokens at ``ids`` (in ``ids`` order).

    ``ids`` is (B, k) and indexes patches, i.e. token ``ids + 1`` of the sequence.
    ``gate`` optionally weights each selected token's attention value in the
    next layer, shape (B, k); the class token keeps weight 1.
    """
    tokens = state.tokens
    B, T, D = tokens.shape
    if ids.ndim == 1:
        ids = ids.unsqueeze(0).expand(B, -1)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= T - 1):
        raise InternalError(f"selected ids outside [0, {T - 1})")
    if ids.shape[-1] > 1:
        srt = ids.sort(dim=-1).values
        if (srt[:, 1:] == srt[:, :-1]).any():
            raise InternalError("duplicate ids in token selection")
    picked = torch.gather(tokens[:, 1:], 1, ids.unsqueeze(-1).expand(-1, -1, D))
    weight = None
    if gate is not None:
        weight = torch.cat([torch.ones_like(gate[:, :1]), gate], dim=1)
    return TokenState(torch.cat([tokens[:, :1], picked], dim=1), state.layer_index, value_weight=weight)


class SemanticFilter(nn.Module):
    """Hook for :meth:`VisionTransformer.encode` that shrinks the last layer's input to k+1 tokens.

    With the importance generator on, the last layer also weights the attention
    values of selected tokens by ``(1 + Z) / 1.5``. The weight sits after the
    layer norm, which would otherwise cancel a plain token rescale. It is exactly
    1 for the zero-initialized generator and is the path through which the
    generator receives gradient, since top-k selection is piecewise constant.
    """

    def __init__(self, dim: int, k: int = DEFAULT_K, use_importance: bool = True):
        super().__init__()
        if k < 1:
            raise ConfigurationError(f"k must be >= 1, got {k}")
        self.k = k
        self.use_importance = use_importance
        self.importance = ImportanceGenerator(dim)

    def select(self, state: TokenState) -> SvfSelection:
        if state.class_attention is None:
            raise InternalError("token selection needs the penultimate layer's class attention")
        patches = state.tokens[:, 1:]
        k = min(self.k, patches.shape[1])
        semantic = aggregate_heads(state.class_attention)
        if self.use_importance:
            z = token_importance(patches, self.importance)
            fused = fuse_scores(semantic, z)
        else:
            z, fused = None, semantic
        ids = select_topk(fused.detach(), k)
        return SvfSelection(semantic, z, fused, ids, k)

    def forward(self, state: TokenState) -> tuple[TokenState, SvfSelection]:
        sel = self.select(state)
        # ids stay in score order for reporting; the rebuilt sequence keeps spatial order,
        # so k = N reproduces the unfiltered sequence exactly
        order = sel.ids.sort(dim=-1).values
        gate = None
        if sel.importance is not None:
            gate = (1.0 + torch.gather(sel.importance, 1, order)) / 1.5
        return rebuild_sequence(state, order, gate), sel


def selection_mask(ids, grid: int) -> np.ndarray:
    mask = np.zeros(grid * grid, dtype=bool)
    mask[np.asarray(ids, dtype=int)] = True
    return mask.reshape(grid, grid)


def render_overlay(image: Image.Image, ids, grid: int, dim_alpha: float = 0.25) -> Image.Image:
    """Dim every patch not in ``ids``; selected patches keep their pixels."""
    image = image.convert("RGB")
    w, h = image.size
    mask = selection_mask(ids, grid)
    ys = (np.arange(h) * grid // h)[:, None]
    xs = (np.arange(w) * grid // w)[None, :]
    keep = mask[ys, xs]
    pixels = np.asarray(image, dtype=np.float32)
    pixels = np.where(keep[..., None], pixels, pixels * dim_alpha)
    return Image.fromarray(pixels.round().astype(np.uint8))


def export_selection(path: str | Path, selection: SvfSelection, index: int = 0) -> None:
    Path(path).write_text(json.dumps(selection.to_json(index), indent=1))
