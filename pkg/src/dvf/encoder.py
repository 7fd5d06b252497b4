"""Plain ViT encoder exposing per-layer class-token attention and a hook before the last layer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from dvf.errors import ConfigurationError, NumericsError, ShapeError


@dataclass
class EncoderConfig:
    image_size: int = 224
    patch_size: int = 16
    depth: int = 12
    dim: int = 768
    heads: int = 12
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ShapeError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 2:
            raise ConfigurationError("depth must be >= 2 so a penultimate layer exists")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2


@dataclass
class TokenState:
    """Token sequence (B, T, D) with the class token at index 0.

    ``class_attention`` is (B, M, T-1): per-head post-softmax weights from the
    class query to the patch keys of the layer that produced ``tokens``. The
    class self-weight is dropped, not renormalized. ``value_weight`` (B, T), when
    set, scales each token's attention value in the next layer.
    """

    tokens: torch.Tensor
    layer_index: int
    class_attention: Optional[torch.Tensor] = None
    value_weight: Optional[torch.Tensor] = None


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, value_weight: Optional[torch.Tensor] = None) -> tuple[torch.Tensor, torch.Tensor]:
        B, T, D = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if value_weight is not None:
            v = v * value_weight[:, None, :, None]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(out), attn


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor, value_weight: Optional[torch.Tensor] = None) -> tuple[torch.Tensor, torch.Tensor]:
        h, attn = self.attn(self.norm1(x), value_weight)
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x, attn[:, :, 0, 1:]


# hook signature: state entering the last layer -> (replacement state, diagnostics)
SvfHook = Callable[[TokenState], "tuple[TokenState, object]"]


class VisionTransformer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.dim
        self.patch_embed = nn.Conv2d(3, D, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, D))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, D))
        self.blocks = nn.ModuleList(Block(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(D, eps=1e-6)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def patchify(self, images: torch.Tensor) -> TokenState:
        s = self.cfg.image_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[-2:] != (s, s):
            raise ShapeError(f"expected images of shape (B, 3, {s}, {s}), got {tuple(images.shape)}")
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        return TokenState(x, 0)

    def forward_layer(self, state: TokenState) -> TokenState:
        if state.layer_index >= self.depth:
            raise ConfigurationError(f"layer index {state.layer_index} past depth {self.depth}")
        x, cls_attn = self.blocks[state.layer_index](state.tokens, state.value_weight)
        if not torch.isfinite(x).all():
            raise NumericsError(f"non-finite activations after layer {state.layer_index + 1}")
        return TokenState(x, state.layer_index + 1, cls_attn)

    def encode(self, images: torch.Tensor, svf: Optional[SvfHook] = None) -> tuple[torch.Tensor, dict]:
        """L2-normalized class embedding, plus diagnostics (SVF selection when a hook is given)."""
        state = self.patchify(images)
        while state.layer_index < self.depth - 1:
            state = self.forward_layer(state)
        diagnostics: dict = {"penultimate": state}
        if svf is not None:
            state, selection = svf(state)
            diagnostics["selection"] = selection
        state = self.forward_layer(state)
        cls = self.norm(state.tokens[:, 0])
        return F.normalize(cls, dim=-1), diagnostics

    def forward(self, images: torch.Tensor, svf: Optional[SvfHook] = None) -> torch.Tensor:
        return self.encode(images, svf)[0]
