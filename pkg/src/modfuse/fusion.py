"""Stage-2 fusion: project, self-attend across modality tokens, flatten, classify.

The three pooled encoder features become a 3-token sequence (vision, audio,
eeg order). Each row gets its own projection plus a learned modality-tag
embedding so attention can tell the modalities apart.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .autodiff import Tensor, add, concat, expand, reshape
from .encoders import MODALITIES, NUM_CLASSES
from .errors import ConfigError, ShapeError
from .nn import (
    LayerNormParams,
    MLPParams,
    MultiHeadAttentionParams,
    ParamRegistry,
    classifier_mlp,
    linear,
    multi_head_attention,
    uniform_init,
)

PREFIX = "fusion."


@dataclass
class FusionConfig:
    d_fuse: int = 64
    head_count: int = 4
    hidden: int = 128
    num_classes: int = NUM_CLASSES

    def validate(self) -> "FusionConfig":
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"fusion {f.name} must be positive")
        if self.d_fuse % self.head_count:
            raise ConfigError(f"fusion head_count {self.head_count} must divide d_fuse {self.d_fuse}")
        if self.d_fuse < 2:
            raise ConfigError("d_fuse must be at least 2 (layer norm)")
        return self


@dataclass
class FusionState:
    proj: dict[str, tuple[Tensor, Tensor]]
    embed: dict[str, Tensor]
    attn: MultiHeadAttentionParams
    norm: LayerNormParams
    mlp: MLPParams

    @classmethod
    def from_registry(cls, reg: ParamRegistry, cfg: FusionConfig) -> "FusionState":
        return cls(
            proj={m: (reg[f"fusion.proj.{m}.W"], reg[f"fusion.proj.{m}.b"]) for m in MODALITIES},
            embed={m: reg[f"fusion.embed.{m}"] for m in MODALITIES},
            attn=MultiHeadAttentionParams.from_registry(reg, "fusion.attn", cfg.head_count),
            norm=LayerNormParams.from_registry(reg, "fusion.norm"),
            mlp=MLPParams.from_registry(reg, "fusion.mlp"),
        )


def init_fusion(
    d_model: int, cfg: FusionConfig, rng: np.random.Generator, reg: ParamRegistry | None = None
) -> ParamRegistry:
    cfg.validate()
    reg = ParamRegistry() if reg is None else reg
    d = cfg.d_fuse
    for m in MODALITIES:
        reg.add(f"fusion.proj.{m}.W", uniform_init(rng, (d_model, d), d_model))
        reg.add(f"fusion.proj.{m}.b", uniform_init(rng, (d,), d_model))
    for m in MODALITIES:
        reg.add(f"fusion.embed.{m}", Tensor(rng.normal(0.0, 0.02, size=d)))
    MultiHeadAttentionParams.init(reg, "fusion.attn", d, cfg.head_count, rng)
    LayerNormParams.init(reg, "fusion.norm", d)
    MLPParams.init(reg, "fusion.mlp", 3 * d, cfg.hidden, cfg.num_classes, rng)
    return reg


def stack_modalities(h_vis: Tensor, h_aud: Tensor, h_eeg: Tensor, state: FusionState) -> Tensor:
    """Row m = proj_m(h_m) + embed_m; ``[d]`` inputs give ``[3, d_fuse]``, ``[B, d]`` give ``[B, 3, d_fuse]``."""
    if not h_vis.shape == h_aud.shape == h_eeg.shape:
        raise ShapeError(f"modality features disagree: {h_vis.shape}, {h_aud.shape}, {h_eeg.shape}")
    rows = []
    for m, h in zip(MODALITIES, (h_vis, h_aud, h_eeg)):
        W, b = state.proj[m]
        r = linear(h, W, b)
        r = add(r, expand(state.embed[m], r.shape))
        rows.append(reshape(r, (*r.shape[:-1], 1, r.shape[-1])))
    return concat(rows, axis=-2)


def fuse_rows(tokens: Tensor, state: FusionState, return_weights: bool = False):
    """Self-attention over the modality tokens with one residual + layer norm."""
    if tokens.ndim < 2 or tokens.shape[-2] != len(MODALITIES):
        raise ShapeError(f"fusion expects [..., 3, d_fuse] tokens, got {tokens.shape}")
    attended, weights = multi_head_attention(tokens, tokens, tokens, state.attn, return_weights=True)
    out = state.norm(add(tokens, attended))
    return (out, weights) if return_weights else out


def fuse(tokens: Tensor, state: FusionState) -> Tensor:
    """Fused rows flattened in modality order: ``[..., 3, d]`` to ``[..., 3*d]``."""
    rows = fuse_rows(tokens, state)
    return reshape(rows, (*rows.shape[:-2], rows.shape[-2] * rows.shape[-1]))


def classify_fused(flat: Tensor, state: FusionState) -> Tensor:
    return classifier_mlp(flat, state.mlp)


def fusion_logits(h_vis: Tensor, h_aud: Tensor, h_eeg: Tensor, state: FusionState) -> Tensor:
    return classify_fused(fuse(stack_modalities(h_vis, h_aud, h_eeg, state), state), state)
