"""Transformer building blocks, the parameter registry, and the loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import mft
from .autodiff import (
    Tensor,
    add,
    expand,
    gelu,
    matmul,
    op_result,
    register_op,
    reshape,
    scale,
    softmax,
    swap_last,
    transpose,
)
from .errors import ConfigError, DataError, ShapeError

MANIFEST_NAME = "manifest.txt"


class ParamRegistry:
    """Insertion-ordered map of dotted names to parameter tensors.

    Frozen entries have ``requires_grad=False`` and are skipped by the
    optimizer.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, tensor: Tensor, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if not name or any(not part for part in name.split(".")) or "/" in name:
            raise ConfigError(f"invalid parameter name {name!r}")
        self._params[name] = tensor
        tensor.requires_grad = not frozen
        if frozen:
            self._frozen.add(name)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def freeze(self, prefix: str = "") -> None:
        for name, t in self._params.items():
            if name.startswith(prefix):
                self._frozen.add(name)
                t.requires_grad = False

    def unfreeze(self, prefix: str = "") -> None:
        for name, t in self._params.items():
            if name.startswith(prefix):
                self._frozen.discard(name)
                t.requires_grad = True

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if n not in self._frozen]

    def merge(self, other: "ParamRegistry") -> None:
        for name, t in other.items():
            self.add(name, t, frozen=other.is_frozen(name))

    def subset(self, prefix: str) -> "ParamRegistry":
        """New registry sharing the tensors whose names start with ``prefix``."""
        out = ParamRegistry()
        for name, t in self._params.items():
            if name.startswith(prefix):
                out._params[name] = t
                if name in self._frozen:
                    out._frozen.add(name)
        return out

    def astype(self, dtype) -> "ParamRegistry":
        """Deep copy with every tensor cast to ``dtype``."""
        out = ParamRegistry()
        for name, t in self._params.items():
            out.add(name, Tensor(t.data, dtype=dtype), frozen=name in self._frozen)
        return out

    def copy(self) -> "ParamRegistry":
        return self.astype(np.float32)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def save(self, directory: str | Path) -> None:
        """Write one MFT1 file per parameter plus a ``name shape frozen`` manifest."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = []
        for name, t in self._params.items():
            mft.save(directory / f"{name}.mft", t)
            shape = "x".join(str(s) for s in t.shape)
            lines.append(f"{name} {shape} {int(name in self._frozen)}\n")
        (directory / MANIFEST_NAME).write_text("".join(lines))

    @classmethod
    def load(cls, directory: str | Path) -> "ParamRegistry":
        directory = Path(directory)
        try:
            text = (directory / MANIFEST_NAME).read_text()
        except OSError as exc:
            raise DataError(f"cannot read parameter manifest in {directory}: {exc.strerror}") from exc
        reg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise DataError(f"{directory / MANIFEST_NAME}:{lineno}: malformed entry {line!r}")
            name, shape_text, frozen = parts
            t = mft.load(directory / f"{name}.mft")
            shape = tuple(int(s) for s in shape_text.split("x"))
            if t.shape != shape:
                raise DataError(f"parameter {name}: file shape {t.shape} != manifest shape {shape}")
            reg.add(name, t, frozen=frozen == "1")
        return reg


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)))


@register_op("linear")
def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` over the last axis of ``x`` (any leading axes)."""
    if W.ndim != 2 or b.shape != (W.shape[1],) or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: x {x.shape}, W {W.shape}, b {b.shape} do not agree")
    vector = x.ndim == 1
    if vector:
        x = reshape(x, (1, x.shape[0]))
    y = matmul(x, W)
    y = add(y, expand(b, y.shape))
    return reshape(y, (W.shape[1],)) if vector else y


@register_op("layer_norm")
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis (population variance), then scale and shift.

    Rows with zero variance map to ``beta``.
    """
    d = x.shape[-1]
    if d < 2 or gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    centered = xd - xd.mean(axis=-1, keepdims=True)
    std = np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + xd.dtype.type(eps))
    inv = np.divide(1.0, std, out=np.zeros_like(std), where=std > 0)
    xhat = centered * inv
    gd, bd = gamma.data, beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return op_result(xhat * gd + bd, (x, gamma, beta), bw)


@register_op("cross_entropy")
def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, c] logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} logit rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"label out of range [0, {c}): {labels.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].sum() / n

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g.reshape(()) / n),)

    return op_result(np.asarray(loss, dtype=logits.dtype).reshape(1), (logits,), bw)


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, reg: ParamRegistry, prefix: str, d: int) -> "LayerNormParams":
        reg.add(f"{prefix}.gamma", Tensor(np.ones(d)))
        reg.add(f"{prefix}.beta", Tensor(np.zeros(d)))
        return cls.from_registry(reg, prefix)

    @classmethod
    def from_registry(cls, reg: ParamRegistry, prefix: str) -> "LayerNormParams":
        return cls(reg[f"{prefix}.gamma"], reg[f"{prefix}.beta"])

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


@dataclass
class MultiHeadAttentionParams:
    Wq: Tensor
    bq: Tensor
    Wk: Tensor
    bk: Tensor
    Wv: Tensor
    bv: Tensor
    Wo: Tensor
    bo: Tensor
    head_count: int

    _NAMES = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")

    @classmethod
    def init(cls, reg, prefix, d, head_count, rng) -> "MultiHeadAttentionParams":
        if head_count < 1 or d % head_count:
            raise ConfigError(f"head_count {head_count} must divide model width {d}")
        for proj in "qkvo":
            reg.add(f"{prefix}.W{proj}", uniform_init(rng, (d, d), d))
            reg.add(f"{prefix}.b{proj}", uniform_init(rng, (d,), d))
        return cls.from_registry(reg, prefix, head_count)

    @classmethod
    def from_registry(cls, reg, prefix, head_count) -> "MultiHeadAttentionParams":
        return cls(*(reg[f"{prefix}.{n}"] for n in cls._NAMES), head_count=head_count)

    @property
    def d(self) -> int:
        return self.Wq.shape[0]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = reshape(x, (*lead, n, heads, d // heads))
    k = len(lead)
    return transpose(x, list(range(k)) + [k + 1, k, k + 2])


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    k = len(lead)
    x = transpose(x, list(range(k)) + [k + 1, k, k + 2])
    return reshape(x, (*lead, n, h * dh))


def multi_head_attention(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    p: MultiHeadAttentionParams,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``p.head_count`` heads.

    Inputs are ``[..., n, d]``; keys and values share ``n_k``. With
    ``return_weights`` the per-head weights ``[..., heads, n_q, n_k]`` are
    returned as a second value.
    """
    d = p.d
    if q_in.shape[-1] != d or k_in.shape[-1] != d or v_in.shape[-1] != d:
        raise ShapeError(f"attention width mismatch: q {q_in.shape}, k {k_in.shape}, v {v_in.shape}, d={d}")
    if k_in.shape != v_in.shape or q_in.shape[:-2] != k_in.shape[:-2]:
        raise ShapeError(f"attention key/value/query shapes disagree: {q_in.shape}, {k_in.shape}, {v_in.shape}")
    if d % p.head_count:
        raise ConfigError(f"head_count {p.head_count} must divide model width {d}")
    h = p.head_count
    q = _split_heads(linear(q_in, p.Wq, p.bq), h)
    k = _split_heads(linear(k_in, p.Wk, p.bk), h)
    v = _split_heads(linear(v_in, p.Wv, p.bv), h)
    scores = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(d // h))
    weights = softmax(scores, axis=-1)
    out = linear(_merge_heads(matmul(weights, v)), p.Wo, p.bo)
    return (out, weights) if return_weights else out


@dataclass
class FeedForwardParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, reg, prefix, d_in, d_hidden, d_out, rng) -> "FeedForwardParams":
        reg.add(f"{prefix}.W1", uniform_init(rng, (d_in, d_hidden), d_in))
        reg.add(f"{prefix}.b1", uniform_init(rng, (d_hidden,), d_in))
        reg.add(f"{prefix}.W2", uniform_init(rng, (d_hidden, d_out), d_hidden))
        reg.add(f"{prefix}.b2", uniform_init(rng, (d_out,), d_hidden))
        return cls.from_registry(reg, prefix)

    @classmethod
    def from_registry(cls, reg, prefix) -> "FeedForwardParams":
        return cls(*(reg[f"{prefix}.{n}"] for n in ("W1", "b1", "W2", "b2")))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(gelu(linear(x, self.W1, self.b1)), self.W2, self.b2)


# the classifier MLP is the same two-layer GELU network
MLPParams = FeedForwardParams


def classifier_mlp(x: Tensor, p: MLPParams) -> Tensor:
    """One hidden GELU layer; ``x`` is ``[d_in]`` or ``[batch, d_in]``."""
    if x.shape[-1] != p.W1.shape[0]:
        raise ShapeError(f"classifier input width {x.shape[-1]} != {p.W1.shape[0]}")
    return p(x)


@dataclass
class TransformerBlockParams:
    attn: MultiHeadAttentionParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    ff: FeedForwardParams

    @classmethod
    def init(cls, reg, prefix, d, head_count, d_ff, rng) -> "TransformerBlockParams":
        return cls(
            MultiHeadAttentionParams.init(reg, f"{prefix}.attn", d, head_count, rng),
            LayerNormParams.init(reg, f"{prefix}.ln1", d),
            LayerNormParams.init(reg, f"{prefix}.ln2", d),
            FeedForwardParams.init(reg, f"{prefix}.ff", d, d_ff, d, rng),
        )

    @classmethod
    def from_registry(cls, reg, prefix, head_count) -> "TransformerBlockParams":
        return cls(
            MultiHeadAttentionParams.from_registry(reg, f"{prefix}.attn", head_count),
            LayerNormParams.from_registry(reg, f"{prefix}.ln1"),
            LayerNormParams.from_registry(reg, f"{prefix}.ln2"),
            FeedForwardParams.from_registry(reg, f"{prefix}.ff"),
        )


def transformer_block(x: Tensor, p: TransformerBlockParams) -> Tensor:
    """Pre-norm residual block: ``x + attn(ln1(x))`` then ``+ ff(ln2(.))``."""
    h = p.ln1(x)
    x = add(x, multi_head_attention(h, h, h, p.attn))
    return add(x, p.ff(p.ln2(x)))
