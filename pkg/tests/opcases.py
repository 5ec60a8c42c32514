"""Random float64 instances of every registered op, reduced to a scalar.

Each builder takes a generator and returns ``(f, inputs)`` such that
``f(*inputs)`` is a single-element tensor. Non-scalar op outputs are
contracted against a fixed random weight so every output coordinate
contributes to the gradient.
"""

from __future__ import annotations

import numpy as np

from modfuse.autodiff import (
    Tensor,
    add,
    concat,
    conv1d_depthwise,
    expand,
    gelu,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    slice_axis,
    softmax,
    total,
    transpose,
)
from modfuse.fusion import FusionConfig, FusionState, fusion_logits, init_fusion
from modfuse.nn import cross_entropy, layer_norm, linear

F64 = np.float64


def t64(rng, *shape, scale_=1.0):
    return Tensor(rng.normal(0.0, scale_, size=shape), dtype=F64)


def _shape(rng, rank_lo=1, rank_hi=3, lo=2, hi=5):
    return tuple(int(s) for s in rng.integers(lo, hi, size=int(rng.integers(rank_lo, rank_hi + 1))))


def contract(y: Tensor, rng) -> Tensor:
    """A weight tensor ``w`` such that ``sum(y * w)`` is the scalarized output."""
    return Tensor(rng.normal(size=y.shape), dtype=F64)


def _scalarize(op):
    """Wrap ``op(*inputs) -> y`` into a scalar function with a frozen weight."""

    def build(rng, inputs, **kw):
        w = contract(op(*inputs, **kw), rng)

        def f(*xs):
            return total(mul(op(*xs, **kw), w))

        return f, inputs

    return build


def case_matmul(rng):
    m, k, n = rng.integers(2, 5, size=3)
    lead = () if rng.random() < 0.5 else (int(rng.integers(2, 4)),)
    a, b = t64(rng, *lead, m, k), t64(rng, k, n)
    return _scalarize(matmul)(rng, [a, b])


def case_add(rng):
    s = _shape(rng)
    return _scalarize(add)(rng, [t64(rng, *s), t64(rng, *s)])


def case_mul(rng):
    s = _shape(rng)
    return _scalarize(mul)(rng, [t64(rng, *s), t64(rng, *s)])


def case_scale(rng):
    c = float(rng.normal())
    return _scalarize(lambda x: scale(x, c))(rng, [t64(rng, *_shape(rng))])


def case_gelu(rng):
    return _scalarize(gelu)(rng, [t64(rng, *_shape(rng), scale_=2.0)])


def case_sum(rng):
    x = t64(rng, *_shape(rng, 2, 3))
    axis = None if rng.random() < 0.3 else int(rng.integers(0, x.ndim))
    return _scalarize(lambda v: total(v, axis))(rng, [x])


def case_mean(rng):
    x = t64(rng, *_shape(rng, 2, 3))
    axis = None if rng.random() < 0.3 else int(rng.integers(-x.ndim, x.ndim))
    return _scalarize(lambda v: mean(v, axis))(rng, [x])


def case_reshape(rng):
    x = t64(rng, 2, 3, 4)
    target = [(6, 4), (24,), (4, 3, 2), (2, 12)][int(rng.integers(0, 4))]
    return _scalarize(lambda v: reshape(v, target))(rng, [x])


def case_transpose(rng):
    x = t64(rng, *_shape(rng, 2, 4))
    axes = [int(a) for a in rng.permutation(x.ndim)]
    return _scalarize(lambda v: transpose(v, axes))(rng, [x])


def case_slice(rng):
    x = t64(rng, *_shape(rng, 1, 3, 3, 6))
    axis = int(rng.integers(0, x.ndim))
    n = x.shape[axis]
    start = int(rng.integers(0, n - 1))
    stop = int(rng.integers(start + 1, n + 1))
    return _scalarize(lambda v: slice_axis(v, axis, start, stop))(rng, [x])


def case_concat(rng):
    base = list(_shape(rng, 2, 3))
    axis = int(rng.integers(0, len(base)))
    parts = []
    for _ in range(int(rng.integers(2, 4))):
        s = list(base)
        s[axis] = int(rng.integers(1, 4))
        parts.append(t64(rng, *s))
    return _scalarize(lambda *xs: concat(xs, axis))(rng, parts)


def case_expand(rng):
    variant = int(rng.integers(0, 3))
    if variant == 0:
        x, shape = t64(rng, 4), (3, 4)
    elif variant == 1:
        x, shape = t64(rng, 3, 1), (2, 3, 5)
    else:
        x, shape = t64(rng, 1, 4), (3, 4)
    return _scalarize(lambda v: expand(v, shape))(rng, [x])


def case_softmax(rng):
    x = t64(rng, *_shape(rng, 1, 3), scale_=2.0)
    axis = int(rng.integers(0, x.ndim))
    return _scalarize(lambda v: softmax(v, axis))(rng, [x])


def case_conv1d_depthwise(rng):
    c, k = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    t = k + int(rng.integers(0, 9))
    stride = int(rng.integers(1, 4))
    lead = () if rng.random() < 0.5 else (2,)
    return _scalarize(lambda v, ker: conv1d_depthwise(v, ker, stride))(rng, [t64(rng, *lead, c, t), t64(rng, c, k)])


def case_linear(rng):
    d_in, d_out = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    lead = [(), (3,), (2, 3)][int(rng.integers(0, 3))]
    return _scalarize(linear)(rng, [t64(rng, *lead, d_in), t64(rng, d_in, d_out), t64(rng, d_out)])


def case_layer_norm(rng):
    d = int(rng.integers(2, 7))
    lead = [(), (3,), (2, 3)][int(rng.integers(0, 3))]
    return _scalarize(layer_norm)(rng, [t64(rng, *lead, d), t64(rng, d), t64(rng, d)])


def case_cross_entropy(rng):
    n, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    labels = rng.integers(0, c, size=n)
    return (lambda z: cross_entropy(z, labels)), [t64(rng, n, c, scale_=2.0)]


CASES = {
    "matmul": case_matmul,
    "add": case_add,
    "mul": case_mul,
    "scale": case_scale,
    "gelu": case_gelu,
    "sum": case_sum,
    "mean": case_mean,
    "reshape": case_reshape,
    "transpose": case_transpose,
    "slice": case_slice,
    "concat": case_concat,
    "expand": case_expand,
    "softmax": case_softmax,
    "conv1d_depthwise": case_conv1d_depthwise,
    "linear": case_linear,
    "layer_norm": case_layer_norm,
    "cross_entropy": case_cross_entropy,
}


def composite_case(rng, batch=3, d_model=8):
    """stack -> fuse -> classify -> cross-entropy, differentiated w.r.t. features and every fusion parameter."""
    cfg = FusionConfig(d_fuse=8, head_count=2, hidden=12)
    reg = init_fusion(d_model, cfg, rng).astype(F64)
    # the default embed init is tiny; widen it so its gradient is well above round-off
    for m in ("vision", "audio", "eeg"):
        reg[f"fusion.embed.{m}"].data[:] = rng.normal(0.0, 0.5, size=cfg.d_fuse)
    state = FusionState.from_registry(reg, cfg)
    feats = [t64(rng, batch, d_model) for _ in range(3)]
    labels = rng.integers(0, cfg.num_classes, size=batch)

    def f(hv, ha, he, *_params):
        return cross_entropy(fusion_logits(hv, ha, he, state), labels)

    return f, feats + [t for _, t in reg.items()]
