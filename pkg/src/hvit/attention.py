"""Vanilla and hallucinated multi-head self-attention.

The hallucinated variant computes only ``h/2`` attention maps from query/key
projections of width ``C/2``. The other ``h/2`` maps come from the real ones
through a chain of cheap operators applied before the softmax:

* ``ihh``: 3x3 depthwise convolution per head over the key axis laid out on
  the ``H x W`` token grid, with the query axis treated as the batch;
* ``chh``: 1x1 mixing across the ``h/2`` head channels at every
  (query, key) position;
* ``copy``: identity.

Projection weights use the ``[out, in]`` layout of :func:`pointwise_mix`.
Inputs are ``[N, C]`` or batched ``[B, N, C]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .tensor_core import (
    ShapeError,
    depthwise_conv3x3,
    depthwise_conv3x3_vjp,
    mac_scope,
    matmul,
    matmul_vjp,
    pointwise_mix,
    pointwise_mix_vjp,
    softmax_lastdim,
    softmax_vjp_from_output,
    trunc_normal,
)

HALLUCINATION_OPS = ("copy", "ihh", "chh")
DEFAULT_OPS = ("ihh", "chh")


class GridError(ShapeError):
    """Token count does not decompose into the spatial grid."""


class CaptureError(RuntimeError):
    """Attention maps were requested from a forward run that did not record them."""


@dataclass(frozen=True)
class AttentionConfig:
    N: int
    C: int
    h: int
    H: int | None = None
    W: int | None = None
    has_class_token: bool = False
    mode: str = "vanilla"
    hallucination_ops: tuple[str, ...] = DEFAULT_OPS

    def __post_init__(self):
        if self.C % self.h:
            raise ShapeError(f"embed dim {self.C} not divisible by {self.h} heads")
        if self.mode not in ("vanilla", "hallucinated"):
            raise ValueError(f"unknown attention mode {self.mode!r}")
        ops = tuple(op.lower() for op in self.hallucination_ops)
        unknown = [op for op in ops if op not in HALLUCINATION_OPS]
        if unknown:
            raise ValueError(f"unknown hallucination op(s) {unknown}")
        object.__setattr__(self, "hallucination_ops", ops)
        if self.H is not None and self.W is not None:
            if self.N != self.H * self.W + int(self.has_class_token):
                raise GridError(
                    f"N={self.N} does not match grid {self.H}x{self.W}"
                    f"{' + class token' if self.has_class_token else ''}"
                )
        if self.mode == "hallucinated":
            if self.h % 2:
                raise ValueError(f"hallucinated attention needs an even head count, got {self.h}")
            if not ops:
                raise ValueError("hallucinated attention needs at least one hallucination op")
            if "ihh" in ops and (self.H is None or self.W is None):
                raise GridError("ihh needs the token grid H, W")

    @property
    def head_dim(self) -> int:
        return self.C // self.h

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)

    @property
    def class_offset(self) -> int:
        return int(self.has_class_token)


class ParamBundle:
    """Dataclass mixin exposing its array fields by name."""

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                out[f.name] = v
        return out

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray]):
        return cls(**{f.name: arrays.get(f.name) for f in fields(cls)})


@dataclass
class MhsaWeights(ParamBundle):
    wq: np.ndarray
    bq: np.ndarray | None
    wk: np.ndarray
    bk: np.ndarray | None
    wv: np.ndarray
    bv: np.ndarray | None
    wproj: np.ndarray
    bproj: np.ndarray | None


@dataclass
class HmhsaWeights(ParamBundle):
    wq: np.ndarray  # [C/2, C]
    bq: np.ndarray | None
    wk: np.ndarray  # [C/2, C]
    bk: np.ndarray | None
    wv: np.ndarray
    bv: np.ndarray | None
    ihh_kernels: np.ndarray  # [h/2, 3, 3]
    ihh_bias: np.ndarray | None
    chh_weight: np.ndarray  # [h/2, h/2]
    chh_bias: np.ndarray | None
    wproj: np.ndarray
    bproj: np.ndarray | None


@dataclass
class AttentionMapStack:
    """Post-softmax maps of one block, ``[h, N, N]`` or batched ``[B, h, N, N]``."""

    maps: np.ndarray
    block_index: int = 0
    provenance: tuple[str, ...] = ()

    @property
    def num_heads(self) -> int:
        return self.maps.shape[-3]


@dataclass
class MapCapture:
    """Per-call buffer that a model forward fills with one stack per block."""

    stacks: list[AttentionMapStack] = field(default_factory=list)
    filled: bool = False


def extract_attention_maps(capture: MapCapture | None) -> list[AttentionMapStack]:
    if capture is None or not capture.filled:
        raise CaptureError("forward was not run with attention-map capture enabled")
    return sorted(capture.stacks, key=lambda s: s.block_index)


def _linear_init(rng, out_dim, in_dim, bias):
    return trunc_normal(rng, (out_dim, in_dim)), (np.zeros(out_dim) if bias else None)


def init_mhsa_weights(cfg: AttentionConfig, rng: np.random.Generator, bias: bool = True) -> MhsaWeights:
    c = cfg.C
    wq, bq = _linear_init(rng, c, c, bias)
    wk, bk = _linear_init(rng, c, c, bias)
    wv, bv = _linear_init(rng, c, c, bias)
    wp, bp = _linear_init(rng, c, c, bias)
    return MhsaWeights(wq, bq, wk, bk, wv, bv, wp, bp)


def identity_ihh_kernels(heads: int) -> np.ndarray:
    k = np.zeros((heads, 3, 3))
    k[:, 1, 1] = 1.0
    return k


def init_hmhsa_weights(cfg: AttentionConfig, rng: np.random.Generator, bias: bool = True,
                       chh_bias: bool = True) -> HmhsaWeights:
    """Random projections; IHH and CHH start as identities so hallucinated maps begin as copies."""
    c, half = cfg.C, cfg.h // 2
    wq, bq = _linear_init(rng, c // 2, c, bias)
    wk, bk = _linear_init(rng, c // 2, c, bias)
    wv, bv = _linear_init(rng, c, c, bias)
    wp, bp = _linear_init(rng, c, c, bias)
    return HmhsaWeights(
        wq, bq, wk, bk, wv, bv,
        ihh_kernels=identity_ihh_kernels(half),
        ihh_bias=np.zeros(half) if bias else None,
        chh_weight=np.eye(half),
        chh_bias=np.zeros(half) if chh_bias else None,
        wproj=wp, bproj=bp,
    )


# ---------------------------------------------------------------------------
# head reshapes
# ---------------------------------------------------------------------------

def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(0, 2, 1, 3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    b, nh, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, nh * d)


def _batched(x: np.ndarray, cfg: AttentionConfig) -> tuple[np.ndarray, bool]:
    squeeze = x.ndim == 2
    x3 = x[None] if squeeze else x
    if x3.ndim != 3 or x3.shape[1:] != (cfg.N, cfg.C):
        raise ShapeError(f"attention input {list(x.shape)} does not match N={cfg.N}, C={cfg.C}")
    return x3, squeeze


# ---------------------------------------------------------------------------
# intra-head hallucination (depthwise 3x3 over the key grid)
# ---------------------------------------------------------------------------

def _ihh_layout(a: np.ndarray, cfg: AttentionConfig) -> tuple[np.ndarray, np.ndarray]:
    b, nh, n, nk = a.shape
    off = cfg.class_offset
    if cfg.H is None or cfg.W is None or nk - off != cfg.H * cfg.W:
        raise GridError(f"{nk} keys (class offset {off}) do not form a {cfg.H}x{cfg.W} grid")
    cls_col = a[..., :off]
    grid = a[..., off:].transpose(0, 2, 1, 3).reshape(b * n, nh, cfg.H, cfg.W)
    return cls_col, grid


def _ihh_unlayout(cls_col: np.ndarray, grid: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    b, nh, n, nk = shape
    patches = grid.reshape(b, n, nh, nk - cls_col.shape[-1]).transpose(0, 2, 1, 3)
    return np.concatenate([cls_col, patches], axis=-1)


def _ihh_batched(a, kernels, bias, cfg):
    cls_col, grid = _ihh_layout(a, cfg)
    return _ihh_unlayout(cls_col, depthwise_conv3x3(grid, kernels, bias), a.shape)


def _ihh_vjp_batched(g, a, kernels, bias, cfg):
    _, grid = _ihh_layout(a, cfg)
    g_cls, g_grid = _ihh_layout(g, cfg)
    gx, gk, gb = depthwise_conv3x3_vjp(g_grid, grid, kernels, bias)
    return _ihh_unlayout(g_cls, gx, a.shape), gk, gb


def ihh(a: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None, cfg: AttentionConfig) -> np.ndarray:
    """Depthwise 3x3 over each map's key axis reshaped to ``H x W``.

    ``a`` is ``[h/2, N, N]`` or ``[B, h/2, N, N]``. A class-token key column
    is passed through untouched.
    """
    if a.ndim == 3:
        return _ihh_batched(a[None], kernels, bias, cfg)[0]
    return _ihh_batched(a, kernels, bias, cfg)


def ihh_vjp(g, a, kernels, bias, cfg):
    if a.ndim == 3:
        gx, gk, gb = _ihh_vjp_batched(g[None], a[None], kernels, bias, cfg)
        return gx[0], gk, gb
    return _ihh_vjp_batched(g, a, kernels, bias, cfg)


# ---------------------------------------------------------------------------
# cross-head hallucination (1x1 across heads)
# ---------------------------------------------------------------------------

def chh(a: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``out[o, i, j] = sum_c weight[o, c] * a[c, i, j] + bias[o]``; head axis is ``-3``."""
    if weight.ndim != 2 or weight.shape[0] != weight.shape[1] or weight.shape[1] != a.shape[-3]:
        raise ShapeError(f"chh: weight {list(weight.shape)} vs maps {list(a.shape)}")
    return np.moveaxis(pointwise_mix(np.moveaxis(a, -3, -1), weight, bias), -1, -3)


def chh_vjp(g, a, weight, bias=None):
    gx, gw, gb = pointwise_mix_vjp(np.moveaxis(g, -3, -1), np.moveaxis(a, -3, -1), weight, bias)
    return np.moveaxis(gx, -1, -3), gw, gb


# ---------------------------------------------------------------------------
# forwards with pullbacks
# ---------------------------------------------------------------------------

Pullback = Callable[[np.ndarray], tuple[np.ndarray, dict[str, np.ndarray]]]


def _grads(**kw) -> dict[str, np.ndarray]:
    return {k: v for k, v in kw.items() if v is not None}


def mhsa_with_vjp(x: np.ndarray, w: MhsaWeights, cfg: AttentionConfig):
    """Vanilla MHSA. Returns ``(out, maps, pullback)``; ``maps`` is ``[B, h, N, N]``."""
    x3, squeeze = _batched(x, cfg)
    h, scale = cfg.h, cfg.scale
    with mac_scope("qkv"):
        q = pointwise_mix(x3, w.wq, w.bq)
        k = pointwise_mix(x3, w.wk, w.bk)
        v = pointwise_mix(x3, w.wv, w.bv)
    qh, kh, vh = split_heads(q, h), split_heads(k, h), split_heads(v, h)
    with mac_scope("qk"):
        kt = np.swapaxes(kh, -1, -2)
        a_pre = matmul(qh, kt) * scale
    a_post = softmax_lastdim(a_pre)
    with mac_scope("av"):
        ctx = matmul(a_post, vh)
    merged = merge_heads(ctx)
    with mac_scope("proj"):
        out = pointwise_mix(merged, w.wproj, w.bproj)

    def pullback(g):
        g3 = g[None] if squeeze else g
        g_merged, gwp, gbp = pointwise_mix_vjp(g3, merged, w.wproj, w.bproj)
        g_ctx = split_heads(g_merged, h)
        g_post, g_vh = matmul_vjp(g_ctx, a_post, vh)
        g_pre = softmax_vjp_from_output(g_post, a_post) * scale
        g_qh, g_kt = matmul_vjp(g_pre, qh, kt)
        g_kh = np.swapaxes(g_kt, -1, -2)
        gx_q, gwq, gbq = pointwise_mix_vjp(merge_heads(g_qh), x3, w.wq, w.bq)
        gx_k, gwk, gbk = pointwise_mix_vjp(merge_heads(g_kh), x3, w.wk, w.bk)
        gx_v, gwv, gbv = pointwise_mix_vjp(merge_heads(g_vh), x3, w.wv, w.bv)
        gx = gx_q + gx_k + gx_v
        grads = _grads(wq=gwq, bq=gbq, wk=gwk, bk=gbk, wv=gwv, bv=gbv, wproj=gwp, bproj=gbp)
        return (gx[0] if squeeze else gx), grads

    return (out[0] if squeeze else out), a_post, pullback


def _apply_hallucination(a_r, w: HmhsaWeights, cfg: AttentionConfig):
    """Run ``cfg.hallucination_ops`` in order; returns the result and a pullback."""
    steps = []
    cur = a_r
    for op in cfg.hallucination_ops:
        steps.append((op, cur))
        if op == "ihh":
            with mac_scope("ihh"):
                cur = _ihh_batched(cur, w.ihh_kernels, w.ihh_bias, cfg)
        elif op == "chh":
            with mac_scope("chh"):
                cur = chh(cur, w.chh_weight, w.chh_bias)
        else:
            cur = cur.copy()

    def pullback(g):
        grads: dict[str, np.ndarray] = {}
        for op, inp in reversed(steps):
            if op == "ihh":
                g, gk, gb = _ihh_vjp_batched(g, inp, w.ihh_kernels, w.ihh_bias, cfg)
                _accumulate(grads, ihh_kernels=gk, ihh_bias=gb)
            elif op == "chh":
                g, gw, gb = chh_vjp(g, inp, w.chh_weight, w.chh_bias)
                _accumulate(grads, chh_weight=gw, chh_bias=gb)
        return g, grads

    return cur, pullback


def _accumulate(grads: dict, **kw) -> None:
    for k, v in kw.items():
        if v is None:
            continue
        grads[k] = grads[k] + v if k in grads else v


def hmhsa_with_vjp(x: np.ndarray, w: HmhsaWeights, cfg: AttentionConfig):
    """Hallucinated MHSA. Returns ``(out, maps, pullback)``.

    Maps ``0..h/2-1`` of the returned ``[B, h, N, N]`` stack are real, the rest
    hallucinated; map ``i`` retrieves from value head ``i``.
    """
    if cfg.mode != "hallucinated":
        raise ValueError("hmhsa needs an AttentionConfig with mode='hallucinated'")
    x3, squeeze = _batched(x, cfg)
    h, half, scale = cfg.h, cfg.h // 2, cfg.scale
    with mac_scope("qkv"):
        q = pointwise_mix(x3, w.wq, w.bq)
        k = pointwise_mix(x3, w.wk, w.bk)
        v = pointwise_mix(x3, w.wv, w.bv)
    qh, kh, vh = split_heads(q, half), split_heads(k, half), split_heads(v, h)
    with mac_scope("qk"):
        kt = np.swapaxes(kh, -1, -2)
        a_r = matmul(qh, kt) * scale
    a_h, hall_pullback = _apply_hallucination(a_r, w, cfg)
    a_pre = np.concatenate([a_r, a_h], axis=1)
    a_post = softmax_lastdim(a_pre)
    with mac_scope("av"):
        ctx = matmul(a_post, vh)
    merged = merge_heads(ctx)
    with mac_scope("proj"):
        out = pointwise_mix(merged, w.wproj, w.bproj)

    def pullback(g):
        g3 = g[None] if squeeze else g
        g_merged, gwp, gbp = pointwise_mix_vjp(g3, merged, w.wproj, w.bproj)
        g_post, g_vh = matmul_vjp(split_heads(g_merged, h), a_post, vh)
        g_pre = softmax_vjp_from_output(g_post, a_post)
        g_ar_from_h, hall_grads = hall_pullback(g_pre[:, half:])
        g_ar = (g_pre[:, :half] + g_ar_from_h) * scale
        g_qh, g_kt = matmul_vjp(g_ar, qh, kt)
        g_kh = np.swapaxes(g_kt, -1, -2)
        gx_q, gwq, gbq = pointwise_mix_vjp(merge_heads(g_qh), x3, w.wq, w.bq)
        gx_k, gwk, gbk = pointwise_mix_vjp(merge_heads(g_kh), x3, w.wk, w.bk)
        gx_v, gwv, gbv = pointwise_mix_vjp(merge_heads(g_vh), x3, w.wv, w.bv)
        gx = gx_q + gx_k + gx_v
        grads = _grads(wq=gwq, bq=gbq, wk=gwk, bk=gbk, wv=gwv, bv=gbv, wproj=gwp, bproj=gbp)
        grads.update(hall_grads)
        if "ihh" not in cfg.hallucination_ops:
            grads["ihh_kernels"] = np.zeros_like(w.ihh_kernels)
            if w.ihh_bias is not None:
                grads["ihh_bias"] = np.zeros_like(w.ihh_bias)
        if "chh" not in cfg.hallucination_ops:
            grads["chh_weight"] = np.zeros_like(w.chh_weight)
            if w.chh_bias is not None:
                grads["chh_bias"] = np.zeros_like(w.chh_bias)
        return (gx[0] if squeeze else gx), grads

    return (out[0] if squeeze else out), a_post, pullback


def _stack(maps: np.ndarray, squeeze: bool, block_index: int, provenance) -> AttentionMapStack:
    return AttentionMapStack(maps[0] if squeeze else maps, block_index, provenance)


def mhsa_forward(x: np.ndarray, w: MhsaWeights, cfg: AttentionConfig, block_index: int = 0):
    if cfg.mode != "vanilla":
        raise ValueError("mhsa_forward needs an AttentionConfig with mode='vanilla'")
    out, maps, _ = mhsa_with_vjp(x, w, cfg)
    return out, _stack(maps, x.ndim == 2, block_index, ("real",) * cfg.h)


def hmhsa_forward(x: np.ndarray, w: HmhsaWeights, cfg: AttentionConfig, block_index: int = 0):
    out, maps, _ = hmhsa_with_vjp(x, w, cfg)
    half = cfg.h // 2
    return out, _stack(maps, x.ndim == 2, block_index, ("real",) * half + ("hallucinated",) * half)


def duplicated_head_mhsa_weights(w: HmhsaWeights) -> MhsaWeights:
    """MHSA weights whose second half of query/key heads repeats the first half.

    With identity IHH/CHH and zero biases there, the hallucinated block
    computes exactly this vanilla attention.
    """
    def dup(a):
        return None if a is None else np.concatenate([a, a], axis=0)
    return MhsaWeights(dup(w.wq), dup(w.bq), dup(w.wk), dup(w.bk), w.wv, w.bv, w.wproj, w.bproj)
