"""Dense float64 array ops with hand-written vector-Jacobian products.

Every differentiable primitive comes as a ``forward`` function plus a ``*_vjp``
function taking the upstream cotangent followed by the original inputs and
returning one gradient per differentiable input. Tensors are plain
``numpy.ndarray`` objects in float64; forwards never mutate their inputs.

Multiply-accumulates of ``matmul``, ``pointwise_mix`` and ``depthwise_conv3x3``
are reported to an active :class:`MacCounter` (see :func:`count_macs`), which is
how the cost model traces an assembled network.
"""
from __future__ import annotations

import contextlib
import contextvars
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

log = logging.getLogger(__name__)

DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-6


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class StatisticsError(ValueError):
    """Too few positions to estimate batch statistics."""


class GradCheckError(RuntimeError):
    pass


def as_tensor(x, *, check_finite: bool = True) -> np.ndarray:
    arr = np.array(x, dtype=DTYPE)
    if check_finite and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical streams on every platform for a given seed."""
    return np.random.Generator(np.random.PCG64(seed))


def trunc_normal(rng: np.random.Generator | None, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations by resampling.

    ``rng=None`` returns zeros, for builds where only shapes matter.
    """
    if rng is None:
        return np.zeros(shape)
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


# ---------------------------------------------------------------------------
# Tensor files
# ---------------------------------------------------------------------------

def tensor_to_json(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=DTYPE)
    # float repr is the shortest string that round-trips the exact double
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}


def tensor_from_json(doc: dict) -> np.ndarray:
    shape = tuple(int(s) for s in doc["shape"])
    data = np.array(doc["data"], dtype=DTYPE)
    if int(np.prod(shape, dtype=np.int64)) != data.size:
        raise ShapeError(f"shape {list(shape)} does not match {data.size} data values")
    return data.reshape(shape)


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_text(json.dumps(tensor_to_json(arr)))


def load_tensor(path) -> np.ndarray:
    return tensor_from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# MAC tracing
# ---------------------------------------------------------------------------

@dataclass
class MacCounter:
    """Accumulates multiply-accumulate counts keyed by the active scope path."""

    by_scope: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    by_kind: dict[tuple[str, str], int] = field(default_factory=lambda: defaultdict(int))

    def add(self, kind: str, macs: int) -> None:
        scope = ".".join(_SCOPE.get())
        self.by_scope[scope] += macs
        self.by_kind[(scope, kind)] += macs

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def under(self, prefix: str) -> int:
        return sum(v for k, v in self.by_scope.items() if k == prefix or k.startswith(prefix + "."))


_COUNTER: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar("mac_counter", default=None)
_SCOPE: contextvars.ContextVar[tuple[str, ...]] = contextvars.ContextVar("mac_scope", default=())


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    token = _COUNTER.set(counter)
    try:
        yield counter
    finally:
        _COUNTER.reset(token)


@contextlib.contextmanager
def mac_scope(name: str) -> Iterator[None]:
    token = _SCOPE.set(_SCOPE.get() + (name,))
    try:
        yield
    finally:
        _SCOPE.reset(token)


def _record(kind: str, macs: int) -> None:
    counter = _COUNTER.get()
    if counter is not None:
        counter.add(kind, int(macs))


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def _check_matmul(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {list(a.shape)} vs {list(b.shape)}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product ``a @ b``.

    ``b`` is either 2-D (shared across ``a``'s leading dims) or has exactly
    the same leading dims as ``a``.
    """
    _check_matmul(a, b)
    p, q = a.shape[-2:]
    _record("matmul", int(np.prod(a.shape[:-2], dtype=np.int64)) * p * q * b.shape[-1])
    return np.matmul(a, b)


def matmul_vjp(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    if b.ndim == 2 and gb.ndim > 2:
        gb = gb.reshape(-1, *b.shape).sum(axis=0)
    return ga, gb


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def softmax_lastdim(a: np.ndarray) -> np.ndarray:
    if a.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    e = a - a.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_vjp_from_output(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def softmax_vjp(g: np.ndarray, a: np.ndarray) -> tuple[np.ndarray]:
    return (softmax_vjp_from_output(g, softmax_lastdim(a)),)


# ---------------------------------------------------------------------------
# depthwise 3x3 convolution, zero padding 1, stride 1
# ---------------------------------------------------------------------------

def _check_dw(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None) -> None:
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv3x3 expects [B,Ch,H,W], got {list(x.shape)}")
    if kernels.shape != (x.shape[1], 3, 3):
        raise ShapeError(
            f"depthwise_conv3x3: kernels {list(kernels.shape)} do not match {x.shape[1]} channels"
        )
    if bias is not None and bias.shape != (x.shape[1],):
        raise ShapeError(f"depthwise_conv3x3: bias {list(bias.shape)} for {x.shape[1]} channels")


def depthwise_conv3x3(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    _check_dw(x, kernels, bias)
    b, ch, hh, ww = x.shape
    _record("dwconv", b * ch * hh * ww * 9)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x)
    tmp = np.empty_like(x)
    for di in range(3):
        for dj in range(3):
            np.multiply(kernels[None, :, di, dj, None, None], xp[:, :, di:di + hh, dj:dj + ww], out=tmp)
            out += tmp
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def depthwise_conv3x3_vjp(g, x, kernels, bias=None):
    _, _, hh, ww = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gxp = np.zeros_like(xp)
    gk = np.empty_like(kernels)
    for di in range(3):
        for dj in range(3):
            gxp[:, :, di:di + hh, dj:dj + ww] += kernels[None, :, di, dj, None, None] * g
            gk[:, di, dj] = np.einsum("bchw,bchw->c", g, xp[:, :, di:di + hh, dj:dj + ww])
    gx = gxp[:, :, 1:-1, 1:-1]
    gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
    return gx, gk, gb


# ---------------------------------------------------------------------------
# pointwise (1x1) mixing over the trailing axis: x @ weight.T + bias
# ---------------------------------------------------------------------------

def pointwise_mix(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"pointwise_mix: input {list(x.shape)} vs weight {list(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"pointwise_mix: bias {list(bias.shape)} vs weight {list(weight.shape)}")
    positions = int(np.prod(x.shape[:-1], dtype=np.int64))
    _record("pointwise", positions * weight.shape[0] * weight.shape[1])
    out = np.matmul(x, weight.T)
    if bias is not None:
        out = out + bias
    return out


def pointwise_mix_vjp(g, x, weight, bias=None):
    gx = np.matmul(g, weight)
    gw = np.matmul(g.reshape(-1, g.shape[-1]).T, x.reshape(-1, x.shape[-1]))
    gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias is not None else None
    return gx, gw, gb


# ---------------------------------------------------------------------------
# batch norm over the trailing channel axis
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray | None
    running_var: np.ndarray | None
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.running_var is not None and np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def identity(cls, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> "BatchNormState":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps, momentum)

    def copy(self) -> "BatchNormState":
        def c(a):
            return None if a is None else a.copy()
        return BatchNormState(c(self.gamma), c(self.beta), c(self.running_mean), c(self.running_var),
                              self.eps, self.momentum)

    def fold(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel ``(scale, shift)`` such that eval-mode BN is ``x*scale + shift``."""
        if self.running_mean is None or self.running_var is None:
            raise StatisticsError("batch norm has no running statistics")
        scale = self.gamma / np.sqrt(self.running_var + self.eps)
        return scale, self.beta - self.running_mean * scale


def batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = x.reshape(-1, x.shape[-1])
    if flat.shape[0] < 2:
        raise StatisticsError(f"train-mode batch norm needs at least 2 positions, got {flat.shape[0]}")
    return flat.mean(axis=0), flat.var(axis=0)


def bn_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = BN_EPS) -> np.ndarray:
    mean, var = batch_stats(x)
    return gamma * (x - mean) / np.sqrt(var + eps) + beta


def bn_train_vjp(g, x, gamma, beta, eps: float = BN_EPS):
    mean, var = batch_stats(x)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    g2 = g.reshape(-1, g.shape[-1])
    xh2 = xhat.reshape(-1, x.shape[-1])
    ggamma = (g2 * xh2).sum(axis=0)
    gbeta = g2.sum(axis=0)
    gxhat = g * gamma
    gx = inv * (gxhat - gxhat.reshape(-1, x.shape[-1]).mean(axis=0)
                - xhat * (gxhat * xhat).reshape(-1, x.shape[-1]).mean(axis=0))
    return gx, ggamma, gbeta


def bn_eval(x, gamma, beta, running_mean, running_var, eps: float = BN_EPS) -> np.ndarray:
    return gamma * (x - running_mean) / np.sqrt(running_var + eps) + beta


def bn_eval_vjp(g, x, gamma, beta, running_mean, running_var, eps: float = BN_EPS):
    inv = 1.0 / np.sqrt(running_var + eps)
    g2 = g.reshape(-1, g.shape[-1])
    xhat = ((x - running_mean) * inv).reshape(-1, x.shape[-1])
    return g * gamma * inv, (g2 * xhat).sum(axis=0), g2.sum(axis=0)


def update_running_stats(state: BatchNormState, x: np.ndarray) -> None:
    """Momentum update of ``state``'s running statistics from a batch (unbiased variance)."""
    mean, var = batch_stats(x)
    n = x.size // x.shape[-1]
    unbiased = var * n / (n - 1)
    mom = state.momentum
    state.running_mean = (1 - mom) * state.running_mean + mom * mean
    state.running_var = (1 - mom) * state.running_var + mom * unbiased


def batchnorm(x: np.ndarray, state: BatchNormState, mode: str = "eval") -> np.ndarray:
    """Batch norm with statistics over every non-channel position.

    In ``"train"`` mode the batch statistics normalize ``x`` and ``state``'s
    running statistics are updated in place; ``"eval"`` uses the running ones.
    """
    if mode == "train":
        out = bn_train(x, state.gamma, state.beta, state.eps)
        update_running_stats(state, x)
        return out
    if mode == "eval":
        if state.running_mean is None or state.running_var is None:
            raise StatisticsError("eval-mode batch norm without running statistics")
        return bn_eval(x, state.gamma, state.beta, state.running_mean, state.running_var, state.eps)
    raise ValueError(f"unknown batch norm mode {mode!r}")


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    if x.shape[-1] < 2:
        raise ShapeError("layernorm needs at least 2 channels")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gamma * (x - mean) / np.sqrt(var + eps) + beta


def layernorm_vjp(g, x, gamma, beta, eps: float = LN_EPS):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    lead = tuple(range(x.ndim - 1))
    ggamma = (g * xhat).sum(axis=lead)
    gbeta = g.sum(axis=lead)
    gxhat = g * gamma
    gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# GELU (exact erf form)
# ---------------------------------------------------------------------------

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_vjp(g: np.ndarray, x: np.ndarray) -> tuple[np.ndarray]:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (g * (cdf + x * pdf),)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Op:
    """A forward function paired with its VJP.

    ``vjp(g, *inputs)`` returns one gradient per input; ``None`` entries mark
    inputs that are not differentiated (skipped by :func:`vjp_check`).
    """

    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., Sequence[np.ndarray | None]]


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor, 1e-300)
    return float(np.linalg.norm(analytic - numeric) / denom)


def _numeric_grad(op: Op, inputs: list[np.ndarray], i: int, g: np.ndarray, eps: float) -> np.ndarray:
    x = inputs[i]
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        plus = float(np.sum(g * op.forward(*inputs)))
        flat[j] = orig - eps
        minus = float(np.sum(g * op.forward(*inputs)))
        flat[j] = orig
        nflat[j] = (plus - minus) / (2 * eps)
    return numeric


def _single_check(op: Op, inputs: list[np.ndarray], eps: float, rng: np.random.Generator) -> float:
    out = op.forward(*inputs)
    g = rng.standard_normal(np.shape(out))
    grads = op.vjp(g, *inputs)
    if len(grads) != len(inputs):
        raise GradCheckError(f"{op.name}: vjp returned {len(grads)} grads for {len(inputs)} inputs")
    pairs = []
    for i, ga in enumerate(grads):
        if ga is None:
            continue
        if np.shape(ga) != inputs[i].shape:
            raise GradCheckError(f"{op.name}: grad {i} has shape {np.shape(ga)}, input has {inputs[i].shape}")
        pairs.append((np.asarray(ga), _numeric_grad(op, inputs, i, g, eps)))
    # inputs whose true gradient vanishes (e.g. a key bias under softmax) are
    # judged against the largest gradient of the op instead of their own norm
    floor = 1e-6 * max((np.linalg.norm(n) for _, n in pairs), default=0.0)
    return max((_relative_error(a, n, floor) for a, n in pairs), default=0.0)


def vjp_check(op: Op, inputs: Sequence, eps: float = 1e-5, tol: float = 1e-4,
              seed: int = 0, retries: int = 3) -> float:
    """Worst relative error between ``op.vjp`` and central finite differences.

    A random cotangent is drawn; each input entry is perturbed by ``±eps``.
    Errors above ``tol`` are treated as a possible non-differentiable point and
    retried on slightly perturbed inputs, at most ``retries`` attempts total.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    rng = make_rng(seed)
    xs = [np.array(x, dtype=DTYPE) for x in inputs]
    err = float("inf")
    for attempt in range(retries):
        err = _single_check(op, xs, eps, rng)
        if err < tol:
            return err
        log.warning("%s: relative error %.3g on attempt %d, perturbing inputs", op.name, err, attempt + 1)
        xs = [x + 1e-3 * rng.standard_normal(x.shape) for x in xs]
    return err
