"""Vanilla FFN, compact FFN and the branch re-parameterization that links its two forms.

Matrices here use the ``x @ W`` layout (``W`` is ``[in, out]``).

The compact FFN keeps the expansion ``M1`` and replaces ``M2`` (``mC x C``)
with two thin factors of inner width ``k = t*m*C/(m+1)``. During training each
factor is a sum of ``r`` parallel (bias-free matmul -> BatchNorm) branches;
:func:`reparam_merge` folds every branch's eval-mode BatchNorm into its matrix
and sums the branches, giving one matrix plus bias per factor.

``factor_target="M1"`` moves the factorization to the input side:
``x -> U -> V -> GELU -> M2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .tensor_core import (
    BatchNormState,
    ShapeError,
    StatisticsError,
    bn_eval,
    bn_eval_vjp,
    bn_train,
    bn_train_vjp,
    gelu,
    gelu_vjp,
    mac_scope,
    matmul,
    matmul_vjp,
    trunc_normal,
    update_running_stats,
)


def as_fraction(value) -> Fraction:
    """Exact rational for ``t``/``m``; floats are snapped to the nearest small-denominator fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, np.integer)):
        return Fraction(int(value))
    if isinstance(value, str):
        return Fraction(value)
    return Fraction(float(value)).limit_denominator(10_000)


def compact_dim(C: int, m, t) -> int:
    """Inner width ``round(t*m*C/(m+1))`` (half to even), at least 1."""
    m, t = as_fraction(m), as_fraction(t)
    if C < 1 or m <= 0 or not 0 < t <= 1:
        raise ValueError(f"compact_dim needs C >= 1, m > 0, 0 < t <= 1; got C={C}, m={m}, t={t}")
    return max(1, round(t * m * C / (m + 1)))


@dataclass(frozen=True)
class FfnConfig:
    C: int
    m: int = 4
    t: Fraction = Fraction(2, 3)
    r: int = 2
    factor_target: str = "M2"

    def __post_init__(self):
        object.__setattr__(self, "t", as_fraction(self.t))
        if self.factor_target not in ("M1", "M2"):
            raise ValueError(f"factor_target must be 'M1' or 'M2', got {self.factor_target!r}")
        if self.r < 1:
            raise ValueError("need at least one re-parameterization branch")
        if self.hidden < 1:
            raise ValueError("m*C must be at least 1")
        compact_dim(self.C, self.m, self.t)

    @property
    def hidden(self) -> int:
        return int(self.m * self.C)

    @property
    def k(self) -> int:
        return compact_dim(self.C, self.m, self.t)

    def factor_shapes(self) -> tuple[tuple[int, int], tuple[int, int]]:
        """Shapes of the ``U`` and ``V`` factors."""
        if self.factor_target == "M2":
            return (self.hidden, self.k), (self.k, self.C)
        return (self.C, self.k), (self.k, self.hidden)


# ---------------------------------------------------------------------------
# vanilla FFN
# ---------------------------------------------------------------------------

@dataclass
class FfnWeights:
    m1: np.ndarray
    b1: np.ndarray | None
    m2: np.ndarray
    b2: np.ndarray | None

    def named(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in vars(self).items() if v is not None}


def init_ffn_weights(cfg: FfnConfig, rng: np.random.Generator, bias: bool = True) -> FfnWeights:
    hid = cfg.hidden
    return FfnWeights(trunc_normal(rng, (cfg.C, hid)), np.zeros(hid) if bias else None,
                      trunc_normal(rng, (hid, cfg.C)), np.zeros(cfg.C) if bias else None)


def _dense(x, w, b):
    y = matmul(x, w)
    return y + b if b is not None else y


def ffn_with_vjp(x: np.ndarray, w: FfnWeights):
    if x.shape[-1] != w.m1.shape[0] or w.m1.shape[1] != w.m2.shape[0]:
        raise ShapeError(f"ffn: input {list(x.shape)}, M1 {list(w.m1.shape)}, M2 {list(w.m2.shape)}")
    with mac_scope("fc1"):
        pre = _dense(x, w.m1, w.b1)
    act = gelu(pre)
    with mac_scope("fc2"):
        out = _dense(act, w.m2, w.b2)

    def pullback(g):
        g_act, gm2 = matmul_vjp(g, act, w.m2)
        g_pre = gelu_vjp(g_act, pre)[0]
        gx, gm1 = matmul_vjp(g_pre, x, w.m1)
        grads = {"m1": gm1, "m2": gm2}
        if w.b1 is not None:
            grads["b1"] = _sum_lead(g_pre)
        if w.b2 is not None:
            grads["b2"] = _sum_lead(g)
        return gx, grads

    return out, pullback


def ffn_forward(x, m1, b1, m2, b2) -> np.ndarray:
    """``GELU(x @ m1 + b1) @ m2 + b2``."""
    return ffn_with_vjp(x, FfnWeights(m1, b1, m2, b2))[0]


def _sum_lead(g):
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# ---------------------------------------------------------------------------
# compact FFN
# ---------------------------------------------------------------------------

@dataclass
class Branch:
    """One bias-free matmul followed by BatchNorm over its output channels."""

    weight: np.ndarray
    bn: BatchNormState


@dataclass
class CffnTrainWeights:
    """Training form. ``dense_*`` is ``M1`` when factorizing ``M2`` and ``M2`` otherwise."""

    dense_w: np.ndarray
    dense_b: np.ndarray | None
    u_branches: list[Branch]
    v_branches: list[Branch]
    factor_target: str = "M2"
    form: str = "train"

    def __post_init__(self):
        for stage in (self.u_branches, self.v_branches):
            if not stage:
                raise ValueError("each factor needs at least one branch")
            if len({b.weight.shape for b in stage}) != 1:
                raise ShapeError("branch shapes differ within a stage")

    @property
    def r(self) -> int:
        return len(self.u_branches)

    def named(self) -> dict[str, np.ndarray]:
        out = {"dense_w": self.dense_w}
        if self.dense_b is not None:
            out["dense_b"] = self.dense_b
        for stage, branches in (("u", self.u_branches), ("v", self.v_branches)):
            for i, br in enumerate(branches):
                out[f"{stage}.{i}.weight"] = br.weight
                out[f"{stage}.{i}.gamma"] = br.bn.gamma
                out[f"{stage}.{i}.beta"] = br.bn.beta
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for stage, branches in (("u", self.u_branches), ("v", self.v_branches)):
            for i, br in enumerate(branches):
                if br.bn.running_mean is not None:
                    out[f"{stage}.{i}.running_mean"] = br.bn.running_mean
                if br.bn.running_var is not None:
                    out[f"{stage}.{i}.running_var"] = br.bn.running_var
        return out

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray], factor_target: str = "M2") -> "CffnTrainWeights":
        stages = {}
        for stage in ("u", "v"):
            branches = []
            i = 0
            while f"{stage}.{i}.weight" in arrays:
                p = f"{stage}.{i}."
                bn = BatchNormState(arrays[p + "gamma"], arrays[p + "beta"],
                                    arrays.get(p + "running_mean"), arrays.get(p + "running_var"))
                branches.append(Branch(arrays[p + "weight"], bn))
                i += 1
            stages[stage] = branches
        return cls(arrays["dense_w"], arrays.get("dense_b"), stages["u"], stages["v"], factor_target)


@dataclass
class CffnInferWeights:
    """Merged form: one matrix plus bias per factor."""

    dense_w: np.ndarray
    dense_b: np.ndarray | None
    u_hat: np.ndarray
    u_bias: np.ndarray
    v_hat: np.ndarray
    v_bias: np.ndarray
    factor_target: str = "M2"
    form: str = "inference"

    def named(self) -> dict[str, np.ndarray]:
        out = {"dense_w": self.dense_w, "u_hat": self.u_hat, "u_bias": self.u_bias,
               "v_hat": self.v_hat, "v_bias": self.v_bias}
        if self.dense_b is not None:
            out["dense_b"] = self.dense_b
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray], factor_target: str = "M2") -> "CffnInferWeights":
        return cls(arrays["dense_w"], arrays.get("dense_b"), arrays["u_hat"], arrays["u_bias"],
                   arrays["v_hat"], arrays["v_bias"], factor_target)


def init_cffn_train_weights(cfg: FfnConfig, rng: np.random.Generator, bias: bool = True) -> CffnTrainWeights:
    """Branches are truncated-normal scaled by ``1/r``; BatchNorms start at identity statistics."""
    (u_in, u_out), (v_in, v_out) = cfg.factor_shapes()
    if cfg.factor_target == "M2":
        dense_shape = (cfg.C, cfg.hidden)
    else:
        dense_shape = (cfg.hidden, cfg.C)
    dense_w = trunc_normal(rng, dense_shape)
    dense_b = np.zeros(dense_shape[1]) if bias else None
    u = [Branch(trunc_normal(rng, (u_in, u_out), std=0.02 / cfg.r), BatchNormState.identity(u_out)) for _ in range(cfg.r)]
    v = [Branch(trunc_normal(rng, (v_in, v_out), std=0.02 / cfg.r), BatchNormState.identity(v_out)) for _ in range(cfg.r)]
    return CffnTrainWeights(dense_w, dense_b, u, v, cfg.factor_target)


def _branch_stage_with_vjp(x, branches: list[Branch], mode: str, prefix: str):
    """``sum_i BN_i(x @ W_i)``; returns output, pullback and per-branch pre-BN activations."""
    pres = []
    out = None
    for br in branches:
        z = matmul(x, br.weight)
        pres.append(z)
        if mode == "train":
            y = bn_train(z, br.bn.gamma, br.bn.beta, br.bn.eps)
        else:
            y = bn_eval(z, br.bn.gamma, br.bn.beta, br.bn.running_mean, br.bn.running_var, br.bn.eps)
        out = y if out is None else out + y

    def pullback(g):
        gx = None
        grads = {}
        for i, (br, z) in enumerate(zip(branches, pres)):
            if mode == "train":
                gz, ggam, gbet = bn_train_vjp(g, z, br.bn.gamma, br.bn.beta, br.bn.eps)
            else:
                gz, ggam, gbet = bn_eval_vjp(g, z, br.bn.gamma, br.bn.beta,
                                             br.bn.running_mean, br.bn.running_var, br.bn.eps)
            gxi, gw = matmul_vjp(gz, x, br.weight)
            gx = gxi if gx is None else gx + gxi
            grads[f"{prefix}.{i}.weight"] = gw
            grads[f"{prefix}.{i}.gamma"] = ggam
            grads[f"{prefix}.{i}.beta"] = gbet
        return gx, grads

    return out, pullback, pres


def _check_stats(w: CffnTrainWeights):
    for br in w.u_branches + w.v_branches:
        if br.bn.running_mean is None or br.bn.running_var is None:
            raise StatisticsError("cFFN branch batch norm is missing running statistics")


def cffn_train_with_vjp(x: np.ndarray, w: CffnTrainWeights, mode: str = "train"):
    """Training-form forward. Returns ``(out, pullback, batch_inputs)``.

    ``batch_inputs`` maps each branch to its pre-BN activation so a caller can
    update running statistics (see :func:`update_branch_stats`).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train":
        positions = x.size // x.shape[-1]
        if positions < 2:
            raise StatisticsError(f"train-mode cFFN needs at least 2 token positions, got {positions}")
    else:
        _check_stats(w)
    if w.factor_target == "M2":
        with mac_scope("fc1"):
            pre = _dense(x, w.dense_w, w.dense_b)
        act = gelu(pre)
        with mac_scope("u"):
            u, pb_u, pres_u = _branch_stage_with_vjp(act, w.u_branches, mode, "u")
        with mac_scope("v"):
            out, pb_v, pres_v = _branch_stage_with_vjp(u, w.v_branches, mode, "v")
    else:
        with mac_scope("u"):
            u, pb_u, pres_u = _branch_stage_with_vjp(x, w.u_branches, mode, "u")
        with mac_scope("v"):
            pre, pb_v, pres_v = _branch_stage_with_vjp(u, w.v_branches, mode, "v")
        act = gelu(pre)
        with mac_scope("fc2"):
            out = _dense(act, w.dense_w, w.dense_b)

    def pullback(g):
        grads = {}
        if w.factor_target == "M2":
            g_u, gv = pb_v(g)
            g_act, gu = pb_u(g_u)
            g_pre = gelu_vjp(g_act, pre)[0]
            gx, gd = matmul_vjp(g_pre, x, w.dense_w)
            g_bias = g_pre
        else:
            g_act, gd = matmul_vjp(g, act, w.dense_w)
            g_pre = gelu_vjp(g_act, pre)[0]
            g_u, gv = pb_v(g_pre)
            gx, gu = pb_u(g_u)
            g_bias = g
        grads["dense_w"] = gd
        if w.dense_b is not None:
            grads["dense_b"] = _sum_lead(g_bias)
        grads.update(gu)
        grads.update(gv)
        return gx, grads

    return out, pullback, {"u": pres_u, "v": pres_v}


def update_branch_stats(w: CffnTrainWeights, batch_inputs: dict[str, list[np.ndarray]]) -> None:
    for stage, branches in (("u", w.u_branches), ("v", w.v_branches)):
        for br, z in zip(branches, batch_inputs[stage]):
            update_running_stats(br.bn, z)


def cffn_train_forward(x: np.ndarray, w: CffnTrainWeights, mode: str = "train") -> np.ndarray:
    """Training-form forward; in ``"train"`` mode the branches' running statistics are updated."""
    out, _, pres = cffn_train_with_vjp(x, w, mode)
    if mode == "train":
        update_branch_stats(w, pres)
    return out


def _merge_stage(branches: list[Branch]) -> tuple[np.ndarray, np.ndarray]:
    weight = None
    bias = None
    for br in branches:
        scale, shift = br.bn.fold()
        wi = br.weight * scale  # scales output columns: W @ diag(scale)
        weight = wi if weight is None else weight + wi
        bias = shift if bias is None else bias + shift
    return weight, bias


def reparam_merge(w: CffnTrainWeights, copy: bool = True) -> CffnInferWeights:
    """Fold each branch's eval-mode BatchNorm into its matrix and sum the branches.

    ``copy=False`` shares the dense layer with ``w`` instead of copying it.
    """
    _check_stats(w)
    u_hat, u_bias = _merge_stage(w.u_branches)
    v_hat, v_bias = _merge_stage(w.v_branches)
    dense_w, dense_b = w.dense_w, w.dense_b
    if copy:
        dense_w = dense_w.copy()
        dense_b = None if dense_b is None else dense_b.copy()
    return CffnInferWeights(dense_w, dense_b, u_hat, u_bias, v_hat, v_bias, w.factor_target)


def cffn_infer_with_vjp(x: np.ndarray, w: CffnInferWeights):
    # the two factors stay separate matmuls; their product would undo the compaction
    if w.factor_target == "M2":
        with mac_scope("fc1"):
            pre = _dense(x, w.dense_w, w.dense_b)
        act = gelu(pre)
        with mac_scope("u"):
            u = matmul(act, w.u_hat) + w.u_bias
        with mac_scope("v"):
            out = matmul(u, w.v_hat) + w.v_bias
    else:
        with mac_scope("u"):
            u = matmul(x, w.u_hat) + w.u_bias
        with mac_scope("v"):
            pre = matmul(u, w.v_hat) + w.v_bias
        act = gelu(pre)
        with mac_scope("fc2"):
            out = _dense(act, w.dense_w, w.dense_b)

    def pullback(g):
        grads = {}
        if w.factor_target == "M2":
            g_u, grads["v_hat"] = matmul_vjp(g, u, w.v_hat)
            grads["v_bias"] = _sum_lead(g)
            g_act, grads["u_hat"] = matmul_vjp(g_u, act, w.u_hat)
            grads["u_bias"] = _sum_lead(g_u)
            g_pre = gelu_vjp(g_act, pre)[0]
            gx, grads["dense_w"] = matmul_vjp(g_pre, x, w.dense_w)
            if w.dense_b is not None:
                grads["dense_b"] = _sum_lead(g_pre)
        else:
            g_act, grads["dense_w"] = matmul_vjp(g, act, w.dense_w)
            if w.dense_b is not None:
                grads["dense_b"] = _sum_lead(g)
            g_pre = gelu_vjp(g_act, pre)[0]
            g_u, grads["v_hat"] = matmul_vjp(g_pre, u, w.v_hat)
            grads["v_bias"] = _sum_lead(g_pre)
            gx, grads["u_hat"] = matmul_vjp(g_u, x, w.u_hat)
            grads["u_bias"] = _sum_lead(g_u)
        return gx, grads

    return out, pullback


def cffn_infer_forward(x: np.ndarray, w: CffnInferWeights) -> np.ndarray:
    return cffn_infer_with_vjp(x, w)[0]

