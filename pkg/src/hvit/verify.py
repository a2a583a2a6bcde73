"""Built-in numerical checks: the VJP suite and the branch-merge sweep."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .attention import (
    AttentionConfig,
    HmhsaWeights,
    MhsaWeights,
    chh,
    chh_vjp,
    hmhsa_with_vjp,
    ihh,
    ihh_vjp,
    init_hmhsa_weights,
    init_mhsa_weights,
    mhsa_with_vjp,
)
from .ffn import (
    Branch,
    CffnInferWeights,
    CffnTrainWeights,
    FfnConfig,
    FfnWeights,
    cffn_infer_forward,
    cffn_infer_with_vjp,
    cffn_train_forward,
    cffn_train_with_vjp,
    ffn_with_vjp,
    init_cffn_train_weights,
    reparam_merge,
)
from .tensor_core import BatchNormState, Op, make_rng, vjp_check

GRAD_TOL = 1e-4
REPARAM_TOL = 1e-9


@dataclass
class GradCase:
    op: Op
    inputs: list[np.ndarray]


def _bundle_op(name: str, with_vjp: Callable, build: Callable[[dict], object], keys: list[str]) -> Op:
    """Wrap a block ``with_vjp(x, bundle)`` as an :class:`Op` over ``(x, *bundle arrays)``."""

    def forward(x, *arrays):
        return with_vjp(x, build(dict(zip(keys, arrays))))[0]

    def vjp(g, x, *arrays):
        pullback = with_vjp(x, build(dict(zip(keys, arrays))))[1]
        gx, grads = pullback(g)
        return (gx, *[grads.get(k) for k in keys])

    return Op(name, forward, vjp)


def _randomize(bundle, rng, scale=0.5):
    """Same bundle with every array replaced by random values (biases and IHH/CHH included)."""
    return {k: scale * rng.standard_normal(v.shape) for k, v in bundle.named().items()}


def _attn_case(seed: int, hallucinated: bool, ops=("ihh", "chh")) -> GradCase:
    rng = make_rng(seed)
    h = 4
    cfg = AttentionConfig(N=5, C=8, h=h, H=2, W=2, has_class_token=True,
                          mode="hallucinated" if hallucinated else "vanilla", hallucination_ops=ops)
    if hallucinated:
        named = _randomize(init_hmhsa_weights(cfg, rng), rng)
        cls, fn, name = HmhsaWeights, hmhsa_with_vjp, "hmhsa_block[" + ",".join(ops) + "]"
    else:
        named = _randomize(init_mhsa_weights(cfg, rng), rng)
        cls, fn, name = MhsaWeights, mhsa_with_vjp, "mhsa_block"
    keys = list(named)

    def with_vjp(x, w):
        out, _, pb = fn(x, w, cfg)
        return out, pb

    op = _bundle_op(name, with_vjp, cls.from_named, keys)
    x = rng.standard_normal((2, cfg.N, cfg.C))
    return GradCase(op, [x, *named.values()])


def _ffn_case(seed: int) -> GradCase:
    rng = make_rng(seed)
    c, hid = 4, 8
    named = {"m1": rng.standard_normal((c, hid)) * 0.5, "b1": rng.standard_normal(hid) * 0.5,
             "m2": rng.standard_normal((hid, c)) * 0.5, "b2": rng.standard_normal(c) * 0.5}
    keys = list(named)
    op = _bundle_op("ffn_block", lambda x, w: ffn_with_vjp(x, w),
                    lambda d: FfnWeights(d["m1"], d["b1"], d["m2"], d["b2"]), keys)
    return GradCase(op, [rng.standard_normal((3, c)), *named.values()])


def _random_bn(rng, ch) -> BatchNormState:
    return BatchNormState(1.0 + 0.3 * rng.standard_normal(ch), 0.3 * rng.standard_normal(ch),
                          0.3 * rng.standard_normal(ch), 0.5 + rng.random(ch))


def random_cffn_train(cfg: FfnConfig, rng: np.random.Generator) -> CffnTrainWeights:
    """Random train-form weights with non-trivial BatchNorm parameters and running statistics."""
    w = init_cffn_train_weights(cfg, rng)
    dense_w = rng.standard_normal(w.dense_w.shape) / np.sqrt(w.dense_w.shape[0])
    dense_b = 0.1 * rng.standard_normal(w.dense_b.shape)

    def branches(stage):
        return [Branch(rng.standard_normal(b.weight.shape) / np.sqrt(b.weight.shape[0]),
                       _random_bn(rng, b.weight.shape[1])) for b in stage]

    return CffnTrainWeights(dense_w, dense_b, branches(w.u_branches), branches(w.v_branches),
                            cfg.factor_target)


def _cffn_case(seed: int, mode: str, factor_target: str = "M2", merged: bool = False) -> GradCase:
    rng = make_rng(seed)
    cfg = FfnConfig(C=4, m=2, t=Fraction(3, 4), r=2, factor_target=factor_target)
    w = random_cffn_train(cfg, rng)
    x = rng.standard_normal((6, cfg.C))
    if merged:
        inf = reparam_merge(w)
        named = inf.named()
        keys = list(named)
        op = _bundle_op(f"cffn_infer[{factor_target}]", cffn_infer_with_vjp,
                        lambda d: CffnInferWeights.from_named(d, factor_target), keys)
        return GradCase(op, [x, *named.values()])
    named = {**w.named(), **w.buffers()}
    keys = list(named)

    def with_vjp(x, ww):
        out, pb, _ = cffn_train_with_vjp(x, ww, mode)
        return out, pb

    op = _bundle_op(f"cffn_train[{mode},{factor_target}]", with_vjp,
                    lambda d: CffnTrainWeights.from_named(d, factor_target), keys)
    return GradCase(op, [x, *named.values()])


def _model_case(seed: int) -> GradCase:
    from .vit_model import ModelConfig, build_model, cross_entropy, forward_with_vjp, model_from_state

    cfg = ModelConfig(img_size=8, patch_size=4, in_channels=2, num_classes=3, depth=1, C=8, h=2, m=2,
                      block_variant="ours", r=2, seed=seed)
    rng = make_rng(seed + 1000)
    model = build_model(cfg)
    params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in model.named_parameters().items()}
    buffers = model.buffers()
    keys = list(params)
    images = rng.standard_normal((3, cfg.in_channels, cfg.img_size, cfg.img_size))
    labels = np.array([0, 1, 2])

    def build(arrays):
        return model_from_state(cfg, {**dict(zip(keys, arrays)), **buffers})

    def forward(*arrays):
        logits, _, _ = forward_with_vjp(build(arrays), images, mode="train")
        return np.array(cross_entropy(logits, labels)[0])

    def vjp(g, *arrays):
        logits, pullback, _ = forward_with_vjp(build(arrays), images, mode="train")
        _, dlogits = cross_entropy(logits, labels)
        grads = pullback(dlogits * float(g))
        return tuple(grads[k] for k in keys)

    return GradCase(Op("vit_toy_loss[ours]", forward, vjp), list(params.values()))


def builtin_cases(seed: int) -> list[GradCase]:
    """Every checked operation with random inputs drawn from ``seed``."""
    rng = make_rng(seed)
    cls_cfg = AttentionConfig(N=5, C=8, h=4, H=2, W=2, has_class_token=True, mode="hallucinated")
    grid_cfg = AttentionConfig(N=6, C=8, h=4, H=2, W=3, mode="hallucinated")
    r = rng.standard_normal
    stats = (r((3,)), 0.5 + rng.random(3))
    cases = [
        GradCase(Op("matmul", tc.matmul, tc.matmul_vjp), [r((3, 4)), r((4, 5))]),
        GradCase(Op("matmul_batched", tc.matmul, tc.matmul_vjp), [r((2, 3, 4)), r((4, 2))]),
        GradCase(Op("softmax_lastdim", tc.softmax_lastdim, tc.softmax_vjp), [r((3, 5))]),
        GradCase(Op("gelu", tc.gelu, tc.gelu_vjp), [0.5 + 0.1 * r((6,))]),
        GradCase(Op("gelu_wide", tc.gelu, tc.gelu_vjp), [2.0 * r((4, 3))]),
        GradCase(Op("depthwise_conv3x3", tc.depthwise_conv3x3, tc.depthwise_conv3x3_vjp),
                 [r((2, 3, 4, 5)), r((3, 3, 3)), r((3,))]),
        GradCase(Op("pointwise_mix", tc.pointwise_mix, tc.pointwise_mix_vjp),
                 [r((2, 3, 3)), r((4, 3)), r((4,))]),
        GradCase(Op("batchnorm_train", tc.bn_train, tc.bn_train_vjp),
                 [r((6, 4)), 1.0 + 0.3 * r((4,)), r((4,))]),
        GradCase(Op("batchnorm_eval",
                    lambda x, g_, b_: tc.bn_eval(x, g_, b_, stats[0], stats[1]),
                    lambda g, x, g_, b_: tc.bn_eval_vjp(g, x, g_, b_, stats[0], stats[1])),
                 [r((5, 3)), r((3,)), r((3,))]),
        GradCase(Op("layernorm", tc.layernorm, tc.layernorm_vjp), [r((3, 6)), r((6,)), r((6,))]),
        GradCase(Op("ihh[class token]", lambda a, k, b: ihh(a, k, b, cls_cfg),
                    lambda g, a, k, b: ihh_vjp(g, a, k, b, cls_cfg)),
                 [r((2, 5, 5)), r((2, 3, 3)), r((2,))]),
        GradCase(Op("ihh[2x3 grid]", lambda a, k, b: ihh(a, k, b, grid_cfg),
                    lambda g, a, k, b: ihh_vjp(g, a, k, b, grid_cfg)),
                 [r((3, 2, 6, 6)), r((2, 3, 3)), r((2,))]),
        GradCase(Op("chh", chh, chh_vjp), [r((3, 4, 4)), r((3, 3)), r((3,))]),
    ]
    cases += [
        _attn_case(seed, hallucinated=False),
        _attn_case(seed, hallucinated=True),
        _attn_case(seed, hallucinated=True, ops=("chh", "ihh")),
        _attn_case(seed, hallucinated=True, ops=("copy",)),
        _ffn_case(seed),
        _cffn_case(seed, "train"),
        _cffn_case(seed, "eval"),
        _cffn_case(seed, "train", factor_target="M1"),
        _cffn_case(seed, "train", merged=True),
        _model_case(seed),
    ]
    return cases


@dataclass
class GradResult:
    name: str
    seed: int
    error: float


def run_grad_suite(seeds=range(10), eps: float = 1e-5, tol: float = GRAD_TOL,
                   names: set[str] | None = None) -> list[GradResult]:
    results = []
    for seed in seeds:
        for case in builtin_cases(seed):
            if names is not None and case.op.name not in names:
                continue
            err = vjp_check(case.op, case.inputs, eps=eps, tol=tol, seed=seed)
            results.append(GradResult(case.op.name, seed, err))
    return results


def worst_by_op(results: list[GradResult]) -> dict[str, GradResult]:
    worst: dict[str, GradResult] = {}
    for res in results:
        if res.name not in worst or res.error > worst[res.name].error:
            worst[res.name] = res
    return worst


@dataclass
class ReparamTrial:
    C: int
    m: int
    t: Fraction
    r: int
    factor_target: str
    max_abs_diff: float


def reparam_sweep(trials: int = 200, seed: int = 0) -> list[ReparamTrial]:
    """Random train-form cFFNs: eval-mode train output vs merged inference output."""
    rng = make_rng(seed)
    out = []
    for _ in range(trials):
        cfg = FfnConfig(C=int(rng.integers(4, 33)), m=int(rng.choice([2, 4])),
                        t=[Fraction(1, 2), Fraction(2, 3), Fraction(3, 4)][rng.integers(3)],
                        r=int(rng.integers(1, 4)), factor_target=("M2", "M1")[rng.integers(2)])
        w = random_cffn_train(cfg, rng)
        x = rng.standard_normal((int(rng.integers(1, 9)), cfg.C))
        diff = np.max(np.abs(cffn_train_forward(x, w, "eval") - cffn_infer_forward(x, reparam_merge(w))))
        out.append(ReparamTrial(cfg.C, cfg.m, cfg.t, cfg.r, cfg.factor_target, float(diff)))
    return out

