"""Acceptance criteria, one test each, at their stated tolerances and runtime bounds.

Each test records a PASS/FAIL line; the lines are repeated in the pytest
terminal summary under "acceptance criteria".
"""
import math
import time
from fractions import Fraction

import numpy as np

from hvit.attention import (AttentionConfig, duplicated_head_mhsa_weights, hmhsa_forward, init_hmhsa_weights,
                            mhsa_forward)
from hvit.cost_model import (REFERENCE_COUNTS, REFERENCE_DELTA_TOL_PP, REFERENCE_REL_TOL, cffn_flops, compare, count_model,
                             ffn_flops, hmhsa_flops, mhsa_flops, reconcile, trace_model)
from hvit.redundancy import block_similarity, ccs, head_pair_similarity
from hvit.attention import AttentionMapStack
from hvit.verify import GRAD_TOL, REPARAM_TOL, reparam_sweep, run_grad_suite, worst_by_op
from hvit.vit_model import (PRESETS, ModelConfig, build_model, evaluate, make_toy_dataset, merge_model,
                            train_toy)


def test_criterion_1_reference_counts(criterion):
    rows, ok = [], True
    for name in ("deit_t", "deit_s"):
        reports = {}
        for variant, cfg in (("vanilla", PRESETS[name]), ("ours", PRESETS[name].ours())):
            t0 = time.perf_counter()
            rep = count_model(cfg, name)
            dt = time.perf_counter() - t0
            ref_p, ref_f = REFERENCE_COUNTS[name][variant]
            p, f = rep.params / 1e6, rep.flops / 1e9
            good = abs(p - ref_p) <= REFERENCE_REL_TOL * ref_p and abs(f - ref_f) <= REFERENCE_REL_TOL * ref_f and dt < 1
            ok &= good
            rows.append(f"{name}{'†' if variant == 'ours' else ''} {p:.2f}M/{f:.2f}G ({dt:.2f}s)")
            reports[variant] = rep
        d = compare(reports["vanilla"], reports["ours"])
        ref = REFERENCE_COUNTS[name]["delta_pct"]
        ok &= abs(d["params_pct"] - ref[0]) <= REFERENCE_DELTA_TOL_PP and abs(d["flops_pct"] - ref[1]) <= REFERENCE_DELTA_TOL_PP
        rows.append(f"{name} delta {d['params_pct']:.1f}%/{d['flops_pct']:.1f}% vs {ref[0]}%/{ref[1]}%")
    criterion(1, ok, "; ".join(rows))


def test_criterion_2_reduction_identity(criterion):
    t0 = time.perf_counter()
    ns = [16, 197, 577, 1024]
    cs = [64, 128, 192, 256, 384, 512, 640, 768]
    hs = [2, 4, 6, 8, 10, 12, 14, 16]
    bad = []
    for n in ns:
        for c in cs:
            for h in hs:
                lhs = mhsa_flops(n, c) - hmhsa_flops(n, c, h)
                rhs = Fraction(n * c * c) + Fraction((2 * c - h * h - 18 * h) * n * n, 4)
                if lhs != rhs:
                    bad.append((n, c, h))
    dt = time.perf_counter() - t0
    count = len(ns) * len(cs) * len(hs)
    criterion(2, not bad and count == 256 and dt < 1, f"{count} grid points, {len(bad)} mismatches, {dt:.3f}s")


def test_criterion_3_cffn_ratio(criterion):
    t0 = time.perf_counter()
    ok = True
    for t in (Fraction(1, 2), Fraction(2, 3), Fraction(3, 4), Fraction(1)):
        for n, c, m in ((196, 384, 4), (197, 192, 4), (50, 64, 2), (7, 5, 3)):
            ratio = Fraction(cffn_flops(n, c, m, t).analytic) / ffn_flops(n, c, m)
            ok &= ratio == (1 + t) / 2
    parity = cffn_flops(196, 384, 4, 1).analytic == ffn_flops(196, 384, 4)
    dt = time.perf_counter() - t0
    criterion(3, ok and parity and dt < 1, f"ratio (1+t)/2 exact for t in 1/2, 2/3, 3/4, 1; t=1 parity {parity}; {dt:.3f}s")


def test_criterion_4_reparam_merge(criterion):
    t0 = time.perf_counter()
    trials = reparam_sweep(200, seed=0)
    dt = time.perf_counter() - t0
    worst = max(t.max_abs_diff for t in trials)
    criterion(4, len(trials) >= 200 and worst < REPARAM_TOL and dt < 30,
              f"{len(trials)} trials, max |diff| = {worst:.2e} (< {REPARAM_TOL:g}), {dt:.2f}s")


def test_criterion_5_gradient_suite(criterion):
    t0 = time.perf_counter()
    results = run_grad_suite(seeds=range(10))
    dt = time.perf_counter() - t0
    worst = worst_by_op(results)
    top = max(worst.values(), key=lambda r: r.error)
    failing = sorted({r.name for r in results if not r.error < GRAD_TOL})
    criterion(5, not failing and dt < 120,
              f"{len(worst)} ops x 10 seeds, worst {top.error:.2e} ({top.name}), {dt:.1f}s"
              + (f", failing: {failing}" if failing else ""))


def test_criterion_6_reconciliation(criterion):
    ok, notes = True, []
    for variant in ("vanilla", "ours"):
        cfg = ModelConfig(img_size=32, patch_size=4, num_classes=10, depth=2, C=64, h=4, class_token=False,
                          bias=False, chh_bias=False, block_variant=variant)
        macs = trace_model(merge_model(build_model(cfg, init="zeros")))
        n, c = cfg.N, cfg.C
        for i in range(cfg.depth):
            if variant == "ours":
                want_a, want_f = hmhsa_flops(n, c, cfg.heads), cffn_flops(n, c, cfg.m, cfg.t).exact_with_k
            else:
                want_a, want_f = mhsa_flops(n, c), ffn_flops(n, c, cfg.m)
            ok &= macs[f"blocks.{i}.attn"] == want_a and macs[f"blocks.{i}.ffn"] == want_f
        notes.append(f"{variant} bias-free blocks exact")
    rep = reconcile(PRESETS["deit_s"].ours())
    kinds = sorted({k for b in rep.flops + rep.params for k, v in b.adjustments.items() if v})
    ok &= rep.ok
    notes.append(f"DeiT-S† residual 0, itemized: {', '.join(kinds)}")
    criterion(6, ok, "; ".join(notes))


def _pair_loop(al, am):
    n = al.shape[0]
    s = 0.0
    for i in range(n):
        dot = na = nb = 0.0
        for j in range(n):
            dot += al[i, j] * am[i, j]
            na += al[i, j] ** 2
            nb += am[i, j] ** 2
        s += dot / math.sqrt(na * nb)
    return s / n


def test_criterion_7_ccs_oracle(criterion):
    rng = np.random.default_rng(0)
    worst = 0.0
    for h in (2, 4, 8):
        for n in (4, 9, 17):
            stacks = []
            for b in range(2):
                a = rng.random((h, n, n))
                stacks.append(AttentionMapStack(a / a.sum(-1, keepdims=True), b))
            ref = np.mean([np.mean([_pair_loop(s.maps[l], s.maps[m]) for l in range(h) for m in range(l + 1, h)])
                           for s in stacks])
            worst = max(worst, abs(ccs(stacks).overall - ref))
    ident = block_similarity(np.stack([np.full((5, 5), 0.2)] * 4))
    eye = np.eye(6)
    disjoint = head_pair_similarity(eye, np.roll(eye, 1, axis=1))
    ok = worst < 1e-12 and abs(ident - 1.0) < 1e-12 and disjoint == 0.0
    criterion(7, ok, f"max |ccs - loop| = {worst:.1e}; identical heads {ident:.12f}; disjoint {disjoint}")


def test_criterion_8_toy_trainability(criterion):
    lines, ok = [], True
    for variant in ("vanilla", "ours"):
        for seed in (0, 1, 2):
            cfg = ModelConfig.from_dict({**PRESETS["toy"].to_dict(), "block_variant": variant, "seed": seed})
            data = make_toy_dataset(seed=seed)
            model = build_model(cfg)
            t0 = time.perf_counter()
            losses = train_toy(model, data, steps=300, lr=0.1, seed=seed)
            dt = time.perf_counter() - t0
            _, acc = evaluate(model, data)
            good = losses[-1] < math.log(2) and acc > 0.9 and dt < 300
            ok &= good
            lines.append(f"{variant}/s{seed} loss {losses[-1]:.4f} acc {acc:.2f} {dt:.0f}s")
    criterion(8, ok, "; ".join(lines))


def test_criterion_9_degenerate_equivalence(criterion):
    rng = np.random.default_rng(0)
    worst = 0.0
    for cls in (False, True):
        cfg = AttentionConfig(N=16 + int(cls), C=32, h=8, H=4, W=4, has_class_token=cls, mode="hallucinated")
        vcfg = AttentionConfig(N=cfg.N, C=cfg.C, h=cfg.h)
        w = init_hmhsa_weights(cfg, rng)
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wproj", "bproj"):
            arr = getattr(w, name)
            arr[...] = rng.standard_normal(arr.shape)
        x = rng.standard_normal((4, cfg.N, cfg.C))
        a, _ = hmhsa_forward(x, w, cfg)
        b, _ = mhsa_forward(x, duplicated_head_mhsa_weights(w), vcfg)
        worst = max(worst, float(np.max(np.abs(a - b))))
    criterion(9, worst < 1e-10, f"max |hmhsa - duplicated mhsa| = {worst:.1e} (< 1e-10)")


if __name__ == "__main__":
    import sys

    import pytest

    sys.exit(pytest.main([__file__, "-q"]))
