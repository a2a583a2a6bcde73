"""Command-line entry point: ``hvit <subcommand> [flags]``.

Exit codes: 0 success, 1 a check failed, 2 usage or config error. In
``--format json`` mode standard output carries exactly one JSON document;
diagnostics go to standard error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import cost_model
from .attention import MapCapture, extract_attention_maps
from .ffn import cffn_infer_forward, cffn_train_forward, reparam_merge
from .redundancy import ccs
from .tensor_core import load_tensor, make_rng
from .verify import GRAD_TOL, REPARAM_TOL, random_cffn_train, reparam_sweep, run_grad_suite, worst_by_op
from .vit_model import (PRESETS, ModelConfig, TrainingDivergedError, build_model, evaluate,
                        forward_classify, make_toy_dataset, train_toy)

log = logging.getLogger("hvit")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def load_config(source: str | None, seed: int | None = None) -> ModelConfig:
    """``source`` is a JSON file path or a preset name (``deit_t``, ``deit_s``, ``toy``)."""
    if source is None:
        raise UsageError("--config is required for this subcommand")
    try:
        if source in PRESETS and not Path(source).exists():
            cfg = PRESETS[source]
        else:
            cfg = ModelConfig.load(source)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {source}")
    except (ValueError, TypeError, json.JSONDecodeError) as e:
        raise UsageError(f"malformed config {source}: {e}")
    if seed is not None:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "seed": seed})
    return cfg


def _emit(args, doc: dict, text: str) -> None:
    if args.format == "json":
        print(json.dumps(doc, indent=2))
    else:
        print(text)


def _pct(x: float) -> str:
    return f"{x:+.1f}%".replace("-", "−")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _reference_check(name: str, variant: str, report, tol: float) -> tuple[bool, str]:
    ref_p, ref_f = cost_model.REFERENCE_COUNTS[name][variant]
    p, f = report.params / 1e6, report.flops / 1e9
    ok = abs(p - ref_p) <= tol * ref_p and abs(f - ref_f) <= tol * ref_f
    return ok, f"reference {ref_p:.2f}M / {ref_f:.2f}G (±{tol:.0%}): {'ok' if ok else 'OUT OF TOLERANCE'}"


def cmd_count(args) -> int:
    cfg = load_config(args.config, args.seed)
    tol = cost_model.REFERENCE_REL_TOL if args.tol is None else args.tol
    preset = cost_model.preset_name(cfg)
    t0 = time.perf_counter()
    report = cost_model.count_model(cfg, preset or None)
    log.info("counted %s in %.2fs", report.model, time.perf_counter() - t0)
    failures = []
    doc = {"report": report.to_dict()}
    text = [report.to_table()]
    if preset:
        variant = "ours" if cfg.block_variant == "ours" else "vanilla" if cfg.block_variant == "vanilla" else None
        if variant:
            ok, line = _reference_check(preset, variant, report, tol)
            text.append(line)
            doc["reference_ok"] = ok
            if not ok:
                failures.append(f"{preset} {variant} counts")
    if args.compare:
        base_cfg, other_cfg = cfg.vanilla(), cfg.ours()
        base = report if cfg == base_cfg else cost_model.count_model(base_cfg, preset or None)
        other = report if cfg == other_cfg else cost_model.count_model(other_cfg, (preset or "model") + "†")
        delta = cost_model.compare(base, other)
        doc["compare"] = {"vanilla": {"params": base.params, "flops": base.flops},
                          "ours": {"params": other.params, "flops": other.flops}, **delta}
        text.append("")
        text.append(f"{'model':<12}{'Params':>10}{'FLOPs':>10}   delta")
        text.append(f"{'vanilla':<12}{base.params / 1e6:>9.2f}M{base.flops / 1e9:>9.2f}G")
        text.append(f"{'ours':<12}{other.params / 1e6:>9.2f}M{other.flops / 1e9:>9.2f}G   "
                    f"{_pct(delta['params_pct'])} / {_pct(delta['flops_pct'])}")
        if preset:
            ref = cost_model.REFERENCE_COUNTS[preset]["delta_pct"]
            ok_o, line = _reference_check(preset, "ours", other, tol)
            dok = (abs(delta["params_pct"] - ref[0]) <= cost_model.REFERENCE_DELTA_TOL_PP
                   and abs(delta["flops_pct"] - ref[1]) <= cost_model.REFERENCE_DELTA_TOL_PP)
            text.append(f"ours {line}")
            text.append(f"reference delta {_pct(ref[0])} / {_pct(ref[1])} "
                        f"(±{cost_model.REFERENCE_DELTA_TOL_PP:g}pp): {'ok' if dok else 'OUT OF TOLERANCE'}")
            doc["compare"]["reference_ok"] = ok_o and dok
            if not ok_o:
                failures.append(f"{preset} ours counts")
            if not dok:
                failures.append(f"{preset} deltas")
    if args.reconcile:
        try:
            rec = cost_model.reconcile(cfg)
            doc["reconcile"] = rec.to_dict()
            text.append("")
            text.append(rec.to_table())
        except cost_model.ReconciliationError as e:
            failures.append(str(e))
    _emit(args, doc, "\n".join(text))
    return _finish(failures)


def cmd_grad_check(args) -> int:
    tol = GRAD_TOL if args.tol is None else args.tol
    seeds = range(args.seed, args.seed + args.trials)
    t0 = time.perf_counter()
    results = run_grad_suite(seeds=seeds, tol=tol)
    log.info("grad suite: %d checks in %.1fs", len(results), time.perf_counter() - t0)
    worst = worst_by_op(results)
    failures = [f"{r.name} (seed {r.seed}, rel err {r.error:.2e})" for r in results if not r.error < tol]
    doc = {"tol": tol, "seeds": list(seeds),
           "worst": {k: {"seed": r.seed, "error": r.error} for k, r in worst.items()}}
    lines = [f"{'op':<28}{'worst rel err':>14}  seed"]
    lines += [f"{k:<28}{r.error:>14.2e}  {r.seed}" for k, r in worst.items()]
    lines.append(f"max = {max(r.error for r in results):.2e} (tol {tol:g})")
    _emit(args, doc, "\n".join(lines))
    return _finish(failures)


def cmd_reparam_verify(args) -> int:
    tol = REPARAM_TOL if args.tol is None else args.tol
    if args.config:
        # fixed block shape from the config, random weights and inputs per trial
        fcfg = load_config(args.config).ffn_config()
        rng = make_rng(args.seed)
        diffs = []
        for _ in range(args.trials):
            w = random_cffn_train(fcfg, rng)
            x = rng.standard_normal((int(rng.integers(1, 9)), fcfg.C))
            diffs.append(float(np.max(np.abs(cffn_train_forward(x, w, "eval")
                                              - cffn_infer_forward(x, reparam_merge(w))))))
    else:
        diffs = [t.max_abs_diff for t in reparam_sweep(args.trials, args.seed)]
    worst = max(diffs)
    ok = worst < tol
    doc = {"trials": len(diffs), "max_abs_diff": worst, "tol": tol, "ok": ok}
    _emit(args, doc, f"max |Δ| = {worst:.3e} {'<' if ok else '>='} {tol:g}")
    return _finish([] if ok else [f"trial {int(np.argmax(diffs))} (|Δ| = {worst:.3e})"])


def _images(args, cfg: ModelConfig) -> np.ndarray:
    if args.input:
        try:
            x = load_tensor(args.input)
        except (OSError, ValueError, KeyError) as e:
            raise UsageError(f"cannot read input tensor {args.input}: {e}")
        if x.ndim == 3:
            x = x[None]
        want = (cfg.in_channels, cfg.img_size, cfg.img_size)
        if x.ndim != 4 or x.shape[1:] != want:
            raise UsageError(f"input tensor shape {x.shape} does not match [B, {', '.join(map(str, want))}]")
        return x
    return make_rng(cfg.seed + 1).standard_normal((args.batch, cfg.in_channels, cfg.img_size, cfg.img_size))


def _ccs_of(cfg: ModelConfig, images: np.ndarray):
    model = build_model(cfg)
    cap = MapCapture()
    forward_classify(model, images, capture=cap)
    return ccs(extract_attention_maps(cap))


def cmd_ccs(args) -> int:
    cfg = load_config(args.config, args.seed)
    images = _images(args, cfg)
    cfgs = {"vanilla": cfg.vanilla(), "ours": cfg.ours()} if args.compare else {cfg.block_variant: cfg}
    doc, lines = {}, []
    for label, c in cfgs.items():
        rep = _ccs_of(c, images)
        doc[label] = rep.to_dict()
        lines.append(f"{label}: CCS = {rep.overall:.6f}  (heads {rep.h}, N {rep.N}, blocks {rep.B})")
        lines += [f"  S_{i} = {s:.6f}" for i, s in enumerate(rep.per_block)]
    _emit(args, doc, "\n".join(lines))
    return EXIT_OK


def cmd_train_toy(args) -> int:
    cfg = load_config(args.config, args.seed)
    data = make_toy_dataset(n=args.samples, num_classes=cfg.num_classes, img_size=cfg.img_size,
                            in_channels=cfg.in_channels, seed=cfg.seed)
    model = build_model(cfg)
    t0 = time.perf_counter()
    try:
        losses = train_toy(model, data, steps=args.steps, lr=args.lr, seed=cfg.seed)
    except TrainingDivergedError as e:
        return _finish([f"training diverged at step {e.step}"])
    log.info("trained %d steps in %.1fs", args.steps, time.perf_counter() - t0)
    loss, acc = evaluate(model, data)
    out = Path(args.out or "loss.csv")
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows([i, repr(v)] for i, v in enumerate(losses))
    doc = {"config": cfg.to_dict(), "steps": args.steps, "final_train_loss": losses[-1],
           "eval_loss": loss, "eval_accuracy": acc, "csv": str(out)}
    _emit(args, doc, f"{cfg.block_variant}: final loss {losses[-1]:.4f}, eval loss {loss:.4f}, "
                     f"accuracy {acc:.3f} (ln 2 = {math.log(2):.4f}); wrote {out}")
    return EXIT_OK


def cmd_dump_attn(args) -> int:
    cfg = load_config(args.config, args.seed)
    images = _images(args, cfg)[:1]
    model = build_model(cfg)
    cap = MapCapture()
    forward_classify(model, images, capture=cap)
    outdir = Path(args.out or "attn")
    outdir.mkdir(parents=True, exist_ok=True)
    files = []
    for stack in extract_attention_maps(cap):
        maps = stack.maps[0] if stack.maps.ndim == 4 else stack.maps
        path = outdir / f"attn_block{stack.block_index}.json"
        path.write_text(json.dumps({"block": stack.block_index, "shape": list(maps.shape),
                                    "provenance": list(stack.provenance), "maps": maps.tolist()}))
        files.append(str(path))
    _emit(args, {"files": files}, "\n".join(f"wrote {f}" for f in files))
    return EXIT_OK


def _finish(failures: list[str]) -> int:
    if failures:
        print(f"FAILED: {failures[0]}" + (f" (+{len(failures) - 1} more)" if len(failures) > 1 else ""),
              file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hvit", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config JSON path or preset name")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--format", choices=("table", "json"), default="table")
    common.add_argument("--out", help="output path (file or directory)")
    common.add_argument("--tol", type=float, default=None, help="override the default tolerance")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("count", parents=[common], help="Params/FLOPs report")
    s.add_argument("--compare", choices=("ours",), help="side-by-side with the hallucinated variant")
    s.add_argument("--reconcile", action="store_true", help="itemize traced vs closed-form counts")
    s.set_defaults(func=cmd_count)

    s = sub.add_parser("grad-check", parents=[common], help="VJP vs finite differences")
    s.add_argument("--trials", type=int, default=10, help="number of seeds")
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("reparam-verify", parents=[common], help="train-form vs merged cFFN")
    s.add_argument("--trials", type=int, default=200)
    s.set_defaults(func=cmd_reparam_verify)

    s = sub.add_parser("ccs", parents=[common], help="attention-head redundancy")
    s.add_argument("--compare", choices=("ours",))
    s.add_argument("--input", help="tensor JSON of images [B, c, H, W]")
    s.add_argument("--batch", type=int, default=4)
    s.set_defaults(func=cmd_ccs)

    s = sub.add_parser("train-toy", parents=[common], help="SGD on the synthetic dataset")
    s.add_argument("--steps", type=int, default=300)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--samples", type=int, default=64)
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("dump-attn", parents=[common], help="write per-block attention maps")
    s.add_argument("--input", help="tensor JSON of images; the first image is used")
    s.add_argument("--batch", type=int, default=1)
    s.set_defaults(func=cmd_dump_attn)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    if args.cmd in ("grad-check", "reparam-verify") and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except UsageError as e:
        print(f"hvit {args.cmd}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
