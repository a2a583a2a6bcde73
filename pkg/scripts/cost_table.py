"""Params/FLOPs of DeiT-T/S and their hallucinated variants, with itemized reconciliation.

    python3 scripts/cost_table.py [--json out.json]
"""
import argparse
import json
import time

from hvit.cost_model import REFERENCE_COUNTS, compare, count_model, reconcile
from hvit.vit_model import PRESETS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--json", help="also write the numbers here")
    args = ap.parse_args()

    rows = []
    print(f"{'model':<10}{'Params':>10}{'FLOPs':>9}{'ref':>16}  {'time':>6}")
    for name in ("deit_t", "deit_s"):
        reps = {}
        for variant, cfg in (("vanilla", PRESETS[name]), ("ours", PRESETS[name].ours())):
            t0 = time.perf_counter()
            rep = count_model(cfg, name)
            dt = time.perf_counter() - t0
            reps[variant] = rep
            ref = REFERENCE_COUNTS[name][variant]
            label = name + ("†" if variant == "ours" else "")
            print(f"{label:<10}{rep.params / 1e6:>9.2f}M{rep.flops / 1e9:>8.2f}G"
                  f"{f'{ref[0]:.2f}M/{ref[1]:.2f}G':>16}  {dt:>5.2f}s")
            rows.append({"model": label, "params": rep.params, "flops": rep.flops, "seconds": dt})
        d = compare(reps["vanilla"], reps["ours"])
        ref = REFERENCE_COUNTS[name]["delta_pct"]
        print(f"{'':<10}delta {d['params_pct']:+.1f}% / {d['flops_pct']:+.1f}%   (ref {ref[0]:+.1f}% / {ref[1]:+.1f}%)")
    print()
    print(reconcile(PRESETS["deit_s"].ours()).to_table().splitlines()[-1], "(DeiT-S†, all blocks)")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
