"""CCS of vanilla vs hallucinated toy models, before and after toy training.

Redundancy at initialization is near 1 for both (small random weights give
near-uniform maps); training pulls the heads apart.
"""
import argparse

from hvit.attention import MapCapture, extract_attention_maps
from hvit.redundancy import ccs
from hvit.vit_model import PRESETS, ModelConfig, build_model, forward_classify, make_toy_dataset, train_toy


def model_ccs(model, images):
    cap = MapCapture()
    forward_classify(model, images, capture=cap)
    return ccs(extract_attention_maps(cap))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=300)
    args = ap.parse_args()

    data = make_toy_dataset(seed=args.seed)
    for variant in ("vanilla", "ours"):
        cfg = ModelConfig.from_dict({**PRESETS["toy"].to_dict(), "block_variant": variant, "seed": args.seed})
        model = build_model(cfg)
        before = model_ccs(model, data.images)
        train_toy(model, data, steps=args.steps, lr=0.1, seed=args.seed)
        after = model_ccs(model, data.images)
        per = ", ".join(f"{s:.3f}" for s in after.per_block)
        print(f"{variant:<8} heads {cfg.heads}: CCS init {before.overall:.4f} -> trained {after.overall:.4f}  [{per}]")


if __name__ == "__main__":
    main()
