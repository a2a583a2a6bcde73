"""Closed-form complexity of the four block types and a traced counter to check them.

Convention throughout: one multiply-accumulate is one FLOP. Softmax,
normalization, activations and elementwise additions are free. Analytic
values are exact rationals (``int`` when integral).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .ffn import as_fraction, compact_dim
from .tensor_core import count_macs
from .vit_model import Model, ModelConfig, build_model, forward_classify, merge_model

CONVENTION = "1 MAC = 1 FLOP"


class ReconciliationError(AssertionError):
    pass


def _exact(x: Fraction):
    x = Fraction(x)
    return x.numerator if x.denominator == 1 else x


def _positive(**kw):
    for k, v in kw.items():
        if v < 1:
            raise ValueError(f"{k} must be >= 1, got {v}")


def mhsa_flops(N: int, C: int):
    """``4NC^2 + 2N^2C``."""
    _positive(N=N, C=C)
    return 4 * N * C * C + 2 * N * N * C


def ffn_flops(N: int, C: int, m):
    """``2mNC^2``."""
    _positive(N=N, C=C)
    m = as_fraction(m)
    if m <= 0:
        raise ValueError("m must be positive")
    return _exact(2 * m * N * C * C)


def hmhsa_flops(N: int, C: int, h: int):
    """``3NC^2 + 3N^2C/2 + N^2h^2/4 + 9N^2h/2``.

    The ``N^2h^2/4`` term is the 1x1 cross-head mixing and ``9N^2h/2`` the
    3x3 depthwise convolution, each over ``h/2`` hallucinated maps.
    """
    _positive(N=N, C=C, h=h)
    if h % 2:
        raise ValueError(f"hallucinated attention needs even h, got {h}")
    n2 = N * N
    return _exact(3 * N * C * C + Fraction(3 * n2 * C, 2) + Fraction(n2 * h * h, 4) + Fraction(9 * n2 * h, 2))


def hmhsa_reduction(N: int, C: int, h: int):
    """Closed form of ``mhsa_flops - hmhsa_flops``: ``NC^2 + (2C - h^2 - 18h)N^2/4``."""
    return _exact(N * C * C + Fraction((2 * C - h * h - 18 * h) * N * N, 4))


@dataclass(frozen=True)
class CffnFlops:
    analytic: int | Fraction
    exact_with_k: int
    k: int


def cffn_flops(N: int, C: int, m, t) -> CffnFlops:
    """``(1+t)mNC^2`` and the count with the rounded inner width ``k``."""
    _positive(N=N, C=C)
    m, t = as_fraction(m), as_fraction(t)
    k = compact_dim(C, m, t)
    analytic = _exact((1 + t) * m * N * C * C)
    hidden = int(m * C)
    exact = N * hidden * C + N * hidden * k + N * k * C
    return CffnFlops(analytic, exact, k)


# analytic parameter counts (weights only, no biases)

def mhsa_params(C: int) -> int:
    return 4 * C * C


def hmhsa_params(C: int, h: int) -> int:
    half = h // 2
    return 3 * C * C + 9 * half + half * half


def ffn_params(C: int, m) -> int:
    return int(2 * as_fraction(m) * C * C)


def cffn_params(C: int, m, t) -> int:
    hidden = int(as_fraction(m) * C)
    k = compact_dim(C, m, t)
    return hidden * C + hidden * k + k * C


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class CostEntry:
    name: str
    group: str  # "mhsa", "ffn" or "other"
    params: int
    flops: int


@dataclass
class CostReport:
    model: str
    entries: list[CostEntry] = field(default_factory=list)
    convention: str = CONVENTION

    @property
    def params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def flops(self) -> int:
        return sum(e.flops for e in self.entries)

    def by_group(self) -> dict[str, tuple[int, int]]:
        out = {}
        for e in self.entries:
            p, f = out.get(e.group, (0, 0))
            out[e.group] = (p + e.params, f + e.flops)
        return out

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "convention": self.convention,
            "entries": [vars(e) for e in self.entries],
            "groups": {g: {"params": p, "flops": f} for g, (p, f) in self.by_group().items()},
            "totals": {"params": self.params, "flops": self.flops},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        rows = [(e.name, e.group, f"{e.params:,}", f"{e.flops:,}") for e in self.entries]
        rows.append(("total", "", f"{self.params:,}", f"{self.flops:,}"))
        head = ("module", "group", "params", "FLOPs")
        widths = [max(len(r[i]) for r in rows + [head]) for i in range(4)]
        lines = [f"{self.model}  ({self.convention})",
                 "  ".join(h.ljust(w) if i < 2 else h.rjust(w) for i, (h, w) in enumerate(zip(head, widths)))]
        for r in rows:
            lines.append("  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        groups = self.by_group()
        lines.append("by group: " + ", ".join(
            f"{g} {p / 1e6:.2f}M / {f / 1e9:.3f}G" for g, (p, f) in sorted(groups.items())))
        lines.append(f"Params {self.params / 1e6:.2f}M  FLOPs {self.flops / 1e9:.2f}G")
        return "\n".join(lines)


def _group_of(name: str) -> str:
    if name.endswith(".attn"):
        return "mhsa"
    if name.endswith(".ffn"):
        return "ffn"
    return "other"


def _module_of(param_name: str) -> str:
    parts = param_name.split(".")
    if parts[0] == "blocks":
        return ".".join(parts[:3])
    if parts[0] in ("cls_token", "pos_embed"):
        return "embed_tokens"
    return parts[0]


def trace_model(model: Model, batch: int = 1) -> dict[str, int]:
    """MACs per top-level module from one forward pass on zero images."""
    cfg = model.config
    images = np.zeros((batch, cfg.in_channels, cfg.img_size, cfg.img_size))
    with count_macs() as counter:
        forward_classify(model, images)
    macs: dict[str, int] = {}
    for scope, n in counter.by_scope.items():
        key = _module_of(scope) if scope else "other"
        macs[key] = macs.get(key, 0) + n // batch
    return macs


def report_for_model(model: Model, name: str = "model") -> CostReport:
    """Exact parameter and traced MAC counts of ``model`` as deployed (compact FFNs merged)."""
    if model.form != "inference":
        model = merge_model(model)
    params: dict[str, int] = {}
    for pname, arr in model.named_parameters().items():
        key = _module_of(pname)
        params[key] = params.get(key, 0) + int(arr.size)
    macs = trace_model(model)
    order = list(dict.fromkeys(list(params) + list(macs)))
    entries = [CostEntry(k, _group_of(k), params.get(k, 0), macs.get(k, 0)) for k in order]
    return CostReport(name, entries)


def count_model(cfg: ModelConfig, name: str | None = None) -> CostReport:
    """Cost report of the model ``cfg`` assembles, at batch 1 and the configured resolution."""
    if name is None:
        name = f"{cfg.block_variant} C={cfg.C} h={cfg.h} depth={cfg.depth} N={cfg.N}"
    # the model is private to this call, so merging may share its arrays
    return report_for_model(merge_model(build_model(cfg, init="zeros"), copy=False), name)


# ---------------------------------------------------------------------------
# traced vs analytic
# ---------------------------------------------------------------------------

@dataclass
class BlockReconciliation:
    name: str
    kind: str
    traced: int
    analytic: int | Fraction
    adjustments: dict[str, int | Fraction]

    @property
    def residual(self):
        return _exact(self.traced - self.analytic - sum(self.adjustments.values(), Fraction(0)))


@dataclass
class ReconcileReport:
    flops: list[BlockReconciliation]
    params: list[BlockReconciliation]

    @property
    def ok(self) -> bool:
        return all(b.residual == 0 for b in self.flops + self.params)

    def to_dict(self) -> dict:
        def row(b):
            return {"name": b.name, "kind": b.kind, "traced": b.traced, "analytic": str(b.analytic),
                    "adjustments": {k: str(v) for k, v in b.adjustments.items()}, "residual": str(b.residual)}
        return {"ok": self.ok, "flops": [row(b) for b in self.flops], "params": [row(b) for b in self.params]}

    def to_table(self) -> str:
        lines = []
        for title, rows in (("FLOPs", self.flops), ("Params", self.params)):
            lines.append(f"{title}:")
            for b in rows:
                adj = ", ".join(f"{k} {'+' if v > 0 else ''}{v}" for k, v in b.adjustments.items() if v) or "none"
                lines.append(f"  {b.name:<16} {b.kind:<6} traced {b.traced:>12,}  "
                             f"analytic {float(b.analytic):>14,.1f}  adj [{adj}]  residual {b.residual}")
        lines.append("reconciled" if self.ok else "UNEXPLAINED RESIDUAL")
        return "\n".join(lines)


def reconcile(cfg: ModelConfig) -> ReconcileReport:
    """Compare every block's traced counts with the closed forms, itemizing known gaps.

    FLOPs: rounding of the compact width ``k`` and, with a class token, the
    class-token key column that bypasses the depthwise convolution.
    Params: bias vectors (including the biases produced by BatchNorm folding)
    and ``k`` rounding. Raises :class:`ReconciliationError` on any remainder.
    """
    model = merge_model(build_model(cfg, init="zeros"), copy=False)
    macs = trace_model(model)
    n, c, m = cfg.N, cfg.C, cfg.m
    flops_rows, param_rows = [], []
    for i, blk in enumerate(model.blocks):
        attn_name, ffn_name = f"blocks.{i}.attn", f"blocks.{i}.ffn"
        attn_bias = sum(v.size for k, v in blk.attn.named().items() if k.startswith("b") or k.endswith("_bias"))
        if cfg.uses_hmhsa:
            h = cfg.heads
            adj = {}
            if cfg.class_token and "ihh" in cfg.hallucination_ops:
                adj["class_token_column"] = -9 * n * (h // 2)
            ops = cfg.hallucination_ops
            # closed form assumes exactly one depthwise and one 1x1 pass
            adj["hallucination_ops"] = _exact(
                Fraction(9 * n * n * h, 2) * (ops.count("ihh") - 1)
                + Fraction(n * n * h * h, 4) * (ops.count("chh") - 1))
            flops_rows.append(BlockReconciliation(attn_name, "hmhsa", macs[attn_name], hmhsa_flops(n, c, h), adj))
            param_rows.append(BlockReconciliation(attn_name, "hmhsa", _size(blk.attn), hmhsa_params(c, h),
                                                  {"biases": attn_bias}))
        else:
            flops_rows.append(BlockReconciliation(attn_name, "mhsa", macs[attn_name], mhsa_flops(n, c), {}))
            param_rows.append(BlockReconciliation(attn_name, "mhsa", _size(blk.attn), mhsa_params(c),
                                                  {"biases": attn_bias}))
        ffn_named = blk.ffn.named()
        ffn_bias = sum(v.size for k, v in ffn_named.items() if v.ndim == 1)
        if cfg.uses_cffn:
            cf = cffn_flops(n, c, m, cfg.t)
            flops_rows.append(BlockReconciliation(ffn_name, "cffn", macs[ffn_name], cf.analytic,
                                                  {"k_rounding": _exact(cf.exact_with_k - cf.analytic)}))
            hidden = int(as_fraction(m) * c)
            real_k = Fraction(cfg.t) * m * c / (m + 1)
            analytic_p = _exact(hidden * c + (hidden + c) * real_k)
            param_rows.append(BlockReconciliation(
                ffn_name, "cffn", _size(blk.ffn), analytic_p,
                {"biases": ffn_bias, "k_rounding": _exact(cffn_params(c, m, cfg.t) - analytic_p)}))
        else:
            flops_rows.append(BlockReconciliation(ffn_name, "ffn", macs[ffn_name], ffn_flops(n, c, m), {}))
            param_rows.append(BlockReconciliation(ffn_name, "ffn", _size(blk.ffn), ffn_params(c, m),
                                                  {"biases": ffn_bias}))
    report = ReconcileReport(flops_rows, param_rows)
    bad = [b.name + f" ({b.kind} {'flops' if b in flops_rows else 'params'})"
           for b in flops_rows + param_rows if b.residual != 0]
    if bad:
        raise ReconciliationError(f"unexplained residual in {', '.join(bad)}")
    return report


def _size(bundle) -> int:
    return sum(int(v.size) for v in bundle.named().values())


def compare(base: CostReport, other: CostReport) -> dict[str, float]:
    """Relative change of ``other`` against ``base`` in percent."""
    return {"params_pct": 100.0 * (other.params - base.params) / base.params,
            "flops_pct": 100.0 * (other.flops - base.flops) / base.flops}


# Reference Params (M), FLOPs (G) and relative deltas (%) for the two DeiT backbones
REFERENCE_COUNTS = {
    "deit_t": {"vanilla": (5.72, 1.26), "ours": (4.68, 1.02), "delta_pct": (-18.2, -19.0)},
    "deit_s": {"vanilla": (22.05, 4.60), "ours": (17.91, 3.71), "delta_pct": (-18.8, -19.3)},
}
REFERENCE_REL_TOL = 0.02
REFERENCE_DELTA_TOL_PP = 1.0


def preset_name(cfg: ModelConfig) -> str | None:
    """Name of the reference backbone ``cfg`` instantiates, if any."""
    from .vit_model import PRESETS

    for name in REFERENCE_COUNTS:
        if PRESETS[name].vanilla() == cfg.vanilla():
            return name
    return None
