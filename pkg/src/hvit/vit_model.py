"""Straight DeiT-style classifiers built from vanilla or hallucinated/compact blocks.

Blocks are pre-norm: ``x + Attn(LN(x))`` then ``x + FFN(LN(x))``. The
``"ours"`` variant swaps in hallucinated attention with the head count
doubled (per-head width halved, embed dim unchanged) and the compact FFN.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .attention import (
    AttentionConfig,
    AttentionMapStack,
    HmhsaWeights,
    MapCapture,
    MhsaWeights,
    hmhsa_with_vjp,
    init_hmhsa_weights,
    init_mhsa_weights,
    mhsa_with_vjp,
)
from .ffn import (
    CffnInferWeights,
    CffnTrainWeights,
    FfnConfig,
    FfnWeights,
    as_fraction,
    cffn_infer_with_vjp,
    cffn_train_with_vjp,
    ffn_with_vjp,
    init_cffn_train_weights,
    init_ffn_weights,
    reparam_merge,
    update_branch_stats,
)
from .tensor_core import (
    ShapeError,
    layernorm,
    layernorm_vjp,
    mac_scope,
    make_rng,
    pointwise_mix,
    pointwise_mix_vjp,
    tensor_from_json,
    tensor_to_json,
    trunc_normal,
)

log = logging.getLogger(__name__)

BLOCK_VARIANTS = ("vanilla", "ours", "hmhsa", "cffn")
CHECKPOINT_VERSION = 1


class ConfigMismatchError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class ModelConfig:
    img_size: int = 224
    patch_size: int = 16
    in_channels: int = 3
    num_classes: int = 1000
    depth: int = 12
    C: int = 384
    h: int = 6
    m: int = 4
    class_token: bool = True
    block_variant: str = "vanilla"
    hallucination_ops: tuple[str, ...] = ("ihh", "chh")
    t: Fraction = Fraction(2, 3)
    r: int = 2
    factor_target: str = "M2"
    bias: bool = True
    chh_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "t", as_fraction(self.t))
        object.__setattr__(self, "hallucination_ops", tuple(op.lower() for op in self.hallucination_ops))
        if self.img_size % self.patch_size:
            raise ShapeError(f"image size {self.img_size} not divisible by patch size {self.patch_size}")
        if self.block_variant not in BLOCK_VARIANTS:
            raise ValueError(f"block_variant must be one of {BLOCK_VARIANTS}, got {self.block_variant!r}")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.uses_hmhsa and self.heads % 2:
            raise ValueError(f"hallucinated attention needs an even head count, got {self.heads}")
        if self.C % self.heads:
            raise ShapeError(f"embed dim {self.C} not divisible by {self.heads} heads")
        # validates the sub-configs eagerly
        self.attention_config()
        self.ffn_config()

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size

    @property
    def N(self) -> int:
        return self.grid ** 2 + int(self.class_token)

    @property
    def uses_hmhsa(self) -> bool:
        return self.block_variant in ("ours", "hmhsa")

    @property
    def uses_cffn(self) -> bool:
        return self.block_variant in ("ours", "cffn")

    @property
    def heads(self) -> int:
        """Effective head count: doubled for hallucinated attention."""
        return 2 * self.h if self.uses_hmhsa else self.h

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            N=self.N, C=self.C, h=self.heads, H=self.grid, W=self.grid,
            has_class_token=self.class_token,
            mode="hallucinated" if self.uses_hmhsa else "vanilla",
            hallucination_ops=self.hallucination_ops,
        )

    def ffn_config(self) -> FfnConfig:
        return FfnConfig(C=self.C, m=self.m, t=self.t, r=self.r, factor_target=self.factor_target)

    def ours(self) -> "ModelConfig":
        return dataclasses.replace(self, block_variant="ours")

    def vanilla(self) -> "ModelConfig":
        return dataclasses.replace(self, block_variant="vanilla")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["t"] = str(self.t)
        d["hallucination_ops"] = list(self.hallucination_ops)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {sorted(unknown)}")
        d = dict(d)
        if "hallucination_ops" in d:
            d["hallucination_ops"] = tuple(d["hallucination_ops"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


PRESETS = {
    "deit_t": ModelConfig(C=192, h=3),
    "deit_s": ModelConfig(C=384, h=6),
    "toy": ModelConfig(img_size=16, patch_size=4, num_classes=2, depth=2, C=32, h=4),
}


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

@dataclass
class Block:
    norm1_g: np.ndarray
    norm1_b: np.ndarray
    attn: MhsaWeights | HmhsaWeights
    norm2_g: np.ndarray
    norm2_b: np.ndarray
    ffn: FfnWeights | CffnTrainWeights | CffnInferWeights


@dataclass
class Model:
    config: ModelConfig
    patch_w: np.ndarray  # [C, in_channels * p * p]
    patch_b: np.ndarray
    cls_token: np.ndarray | None
    pos_embed: np.ndarray
    blocks: list[Block]
    norm_g: np.ndarray
    norm_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    form: str = "train"

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {"patch_embed.weight": self.patch_w, "patch_embed.bias": self.patch_b,
               "pos_embed": self.pos_embed}
        if self.cls_token is not None:
            out["cls_token"] = self.cls_token
        for i, blk in enumerate(self.blocks):
            p = f"blocks.{i}."
            out[p + "norm1.gamma"] = blk.norm1_g
            out[p + "norm1.beta"] = blk.norm1_b
            for k, v in blk.attn.named().items():
                out[p + "attn." + k] = v
            out[p + "norm2.gamma"] = blk.norm2_g
            out[p + "norm2.beta"] = blk.norm2_b
            for k, v in blk.ffn.named().items():
                out[p + "ffn." + k] = v
        out.update({"norm.gamma": self.norm_g, "norm.beta": self.norm_b,
                    "head.weight": self.head_w, "head.bias": self.head_b})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, blk in enumerate(self.blocks):
            if isinstance(blk.ffn, (CffnTrainWeights, CffnInferWeights)):
                for k, v in blk.ffn.buffers().items():
                    out[f"blocks.{i}.ffn.{k}"] = v
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {**self.named_parameters(), **self.buffers()}

    def num_params(self) -> int:
        return sum(v.size for v in self.named_parameters().values())


def build_model(cfg: ModelConfig, init: str = "random") -> Model:
    """Deterministic initialization from ``cfg.seed``.

    ``init="zeros"`` leaves every randomly drawn tensor at zero (identities and
    norm scales are kept); cheap to build for cost tracing.
    """
    if init not in ("random", "zeros"):
        raise ValueError(f"unknown init {init!r}")
    rng = make_rng(cfg.seed) if init == "random" else None
    c = cfg.C
    acfg, fcfg = cfg.attention_config(), cfg.ffn_config()
    patch_dim = cfg.in_channels * cfg.patch_size ** 2
    patch_w = trunc_normal(rng, (c, patch_dim))
    cls_token = trunc_normal(rng, (c,)) if cfg.class_token else None
    pos_embed = trunc_normal(rng, (cfg.N, c))
    blocks = []
    for _ in range(cfg.depth):
        if cfg.uses_hmhsa:
            attn = init_hmhsa_weights(acfg, rng, bias=cfg.bias, chh_bias=cfg.chh_bias and cfg.bias)
        else:
            attn = init_mhsa_weights(acfg, rng, bias=cfg.bias)
        if cfg.uses_cffn:
            ffn = init_cffn_train_weights(fcfg, rng, bias=cfg.bias)
        else:
            ffn = init_ffn_weights(fcfg, rng, bias=cfg.bias)
        blocks.append(Block(np.ones(c), np.zeros(c), attn, np.ones(c), np.zeros(c), ffn))
    return Model(cfg, patch_w, np.zeros(c), cls_token, pos_embed, blocks,
                 np.ones(c), np.zeros(c), np.zeros((cfg.num_classes, c)), np.zeros(cfg.num_classes))


def merge_model(model: Model, copy: bool = True) -> Model:
    """``model`` with every compact FFN folded into its inference form.

    With ``copy=False`` the dense FFN layers are shared with ``model``.
    """
    blocks = []
    for blk in model.blocks:
        ffn = reparam_merge(blk.ffn, copy) if isinstance(blk.ffn, CffnTrainWeights) else blk.ffn
        blocks.append(dataclasses.replace(blk, ffn=ffn))
    return dataclasses.replace(model, blocks=blocks, form="inference")


def clone_model(model: Model) -> Model:
    return model_from_state(model.config, {k: v.copy() for k, v in model.state().items()}, model.form)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, Cin, S, S] -> [B, (S/p)^2, Cin*p*p]``, row-major over the patch grid."""
    b, cin, s, _ = images.shape
    g = s // patch
    x = images.reshape(b, cin, g, patch, g, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, cin * patch * patch)


def unpatchify_grad(gp: np.ndarray, shape: tuple[int, ...], patch: int) -> np.ndarray:
    b, cin, s, _ = shape
    g = s // patch
    return gp.reshape(b, g, g, cin, patch, patch).transpose(0, 3, 1, 4, 2, 5).reshape(shape)


def _check_images(model: Model, images: np.ndarray) -> None:
    cfg = model.config
    want = (cfg.in_channels, cfg.img_size, cfg.img_size)
    if images.ndim != 4 or images.shape[1:] != want:
        raise ShapeError(f"images {list(images.shape)} do not match [B, {', '.join(map(str, want))}]")


def _attn_with_vjp(blk: Block, x, acfg):
    if isinstance(blk.attn, HmhsaWeights):
        return hmhsa_with_vjp(x, blk.attn, acfg)
    return mhsa_with_vjp(x, blk.attn, acfg)


def _ffn_with_vjp(blk: Block, x, mode):
    if isinstance(blk.ffn, CffnTrainWeights):
        out, pb, pres = cffn_train_with_vjp(x, blk.ffn, mode)
        return out, pb, pres
    if isinstance(blk.ffn, CffnInferWeights):
        out, pb = cffn_infer_with_vjp(x, blk.ffn)
    else:
        out, pb = ffn_with_vjp(x, blk.ffn)
    return out, pb, None


def forward_with_vjp(model: Model, images: np.ndarray, mode: str = "eval",
                     capture: MapCapture | None = None):
    """Logits plus a pullback mapping ``dL/dlogits`` to a gradient per named parameter.

    Also returns the compact FFNs' pre-BatchNorm activations (``None`` for
    other blocks) for running-statistic updates after a train-mode step.
    """
    _check_images(model, images)
    cfg = model.config
    acfg = cfg.attention_config()
    b = images.shape[0]
    patches = patchify(images, cfg.patch_size)
    with mac_scope("patch_embed"):
        tok = pointwise_mix(patches, model.patch_w, model.patch_b)
    if model.cls_token is not None:
        x = np.concatenate([np.broadcast_to(model.cls_token, (b, 1, cfg.C)), tok], axis=1)
    else:
        x = tok
    x = x + model.pos_embed
    tapes = []
    bn_batches = []
    for i, blk in enumerate(model.blocks):
        with mac_scope(f"blocks.{i}"):
            with mac_scope("norm1"):
                y1 = layernorm(x, blk.norm1_g, blk.norm1_b)
            with mac_scope("attn"):
                a_out, maps, pb_attn = _attn_with_vjp(blk, y1, acfg)
            x1 = x + a_out
            with mac_scope("norm2"):
                y2 = layernorm(x1, blk.norm2_g, blk.norm2_b)
            with mac_scope("ffn"):
                f_out, pb_ffn, pres = _ffn_with_vjp(blk, y2, mode)
            tapes.append((x, y1, pb_attn, x1, y2, pb_ffn))
            bn_batches.append(pres)
            if capture is not None:
                half = acfg.h // 2
                prov = (("real",) * half + ("hallucinated",) * half) if cfg.uses_hmhsa else ("real",) * acfg.h
                capture.stacks.append(AttentionMapStack(maps.copy(), i, prov))
            x = x1 + f_out
    with mac_scope("norm"):
        xf = layernorm(x, model.norm_g, model.norm_b)
    pooled = xf[:, 0] if model.cls_token is not None else xf.mean(axis=1)
    with mac_scope("head"):
        logits = pointwise_mix(pooled, model.head_w, model.head_b)
    if capture is not None:
        capture.filled = True

    def pullback(g_logits):
        grads = {}
        g_pooled, grads["head.weight"], grads["head.bias"] = pointwise_mix_vjp(
            g_logits, pooled, model.head_w, model.head_b)
        g_xf = np.zeros_like(xf)
        if model.cls_token is not None:
            g_xf[:, 0] = g_pooled
        else:
            g_xf += g_pooled[:, None, :] / xf.shape[1]
        g_x, grads["norm.gamma"], grads["norm.beta"] = layernorm_vjp(g_xf, x, model.norm_g, model.norm_b)
        for i in reversed(range(len(model.blocks))):
            blk = model.blocks[i]
            x_in, y1, pb_attn, x1, y2, pb_ffn = tapes[i]
            p = f"blocks.{i}."
            g_y2, g_ffn = pb_ffn(g_x)
            g_x1_ln, grads[p + "norm2.gamma"], grads[p + "norm2.beta"] = layernorm_vjp(
                g_y2, x1, blk.norm2_g, blk.norm2_b)
            g_x1 = g_x + g_x1_ln
            g_y1, g_attn = pb_attn(g_x1)
            g_x0_ln, grads[p + "norm1.gamma"], grads[p + "norm1.beta"] = layernorm_vjp(
                g_y1, x_in, blk.norm1_g, blk.norm1_b)
            g_x = g_x1 + g_x0_ln
            grads.update({p + "attn." + k: v for k, v in g_attn.items()})
            grads.update({p + "ffn." + k: v for k, v in g_ffn.items()})
        grads["pos_embed"] = g_x.sum(axis=0)
        if model.cls_token is not None:
            grads["cls_token"] = g_x[:, 0].sum(axis=0)
            g_tok = g_x[:, 1:]
        else:
            g_tok = g_x
        _, grads["patch_embed.weight"], grads["patch_embed.bias"] = pointwise_mix_vjp(
            g_tok, patches, model.patch_w, model.patch_b)
        return grads

    return logits, pullback, bn_batches


def forward_classify(model: Model, images: np.ndarray, capture: MapCapture | None = None,
                     mode: str = "eval") -> np.ndarray:
    """Logits ``[B, num_classes]``; pass a :class:`MapCapture` to record attention maps."""
    logits, _, _ = forward_with_vjp(model, np.asarray(images, dtype=np.float64), mode, capture)
    return logits


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


# ---------------------------------------------------------------------------
# toy data and training
# ---------------------------------------------------------------------------

@dataclass
class ToyDataset:
    images: np.ndarray
    labels: np.ndarray
    seed: int
    pattern: str = "stripes"
    num_classes: int = 2


def make_toy_dataset(n: int = 64, num_classes: int = 2, img_size: int = 16, in_channels: int = 3,
                     seed: int = 0, noise: float = 0.5) -> ToyDataset:
    """Class ``c`` images are a fixed cosine grating (orientation and frequency set by ``c``) plus noise.

    Each class has its own template, so the classes are linearly separable
    up to the noise level.
    """
    rng = make_rng(seed)
    u, v = np.meshgrid(np.arange(img_size), np.arange(img_size), indexing="ij")
    templates = []
    for c in range(num_classes):
        theta = math.pi * c / num_classes
        freq = 2.0 + c // 2
        phase = 2 * math.pi * freq * (u * math.cos(theta) + v * math.sin(theta)) / img_size
        chan = np.linspace(1.0, 0.5, in_channels)[:, None, None]
        templates.append(chan * np.cos(phase)[None])
    templates = np.stack(templates)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = templates[labels] + noise * rng.standard_normal((n, in_channels, img_size, img_size))
    return ToyDataset(images, labels, seed, num_classes=num_classes)


def sgd_step(model: Model, grads: dict[str, np.ndarray], lr: float) -> None:
    for name, p in model.named_parameters().items():
        p -= lr * grads[name]


def train_step(model: Model, images: np.ndarray, labels: np.ndarray, lr: float) -> float:
    """One SGD step in train mode (batch-statistic BatchNorm); returns the pre-update loss."""
    logits, pullback, bn_batches = forward_with_vjp(model, images, mode="train")
    loss, g = cross_entropy(logits, labels)
    if not math.isfinite(loss):
        return loss
    grads = pullback(g)
    sgd_step(model, grads, lr)
    for blk, pres in zip(model.blocks, bn_batches):
        if pres is not None:
            update_branch_stats(blk.ffn, pres)
    return loss


def train_toy(model: Model, data: ToyDataset, steps: int = 300, lr: float = 0.1, seed: int = 0,
              batch_size: int | None = None) -> list[float]:
    """Plain SGD on softmax cross-entropy; returns the loss of every step.

    ``batch_size=None`` uses the full dataset each step. Raises
    :class:`TrainingDivergedError` on a non-finite loss.
    """
    rng = make_rng(seed)
    n = len(data.labels)
    losses = []
    for step in range(steps):
        if batch_size is None or batch_size >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=batch_size, replace=False)
        loss = train_step(model, data.images[idx], data.labels[idx], lr)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step)
        losses.append(loss)
    return losses


def evaluate(model: Model, data: ToyDataset) -> tuple[float, float]:
    """Eval-mode ``(loss, accuracy)``."""
    logits = forward_classify(model, data.images)
    loss, _ = cross_entropy(logits, data.labels)
    return loss, float((logits.argmax(axis=1) == data.labels).mean())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def model_from_state(cfg: ModelConfig, state: dict[str, np.ndarray], form: str = "train") -> Model:
    """Rebuild a :class:`Model` from a flat name -> array map (no copies made)."""
    blocks = []
    for i in range(cfg.depth):
        p = f"blocks.{i}."

        def sub(prefix):
            return {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}

        attn_cls = HmhsaWeights if cfg.uses_hmhsa else MhsaWeights
        attn = attn_cls.from_named(sub(p + "attn."))
        ffn_state = sub(p + "ffn.")
        if not cfg.uses_cffn:
            ffn = FfnWeights(ffn_state["m1"], ffn_state.get("b1"), ffn_state["m2"], ffn_state.get("b2"))
        elif form == "inference":
            ffn = CffnInferWeights.from_named(ffn_state, cfg.factor_target)
        else:
            ffn = CffnTrainWeights.from_named(ffn_state, cfg.factor_target)
        blocks.append(Block(state[p + "norm1.gamma"], state[p + "norm1.beta"], attn,
                            state[p + "norm2.gamma"], state[p + "norm2.beta"], ffn))
    return Model(cfg, state["patch_embed.weight"], state["patch_embed.bias"], state.get("cls_token"),
                 state["pos_embed"], blocks, state["norm.gamma"], state["norm.beta"],
                 state["head.weight"], state["head.bias"], form)


def save_weights(model: Model, path) -> None:
    """Write ``path/index.json`` (config, form, tensor map) and one JSON tensor file per entry."""
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, arr in model.state().items():
        rel = f"tensors/{name}.json"
        (root / rel).write_text(json.dumps(tensor_to_json(arr)))
        tensors[name] = rel
    index = {"version": CHECKPOINT_VERSION, "config": model.config.to_dict(), "form": model.form,
             "tensors": tensors}
    (root / "index.json").write_text(json.dumps(index, indent=2) + "\n")


def load_weights(path, config: ModelConfig | None = None, form: str | None = None) -> Model:
    """Load a checkpoint; ``config``/``form``, when given, must match what was saved."""
    root = Path(path)
    index = json.loads((root / "index.json").read_text())
    if index.get("version") != CHECKPOINT_VERSION:
        raise ConfigMismatchError(f"checkpoint version {index.get('version')} != {CHECKPOINT_VERSION}")
    saved_cfg = ModelConfig.from_dict(index["config"])
    if config is not None and config != saved_cfg:
        diff = {k: (v, getattr(config, k)) for k, v in dataclasses.asdict(saved_cfg).items()
                if getattr(config, k) != v}
        raise ConfigMismatchError(f"checkpoint config differs (saved, requested): {diff}")
    saved_form = index["form"]
    if form is not None and form != saved_form:
        raise ConfigMismatchError(f"checkpoint holds {saved_form!r} weights, {form!r} requested")
    state = {name: tensor_from_json(json.loads((root / rel).read_text()))
             for name, rel in index["tensors"].items()}
    return model_from_state(saved_cfg, state, saved_form)
