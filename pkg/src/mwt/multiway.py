"""Multiway Transformer backbone.

Each block has one self-attention module shared by every modality and a pool
of feed-forward experts. Tokens pick an expert by modality (V-FFN for image
patches, L-FFN for text); the top ``vl_expert_layers`` blocks also carry a
VL-FFN that fusion-style layouts send every token through.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .tensorcore import ShapeError, Tensor, apply, constant

LAYOUTS = ("vision-encoder", "language-encoder", "fusion", "dual", "seq2seq")
EXPERTS = ("V", "L", "VL")
INIT_RANGE = 0.02
LN_EPS = 1e-5


class ModalityTag(IntEnum):
    VISION = 0
    LANGUAGE = 1


class ConfigError(ValueError):
    pass


@dataclass
class MultiwayConfig:
    num_layers: int = 4
    hidden: int = 64
    ffn_inner: int = 128
    num_heads: int = 4
    vl_expert_layers: int = 1
    patch_grid: tuple = (8, 8)
    patch_size: int = 4
    channels: int = 3
    text_vocab: int = 512
    visual_vocab: int = 64
    max_seq: int = 129
    drop_path_rate: float = 0.1

    def __post_init__(self):
        self.patch_grid = tuple(int(x) for x in self.patch_grid)

    @classmethod
    def paper(cls):
        """The 40-layer giant configuration (14x14 patches at 224px)."""
        return cls(num_layers=40, hidden=1408, ffn_inner=6144, num_heads=16,
                   vl_expert_layers=3, patch_grid=(16, 16), patch_size=14, channels=3,
                   text_vocab=64000, visual_vocab=8192, max_seq=257 + 128,
                   drop_path_rate=0.1)

    @classmethod
    def toy(cls):
        return cls()

    def validate(self):
        dims = dict(num_layers=self.num_layers, hidden=self.hidden, ffn_inner=self.ffn_inner,
                    num_heads=self.num_heads, patch_size=self.patch_size,
                    channels=self.channels, text_vocab=self.text_vocab,
                    visual_vocab=self.visual_vocab, max_seq=self.max_seq)
        for k, v in dims.items():
            if int(v) < 1:
                raise ConfigError(f"{k} must be >= 1, got {v}")
        if len(self.patch_grid) != 2 or min(self.patch_grid) < 1:
            raise ConfigError(f"patch_grid must be two positive ints, got {self.patch_grid}")
        if self.hidden % self.num_heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by num_heads {self.num_heads}")
        if not 0 <= self.vl_expert_layers <= self.num_layers:
            raise ConfigError(f"vl_expert_layers {self.vl_expert_layers} outside 0..{self.num_layers}")
        if self.text_max_len < 2:
            raise ConfigError(f"max_seq {self.max_seq} leaves no room for text after the image")
        if not 0 <= self.drop_path_rate < 1:
            raise ConfigError(f"drop_path_rate {self.drop_path_rate} outside [0, 1)")
        return self

    @property
    def num_patches(self):
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def image_len(self):
        return 1 + self.num_patches

    @property
    def text_max_len(self):
        return self.max_seq - self.image_len

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self):
        return self.hidden // self.num_heads

    def experts_at(self, layer):
        """Experts present at 1-based ``layer``."""
        if layer > self.num_layers - self.vl_expert_layers:
            return EXPERTS
        return EXPERTS[:2]

    def to_dict(self):
        d = asdict(self)
        d["patch_grid"] = list(self.patch_grid)
        return d


def param_specs(cfg: MultiwayConfig):
    """Ordered (name, shape, kind) for every backbone parameter."""
    H, M, V = cfg.hidden, cfg.ffn_inner, cfg.text_vocab
    specs = [
        ("embed.text", (V, H), "weight"),
        ("embed.patch.w", (cfg.patch_dim, H), "weight"),
        ("embed.patch.b", (H,), "bias"),
        ("embed.img_cls", (H,), "weight"),
        ("embed.mask", (H,), "weight"),
        ("pos.image", (cfg.image_len, H), "weight"),
        ("pos.text", (cfg.text_max_len, H), "weight"),
    ]
    for layer in range(1, cfg.num_layers + 1):
        p = f"layers.{layer}"
        for proj in "qkvo":
            specs += [(f"{p}.attn.{proj}.w", (H, H), "weight"), (f"{p}.attn.{proj}.b", (H,), "bias")]
        for e in cfg.experts_at(layer):
            specs += [
                (f"{p}.{e}.ln_attn.g", (H,), "gain"), (f"{p}.{e}.ln_attn.b", (H,), "bias"),
                (f"{p}.{e}.ln_ffn.g", (H,), "gain"), (f"{p}.{e}.ln_ffn.b", (H,), "bias"),
                (f"{p}.{e}.fc1.w", (H, M), "weight"), (f"{p}.{e}.fc1.b", (M,), "bias"),
                (f"{p}.{e}.fc2.w", (M, H), "weight"), (f"{p}.{e}.fc2.b", (H,), "bias"),
            ]
    for e in ("V", "L"):
        specs += [(f"final_ln.{e}.g", (H,), "gain"), (f"final_ln.{e}.b", (H,), "bias")]
    specs += [
        ("pooler.w", (H, H), "weight"), ("pooler.b", (H,), "bias"),
        ("head.text.b", (V,), "bias"),
        ("head.image.w", (H, cfg.visual_vocab), "weight"),
        ("head.image.b", (cfg.visual_vocab,), "bias"),
    ]
    return specs


def output_scale(layer: int) -> float:
    return 1.0 / math.sqrt(2.0 * layer)


class MultiwayModel:
    def __init__(self, config: MultiwayConfig, params: dict):
        self.config = config
        self.params = params

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def state_arrays(self):
        return {k: v.data for k, v in self.params.items()}

    def clone(self):
        return MultiwayModel(self.config, {
            k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
            for k, v in self.params.items()})


def init_model(config: MultiwayConfig, seed: int = 0, dtype="f32") -> MultiwayModel:
    """Uniform small-range init, then 1/sqrt(2l) on each layer's output maps."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in param_specs(config):
        if kind == "weight":
            arr = rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)
        elif kind == "gain":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr
    for layer in range(1, config.num_layers + 1):
        s = output_scale(layer)
        params[f"layers.{layer}.attn.o.w"] *= s
        for e in config.experts_at(layer):
            params[f"layers.{layer}.{e}.fc2.w"] *= s
    return MultiwayModel(config, {
        k: Tensor(v, requires_grad=True, dtype=dtype, name=k) for k, v in params.items()})


# --------------------------------------------------------------------------
# routing and masks
# --------------------------------------------------------------------------


def route(tags: Sequence[int], layer_index: int, layout: str, config: MultiwayConfig):
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if not 1 <= layer_index <= config.num_layers:
        raise ValueError(f"layer_index {layer_index} outside 1..{config.num_layers}")
    tags = [ModalityTag(int(t)) for t in tags]
    kinds = set(tags)
    if layout == "vision-encoder" and kinds - {ModalityTag.VISION}:
        raise ValueError("vision-encoder layout received language tokens")
    if layout == "language-encoder" and kinds - {ModalityTag.LANGUAGE}:
        raise ValueError("language-encoder layout received vision tokens")
    if layout == "dual" and len(kinds) > 1:
        raise ValueError("dual layout encodes one modality at a time; got mixed tags")
    top = layer_index > config.num_layers - config.vl_expert_layers
    if layout in ("fusion", "seq2seq") and top:
        if "VL" not in config.experts_at(layer_index):
            raise ValueError(f"layer {layer_index} has no VL expert")
        return ["VL"] * len(tags)
    return ["V" if t == ModalityTag.VISION else "L" for t in tags]


def build_attention_mask(layout: str, n_image: int, n_caption: int) -> np.ndarray:
    """allowed[i, j] is True when position i may attend to position j."""
    n = n_image + n_caption
    if layout != "seq2seq":
        return np.ones((n, n), dtype=bool)
    allowed = np.zeros((n, n), dtype=bool)
    allowed[:n_image, :n_image] = True
    allowed[n_image:, :n_image] = True
    allowed[n_image:, n_image:] = np.tril(np.ones((n_caption, n_caption), dtype=bool))
    return allowed


def _segments(routing):
    segs, start = [], 0
    for i in range(1, len(routing) + 1):
        if i == len(routing) or routing[i] != routing[start]:
            segs.append((routing[start], start, i))
            start = i
    return segs


def _linear(x, model, prefix):
    return apply("add", apply("matmul", x, model[prefix + ".w"]), model[prefix + ".b"])


def _per_segment(h, segs, fn):
    if len(segs) == 1:
        return fn(h, segs[0][0])
    parts = [fn(apply("slice", h, axis=1, start=a, stop=b), e) for e, a, b in segs]
    return apply("concat", *parts, axis=1)


def _layer_norm(x, model, prefix):
    return apply("layer-norm", x, model[prefix + ".g"], model[prefix + ".b"], eps=LN_EPS)


def _attention(model, layer, x, mask):
    cfg = model.config
    B, S, H = x.shape
    A, d = cfg.num_heads, cfg.head_dim
    p = f"layers.{layer}.attn"

    def heads(t, axes):
        return apply("transpose", apply("reshape", t, shape=(B, S, A, d)), axes=axes)

    q = heads(_linear(x, model, p + ".q"), (0, 2, 1, 3))
    kt = heads(_linear(x, model, p + ".k"), (0, 2, 3, 1))
    v = heads(_linear(x, model, p + ".v"), (0, 2, 1, 3))
    scores = apply("scale", apply("matmul", q, kt), factor=1.0 / math.sqrt(d))
    probs = apply("softmax", scores, axis=-1, mask=mask[:, None, :, :])
    ctx = apply("matmul", probs, v)
    ctx = apply("reshape", apply("transpose", ctx, axes=(0, 2, 1, 3)), shape=(B, S, H))
    return _linear(ctx, model, p + ".o")


def drop_path_rate_at(config: MultiwayConfig, layer: int, rate=None) -> float:
    rate = config.drop_path_rate if rate is None else rate
    return rate * layer / config.num_layers


def _drop_path(x, p, rng):
    if rng is None or p <= 0:
        return x
    keep = (rng.random((x.shape[0],) + (1,) * (x.ndim - 1)) >= p)
    return apply("dropout-mask-apply", x, mask=keep, scale=1.0 / (1.0 - p))


def block_forward(model: MultiwayModel, layer_index: int, hidden: Tensor, attention_mask,
                  routing: Sequence[str], rng: np.random.Generator | None = None,
                  drop_path: float | None = None) -> Tensor:
    """Pre-norm block: shared attention then per-token expert FFN.

    ``rng`` switches on training-mode stochastic depth; without it the block
    is deterministic and keeps every branch.
    """
    cfg = model.config
    unbatched = hidden.data.ndim == 2
    if unbatched:
        hidden = apply("reshape", hidden, shape=(1,) + hidden.shape)
    B, S, H = hidden.shape
    if H != cfg.hidden:
        raise ShapeError(f"block_forward: hidden size {H} != config {cfg.hidden}")
    mask = np.asarray(attention_mask, dtype=bool)
    if mask.ndim == 2:
        mask = np.broadcast_to(mask, (B, S, S))
    if mask.shape != (B, S, S):
        raise ShapeError(f"block_forward: mask {mask.shape} does not match sequence {(B, S)}")
    if len(routing) != S:
        raise ShapeError(f"block_forward: routing has {len(routing)} entries for {S} tokens")
    present = cfg.experts_at(layer_index)
    for e in set(routing):
        if e not in present:
            raise ValueError(f"expert {e} does not exist at layer {layer_index}")
    p = f"layers.{layer_index}"
    dp = drop_path_rate_at(cfg, layer_index, drop_path)
    segs = _segments(list(routing))

    normed = _per_segment(hidden, segs, lambda t, e: _layer_norm(t, model, f"{p}.{e}.ln_attn"))
    attn = _attention(model, layer_index, normed, mask)
    hidden = apply("add", hidden, _drop_path(attn, dp, rng))

    def ffn(t, e):
        t = _layer_norm(t, model, f"{p}.{e}.ln_ffn")
        t = apply("gelu", _linear(t, model, f"{p}.{e}.fc1"))
        return _linear(t, model, f"{p}.{e}.fc2")

    hidden = apply("add", hidden, _drop_path(_per_segment(hidden, segs, ffn), dp, rng))
    if unbatched:
        hidden = apply("reshape", hidden, shape=(S, H))
    return hidden


# --------------------------------------------------------------------------
# encoding
# --------------------------------------------------------------------------

IMAGE_CLS = -1
IMAGE_MASK = -2


@dataclass
class EncoderInput:
    """A batch of aligned sequences: optional image part then optional text part.

    image_patches: (B, cells, patch_dim) pixel features.
    image_masked: (B, cells) bool; masked patches embed as the mask token.
    text_ids: (B, T) ints; text_pad: (B, T) bool for padding positions.
    """

    image_patches: np.ndarray | None = None
    image_masked: np.ndarray | None = None
    text_ids: np.ndarray | None = None
    text_pad: np.ndarray | None = None
    extra_mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def batch_size(self):
        src = self.image_patches if self.image_patches is not None else self.text_ids
        return src.shape[0]

    @property
    def n_image(self):
        return 0 if self.image_patches is None else self.image_patches.shape[1] + 1

    @property
    def n_text(self):
        return 0 if self.text_ids is None else self.text_ids.shape[1]

    def tags(self):
        return [ModalityTag.VISION] * self.n_image + [ModalityTag.LANGUAGE] * self.n_text


def _embed_image(model, patches, masked, dtype):
    cfg = model.config
    B, cells, F = patches.shape
    if cells != cfg.num_patches or F != cfg.patch_dim:
        raise ShapeError(f"image patches {patches.shape} do not match grid "
                         f"{cfg.num_patches} x patch_dim {cfg.patch_dim}")
    x = _linear(constant(patches, dtype), model, "embed.patch")
    if masked is not None and np.any(masked):
        m = np.asarray(masked, dtype=float)[..., None]
        x = apply("add", apply("mul", x, constant(1.0 - m, dtype)),
                  apply("mul", constant(m, dtype), model["embed.mask"]))
    cls = apply("add", constant(np.zeros((B, 1, cfg.hidden)), dtype), model["embed.img_cls"])
    x = apply("concat", cls, x, axis=1)
    return apply("add", x, model["pos.image"])


def _embed_text(model, ids):
    cfg = model.config
    T = ids.shape[1]
    if T > cfg.text_max_len:
        raise ShapeError(f"text length {T} exceeds room left by max_seq {cfg.max_seq} "
                         f"({cfg.text_max_len} text positions)")
    x = apply("embedding", model["embed.text"], ids=ids)
    pos = apply("slice", model["pos.text"], axis=0, start=0, stop=T)
    return apply("add", x, pos)


def attention_mask_for(inputs: EncoderInput, layout: str) -> np.ndarray:
    n_img, n_txt = inputs.n_image, inputs.n_text
    base = build_attention_mask(layout, n_img, n_txt)
    B, S = inputs.batch_size, n_img + n_txt
    mask = np.broadcast_to(base, (B, S, S)).copy()
    if inputs.text_pad is not None and np.any(inputs.text_pad):
        pad = np.concatenate([np.zeros((B, n_img), bool), inputs.text_pad.astype(bool)], axis=1)
        mask &= ~pad[:, None, :]
        idx = np.arange(S)
        mask[:, idx, idx] = True
    if inputs.extra_mask is not None:
        mask &= inputs.extra_mask
        idx = np.arange(S)
        mask[:, idx, idx] = True
    return mask


def encode(model: MultiwayModel, inputs: EncoderInput, layout: str,
           rng: np.random.Generator | None = None, drop_path: float | None = None,
           dtype=None):
    """Run the backbone; returns (hidden (B,S,H) after final norm, pooled (B,H))."""
    cfg = model.config
    dtype = dtype or model["pos.text"].dtype
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}")
    S = inputs.n_image + inputs.n_text
    if S == 0:
        raise ShapeError("encode: empty input")
    if S > cfg.max_seq:
        raise ShapeError(f"sequence length {S} exceeds max_seq {cfg.max_seq}")
    parts = []
    if inputs.image_patches is not None:
        parts.append(_embed_image(model, inputs.image_patches, inputs.image_masked, dtype))
    if inputs.text_ids is not None:
        parts.append(_embed_text(model, np.asarray(inputs.text_ids)))
    h = parts[0] if len(parts) == 1 else apply("concat", *parts, axis=1)
    mask = attention_mask_for(inputs, layout)
    tags = inputs.tags()
    for layer in range(1, cfg.num_layers + 1):
        h = block_forward(model, layer, h, mask, route(tags, layer, layout, cfg),
                          rng=rng, drop_path=drop_path)
    final = ["V" if t == ModalityTag.VISION else "L" for t in tags]
    h = _per_segment(h, _segments(final), lambda t, e: _layer_norm(t, model, f"final_ln.{e}"))
    cls = apply("reshape", apply("slice", h, axis=1, start=0, stop=1), shape=(h.shape[0], cfg.hidden))
    pooled = apply("tanh", _linear(cls, model, "pooler"))
    return h, pooled


def gather_rows(hidden: Tensor, flat_index: np.ndarray) -> Tensor:
    B, S, H = hidden.shape
    return apply("embedding", apply("reshape", hidden, shape=(B * S, H)), ids=np.asarray(flat_index))


def text_logits(model: MultiwayModel, rows: Tensor) -> Tensor:
    # output layer shares the text embedding table
    w = apply("transpose", model["embed.text"])
    return apply("add", apply("matmul", rows, w), model["head.text.b"])


def image_logits(model: MultiwayModel, rows: Tensor) -> Tensor:
    return _linear(rows, model, "head.image")


# --------------------------------------------------------------------------
# parameter accounting
# --------------------------------------------------------------------------


def count_params(config: MultiwayConfig) -> dict:
    """Closed-form parameter counts; a linear a x b with bias counts ab + b."""
    config.validate()
    L, H, M, K = config.num_layers, config.hidden, config.ffn_inner, config.vl_expert_layers
    ffn = 2 * H * M + M + H
    ln = 2 * H
    detail = {
        "text embedding": config.text_vocab * H,
        "patch embedding": config.patch_dim * H + H,
        "special tokens": 2 * H,
        "positional tables": (config.image_len + config.text_max_len) * H,
        "layer norms": (L * 2 + K) * 2 * ln + 2 * ln,
        "pooler": H * H + H,
        "prediction heads": config.text_vocab + H * config.visual_vocab + config.visual_vocab,
    }
    out = {
        "V-FFN": L * ffn,
        "L-FFN": L * ffn,
        "VL-FFN": K * ffn,
        "shared attention": L * 4 * (H * H + H),
        "other": sum(detail.values()),
    }
    out["total"] = sum(out.values())
    out["other detail"] = detail
    return out
