"""Downstream layouts: fusion classifiers, dual-encoder retrieval, captioning."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import mdm
from .multiway import (INIT_RANGE, EncoderInput, MultiwayModel, encode, gather_rows,
                       text_logits)
from .tensorcore import Tensor, apply, no_record
from .training import (OptimConfig, Trainer, contrastive_loss, label_smoothed_ce, step_rng)

LOGIT_SCALE_INIT = 1.0 / 0.07
LOGIT_SCALE_RANGE = (1.0, 100.0)


def _uniform(rng, shape):
    return rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)


def _param(arr, name):
    return Tensor(np.asarray(arr), requires_grad=True, dtype="f32", name=name)


# --------------------------------------------------------------------------
# heads
# --------------------------------------------------------------------------


class FusionHead:
    """Classifier over pooled fusion output; optional hidden layer (Linear-LN-GELU)."""

    def __init__(self, in_dim, num_labels, hidden=None, seed=0, prefix="head.cls"):
        rng = np.random.default_rng(seed)
        self.in_dim, self.num_labels, self.hidden, self.prefix = in_dim, num_labels, hidden, prefix
        p = {}
        d = in_dim
        if hidden:
            p["fc1.w"] = _uniform(rng, (in_dim, hidden))
            p["fc1.b"] = np.zeros(hidden)
            p["ln.g"] = np.ones(hidden)
            p["ln.b"] = np.zeros(hidden)
            d = hidden
        p["out.w"] = _uniform(rng, (d, num_labels))
        p["out.b"] = np.zeros(num_labels)
        self.params = {f"{prefix}.{k}": _param(v, f"{prefix}.{k}") for k, v in p.items()}

    def __getitem__(self, k):
        return self.params[f"{self.prefix}.{k}"]

    def logits(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.in_dim:
            raise ValueError(f"head expects {self.in_dim} features, got {features.shape[-1]}")
        x = features
        if self.hidden:
            x = apply("add", apply("matmul", x, self["fc1.w"]), self["fc1.b"])
            x = apply("gelu", apply("layer-norm", x, self["ln.g"], self["ln.b"]))
        return apply("add", apply("matmul", x, self["out.w"]), self["out.b"])


class DualHeads:
    """Per-modality projections after the pooler, plus a learnable logit scale."""

    def __init__(self, hidden, embed_dim=None, seed=0, prefix="head.dual"):
        rng = np.random.default_rng(seed)
        D = embed_dim or hidden
        self.prefix = prefix
        self.params = {
            f"{prefix}.image.w": _param(_uniform(rng, (hidden, D)), f"{prefix}.image.w"),
            f"{prefix}.text.w": _param(_uniform(rng, (hidden, D)), f"{prefix}.text.w"),
            f"{prefix}.logit_scale": _param(np.array(LOGIT_SCALE_INIT), f"{prefix}.logit_scale"),
        }

    def proj(self, modality):
        return self.params[f"{self.prefix}.{modality}.w"]

    @property
    def logit_scale(self):
        return self.params[f"{self.prefix}.logit_scale"]

    def clamp(self):
        ls = self.logit_scale
        ls.data = np.clip(ls.data, *LOGIT_SCALE_RANGE).astype(ls.data.dtype)


def load_heads(head, tensors: dict):
    for k, p in head.params.items():
        if k not in tensors:
            raise KeyError(f"checkpoint lacks head tensor {k}")
        if tuple(tensors[k].shape) != p.shape:
            raise ValueError(f"head tensor {k} has shape {tuple(tensors[k].shape)}, expected {p.shape}")
        p.data = np.array(tensors[k], dtype=p.data.dtype)
    return head


# --------------------------------------------------------------------------
# inputs
# --------------------------------------------------------------------------


def image_input(model: MultiwayModel, images) -> EncoderInput:
    ps = model.config.patch_size
    patches = np.stack([mdm.image_to_patches(im, ps) for im in images])
    return EncoderInput(image_patches=patches)


def text_input(sequences: Sequence) -> EncoderInput:
    ids = [s.ids if isinstance(s, mdm.TokenSequence) else np.asarray(s) for s in sequences]
    T = max(len(i) for i in ids)
    arr = np.full((len(ids), T), mdm.PAD, dtype=np.int64)
    pad = np.ones((len(ids), T), dtype=bool)
    for b, i in enumerate(ids):
        arr[b, :len(i)] = i
        pad[b, :len(i)] = False
    return EncoderInput(text_ids=arr, text_pad=pad)


def fusion_input(model, images, texts) -> EncoderInput:
    img, txt = image_input(model, images), text_input(texts)
    img.text_ids, img.text_pad = txt.text_ids, txt.text_pad
    return img


# --------------------------------------------------------------------------
# fusion classification
# --------------------------------------------------------------------------


def fusion_logits(model, images, texts, head: FusionHead, rng=None, drop_path=None):
    _, pooled = encode(model, fusion_input(model, images, texts), "fusion", rng=rng, drop_path=drop_path)
    return head.logits(pooled)


def fusion_classify(model, image, text, head: FusionHead, num_labels=None) -> np.ndarray:
    """Label distribution for one (image, question) pair, or a batch of them."""
    if num_labels is not None and num_labels != head.num_labels:
        raise ValueError(f"head has {head.num_labels} labels, task expects {num_labels}")
    batched = isinstance(image, (list, tuple))
    images, texts = (image, text) if batched else ([image], [text])
    with no_record():
        probs = apply("softmax", fusion_logits(model, images, texts, head), axis=-1).data
    return probs if batched else probs[0]


def two_pair_logits(model, images_a, images_b, texts, head: FusionHead, rng=None, drop_path=None):
    n = len(texts)
    _, pooled = encode(model, fusion_input(model, list(images_a) + list(images_b), list(texts) * 2),
                       "fusion", rng=rng, drop_path=drop_path)
    feats = apply("concat", apply("slice", pooled, axis=0, start=0, stop=n),
                  apply("slice", pooled, axis=0, start=n, stop=2 * n), axis=1)
    return head.logits(feats)


def two_pair_classify(model, image_a, image_b, text, head: FusionHead) -> np.ndarray:
    if head.in_dim != 2 * model.config.hidden:
        raise ValueError(f"two-pair head needs {2 * model.config.hidden} inputs, has {head.in_dim}")
    batched = isinstance(text, (list, tuple))
    a, b, t = (image_a, image_b, text) if batched else ([image_a], [image_b], [text])
    with no_record():
        probs = apply("softmax", two_pair_logits(model, a, b, t, head), axis=-1).data
    return probs if batched else probs[0]


# --------------------------------------------------------------------------
# dual encoder and retrieval
# --------------------------------------------------------------------------


def dual_embed(model, inputs: EncoderInput, heads: DualHeads, rng=None, drop_path=None) -> Tensor:
    has_img, has_txt = inputs.image_patches is not None, inputs.text_ids is not None
    if has_img == has_txt:
        raise ValueError("dual encoding takes exactly one modality per call")
    _, pooled = encode(model, inputs, "dual", rng=rng, drop_path=drop_path)
    proj = heads.proj("image" if has_img else "text")
    return apply("l2-normalize", apply("matmul", pooled, proj), axis=-1)


def dual_encode(model, item, heads: DualHeads, kind=None) -> np.ndarray:
    """l2-normalised embedding(s) for images (HWC arrays) or token sequences."""
    items = item if isinstance(item, list) else [item]
    if kind is None:
        kind = "text" if isinstance(items[0], mdm.TokenSequence) else "image"
    inp = image_input(model, items) if kind == "image" else text_input(items)
    with no_record():
        out = dual_embed(model, inp, heads).data
    return out if isinstance(item, list) else out[0]


@dataclass
class RetrievalIndex:
    ids: list
    embeddings: np.ndarray
    modality: list = field(default_factory=list)

    def __post_init__(self):
        e = np.asarray(self.embeddings, dtype=np.float64)
        if e.ndim != 2 or len(e) != len(self.ids):
            raise ValueError(f"{len(self.ids)} ids for embeddings of shape {e.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("retrieval ids must be unique")
        norms = np.linalg.norm(e, axis=1)
        if len(e) and np.abs(norms - 1).max() > 1e-4:
            raise ValueError("retrieval embeddings must be l2-normalised")
        self.embeddings = e / norms[:, None] if len(e) else e
        if not self.modality:
            self.modality = ["?"] * len(self.ids)

    def __len__(self):
        return len(self.ids)


def retrieve(index: RetrievalIndex, query_embedding, k: int):
    """Top-k (id, cosine) pairs by descending score, ties by ascending id."""
    if len(index) == 0:
        raise ValueError("retrieval index is empty")
    if not 1 <= k <= len(index):
        raise ValueError(f"k={k} outside 1..{len(index)}")
    q = np.asarray(query_embedding, dtype=np.float64)
    q = q / np.linalg.norm(q)
    scores = index.embeddings @ q
    id_rank = np.empty(len(index), dtype=np.int64)
    id_rank[sorted(range(len(index)), key=lambda i: index.ids[i])] = np.arange(len(index))
    order = np.lexsort((id_rank, -scores))[:k]
    return [(index.ids[i], float(scores[i])) for i in order]


def recall_at_k(sim: np.ndarray, ks=(1, 5, 10)) -> dict:
    """R@k where query i's correct target is column i."""
    n = sim.shape[0]
    diag = sim[np.arange(n), np.arange(n)]
    # rank = number of targets that outrank the correct one (ties favour lower index)
    better = (sim > diag[:, None]) | ((sim == diag[:, None]) & (np.arange(n)[None] < np.arange(n)[:, None]))
    rank = better.sum(1)
    return {f"R@{k}": float((rank < k).mean()) for k in ks}


def classify_by_retrieval(model, heads: DualHeads, image, label_texts: Sequence) -> int:
    if not len(label_texts):
        raise ValueError("no label texts to classify against")
    img = dual_encode(model, image if isinstance(image, list) else [image], heads, kind="image")
    txt = dual_encode(model, list(label_texts), heads, kind="text")
    scores = img.astype(np.float64) @ txt.astype(np.float64).T
    pred = np.argmax(scores, axis=1)
    return pred if isinstance(image, list) else int(pred[0])


# --------------------------------------------------------------------------
# finetuning loops
# --------------------------------------------------------------------------


@dataclass
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 32
    drop_path: float = 0.0
    label_smoothing: float = 0.0
    mask_prob: float = 0.6
    fixed_fraction: bool = False
    beam_size: int = 3
    max_len: int = 16
    seed: int = 0
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(
        peak_lr=1e-3, warmup_steps=10, total_steps=100, beta2=0.999, eps=1e-8,
        weight_decay=0.05))


def _batches(n, batch_size, seed, epoch):
    order = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _trainer(model, heads, cfg: FinetuneConfig, steps):
    params = dict(model.params)
    for h in heads:
        params.update(h.params)
    optim = cfg.optim
    if optim.total_steps != steps:
        optim = OptimConfig(**{**optim.__dict__, "total_steps": max(steps, optim.warmup_steps + 1)})
    return Trainer(params, optim, model.config.num_layers)


def _steps(n, cfg):
    return cfg.epochs * ((n + cfg.batch_size - 1) // cfg.batch_size)


def _rng(cfg, step):
    return step_rng(cfg.seed, step) if cfg.drop_path > 0 else None


def finetune_fusion(model, head: FusionHead, images, texts, labels, cfg: FinetuneConfig, log=None):
    labels = np.asarray(labels)
    trainer = _trainer(model, [head], cfg, _steps(len(labels), cfg))
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(labels), cfg.batch_size, cfg.seed, epoch):
            def loss_fn():
                logits = fusion_logits(model, [images[i] for i in idx], [texts[i] for i in idx],
                                       head, rng=_rng(cfg, step), drop_path=cfg.drop_path)
                return label_smoothed_ce(logits, labels[idx], cfg.label_smoothing), None
            loss, *_ = trainer.step(loss_fn)
            if log:
                log({"step": step, "loss": loss})
            step += 1
    return trainer


def finetune_two_pair(model, head: FusionHead, images_a, images_b, texts, labels,
                      cfg: FinetuneConfig, log=None):
    labels = np.asarray(labels)
    trainer = _trainer(model, [head], cfg, _steps(len(labels), cfg))
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(labels), cfg.batch_size, cfg.seed, epoch):
            def loss_fn():
                logits = two_pair_logits(model, [images_a[i] for i in idx], [images_b[i] for i in idx],
                                         [texts[i] for i in idx], head,
                                         rng=_rng(cfg, step), drop_path=cfg.drop_path)
                return label_smoothed_ce(logits, labels[idx], cfg.label_smoothing), None
            loss, *_ = trainer.step(loss_fn)
            if log:
                log({"step": step, "loss": loss})
            step += 1
    return trainer


def matched_cosine(model, heads, images, texts) -> float:
    img = dual_encode(model, list(images), heads, kind="image").astype(np.float64)
    txt = dual_encode(model, list(texts), heads, kind="text").astype(np.float64)
    return float((img * txt).sum(1).mean())


def intermediate_finetune_contrastive(model, heads: DualHeads, images, texts, cfg: FinetuneConfig,
                                      log=None):
    """Image-text contrastive training of the dual-encoder layout, in place."""
    n = len(texts)
    trainer = _trainer(model, [heads], cfg, _steps(n, cfg))
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(n, cfg.batch_size, cfg.seed, epoch):
            if len(idx) < 2:
                continue

            def loss_fn():
                rng = _rng(cfg, step)
                ie = dual_embed(model, image_input(model, [images[i] for i in idx]), heads,
                                rng=rng, drop_path=cfg.drop_path)
                te = dual_embed(model, text_input([texts[i] for i in idx]), heads,
                                rng=rng, drop_path=cfg.drop_path)
                return contrastive_loss(ie, te, heads.logit_scale), None
            loss, *_ = trainer.step(loss_fn)
            heads.clamp()
            if log:
                log({"step": step, "loss": loss, "logit_scale": float(heads.logit_scale.data)})
            step += 1
    return model


# --------------------------------------------------------------------------
# captioning
# --------------------------------------------------------------------------


def caption_mask(n_caption: int, mask_prob: float, rng, fixed_fraction=False) -> np.ndarray:
    """Masked caption slots among ``n_caption`` (caption tokens plus SEP)."""
    if n_caption < 1:
        raise ValueError("empty caption")
    if not 0 < mask_prob <= 1:
        raise ValueError(f"mask_prob {mask_prob} outside (0, 1]")
    if fixed_fraction:
        k = mdm.mask_count(n_caption, mask_prob) if mask_prob < 1 else n_caption
        m = np.zeros(n_caption, dtype=bool)
        m[rng.choice(n_caption, size=k, replace=False)] = True
        return m
    m = rng.random(n_caption) < mask_prob
    if not m.any():
        m[rng.integers(n_caption)] = True
    return m


def caption_batch(model, images, captions, mask_prob, rng, fixed_fraction=False):
    """Seq2seq input with masked caption tokens; returns (input, flat positions, targets)."""
    seqs, flat, targets = [], [], []
    n_img = model.config.image_len
    for cap in captions:
        ids = np.asarray(cap.ids if isinstance(cap, mdm.TokenSequence) else cap, dtype=np.int64)
        if len(ids) < 2 or ids[0] != mdm.CLS or ids[-1] != mdm.SEP:
            raise ValueError("captions must be CLS ... SEP token sequences")
        if len(ids) == 2:
            raise ValueError("empty caption")
        m = caption_mask(len(ids) - 1, mask_prob, rng, fixed_fraction)
        pos = np.flatnonzero(m) + 1
        targets.append(ids[pos])
        ids = ids.copy()
        ids[pos] = mdm.MASK
        seqs.append((ids, pos))
    inp = fusion_input(model, images, [s for s, _ in seqs])
    S = n_img + inp.n_text
    for b, (_, pos) in enumerate(seqs):
        flat.append(b * S + n_img + pos)
    return inp, np.concatenate(flat), np.concatenate(targets)


def caption_loss(model, images, captions, mask_prob, rng, label_smoothing=0.1,
                 fixed_fraction=False, drop_rng=None, drop_path=None):
    inp, flat, targets = caption_batch(model, images, captions, mask_prob, rng, fixed_fraction)
    h, _ = encode(model, inp, "seq2seq", rng=drop_rng, drop_path=drop_path)
    logits = text_logits(model, gather_rows(h, flat))
    return label_smoothed_ce(logits, targets, label_smoothing)


def caption_finetune_step(model, image, caption, mask_prob=0.6, seed=0, label_smoothing=0.1):
    """Masked-caption loss for a single (image, caption) pair."""
    rng = np.random.default_rng(seed)
    return caption_loss(model, [image], [caption], mask_prob, rng, label_smoothing)


def finetune_caption(model, images, captions, cfg: FinetuneConfig, log=None):
    n = len(captions)
    trainer = _trainer(model, [], cfg, _steps(n, cfg))
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(n, cfg.batch_size, cfg.seed, epoch):
            mrng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, step, 0xCA]))

            def loss_fn():
                return caption_loss(model, [images[i] for i in idx], [captions[i] for i in idx],
                                    cfg.mask_prob, mrng, cfg.label_smoothing, cfg.fixed_fraction,
                                    drop_rng=_rng(cfg, step), drop_path=cfg.drop_path), None
            loss, *_ = trainer.step(loss_fn)
            if log:
                log({"step": step, "loss": loss})
            step += 1
    return trainer


BANNED = (mdm.PAD, mdm.CLS, mdm.MASK)


def next_token_logprobs(model, patches: np.ndarray, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
    """Log-probs for the slot after each prefix (all prefixes the same length)."""
    B = len(prefixes)
    ids = np.array([[mdm.CLS, *p, mdm.MASK] for p in prefixes], dtype=np.int64)
    inp = EncoderInput(image_patches=np.broadcast_to(patches, (B,) + patches.shape).copy(),
                       text_ids=ids)
    with no_record():
        h, _ = encode(model, inp, "seq2seq")
        S = h.shape[1]
        rows = gather_rows(h, np.arange(B) * S + S - 1)
        logits = text_logits(model, rows).data.astype(np.float64)
    logits[:, list(BANNED)] = -np.inf
    mx = logits.max(1, keepdims=True)
    return logits - mx - np.log(np.exp(logits - mx).sum(1, keepdims=True))


@dataclass
class BeamState:
    beams: list
    beam_size: int
    max_len: int
    finished: list = field(default_factory=list)


@dataclass
class Generation:
    tokens: list
    score: float
    terminated: bool


def _patches(model, image):
    return mdm.image_to_patches(image, model.config.patch_size)


def caption_generate(model, image, beam_size=3, max_len=16) -> Generation:
    """Fill-mask decoding: append [MASK], predict it, keep the best beams."""
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    patches = _patches(model, image)
    state = BeamState([((), 0.0)], beam_size, max_len)
    for _ in range(max_len):
        if not state.beams:
            break
        logp = next_token_logprobs(model, patches, [b[0] for b in state.beams])
        cands = []
        for (prefix, score), lp in zip(state.beams, logp):
            top = np.lexsort((np.arange(lp.size), -lp))[:beam_size]
            cands += [(score + lp[t], prefix + (int(t),)) for t in top]
        cands.sort(key=lambda c: (-c[0], c[1]))
        state.beams = []
        for score, prefix in cands[:beam_size]:
            if prefix[-1] == mdm.SEP:
                state.finished.append((prefix, score))
            else:
                state.beams.append((prefix, score))
        if len(state.finished) >= beam_size:
            break
    if state.finished:
        prefix, score = min(state.finished, key=lambda f: (-f[1] / len(f[0]), f[0]))
        return Generation(list(prefix[:-1]), float(score), True)
    prefix, score = min(state.beams, key=lambda f: (-f[1] / len(f[0]), f[0]))
    return Generation(list(prefix), float(score), False)


def greedy_decode(model, image, max_len=16) -> Generation:
    patches = _patches(model, image)
    prefix, score = [], 0.0
    for _ in range(max_len):
        lp = next_token_logprobs(model, patches, [prefix])[0]
        tok = int(np.argmax(lp))
        score += lp[tok]
        prefix.append(tok)
        if tok == mdm.SEP:
            return Generation(prefix[:-1], float(score), True)
    return Generation(prefix, float(score), False)
