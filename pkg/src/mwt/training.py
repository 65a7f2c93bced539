"""Losses, AdamW, learning-rate schedules and the masked-data-modeling loop."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import mdm
from .multiway import (EncoderInput, MultiwayModel, encode, gather_rows, image_logits,
                       text_logits)
from .tensorcore import NonFiniteError, Tape, Tensor, apply, backward

# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def mdm_loss(logits: Tensor, targets, mask_positions) -> Tensor:
    """Mean cross-entropy over the masked rows of ``logits`` (seq, vocab)."""
    pos = np.asarray(mask_positions, dtype=np.int64)
    if pos.size == 0:
        raise ValueError("mdm_loss: no masked positions to supervise")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != pos.shape:
        raise ValueError(f"mdm_loss: {targets.size} targets for {pos.size} positions")
    rows = apply("embedding", logits, ids=pos)
    return apply("cross-entropy-from-logits", rows, targets=targets)


def label_smoothed_ce(logits: Tensor, target, eps_ls: float = 0.1) -> Tensor:
    if not 0 <= eps_ls < 1:
        raise ValueError(f"label smoothing {eps_ls} outside [0, 1)")
    if logits.data.ndim == 1:
        logits = apply("reshape", logits, shape=(1, logits.shape[0]))
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    return apply("cross-entropy-from-logits", logits, targets=target, smoothing=eps_ls)


def contrastive_loss(image_embs: Tensor, text_embs: Tensor, temperature=0.07) -> Tensor:
    """Symmetric InfoNCE over the B x B cosine-similarity matrix.

    ``temperature`` is a float or a learnable scalar Tensor holding the
    inverse temperature (logit scale).
    """
    B = image_embs.shape[0]
    if B == 0:
        raise ValueError("contrastive_loss: empty batch")
    if text_embs.shape != image_embs.shape:
        raise ValueError(f"contrastive_loss: shapes {image_embs.shape} and {text_embs.shape} differ")
    for name, e in (("image", image_embs), ("text", text_embs)):
        norms = np.linalg.norm(e.data.astype(np.float64), axis=-1)
        if np.abs(norms - 1).max() > 1e-4:
            raise ValueError(f"contrastive_loss: {name} embeddings are not l2-normalised")
    sim = apply("matmul", image_embs, apply("transpose", text_embs))
    if isinstance(temperature, Tensor):
        sim = apply("mul", sim, temperature)
    else:
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        sim = apply("scale", sim, factor=1.0 / temperature)
    labels = np.arange(B)
    i2t = apply("cross-entropy-from-logits", sim, targets=labels)
    t2i = apply("cross-entropy-from-logits", apply("transpose", sim), targets=labels)
    return apply("scale", apply("add", i2t, t2i), factor=0.5)


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.05
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyperparameters(self):
        return dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                    weight_decay=self.weight_decay, t=self.t)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float | None = None,
               lr_scale: dict | None = None, no_decay: set | None = None) -> OptimizerState:
    """Bias-corrected Adam with decoupled weight decay, in place on ``params``.

    Every gradient is checked before anything is written, so a non-finite
    gradient leaves params and state untouched.
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}; step skipped")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step_lr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        wd = 0.0 if no_decay and name in no_decay else state.weight_decay
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + wd * p.data
        p.data = (p.data - step_lr * update).astype(p.data.dtype)
    return state


@dataclass
class Schedule:
    peak_lr: float = 1e-3
    warmup_steps: int = 10_000
    total_steps: int = 1_000_000
    floor_lr: float = 0.0

    def __post_init__(self):
        if self.warmup_steps >= self.total_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} must be < total_steps {self.total_steps}")
        if self.floor_lr < 0:
            raise ValueError("floor_lr must be >= 0")


def lr_at(step: int, schedule: Schedule) -> float:
    s = schedule
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    if step >= s.total_steps:
        return s.floor_lr
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    # written as a drop from the peak so the warmup/decay boundary is exactly peak_lr
    return s.peak_lr - (s.peak_lr - s.floor_lr) * 0.5 * (1 - math.cos(math.pi * progress))


def layerwise_lr(base_lr: float, decay: float, layer: int, num_layers: int) -> float:
    """base_lr * decay**(num_layers - layer); layer 0 is the embeddings."""
    if not 0 < decay <= 1:
        raise ValueError(f"layer decay {decay} outside (0, 1]")
    return base_lr * decay ** (num_layers - layer)


def param_layer(name: str, num_layers: int) -> int:
    if name.startswith(("embed.", "pos.")):
        return 0
    if name.startswith("layers."):
        return int(name.split(".")[1])
    return num_layers


def clip_gradients(grads: dict, max_norm: float):
    """Scale all grads so the global l2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        grads = {k: (g * s).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


def no_decay_names(params: dict) -> set:
    return {k for k, p in params.items()
            if p.data.ndim < 2 or k.startswith("pos.") or k.endswith("logit_scale")}


@dataclass
class OptimConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 20
    total_steps: int = 200
    floor_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.05
    grad_clip: float = 3.0
    layer_decay: float = 1.0

    def schedule(self):
        return Schedule(self.peak_lr, self.warmup_steps, self.total_steps, self.floor_lr)

    def new_state(self):
        return OptimizerState(lr=self.peak_lr, beta1=self.beta1, beta2=self.beta2,
                              eps=self.eps, weight_decay=self.weight_decay)


class Trainer:
    """Owns one parameter set and its optimizer; steps are strictly sequential."""

    def __init__(self, params: dict, optim: OptimConfig, num_layers: int,
                 state: OptimizerState | None = None):
        self.params = params
        self.optim = optim
        self.schedule = optim.schedule()
        self.state = state or optim.new_state()
        self.no_decay = no_decay_names(params)
        self.lr_scale = {k: layerwise_lr(1.0, optim.layer_decay, param_layer(k, num_layers), num_layers)
                         for k in params} if optim.layer_decay != 1.0 else None

    def step(self, loss_fn: Callable[[], tuple]):
        """``loss_fn`` builds the graph and returns (loss, extras)."""
        lr = lr_at(self.state.t, self.schedule)
        with Tape() as tape:
            loss, extras = loss_fn()
        by_id = backward(tape, loss)
        grads = {k: by_id[p] for k, p in self.params.items() if p in by_id}
        grads, norm = clip_gradients(grads, self.optim.grad_clip)
        adamw_step(self.params, grads, self.state, lr=lr, lr_scale=self.lr_scale,
                   no_decay=self.no_decay)
        return float(loss.data), lr, norm, extras


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, step, last_checkpoint):
        super().__init__(f"loss became non-finite at step {step}; "
                         f"last good checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class PretrainConfig:
    steps: int = 200
    quotas: tuple = (8, 8, 8)
    seed: int = 0
    save_every: int = 0
    log_wall_time: bool = False
    optim: OptimConfig = field(default_factory=OptimConfig)
    masking: mdm.MaskSettings = field(default_factory=mdm.MaskSettings)


@dataclass
class PretrainData:
    texts: list
    images: list
    pairs: list


def _pad(seqs, pad=mdm.PAD):
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), pad, dtype=np.int64)
    padm = np.ones((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        padm[i, :len(s)] = False
    return ids, padm


def collate_pretrain(batch: mdm.Batch, masking: mdm.MaskSettings, grid):
    """Masked model inputs per kind: {kind: (EncoderInput, text (flat, targets), image (flat, targets))}."""
    out = {}
    for kind, samples in (("mono-text", batch.texts), ("mono-image", batch.images),
                          ("pair", batch.pairs)):
        if not samples:
            continue
        corrupted, plans, tgts = [], [], []
        for s in samples:
            plan = mdm.plan_for(s.item, masking, s.seed, grid)
            seq, tgt = mdm.apply_mask(s.item, plan)
            corrupted.append(seq)
            plans.append(plan)
            tgts.append(tgt)
        n_img = corrupted[0].n_image
        inp = EncoderInput()
        if n_img:
            inp.image_patches = np.stack([s.patches for s in corrupted])
            inp.image_masked = np.stack([s.ids[1:n_img] == mdm.IMAGE_MASK for s in corrupted])
        if kind != "mono-image":
            text_ids, text_pad = _pad([s.ids[n_img:] for s in corrupted])
            inp.text_ids, inp.text_pad = text_ids, text_pad
        S = n_img + inp.n_text
        txt_flat, txt_t, img_flat, img_t = [], [], [], []
        for b, (plan, tgt) in enumerate(zip(plans, tgts)):
            is_img = plan.positions < n_img
            img_flat.append(b * S + plan.positions[is_img])
            img_t.append(tgt[is_img])
            txt_flat.append(b * S + plan.positions[~is_img])
            txt_t.append(tgt[~is_img])
        out[kind] = (inp, (np.concatenate(txt_flat), np.concatenate(txt_t)),
                     (np.concatenate(img_flat), np.concatenate(img_t)))
    return out


_LAYOUT = {"mono-text": "language-encoder", "mono-image": "vision-encoder", "pair": "fusion"}


def mdm_forward(model: MultiwayModel, collated: dict, rng=None):
    """Per-kind mean masked-prediction losses and top-1 hit counts."""
    losses, stats = {}, {"text_hits": 0, "text_n": 0, "image_hits": 0, "image_n": 0}
    for kind, (inp, (tflat, tt), (iflat, it)) in collated.items():
        h, _ = encode(model, inp, _LAYOUT[kind], rng=rng)
        parts = []
        if tflat.size:
            logits = text_logits(model, gather_rows(h, tflat))
            parts.append((apply("cross-entropy-from-logits", logits, targets=tt), tflat.size))
            stats["text_hits"] += int((logits.data.argmax(1) == tt).sum())
            stats["text_n"] += tflat.size
        if iflat.size:
            logits = image_logits(model, gather_rows(h, iflat))
            parts.append((apply("cross-entropy-from-logits", logits, targets=it), iflat.size))
            stats["image_hits"] += int((logits.data.argmax(1) == it).sum())
            stats["image_n"] += iflat.size
        if len(parts) == 1:
            losses[kind] = parts[0][0]
        else:
            n = sum(c for _, c in parts)
            terms = [apply("scale", l, factor=c / n) for l, c in parts]
            losses[kind] = apply("add", *terms)
    return losses, stats


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step), 0x5D]))


def pretrain_loop(model: MultiwayModel, data: PretrainData, config: PretrainConfig,
                  out_dir=None, run_config=None, log: Callable | None = None, meta=None):
    """Masked data modeling on text, image and pair batches.

    Returns (trainer, metrics). With ``out_dir`` writes metrics.jsonl and
    checkpoint.mwt there (plus periodic snapshots when save_every > 0).
    """
    from .checkpoint import save_checkpoint

    cfg = model.config
    trainer = Trainer(model.params, config.optim, cfg.num_layers)
    out = Path(out_dir) if out_dir else None
    metrics_f = None
    last_ckpt = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        metrics_f = open(out / "metrics.jsonl", "w")
    metrics = []
    try:
        for step in range(config.steps):
            t0 = time.perf_counter()
            batch = mdm.compose_batch(data.texts, data.images, data.pairs, config.quotas,
                                      seed=config.seed, step=step)
            collated = collate_pretrain(batch, config.masking, cfg.patch_grid)
            rng = step_rng(config.seed, step) if cfg.drop_path_rate > 0 else None
            holder = {}

            def loss_fn():
                losses, stats = mdm_forward(model, collated, rng=rng)
                holder.update(losses=losses, stats=stats)
                total = losses[next(iter(losses))]
                for k in list(losses)[1:]:
                    total = apply("add", total, losses[k])
                return total, None

            try:
                loss, lr, norm, _ = trainer.step(loss_fn)
            except NonFiniteError:
                raise TrainingDiverged(step, last_ckpt) from None
            st = holder["stats"]
            rec = {
                "step": step,
                "lr": lr,
                "loss": loss,
                "loss_text": _val(holder["losses"].get("mono-text")),
                "loss_image": _val(holder["losses"].get("mono-image")),
                "loss_pair": _val(holder["losses"].get("pair")),
                "acc_text": st["text_hits"] / max(1, st["text_n"]),
                "acc_image": st["image_hits"] / max(1, st["image_n"]),
                "grad_norm": norm,
                "wall_ms": round((time.perf_counter() - t0) * 1e3, 3) if config.log_wall_time else None,
            }
            metrics.append(rec)
            if metrics_f:
                metrics_f.write(json.dumps(rec) + "\n")
            if log:
                log(rec)
            if out and config.save_every and (step + 1) % config.save_every == 0:
                last_ckpt = out / f"checkpoint-{step + 1}.mwt"
                save_checkpoint(last_ckpt, model, trainer.state, run_config, meta=meta)
    finally:
        if metrics_f:
            metrics_f.close()
    if out:
        save_checkpoint(out / "checkpoint.mwt", model, trainer.state, run_config, meta=meta)
    return trainer, metrics


def _val(t):
    return None if t is None else float(t.data)
