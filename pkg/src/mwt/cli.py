"""Command-line interface.

Every failure prints exactly one line ``mwt: error[<kind>]: <message>`` to
stderr and exits nonzero: 2 for usage, configuration and missing data paths,
3 for checkpoint problems, 4 for diverged training, 1 otherwise.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import mdm, synth
from .checkpoint import CheckpointError, load_checkpoint, restore_model, save_checkpoint
from .config import TASKS, ConfigError, RunConfig
from .corpus import Corpus, DataPathError, vocab_words, build_vocab
from .multiway import MultiwayConfig, count_params, init_model
from .repurpose import (DualHeads, FusionHead, RetrievalIndex, caption_generate, classify_by_retrieval,
                        dual_encode, finetune_caption, finetune_fusion, finetune_two_pair,
                        fusion_classify, intermediate_finetune_contrastive, load_heads,
                        recall_at_k, retrieve, two_pair_classify)
from .training import PretrainData, TrainingDiverged, pretrain_loop

EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT, EXIT_DIVERGED, EXIT_OTHER = 2, 2, 3, 4, 1
RESOLVED = "config.resolved.toml"


class CLIError(Exception):
    def __init__(self, kind, message, code=EXIT_OTHER):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message, EXIT_USAGE)


# --------------------------------------------------------------------------
# shared plumbing
# --------------------------------------------------------------------------


def _load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise DataPathError(p)
    cfg = RunConfig.load(p)
    # the resolved config carries an absolute corpus root so checkpoints are self-describing
    cfg.data.root = str(cfg.resolve(cfg.data.root).resolve())
    return cfg


def _fit(seq: mdm.TokenSequence, max_len) -> mdm.TokenSequence:
    """Truncate a CLS ... SEP text sequence to at most ``max_len`` tokens."""
    if len(seq.ids) <= max_len:
        return seq
    ids = np.concatenate([seq.ids[:max_len - 1], [mdm.SEP]])
    return mdm.TokenSequence(ids, seq.tags[:max_len], seq.kind)


def _tok(text, vocab, model_cfg):
    return _fit(mdm.tokenize_text(text, vocab), model_cfg.text_max_len)


def _codebook(model_cfg: MultiwayConfig, seed):
    return mdm.VisualCodebook.create(model_cfg.visual_vocab, model_cfg.patch_dim, seed=seed)


def _write_jsonl(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _meta(cfg: RunConfig, vocab, **extra):
    return {"vocab": vocab_words(vocab), "codebook_seed": cfg.data.codebook_seed, **extra}


def _open_checkpoint(path):
    p = Path(path)
    if not p.exists():
        raise DataPathError(p)
    return load_checkpoint(p)


def _short(n):
    for scale, suffix in ((1e9, "B"), (1e6, "M"), (1e3, "K")):
        if n >= scale:
            v = n / scale
            return f"{v:.1f}{suffix}" if v < 10 else f"{round(v)}{suffix}"
    return str(n)


def _image_id(path):
    return Path(path).stem


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(args):
    out = synth.write_corpus(args.out, seed=args.seed)
    print(f"wrote synthetic corpus to {out}")
    return 0


def pretrain_data(cfg: RunConfig, corpus: Corpus):
    """(vocab, PretrainData) for the corpus under ``cfg``'s model dimensions."""
    mc = cfg.model
    vocab = build_vocab(corpus, mc.text_vocab)
    cb = _codebook(mc, cfg.data.codebook_seed)
    texts = [_tok(t, vocab, mc) for t in corpus.texts()]
    images = [mdm.image_sequence(im, cb, mc.patch_size) for im in corpus.images()]
    p_img, p_txt = corpus.pairs()
    pairs = [mdm.pair_sequence(mdm.image_sequence(im, cb, mc.patch_size), _tok(t, vocab, mc))
             for im, t in zip(p_img, p_txt)]
    return vocab, PretrainData(texts, images, pairs)


def cmd_pretrain(args):
    cfg = _load_config(args.config)
    vocab, data = pretrain_data(cfg, Corpus(cfg.data, cfg.base_dir()))
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / RESOLVED)
    model = init_model(cfg.model, cfg.seed)
    pc = cfg.pretrain_config()
    _, metrics = pretrain_loop(model, data, pc, out_dir=out,
                               run_config=cfg.to_dict(), meta=_meta(cfg, vocab, kind="pretrain"))
    last = metrics[-1] if metrics else {}
    print(f"pretrain done: {len(metrics)} steps, final loss {last.get('loss', float('nan')):.4f}, "
          f"checkpoint {out / 'checkpoint.mwt'}")
    return 0


def _init_for_finetune(cfg: RunConfig, args):
    path = args.checkpoint or cfg.init_checkpoint
    if not path:
        if not args.from_scratch:
            raise CLIError("usage", "finetune needs a pretrained checkpoint "
                                    "(--checkpoint, run.init_checkpoint or --from-scratch)", EXIT_USAGE)
        return init_model(cfg.model, cfg.seed), None
    ck = _open_checkpoint(cfg.resolve(path) if not args.checkpoint else path)
    return restore_model(ck, cfg.model), ck


def cmd_finetune(args):
    cfg = _load_config(args.config)
    task = args.task
    corpus = Corpus(cfg.data, cfg.base_dir())
    model, ck = _init_for_finetune(cfg, args)
    mc = cfg.model
    vocab = (mdm.Vocab(ck.meta["vocab"]) if ck is not None and "vocab" in ck.meta
             else build_vocab(corpus, mc.text_vocab))
    sec = cfg.finetune[task]
    H = mc.hidden
    extra_meta, heads = {}, []
    log_records = []
    log = log_records.append

    if task == "fusion-cls":
        images, questions, answers = corpus.vqa()
        answer_set = sorted(set(answers))
        labels = [answer_set.index(a) for a in answers]
        ft = cfg.finetune_config(task, len(labels))
        head = FusionHead(H, len(answer_set), hidden=sec.head_hidden or None, seed=cfg.seed)
        finetune_fusion(model, head, images, [_tok(q, vocab, mc) for q in questions], labels, ft, log=log)
        heads = [head]
        extra_meta = {"answers": answer_set, "head_hidden": sec.head_hidden}
    elif task == "two-pair-cls":
        a, b, texts, labels = corpus.nlvr()
        ft = cfg.finetune_config(task, len(labels))
        head = FusionHead(2 * H, 2, hidden=sec.head_hidden or 2 * H, seed=cfg.seed)
        finetune_two_pair(model, head, a, b, [_tok(t, vocab, mc) for t in texts], labels, ft, log=log)
        heads = [head]
        extra_meta = {"head_hidden": sec.head_hidden or 2 * H}
    elif task in ("retrieval", "classify"):
        if task == "retrieval":
            images, texts = corpus.pairs()
        else:
            images, texts = corpus.classify()
            extra_meta["labels"] = corpus.labels()
        ft = cfg.finetune_config(task, len(texts))
        dual = DualHeads(H, sec.embed_dim or H, seed=cfg.seed)
        intermediate_finetune_contrastive(model, dual, images, [_tok(t, vocab, mc) for t in texts], ft,
                                          log=log)
        heads = [dual]
        extra_meta["embed_dim"] = sec.embed_dim or H
    elif task == "caption":
        images, caps = corpus.captions()
        ft = cfg.finetune_config(task, len(caps))
        finetune_caption(model, images, [_tok(c, vocab, mc) for c in caps], ft, log=log)
        extra_meta.update(beam_size=sec.beam_size, max_len=sec.max_len)
    else:  # argparse restricts choices; kept for direct calls
        raise CLIError("usage", f"unknown task {task!r}", EXIT_USAGE)

    out = cfg.output_path() / f"finetune-{task}"
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / RESOLVED)
    _write_jsonl(out / "metrics.jsonl", log_records)
    extra = {}
    for h in heads:
        extra.update(h.params)
    save_checkpoint(out / "checkpoint.mwt", model, None, cfg.to_dict(), extra=extra,
                    meta=_meta(cfg, vocab, kind="finetune", task=task, **extra_meta))
    last = log_records[-1]["loss"] if log_records else float("nan")
    print(f"finetune {task} done: {len(log_records)} steps, final loss {last:.4f}, "
          f"checkpoint {out / 'checkpoint.mwt'}")
    return 0


def _restore_task(ck, task=None):
    meta = ck.meta
    if meta.get("kind") != "finetune":
        raise CLIError("checkpoint", "checkpoint is not a finetuned model", EXIT_CHECKPOINT)
    if task and meta.get("task") != task:
        raise CLIError("checkpoint", f"checkpoint was finetuned for {meta.get('task')!r}, not {task!r}",
                       EXIT_CHECKPOINT)
    model = restore_model(ck)
    H = model.config.hidden
    t = meta["task"]
    if t == "fusion-cls":
        head = FusionHead(H, len(meta["answers"]), hidden=meta.get("head_hidden") or None)
    elif t == "two-pair-cls":
        head = FusionHead(2 * H, 2, hidden=meta.get("head_hidden") or 2 * H)
    elif t in ("retrieval", "classify"):
        head = DualHeads(H, meta.get("embed_dim") or H)
    else:
        head = None
    if head is not None:
        load_heads(head, ck.tensors)
    return model, head, mdm.Vocab(meta["vocab"])


def evaluate(ck, task, corpus: Corpus) -> dict:
    model, head, vocab = _restore_task(ck, task)
    mc = model.config
    tok = lambda t: _tok(t, vocab, mc)  # noqa: E731
    if task == "fusion-cls":
        images, qs, answers = corpus.vqa()
        probs = fusion_classify(model, list(images), [tok(q) for q in qs], head)
        pred = [ck.meta["answers"][i] for i in probs.argmax(1)]
        return {"task": task, "n": len(answers), "accuracy": float(np.mean([p == a for p, a in zip(pred, answers)]))}
    if task == "two-pair-cls":
        a, b, texts, labels = corpus.nlvr()
        probs = two_pair_classify(model, list(a), list(b), [tok(t) for t in texts], head)
        return {"task": task, "n": len(labels), "accuracy": float(np.mean(probs.argmax(1) == np.asarray(labels)))}
    if task == "retrieval":
        images, texts = corpus.pairs()
        seen, keep = set(), []
        for i, t in enumerate(texts):  # one held-in pair per distinct caption
            if t not in seen:
                seen.add(t)
                keep.append(i)
        ie = dual_encode(model, [images[i] for i in keep], head, kind="image").astype(np.float64)
        te = dual_encode(model, [tok(texts[i]) for i in keep], head, kind="text").astype(np.float64)
        sim = ie @ te.T
        i2t, t2i = recall_at_k(sim), recall_at_k(sim.T)
        rep = {"task": task, "n": len(keep)}
        rep.update({f"i2t {k}": v for k, v in i2t.items()})
        rep.update({f"t2i {k}": v for k, v in t2i.items()})
        return rep
    if task == "classify":
        images, names = corpus.classify()
        labels = ck.meta["labels"]
        pred = classify_by_retrieval(model, head, list(images), [tok(lbl) for lbl in labels])
        return {"task": task, "n": len(names),
                "accuracy": float(np.mean([labels[p] == n for p, n in zip(pred, names)]))}
    if task == "caption":
        images, caps = corpus.captions()
        beam, max_len = ck.meta.get("beam_size", 3), ck.meta.get("max_len", 16)
        outs = [vocab.decode(caption_generate(model, im, beam, max_len).tokens) for im in images]
        return {"task": task, "n": len(caps), "exact_match": float(np.mean([o == c for o, c in zip(outs, caps)])),
                "outputs": outs}
    raise CLIError("usage", f"unknown task {task!r}", EXIT_USAGE)


def retrieval_table(rep) -> str:
    head = f"{'':>6} {'image->text':^23} | {'text->image':^23}"
    cols = "       " + " ".join(f"{k:>7}" for k in ("R@1", "R@5", "R@10")) + " | " + \
        " ".join(f"{k:>7}" for k in ("R@1", "R@5", "R@10"))
    vals = "       " + " ".join(f"{100 * rep[f'i2t {k}']:7.1f}" for k in ("R@1", "R@5", "R@10")) + " | " + \
        " ".join(f"{100 * rep[f't2i {k}']:7.1f}" for k in ("R@1", "R@5", "R@10"))
    return "\n".join([head, cols, vals])


def cmd_eval(args):
    ck = _open_checkpoint(args.checkpoint)
    data_root = args.data
    if data_root is None:
        corpus = Corpus(RunConfig.from_dict(ck.config).data, Path.cwd())
    else:
        from .config import DataConfig
        corpus = Corpus(DataConfig(root=str(data_root)))
    rep = evaluate(ck, args.task, corpus)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / f"eval-{args.task}.jsonl", [rep])
    if args.task == "retrieval":
        print(retrieval_table(rep))
    else:
        print(json.dumps({k: v for k, v in rep.items() if k != "outputs"}, sort_keys=True))
    return 0


def inspect_report(config: MultiwayConfig) -> str:
    counts = count_params(config)
    lines = [f"config L={config.num_layers} H={config.hidden} M={config.ffn_inner} "
             f"A={config.num_heads} K={config.vl_expert_layers}"]
    for k in ("V-FFN", "L-FFN", "VL-FFN", "shared attention", "other", "total"):
        lines.append(f"{k} {counts[k]:,} (~{_short(counts[k])})")
    for k, v in counts["other detail"].items():
        lines.append(f"  other/{k} {v:,}")
    return "\n".join(lines)


def cmd_inspect(args):
    p = Path(args.path)
    if not p.exists():
        raise DataPathError(p)
    if p.suffix == ".toml":
        config = _load_config(p).model
    else:
        ck = load_checkpoint(p)
        config = ck.model_config
        model = restore_model(ck)
        actual = model.num_parameters()
        closed = count_params(config)["total"]
        if actual != closed:
            raise CLIError("checkpoint", f"checkpoint holds {actual:,} parameters, config implies {closed:,}",
                           EXIT_CHECKPOINT)
    print(inspect_report(config))
    return 0


def cmd_caption(args):
    ck = _open_checkpoint(args.checkpoint)
    model, _, vocab = _restore_task(ck, "caption")
    beam = args.beam_size or ck.meta.get("beam_size", 3)
    max_len = args.max_len or ck.meta.get("max_len", 16)
    for path in args.images:
        p = Path(path)
        if not p.exists():
            raise DataPathError(p)
        g = caption_generate(model, mdm.read_raster(p), beam, max_len)
        print(f"{_image_id(p)}\t{vocab.decode(g.tokens)}")
    return 0


def cmd_retrieve(args):
    ck = _open_checkpoint(args.checkpoint)
    model, heads, vocab = _restore_task(ck)
    if not isinstance(heads, DualHeads):
        raise CLIError("checkpoint", "retrieve needs a dual-encoder (retrieval/classify) checkpoint",
                       EXIT_CHECKPOINT)
    mc = model.config
    if bool(args.text) == bool(args.image):
        raise CLIError("usage", "give text queries (--text) or image queries (--image), not both", EXIT_USAGE)
    targets_file = Path(args.targets)
    if not targets_file.exists():
        raise DataPathError(targets_file)
    lines = [ln.rstrip("\n") for ln in targets_file.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if args.text:
        # targets are raster paths, relative to the list file
        paths = [targets_file.parent / ln.split("\t")[0] for ln in lines]
        for p in paths:
            if not p.exists():
                raise DataPathError(p)
        index = RetrievalIndex([_image_id(p) for p in paths],
                               dual_encode(model, [mdm.read_raster(p) for p in paths], heads, kind="image"),
                               ["image"] * len(paths))
        queries = [(f"q{i}", dual_encode(model, _tok(t, vocab, mc), heads, kind="text"))
                   for i, t in enumerate(args.text)]
    else:
        texts = [ln.split("\t")[-1] for ln in lines]
        index = RetrievalIndex([f"t{i}" for i in range(len(texts))],
                               dual_encode(model, [_tok(t, vocab, mc) for t in texts], heads, kind="text"),
                               ["text"] * len(texts))
        queries = []
        for path in args.image:
            p = Path(path)
            if not p.exists():
                raise DataPathError(p)
            queries.append((_image_id(p), dual_encode(model, mdm.read_raster(p), heads, kind="image")))
    k = min(args.k, len(index))
    for qid, q in queries:
        for rank, (tid, score) in enumerate(retrieve(index, q, k), 1):
            print(f"{qid}\t{rank}\t{tid}\t{score:.6f}")
    return 0


def cmd_classify(args):
    ck = _open_checkpoint(args.checkpoint)
    model, heads, vocab = _restore_task(ck)
    if not isinstance(heads, DualHeads):
        raise CLIError("checkpoint", "classify needs a dual-encoder (retrieval/classify) checkpoint",
                       EXIT_CHECKPOINT)
    if args.labels:
        lp = Path(args.labels)
        if not lp.exists():
            raise DataPathError(lp)
        labels = [ln for ln in lp.read_text(encoding="utf-8").splitlines() if ln.strip()]
    else:
        labels = ck.meta.get("labels") or []
    if not labels:
        raise CLIError("usage", "no label texts (pass --labels)", EXIT_USAGE)
    label_seqs = [_tok(lbl, vocab, model.config) for lbl in labels]
    for path in args.images:
        p = Path(path)
        if not p.exists():
            raise DataPathError(p)
        k = classify_by_retrieval(model, heads, mdm.read_raster(p), label_seqs)
        print(f"{_image_id(p)}\t{labels[k]}")
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mwt", description="Multiway Transformer desk toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write the synthetic tri-modal corpus")
    s.add_argument("out")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("pretrain", help="masked data modeling pretraining")
    s.add_argument("config")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("finetune", help="finetune a pretrained checkpoint on a task")
    s.add_argument("config")
    s.add_argument("--task", required=True, choices=TASKS)
    s.add_argument("--checkpoint")
    s.add_argument("--from-scratch", action="store_true", help="start from a fresh init")
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("eval", help="evaluate a finetuned checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--task", required=True, choices=TASKS)
    s.add_argument("--data", help="corpus directory (default: the one in the checkpoint config)")
    s.add_argument("--out", help="directory for eval-<task>.jsonl (default: next to the checkpoint)")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("inspect", help="parameter breakdown of a config or checkpoint")
    s.add_argument("path")
    s.set_defaults(fn=cmd_inspect)

    s = sub.add_parser("caption", help="caption raster images")
    s.add_argument("checkpoint")
    s.add_argument("images", nargs="+")
    s.add_argument("--beam-size", type=int)
    s.add_argument("--max-len", type=int)
    s.set_defaults(fn=cmd_caption)

    s = sub.add_parser("retrieve", help="rank targets for text or image queries")
    s.add_argument("checkpoint")
    s.add_argument("--targets", required=True,
                   help="image list (for --text queries) or text/TSV lines (for --image queries)")
    s.add_argument("--text", action="append", default=[])
    s.add_argument("--image", action="append", default=[])
    s.add_argument("--k", type=int, default=5)
    s.set_defaults(fn=cmd_retrieve)

    s = sub.add_parser("classify", help="zero-shot style classification by retrieval")
    s.add_argument("checkpoint")
    s.add_argument("images", nargs="+")
    s.add_argument("--labels")
    s.set_defaults(fn=cmd_classify)
    return p


def _fail(kind, message, code):
    msg = " ".join(str(message).split())
    print(f"mwt: error[{kind}]: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except CLIError as e:
        return _fail(e.kind, e, e.code)
    except DataPathError as e:
        return _fail("data", e, EXIT_DATA)
    except ConfigError as e:
        return _fail("config", e, EXIT_USAGE)
    except CheckpointError as e:
        return _fail(f"checkpoint-{e.kind}", e, EXIT_CHECKPOINT)
    except TrainingDiverged as e:
        return _fail("diverged", e, EXIT_DIVERGED)
    except (ValueError, KeyError, OSError) as e:
        return _fail("runtime", e, EXIT_OTHER)


if __name__ == "__main__":
    sys.exit(main())
