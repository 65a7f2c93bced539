"""Readers for the on-disk corpus layout written by ``synth.write_corpus``.

Text corpora are one sample per line; TSV files hold raster paths relative
to the corpus root. Missing files raise ``DataPathError`` naming the path.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import mdm


class DataPathError(FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"data path not found: {path}")
        self.path = str(path)


def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise DataPathError(path)
    return path


def read_lines(path) -> list:
    with open(_need(path), encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]


def read_tsv(path) -> list:
    return [line.split("\t") for line in read_lines(path)]


def load_image(root, rel) -> np.ndarray:
    return mdm.read_raster(_need(Path(root) / rel))


class Corpus:
    """Lazy view over a corpus directory; images are cached by relative path."""

    def __init__(self, data_cfg, base=None):
        self.cfg = data_cfg
        root = Path(data_cfg.root)
        self.root = root if root.is_absolute() or base is None else Path(base) / root
        _need(self.root)
        self._images = {}

    def path(self, key) -> Path:
        return self.root / getattr(self.cfg, key)

    def image(self, rel) -> np.ndarray:
        if rel not in self._images:
            self._images[rel] = load_image(self.root, rel)
        return self._images[rel]

    # ---- per-file readers ---------------------------------------------------

    def texts(self):
        return read_lines(self.path("texts"))

    def images(self):
        return [self.image(r) for r in read_lines(self.path("images"))]

    def pairs(self):
        rows = read_tsv(self.path("pairs"))
        return [self.image(r[0]) for r in rows], [r[1] for r in rows]

    def vqa(self):
        rows = read_tsv(self.path("vqa"))
        return [self.image(r[0]) for r in rows], [r[1] for r in rows], [r[2] for r in rows]

    def nlvr(self):
        rows = read_tsv(self.path("nlvr"))
        return ([self.image(r[0]) for r in rows], [self.image(r[1]) for r in rows],
                [r[2] for r in rows], [int(r[3]) for r in rows])

    def labels(self):
        return read_lines(self.path("labels"))

    def classify(self):
        rows = read_tsv(self.path("classify"))
        return [self.image(r[0]) for r in rows], [r[1] for r in rows]

    def captions(self):
        rows = read_tsv(self.path("captions"))
        return [self.image(r[0]) for r in rows], [r[1] for r in rows]

    def all_text(self):
        """Every line of text in the corpus, for building a vocabulary."""
        out = []
        for key, cols in (("texts", None), ("pairs", [1]), ("vqa", [1, 2]), ("nlvr", [2]),
                          ("labels", None), ("captions", [1])):
            p = self.path(key)
            if not p.exists():
                continue
            if cols is None:
                out += read_lines(p)
            else:
                out += [r[c] for r in read_tsv(p) for c in cols]
        return out


def build_vocab(corpus: Corpus, max_size: int) -> mdm.Vocab:
    return mdm.Vocab.build(corpus.all_text(), max_size=max_size)


def vocab_words(vocab: mdm.Vocab) -> list:
    return vocab.tokens[mdm.BYTE_BASE + mdm.NUM_BYTES:]
