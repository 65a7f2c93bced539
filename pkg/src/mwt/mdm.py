"""Inputs for masked data modeling: tokenizers, mask plans, batch assembly."""
from __future__ import annotations

import json
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .multiway import IMAGE_CLS, IMAGE_MASK, ModalityTag

PAD, CLS, SEP, MASK = 0, 1, 2, 3
SPECIALS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]")
BYTE_BASE = len(SPECIALS)
NUM_BYTES = 256
_PIECE = re.compile(r"\s+|\w+|[^\w\s]")

KINDS = ("mono-text", "mono-image", "pair")


# --------------------------------------------------------------------------
# text
# --------------------------------------------------------------------------


class Vocab:
    """Word-level vocabulary with a 256-entry byte fallback.

    Pieces are whitespace runs, word runs, or single punctuation characters,
    so concatenating pieces always reproduces the input exactly.
    """

    def __init__(self, words: Sequence[str] = ()):
        self.tokens = list(SPECIALS) + [f"<0x{b:02X}>" for b in range(NUM_BYTES)] + list(words)
        self.index = {w: i for i, w in enumerate(words, start=BYTE_BASE + NUM_BYTES)}

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def build(cls, lines: Iterable[str], max_size: int | None = None, min_count: int = 1):
        counts = Counter(p for line in lines for p in _PIECE.findall(line))
        words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        if max_size is not None:
            words = words[: max(0, max_size - BYTE_BASE - NUM_BYTES)]
        return cls(words)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for i, tok in enumerate(self.tokens):
                f.write(f"{i}\t{json.dumps(tok, ensure_ascii=False)}\n")

    @classmethod
    def load(cls, path):
        words = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                i, _, tok = line.rstrip("\n").partition("\t")
                if int(i) != lineno - 1:
                    raise ValueError(f"{path}:{lineno}: expected id {lineno - 1}, got {i}")
                if lineno > BYTE_BASE + NUM_BYTES:
                    words.append(json.loads(tok))
        return cls(words)

    def encode_pieces(self, text: str) -> list:
        ids = []
        for piece in _PIECE.findall(text):
            i = self.index.get(piece)
            if i is None:
                ids.extend(BYTE_BASE + b for b in piece.encode("utf-8"))
            else:
                ids.append(i)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out, buf = [], bytearray()
        for i in ids:
            i = int(i)
            if i < BYTE_BASE:
                continue
            if i < BYTE_BASE + NUM_BYTES:
                buf.append(i - BYTE_BASE)
                continue
            if buf:
                out.append(buf.decode("utf-8", errors="replace"))
                buf = bytearray()
            out.append(self.tokens[i])
        if buf:
            out.append(buf.decode("utf-8", errors="replace"))
        return "".join(out)


@dataclass
class TokenSequence:
    ids: np.ndarray
    tags: np.ndarray
    kind: str
    patches: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.tags = np.asarray(self.tags, dtype=np.int8)
        if self.ids.shape != self.tags.shape:
            raise ValueError(f"ids {self.ids.shape} and tags {self.tags.shape} differ")
        if self.kind not in KINDS:
            raise ValueError(f"unknown sequence kind {self.kind!r}")

    def __len__(self):
        return len(self.ids)

    @property
    def n_image(self):
        return int((self.tags == ModalityTag.VISION).sum())

    def image_part(self):
        n = self.n_image
        return TokenSequence(self.ids[:n], self.tags[:n], "mono-image", self.patches)

    def text_part(self):
        n = self.n_image
        return TokenSequence(self.ids[n:], self.tags[n:], "mono-text")


def tokenize_text(text: str, vocab: Vocab) -> TokenSequence:
    ids = [CLS] + vocab.encode_pieces(text) + [SEP]
    return TokenSequence(ids, [ModalityTag.LANGUAGE] * len(ids), "mono-text")


def detokenize(seq, vocab: Vocab) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    return vocab.decode(ids)


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

_RASTER_HEADER = struct.Struct("<III")


def write_raster(path, image: np.ndarray):
    """Raw raster: little-endian u32 width, height, channels, then HWC u8 bytes."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    with open(path, "wb") as f:
        f.write(_RASTER_HEADER.pack(w, h, c))
        f.write(img.tobytes())


def read_raster(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _RASTER_HEADER.size:
        raise ValueError(f"{path}: truncated raster header")
    w, h, c = _RASTER_HEADER.unpack_from(raw)
    body = raw[_RASTER_HEADER.size:]
    if len(body) != w * h * c:
        raise ValueError(f"{path}: expected {w * h * c} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).copy()


def image_to_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """HWC u8 image -> (cells, p*p*C) float32 features in [0, 1], row-major cells."""
    img = np.asarray(image)
    h, w, c = img.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = img.reshape(gh, patch_size, gw, patch_size, c).transpose(0, 2, 1, 3, 4)
    return (x.reshape(gh * gw, -1).astype(np.float32) / 255.0)


@dataclass
class VisualCodebook:
    vectors: np.ndarray
    projection: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if self.vectors.shape[0] < 2:
            raise ValueError("codebook needs at least 2 entries")
        self._projected = self.vectors @ self.projection

    @classmethod
    def create(cls, size: int, feature_dim: int, seed: int = 0, proj_dim: int = 16):
        rng = np.random.default_rng(seed)
        vectors = rng.uniform(0.0, 1.0, size=(size, feature_dim))
        projection = rng.standard_normal((feature_dim, proj_dim)) / math.sqrt(proj_dim)
        return cls(vectors, projection, seed)

    @property
    def size(self):
        return self.vectors.shape[0]

    @property
    def feature_dim(self):
        return self.vectors.shape[1]


def visual_tokenize(patch_pixels: np.ndarray, codebook: VisualCodebook) -> np.ndarray:
    """Nearest codebook entry after a fixed random projection; ties -> lowest id."""
    x = np.asarray(patch_pixels, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.shape[-1] != codebook.feature_dim:
        raise ValueError(f"patch feature dim {x.shape[-1]} != codebook dim {codebook.feature_dim}")
    z = x @ codebook.projection
    c = codebook._projected
    d = (z * z).sum(1, keepdims=True) - 2 * z @ c.T + (c * c).sum(1)[None]
    return np.argmin(d, axis=1)


def image_sequence(image: np.ndarray, codebook: VisualCodebook, patch_size: int) -> TokenSequence:
    patches = image_to_patches(image, patch_size)
    ids = np.concatenate([[IMAGE_CLS], visual_tokenize(patches, codebook)])
    return TokenSequence(ids, [ModalityTag.VISION] * len(ids), "mono-image", patches)


def pair_sequence(image_seq: TokenSequence, text_seq: TokenSequence) -> TokenSequence:
    return TokenSequence(np.concatenate([image_seq.ids, text_seq.ids]),
                         np.concatenate([image_seq.tags, text_seq.tags]),
                         "pair", image_seq.patches)


# --------------------------------------------------------------------------
# mask planning
# --------------------------------------------------------------------------


@dataclass
class MaskPlan:
    positions: np.ndarray
    mask_token_id: int
    targets: np.ndarray | None = None
    blocks: list = field(default_factory=list)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)

    def __len__(self):
        return len(self.positions)

    def shifted(self, offset: int) -> "MaskPlan":
        return replace(self, positions=self.positions + offset)


def mask_count(length: int, ratio: float) -> int:
    # round half up, at least one
    return max(1, int(math.floor(length * ratio + 0.5)))


def plan_text_mask(length: int, ratio: float, seed: int, offset: int = 1) -> MaskPlan:
    """Choose ``round(length*ratio)`` (>= 1) of the ``length`` non-special positions.

    Positions are sequence indices starting at ``offset`` (the CLS slot is 0).
    """
    if length < 1:
        raise ValueError("no maskable text positions")
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio {ratio} outside (0, 1)")
    rng = np.random.default_rng(seed)
    n = min(length, mask_count(length, ratio))
    pos = np.sort(rng.choice(length, size=n, replace=False)) + offset
    return MaskPlan(pos, MASK)


def block_shapes(rows: int, cols: int, min_block: int = 16, min_aspect: float = 0.3):
    min_area = min(min_block, rows * cols)
    return [(h, w) for h in range(1, rows + 1) for w in range(1, cols + 1)
            if h * w >= min_area and min_aspect - 1e-9 <= h / w <= 1 / min_aspect + 1e-9]


def max_block_overshoot(rows: int, cols: int, min_block: int = 16, min_aspect: float = 0.3) -> int:
    shapes = block_shapes(rows, cols, min_block, min_aspect)
    smallest = min(h * w for h, w in shapes)
    return max(min(min_block, rows * cols), smallest) - 1


def plan_block_mask(rows: int, cols: int, ratio: float, seed: int, min_block: int = 16,
                    min_aspect: float = 0.3, offset: int = 1, max_attempts: int = 100) -> MaskPlan:
    """Union of random rectangles covering at least ``floor(ratio*cells)`` patches.

    Each rectangle has area >= min_block (or the grid area if smaller) and
    height/width within [min_aspect, 1/min_aspect]. ``blocks`` records every
    placed rectangle as (top, left, height, width).
    """
    if rows < 2 or cols < 2:
        raise ValueError(f"grid {rows}x{cols} smaller than 2x2")
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio {ratio} outside (0, 1)")
    cells = rows * cols
    target = int(math.floor(ratio * cells))
    min_area = min(min_block, cells)
    shapes = block_shapes(rows, cols, min_block, min_aspect)
    if not shapes:
        raise ValueError(f"no rectangle of area >= {min_area} fits a {rows}x{cols} grid")
    if target > cells - min_area:
        raise ValueError(f"ratio {ratio} needs {target} of {cells} patches; blocks of area "
                         f">= {min_area} could leave no patch visible")
    smallest = min(shapes, key=lambda s: (s[0] * s[1], s))
    admissible = set(shapes)
    rng = np.random.default_rng(seed)
    log_lo, log_hi = math.log(min_aspect), -math.log(min_aspect)
    mask = np.zeros((rows, cols), dtype=bool)
    blocks = []
    count = 0
    while count < target:
        cap = max(target - count, min_area)
        placed = False
        for _ in range(max_attempts):
            area = rng.uniform(min_area, cap)
            aspect = math.exp(rng.uniform(log_lo, log_hi))
            h = int(round(math.sqrt(area * aspect)))
            w = int(round(math.sqrt(area / aspect)))
            if (h, w) not in admissible:
                continue
            top = int(rng.integers(0, rows - h + 1))
            left = int(rng.integers(0, cols - w + 1))
            new = int((~mask[top:top + h, left:left + w]).sum())
            if 0 < new <= cap:
                placed = True
                break
        if not placed:
            # anchor the smallest admissible block on a random visible cell
            h, w = smallest
            free = np.flatnonzero(~mask)
            r, c = divmod(int(free[rng.integers(len(free))]), cols)
            top = int(rng.integers(max(0, r - h + 1), min(r, rows - h) + 1))
            left = int(rng.integers(max(0, c - w + 1), min(c, cols - w) + 1))
            new = int((~mask[top:top + h, left:left + w]).sum())
        mask[top:top + h, left:left + w] = True
        blocks.append((top, left, h, w))
        count += new
    pos = np.flatnonzero(mask.reshape(-1)) + offset
    return MaskPlan(pos, IMAGE_MASK, blocks=blocks)


def apply_mask(sequence: TokenSequence, plan: MaskPlan):
    """Returns (corrupted sequence, targets). Image slots get the mask marker."""
    pos = plan.positions
    n = len(sequence)
    if pos.size and (pos.min() < 0 or pos.max() >= n):
        raise IndexError(f"mask position outside sequence of length {n}")
    ids = sequence.ids.copy()
    targets = ids[pos].copy()
    is_img = sequence.tags[pos] == ModalityTag.VISION
    ids[pos] = np.where(is_img, IMAGE_MASK, MASK)
    return replace(sequence, ids=ids), targets


def restore(sequence: TokenSequence, positions, targets) -> TokenSequence:
    ids = sequence.ids.copy()
    ids[np.asarray(positions, dtype=np.int64)] = targets
    return replace(sequence, ids=ids)


@dataclass
class MaskSettings:
    text_ratio: float = 0.15
    pair_text_ratio: float = 0.5
    image_ratio: float = 0.4
    mask_pair_images: bool = True
    min_block: int = 16
    min_aspect: float = 0.3


def plan_for(sequence: TokenSequence, settings: MaskSettings, seed: int,
             grid: tuple) -> MaskPlan:
    """Mask plan for one pretraining sample at the ratio for its kind."""
    ss = np.random.SeedSequence(seed)
    s_img, s_txt = (int(x) for x in ss.generate_state(2))
    rows, cols = grid
    if sequence.kind == "mono-text":
        return plan_text_mask(len(sequence) - 2, settings.text_ratio, s_txt)
    if sequence.kind == "mono-image":
        return plan_block_mask(rows, cols, settings.image_ratio, s_img,
                               settings.min_block, settings.min_aspect)
    n_img = sequence.n_image
    text = plan_text_mask(len(sequence) - n_img - 2, settings.pair_text_ratio, s_txt,
                          offset=n_img + 1)
    if not settings.mask_pair_images:
        return text
    img = plan_block_mask(rows, cols, settings.image_ratio, s_img,
                          settings.min_block, settings.min_aspect)
    return MaskPlan(np.concatenate([img.positions, text.positions]), MASK, blocks=img.blocks)


# --------------------------------------------------------------------------
# batch assembly
# --------------------------------------------------------------------------

_KIND_CODE = {"mono-text": 0, "mono-image": 1, "pair": 2}


def sample_seed(global_seed: int, epoch: int, sample_index: int, kind: str = "mono-text") -> int:
    ss = np.random.SeedSequence([int(global_seed), int(epoch), _KIND_CODE[kind], int(sample_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class Sample:
    kind: str
    index: int
    seed: int
    item: object


@dataclass
class Batch:
    texts: list
    images: list
    pairs: list

    def __len__(self):
        return len(self.texts) + len(self.images) + len(self.pairs)

    def counts(self):
        return len(self.texts), len(self.images), len(self.pairs)


def compose_batch(text_stream: Sequence, image_stream: Sequence, pair_stream: Sequence,
                  quotas=(8, 8, 8), seed: int = 0, epoch: int = 0, step: int = 0,
                  allow_repeat: bool = True) -> Batch:
    """Exactly ``quotas`` samples of (text, image, pair) for ``step``.

    Sample ``i`` of a kind at this step has index ``step*quota + i``; its
    seed depends only on (seed, epoch, kind, index).
    """
    if any(q < 0 for q in quotas) or sum(quotas) == 0:
        raise ValueError(f"quotas must be non-negative and not all zero, got {quotas}")
    out = []
    for kind, stream, q in zip(KINDS, (text_stream, image_stream, pair_stream), quotas):
        items = []
        if q and not len(stream):
            raise ValueError(f"{kind} stream is empty but quota is {q}")
        for i in range(q):
            index = step * q + i
            if index >= len(stream) and not allow_repeat:
                raise IndexError(f"{kind} stream exhausted at sample {index} (size {len(stream)})")
            items.append(Sample(kind, index, sample_seed(seed, epoch, index, kind),
                                stream[index % len(stream)]))
        out.append(items)
    return Batch(*out)
