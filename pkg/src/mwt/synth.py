"""Synthetic tri-modal corpus: small raster scenes with matching text.

Everything is a pure function of the seed. Images are 32x32 RGB u8, which
gives an 8x8 patch grid at patch size 4.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdm import write_raster

SIZE = 32
BACKGROUND = (40, 40, 40)
COLORS = {
    "red": (220, 30, 30),
    "green": (30, 200, 40),
    "blue": (40, 60, 230),
    "yellow": (230, 220, 40),
    "cyan": (40, 220, 220),
    "magenta": (210, 40, 210),
    "white": (240, 240, 240),
    "orange": (240, 140, 20),
}
COLOR_NAMES = list(COLORS)
QUADRANTS = ("top left", "top right", "bottom left", "bottom right")
SIZES = ("small", "big")
SHAPES = ("square", "cross")


def _canvas(rng, noise=6):
    img = np.empty((SIZE, SIZE, 3), dtype=np.int16)
    img[:] = BACKGROUND
    if noise:
        img += rng.integers(-noise, noise + 1, size=img.shape, dtype=np.int16)
    return img


def _finish(img):
    return np.clip(img, 0, 255).astype(np.uint8)


def _paint(img, color, top, left, h, w, shape="square"):
    rgb = np.asarray(COLORS[color], dtype=np.int16)
    if shape == "square":
        img[top:top + h, left:left + w] = rgb
    else:
        t3, l3 = h // 3, w // 3
        img[top + t3:top + h - t3, left:left + w] = rgb
        img[top:top + h, left + l3:left + w - l3] = rgb


@dataclass(frozen=True)
class Scene:
    color: str
    quadrant: str
    size: str
    shape: str = "square"

    def caption(self):
        return f"a {self.size} {self.color} {self.shape} in the {self.quadrant}"


def all_scenes(shapes=("square",)):
    return [Scene(c, q, s, sh) for c, q, s, sh in itertools.product(COLOR_NAMES, QUADRANTS, SIZES, shapes)]


def render_scene(scene: Scene, rng: np.random.Generator, jitter=2) -> np.ndarray:
    img = _canvas(rng)
    half = SIZE // 2
    side = 14 if scene.size == "big" else 8
    qi = QUADRANTS.index(scene.quadrant)
    top0, left0 = (qi // 2) * half, (qi % 2) * half
    slack = half - side
    top = top0 + int(np.clip(slack // 2 + rng.integers(-jitter, jitter + 1), 0, slack))
    left = left0 + int(np.clip(slack // 2 + rng.integers(-jitter, jitter + 1), 0, slack))
    _paint(img, scene.color, top, left, side, side, scene.shape)
    return _finish(img)


def random_scene(rng, shapes=("square",)) -> Scene:
    return Scene(COLOR_NAMES[rng.integers(8)], QUADRANTS[rng.integers(4)],
                 SIZES[rng.integers(2)], shapes[rng.integers(len(shapes))])


_TEMPLATES = (
    "the {c1} {s1} is left of the {c2} {s2} .",
    "a {z} {c1} {s1} sits in the {q} .",
    "there is a {c1} {s1} and a {c2} {s2} .",
    "the {q} holds a {z} {c1} {s1} .",
    "no {c1} {s1} is in the {q} .",
)


def random_sentence(rng) -> str:
    t = _TEMPLATES[rng.integers(len(_TEMPLATES))]
    return t.format(c1=COLOR_NAMES[rng.integers(8)], c2=COLOR_NAMES[rng.integers(8)],
                    s1=SHAPES[rng.integers(2)], s2=SHAPES[rng.integers(2)],
                    z=SIZES[rng.integers(2)], q=QUADRANTS[rng.integers(4)])


# ---- task generators -------------------------------------------------------

VQA_QUESTIONS = ("what color is dominant ?", "which color covers most of the image ?",
                 "what is the main color ?")


def vqa_sample(rng):
    """Image mostly one color with a few small patches of others; answer = main color."""
    answer = int(rng.integers(8))
    img = _canvas(rng)
    _paint(img, COLOR_NAMES[answer], 4, 4, 24, 24)
    for _ in range(2):
        other = COLOR_NAMES[int(rng.integers(8))]
        top, left = rng.integers(0, SIZE - 6, size=2)
        _paint(img, other, int(top), int(left), 6, 6)
    return _finish(img), VQA_QUESTIONS[rng.integers(len(VQA_QUESTIONS))], answer


NLVR_TEXTS = ("same", "different")


def nlvr_sample(rng, palette=4):
    """(image_a, image_b, text, label); label 1 when the text is true."""
    ca = int(rng.integers(palette))
    same = bool(rng.integers(2))
    cb = ca if same else int((ca + 1 + rng.integers(palette - 1)) % palette)
    qa = QUADRANTS[int(rng.integers(4))]
    img_a = render_scene(Scene(COLOR_NAMES[ca], qa, "big"), rng, jitter=0)
    img_b = render_scene(Scene(COLOR_NAMES[cb], qa, "big"), rng, jitter=0)
    says_same = bool(rng.integers(2))
    label = int(says_same == same)
    return img_a, img_b, NLVR_TEXTS[0 if says_same else 1], label


CLASS_LABELS = [f"{c} {s}" for c in ("red", "green", "blue", "yellow") for s in SHAPES]


def classify_sample(rng):
    k = int(rng.integers(len(CLASS_LABELS)))
    color, shape = CLASS_LABELS[k].split()
    scene = Scene(color, QUADRANTS[int(rng.integers(4))], "big", shape)
    return render_scene(scene, rng), k


COPY_COLORS = ("red", "green", "blue", "yellow")


def copy_tag(rng):
    return tuple(COPY_COLORS[int(i)] for i in rng.integers(len(COPY_COLORS), size=3))


def render_tag(tag, rng) -> np.ndarray:
    """Three vertical bands, one color per tag token, left to right."""
    img = _canvas(rng)
    for (a, b), color in zip(((0, 12), (12, 24), (24, 32)), tag):
        _paint(img, color, 4, a, 24, b - a)
    return _finish(img)


# ---- corpus on disk ----------------------------------------------------------


def write_corpus(out_dir, seed=0, n_texts=512, n_images=256, n_pairs=512, n_vqa=256,
                 n_nlvr=256, n_classify=256, n_captions=128):
    """Write every synthetic dataset the CLI reads. Returns the directory path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    counter = itertools.count()

    def save(img):
        rel = f"images/img_{next(counter):05d}.raw"
        write_raster(out / rel, img)
        return rel

    with open(out / "texts.txt", "w") as f:
        for _ in range(n_texts):
            f.write(random_sentence(rng) + "\n")
    with open(out / "images.txt", "w") as f:
        for _ in range(n_images):
            f.write(save(render_scene(random_scene(rng), rng)) + "\n")
    scenes = all_scenes()
    with open(out / "pairs.tsv", "w") as f:
        for i in range(n_pairs):
            sc = scenes[i % len(scenes)]
            f.write(f"{save(render_scene(sc, rng))}\t{sc.caption()}\n")
    with open(out / "vqa.tsv", "w") as f:
        for _ in range(n_vqa):
            img, q, a = vqa_sample(rng)
            f.write(f"{save(img)}\t{q}\t{COLOR_NAMES[a]}\n")
    with open(out / "nlvr.tsv", "w") as f:
        for _ in range(n_nlvr):
            a, b, t, y = nlvr_sample(rng)
            f.write(f"{save(a)}\t{save(b)}\t{t}\t{y}\n")
    (out / "labels.txt").write_text("\n".join(CLASS_LABELS) + "\n")
    with open(out / "classify.tsv", "w") as f:
        for _ in range(n_classify):
            img, k = classify_sample(rng)
            f.write(f"{save(img)}\t{CLASS_LABELS[k]}\n")
    with open(out / "captions.tsv", "w") as f:
        for _ in range(n_captions):
            tag = copy_tag(rng)
            f.write(f"{save(render_tag(tag, rng))}\t{' '.join(tag)}\n")
    return out
