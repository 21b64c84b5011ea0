"""Synthetic person-search scenes.

Each person is a procedural glyph filling its box: head band, patterned
torso, legs and a bordered "bag" mark on one side edge. The annotated box
covers all of it, so a box hugging only the body drops the bag.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numgrid import derive_seed, make_rng, read_ppm, write_ppm
from .evaluation import iou as box_iou
from .roi import BBox

SPLITS = ("train", "query", "gallery")

HEAD_COLORS = np.array([[0.95, 0.80, 0.60], [0.45, 0.30, 0.20], [0.90, 0.90, 0.30], [0.20, 0.20, 0.25]])
TORSO_COLORS = np.array([[0.85, 0.15, 0.15], [0.15, 0.35, 0.85], [0.15, 0.70, 0.25], [0.95, 0.95, 0.95],
                         [0.60, 0.20, 0.70], [0.95, 0.55, 0.10]])
LEG_COLORS = np.array([[0.10, 0.10, 0.45], [0.75, 0.75, 0.75], [0.55, 0.35, 0.15], [0.10, 0.40, 0.10]])
MARK_COLORS = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
PATTERNS = ("hstripe", "vstripe", "checker")
# (base color, alternate color, pattern) indices into TORSO_COLORS / PATTERNS
TORSO_STYLES = ((0, 3, "hstripe"), (1, 5, "checker"), (2, 4, "vstripe"), (5, 1, "hstripe"))
MARK_BORDER = 3
MARK_WIDTH = 0.28  # of box width
MARK_ROWS = (0.3, 0.62)  # of box height
HEAD_FRAC, TORSO_FRAC = 0.2, 0.6  # band ends as fractions of box height
SIDES = ("left", "right")


@dataclass(frozen=True)
class IdentitySpec:
    id: int
    texture_seed: int
    head: int
    torso: int
    torso_alt: int
    pattern: str
    period: float  # stripe period as a fraction of body height
    legs: int
    mark: int


@dataclass
class Annotation:
    box: BBox
    identity: int


@dataclass
class SceneSet:
    scenes: list[np.ndarray]
    annotations: list[list[Annotation]]
    splits: list[str]
    distractors: list[list[BBox]] = field(default_factory=list)

    def __len__(self):
        return len(self.scenes)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def instances(self, split: str | None = None):
        """Yield ``(scene_index, Annotation)`` pairs in file order."""
        for i, anns in enumerate(self.annotations):
            if split is None or self.splits[i] == split:
                for a in anns:
                    yield i, a


def identity_specs(n_ids: int, seed: int) -> list[IdentitySpec]:
    """Balanced part combinations over head, torso, legs and bag.

    With ``L`` levels per part the candidates are the ``L**3`` combinations
    whose level indices sum to 0 mod ``L``: every part splits the identities
    evenly and any two identities differ in at least two parts. Every region
    of the glyph therefore carries identity evidence.
    """
    rng = make_rng(derive_seed(seed, 1))
    levels = 2
    while levels ** 3 < n_ids:
        levels += 1
    heads = rng.permutation(len(HEAD_COLORS))[:levels]
    torsos = rng.permutation(len(TORSO_STYLES))[:levels]
    legs = rng.permutation(len(LEG_COLORS))[:levels]
    marks = rng.permutation(len(MARK_COLORS))[:levels]
    combos = [c for c in itertools.product(range(levels), repeat=4) if sum(c) % levels == 0]
    combos = [combos[k] for k in sorted(rng.permutation(len(combos))[:n_ids])]
    specs = []
    for i, (h, t, l, m) in enumerate(combos):
        torso, alt, pattern = TORSO_STYLES[torsos[t]]
        specs.append(IdentitySpec(i, derive_seed(seed, 2, i), int(heads[h]), torso, alt, pattern,
                                  1 / 4, int(legs[l]), int(marks[m])))
    return specs


def background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Tilted flat color, faint gray rectangles and pixel noise."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.35, 0.6, size=3)
    tilt = rng.uniform(-0.15, 0.15, size=(2, 3))
    img = base + xx[..., None] * tilt[0] + yy[..., None] * tilt[1]
    for _ in range(int(rng.integers(6, 12))):
        ch, cw = rng.integers(6, 40, size=2)
        y, x = rng.integers(0, h - ch), rng.integers(0, w - cw)
        gray = rng.uniform(0.25, 0.75)
        img[y:y + ch, x:x + cw] = 0.7 * img[y:y + ch, x:x + cw] + 0.3 * (gray + rng.uniform(-0.08, 0.08, 3))
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def render_person(canvas: np.ndarray, box: BBox, spec: IdentitySpec, mark_side: str = "right") -> None:
    """Paint ``spec`` so it fills ``box`` exactly (integer corners, inclusive).

    Head band, patterned torso and two legs span the full box width, so a
    ground-truth crop holds no background. The bag sits on one side edge.
    """
    if mark_side not in SIDES:
        raise ValueError(f"mark_side must be one of {SIDES}")
    x1, y1, x2, y2 = (int(round(v)) for v in box.as_tuple())
    w, h = x2 - x1 + 1, y2 - y1 + 1
    head_end = y1 + int(round(HEAD_FRAC * h))
    torso_end = y1 + int(round(TORSO_FRAC * h))
    canvas[y1:head_end, x1:x2 + 1] = HEAD_COLORS[spec.head]

    ty = np.arange(head_end, torso_end)[:, None]
    tx = np.arange(x1, x2 + 1)[None, :]
    half = max(1.0, spec.period * h / 2)
    if spec.pattern == "hstripe":
        sel = ((ty - y1) // half) % 2 + 0 * tx
    elif spec.pattern == "vstripe":
        sel = 0 * ty + ((tx - x1) // half) % 2
    else:
        sel = ((ty - y1) // half + (tx - x1) // half) % 2
    canvas[head_end:torso_end, x1:x2 + 1] = np.where(
        sel[..., None] > 0, TORSO_COLORS[spec.torso_alt], TORSO_COLORS[spec.torso])

    leg_w = (w + 1) // 2
    canvas[torso_end:y2 + 1, x1:x1 + leg_w] = LEG_COLORS[spec.legs]
    canvas[torso_end:y2 + 1, x2 + 1 - leg_w:x2 + 1] = LEG_COLORS[spec.legs]

    mark_w = max(2 * MARK_BORDER + 2, int(round(MARK_WIDTH * w)))
    mx1 = x2 + 1 - mark_w if mark_side == "right" else x1
    my1, my2 = y1 + int(round(MARK_ROWS[0] * h)), y1 + int(round(MARK_ROWS[1] * h))
    canvas[my1:my2, mx1:mx1 + mark_w] = 0.0
    b = MARK_BORDER
    canvas[my1 + b:my2 - b, mx1 + b:mx1 + mark_w - b] = MARK_COLORS[spec.mark]


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    out = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    out = sum(t * out[k:k + img.shape[0]] for k, t in enumerate(taps))
    out = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    return sum(t * out[:, k:k + img.shape[1]] for k, t in enumerate(taps))


def _overlap_fraction(a: BBox, b: BBox) -> float:
    """Fraction of ``a``'s area covered by ``b``."""
    iw = min(a.m2, b.m2) - max(a.m1, b.m1)
    ih = min(a.n2, b.n2) - max(a.n1, b.n1)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih / (a.width * a.height)


def _touches(a: BBox, b: BBox, gap: float = 2.0) -> bool:
    return not (a.m2 + gap < b.m1 or b.m2 + gap < a.m1 or a.n2 + gap < b.n1 or b.n2 + gap < a.n1)


def _random_box(rng, size, heights, margin=2):
    h_img, w_img = size
    h = int(rng.integers(heights[0], heights[1] + 1))
    w = h // 2
    if h + 2 * margin > h_img or w + 2 * margin > w_img:
        raise ValueError(f"canvas {size} too small for a {h}x{w} person")
    y = int(rng.integers(margin, h_img - h - margin + 1))
    x = int(rng.integers(margin, w_img - w - margin + 1))
    return BBox(x, y, x + w - 1, y + h - 1)


def _split_for(i: int) -> str:
    # interleaved so every split sees the whole range of scene seeds
    return ("train", "train", "query", "gallery")[i % 4]


def synth(n_scenes: int = 64, n_ids: int = 8, distractor_rate: float = 0.3, overlap_rate: float = 0.3,
          seed: int = 0, size=(256, 256), heights=(56, 88), max_instances: int = 4,
          blur: float = 4.5) -> SceneSet:
    if n_ids < 2:
        raise ValueError("need at least 2 identities")
    if not (0 <= distractor_rate <= 1 and 0 <= overlap_rate <= 1):
        raise ValueError("rates must lie in [0, 1]")
    specs = identity_specs(n_ids, seed)
    order_rng = make_rng(derive_seed(seed, 3))
    queues: dict[str, list[int]] = {s: [] for s in SPLITS}

    def next_identity(split, taken):
        q = queues[split]
        for k, ident in enumerate(q):
            if ident not in taken:
                return q.pop(k)
        q.extend(order_rng.permutation(n_ids).tolist())
        return next_identity(split, taken)

    scenes, annotations, splits, distractors = [], [], [], []
    for i in range(n_scenes):
        rng = make_rng(derive_seed(seed, 4, i))
        split = _split_for(i)
        canvas = background(size[0], size[1], rng)
        n_inst = int(rng.integers(1, max_instances + 1))
        boxes: list[BBox] = []
        occupied: list[BBox] = []
        for _ in range(n_inst):
            for _attempt in range(200):
                b = _random_box(rng, size, heights)
                if not any(_touches(b, o) for o in occupied):
                    break
            else:
                raise ValueError(f"scene {i}: canvas too small for {n_inst} instances")
            boxes.append(b)
            occupied.append(b)
        idents = []
        for _ in boxes:
            idents.append(next_identity(split, idents))

        placed_d: list[BBox] = []
        # overlapping distractors sit behind their person and cover >= 20% of its box
        for b in boxes:
            if rng.random() >= overlap_rate:
                continue
            for _attempt in range(200):
                dh = int(rng.integers(heights[0], heights[1] + 1))
                dw = dh // 2
                dx = b.m1 + rng.choice([-1, 1]) * rng.uniform(0.35, 0.6) * b.width
                dy = b.n1 + rng.uniform(-0.2, 0.2) * b.height
                x, y = int(round(dx)), int(round(dy))
                d = BBox(x, y, x + dw - 1, y + dh - 1)
                inside = d.m1 >= 0 and d.n1 >= 0 and d.m2 < size[1] and d.n2 < size[0]
                if (inside and _overlap_fraction(b, d) >= 0.2
                        and not any(_touches(d, o) for o in boxes if o is not b)):
                    placed_d.append(d)
                    break
        if rng.random() < distractor_rate:
            for _attempt in range(50):
                d = _random_box(rng, size, heights)
                if not any(_touches(d, o) for o in boxes + placed_d):
                    placed_d.append(d)
                    break
        for d in placed_d:
            render_person(canvas, d, specs[int(rng.integers(n_ids))], SIDES[int(rng.integers(2))])
        for b, ident in zip(boxes, idents):
            render_person(canvas, b, specs[ident], SIDES[int(rng.integers(2))])

        if blur > 0:
            canvas = gaussian_blur(canvas, blur)
        scenes.append(np.clip(canvas, 0.0, 1.0))
        annotations.append([Annotation(b, ident) for b, ident in zip(boxes, idents)])
        splits.append(split)
        distractors.append(placed_d)
    return SceneSet(scenes, annotations, splits, distractors)


def quantize(scenes: SceneSet) -> SceneSet:
    """Round intensities to the 8-bit levels a PPM round trip produces."""
    q = [np.rint(np.clip(s, 0, 1) * 255.0) / 255.0 for s in scenes.scenes]
    return SceneSet(q, scenes.annotations, scenes.splits, scenes.distractors)


ANNOTATION_FIELDS = ("scene", "x1", "y1", "x2", "y2", "id", "split")


def write_sceneset(scenes: SceneSet, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(scenes.scenes):
        write_ppm(out / f"scene_{i:04d}.ppm", img)
    with open(out / "annotations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_FIELDS)
        for i, anns in enumerate(scenes.annotations):
            for a in anns:
                writer.writerow([i, *(repr(float(v)) for v in a.box.as_tuple()), a.identity, scenes.splits[i]])
        # scenes without annotations still need their split recorded
        for i, anns in enumerate(scenes.annotations):
            if not anns:
                writer.writerow([i, "", "", "", "", "", scenes.splits[i]])


def read_sceneset(in_dir) -> SceneSet:
    src = Path(in_dir)
    paths = sorted(src.glob("scene_*.ppm"))
    if not paths:
        raise FileNotFoundError(f"no scene_*.ppm files in {src}")
    scenes = [read_ppm(p) for p in paths]
    annotations: list[list[Annotation]] = [[] for _ in paths]
    splits = ["gallery"] * len(paths)
    with open(src / "annotations.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            i = int(row["scene"])
            splits[i] = row["split"]
            if row["x1"] == "":
                continue
            box = BBox.of([row["x1"], row["y1"], row["x2"], row["y2"]])
            annotations[i].append(Annotation(box, int(row["id"])))
    return SceneSet(scenes, annotations, splits, [[] for _ in paths])
