"""Adversarial binding benchmarks and the synthetic two-shape corpus.

Also hosts the palette-based binding oracle that judges generated images
without a learned detector: every pixel is snapped to the nearest palette
colour, foreground blobs are matched to the expected shapes, and each
object's colour make-up decides correctness and leakage.
"""

from __future__ import annotations

import itertools
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .graph import EvalGraph
from .syntax import template_sentence
from .tokenizer import COLORS, SHAPES

PALETTE: Dict[str, Tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 80, 230),
    "yellow": (235, 215, 50),
    "white": (240, 240, 240),
}
BACKGROUND = (100, 100, 100)
SHAPE_ASPECT = {"circle": 1.0, "square": 1.0, "triangle": 1.0, "cross": 1.0, "bar": 2.2}


@dataclass(frozen=True)
class Quadruplet:
    attr1: str
    obj1: str
    attr2: str
    obj2: str

    def __post_init__(self):
        if self.obj1 == self.obj2:
            raise ValueError("objects must differ")
        if self.attr1 == self.attr2:
            raise ValueError("attributes must differ")

    def swapped(self) -> "Quadruplet":
        return Quadruplet(self.attr2, self.obj1, self.attr1, self.obj2)


@dataclass(frozen=True)
class AdversarialPair:
    sentence: str
    adversarial_sentence: str
    graph: EvalGraph
    adversarial_graph: EvalGraph

    def swapped(self) -> "AdversarialPair":
        return AdversarialPair(self.adversarial_sentence, self.sentence,
                               self.adversarial_graph, self.graph)


# -- benchmark mining ----------------------------------------------------

def _cooccurrence(corpus: dict) -> Counter:
    counts: Counter = Counter()
    for g in corpus.get("graphs", []):
        for obj in g.get("objects", []):
            name = obj["name"].strip().lower()
            for a in set(x.strip().lower() for x in obj.get("attributes", [])):
                counts[name, a] += 1
    return counts


def mine_quadruplets(corpus: dict, min_cooccurrence: int = 2) -> List[Quadruplet]:
    """Quadruplets whose two objects each occur with both attributes >= m times.

    A quadruplet and its attribute swap describe the same adversarial pair, so
    only one orientation is returned: the one with the more frequent binding.
    Sorted by descending total co-occurrence of the four (object, attribute)
    pairs.
    """
    counts = _cooccurrence(corpus)
    attrs_of: Dict[str, set] = {}
    for (o, a), c in counts.items():
        if c >= min_cooccurrence:
            attrs_of.setdefault(o, set()).add(a)
    found = []
    for o1, o2 in itertools.combinations(sorted(attrs_of), 2):
        shared = sorted(attrs_of[o1] & attrs_of[o2])
        for a1, a2 in itertools.combinations(shared, 2):
            if counts[o1, a1] + counts[o2, a2] < counts[o1, a2] + counts[o2, a1]:
                a1, a2 = a2, a1
            total = counts[o1, a1] + counts[o2, a2] + counts[o1, a2] + counts[o2, a1]
            found.append((-total, (a1, o1, a2, o2)))
    found.sort()
    return [Quadruplet(*q) for _, q in found]


def make_adversarial_pair(q: Quadruplet) -> AdversarialPair:
    g = EvalGraph(q.obj1, q.obj2, (q.attr1,), (q.attr2,))
    return AdversarialPair(
        template_sentence(q.attr1, q.obj1, q.attr2, q.obj2),
        template_sentence(q.attr2, q.obj1, q.attr1, q.obj2),
        g, g.swap_attributes())


def shapes_corpus(samples: Sequence["ShapesSample"]) -> dict:
    """Scene-graph corpus JSON (as a dict) describing rendered samples."""
    graphs = []
    for s in samples:
        g = s.graph
        rel = [{"s": 0, "p": g.relation, "o": 1}] if g.relation else []
        graphs.append({"objects": [{"name": g.obj1, "attributes": list(g.attrs1)},
                                   {"name": g.obj2, "attributes": list(g.attrs2)}],
                       "relations": rel})
    return {"graphs": graphs}


def benchmark_pairs(n_quadruplets: int = 100, min_cooccurrence: int = 2, corpus: dict = None,
                    seed: int = 0) -> List[AdversarialPair]:
    """The toy DAA-style benchmark mined from a synthetic shapes corpus."""
    if corpus is None:
        corpus = shapes_corpus(synth_shapes_dataset(size=2000, seed=seed))
    quads = mine_quadruplets(corpus, min_cooccurrence)[:n_quadruplets]
    return [make_adversarial_pair(q) for q in quads]


# -- rendering -----------------------------------------------------------

def shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    """Boolean (h, w) mask of ``shape`` filling an h x w box."""
    yy, xx = np.mgrid[0:h, 0:w]
    y = (yy + 0.5) / h  # in (0, 1)
    x = (xx + 0.5) / w
    if shape in ("square", "bar"):
        return np.ones((h, w), dtype=bool)
    if shape == "circle":
        return (x - 0.5) ** 2 + (y - 0.5) ** 2 <= 0.25
    if shape == "triangle":
        return np.abs(x - 0.5) <= y / 2
    if shape == "cross":
        return (np.abs(x - 0.5) <= 1 / 6) | (np.abs(y - 0.5) <= 1 / 6)
    raise ValueError(f"unknown shape {shape!r}")


def _box_size(shape: str, size: int) -> Tuple[int, int]:
    if shape == "bar":
        return max(3, int(round(size / SHAPE_ASPECT["bar"]))), size + 2
    return size, size


@dataclass
class ShapesSample:
    image: np.ndarray  # (S, S, 3) uint8
    caption: str
    graph: EvalGraph
    boxes: Tuple[Tuple[int, int, int, int], ...]  # (y0, x0, y1, x1) per object
    colors: Tuple[str, str]
    shapes: Tuple[str, str]

    def to_json(self) -> dict:
        return {"caption": self.caption, "graph": self.graph.to_dict(),
                "boxes": [list(b) for b in self.boxes], "colors": list(self.colors),
                "shapes": list(self.shapes)}


def spatial_relation(box1, box2) -> str:
    cy1, cx1 = (box1[0] + box1[2]) / 2, (box1[1] + box1[3]) / 2
    cy2, cx2 = (box2[0] + box2[2]) / 2, (box2[1] + box2[3]) / 2
    if abs(cx1 - cx2) >= abs(cy1 - cy2):
        return "left" if cx1 < cx2 else "right"
    return "above" if cy1 < cy2 else "below"


def render(shapes: Sequence[str], colors: Sequence[str], boxes, image_size: int = 32) -> np.ndarray:
    img = np.empty((image_size, image_size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for shape, color, (y0, x0, y1, x1) in zip(shapes, colors, boxes):
        m = shape_mask(shape, y1 - y0, x1 - x0)
        img[y0:y1, x0:x1][m] = PALETTE[color]
    return img


def _overlap(a, b, gap: int) -> bool:
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def sample_scene(rng: np.random.Generator, shape_vocab=SHAPES, color_vocab=COLORS,
                 image_size: int = 32, size_range=None, gap: int = 1, max_tries: int = 200,
                 shapes=None, colors=None, same_color: float = 0.0) -> ShapesSample:
    if size_range is None:
        # 9..13 px on the 32 px canvas, scaled for other sizes
        size_range = (max(3, round(9 * image_size / 32)), max(3, round(13 * image_size / 32)))
    if shapes is None:
        s1, s2 = rng.choice(len(shape_vocab), size=2, replace=False)
        shapes = (shape_vocab[s1], shape_vocab[s2])
    if colors is None and same_color > 0 and rng.random() < same_color:
        c = color_vocab[int(rng.integers(len(color_vocab)))]
        colors = (c, c)
    if colors is None:
        c1, c2 = rng.choice(len(color_vocab), size=2, replace=False)
        colors = (color_vocab[c1], color_vocab[c2])
    for _ in range(max_tries):
        boxes = []
        for sh in shapes:
            h, w = _box_size(sh, int(rng.integers(size_range[0], size_range[1] + 1)))
            if max(h, w) >= image_size - 1:
                raise RuntimeError(f"a {h}x{w} {sh} does not fit a {image_size}px canvas")
            y0 = int(rng.integers(1, image_size - h))
            x0 = int(rng.integers(1, image_size - w))
            boxes.append((y0, x0, y0 + h, x0 + w))
        if not _overlap(boxes[0], boxes[1], gap):
            break
    else:
        raise RuntimeError(f"could not place {shapes} without overlap in {max_tries} tries")
    img = render(shapes, colors, boxes, image_size)
    graph = EvalGraph(shapes[0], shapes[1], (colors[0],), (colors[1],),
                      spatial_relation(boxes[0], boxes[1]))
    return ShapesSample(img, template_sentence(colors[0], shapes[0], colors[1], shapes[1]),
                        graph, tuple(boxes), tuple(colors), tuple(shapes))


def synth_shapes_dataset(shape_vocab: Sequence[str] = SHAPES, color_vocab: Sequence[str] = COLORS,
                         size: int = 1000, seed: int = 0, image_size: int = 32,
                         same_color: float = 0.0) -> List[ShapesSample]:
    """``size`` independent two-shape scenes; sample i is seeded by ``(seed, i)``.

    ``same_color`` is the probability that both shapes share one colour. Such
    scenes carry no colour cue for telling the shapes apart, so a model
    trained on them has to ground the nouns themselves.
    """
    if len(shape_vocab) < 2 or len(color_vocab) < 2:
        raise ValueError("need at least two shapes and two colours")
    for c in color_vocab:
        if c not in PALETTE:
            raise ValueError(f"colour {c!r} is not in the rendering palette")
    if not 0 <= same_color <= 1:
        raise ValueError("same_color must lie in [0, 1]")
    return [sample_scene(np.random.default_rng([seed, i]), tuple(shape_vocab), tuple(color_vocab),
                         image_size, same_color=same_color)
            for i in range(size)]


def save_dataset(samples: Sequence[ShapesSample], directory: Union[str, Path]) -> Path:
    """PNG per sample plus ``metadata.jsonl``."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        name = f"{i:06d}.png"
        Image.fromarray(s.image).save(directory / name)
        lines.append(json.dumps(dict(s.to_json(), image=name)))
    (directory / "metadata.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    return directory


def load_dataset(directory: Union[str, Path]) -> List[ShapesSample]:
    from PIL import Image

    directory = Path(directory)
    out = []
    for line in (directory / "metadata.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        img = np.asarray(Image.open(directory / d["image"]).convert("RGB"))
        out.append(ShapesSample(img, d["caption"], EvalGraph.from_dict(d["graph"]),
                                tuple(tuple(b) for b in d["boxes"]), tuple(d["colors"]),
                                tuple(d["shapes"])))
    return out


# -- binding oracle ------------------------------------------------------

@dataclass
class OracleResult:
    present: Tuple[bool, bool]
    correct: Tuple[bool, bool]
    leakage: Tuple[bool, bool]
    dominant: Tuple[Optional[str], Optional[str]] = (None, None)

    @property
    def both_correct(self) -> bool:
        return all(self.correct)

    @property
    def one_correct(self) -> bool:
        return any(self.correct)

    @property
    def leaked(self) -> bool:
        return any(self.leakage)


def quantize(image: np.ndarray, palette: Dict[str, Tuple[int, int, int]] = PALETTE) -> np.ndarray:
    """Index of the nearest palette colour per pixel; 0 is the background."""
    ref = np.array([BACKGROUND, *palette.values()], dtype=np.float32)
    d = ((image[..., None, :].astype(np.float32) - ref) ** 2).sum(-1)
    return d.argmin(-1)


def shape_score(component: np.ndarray, shape: str) -> float:
    """Template IoU inside the blob's bounding box, penalised for aspect mismatch."""
    ys, xs = np.nonzero(component)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    crop = component[y0:y1, x0:x1]
    tmpl = shape_mask(shape, y1 - y0, x1 - x0)
    iou = (crop & tmpl).sum() / max((crop | tmpl).sum(), 1)
    aspect = (x1 - x0) / (y1 - y0)
    return float(iou - 0.5 * abs(np.log(aspect / SHAPE_ASPECT[shape])))


def binding_oracle(
    image: np.ndarray,
    graph: EvalGraph,
    boxes: Optional[Sequence[Tuple[int, int, int, int]]] = None,
    palette: Dict[str, Tuple[int, int, int]] = PALETTE,
    image_size: Optional[int] = None,
    min_area: int = 8,
    min_shape_score: float = 0.3,
    leak_fraction: float = 0.1,
) -> OracleResult:
    """Judge whether each object carries its own colour and not the other's.

    With ground-truth ``boxes`` the objects are read from their boxes;
    otherwise foreground blobs are matched to the two expected shapes.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {image.shape}")
    if image_size is not None and image.shape[:2] != (image_size, image_size):
        raise ValueError(f"image is {image.shape[:2]}, expected {image_size}x{image_size}")
    names = ["background", *palette]
    q = quantize(image, palette)
    expected = (graph.attrs1[0] if graph.attrs1 else None, graph.attrs2[0] if graph.attrs2 else None)
    fg = q > 0

    regions: List[Optional[np.ndarray]] = [None, None]
    if boxes is not None:
        for k, (y0, x0, y1, x1) in enumerate(boxes):
            r = np.zeros_like(fg)
            r[y0:y1, x0:x1] = True
            regions[k] = r & fg
    else:
        labels, n = ndimage.label(fg)
        comps = [labels == i for i in range(1, n + 1)]
        comps = [c for c in comps if c.sum() >= min_area]
        shapes = (graph.obj1, graph.obj2)
        scores = [[shape_score(c, s) for s in shapes] for c in comps]
        best, best_val = None, -np.inf
        for i, j in itertools.permutations(range(len(comps)), 2):
            v = scores[i][0] + scores[j][1]
            if v > best_val:
                best, best_val = (i, j), v
        if best is None and comps:
            # one blob only: give it to the object it resembles more
            k = int(np.argmax(scores[0]))
            best = (0, None) if k == 0 else (None, 0)
        if best is not None:
            for k, ci in enumerate(best):
                if ci is not None and scores[ci][k] >= min_shape_score:
                    regions[k] = comps[ci]

    present, correct, leak, dom = [], [], [], []
    for k in range(2):
        r = regions[k]
        if r is None or r.sum() < min_area:
            present.append(False), correct.append(False), leak.append(False), dom.append(None)
            continue
        hist = np.bincount(q[r], minlength=len(names))
        d = names[int(hist.argmax())]
        other = expected[1 - k]
        frac_other = hist[names.index(other)] / hist.sum() if other in names else 0.0
        present.append(True)
        dom.append(d)
        correct.append(d == expected[k])
        leak.append(bool(frac_other >= leak_fraction))
    return OracleResult(tuple(present), tuple(correct), tuple(leak), tuple(dom))
