"""Synthetic shapes world: scenes, rendering, captions, corpora and batching.

A scene places one or two solid shapes on a k x k grid.  Two-object scenes
always carry a relation that is visible in the image: ``above`` means same
column with the subject in the upper cell, ``left of`` means same row with
the subject in the left cell.  Captions follow a fixed grammar:

    a <color> <shape>
    a <color> <shape> (above | left of) a <color> <shape>

so a clean caption parses back to its scene (up to the cells).
"""

from __future__ import annotations

import hashlib
import json
from functools import lru_cache
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .vision import read_ppm, write_ppm

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
RELATIONS = ("above", "left of")
RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
DEFAULT_HOLDOUT = (("green", "triangle"), ("yellow", "circle"))
PROMPT = "a picture of"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]

    @property
    def combo(self) -> tuple[str, str]:
        return self.color, self.shape


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...] = ()
    grid: int = 4
    relation: str | None = None

    def validate(self) -> None:
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise DataError("scene objects must occupy distinct cells")
        if len(self.objects) > 2:
            raise DataError("scenes hold at most two objects")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS:
                raise DataError(f"unknown object {o}")
            r, c = o.cell
            if not (0 <= r < self.grid and 0 <= c < self.grid):
                raise DataError(f"cell {o.cell} outside {self.grid}x{self.grid} grid")
        if len(self.objects) == 2:
            if self.relation not in RELATIONS:
                raise DataError("two-object scenes need a relation")
            a, b = self.objects
            if self.relation == "above" and not (a.cell[1] == b.cell[1] and a.cell[0] < b.cell[0]):
                raise DataError("'above' needs the subject directly higher in the same column")
            if self.relation == "left of" and not (a.cell[0] == b.cell[0] and a.cell[1] < b.cell[1]):
                raise DataError("'left of' needs the subject further left in the same row")

    def to_dict(self) -> dict:
        return {
            "grid": self.grid,
            "relation": self.relation,
            "objects": [{"shape": o.shape, "color": o.color, "cell": list(o.cell)} for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        objs = tuple(SceneObject(o["shape"], o["color"], tuple(o["cell"])) for o in d["objects"])
        return cls(objs, d.get("grid", 4), d.get("relation"))

    def combos(self) -> set[tuple[str, str]]:
        return {o.combo for o in self.objects}


# ----------------------------------------------------------------------------
# rendering
# ----------------------------------------------------------------------------


def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    inset = max(1, size // 8)
    if shape == "square":
        return (yy >= inset) & (yy < size - inset) & (xx >= inset) & (xx < size - inset)
    if shape == "circle":
        r = size / 2.0 - inset + 0.25
        return (yy - c) ** 2 + (xx - c) ** 2 <= r * r
    if shape == "triangle":
        # apex at top-centre, base along the bottom inset row
        top, bottom = inset, size - inset - 1
        frac = (yy - top) / max(1, bottom - top)
        half = frac * (size / 2.0 - inset)
        return (yy >= top) & (yy <= bottom) & (np.abs(xx - c) <= half + 0.5)
    raise DataError(f"unknown shape {shape}")


def render_scene(spec: SceneSpec, hw: int = 32) -> np.ndarray:
    """Rasterize ``spec`` into an [hw, hw, 3] float32 image on a white background."""
    spec.validate()
    if hw % spec.grid:
        raise DataError(f"image size {hw} not divisible by grid {spec.grid}")
    cell = hw // spec.grid
    img = np.ones((hw, hw, 3), dtype=np.float32)
    for o in spec.objects:
        m = _shape_mask(o.shape, cell)
        r, c = o.cell
        block = img[r * cell : (r + 1) * cell, c * cell : (c + 1) * cell]
        block[m] = RGB[o.color]
    return img


def content_box(spec: SceneSpec, hw: int) -> tuple[int, int, int, int]:
    """Pixel box ``(top, left, bottom, right)`` covering every object's cell (whole image if empty)."""
    if not spec.objects:
        return 0, 0, hw, hw
    cell = hw // spec.grid
    rows = [o.cell[0] for o in spec.objects]
    cols = [o.cell[1] for o in spec.objects]
    return min(rows) * cell, min(cols) * cell, (max(rows) + 1) * cell, (max(cols) + 1) * cell


# ----------------------------------------------------------------------------
# captions
# ----------------------------------------------------------------------------


def clean_caption(spec: SceneSpec) -> str:
    if not spec.objects:
        return "an empty picture"
    first = spec.objects[0]
    text = f"a {first.color} {first.shape}"
    if len(spec.objects) == 2:
        second = spec.objects[1]
        text += f" {spec.relation} a {second.color} {second.shape}"
    return text


def caption_scene(spec: SceneSpec, noise_rng: np.random.Generator | None = None, noise_rate: float = 0.0) -> str:
    """Grammar caption; with probability ``noise_rate`` one word is dropped or one color swapped."""
    text = clean_caption(spec)
    if noise_rate <= 0.0 or noise_rng is None:
        return text
    if noise_rng.random() >= noise_rate:
        return text
    return corrupt_caption(text, noise_rng)


def corrupt_caption(text: str, rng: np.random.Generator) -> str:
    words = text.split(" ")
    colors = [i for i, w in enumerate(words) if w in COLORS]
    if rng.random() < 0.5 and colors:
        k = colors[int(rng.integers(len(colors)))]
        others = [c for c in COLORS if c != words[k]]
        words[k] = others[int(rng.integers(len(others)))]
    else:
        del words[int(rng.integers(len(words)))]
    return " ".join(words)


def parse_caption(text: str) -> tuple[tuple[tuple[str, str], ...], str | None]:
    """Invert the caption grammar: ``(((color, shape), ...), relation)``."""
    words = normalize_answer(text).split()
    if words[:3] == ["a", "picture", "of"]:
        words = words[3:]

    def obj(ws):
        if len(ws) != 3 or ws[0] != "a" or ws[1] not in COLORS or ws[2] not in SHAPES:
            raise DataError(f"not a grammatical object phrase: {' '.join(ws)!r}")
        return ws[1], ws[2]

    if len(words) == 3:
        return (obj(words),), None
    if len(words) == 7 and words[3] == "above":
        return (obj(words[:3]), obj(words[4:])), "above"
    if len(words) == 8 and words[3:5] == ["left", "of"]:
        return (obj(words[:3]), obj(words[5:])), "left of"
    raise DataError(f"not a grammatical caption: {text!r}")


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace."""
    kept = "".join(ch if ch.isalnum() or ch.isspace() else " " for ch in text.lower())
    return " ".join(kept.split())


def exact_match(prediction: str, reference: str) -> int:
    return int(normalize_answer(prediction) == normalize_answer(reference))


# ----------------------------------------------------------------------------
# scene sampling
# ----------------------------------------------------------------------------


def all_combos() -> list[tuple[str, str]]:
    return [(c, s) for c in COLORS for s in SHAPES]


def sample_scene(
    rng: np.random.Generator,
    combos: Sequence[tuple[str, str]],
    grid: int = 4,
    two_object_prob: float = 0.5,
) -> SceneSpec:
    def pick():
        c, s = combos[int(rng.integers(len(combos)))]
        return c, s

    if rng.random() >= two_object_prob:
        c, s = pick()
        cell = (int(rng.integers(grid)), int(rng.integers(grid)))
        return SceneSpec((SceneObject(s, c, cell),), grid, None)
    relation = RELATIONS[int(rng.integers(2))]
    fixed = int(rng.integers(grid))
    a, b = sorted(rng.choice(grid, size=2, replace=False).tolist())
    if relation == "above":
        cells = ((a, fixed), (b, fixed))
    else:
        cells = ((fixed, a), (fixed, b))
    (c1, s1), (c2, s2) = pick(), pick()
    return SceneSpec((SceneObject(s1, c1, cells[0]), SceneObject(s2, c2, cells[1])), grid, relation)


_FILLER_SUBJECTS = ("the cat", "a child", "my friend", "the old man", "a teacher", "the dog", "our neighbor")
_FILLER_VERBS = ("likes", "paints", "sees", "draws", "remembers", "wants", "finds")
_FILLER_OBJECTS = ("the river", "a small house", "warm bread", "the morning", "a long road", "music", "the garden")
_FILLER_TAILS = ("", " today", " every day", " at night", " in the summer")


def filler_sentence(rng: np.random.Generator) -> str:
    """Non-visual sentence from a second small grammar."""
    pick = lambda xs: xs[int(rng.integers(len(xs)))]  # noqa: E731
    return f"{pick(_FILLER_SUBJECTS)} {pick(_FILLER_VERBS)} {pick(_FILLER_OBJECTS)}{pick(_FILLER_TAILS)}"


def text_document(rng: np.random.Generator, grid: int = 4) -> str:
    """Caption-like text over every color/shape combo (holdouts included), or filler."""
    u = rng.random()
    if u < 0.5:
        spec = sample_scene(rng, all_combos(), grid)
        text = clean_caption(spec)
        return f"{PROMPT} {text}" if u < 0.25 else text
    return filler_sentence(rng)


# ----------------------------------------------------------------------------
# corpora
# ----------------------------------------------------------------------------


@dataclass
class PairRecord:
    image: np.ndarray
    caption: str
    spec: SceneSpec
    path: str = ""
    split: str | None = None


@dataclass
class Corpora:
    pairs: list[PairRecord]
    docs: list[str]
    eval_splits: dict[str, list[PairRecord]] = field(default_factory=dict)
    holdout: tuple[tuple[str, str], ...] = DEFAULT_HOLDOUT

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for r in self.pairs:
            h.update(r.caption.encode())
            h.update(json.dumps(r.spec.to_dict(), sort_keys=True).encode())
            h.update(r.image.tobytes())
        for d in self.docs:
            h.update(d.encode())
        for name in sorted(self.eval_splits):
            for r in self.eval_splits[name]:
                h.update(name.encode())
                h.update(r.caption.encode())
        return h.hexdigest()


def build_corpora(
    n_pairs: int,
    n_docs: int,
    holdout: Sequence[tuple[str, str]] = DEFAULT_HOLDOUT,
    seed: int = 0,
    hw: int = 32,
    grid: int = 4,
    noise_rate: float = 0.1,
    n_eval: int = 200,
) -> Corpora:
    """Generate the pair corpus, the text corpus and the held-in / compositional eval splits."""
    holdout = tuple(tuple(h) for h in holdout)
    space = set(all_combos())
    for h in holdout:
        if h not in space:
            raise DataError(f"holdout combo {h} is not a (color, shape) pair")
    train_combos = [c for c in all_combos() if c not in set(holdout)]
    if len(train_combos) < 2:
        raise DataError("holdout leaves fewer than two combos for training")
    rng = np.random.default_rng([seed, 1])
    noise_rng = np.random.default_rng([seed, 2])
    pairs = []
    for i in range(n_pairs):
        spec = sample_scene(rng, train_combos, grid)
        pairs.append(PairRecord(render_scene(spec, hw), caption_scene(spec, noise_rng, noise_rate), spec, f"images/train_{i:06d}.ppm"))
    doc_rng = np.random.default_rng([seed, 3])
    docs = [text_document(doc_rng, grid) for _ in range(n_docs)]

    eval_rng = np.random.default_rng([seed, 4])
    heldin = []
    for i in range(n_eval):
        spec = sample_scene(eval_rng, train_combos, grid)
        heldin.append(PairRecord(render_scene(spec, hw), clean_caption(spec), spec, f"images/heldin_{i:06d}.ppm", "heldin"))
    comp = []
    hold = list(holdout)
    for i in range(n_eval if hold else 0):
        spec = sample_scene(eval_rng, hold, grid)
        comp.append(PairRecord(render_scene(spec, hw), clean_caption(spec), spec, f"images/compositional_{i:06d}.ppm", "compositional"))
    return Corpora(pairs, docs, {"heldin": heldin, "compositional": comp}, holdout)


def leakage_scan(corpora: Corpora) -> list[int]:
    """Indices of training pairs whose image contains a holdout combo (should be empty)."""
    bad = set(corpora.holdout)
    return [i for i, r in enumerate(corpora.pairs) if r.spec.combos() & bad]


def write_corpora(corpora: Corpora, out_dir: str | Path) -> dict:
    """Write images (PPM), JSONL manifests and the leakage report; returns the manifest summary."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    def dump_pairs(records, path, with_split):
        with open(path, "w", encoding="utf-8") as fh:
            for r in records:
                write_ppm(out / r.path, r.image)
                row = {"image": r.path, "caption": r.caption, "spec": r.spec.to_dict()}
                if with_split:
                    row["split"] = r.split
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    dump_pairs(corpora.pairs, out / "pairs.jsonl", False)
    with open(out / "text.jsonl", "w", encoding="utf-8") as fh:
        for d in corpora.docs:
            fh.write(json.dumps({"text": d}) + "\n")
    dump_pairs(corpora.eval_splits.get("heldin", []) + corpora.eval_splits.get("compositional", []), out / "eval.jsonl", True)
    leaks = leakage_scan(corpora)
    report = {
        "n_pairs": len(corpora.pairs),
        "n_docs": len(corpora.docs),
        "n_eval": {k: len(v) for k, v in corpora.eval_splits.items()},
        "holdout": [list(h) for h in corpora.holdout],
        "leakage_violations": len(leaks),
        "fingerprint": corpora.fingerprint(),
    }
    (out / "manifest.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_corpora(data_dir: str | Path) -> Corpora:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text()) if (root / "manifest.json").exists() else {}

    def records(rows):
        return [
            PairRecord(read_ppm(root / r["image"]), r["caption"], SceneSpec.from_dict(r["spec"]), r["image"], r.get("split"))
            for r in rows
        ]

    pairs = records(_read_jsonl(root / "pairs.jsonl"))
    docs = [r["text"] for r in _read_jsonl(root / "text.jsonl")]
    evals = records(_read_jsonl(root / "eval.jsonl"))
    splits: dict[str, list[PairRecord]] = {}
    for r in evals:
        splits.setdefault(r.split or "heldin", []).append(r)
    holdout = tuple(tuple(h) for h in manifest.get("holdout", DEFAULT_HOLDOUT))
    return Corpora(pairs, docs, splits, holdout)


# ----------------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------------


@dataclass
class MixedBatch:
    index: int
    pairs: list[int]
    docs: list[int]


@lru_cache(maxsize=8)
def _epoch_order(n: int, seed: int, stream: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, stream, epoch]).permutation(n)


def batch_indices(n: int, per_batch: int, step: int, seed: int, stream: int) -> list[int]:
    """Indices for batch ``step`` of a stream that reshuffles every epoch."""
    if per_batch == 0:
        return []
    if n == 0:
        raise DataError("stream is empty but its per-batch count is positive")
    out = []
    start = step * per_batch
    for k in range(start, start + per_batch):
        epoch, pos = divmod(k, n)
        out.append(int(_epoch_order(n, seed, stream, epoch)[pos]))
    return out


def mix_batches(
    n_pairs: int,
    n_docs: int,
    pairs_per_batch: int,
    docs_per_batch: int,
    seed: int,
    start: int = 0,
) -> Iterator[MixedBatch]:
    """Endless batches holding exactly ``pairs_per_batch`` pairs and ``docs_per_batch`` docs.

    Batch ``k`` is a pure function of ``(sizes, counts, seed, k)``, so a resumed
    run continues with the same sequence.
    """
    if pairs_per_batch and not n_pairs:
        raise DataError("pair stream is empty but pairs_per_batch > 0")
    if docs_per_batch and not n_docs:
        raise DataError("text stream is empty but docs_per_batch > 0")
    if pairs_per_batch + docs_per_batch == 0:
        raise DataError("a batch needs at least one example")
    k = start
    while True:
        yield MixedBatch(
            k,
            batch_indices(n_pairs, pairs_per_batch, k, seed, 0),
            batch_indices(n_docs, docs_per_batch, k, seed, 1),
        )
        k += 1


# ----------------------------------------------------------------------------
# downstream task data
# ----------------------------------------------------------------------------


@dataclass
class QAExample:
    image: np.ndarray
    question: str
    answer: str
    spec: SceneSpec
    image2: np.ndarray | None = None


def _questions_for(spec: SceneSpec, rng: np.random.Generator) -> tuple[str, str]:
    objs = spec.objects
    kind = int(rng.integers(3))
    if kind == 0:
        # color of a shape that occurs exactly once
        shapes = [o.shape for o in objs]
        unique = [o for o in objs if shapes.count(o.shape) == 1]
        if unique:
            o = unique[int(rng.integers(len(unique)))]
            return f"what color is the {o.shape}?", o.color
    if kind <= 1:
        colors = [o.color for o in objs]
        unique = [o for o in objs if colors.count(o.color) == 1]
        if unique:
            o = unique[int(rng.integers(len(unique)))]
            return f"what shape is the {o.color} object?", o.shape
    color = COLORS[int(rng.integers(len(COLORS)))]
    present = any(o.color == color for o in objs)
    return f"is there a {color} object?", "yes" if present else "no"


def build_vqa(
    n: int,
    seed: int,
    combos: Sequence[tuple[str, str]] | None = None,
    hw: int = 32,
    grid: int = 4,
    kinds: str = "mixed",
) -> list[QAExample]:
    """Question answering over fresh scenes.  ``kinds='red'`` asks only "is there a red object?"."""
    combos = list(combos or all_combos())
    rng = np.random.default_rng([seed, 11])
    out = []
    while len(out) < n:
        spec = sample_scene(rng, combos, grid)
        if kinds == "red":
            q = "is there a red object?"
            a = "yes" if any(o.color == "red" for o in spec.objects) else "no"
        else:
            q, a = _questions_for(spec, rng)
        out.append(QAExample(render_scene(spec, hw), q, a, spec))
    return out


def build_paired(n: int, seed: int, hw: int = 32, grid: int = 4) -> list[QAExample]:
    """Two single-object images and one statement; label says whether the colors match."""
    rng = np.random.default_rng([seed, 12])
    out = []
    for _ in range(n):
        c1 = COLORS[int(rng.integers(len(COLORS)))]
        c2 = c1 if rng.random() < 0.5 else COLORS[int(rng.integers(len(COLORS)))]
        objs = []
        for c in (c1, c2):
            s = SHAPES[int(rng.integers(len(SHAPES)))]
            cell = (int(rng.integers(grid)), int(rng.integers(grid)))
            objs.append(SceneSpec((SceneObject(s, c, cell),), grid))
        out.append(
            QAExample(
                render_scene(objs[0], hw),
                "both pictures show the same color",
                "true" if c1 == c2 else "false",
                objs[0],
                render_scene(objs[1], hw),
            )
        )
    return out


def answer_classes(examples: Iterable[QAExample]) -> list[str]:
    return sorted({e.answer for e in examples})


def task_lines() -> list[str]:
    """Every downstream question and answer string, so a tokenizer trained with
    these lines can encode the finetuning tasks."""
    lines = ["both pictures show the same color", "true", "false", "yes", "no"]
    for s in SHAPES:
        lines.append(f"what color is the {s}?")
    for c in COLORS:
        lines += [f"what shape is the {c} object?", f"is there a {c} object?", c]
    return lines + list(SHAPES)
