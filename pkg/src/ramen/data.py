"""Synthetic compositional VQA benchmark.

Scenes are lists of attributed objects (shape, color, size, box). Questions
come from five template families with programmatically computed answers, so
every stored answer can be re-validated against the scene. Region features
are synthesized from an attribute-structured codebook instead of rendered
pixels, which isolates the architecture under test and keeps generation
deterministic in (seed, id).

Three split regimes: iid, a compositional holdout where a designated set of
(shape, color) pairs occurs only in test questions' referenced objects, and
a changing-priors regime where per-family answer distributions differ
between train and test by a total-variation distance of at least `tv_target`
while val matches train.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import DataError
from .model import RegionSet, encode_spatial

log = logging.getLogger(__name__)

SHAPES = ("cube", "sphere", "cylinder")
COLORS = ("blue", "brown", "cyan", "gray", "green", "purple", "red", "yellow")
SIZES = ("small", "large")
FAMILIES = ("exist", "count", "query_attribute", "compare_attribute", "integer_comparison")
SPLITS = ("train", "val", "test")

PLURAL = {
    "cube": "cubes",
    "sphere": "spheres",
    "cylinder": "cylinders",
    "object": "objects",
}
SINGULAR = {p: s for s, p in PLURAL.items()}

PAD, UNK = "<pad>", "<unk>"

VOCAB = (
    (PAD, UNK)
    + ("is", "there", "a", "the", "what", "how", "many", "are")
    + ("same", "as", "more", "fewer", "than", "equal", "numbers", "of", "and")
    + ("color", "shape", "size", "object", "objects")
    + SHAPES
    + tuple(PLURAL[s] for s in SHAPES)
    + COLORS
    + SIZES
)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}

ALL_PAIRS = tuple((s, c) for s in SHAPES for c in COLORS)


def tokenize(question: str):
    return [TOKEN_ID.get(w, TOKEN_ID[UNK]) for w in question.split()]


def detokenize(tokens):
    return " ".join(VOCAB[t] for t in tokens)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    size: str
    box: tuple  # (x0, y0, x1, y1), image-relative

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError(f"object box must be non-degenerate inside [0,1]^2: {self.box}")


@dataclass(frozen=True)
class Scene:
    id: int
    objects: tuple
    seed: int


@dataclass(frozen=True)
class QAItem:
    id: int
    scene_id: int
    family: str
    question: str
    tokens: tuple
    answer: str
    split: str = "train"


@dataclass(frozen=True)
class AnswerVocab:
    """Closed answer set built by a frequency rule; out-of-vocabulary answers
    are dropped from training and scored as wrong at evaluation."""

    index: dict
    rule: dict

    @property
    def answers(self):
        out = [None] * len(self.index)
        for a, i in self.index.items():
            out[i] = a
        return out

    def __len__(self):
        return len(self.index)

    def __contains__(self, answer: str) -> bool:
        return answer in self.index


# ---------------------------------------------------------------------------
# scenes


def _rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def _boxes_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union

_PLACEMENT_IOU = 0.05  # placement threshold; corpus contract is < 0.1
_MAX_PLACEMENT_ATTEMPTS = 1000

generation_stats = {"scene_regenerations": 0}


def _sample_box(rng, size: str):
    lo, hi = (0.06, 0.12) if size == "small" else (0.14, 0.24)
    w = rng.uniform(lo, hi)
    h = rng.uniform(lo, hi)
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    return (float(x0), float(y0), float(x0 + w), float(y0 + h))


def generate_scene(seed: int, id: int, max_objects: int = 10,
                   allowed_pairs=None) -> Scene:
    """Sample a scene deterministically from (seed, id).

    Object count is uniform on [1, max_objects]; attributes are uniform
    (optionally restricted to `allowed_pairs` of (shape, color)); boxes are
    rejection-sampled to keep pairwise IoU low. If placement fails after the
    attempt budget the whole scene is regenerated from a perturbed sub-seed,
    which keeps the result a pure function of (seed, id).
    """
    if not 1 <= max_objects <= 10:
        raise ValueError(f"max_objects must be in [1, 10], got {max_objects}")
    pairs = tuple(allowed_pairs) if allowed_pairs is not None else ALL_PAIRS
    for round_ in range(100):
        rng = _rng(seed, 0, id, round_)
        n = int(rng.integers(1, max_objects + 1))
        objects = []
        ok = True
        for _ in range(n):
            shape, color = pairs[rng.integers(len(pairs))]
            size = SIZES[rng.integers(len(SIZES))]
            placed = False
            for _attempt in range(_MAX_PLACEMENT_ATTEMPTS):
                box = _sample_box(rng, size)
                if all(_boxes_iou(box, o.box) <= _PLACEMENT_IOU for o in objects):
                    objects.append(ObjectSpec(shape, color, size, box))
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            return Scene(id=id, objects=tuple(objects), seed=seed)
        generation_stats["scene_regenerations"] += 1
        log.debug("scene %d: placement failed, regenerating with perturbed sub-seed", id)
    raise DataError(f"could not place objects for scene {id} after 100 regenerations")


# ---------------------------------------------------------------------------
# featurization


class Codebook:
    """Attribute-structured visual codebook.

    Each (shape, color, size) triple maps to a fixed unit vector built from
    per-attribute component vectors plus a triple-specific residual:

        v = normalize(shape_vec + color_vec + size_vec + sqrt(2) * residual)

    The residual keeps any two triples' cosine similarity below 0.5 (they
    share at most two of four roughly orthogonal parts), while the attribute
    components give held-out attribute combinations a predictable direction,
    so a compositional split is solvable rather than pure memorization.
    A reserved background entry pads scenes to a fixed region count.
    """

    RESIDUAL_WEIGHT = np.sqrt(2.0)

    def __init__(self, seed: int, visual_dim: int):
        self.seed = seed
        self.visual_dim = visual_dim
        rng = _rng(seed, 7)

        def unit():
            v = rng.standard_normal(visual_dim)
            return v / np.linalg.norm(v)

        self.shape_vecs = {s: unit() for s in SHAPES}
        self.color_vecs = {c: unit() for c in COLORS}
        self.size_vecs = {z: unit() for z in SIZES}
        self.background = unit()
        self._triples = {}
        for s in SHAPES:
            for c in COLORS:
                for z in SIZES:
                    v = (
                        self.shape_vecs[s]
                        + self.color_vecs[c]
                        + self.size_vecs[z]
                        + self.RESIDUAL_WEIGHT * unit()
                    )
                    self._triples[(s, c, z)] = v / np.linalg.norm(v)

    def triple(self, shape: str, color: str, size: str) -> np.ndarray:
        return self._triples[(shape, color, size)]

    def entries(self):
        return dict(self._triples)


_codebook_cache = {}


def get_codebook(seed: int, visual_dim: int) -> Codebook:
    key = (seed, visual_dim)
    if key not in _codebook_cache:
        _codebook_cache[key] = Codebook(seed, visual_dim)
    return _codebook_cache[key]


def featurize_scene(
    scene: Scene,
    noise_sigma: float = 0.1,
    seed: int = 0,
    visual_dim: int = 2048,
    num_regions: int = 15,
) -> RegionSet:
    """Map a scene to exactly `num_regions` region vectors, visual part then
    spatial part. Objects come first in generation order; background
    distractor regions pad the rest. `noise_sigma` scales an isotropic
    Gaussian whose expected norm is sigma relative to the unit-norm codebook
    vector (per-coordinate std sigma/sqrt(dim)).
    """
    if len(scene.objects) > num_regions:
        raise ValueError(
            f"scene {scene.id} has {len(scene.objects)} objects, more than {num_regions} regions"
        )
    book = get_codebook(seed, visual_dim)
    rng = _rng(seed, 8, scene.id)
    per_coord = noise_sigma / np.sqrt(visual_dim)
    regions = []
    for obj in scene.objects:
        visual = book.triple(obj.shape, obj.color, obj.size).copy()
        if noise_sigma > 0:
            visual = visual + per_coord * rng.standard_normal(visual_dim)
        regions.append(np.concatenate([visual, encode_spatial(obj.box)]).astype(np.float32))
    for _ in range(num_regions - len(scene.objects)):
        visual = book.background.copy()
        if noise_sigma > 0:
            visual = visual + per_coord * rng.standard_normal(visual_dim)
        box = _sample_box(rng, "small")
        regions.append(np.concatenate([visual, encode_spatial(box)]).astype(np.float32))
    return RegionSet(regions)


# ---------------------------------------------------------------------------
# questions


@dataclass(frozen=True)
class Filter:
    """Attribute constraints; None leaves an attribute unconstrained."""

    shape: Optional[str] = None
    color: Optional[str] = None
    size: Optional[str] = None

    def matches(self, obj: ObjectSpec) -> bool:
        return (
            (self.shape is None or obj.shape == self.shape)
            and (self.color is None or obj.color == self.color)
            and (self.size is None or obj.size == self.size)
        )

    def count(self, scene: Scene) -> int:
        return sum(1 for o in scene.objects if self.matches(o))

    def matching(self, scene: Scene):
        return [o for o in scene.objects if self.matches(o)]

    def words(self, plural: bool = False):
        noun = self.shape if self.shape is not None else "object"
        noun = PLURAL[noun] if plural else noun
        out = []
        if self.size is not None:
            out.append(self.size)
        if self.color is not None:
            out.append(self.color)
        out.append(noun)
        return out


def _parse_filter(words, plural: bool = False) -> Filter:
    """Inverse of Filter.words; raises DataError on malformed input."""
    words = list(words)
    if not words:
        raise DataError("empty attribute filter")
    noun = words[-1]
    if plural:
        if noun not in SINGULAR:
            raise DataError(f"expected a plural noun, got {noun!r}")
        noun = SINGULAR[noun]
    if noun not in SHAPES and noun != "object":
        raise DataError(f"expected a shape word or 'object', got {noun!r}")
    f = Filter(shape=None if noun == "object" else noun)
    for w in words[:-1]:
        if w in SIZES:
            f = replace(f, size=w)
        elif w in COLORS:
            f = replace(f, color=w)
        else:
            raise DataError(f"unexpected attribute word {w!r}")
    return f


def _sample_filter(rng, allowed_pairs, max_attrs: int = 2) -> Filter:
    """Random filter constraining at most `max_attrs` attributes.

    Keeping filters to one or two attributes keeps the question-pattern space
    small enough for a desk-scale corpus to cover it densely. When shape and
    color are both constrained the pair is drawn from allowed_pairs so
    question text never mentions a combination outside the scene pool.
    """
    n_attrs = 1 if max_attrs == 1 or rng.random() < 0.55 else 2
    picked = list(rng.choice(3, size=n_attrs, replace=False))
    use_shape, use_color, use_size = (i in picked for i in range(3))
    shape = color = size = None
    if use_shape and use_color:
        shape, color = allowed_pairs[rng.integers(len(allowed_pairs))]
    elif use_shape:
        shape = SHAPES[rng.integers(len(SHAPES))]
    elif use_color:
        pool_colors = sorted({c for _, c in allowed_pairs})
        color = pool_colors[rng.integers(len(pool_colors))]
    if use_size:
        size = SIZES[rng.integers(len(SIZES))]
    return Filter(shape=shape, color=color, size=size)


def _filter_from_object(rng, obj: ObjectSpec, exclude: Optional[str] = None,
                        max_attrs: int = 2) -> Filter:
    """Filter derived from an existing object (so it matches at least that
    object), constraining at most `max_attrs` attributes; `exclude` names an
    attribute that must stay unconstrained."""
    kinds = [k for k in ("shape", "color", "size") if k != exclude]
    n_attrs = 1 if max_attrs == 1 or rng.random() < 0.5 else 2
    picked = {kinds[i] for i in rng.choice(len(kinds), size=min(n_attrs, len(kinds)), replace=False)}
    return Filter(
        shape=obj.shape if "shape" in picked else None,
        color=obj.color if "color" in picked else None,
        size=obj.size if "size" in picked else None,
    )


class _QuestionBuilder:
    def __init__(self, scene: Scene, rng, allowed_pairs):
        self.scene = scene
        self.rng = rng
        self.pairs = tuple(allowed_pairs) if allowed_pairs is not None else ALL_PAIRS
        self.seen = set()

    def _emit(self, family, words, answer):
        question = " ".join(words)
        tokens = tuple(tokenize(question))
        if tokens in self.seen:
            return None
        self.seen.add(tokens)
        return QAItem(
            id=-1,
            scene_id=self.scene.id,
            family=family,
            question=question,
            tokens=tokens,
            answer=answer,
        )

    def exist(self, want_yes: bool):
        for _ in range(40):
            if want_yes and self.scene.objects:
                obj = self.scene.objects[self.rng.integers(len(self.scene.objects))]
                f = _filter_from_object(self.rng, obj)
            else:
                f = _sample_filter(self.rng, self.pairs)
            present = f.count(self.scene) > 0
            if present != want_yes:
                continue
            item = self._emit("exist", ["is", "there", "a"] + f.words(), "yes" if present else "no")
            if item:
                return item
        return None

    def count(self, want_zero: bool):
        for _ in range(40):
            if want_zero:
                f = _sample_filter(self.rng, self.pairs)
                if f.count(self.scene) != 0:
                    continue
            else:
                obj = self.scene.objects[self.rng.integers(len(self.scene.objects))]
                f = _filter_from_object(self.rng, obj)
            c = f.count(self.scene)
            item = self._emit(
                "count", ["how", "many"] + f.words(plural=True) + ["are", "there"], str(c)
            )
            if item:
                return item
        return None

    def query_attribute(self):
        attrs = ("color", "shape", "size")
        for _ in range(40):
            attr = attrs[self.rng.integers(3)]
            obj = self.scene.objects[self.rng.integers(len(self.scene.objects))]
            f = _filter_from_object(self.rng, obj, exclude=attr)
            if f.count(self.scene) != 1:
                continue
            item = self._emit(
                "query_attribute",
                ["what", attr, "is", "the"] + f.words(),
                getattr(obj, attr),
            )
            if item:
                return item
        return None

    def compare_attribute(self, want_yes: bool):
        if len(self.scene.objects) < 2:
            return None
        attrs = ("color", "shape", "size")
        for _ in range(60):
            attr = attrs[self.rng.integers(3)]
            i, j = self.rng.choice(len(self.scene.objects), size=2, replace=False)
            a, b = self.scene.objects[i], self.scene.objects[j]
            fa = _filter_from_object(self.rng, a, exclude=attr)
            fb = _filter_from_object(self.rng, b, exclude=attr)
            if fa.count(self.scene) != 1 or fb.count(self.scene) != 1 or fa == fb:
                continue
            same = getattr(a, attr) == getattr(b, attr)
            if same != want_yes:
                continue
            item = self._emit(
                "compare_attribute",
                ["is", "the"] + fa.words() + ["the", "same", attr, "as", "the"] + fb.words(),
                "yes" if same else "no",
            )
            if item:
                return item
        return None

    def integer_comparison(self, want_yes: bool):
        kinds = ("more", "fewer", "equal")
        attr_values = {
            "shape": [Filter(shape=s) for s in SHAPES],
            "color": [Filter(color=c) for c in sorted({c for _, c in self.pairs})],
            "size": [Filter(size=z) for z in SIZES],
        }
        for _ in range(60):
            kind = kinds[self.rng.integers(3)]
            # both filters constrain the same single attribute: the counting
            # circuit transfers across a pattern space small enough for a
            # desk-scale corpus to cover
            pool = attr_values[("shape", "color", "size")[self.rng.integers(3)]]
            fa = pool[self.rng.integers(len(pool))]
            fb = pool[self.rng.integers(len(pool))]
            if fa == fb:
                continue
            ca, cb = fa.count(self.scene), fb.count(self.scene)
            if kind == "more":
                ans = ca > cb
            elif kind == "fewer":
                ans = ca < cb
            else:
                ans = ca == cb
            if ans != want_yes:
                continue
            wa = fa.words(plural=True)
            wb = fb.words(plural=True)
            if kind == "equal":
                words = ["are", "there", "equal", "numbers", "of"] + wa + ["and"] + wb
            else:
                words = ["are", "there", kind] + wa + ["than"] + wb
            item = self._emit("integer_comparison", words, "yes" if ans else "no")
            if item:
                return item
        return None


def generate_questions(scene: Scene, families=FAMILIES, per_family: int = 1,
                       allowed_pairs=None, zero_count_share: float = 0.2):
    """Instantiate question templates on one scene with ground-truth answers.

    Yes/no families alternate their target answer so the corpus stays
    balanced; the count family forces a zero-answer question for roughly
    `zero_count_share` of its draws. Unsatisfiable templates are skipped
    after a bounded number of resampling attempts.
    """
    if not families:
        raise ValueError("families must be non-empty")
    rng = _rng(scene.seed, 1, scene.id)
    builder = _QuestionBuilder(scene, rng, allowed_pairs)
    items = []
    for family in families:
        if family not in FAMILIES:
            raise ValueError(f"unknown question family {family!r}")
        for k in range(per_family):
            want_yes = bool((k + int(rng.integers(2))) % 2)
            if family == "exist":
                item = builder.exist(want_yes)
            elif family == "count":
                item = builder.count(want_zero=rng.random() < zero_count_share)
            elif family == "query_attribute":
                item = builder.query_attribute()
            elif family == "compare_attribute":
                item = builder.compare_attribute(want_yes)
            else:
                item = builder.integer_comparison(want_yes)
            if item is not None:
                items.append(item)
    return items


# ---------------------------------------------------------------------------
# answer oracle


def parse_question(family: str, question: str):
    """Recover the attribute filters (and comparison kind) from question text."""
    words = question.split()
    try:
        if family == "exist":
            if words[:3] != ["is", "there", "a"]:
                raise DataError(f"malformed exist question: {question!r}")
            return (_parse_filter(words[3:]),)
        if family == "count":
            if words[:2] != ["how", "many"] or words[-2:] != ["are", "there"]:
                raise DataError(f"malformed count question: {question!r}")
            return (_parse_filter(words[2:-2], plural=True),)
        if family == "query_attribute":
            if words[0] != "what" or words[2:4] != ["is", "the"]:
                raise DataError(f"malformed query question: {question!r}")
            attr = words[1]
            if attr not in ("color", "shape", "size"):
                raise DataError(f"unknown queried attribute {attr!r}")
            return (attr, _parse_filter(words[4:]))
        if family == "compare_attribute":
            # is the <F1> the same <attr> as the <F2>
            for i in range(2, len(words) - 4):
                if words[i] == "the" and words[i + 1] == "same":
                    attr = words[i + 2]
                    if attr not in ("color", "shape", "size"):
                        continue
                    if words[i + 3] != "as" or words[i + 4] != "the":
                        continue
                    return (attr, _parse_filter(words[2:i]), _parse_filter(words[i + 5 :]))
            raise DataError(f"malformed comparison question: {question!r}")
        if family == "integer_comparison":
            if words[:3] == ["are", "there", "equal"]:
                if words[3:5] != ["numbers", "of"] or "and" not in words:
                    raise DataError(f"malformed integer question: {question!r}")
                split = words.index("and")
                return (
                    "equal",
                    _parse_filter(words[5:split], plural=True),
                    _parse_filter(words[split + 1 :], plural=True),
                )
            if words[:2] == ["are", "there"] and words[2] in ("more", "fewer"):
                if "than" not in words:
                    raise DataError(f"malformed integer question: {question!r}")
                split = words.index("than")
                return (
                    words[2],
                    _parse_filter(words[3:split], plural=True),
                    _parse_filter(words[split + 1 :], plural=True),
                )
            raise DataError(f"malformed integer question: {question!r}")
    except IndexError as exc:
        raise DataError(f"malformed {family} question: {question!r}") from exc
    raise DataError(f"unknown family {family!r}")


def answer_oracle(item: QAItem, scene: Scene) -> str:
    """Recompute the answer for an item from its scene; independent of the
    sampling path that produced the item."""
    parsed = parse_question(item.family, item.question)
    if item.family == "exist":
        return "yes" if parsed[0].count(scene) > 0 else "no"
    if item.family == "count":
        return str(parsed[0].count(scene))
    if item.family == "query_attribute":
        attr, f = parsed
        matching = f.matching(scene)
        if len(matching) != 1:
            raise DataError(
                f"query filter matches {len(matching)} objects in scene {scene.id}: {item.question!r}"
            )
        return getattr(matching[0], attr)
    if item.family == "compare_attribute":
        attr, fa, fb = parsed
        ma, mb = fa.matching(scene), fb.matching(scene)
        if len(ma) != 1 or len(mb) != 1:
            raise DataError(f"comparison referents not unique in scene {scene.id}: {item.question!r}")
        return "yes" if getattr(ma[0], attr) == getattr(mb[0], attr) else "no"
    kind, fa, fb = parsed
    ca, cb = fa.count(scene), fb.count(scene)
    result = {"more": ca > cb, "fewer": ca < cb, "equal": ca == cb}[kind]
    return "yes" if result else "no"


def referenced_pairs(item: QAItem, scene: Scene):
    """(shape, color) pairs of the objects an item's filters match, plus any
    pair its filters mention explicitly. Used by the compositional split."""
    parsed = parse_question(item.family, item.question)
    filters = [p for p in parsed if isinstance(p, Filter)]
    pairs = set()
    for f in filters:
        for obj in f.matching(scene):
            pairs.add((obj.shape, obj.color))
        if f.shape is not None and f.color is not None:
            pairs.add((f.shape, f.color))
    return pairs


# ---------------------------------------------------------------------------
# answer vocabulary


def build_answer_vocab(items, rule) -> AnswerVocab:
    """Build the closed answer set. `rule` is {"min_count": k} or {"top_k": k}.

    Ranking ties at a top_k boundary break lexicographically; index order is
    (count desc, answer asc), so the result is independent of input order.
    """
    items = list(items)
    if not items:
        raise ValueError("cannot build a vocabulary from no items")
    if set(rule) not in ({"min_count"}, {"top_k"}):
        raise ValueError(f"rule must be {{'min_count': k}} or {{'top_k': k}}, got {rule!r}")
    counts = {}
    for it in items:
        counts[it.answer] = counts.get(it.answer, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if "min_count" in rule:
        kept = [a for a, c in ranked if c >= rule["min_count"]]
    else:
        kept = [a for a, _ in ranked[: rule["top_k"]]]
    if not kept:
        raise DataError(f"answer vocabulary is empty under rule {rule!r}")
    return AnswerVocab(index={a: i for i, a in enumerate(kept)}, rule=dict(rule))


# ---------------------------------------------------------------------------
# splits


def total_variation(p_counts: dict, q_counts: dict) -> float:
    keys = set(p_counts) | set(q_counts)
    np_, nq = sum(p_counts.values()), sum(q_counts.values())
    if np_ == 0 or nq == 0:
        return 0.0
    return 0.5 * sum(abs(p_counts.get(k, 0) / np_ - q_counts.get(k, 0) / nq) for k in keys)


def _answer_counts(items) -> dict:
    out = {}
    for it in items:
        out[it.answer] = out.get(it.answer, 0) + 1
    return out


def _assign_iid(items, rng):
    order = rng.permutation(len(items))
    n = len(items)
    n_train = int(round(0.70 * n))
    n_val = int(round(0.15 * n))
    out = [None] * n
    for rank, idx in enumerate(order):
        if rank < n_train:
            split = "train"
        elif rank < n_train + n_val:
            split = "val"
        else:
            split = "test"
        out[idx] = replace(items[idx], split=split)
    return out


def choose_heldout_pairs(seed: int, k: int = 6):
    """Deterministic held-out (shape, color) pairs for the compositional regime."""
    rng = _rng(seed, 3)
    idx = rng.choice(len(ALL_PAIRS), size=k, replace=False)
    return tuple(sorted(ALL_PAIRS[i] for i in idx))


def make_splits(items, regime: str, seed: int, scenes=None,
                heldout_pairs=None, tv_target: float = 0.3):
    """Label items with train/val/test splits under the requested regime.

    Returns (items, info). The returned list can be a strict subset of the
    input: the compositional regime drops items whose referenced pairs span
    both sides of the holdout, and the changing-priors regime resamples items
    to skew the train-vs-test answer marginals.
    """
    items = list(items)
    families = {it.family for it in items}
    if len(families) < 2:
        raise DataError(f"need at least two question families, got {sorted(families)}")

    if regime == "iid":
        return _assign_iid(items, _rng(seed, 2)), {}

    if regime == "compositional":
        if scenes is None:
            raise ValueError("compositional splits need the scenes")
        by_id = {s.id: s for s in scenes}
        heldout = set(heldout_pairs) if heldout_pairs is not None else set(choose_heldout_pairs(seed))
        rng = _rng(seed, 4)
        test, trainval, dropped = [], [], 0
        for it in items:
            pairs = referenced_pairs(it, by_id[it.scene_id])
            if pairs and pairs <= heldout:
                test.append(replace(it, split="test"))
            elif not pairs & heldout:
                trainval.append(it)
            else:
                dropped += 1
        if not test or not trainval:
            raise DataError(
                f"compositional regime unachievable: {len(test)} test / {len(trainval)} trainval items"
            )
        # 70/15 of the total goes to train/val, i.e. ~82/18 of the non-test pool.
        labeled = []
        draws = rng.random(len(trainval))
        for it, u in zip(trainval, draws):
            labeled.append(replace(it, split="train" if u < 0.70 / 0.85 else "val"))
        info = {"heldout_pairs": sorted(heldout), "dropped_mixed_items": dropped}
        return labeled + test, info

    if regime == "changing_priors":
        base = _assign_iid(items, _rng(seed, 2))
        rng = _rng(seed, 5)
        by_family = {}
        for it in base:
            by_family.setdefault(it.family, []).append(it)
        kept_all = []
        tv_info = {}
        for family in sorted(by_family):
            fam_items = by_family[family]
            answers = sorted({it.answer for it in fam_items})
            if len(answers) < 2:
                raise DataError(
                    f"changing_priors unachievable for family {family!r}: single answer, TV 0.0"
                )
            perm = rng.permutation(len(answers))
            half = max(1, len(answers) // 2)
            train_pref = {answers[i] for i in perm[:half]}
            draws = {id(it): rng.random() for it in fam_items}
            achieved = None
            for p_keep in (0.4, 0.3, 0.2, 0.1, 0.05, 0.02, 0.0):
                kept = []
                for it in fam_items:
                    favored = (it.answer in train_pref) == (it.split in ("train", "val"))
                    if favored or draws[id(it)] < p_keep:
                        kept.append(it)
                tr = _answer_counts([i for i in kept if i.split == "train"])
                te = _answer_counts([i for i in kept if i.split == "test"])
                tv = total_variation(tr, te)
                if tv >= tv_target:
                    achieved = (p_keep, tv, kept)
                    break
            if achieved is None:
                raise DataError(
                    f"changing_priors unachievable for family {family!r}: "
                    f"best TV {tv:.3f} < target {tv_target}"
                )
            p_keep, tv, kept = achieved
            tv_info[family] = tv
            kept_all.extend(kept)
        return kept_all, {"tv_per_family": tv_info, "tv_target": tv_target}

    raise ValueError(f"unknown split regime {regime!r}")


# ---------------------------------------------------------------------------
# dataset files (line-delimited JSON)

_ITEM_FIELDS = ("id", "scene_id", "family", "question", "tokens", "answer", "split")
_SCENE_FIELDS = ("id", "objects", "seed")
_OBJECT_FIELDS = ("shape", "color", "size", "box")


def write_dataset(items, scenes, path) -> None:
    """Write items.jsonl and scenes.jsonl under `path` (a directory)."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "items.jsonl"), "w", encoding="utf-8") as fh:
        for it in items:
            rec = {
                "id": it.id,
                "scene_id": it.scene_id,
                "family": it.family,
                "question": it.question,
                "tokens": list(it.tokens),
                "answer": it.answer,
                "split": it.split,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(os.path.join(path, "scenes.jsonl"), "w", encoding="utf-8") as fh:
        for sc in scenes:
            rec = {
                "id": sc.id,
                "seed": sc.seed,
                "objects": [
                    {"shape": o.shape, "color": o.color, "size": o.size, "box": list(o.box)}
                    for o in sc.objects
                ],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _check_fields(rec: dict, fields, lineno: int, what: str):
    for key in rec:
        if key not in fields:
            raise DataError(f"{what} line {lineno}: unknown field {key!r}")
    for key in fields:
        if key not in rec:
            raise DataError(f"{what} line {lineno}: missing field {key!r}")


def read_dataset(path):
    """Read (items, scenes) written by write_dataset; strict schema, errors
    carry the offending line number and key."""
    items = []
    with open(os.path.join(path, "items.jsonl"), "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"items line {lineno}: invalid JSON ({exc.msg})") from exc
            _check_fields(rec, _ITEM_FIELDS, lineno, "items")
            if rec["split"] not in SPLITS:
                raise DataError(f"items line {lineno}: unknown split {rec['split']!r}")
            if rec["family"] not in FAMILIES:
                raise DataError(f"items line {lineno}: unknown family {rec['family']!r}")
            items.append(
                QAItem(
                    id=rec["id"],
                    scene_id=rec["scene_id"],
                    family=rec["family"],
                    question=rec["question"],
                    tokens=tuple(rec["tokens"]),
                    answer=rec["answer"],
                    split=rec["split"],
                )
            )
    scenes = []
    with open(os.path.join(path, "scenes.jsonl"), "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"scenes line {lineno}: invalid JSON ({exc.msg})") from exc
            _check_fields(rec, _SCENE_FIELDS, lineno, "scenes")
            objects = []
            for ob in rec["objects"]:
                _check_fields(ob, _OBJECT_FIELDS, lineno, "scenes")
                objects.append(
                    ObjectSpec(ob["shape"], ob["color"], ob["size"], tuple(ob["box"]))
                )
            scenes.append(Scene(id=rec["id"], objects=tuple(objects), seed=rec["seed"]))
    return items, scenes


# ---------------------------------------------------------------------------
# corpus assembly


@dataclass
class CorpusConfig:
    num_scenes: int = 500
    max_objects: int = 6
    per_family: int = 1
    families: tuple = FAMILIES
    seed: int = 0
    regime: str = "iid"
    heldout_pair_count: int = 6
    tv_target: float = 0.3
    test_scene_share: float = 0.15  # compositional regime only
    # One rotating family per scene instead of every family on every scene:
    # maximizes scene diversity at a fixed question budget, which matters for
    # rule learning over scene memorization at desk scale.
    family_rotation: bool = False


def generate_corpus(cfg: CorpusConfig):
    """Generate scenes and questions and label splits under cfg.regime.

    Returns (items, scenes, info). For the compositional regime, scenes are
    generated in two pools with disjoint (shape, color) pair sets so every
    question's referenced pairs fall wholly on one side of the holdout.
    """
    if cfg.regime not in ("iid", "compositional", "changing_priors"):
        raise ValueError(f"unknown regime {cfg.regime!r}")
    heldout = None
    scenes = []
    item_lists = []

    def families_for(i):
        if cfg.family_rotation:
            return (cfg.families[i % len(cfg.families)],)
        return cfg.families

    if cfg.regime == "compositional":
        heldout = choose_heldout_pairs(cfg.seed, cfg.heldout_pair_count)
        trainval_pairs = tuple(p for p in ALL_PAIRS if p not in set(heldout))
        period = max(2, int(round(1.0 / cfg.test_scene_share)))
        for i in range(cfg.num_scenes):
            pool = heldout if i % period == 0 else trainval_pairs
            sc = generate_scene(cfg.seed, i, cfg.max_objects, allowed_pairs=pool)
            scenes.append(sc)
            item_lists.append(
                generate_questions(sc, families_for(i), cfg.per_family, allowed_pairs=pool)
            )
    else:
        for i in range(cfg.num_scenes):
            sc = generate_scene(cfg.seed, i, cfg.max_objects)
            scenes.append(sc)
            item_lists.append(generate_questions(sc, families_for(i), cfg.per_family))
    items = []
    next_id = 0
    for lst in item_lists:
        for it in lst:
            items.append(replace(it, id=next_id))
            next_id += 1
    items, info = make_splits(
        items, cfg.regime, cfg.seed, scenes=scenes, heldout_pairs=heldout,
        tv_target=cfg.tv_target,
    )
    info = dict(info)
    info["scene_regenerations"] = generation_stats["scene_regenerations"]
    return items, scenes, info


def corpus_statistics(items) -> dict:
    """Answer histograms and counts per family and split, for the manifest."""
    stats = {"total": len(items), "by_family": {}, "by_split": {}}
    for it in items:
        fam = stats["by_family"].setdefault(
            it.family, {"count": 0, "answers": {}}
        )
        fam["count"] += 1
        fam["answers"][it.answer] = fam["answers"].get(it.answer, 0) + 1
        stats["by_split"][it.split] = stats["by_split"].get(it.split, 0) + 1
    return stats
