"""Synthetic complex-VQA dataset generation.

Worlds are small scenes (objects with class/color/size and a position,
plus a set of relation triples).  Four question families are templated so
that each family's answer is a function of exactly one feature stream:

    attribute   "what color is the <class>?"       -> object features
    relational  "does <a> <rel> <b> hold?"         -> scene-graph edges
    counting    "how many objects are there?"      -> object features
    global      "what kind of scene is this?"      -> global scene vector

Relational questions quiz the *recorded* relation set (an edge either is
or is not in the world's relation list); spatial relation ids are kept
consistent with object positions at sampling time, but the answer is
always edge membership, so the scene-graph stream is sufficient to answer
perfectly and nothing else is.  The yes/no coin is flipped independently
of the world, and relational questions are only generated in worlds where
both a yes- and a no-candidate exist, so the label is statistically
independent of every non-scene-graph stream.

Splits are disjoint at the world level.  Everything is driven by named
Philox streams: a config generates byte-identical files every time.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .features import FeatureSpace, Relation, StreamDims, StubEncoders, World, WorldObject, write_bundles
from .seeding import rng_for

FAMILIES = ("attribute", "relational", "counting", "global")

# relation ids 0..3 are spatial and are kept consistent with positions
REL_LEFT_OF, REL_RIGHT_OF, REL_ABOVE, REL_BELOW = 0, 1, 2, 3

_COLOR_NAMES = ("red", "blue", "green", "yellow", "purple", "orange")
_CLASS_NAMES = ("cube", "ball", "cylinder", "cone", "torus", "prism", "disk", "wedge")
_RELATION_NAMES = ("left-of", "right-of", "above", "below", "holding", "near",
                   "touching", "facing", "behind", "supporting", "linked-to", "paired-with")
_SCENE_NAMES = ("kitchen", "office", "park", "street", "beach", "lab")
_SIZE_NAMES = ("small", "medium", "large")


def _names(base: tuple[str, ...], n: int, prefix: str) -> list[str]:
    return [base[i] if i < len(base) else f"{prefix}{i}" for i in range(n)]


@dataclass(frozen=True)
class TaskConfig:
    worlds: int = 400
    questions_per_world: int = 4
    min_objects: int = 2
    max_objects: int = 6
    min_relations: int = 3
    max_relations: int = 8
    n_classes: int = 8
    n_colors: int = 6
    n_sizes: int = 3
    n_relation_types: int = 12
    n_scene_categories: int = 6
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.worlds < 4:
            raise ConfigError("need at least 4 worlds")
        if self.questions_per_world < 1:
            raise ConfigError("questions_per_world must be >= 1")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ConfigError(f"bad object count range ({self.min_objects}, {self.max_objects})")
        if not (0 <= self.min_relations <= self.max_relations):
            raise ConfigError(f"bad relation count range ({self.min_relations}, {self.max_relations})")
        if min(self.n_classes, self.n_colors, self.n_sizes,
               self.n_relation_types, self.n_scene_categories) < 1:
            raise ConfigError("attribute cardinalities must be positive")
        if self.n_relation_types <= REL_BELOW:
            raise ConfigError("need at least 4 relation types (the spatial ones)")
        fr = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(fr - 1.0) > 1e-9:
            raise ConfigError(f"split fractions sum to {fr}, not 1")
        if min(self.train_fraction, self.val_fraction, self.test_fraction) < 0:
            raise ConfigError("split fractions must be non-negative")
        if self.max_relations > 0 and self.max_objects < 2:
            raise ConfigError("relations require at least 2 objects per world")


@dataclass(frozen=True)
class Question:
    family: str
    token_ids: tuple[int, ...]
    answer_id: int
    world_id: int


class Vocab:
    """Shared answer vocabulary and question token vocabulary.

    Answers: colors, then counts 0..max_objects, then no/yes, then scene
    categories.  Tokens: four family markers, then class tokens, then
    relation tokens.
    """

    ASK_COLOR, ASK_REL, ASK_COUNT, ASK_SCENE = 0, 1, 2, 3

    def __init__(self, cfg: TaskConfig):
        self.cfg = cfg
        self._counts_base = cfg.n_colors
        self._no = self._counts_base + cfg.max_objects + 1
        self._yes = self._no + 1
        self._scene_base = self._yes + 1
        self.answer_size = self._scene_base + cfg.n_scene_categories
        self._class_base = 4
        self._rel_base = 4 + cfg.n_classes
        self.token_size = self._rel_base + cfg.n_relation_types
        self.answer_names = (
            _names(_COLOR_NAMES, cfg.n_colors, "color")
            + [str(k) for k in range(cfg.max_objects + 1)]
            + ["no", "yes"]
            + _names(_SCENE_NAMES, cfg.n_scene_categories, "scene")
        )
        self.token_names = (
            ["<color?>", "<rel?>", "<count?>", "<scene?>"]
            + _names(_CLASS_NAMES, cfg.n_classes, "class")
            + _names(_RELATION_NAMES, cfg.n_relation_types, "rel")
        )

    def color_answer(self, color_id: int) -> int:
        return color_id

    def count_answer(self, count: int) -> int:
        return self._counts_base + count

    @property
    def no_answer(self) -> int:
        return self._no

    @property
    def yes_answer(self) -> int:
        return self._yes

    def scene_answer(self, category: int) -> int:
        return self._scene_base + category

    def class_token(self, class_id: int) -> int:
        return self._class_base + class_id

    def relation_token(self, relation_id: int) -> int:
        return self._rel_base + relation_id

    def class_from_token(self, token: int) -> int:
        return token - self._class_base

    def relation_from_token(self, token: int) -> int:
        return token - self._rel_base

    def token_alignment(self) -> dict[int, tuple[str, int]]:
        """Class/relation tokens share their visual embedding rows."""
        out: dict[int, tuple[str, int]] = {}
        for c in range(self.cfg.n_classes):
            out[self.class_token(c)] = ("class", c)
        for r in range(self.cfg.n_relation_types):
            out[self.relation_token(r)] = ("relation", r)
        return out

    def feature_space(self, dims: StreamDims) -> FeatureSpace:
        c = self.cfg
        return FeatureSpace(
            d_v=dims.d_v, d_l=dims.d_l, d_obj=dims.d_obj, d_sg=dims.d_sg,
            n_classes=c.n_classes, n_colors=c.n_colors, n_sizes=c.n_sizes,
            n_relation_types=c.n_relation_types,
            n_scene_categories=c.n_scene_categories,
            token_vocab=self.token_size, answer_vocab=self.answer_size,
        )


# ---------------------------------------------------------------------------
# world generation
# ---------------------------------------------------------------------------


def _spatial_holds(a: WorldObject, b: WorldObject, rel: int) -> bool:
    if rel == REL_LEFT_OF:
        return a.x < b.x
    if rel == REL_RIGHT_OF:
        return a.x > b.x
    if rel == REL_ABOVE:
        return a.y > b.y
    if rel == REL_BELOW:
        return a.y < b.y
    return True


def gen_world(rng: np.random.Generator, cfg: TaskConfig) -> World:
    """Uniform attributes/positions; relations deduplicated and, for the
    spatial ids, oriented to agree with the sampled positions."""
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = tuple(
        WorldObject(
            class_id=int(rng.integers(cfg.n_classes)),
            color_id=int(rng.integers(cfg.n_colors)),
            size_id=int(rng.integers(cfg.n_sizes)),
            x=float(rng.random()),
            y=float(rng.random()),
        )
        for _ in range(n)
    )
    relations: list[Relation] = []
    if n >= 2 and cfg.max_relations > 0:
        want = int(rng.integers(cfg.min_relations, cfg.max_relations + 1))
        seen: set[tuple[int, int, int]] = set()
        for _ in range(50 * max(want, 1)):
            if len(relations) >= want:
                break
            i, j = rng.choice(n, size=2, replace=False)
            i, j = int(i), int(j)
            r = int(rng.integers(cfg.n_relation_types))
            if not _spatial_holds(objects[i], objects[j], r):
                i, j = j, i
            if (i, j, r) in seen:
                continue
            seen.add((i, j, r))
            relations.append(Relation(src=i, dst=j, relation_id=r))
    world = World(objects=objects, relations=tuple(relations), scene_category=int(
        rng.integers(cfg.n_scene_categories)))
    world.validate()
    return world


def _unique_class_objects(world: World) -> dict[int, int]:
    """class_id -> object index, for classes appearing exactly once."""
    counts: dict[int, int] = {}
    where: dict[int, int] = {}
    for idx, obj in enumerate(world.objects):
        counts[obj.class_id] = counts.get(obj.class_id, 0) + 1
        where[obj.class_id] = idx
    return {c: where[c] for c, k in counts.items() if k == 1}


N_SPATIAL = 4          # relation ids 0..3; relational questions quiz only these
READOUT_SHARE = 0.7    # fraction of relational questions that are hop-and-read


def _relational_candidates(world: World, cfg: TaskConfig):
    """(yes, no) candidate lists of (class_a, rel, class_b) triples over
    unique-class endpoints.

    Only the four spatial relation types are asked about; with eight
    classes that keeps the question-template space small enough that a
    desk-scale model sees each combination several times in training.
    The scene graph itself still carries every relation type.
    """
    uniq = _unique_class_objects(world)
    idx_to_class = {v: k for k, v in uniq.items()}
    present = {(r.src, r.dst, r.relation_id) for r in world.relations}
    yes = sorted(
        (idx_to_class[r.src], r.relation_id, idx_to_class[r.dst])
        for r in world.relations
        if r.relation_id < N_SPATIAL and r.src in idx_to_class and r.dst in idx_to_class
    )
    no = []
    classes = sorted(uniq)
    for ca in classes:
        for cb in classes:
            if ca == cb:
                continue
            for rel in range(min(N_SPATIAL, cfg.n_relation_types)):
                if (uniq[ca], uniq[cb], rel) not in present:
                    no.append((ca, rel, cb))
    return yes, no


def _readout_candidates(world: World, cfg: TaskConfig):
    """(rel, class_b) pairs naming exactly one source object: the hop-and-read
    subtype asks for the color of *the* object spatially related to b."""
    uniq = _unique_class_objects(world)
    idx_to_class = {v: k for k, v in uniq.items()}
    incoming: dict[tuple[int, int], list[int]] = {}
    for r in world.relations:
        if r.relation_id < N_SPATIAL and r.dst in idx_to_class:
            incoming.setdefault((r.relation_id, r.dst), []).append(r.src)
    return sorted(
        (rel, idx_to_class[dst])
        for (rel, dst), srcs in incoming.items()
        if len(srcs) == 1
    )


def world_supports_all_families(world: World, cfg: TaskConfig) -> bool:
    if not _unique_class_objects(world):
        return False
    yes, no = _relational_candidates(world, cfg)
    return bool(yes) and bool(no) and bool(_readout_candidates(world, cfg))


def answer_question(world: World, token_ids, vocab: Vocab) -> int:
    """Ground-truth answer of a templated question, straight from the world.

    Relational questions come in two shapes: 4 tokens quiz edge presence
    ("is a <rel> b?" -> yes/no) and 3 tokens hop and read ("what color is
    the object <rel> b?" -> the color of that unique source object).
    """
    tokens = tuple(int(t) for t in token_ids)
    kind = tokens[0]
    if kind == Vocab.ASK_COUNT:
        return vocab.count_answer(len(world.objects))
    if kind == Vocab.ASK_SCENE:
        return vocab.scene_answer(world.scene_category)
    if kind == Vocab.ASK_COLOR:
        cls = vocab.class_from_token(tokens[1])
        matches = [o for o in world.objects if o.class_id == cls]
        if len(matches) != 1:
            raise ValueError(f"attribute question about non-unique class {cls}")
        return vocab.color_answer(matches[0].color_id)
    if kind == Vocab.ASK_REL and len(tokens) == 3:
        rel = vocab.relation_from_token(tokens[1])
        cb = vocab.class_from_token(tokens[2])
        uniq = _unique_class_objects(world)
        if cb not in uniq:
            raise ValueError("readout question about a non-unique class")
        srcs = [r.src for r in world.relations
                if r.relation_id == rel and r.dst == uniq[cb]]
        if len(srcs) != 1:
            raise ValueError(f"readout question without a unique source: {srcs}")
        return vocab.color_answer(world.objects[srcs[0]].color_id)
    if kind == Vocab.ASK_REL and len(tokens) == 4:
        ca = vocab.class_from_token(tokens[1])
        rel = vocab.relation_from_token(tokens[2])
        cb = vocab.class_from_token(tokens[3])
        uniq = _unique_class_objects(world)
        if ca not in uniq or cb not in uniq:
            raise ValueError("relational question about non-unique classes")
        present = (uniq[ca], uniq[cb], rel) in {(r.src, r.dst, r.relation_id)
                                                for r in world.relations}
        return vocab.yes_answer if present else vocab.no_answer
    raise ValueError(f"unknown question marker {kind}")


def gen_question(world: World, family: str, rng: np.random.Generator,
                 vocab: Vocab, world_id: int) -> Question | None:
    """One templated question, or None if the family is unanswerable here."""
    cfg = vocab.cfg
    if family == "counting":
        tokens = (Vocab.ASK_COUNT,)
    elif family == "global":
        tokens = (Vocab.ASK_SCENE,)
    elif family == "attribute":
        uniq = sorted(_unique_class_objects(world))
        if not uniq:
            return None
        cls = int(rng.choice(uniq))
        tokens = (Vocab.ASK_COLOR, vocab.class_token(cls))
    elif family == "relational":
        if rng.random() < READOUT_SHARE:
            readouts = _readout_candidates(world, cfg)
            if not readouts:
                return None
            rel, cb = readouts[int(rng.integers(len(readouts)))]
            tokens = (Vocab.ASK_REL, vocab.relation_token(rel), vocab.class_token(cb))
        else:
            yes, no = _relational_candidates(world, cfg)
            if not yes or not no:
                return None
            side = yes if rng.integers(2) == 1 else no
            ca, rel, cb = side[int(rng.integers(len(side)))]
            tokens = (Vocab.ASK_REL, vocab.class_token(ca),
                      vocab.relation_token(rel), vocab.class_token(cb))
    else:
        raise ValueError(f"unknown family {family!r}")
    return Question(family=family, token_ids=tokens,
                    answer_id=answer_question(world, tokens, vocab), world_id=world_id)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


_WORLD_RESAMPLE_LIMIT = 200


def _split_sizes(n: int, cfg: TaskConfig) -> tuple[int, int, int]:
    n_train = int(round(n * cfg.train_fraction))
    n_val = int(round(n * cfg.val_fraction))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def gen_dataset(cfg: TaskConfig, dims: StreamDims, out_dir) -> dict:
    """Write train/val/test bundle files plus a manifest; returns the manifest.

    Worlds are resampled until every family is answerable in each (bounded;
    a config that cannot reach answerability or family balance raises
    ConfigError).  Splits partition worlds, never questions.
    """
    cfg.validate()
    vocab = Vocab(cfg)
    space = vocab.feature_space(dims)
    encoders = StubEncoders(space, cfg.seed, token_alignment=vocab.token_alignment())

    worlds: list[World] = []
    for w in range(cfg.worlds):
        rng = rng_for(cfg.seed, "world", w)
        for _ in range(_WORLD_RESAMPLE_LIMIT):
            world = gen_world(rng, cfg)
            if world_supports_all_families(world, cfg):
                break
        else:
            raise ConfigError(
                f"could not sample a world supporting all question families "
                f"after {_WORLD_RESAMPLE_LIMIT} tries (world {w}); "
                f"widen object/relation ranges")
        worlds.append(world)

    order = list(range(cfg.worlds))
    rng_for(cfg.seed, "split").shuffle(order)
    n_train, n_val, n_test = _split_sizes(cfg.worlds, cfg)
    split_of: dict[int, str] = {}
    for pos, w in enumerate(order):
        split_of[w] = "train" if pos < n_train else ("val" if pos < n_train + n_val else "test")

    rank_in_split: dict[int, int] = {}
    seen_per_split = {name: 0 for name in ("train", "val", "test")}
    for w in range(cfg.worlds):
        split = split_of[w]
        rank_in_split[w] = seen_per_split[split]
        seen_per_split[split] += 1

    files = {name: [] for name in ("train", "val", "test")}
    family_counts = {name: {f: 0 for f in FAMILIES} for name in files}
    for w, world in enumerate(worlds):
        rng = rng_for(cfg.seed, "questions", w)
        split = split_of[w]
        base = rank_in_split[w] * cfg.questions_per_world
        for slot in range(cfg.questions_per_world):
            # rotate by rank within the split so each split stays balanced
            family = FAMILIES[(base + slot) % len(FAMILIES)]
            q = None
            for _ in range(16):
                q = gen_question(world, family, rng, vocab, world_id=w)
                if q is not None:
                    break
            if q is None:
                raise ConfigError(f"family {family!r} unanswerable in world {w}")
            target = np.zeros(vocab.answer_size)
            target[q.answer_id] = 1.0
            bundle = encoders.encode_bundle(
                bundle_id=f"w{w:05d}-{family}-{slot}", world=world,
                token_ids=q.token_ids, target=target)
            files[split].append(bundle)
            family_counts[split][family] += 1

    for split, counts in family_counts.items():
        total = sum(counts.values())
        if total == 0:
            raise ConfigError(f"split {split!r} received no samples; adjust fractions")
        for fam, k in counts.items():
            share = k / total
            if abs(share - 1.0 / len(FAMILIES)) > 0.05 * (1.0 / len(FAMILIES)) + 1e-12:
                raise ConfigError(
                    f"family {fam!r} share {share:.3f} in split {split!r} "
                    f"deviates more than 5% from uniform")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, bundles in files.items():
        paths[split] = out / f"{split}.fqb"
        write_bundles(bundles, paths[split], space)

    manifest = {
        "version": 1,
        "seed": cfg.seed,
        "task": asdict(cfg),
        "dims": asdict(dims),
        "counts": {s: len(b) for s, b in files.items()},
        "family_counts": family_counts,
        "answer_names": vocab.answer_names,
        "token_names": vocab.token_names,
        "files": {s: p.name for s, p in paths.items()},
        "worlds": [
            {
                "split": split_of[w],
                "scene": world.scene_category,
                "objects": [[o.class_id, o.color_id, o.size_id, o.x, o.y]
                            for o in world.objects],
                "relations": [[r.src, r.dst, r.relation_id] for r in world.relations],
            }
            for w, world in enumerate(worlds)
        ],
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest
