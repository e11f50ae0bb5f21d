"""Feature streams for synthetic scenes.

A `World` is the ground truth (objects with attributes and positions,
relation triples, a scene category).  `StubEncoders` turns a world and a
question into the four input streams the fusion model consumes:

* a global scene vector (scene category + coarse object-count bucket),
* per-token question embeddings (embedding table + sinusoidal position),
* one feature vector per object (class/color/size identity only),
* one feature vector per relation edge (src features, relation embedding,
  dst features, projected down).

The streams deliberately partition the world's information: the global
vector ignores per-object attributes and relations, object features
ignore relations and positions, and edge features are the only carrier of
relational structure.  Removing a stream therefore removes information,
which is what makes stream ablations measurable downstream.

All encoders are pure functions of (input, seed): tables and projections
are drawn from named Philox streams, so repeated calls are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .numerics import ContractError, ensure_finite
from .seeding import rng_for

ATTR_DIM = 8     # width of each class/color/size embedding row
REL_DIM = 12     # width of relation-type embedding rows
COUNT_BUCKETS = ((0, 2), (3, 4), (5, None))  # coarse object-count bins


class BundleFormatError(ValueError):
    """Malformed bundle file; carries the offending 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


# ---------------------------------------------------------------------------
# world
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorldObject:
    class_id: int
    color_id: int
    size_id: int
    x: float
    y: float


@dataclass(frozen=True)
class Relation:
    src: int
    dst: int
    relation_id: int


@dataclass(frozen=True)
class World:
    objects: tuple[WorldObject, ...]
    relations: tuple[Relation, ...]
    scene_category: int

    def validate(self) -> None:
        if not self.objects:
            raise ContractError("world must contain at least one object")
        n = len(self.objects)
        for r in self.relations:
            if not (0 <= r.src < n and 0 <= r.dst < n):
                raise ContractError(f"relation ({r.src},{r.dst}) references missing object")
            if r.src == r.dst:
                raise ContractError(f"relation with src == dst == {r.src}")


def count_bucket(n_objects: int) -> int:
    for i, (lo, hi) in enumerate(COUNT_BUCKETS):
        if n_objects >= lo and (hi is None or n_objects <= hi):
            return i
    return len(COUNT_BUCKETS) - 1


# ---------------------------------------------------------------------------
# stream containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StreamDims:
    """Widths of the four raw feature streams.

    The defaults make the object and edge projections square (3 attribute
    embeddings of width 8; two objects plus a relation embedding), i.e.
    lossless rotations."""

    d_v: int = 32
    d_l: int = 32
    d_obj: int = 24
    d_sg: int = 60


@dataclass(frozen=True)
class FeatureSpace:
    """Stream dimensions plus the vocabulary sizes encoders need."""

    d_v: int
    d_l: int
    d_obj: int
    d_sg: int
    n_classes: int
    n_colors: int
    n_sizes: int
    n_relation_types: int
    n_scene_categories: int
    token_vocab: int
    answer_vocab: int

    def header_dict(self) -> dict:
        return {
            "version": 1,
            "d_v": self.d_v,
            "d_l": self.d_l,
            "d_obj": self.d_obj,
            "d_sg": self.d_sg,
            "answer_vocab": self.answer_vocab,
            "token_vocab": self.token_vocab,
        }


@dataclass
class ObjectFeatureSet:
    bboxes: np.ndarray      # (n, 4) rows of (x, y, w, h), all inside the unit square
    class_ids: np.ndarray   # (n,) int
    features: np.ndarray    # (n, d_obj)

    @property
    def count(self) -> int:
        return self.features.shape[0]


@dataclass
class SceneGraphFeatureSet:
    src: np.ndarray          # (n,) int, object indices
    dst: np.ndarray          # (n,) int
    relation_ids: np.ndarray  # (n,) int
    features: np.ndarray     # (n, d_sg)

    @property
    def count(self) -> int:
        return self.features.shape[0]


@dataclass
class FeatureBundle:
    """One sample: the four encoded streams plus the answer target."""

    id: str
    global_visual: np.ndarray      # (d_v,)
    linguistic: np.ndarray         # (L, d_l)
    token_ids: np.ndarray          # (L,) int
    objects: ObjectFeatureSet
    scene_graph: SceneGraphFeatureSet
    target: np.ndarray             # (answer_vocab,), sums to 1

    def validate(self, space: FeatureSpace) -> None:
        if self.global_visual.shape != (space.d_v,):
            raise ContractError(f"bundle {self.id}: global vector has shape {self.global_visual.shape}")
        if self.linguistic.ndim != 2 or self.linguistic.shape[1] != space.d_l:
            raise ContractError(f"bundle {self.id}: linguistic shape {self.linguistic.shape}")
        if self.linguistic.shape[0] != self.token_ids.shape[0] or self.linguistic.shape[0] < 1:
            raise ContractError(f"bundle {self.id}: token count mismatch")
        if self.objects.features.shape[1:] != (space.d_obj,):
            raise ContractError(f"bundle {self.id}: object feature width")
        if self.scene_graph.features.shape[1:] != (space.d_sg,):
            raise ContractError(f"bundle {self.id}: edge feature width")
        if self.target.shape != (space.answer_vocab,):
            raise ContractError(f"bundle {self.id}: target length {self.target.shape}")
        if abs(float(self.target.sum()) - 1.0) > 1e-6:
            raise ContractError(f"bundle {self.id}: target sums to {self.target.sum()}")


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


def _positional_rows(length: int, dim: int) -> np.ndarray:
    """Sinusoidal position term, one row per position."""
    pos = np.arange(length)[:, None]
    idx = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (idx // 2)) / dim)
    out = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return out


def size_box_dims(size_id: int) -> tuple[float, float]:
    """Fixed size-id -> (width, height) lookup."""
    side = 0.08 + 0.07 * size_id
    return side, side


def _seeded_projection(seed: int, tag: str, fan_in: int, fan_out: int) -> np.ndarray:
    """Fixed random projection; orthogonal (a pure rotation) when square,
    scaled Gaussian otherwise."""
    raw = rng_for(seed, "enc", tag).normal(size=(fan_in, fan_out))
    if fan_in == fan_out:
        q, r = np.linalg.qr(raw)
        return q * np.sign(np.diag(r))
    return raw / np.sqrt(fan_in)


def _code_table(seed: int, tag: str, n: int, dim: int) -> np.ndarray:
    """Seeded identity-code table: mutually orthogonal rows of norm
    sqrt(dim) when they fit, Gaussian rows otherwise.  Orthogonality keeps
    distinct identities free of dot-product cross-talk."""
    rng = rng_for(seed, "enc", tag)
    if n <= dim:
        q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
        return (q * np.sign(np.diag(r)))[:n] * np.sqrt(dim)
    return rng.normal(size=(n, dim))


def _tiled_row(row: np.ndarray, width: int) -> np.ndarray:
    reps = -(-width // row.shape[0])
    return np.tile(row, reps)[:width]


class StubEncoders:
    """Deterministic stand-ins for frozen pretrained encoders.

    All lookup tables and projections are functions of (space, seed) only;
    the encode methods are pure.

    `token_alignment` optionally maps token ids to ("class", i) or
    ("relation", i): those token rows are tiled copies of the same
    embedding-table rows the visual features are built from, mimicking the
    cross-modal alignment of jointly pretrained encoders.  Unaligned
    tokens get independent random rows.
    """

    def __init__(self, space: FeatureSpace, seed: int,
                 token_alignment: dict[int, tuple[str, int]] | None = None):
        self.space = space
        self.seed = seed
        s = space
        self._scene_table = rng_for(seed, "enc", "scene").normal(size=(s.n_scene_categories, s.d_v))
        self._count_table = rng_for(seed, "enc", "count").normal(size=(len(COUNT_BUCKETS), s.d_v))
        self._class_table = _code_table(seed, "class", s.n_classes, ATTR_DIM)
        self._color_table = _code_table(seed, "color", s.n_colors, ATTR_DIM)
        self._size_table = _code_table(seed, "size", s.n_sizes, ATTR_DIM)
        self._rel_table = _code_table(seed, "relation", s.n_relation_types, REL_DIM)
        self._obj_proj = _seeded_projection(seed, "obj_proj", 3 * ATTR_DIM, s.d_obj)
        self._sg_proj = _seeded_projection(seed, "sg_proj", 2 * s.d_obj + REL_DIM, s.d_sg)
        self._token_table = rng_for(seed, "enc", "tokens").normal(size=(s.token_vocab, s.d_l))
        for token, (kind, idx) in (token_alignment or {}).items():
            table = self._class_table if kind == "class" else self._rel_table
            self._token_table[token] = _tiled_row(table[idx], s.d_l)

    # -- global visual ------------------------------------------------------

    def encode_global_visual(self, world: World) -> np.ndarray:
        """Scene-category row plus object-count-bucket row; nothing else.

        Per-object attributes and relations are excluded on purpose, so
        this stream alone cannot answer attribute or relational questions.
        """
        world.validate()
        cat = world.scene_category
        if not 0 <= cat < self.space.n_scene_categories:
            raise ContractError(f"scene category {cat} out of range")
        return self._scene_table[cat] + self._count_table[count_bucket(len(world.objects))]

    # -- linguistic ----------------------------------------------------------

    def encode_linguistic(self, token_ids: Sequence[int]) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.shape[0] < 1:
            raise ContractError("question must contain at least one token")
        if ids.min() < 0 or ids.max() >= self.space.token_vocab:
            raise ContractError(
                f"token id outside vocabulary of size {self.space.token_vocab}: {ids.tolist()}")
        return self._token_table[ids] + _positional_rows(len(ids), self.space.d_l)

    # -- objects -------------------------------------------------------------

    def object_feature(self, class_id: int, color_id: int, size_id: int) -> np.ndarray:
        concat = np.concatenate([
            self._class_table[class_id],
            self._color_table[color_id],
            self._size_table[size_id],
        ])
        return concat @ self._obj_proj

    def detect_objects(self, world: World) -> ObjectFeatureSet:
        """One entry per world object; features carry attribute identity only."""
        world.validate()
        n = len(world.objects)
        bboxes = np.zeros((n, 4))
        class_ids = np.zeros(n, dtype=np.int64)
        feats = np.zeros((n, self.space.d_obj))
        for i, obj in enumerate(world.objects):
            w, h = size_box_dims(obj.size_id)
            bboxes[i] = (min(obj.x, 1.0 - w), min(obj.y, 1.0 - h), w, h)
            class_ids[i] = obj.class_id
            feats[i] = self.object_feature(obj.class_id, obj.color_id, obj.size_id)
        return ObjectFeatureSet(bboxes=bboxes, class_ids=class_ids, features=feats)

    # -- scene graph ----------------------------------------------------------

    def edge_feature(self, src_feat: np.ndarray, relation_id: int, dst_feat: np.ndarray) -> np.ndarray:
        concat = np.concatenate([src_feat, self._rel_table[relation_id], dst_feat])
        return concat @ self._sg_proj

    def generate_scene_graph(self, world: World, objects: ObjectFeatureSet) -> SceneGraphFeatureSet:
        """One feature per relation triple; the asymmetric concat makes
        (src, dst) order matter."""
        world.validate()
        n_obj = objects.count
        m = len(world.relations)
        src = np.zeros(m, dtype=np.int64)
        dst = np.zeros(m, dtype=np.int64)
        rel = np.zeros(m, dtype=np.int64)
        feats = np.zeros((m, self.space.d_sg))
        for e, r in enumerate(world.relations):
            if not (0 <= r.src < n_obj and 0 <= r.dst < n_obj):
                raise ContractError(f"relation references object {max(r.src, r.dst)} "
                                    f"but only {n_obj} objects were detected")
            src[e], dst[e], rel[e] = r.src, r.dst, r.relation_id
            feats[e] = self.edge_feature(objects.features[r.src], r.relation_id,
                                         objects.features[r.dst])
        return SceneGraphFeatureSet(src=src, dst=dst, relation_ids=rel, features=feats)

    # -- whole bundle ----------------------------------------------------------

    def encode_bundle(self, bundle_id: str, world: World, token_ids: Sequence[int],
                      target: np.ndarray) -> FeatureBundle:
        objects = self.detect_objects(world)
        bundle = FeatureBundle(
            id=bundle_id,
            global_visual=self.encode_global_visual(world),
            linguistic=self.encode_linguistic(token_ids),
            token_ids=np.asarray(token_ids, dtype=np.int64),
            objects=objects,
            scene_graph=self.generate_scene_graph(world, objects),
            target=np.asarray(target, dtype=np.float64),
        )
        bundle.validate(self.space)
        return bundle


# ---------------------------------------------------------------------------
# bundle file IO
# ---------------------------------------------------------------------------
#
# Line 1 is a header object; every further line is one bundle object:
#   {"id":..., "ev":[...], "el":[[...]...], "tok":[...],
#    "obj":[{"bbox":[x,y,w,h],"cls":i,"f":[...]}, ...],
#    "sg":[{"s":i,"d":j,"r":k,"f":[...]}, ...], "y":[...]}
# Reals are written in scientific notation with 17 significant digits,
# which round-trips float64 exactly.


def fmt17(x: float) -> str:
    """Scientific notation with 17 significant digits; exact float64 round trip."""
    return format(float(x), ".16e")


def _fmt_vec(v: np.ndarray) -> str:
    return "[" + ",".join(fmt17(x) for x in v) + "]"


def _fmt_mat(m: np.ndarray) -> str:
    return "[" + ",".join(_fmt_vec(row) for row in m) + "]"


def _bundle_line(b: FeatureBundle) -> str:
    obj_parts = ",".join(
        '{"bbox":%s,"cls":%d,"f":%s}' % (_fmt_vec(b.objects.bboxes[i]),
                                         int(b.objects.class_ids[i]),
                                         _fmt_vec(b.objects.features[i]))
        for i in range(b.objects.count))
    sg_parts = ",".join(
        '{"s":%d,"d":%d,"r":%d,"f":%s}' % (int(b.scene_graph.src[e]),
                                           int(b.scene_graph.dst[e]),
                                           int(b.scene_graph.relation_ids[e]),
                                           _fmt_vec(b.scene_graph.features[e]))
        for e in range(b.scene_graph.count))
    return ('{"id":%s,"ev":%s,"el":%s,"tok":%s,"obj":[%s],"sg":[%s],"y":%s}'
            % (json.dumps(b.id), _fmt_vec(b.global_visual), _fmt_mat(b.linguistic),
               json.dumps([int(t) for t in b.token_ids]), obj_parts, sg_parts,
               _fmt_vec(b.target)))


def write_bundles(bundles: Iterable[FeatureBundle], path, space: FeatureSpace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(space.header_dict(), separators=(",", ":")) + "\n")
        for b in bundles:
            b.validate(space)
            fh.write(_bundle_line(b) + "\n")


def _vec(raw, line: int, what: str, length: int | None = None) -> np.ndarray:
    if not isinstance(raw, list):
        raise BundleFormatError(line, f"{what} is not a list")
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 1:
        raise BundleFormatError(line, f"{what} is not a flat list")
    if length is not None and arr.shape[0] != length:
        raise BundleFormatError(line, f"{what} has length {arr.shape[0]}, header says {length}")
    return arr


def read_header(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    if not first:
        raise BundleFormatError(1, "empty file")
    try:
        header = json.loads(first)
    except json.JSONDecodeError as e:
        raise BundleFormatError(1, f"header is not valid JSON: {e}") from None
    for key in ("version", "d_v", "d_l", "d_obj", "d_sg", "answer_vocab", "token_vocab"):
        if key not in header:
            raise BundleFormatError(1, f"header missing key {key!r}")
    if header["version"] != 1:
        raise BundleFormatError(1, f"unsupported format version {header['version']}")
    return header


def read_bundles(path) -> tuple[dict, list[FeatureBundle]]:
    """Parse a bundle file; returns (header, bundles).

    Raises BundleFormatError naming the offending line on any structural
    problem, including dimensions that disagree with the header.
    """
    header = read_header(path)
    bundles: list[FeatureBundle] = []
    with open(path, "r", encoding="utf-8") as fh:
        fh.readline()
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise BundleFormatError(line_no, f"record is not valid JSON: {e}") from None
            try:
                bundles.append(_parse_record(rec, header, line_no))
            except BundleFormatError:
                raise
            except (KeyError, TypeError, ValueError) as e:
                raise BundleFormatError(line_no, f"malformed record: {e}") from None
    return header, bundles


def _parse_record(rec: dict, header: dict, line_no: int) -> FeatureBundle:
    for key in ("id", "ev", "el", "tok", "obj", "sg", "y"):
        if key not in rec:
            raise BundleFormatError(line_no, f"record missing key {key!r}")
    ev = _vec(rec["ev"], line_no, "ev", header["d_v"])
    el_raw = rec["el"]
    if not isinstance(el_raw, list) or not el_raw:
        raise BundleFormatError(line_no, "el must be a non-empty list of rows")
    el = np.asarray(el_raw, dtype=np.float64)
    if el.ndim != 2 or el.shape[1] != header["d_l"]:
        raise BundleFormatError(line_no, f"el has shape {el.shape}, header says d_l={header['d_l']}")
    tok = np.asarray(rec["tok"], dtype=np.int64)
    if tok.ndim != 1 or tok.shape[0] != el.shape[0]:
        raise BundleFormatError(line_no, "tok length does not match el row count")
    n_obj = len(rec["obj"])
    bboxes = np.zeros((n_obj, 4))
    class_ids = np.zeros(n_obj, dtype=np.int64)
    obj_feats = np.zeros((n_obj, header["d_obj"]))
    for i, entry in enumerate(rec["obj"]):
        bboxes[i] = _vec(entry["bbox"], line_no, "bbox", 4)
        class_ids[i] = int(entry["cls"])
        obj_feats[i] = _vec(entry["f"], line_no, "object feature", header["d_obj"])
    n_sg = len(rec["sg"])
    src = np.zeros(n_sg, dtype=np.int64)
    dst = np.zeros(n_sg, dtype=np.int64)
    rel = np.zeros(n_sg, dtype=np.int64)
    sg_feats = np.zeros((n_sg, header["d_sg"]))
    for e, entry in enumerate(rec["sg"]):
        src[e] = int(entry["s"])
        dst[e] = int(entry["d"])
        rel[e] = int(entry["r"])
        sg_feats[e] = _vec(entry["f"], line_no, "edge feature", header["d_sg"])
    y = _vec(rec["y"], line_no, "y", header["answer_vocab"])
    for name, arr in (("ev", ev), ("el", el), ("obj", obj_feats), ("sg", sg_feats), ("y", y)):
        try:
            ensure_finite(arr, name)
        except ContractError as e:
            raise BundleFormatError(line_no, str(e)) from None
    return FeatureBundle(
        id=str(rec["id"]), global_visual=ev, linguistic=el, token_ids=tok,
        objects=ObjectFeatureSet(bboxes=bboxes, class_ids=class_ids, features=obj_feats),
        scene_graph=SceneGraphFeatureSet(src=src, dst=dst, relation_ids=rel, features=sg_feats),
        target=y,
    )
