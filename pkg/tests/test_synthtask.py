"""Task generator tests: world invariants, question predicates, dataset
hygiene, and stream-sufficiency of the information partition."""

import json

import numpy as np
import pytest

from fuseqa.errors import ConfigError
from fuseqa.features import (Relation, StreamDims, StubEncoders, World, WorldObject,
                             read_bundles)
from fuseqa.seeding import rng_for
from fuseqa.synthtask import (FAMILIES, REL_ABOVE, REL_BELOW, REL_LEFT_OF, REL_RIGHT_OF,
                              TaskConfig, Vocab, answer_question, gen_dataset,
                              gen_question, gen_world)

DIMS = StreamDims(d_v=12, d_l=10, d_obj=12, d_sg=14)


def small_cfg(**kw) -> TaskConfig:
    base = dict(worlds=32, questions_per_world=4, seed=3)
    base.update(kw)
    return TaskConfig(**base)


# ---------------------------------------------------------------------------
# worlds
# ---------------------------------------------------------------------------


def test_gen_world_respects_ranges_and_dedup():
    cfg = small_cfg()
    for seed in range(30):
        w = gen_world(rng_for(9, "w", seed), cfg)
        assert cfg.min_objects <= len(w.objects) <= cfg.max_objects
        triples = [(r.src, r.dst, r.relation_id) for r in w.relations]
        assert len(triples) == len(set(triples))
        for r in w.relations:
            assert r.src != r.dst


def test_gen_world_zero_relation_range():
    cfg = small_cfg(min_relations=0, max_relations=0)
    w = gen_world(rng_for(1, "w"), cfg)
    assert w.relations == ()


def test_gen_world_spatial_consistency():
    cfg = small_cfg()
    for seed in range(40):
        w = gen_world(rng_for(7, "spatial", seed), cfg)
        for r in w.relations:
            src, dst = w.objects[r.src], w.objects[r.dst]
            if r.relation_id == REL_LEFT_OF:
                assert src.x < dst.x
            elif r.relation_id == REL_RIGHT_OF:
                assert src.x > dst.x
            elif r.relation_id == REL_ABOVE:
                assert src.y > dst.y
            elif r.relation_id == REL_BELOW:
                assert src.y < dst.y


def test_gen_world_deterministic():
    cfg = small_cfg()
    assert gen_world(rng_for(5, "w", 0), cfg) == gen_world(rng_for(5, "w", 0), cfg)


# ---------------------------------------------------------------------------
# questions
# ---------------------------------------------------------------------------


def _fixed_world() -> World:
    objs = (
        WorldObject(class_id=0, color_id=2, size_id=0, x=0.1, y=0.5),
        WorldObject(class_id=1, color_id=4, size_id=1, x=0.6, y=0.3),
        WorldObject(class_id=1, color_id=0, size_id=2, x=0.9, y=0.9),
        WorldObject(class_id=3, color_id=5, size_id=0, x=0.4, y=0.8),
    )
    rels = (Relation(0, 3, REL_LEFT_OF), Relation(3, 0, 5), Relation(1, 2, 6))
    return World(objects=objs, relations=rels, scene_category=3)


def test_global_question_answer_lookup():
    cfg = small_cfg()
    vocab = Vocab(cfg)
    q = gen_question(_fixed_world(), "global", rng_for(0, "q"), vocab, world_id=0)
    assert q.answer_id == vocab.scene_answer(3)
    assert vocab.answer_names[q.answer_id] == "street"


def test_counting_question_answer():
    cfg = small_cfg()
    vocab = Vocab(cfg)
    q = gen_question(_fixed_world(), "counting", rng_for(0, "q"), vocab, world_id=0)
    assert q.answer_id == vocab.count_answer(4)
    assert vocab.answer_names[q.answer_id] == "4"


def test_attribute_question_unique_class_color():
    cfg = small_cfg()
    vocab = Vocab(cfg)
    w = _fixed_world()
    for seed in range(10):
        q = gen_question(w, "attribute", rng_for(seed, "q"), vocab, world_id=0)
        cls = vocab.class_from_token(q.token_ids[1])
        assert cls in (0, 3)  # class 1 appears twice, never asked about
        expected_color = {0: 2, 3: 5}[cls]
        assert q.answer_id == vocab.color_answer(expected_color)


def test_relational_question_matches_world_predicate():
    cfg = small_cfg()
    vocab = Vocab(cfg)
    w = _fixed_world()
    uniq = {0: 0, 3: 3}  # class -> object index for unique classes
    present = {(r.src, r.dst, r.relation_id) for r in w.relations}
    presence_seen = readout_seen = 0
    for seed in range(40):
        q = gen_question(w, "relational", rng_for(seed, "rq"), vocab, world_id=0)
        if len(q.token_ids) == 4:  # presence subtype: is a <rel> b?
            presence_seen += 1
            ca = vocab.class_from_token(q.token_ids[1])
            rel = vocab.relation_from_token(q.token_ids[2])
            cb = vocab.class_from_token(q.token_ids[3])
            holds = (uniq[ca], uniq[cb], rel) in present
            assert q.answer_id == (vocab.yes_answer if holds else vocab.no_answer)
        else:  # readout subtype: what color is the object <rel> b?
            readout_seen += 1
            rel = vocab.relation_from_token(q.token_ids[1])
            cb = vocab.class_from_token(q.token_ids[2])
            srcs = [r.src for r in w.relations
                    if r.relation_id == rel and r.dst == uniq[cb]]
            assert len(srcs) == 1
            assert q.answer_id == vocab.color_answer(w.objects[srcs[0]].color_id)
        assert q.answer_id == answer_question(w, q.token_ids, vocab)
    assert presence_seen > 0 and readout_seen > 0


def test_readout_question_on_fixed_world():
    # the only spatial edge into a unique class is (0, left-of, 3);
    # object 0 has color 2
    cfg = small_cfg()
    vocab = Vocab(cfg)
    w = _fixed_world()
    tokens = (Vocab.ASK_REL, vocab.relation_token(REL_LEFT_OF), vocab.class_token(3))
    assert answer_question(w, tokens, vocab) == vocab.color_answer(2)


def test_unanswerable_families_return_none():
    cfg = small_cfg()
    vocab = Vocab(cfg)
    dup = WorldObject(class_id=2, color_id=1, size_id=0, x=0.2, y=0.2)
    dup2 = WorldObject(class_id=2, color_id=3, size_id=1, x=0.7, y=0.7)
    w = World(objects=(dup, dup2), relations=(Relation(0, 1, 5),), scene_category=0)
    assert gen_question(w, "attribute", rng_for(0, "q"), vocab, 0) is None
    assert gen_question(w, "relational", rng_for(0, "q"), vocab, 0) is None
    # relational also needs at least one present edge between unique classes
    w2 = World(objects=(WorldObject(0, 0, 0, 0.1, 0.1), WorldObject(1, 1, 1, 0.9, 0.9)),
               relations=(), scene_category=0)
    assert gen_question(w2, "relational", rng_for(0, "q"), vocab, 0) is None


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------


def test_split_fractions_must_sum_to_one():
    with pytest.raises(ConfigError, match="sum"):
        small_cfg(train_fraction=0.5, val_fraction=0.5, test_fraction=0.5).validate()


def test_bad_ranges_rejected():
    with pytest.raises(ConfigError):
        small_cfg(min_objects=5, max_objects=3).validate()
    with pytest.raises(ConfigError):
        small_cfg(max_objects=1, min_objects=1).validate()  # relations need 2 objects


def test_infeasible_family_balance_is_config_error(tmp_path):
    # one class only: attribute questions need a unique class, impossible
    # once every world has >= 2 objects of the same class
    cfg = small_cfg(n_classes=1, min_objects=3, max_objects=4, worlds=4)
    with pytest.raises(ConfigError, match="tries|unanswerable"):
        gen_dataset(cfg, DIMS, tmp_path / "d")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("task")
    cfg = TaskConfig(worlds=80, questions_per_world=4, seed=12)
    manifest = gen_dataset(cfg, DIMS, out)
    return cfg, out, manifest


def test_dataset_counts(dataset):
    cfg, out, manifest = dataset
    assert manifest["counts"] == {"train": 256, "val": 32, "test": 32}


def test_dataset_family_balance(dataset):
    _, _, manifest = dataset
    for split, counts in manifest["family_counts"].items():
        total = sum(counts.values())
        for fam in FAMILIES:
            assert abs(counts[fam] / total - 0.25) <= 0.0125 + 1e-12


def test_dataset_split_world_disjointness(dataset):
    _, out, _ = dataset
    seen: dict[str, set] = {}
    for split in ("train", "val", "test"):
        _, bundles = read_bundles(out / f"{split}.fqb")
        seen[split] = {b.id.split("-")[0] for b in bundles}
    assert not (seen["train"] & seen["val"])
    assert not (seen["train"] & seen["test"])
    assert not (seen["val"] & seen["test"])


def test_dataset_regeneration_byte_identical(dataset, tmp_path):
    cfg, out, _ = dataset
    again = tmp_path / "again"
    gen_dataset(cfg, DIMS, again)
    for name in ("train.fqb", "val.fqb", "test.fqb", "manifest.json"):
        assert (out / name).read_bytes() == (again / name).read_bytes(), name


def _world_from_manifest(entry) -> World:
    return World(
        objects=tuple(WorldObject(int(c), int(k), int(s), float(x), float(y))
                      for c, k, s, x, y in entry["objects"]),
        relations=tuple(Relation(int(s), int(d), int(r)) for s, d, r in entry["relations"]),
        scene_category=int(entry["scene"]),
    )


def test_every_answer_recomputable_from_world(dataset):
    cfg, out, manifest = dataset
    vocab = Vocab(cfg)
    for split in ("train", "val", "test"):
        _, bundles = read_bundles(out / f"{split}.fqb")
        for b in bundles:
            w_idx = int(b.id.split("-")[0][1:])
            world = _world_from_manifest(manifest["worlds"][w_idx])
            assert answer_question(world, b.token_ids, vocab) == int(np.argmax(b.target))


def test_relational_subtypes_and_presence_balance(dataset):
    cfg, out, _ = dataset
    vocab = Vocab(cfg)
    yes = no = readout = 0
    for split in ("train", "val", "test"):
        _, bundles = read_bundles(out / f"{split}.fqb")
        for b in bundles:
            if b.id.split("-")[1] != "relational":
                continue
            if len(b.token_ids) == 3:
                readout += 1
                assert int(np.argmax(b.target)) < cfg.n_colors  # a color answer
            elif int(np.argmax(b.target)) == vocab.yes_answer:
                yes += 1
            else:
                no += 1
    presence = yes + no
    assert readout + presence == 80
    assert readout >= 40      # readout is the majority subtype
    assert presence >= 10
    assert 0.2 <= yes / presence <= 0.8


# ---------------------------------------------------------------------------
# stream sufficiency: nearest-template decoding oracles
# ---------------------------------------------------------------------------


def _object_template_index(enc: StubEncoders, cfg: TaskConfig) -> dict[bytes, tuple]:
    index = {}
    for c in range(cfg.n_classes):
        for k in range(cfg.n_colors):
            for s in range(cfg.n_sizes):
                index[enc.object_feature(c, k, s).tobytes()] = (c, k, s)
    return index


def test_object_stream_suffices_for_attribute_and_counting(dataset):
    cfg, out, _ = dataset
    vocab = Vocab(cfg)
    enc = StubEncoders(vocab.feature_space(DIMS), cfg.seed)
    index = _object_template_index(enc, cfg)
    _, bundles = read_bundles(out / "test.fqb")
    checked = 0
    for b in bundles:
        fam = b.id.split("-")[1]
        if fam == "counting":
            assert vocab.count_answer(b.objects.count) == int(np.argmax(b.target))
            checked += 1
        elif fam == "attribute":
            decoded = [index[b.objects.features[i].tobytes()] for i in range(b.objects.count)]
            cls = vocab.class_from_token(int(b.token_ids[1]))
            colors = [k for (c, k, s) in decoded if c == cls]
            assert len(colors) == 1
            assert vocab.color_answer(colors[0]) == int(np.argmax(b.target))
            checked += 1
    assert checked >= 6


def test_scene_graph_stream_suffices_for_relational(dataset):
    cfg, out, _ = dataset
    vocab = Vocab(cfg)
    enc = StubEncoders(vocab.feature_space(DIMS), cfg.seed)
    obj_index = _object_template_index(enc, cfg)
    obj_templates = {v: np.frombuffer(kb, dtype=np.float64)
                     for kb, v in obj_index.items()}
    edge_index: dict[bytes, tuple] = {}
    for (c1, k1, s1), f1 in obj_templates.items():
        for rel in range(cfg.n_relation_types):
            for (c2, k2, s2), f2 in obj_templates.items():
                edge_index[enc.edge_feature(f1, rel, f2).tobytes()] = (c1, k1, rel, c2)
    _, bundles = read_bundles(out / "test.fqb")
    presence = readout = 0
    for b in bundles:
        if b.id.split("-")[1] != "relational":
            continue
        decoded = [edge_index[b.scene_graph.features[e].tobytes()]
                   for e in range(b.scene_graph.count)]
        if len(b.token_ids) == 4:
            ca = vocab.class_from_token(int(b.token_ids[1]))
            rel = vocab.relation_from_token(int(b.token_ids[2]))
            cb = vocab.class_from_token(int(b.token_ids[3]))
            held = any((c1, r, c2) == (ca, rel, cb) for c1, _, r, c2 in decoded)
            predicted = vocab.yes_answer if held else vocab.no_answer
            presence += 1
        else:
            rel = vocab.relation_from_token(int(b.token_ids[1]))
            cb = vocab.class_from_token(int(b.token_ids[2]))
            colors = [k1 for c1, k1, r, c2 in decoded if r == rel and c2 == cb]
            assert len(colors) == 1
            predicted = vocab.color_answer(colors[0])
            readout += 1
        assert predicted == int(np.argmax(b.target))
    assert presence >= 2 and readout >= 2
