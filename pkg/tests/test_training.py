"""Training loop, evaluation, and ablation harness tests (tiny configs)."""

import json

import numpy as np
import pytest

from fuseqa.errors import ContractError
from fuseqa.features import StreamDims
from fuseqa.fusion import FusionConfig, FusionModel
from fuseqa.gradcheck import TINY_ARCH, TINY_DIMS, TINY_VOCAB, synthetic_bundle, tiny_model_and_bundle
from fuseqa.numerics import Matrix
from fuseqa import training
from fuseqa.training import (ABLATION_VARIANTS, evaluate, evaluate_files, family_of,
                             render_ablation_table, resolve_workers, run_ablation,
                             train_on_bundles)

from conftest import mini_run_config


def tiny_bundles(n, seed=0, vocab=TINY_VOCAB):
    return [synthetic_bundle(TINY_DIMS, vocab, seed=seed * 1000 + i) for i in range(n)]


def tiny_model(seed=0):
    return FusionModel(FusionConfig(answer_vocab=TINY_VOCAB, **TINY_ARCH), TINY_DIMS, seed=seed)


# ---------------------------------------------------------------------------
# train_on_bundles
# ---------------------------------------------------------------------------


def test_zero_lr_keeps_parameters_bit_identical():
    model = tiny_model(seed=1)
    before = {k: v.value.copy() for k, v in model.params.items()}
    report = train_on_bundles(tiny_bundles(10, seed=2), model, lr=0.0, batch_size=4,
                              epochs=3, seed=3)
    for name, v in model.params.items():
        np.testing.assert_array_equal(v.value, before[name])
    # reshuffling regroups the batch sums, so constancy holds to rounding
    losses = [e.mean_loss for e in report.epochs]
    assert max(losses) - min(losses) < 1e-12 * max(losses)


def test_single_sample_memorization_tiny_config():
    model, bundle = tiny_model_and_bundle(seed=4)
    report = train_on_bundles([bundle], model, lr=1e-2, batch_size=1, epochs=200, seed=5)
    assert report.epochs[-1].mean_loss < 0.01
    assert len(report.epochs) == 200


def test_training_is_deterministic():
    def run():
        model = tiny_model(seed=6)
        return train_on_bundles(tiny_bundles(12, seed=7), model, lr=1e-3, batch_size=4,
                                epochs=2, seed=8), model
    r1, m1 = run()
    r2, m2 = run()
    assert r1.metrics_dict() == r2.metrics_dict()
    for name in m1.params:
        np.testing.assert_array_equal(m1.params[name].value, m2.params[name].value)


def test_empty_dataset_rejected():
    with pytest.raises(ContractError, match="empty"):
        train_on_bundles([], tiny_model(), lr=1e-3, batch_size=4, epochs=1, seed=0)


def test_loss_decreases_on_small_set():
    model = tiny_model(seed=9)
    report = train_on_bundles(tiny_bundles(16, seed=10), model, lr=1e-2, batch_size=8,
                              epochs=20, seed=11)
    assert report.epochs[-1].mean_loss < 0.5 * report.epochs[0].mean_loss


def test_max_steps_and_callback():
    model = tiny_model(seed=12)
    seen = []
    train_on_bundles(tiny_bundles(12, seed=13), model, lr=1e-3, batch_size=4,
                     epochs=10, seed=14, max_steps=5,
                     step_callback=lambda step, loss: seen.append((step, loss)))
    assert [s for s, _ in seen] == [1, 2, 3, 4, 5]


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


class _UniformModel:
    def __init__(self, vocab):
        self.vocab = vocab

    def forward(self, bundle):
        return Matrix(np.full((1, self.vocab), 1.0 / self.vocab))


class _OracleModel:
    def forward(self, bundle):
        return Matrix(bundle.target.reshape(1, -1))


def _balanced_bundles(n, vocab, seed):
    g = np.random.default_rng(seed)
    out = []
    for i in range(n):
        b = synthetic_bundle(TINY_DIMS, vocab, seed=seed * 100000 + i)
        b.target = np.zeros(vocab)
        b.target[int(g.integers(vocab))] = 1.0
        out.append(b)
    return out


def test_uniform_predictions_hit_chance_level():
    vocab = 10
    bundles = _balanced_bundles(2000, vocab, seed=15)
    result = evaluate(bundles, _UniformModel(vocab))
    # uniform rows argmax to index 0; chance = frequency of label 0
    assert abs(result.overall - 0.1) < 0.025


def test_oracle_model_scores_one():
    bundles = _balanced_bundles(50, TINY_VOCAB, seed=16)
    assert evaluate(bundles, _OracleModel()).overall == 1.0


def test_evaluate_deterministic_and_per_family():
    bundles = tiny_bundles(8, seed=17)
    for i, b in enumerate(bundles):
        b.id = f"w{i:05d}-{'relational' if i % 2 else 'counting'}-0"
    model = tiny_model(seed=18)
    r1 = evaluate(bundles, model)
    r2 = evaluate(bundles, model)
    assert r1.overall == r2.overall
    assert r1.per_family == r2.per_family
    assert set(r1.per_family) == {"relational", "counting"}
    assert r1.n == 8


def test_family_parsing():
    assert family_of("w00012-relational-3") == "relational"
    assert family_of("synthetic-7") == "other"


# ---------------------------------------------------------------------------
# file wrappers
# ---------------------------------------------------------------------------


def test_train_eval_files_roundtrip(mini_cfg, mini_dataset, tmp_path):
    out = tmp_path / "run"
    report = training.train(mini_dataset / "train.fqb", mini_cfg, out,
                            eval_path=mini_dataset / "val.fqb")
    assert (out / "checkpoint.fqm").exists()
    assert (out / "train_report.json").exists()
    assert (out / "timing.txt").exists()
    assert all(e.eval_accuracy is not None for e in report.epochs)
    result = evaluate_files(mini_dataset / "test.fqb", out / "checkpoint.fqm")
    assert 0.0 <= result.overall <= 1.0
    assert set(result.per_family) <= {"attribute", "relational", "counting", "global"}


def test_train_rejects_header_mismatch(mini_dataset, tmp_path):
    bad = mini_run_config()
    object.__setattr__(bad, "dims", StreamDims(d_v=13, d_l=16, d_obj=24, d_sg=60))
    with pytest.raises(ContractError, match="header"):
        training.train(mini_dataset / "train.fqb", bad, tmp_path / "x")


def test_eval_rejects_mismatched_checkpoint(mini_cfg, mini_dataset, tmp_path):
    from fuseqa.fusion import save_checkpoint
    other = FusionModel(FusionConfig(dim=16, layers=1, heads=2, ffn_dim=16, answer_vocab=9),
                        StreamDims(d_v=12, d_l=16, d_obj=24, d_sg=60), seed=0)
    path = tmp_path / "other.fqm"
    save_checkpoint(other, path)
    with pytest.raises(ContractError, match="dataset header"):
        evaluate_files(mini_dataset / "test.fqb", path)


def test_train_report_files_deterministic(mini_cfg, mini_dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    training.train(mini_dataset / "train.fqb", mini_cfg, a)
    training.train(mini_dataset / "train.fqb", mini_cfg, b)
    assert (a / "train_report.json").read_bytes() == (b / "train_report.json").read_bytes()
    assert (a / "checkpoint.fqm").read_bytes() == (b / "checkpoint.fqm").read_bytes()


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------


def test_run_ablation_structure(mini_cfg, mini_dataset, tmp_path):
    rows = run_ablation(mini_dataset / "train.fqb", mini_dataset / "test.fqb",
                        mini_run_config(epochs=1), seeds=[0, 1, 2], workers=1)
    assert [r.key for r in rows] == ["full", "no_obj", "no_sg", "no_obj_no_sg"]
    flags = {(r.use_objects, r.use_scene_graph) for r in rows}
    assert flags == {(True, True), (False, True), (True, False), (False, False)}
    for r in rows:
        assert r.use_global_visual
        assert 0.0 <= r.overall <= 1.0
        assert len(r.per_seed_overall) == 3
        assert set(r.per_family) == {"attribute", "relational", "counting", "global"}
    table = render_ablation_table(rows)
    lines = table.strip().splitlines()
    assert len(lines) == 5  # header + four configurations
    assert lines[0].split()[:2] == ["configuration", "overall"]
    training.write_ablation_report(rows, tmp_path)
    data = json.loads((tmp_path / "ablation.json").read_text())
    assert len(data["rows"]) == 4
    assert (tmp_path / "ablation_table.txt").read_text() == table


def test_run_ablation_needs_three_seeds(mini_cfg, mini_dataset):
    with pytest.raises(ContractError, match="3 seeds"):
        run_ablation(mini_dataset / "train.fqb", mini_dataset / "test.fqb",
                     mini_cfg, seeds=[0, 1], workers=1)


def test_ablation_parallel_matches_serial(mini_dataset):
    cfg = mini_run_config(epochs=1)
    serial = run_ablation(mini_dataset / "train.fqb", mini_dataset / "test.fqb",
                          cfg, seeds=[0, 1, 2], workers=1)
    parallel = run_ablation(mini_dataset / "train.fqb", mini_dataset / "test.fqb",
                            cfg, seeds=[0, 1, 2], workers=2)
    for a, b in zip(serial, parallel):
        assert a.as_dict() == b.as_dict()


def test_resolve_workers_env_cap(monkeypatch):
    monkeypatch.setenv("MVCORE_THREADS", "1")
    assert resolve_workers(8) == 1
    monkeypatch.setenv("MVCORE_THREADS", "not-a-number")
    with pytest.raises(ContractError, match="MVCORE_THREADS"):
        resolve_workers()
    monkeypatch.delenv("MVCORE_THREADS")
    assert resolve_workers(1) == 1


def test_ablation_variant_labels():
    assert [label for _, label, _, _ in ABLATION_VARIANTS] == [
        "full", "w/o objects", "w/o scene graph", "w/o objects + scene graph"]
