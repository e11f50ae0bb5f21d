"""End-to-end optimization, evaluation, and the stream-ablation harness.

Encoded bundles are the inputs (the encoders are frozen by construction),
so a training run optimizes only projections, fusion layers, and the
answer head.  Batches are seeded shuffles; the loss is the mean
cross-entropy over the batch; updates are AdamW.

`run_ablation` retrains the same architecture under four stream
configurations (full, without objects, without scene graph, without both)
on identical data with aligned seeds, and reports per-config median
accuracies, overall and per question family.
"""

from __future__ import annotations

import json
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nm
from .config import RunConfig
from .errors import ContractError
from .features import FeatureBundle, read_bundles
from .fusion import FusionModel, forward, load_checkpoint, save_checkpoint
from .numerics import OptimizerState, Tape, adamw_step, backward
from .seeding import rng_for

FAMILIES = ("attribute", "relational", "counting", "global")

ABLATION_VARIANTS = (
    # (key, label, use_objects, use_scene_graph)
    ("full", "full", True, True),
    ("no_obj", "w/o objects", False, True),
    ("no_sg", "w/o scene graph", True, False),
    ("no_obj_no_sg", "w/o objects + scene graph", False, False),
)


@dataclass
class EpochStats:
    mean_loss: float
    train_accuracy: float
    eval_accuracy: float | None
    wall_seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    checkpoint_path: str | None = None

    def metrics_dict(self) -> dict:
        """Deterministic metrics only; wall time is reported separately."""
        return {
            "epochs": [
                {"mean_loss": e.mean_loss, "train_accuracy": e.train_accuracy,
                 "eval_accuracy": e.eval_accuracy}
                for e in self.epochs
            ],
            "checkpoint": Path(self.checkpoint_path).name if self.checkpoint_path else None,
        }


@dataclass
class EvalReport:
    overall: float
    per_family: dict[str, float]
    n: int

    def as_dict(self) -> dict:
        return {"overall": self.overall, "n": self.n,
                "per_family": {k: self.per_family[k] for k in sorted(self.per_family)}}


@dataclass
class AblationRow:
    key: str
    label: str
    use_objects: bool
    use_scene_graph: bool
    use_global_visual: bool
    overall: float
    per_family: dict[str, float]
    per_seed_overall: list[float]

    def as_dict(self) -> dict:
        return {
            "key": self.key, "label": self.label,
            "use_objects": self.use_objects, "use_scene_graph": self.use_scene_graph,
            "use_global_visual": self.use_global_visual,
            "overall": self.overall,
            "per_family": {k: self.per_family[k] for k in sorted(self.per_family)},
            "per_seed_overall": self.per_seed_overall,
        }


def family_of(bundle_id: str) -> str:
    parts = bundle_id.split("-")
    if len(parts) >= 2 and parts[1] in FAMILIES:
        return parts[1]
    return "other"


def _batches(order: np.ndarray, batch_size: int):
    for lo in range(0, len(order), batch_size):
        yield order[lo:lo + batch_size]


def train_on_bundles(bundles: Sequence[FeatureBundle], model: FusionModel, *,
                     lr: float, batch_size: int, epochs: int, seed: int,
                     beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                     weight_decay: float = 0.01,
                     eval_bundles: Sequence[FeatureBundle] | None = None,
                     max_steps: int | None = None,
                     step_callback: Callable[[int, float], None] | None = None) -> TrainReport:
    """Optimize `model` in place; returns per-epoch statistics.

    Epoch loss is the sample-weighted mean, so it is independent of the
    batch partition.  With lr=0 every update is exactly the identity.
    """
    if not bundles:
        raise ContractError("training dataset is empty")
    if batch_size < 1 or epochs < 1:
        raise ContractError("batch_size and epochs must be positive")
    state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                           weight_decay=weight_decay)
    shuffle = rng_for(seed, "shuffle")
    report = TrainReport()
    n = len(bundles)
    step = 0
    for _ in range(epochs):
        t0 = time.perf_counter()
        order = shuffle.permutation(n)
        loss_sum = 0.0
        correct = 0
        for batch in _batches(order, batch_size):
            if max_steps is not None and step >= max_steps:
                break
            with Tape() as tape:
                tape.watch_all(model.params)
                total = None
                for idx in batch:
                    b = bundles[int(idx)]
                    p = forward(b, model)
                    if int(np.argmax(p.value[0])) == int(np.argmax(b.target)):
                        correct += 1
                    sample_loss = nm.cross_entropy(p, b.target)
                    total = sample_loss if total is None else nm.add(total, sample_loss)
                batch_loss = nm.scale(total, 1.0 / len(batch))
            grads = backward(tape, batch_loss)
            adamw_step(model.params, grads, state)
            loss_sum += batch_loss.item() * len(batch)
            step += 1
            if step_callback is not None:
                step_callback(step, batch_loss.item())
        seen = n if max_steps is None else min(n, step * batch_size)
        if seen == 0:
            break
        eval_acc = evaluate(eval_bundles, model).overall if eval_bundles else None
        report.epochs.append(EpochStats(
            mean_loss=loss_sum / seen,
            train_accuracy=correct / seen,
            eval_accuracy=eval_acc,
            wall_seconds=time.perf_counter() - t0,
        ))
        if max_steps is not None and step >= max_steps:
            break
    return report


def evaluate(bundles: Sequence[FeatureBundle], model) -> EvalReport:
    """Argmax accuracy (ties break to the lowest index), overall and per family.

    Pure function of (bundles, model); `model` only needs a `forward`
    method returning a probability row.
    """
    if not bundles:
        raise ContractError("evaluation dataset is empty")
    totals: dict[str, int] = {}
    hits: dict[str, int] = {}
    correct = 0
    for b in bundles:
        p = model.forward(b)
        ok = int(np.argmax(p.value[0])) == int(np.argmax(b.target))
        fam = family_of(b.id)
        totals[fam] = totals.get(fam, 0) + 1
        if ok:
            correct += 1
            hits[fam] = hits.get(fam, 0) + 1
    per_family = {fam: hits.get(fam, 0) / cnt for fam, cnt in totals.items()}
    return EvalReport(overall=correct / len(bundles), per_family=per_family, n=len(bundles))


# ---------------------------------------------------------------------------
# file-level entry points
# ---------------------------------------------------------------------------


def check_header_matches(header: dict, cfg: RunConfig) -> None:
    dims = cfg.dims
    vocab = cfg.vocab()
    expect = {"d_v": dims.d_v, "d_l": dims.d_l, "d_obj": dims.d_obj, "d_sg": dims.d_sg,
              "answer_vocab": vocab.answer_size, "token_vocab": vocab.token_size}
    for key, want in expect.items():
        if header[key] != want:
            raise ContractError(f"dataset header {key}={header[key]} but config implies {want}")


def train(dataset_path, cfg: RunConfig, out_dir, eval_path=None, *,
          use_objects: bool = True, use_scene_graph: bool = True,
          use_global_visual: bool = True, write_files: bool = True) -> TrainReport:
    """Read a bundle file, train a fresh model, save checkpoint + reports."""
    header, bundles = read_bundles(dataset_path)
    check_header_matches(header, cfg)
    eval_bundles = None
    if eval_path is not None:
        eval_header, eval_bundles = read_bundles(eval_path)
        check_header_matches(eval_header, cfg)
    model = FusionModel(
        cfg.fusion_config(use_objects=use_objects, use_scene_graph=use_scene_graph,
                          use_global_visual=use_global_visual),
        cfg.dims, seed=cfg.seed)
    report = train_on_bundles(
        bundles, model, lr=cfg.optim.lr, batch_size=cfg.optim.batch_size,
        epochs=cfg.optim.epochs, seed=cfg.seed, beta1=cfg.optim.beta1,
        beta2=cfg.optim.beta2, eps=cfg.optim.eps, weight_decay=cfg.optim.weight_decay,
        eval_bundles=eval_bundles)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = out / "checkpoint.fqm"
    save_checkpoint(model, checkpoint)
    report.checkpoint_path = str(checkpoint)
    if write_files:
        with open(out / "train_report.json", "w", encoding="utf-8") as fh:
            json.dump(report.metrics_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")
        with open(out / "timing.txt", "w", encoding="utf-8") as fh:
            for i, e in enumerate(report.epochs):
                fh.write(f"epoch {i} wall_seconds {e.wall_seconds:.3f}\n")
    return report


def evaluate_files(dataset_path, checkpoint_path) -> EvalReport:
    model = load_checkpoint(checkpoint_path)
    header, bundles = read_bundles(dataset_path)
    expect = {"d_v": model.dims.d_v, "d_l": model.dims.d_l,
              "d_obj": model.dims.d_obj, "d_sg": model.dims.d_sg,
              "answer_vocab": model.config.answer_vocab}
    for key, want in expect.items():
        if header[key] != want:
            raise ContractError(
                f"checkpoint expects {key}={want} but dataset header says {header[key]}")
    return evaluate(bundles, model)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _cached_bundles(path: str) -> tuple[FeatureBundle, ...]:
    return tuple(read_bundles(path)[1])


def _ablation_task(args) -> tuple[str, int, float, dict]:
    train_path, test_path, cfg, key, use_obj, use_sg, seed = args
    bundles = _cached_bundles(train_path)
    model = FusionModel(
        cfg.fusion_config(use_objects=use_obj, use_scene_graph=use_sg),
        cfg.dims, seed=seed)
    train_on_bundles(
        bundles, model, lr=cfg.optim.lr, batch_size=cfg.optim.batch_size,
        epochs=cfg.optim.epochs, seed=seed, beta1=cfg.optim.beta1,
        beta2=cfg.optim.beta2, eps=cfg.optim.eps, weight_decay=cfg.optim.weight_decay)
    result = evaluate(_cached_bundles(test_path), model)
    return key, seed, result.overall, result.per_family


def resolve_workers(requested: int | None = None) -> int:
    """Worker process count, capped by the MVCORE_THREADS env var."""
    cap = os.cpu_count() or 1
    env = os.environ.get("MVCORE_THREADS")
    if env:
        try:
            cap = min(cap, max(1, int(env)))
        except ValueError:
            raise ContractError(f"MVCORE_THREADS={env!r} is not an integer") from None
    if requested is not None:
        cap = min(cap, max(1, requested))
    return cap


def run_ablation(train_path, test_path, cfg: RunConfig, seeds: Sequence[int],
                 workers: int | None = None) -> list[AblationRow]:
    """Train every (variant, seed) pair on identical data; median-aggregate.

    Runs execute in isolated processes when more than one worker is
    available; results are aggregated in a fixed order either way.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ContractError(f"ablation needs at least 3 seeds, got {len(seeds)}")
    tasks = [
        (str(train_path), str(test_path), cfg, key, use_obj, use_sg, seed)
        for key, _, use_obj, use_sg in ABLATION_VARIANTS
        for seed in seeds
    ]
    n_workers = resolve_workers(workers)
    if n_workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(n_workers, len(tasks))) as pool:
            results = list(pool.map(_ablation_task, tasks))
    else:
        results = [_ablation_task(t) for t in tasks]

    by_key: dict[str, list[tuple[int, float, dict]]] = {}
    for key, seed, overall, per_family in results:
        by_key.setdefault(key, []).append((seed, overall, per_family))
    rows = []
    for key, label, use_obj, use_sg in ABLATION_VARIANTS:
        runs = sorted(by_key[key])
        overall = statistics.median(r[1] for r in runs)
        fams = sorted({f for _, _, pf in runs for f in pf})
        per_family = {f: statistics.median(pf.get(f, 0.0) for _, _, pf in runs) for f in fams}
        rows.append(AblationRow(
            key=key, label=label, use_objects=use_obj, use_scene_graph=use_sg,
            use_global_visual=True, overall=overall, per_family=per_family,
            per_seed_overall=[r[1] for r in runs]))
    return rows


def ablation_ordering_ok(rows: Sequence[AblationRow]) -> bool:
    """full beats each single ablation; each single ablation beats dropping both."""
    acc = {r.key: r.overall for r in rows}
    return (acc["full"] > acc["no_sg"] and acc["full"] > acc["no_obj"]
            and min(acc["no_sg"], acc["no_obj"]) > acc["no_obj_no_sg"])


def render_ablation_table(rows: Sequence[AblationRow]) -> str:
    fams = sorted({f for r in rows for f in r.per_family})
    headers = ["configuration", "overall"] + fams
    body = [[r.label, f"{r.overall:.3f}"] + [f"{r.per_family.get(f, 0.0):.3f}" for f in fams]
            for r in rows]
    widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(headers)]
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(headers)] + [line(row) for row in body]) + "\n"


def write_ablation_report(rows: Sequence[AblationRow], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump({"rows": [r.as_dict() for r in rows],
                   "ordering_ok": ablation_ordering_ok(rows)}, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(out / "ablation_table.txt", "w", encoding="utf-8") as fh:
        fh.write(render_ablation_table(rows))
