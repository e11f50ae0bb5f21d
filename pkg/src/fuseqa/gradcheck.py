"""Central finite-difference verification of the end-to-end gradients.

For every parameter entry, the loss is re-evaluated at +/- h and the
symmetric difference quotient is compared against the tape's analytic
gradient.  Blocks are checked exhaustively; the work can be spread over
worker processes since each entry's two loss evaluations are independent.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

import numpy as np

from .features import FeatureBundle, ObjectFeatureSet, SceneGraphFeatureSet, StreamDims
from .fusion import FusionConfig, FusionModel, loss
from .numerics import GradientStore, Matrix, Tape, backward
from .seeding import rng_for

TINY_DIMS = StreamDims(d_v=8, d_l=8, d_obj=8, d_sg=8)
TINY_ARCH = dict(dim=16, layers=2, heads=2, ffn_dim=8)
TINY_VOCAB = 7


def synthetic_bundle(dims: StreamDims, answer_vocab: int, seed: int, *,
                     tokens: int = 4, objects: int = 3, edges: int = 2) -> FeatureBundle:
    """Random, well-formed bundle for exercising the model without a task."""
    rng = rng_for(seed, "synthetic_bundle")
    n_obj = objects
    bboxes = np.zeros((n_obj, 4))
    if n_obj:
        xy = rng.random((n_obj, 2)) * 0.7
        wh = 0.1 + 0.1 * rng.random((n_obj, 2))
        bboxes = np.concatenate([xy, wh], axis=1)
    src = rng.integers(0, max(n_obj, 1), size=edges)
    dst = (src + 1 + rng.integers(0, max(n_obj - 1, 1), size=edges)) % max(n_obj, 1)
    target = np.zeros(answer_vocab)
    target[int(rng.integers(answer_vocab))] = 1.0
    return FeatureBundle(
        id=f"synthetic-{seed}",
        global_visual=rng.normal(size=dims.d_v),
        linguistic=rng.normal(size=(tokens, dims.d_l)),
        token_ids=rng.integers(0, 16, size=tokens),
        objects=ObjectFeatureSet(
            bboxes=bboxes,
            class_ids=rng.integers(0, 8, size=n_obj),
            features=rng.normal(size=(n_obj, dims.d_obj))),
        scene_graph=SceneGraphFeatureSet(
            src=src, dst=dst,
            relation_ids=rng.integers(0, 12, size=edges),
            features=rng.normal(size=(edges, dims.d_sg))),
        target=target,
    )


def tiny_model_and_bundle(seed: int = 0) -> tuple[FusionModel, FeatureBundle]:
    """The small all-streams configuration used by the gradcheck command."""
    config = FusionConfig(answer_vocab=TINY_VOCAB, **TINY_ARCH)
    model = FusionModel(config, TINY_DIMS, seed=seed)
    bundle = synthetic_bundle(TINY_DIMS, TINY_VOCAB, seed=seed, tokens=4, objects=3, edges=2)
    return model, bundle


def analytic_gradients(model: FusionModel, bundle: FeatureBundle) -> tuple[float, GradientStore]:
    with Tape() as tape:
        tape.watch_all(model.params)
        value = loss(bundle, model)
    return value.item(), backward(tape, value)


def _loss_at(model: FusionModel, bundle: FeatureBundle) -> float:
    return loss(bundle, model).item()


GRAD_FLOOR = 1e-4


def _rel_err(a: float, f: float) -> float:
    """|a - f| over max(|a|, |f|, floor).

    Central differences at h=1e-5 on a loss of order one carry ~1e-10 of
    absolute round-off noise, so entries whose true gradient is below the
    floor are judged against the floor instead of their own magnitude; a
    genuinely wrong backward rule still fails loudly since its error is
    proportional to the gradients that matter.
    """
    return abs(a - f) / max(abs(a), abs(f), GRAD_FLOOR)


def _fd_block(model: FusionModel, bundle: FeatureBundle, name: str,
              analytic: np.ndarray, h: float) -> float:
    """Max relative error over every entry of one parameter block."""
    arr = model.params[name].value
    worst = 0.0
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        saved = arr[idx]
        arr[idx] = saved + h
        up = _loss_at(model, bundle)
        arr[idx] = saved - h
        down = _loss_at(model, bundle)
        arr[idx] = saved
        fd = (up - down) / (2.0 * h)
        err = _rel_err(float(analytic[idx]), fd)
        if err > worst:
            worst = err
    return worst


def _fd_worker(payload) -> dict[str, float]:
    config_kwargs, dims, seed, params, bundle, names, analytic, h = payload
    model = FusionModel(FusionConfig(**config_kwargs), dims, seed,
                        params={k: Matrix(v) for k, v in params.items()})
    return {name: _fd_block(model, bundle, name, analytic[name], h) for name in names}


def _partition(sizes: dict[str, int], n: int) -> list[list[str]]:
    """Greedy balanced split of block names by entry count."""
    buckets: list[tuple[int, list[str]]] = [(0, []) for _ in range(n)]
    for name in sorted(sizes, key=lambda k: -sizes[k]):
        load, names = min(buckets, key=lambda b: b[0])
        i = buckets.index((load, names))
        names.append(name)
        buckets[i] = (load + sizes[name], names)
    return [names for _, names in buckets if names]


def gradient_check(model: FusionModel, bundle: FeatureBundle, *, h: float = 1e-5,
                   workers: int = 1) -> dict[str, float]:
    """Per-block max relative error between tape and finite differences."""
    _, grads = analytic_gradients(model, bundle)
    analytic = {name: grads[name] for name in grads.names()}
    names = list(model.params)
    if workers <= 1 or len(names) < 2:
        return {name: _fd_block(model, bundle, name, analytic[name], h) for name in names}
    sizes = {name: model.params[name].value.size for name in names}
    parts = _partition(sizes, workers)
    raw_params = {k: v.value for k, v in model.params.items()}
    config_kwargs = asdict(model.config)
    payloads = [
        (config_kwargs, model.dims, model.seed, raw_params, bundle,
         part, {n: analytic[n] for n in part}, h)
        for part in parts
    ]
    out: dict[str, float] = {}
    with ProcessPoolExecutor(max_workers=len(payloads)) as pool:
        for result in pool.map(_fd_worker, payloads):
            out.update(result)
    return {name: out[name] for name in names}
