import copy

import numpy as np
import pytest

from fuseqa.config import ArchConfig, OptimConfig, RunConfig
from fuseqa.features import StreamDims
from fuseqa.synthtask import TaskConfig, gen_dataset


def permute_bundle(bundle, seed):
    """Shuffle object rows and scene-graph edge rows consistently."""
    g = np.random.default_rng(seed)
    b = copy.deepcopy(bundle)
    po = g.permutation(b.objects.features.shape[0])
    b.objects.features = b.objects.features[po]
    b.objects.bboxes = b.objects.bboxes[po]
    b.objects.class_ids = b.objects.class_ids[po]
    inv = np.argsort(po)
    pe = g.permutation(b.scene_graph.features.shape[0])
    b.scene_graph.features = b.scene_graph.features[pe]
    b.scene_graph.src = inv[b.scene_graph.src[pe]]
    b.scene_graph.dst = inv[b.scene_graph.dst[pe]]
    b.scene_graph.relation_ids = b.scene_graph.relation_ids[pe]
    return b


def mini_run_config(seed: int = 5, **optim_kw) -> RunConfig:
    """Small config for fast end-to-end tests (not the desk preset)."""
    optim = dict(lr=1e-3, batch_size=8, epochs=2)
    optim.update(optim_kw)
    return RunConfig(
        preset="desk", seed=seed,
        task=TaskConfig(worlds=12, questions_per_world=4, seed=seed),
        dims=StreamDims(d_v=12, d_l=16, d_obj=24, d_sg=60),
        arch=ArchConfig(dim=16, layers=1, heads=2, ffn_dim=16),
        optim=OptimConfig(**optim),
    )


@pytest.fixture(scope="session")
def mini_cfg() -> RunConfig:
    return mini_run_config()


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory, mini_cfg):
    out = tmp_path_factory.mktemp("mini_data")
    gen_dataset(mini_cfg.task, mini_cfg.dims, out)
    return out
