"""Desk-scale multimodal fusion transformer for synthetic complex VQA."""

from .errors import ConfigError, ContractError, ShapeError
from .numerics import (GradientStore, Matrix, OptimizerState, Tape, adamw_step,
                       backward, cross_entropy, layer_norm, matmul, softmax_rows)
from .features import (FeatureBundle, FeatureSpace, StreamDims, StubEncoders,
                       World, WorldObject, Relation, read_bundles, write_bundles)
from .fusion import (FusionConfig, FusionModel, forward, fuse_and_pool,
                     load_checkpoint, predict, project_streams, save_checkpoint)
from .synthtask import Question, TaskConfig, Vocab, gen_dataset, gen_question, gen_world
from .training import (AblationRow, EvalReport, TrainReport, evaluate,
                       run_ablation, train_on_bundles)
from .config import ArchConfig, OptimConfig, RunConfig, load_run_config

__version__ = "0.1.0"
