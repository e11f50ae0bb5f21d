"""Run configuration: named presets plus JSON overlay files.

A run config bundles the task generator settings, stream widths, model
architecture, and optimizer hyperparameters under one seed.  `desk` is
sized to train and ablate on a laptop in minutes; `paper` mirrors the
published architecture scale (768 wide, 6 layers, 8 heads, lr 1e-5,
batch 64, 10 epochs) and is meant for construction/shape checks rather
than training, since the real pretrained encoders behind that scale are
not part of this package.

Config files are JSON with the same section names and inherit from a
preset: `{"preset": "desk", "optim": {"epochs": 2}}` overrides one field
and keeps the rest.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass

from .errors import ConfigError
from .features import StreamDims
from .fusion import FusionConfig
from .synthtask import TaskConfig, Vocab


@dataclass(frozen=True)
class ArchConfig:
    dim: int = 64
    layers: int = 3
    heads: int = 4
    ffn_dim: int = 128


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 15

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")


PRESETS: dict[str, dict] = {
    "desk": {
        "seed": 0,
        "task": {},     # TaskConfig defaults are the desk defaults
        "dims": {},     # StreamDims defaults likewise
        "arch": {"dim": 64, "layers": 3, "heads": 4, "ffn_dim": 128},
        "optim": {"lr": 1e-3, "batch_size": 32, "epochs": 15},
    },
    "paper": {
        "seed": 0,
        "task": {},
        "dims": {},
        "arch": {"dim": 768, "layers": 6, "heads": 8, "ffn_dim": 3072},
        "optim": {"lr": 1e-5, "batch_size": 64, "epochs": 10},
    },
}


@dataclass(frozen=True)
class RunConfig:
    preset: str
    seed: int
    task: TaskConfig
    dims: StreamDims
    arch: ArchConfig
    optim: OptimConfig

    def vocab(self) -> Vocab:
        return Vocab(self.task)

    def feature_space(self):
        return self.vocab().feature_space(self.dims)

    def fusion_config(self, *, use_objects: bool = True, use_scene_graph: bool = True,
                      use_global_visual: bool = True) -> FusionConfig:
        return FusionConfig(
            dim=self.arch.dim, layers=self.arch.layers, heads=self.arch.heads,
            ffn_dim=self.arch.ffn_dim, answer_vocab=self.vocab().answer_size,
            use_global_visual=use_global_visual, use_objects=use_objects,
            use_scene_graph=use_scene_graph)

    def validate(self) -> None:
        self.task.validate()
        self.optim.validate()
        self.fusion_config().validate()

    def as_dict(self) -> dict:
        return {
            "preset": self.preset, "seed": self.seed,
            "task": asdict(self.task), "dims": asdict(self.dims),
            "arch": asdict(self.arch), "optim": asdict(self.optim),
        }


def _merge_section(name: str, defaults_cls, preset_part: dict, file_part: dict) -> dict:
    known = set(defaults_cls.__dataclass_fields__)
    merged = dict(preset_part)
    for key, value in file_part.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in config section {name!r}")
        merged[key] = value
    bad = set(merged) - known
    if bad:
        raise ConfigError(f"unknown preset keys in section {name!r}: {sorted(bad)}")
    return merged


def load_run_config(path=None, preset: str | None = None, seed: int | None = None) -> RunConfig:
    """Build a validated RunConfig from (preset <- file <- flag overrides)."""
    file_cfg: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    allowed = {"preset", "seed", "task", "dims", "arch", "optim"}
    bad = set(file_cfg) - allowed
    if bad:
        raise ConfigError(f"unknown top-level config keys: {sorted(bad)}")

    name = preset or file_cfg.get("preset") or "desk"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = copy.deepcopy(PRESETS[name])

    run_seed = seed if seed is not None else file_cfg.get("seed", base["seed"])
    if not isinstance(run_seed, int):
        raise ConfigError(f"seed must be an integer, got {run_seed!r}")

    sections = {}
    for section, cls in (("task", TaskConfig), ("dims", StreamDims),
                         ("arch", ArchConfig), ("optim", OptimConfig)):
        part = file_cfg.get(section, {})
        if not isinstance(part, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        sections[section] = _merge_section(section, cls, base[section], part)

    sections["task"]["seed"] = run_seed
    try:
        cfg = RunConfig(
            preset=name, seed=run_seed,
            task=TaskConfig(**sections["task"]),
            dims=StreamDims(**sections["dims"]),
            arch=ArchConfig(**sections["arch"]),
            optim=OptimConfig(**sections["optim"]),
        )
    except TypeError as e:
        raise ConfigError(f"bad config value: {e}") from None
    cfg.validate()
    return cfg
