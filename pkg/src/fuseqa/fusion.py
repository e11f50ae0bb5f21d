"""Multimodal fusion transformer.

Four streams in a fixed order -- gv (global visual, a one-token
sequence), lang (question tokens), obj (object set), sg (scene-graph
edge set) -- are linearly projected into a common width and mixed by a
stack of identical layers.  Each layer runs:

  1. self-attention on every enabled, non-empty stream;
  2. cross-attention with linguistic queries against gv, obj, sg in turn;
  3. cross-attention sending each visual stream against the updated
     linguistic stream.

Every attention is a pre-norm residual sublayer followed by a pre-norm
residual feed-forward sublayer.  After the last layer each enabled stream
is mean-pooled, the pooled rows are concatenated (zeros for an enabled
set stream that happens to be empty), and a two-layer head produces a
distribution over the answer vocabulary.

Ablations are construction-time: a disabled stream owns no parameters at
all, and initialization draws each parameter from a stream keyed by its
name, so configs that share a parameter name share its initial value
bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ContractError
from .features import FeatureBundle, StreamDims, fmt17
from .numerics import Matrix
from .seeding import rng_for

STREAMS = ("gv", "lang", "obj", "sg")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FusionConfig:
    dim: int
    layers: int
    heads: int
    ffn_dim: int
    answer_vocab: int
    use_global_visual: bool = True
    use_objects: bool = True
    use_scene_graph: bool = True

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def validate(self) -> None:
        if self.layers < 1:
            raise ConfigError("need at least one fusion layer")
        if self.heads < 1 or self.dim % self.heads != 0:
            raise ConfigError(f"width {self.dim} not divisible by {self.heads} heads")
        if self.ffn_dim < 1:
            raise ConfigError("ffn_dim must be positive")
        if self.answer_vocab < 2:
            raise ConfigError("answer vocabulary needs at least 2 entries")

    def enabled_streams(self) -> tuple[str, ...]:
        out = []
        if self.use_global_visual:
            out.append("gv")
        out.append("lang")  # the linguistic stream is always on
        if self.use_objects:
            out.append("obj")
        if self.use_scene_graph:
            out.append("sg")
        return tuple(out)

    def visual_streams(self) -> tuple[str, ...]:
        return tuple(s for s in self.enabled_streams() if s != "lang")

    def cross_schedule(self) -> tuple[tuple[str, str], ...]:
        """(query, key/value) pairs in execution order for one layer."""
        vis = self.visual_streams()
        return tuple([("lang", v) for v in vis] + [(v, "lang") for v in vis])


@dataclass
class ProjectedStreams:
    """Per-stream sequences in the common width; absent key = disabled,
    zero-row matrix = enabled but empty for this sample."""

    streams: dict[str, Matrix]

    def __getitem__(self, key: str) -> Matrix:
        return self.streams[key]

    def __contains__(self, key: str) -> bool:
        return key in self.streams

    def replaced(self, key: str, value: Matrix) -> "ProjectedStreams":
        new = dict(self.streams)
        new[key] = value
        return ProjectedStreams(new)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _block_spec(prefix: str, d: int, ffn: int, with_kv_norm: bool) -> Iterator[tuple[str, tuple[int, int], str]]:
    if with_kv_norm:
        yield f"{prefix}.ln_q.gain", (1, d), "gain"
        yield f"{prefix}.ln_q.shift", (1, d), "shift"
        yield f"{prefix}.ln_kv.gain", (1, d), "gain"
        yield f"{prefix}.ln_kv.shift", (1, d), "shift"
    else:
        yield f"{prefix}.ln_attn.gain", (1, d), "gain"
        yield f"{prefix}.ln_attn.shift", (1, d), "shift"
    for w in ("wq", "wk", "wv", "wo"):
        yield f"{prefix}.{w}", (d, d), "weight"
    yield f"{prefix}.ln_ffn.gain", (1, d), "gain"
    yield f"{prefix}.ln_ffn.shift", (1, d), "shift"
    yield f"{prefix}.ffn_w1", (d, ffn), "weight"
    yield f"{prefix}.ffn_b1", (1, ffn), "bias"
    yield f"{prefix}.ffn_w2", (ffn, d), "weight"
    yield f"{prefix}.ffn_b2", (1, d), "bias"


def parameter_spec(config: FusionConfig, dims: StreamDims) -> Iterator[tuple[str, tuple[int, int], str]]:
    """(name, shape, kind) for every parameter, in fixed declaration order."""
    d, ffn = config.dim, config.ffn_dim
    in_dim = {"gv": dims.d_v, "lang": dims.d_l, "obj": dims.d_obj, "sg": dims.d_sg}
    enabled = config.enabled_streams()
    for s in enabled:
        yield f"proj_{s}.weight", (in_dim[s], d), "weight"
        yield f"proj_{s}.bias", (1, d), "bias"
    for i in range(config.layers):
        for s in enabled:
            yield from _block_spec(f"layer{i}.self_{s}", d, ffn, with_kv_norm=False)
        for q, kv in config.cross_schedule():
            yield from _block_spec(f"layer{i}.cross_{q}_{kv}", d, ffn, with_kv_norm=True)
    fused = d * len(enabled)
    yield "head.w1", (fused, ffn), "weight"
    yield "head.b1", (1, ffn), "bias"
    yield "head.w2", (ffn, config.answer_vocab), "weight"
    yield "head.b2", (1, config.answer_vocab), "bias"


def init_params(config: FusionConfig, dims: StreamDims, seed: int) -> dict[str, Matrix]:
    params: dict[str, Matrix] = {}
    for name, shape, kind in parameter_spec(config, dims):
        if kind == "weight":
            fan_in, fan_out = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = Matrix(rng_for(seed, "init", name).uniform(-a, a, size=shape))
        elif kind == "gain":
            params[name] = Matrix(np.ones(shape))
        else:  # bias / shift
            params[name] = Matrix(np.zeros(shape))
    return params


class FusionModel:
    """Config + parameter dict; forward passes live in module functions."""

    def __init__(self, config: FusionConfig, dims: StreamDims, seed: int,
                 params: dict[str, Matrix] | None = None):
        config.validate()
        self.config = config
        self.dims = dims
        self.seed = seed
        self.params = init_params(config, dims, seed) if params is None else params

    def forward(self, bundle: FeatureBundle, capture: list | None = None) -> Matrix:
        return forward(bundle, self, capture=capture)

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.params.values())


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def project_streams(bundle: FeatureBundle, model: FusionModel) -> ProjectedStreams:
    """Per-stream affine maps into the common width; gv becomes a 1-row sequence."""
    cfg, dims, p = model.config, model.dims, model.params
    raw = {
        "gv": bundle.global_visual.reshape(1, -1),
        "lang": bundle.linguistic,
        "obj": bundle.objects.features,
        "sg": bundle.scene_graph.features,
    }
    expect = {"gv": dims.d_v, "lang": dims.d_l, "obj": dims.d_obj, "sg": dims.d_sg}
    streams: dict[str, Matrix] = {}
    for s in cfg.enabled_streams():
        if raw[s].shape[1] != expect[s]:
            raise ContractError(
                f"bundle stream {s!r} has width {raw[s].shape[1]}, model expects {expect[s]}")
        streams[s] = nm.affine(Matrix(raw[s]), p[f"proj_{s}.weight"], p[f"proj_{s}.bias"])
    if bundle.target.shape[0] != cfg.answer_vocab:
        raise ContractError(
            f"bundle target length {bundle.target.shape[0]} != answer vocab {cfg.answer_vocab}")
    return ProjectedStreams(streams)


def attention_core(q_in: Matrix, kv_in: Matrix, params: dict[str, Matrix], prefix: str,
                   heads: int, capture: list | None = None) -> Matrix:
    q = nm.matmul(q_in, params[f"{prefix}.wq"])
    k = nm.matmul(kv_in, params[f"{prefix}.wk"])
    v = nm.matmul(kv_in, params[f"{prefix}.wv"])
    a = nm.multihead_attention(q, k, v, heads, capture=capture)
    return nm.matmul(a, params[f"{prefix}.wo"])


def _ffn_sublayer(x: Matrix, params: dict[str, Matrix], prefix: str) -> Matrix:
    h = nm.layer_norm(x, params[f"{prefix}.ln_ffn.gain"], params[f"{prefix}.ln_ffn.shift"])
    h = nm.affine(h, params[f"{prefix}.ffn_w1"], params[f"{prefix}.ffn_b1"])
    h = nm.tanh_unit(h)
    h = nm.affine(h, params[f"{prefix}.ffn_w2"], params[f"{prefix}.ffn_b2"])
    return nm.add(x, h)


def self_attention(x: Matrix, params: dict[str, Matrix], prefix: str, heads: int,
                   capture: list | None = None) -> Matrix:
    """Pre-norm residual self-attention sublayer plus its FFN sublayer."""
    h = nm.layer_norm(x, params[f"{prefix}.ln_attn.gain"], params[f"{prefix}.ln_attn.shift"])
    x = nm.add(x, attention_core(h, h, params, prefix, heads, capture))
    return _ffn_sublayer(x, params, prefix)


def cross_attention(x_q: Matrix, x_kv: Matrix, params: dict[str, Matrix], prefix: str,
                    heads: int, capture: list | None = None) -> Matrix:
    """Same sublayer math as self_attention, with keys/values from the
    other stream; the residual stays on the query stream."""
    h_q = nm.layer_norm(x_q, params[f"{prefix}.ln_q.gain"], params[f"{prefix}.ln_q.shift"])
    h_kv = nm.layer_norm(x_kv, params[f"{prefix}.ln_kv.gain"], params[f"{prefix}.ln_kv.shift"])
    x_q = nm.add(x_q, attention_core(h_q, h_kv, params, prefix, heads, capture))
    return _ffn_sublayer(x_q, params, prefix)


def fusion_layer(streams: ProjectedStreams, model: FusionModel, layer: int,
                 capture: list | None = None) -> ProjectedStreams:
    """One full mixing layer; empty streams are skipped, as are cross
    blocks touching them."""
    cfg, p = model.config, model.params
    heads = cfg.heads
    out = dict(streams.streams)
    for s in cfg.enabled_streams():
        if out[s].rows > 0:
            out[s] = self_attention(out[s], p, f"layer{layer}.self_{s}", heads, capture)
    for q, kv in cfg.cross_schedule():
        if out[q].rows > 0 and out[kv].rows > 0:
            out[q] = cross_attention(out[q], out[kv], p, f"layer{layer}.cross_{q}_{kv}",
                                     heads, capture)
    return ProjectedStreams(out)


def fuse_and_pool(streams: ProjectedStreams, config: FusionConfig) -> Matrix:
    """Mean-pool each enabled stream and concatenate in stream order;
    an empty set stream contributes a zero row."""
    parts = []
    for s in config.enabled_streams():
        m = streams[s]
        parts.append(nm.mean_rows(m) if m.rows > 0 else Matrix.zeros(1, config.dim))
    return nm.hconcat(parts)


def predict(h_fused: Matrix, model: FusionModel) -> Matrix:
    """Two-layer head then row softmax; output sums to 1."""
    p = model.params
    if h_fused.cols != p["head.w1"].rows:
        raise ContractError(
            f"fused vector width {h_fused.cols} != head input {p['head.w1'].rows}")
    h = nm.affine(h_fused, p["head.w1"], p["head.b1"])
    h = nm.tanh_unit(h)
    logits = nm.affine(h, p["head.w2"], p["head.b2"])
    return nm.softmax_rows(logits)


def forward(bundle: FeatureBundle, model: FusionModel, capture: list | None = None) -> Matrix:
    """Full pass: project, mix for `layers` rounds, pool, predict.  Returns
    the 1 x answer_vocab probability row."""
    streams = project_streams(bundle, model)
    for i in range(model.config.layers):
        streams = fusion_layer(streams, model, i, capture)
    return predict(fuse_and_pool(streams, model.config), model)


def loss(bundle: FeatureBundle, model: FusionModel) -> Matrix:
    """Cross-entropy of the predicted distribution against the bundle target."""
    return nm.cross_entropy(forward(bundle, model), bundle.target)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: FusionModel, path) -> None:
    """Header line (config + dims + seed), then parameter blocks in
    declaration order as `name rows cols` + one text row per matrix row."""
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "dims": asdict(model.dims),
        "seed": model.seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for name, shape, _ in parameter_spec(model.config, model.dims):
            v = model.params[name].value
            fh.write(f"{name} {shape[0]} {shape[1]}\n")
            for row in v:
                fh.write(" ".join(fmt17(x) for x in row) + "\n")


def load_checkpoint(path) -> FusionModel:
    """Inverse of save_checkpoint; rejects files whose blocks do not match
    the declaration order implied by their own header config."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ContractError(f"checkpoint {path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ContractError(f"checkpoint {path}: bad header: {e}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"checkpoint {path}: unsupported version {header.get('version')}")
    config = FusionConfig(**header["config"])
    dims = StreamDims(**header["dims"])
    config.validate()
    params: dict[str, Matrix] = {}
    at = 1
    for name, shape, _ in parameter_spec(config, dims):
        if at >= len(lines):
            raise ContractError(f"checkpoint {path}: truncated before block {name!r}")
        head = lines[at].split()
        if len(head) != 3 or head[0] != name:
            raise ContractError(
                f"checkpoint {path}: expected block {name!r} at line {at + 1}, got {lines[at]!r}")
        rows, cols = int(head[1]), int(head[2])
        if (rows, cols) != shape:
            raise ContractError(
                f"checkpoint {path}: block {name!r} has shape {(rows, cols)}, config implies {shape}")
        block = np.empty(shape)
        for r in range(rows):
            vals = lines[at + 1 + r].split()
            if len(vals) != cols:
                raise ContractError(
                    f"checkpoint {path}: block {name!r} row {r} has {len(vals)} values, wants {cols}")
            block[r] = [float(x) for x in vals]
        nm.ensure_finite(block, f"checkpoint block {name!r}")
        params[name] = Matrix(block)
        at += 1 + rows
    if at != len(lines):
        raise ContractError(f"checkpoint {path}: {len(lines) - at} trailing lines after last block")
    return FusionModel(config, dims, int(header["seed"]), params=params)
