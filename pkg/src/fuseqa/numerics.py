"""Dense float64 matrix kernel with a reverse-mode gradient tape.

Everything in the model is a 2-D row-major float64 matrix; vectors are
1xN rows.  Operations run eagerly on numpy and, when a `Tape` is active
on the current thread, append a node carrying the backward rule for that
primitive.  `backward()` walks the node list in reverse and returns the
gradient of a scalar loss for every watched parameter.

The op set is deliberately small: just enough linear algebra, row-softmax,
layer norm, a fused multi-head attention core and a cross-entropy on
probability rows to express the fusion model and train it with AdamW.
The implementations lean on raw ufunc reduces and skip re-validation on
internally produced arrays; finite-difference checking makes tens of
thousands of forward evaluations, so per-op overhead is the budget here.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ContractError, ShapeError

LN_EPS = 1e-5
LOG_CLAMP = 1e-12


class Matrix:
    """2-D float64 array wrapper; the only tensor type in the package."""

    __slots__ = ("value",)

    def __init__(self, value, copy: bool = False):
        arr = np.array(value, dtype=np.float64) if copy else np.asarray(value, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Matrix must be 1-D or 2-D, got shape {arr.shape}")
        self.value = arr

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() on non-scalar matrix of shape {self.shape}")
        return float(self.value[0, 0])

    def copy(self) -> "Matrix":
        return Matrix(self.value.copy())

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"

    @staticmethod
    def zeros(rows: int, cols: int) -> "Matrix":
        return _wrap(np.zeros((rows, cols)))


def _wrap(arr: np.ndarray) -> Matrix:
    """Wrap an array known to be fresh, 2-D and float64 (no checks)."""
    m = Matrix.__new__(Matrix)
    m.value = arr
    return m


def ensure_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{what} contains non-finite values")


class _Node:
    __slots__ = ("op", "inputs", "output", "fwd", "bwd")

    def __init__(self, op, inputs, output, fwd, bwd):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.fwd = fwd      # (*input arrays) -> output array, for replay
        self.bwd = bwd      # grad_out array -> tuple of per-input grad arrays (or None)


_TLS = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_TLS, "tape", None)


class Tape:
    """Ordered record of primitive ops for one forward computation.

    Use as a context manager; ops executed inside the block are recorded
    in execution (hence topological) order.  Parameters are registered by
    name with `watch` so `backward` can report their gradients.
    """

    __slots__ = ("nodes", "_params", "_out_ids", "_prev")

    def __init__(self):
        self.nodes: list[_Node] = []
        self._params: dict[str, Matrix] = {}
        self._out_ids: set[int] = set()
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_TLS, "tape", None)
        _TLS.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _TLS.tape = self._prev
        self._prev = None

    def watch(self, name: str, param: Matrix) -> Matrix:
        if name in self._params and self._params[name] is not param:
            raise ContractError(f"parameter name {name!r} watched twice with different matrices")
        self._params[name] = param
        return param

    def watch_all(self, params: Mapping[str, Matrix]) -> None:
        for name, p in params.items():
            self.watch(name, p)

    @property
    def parameters(self) -> Mapping[str, Matrix]:
        return self._params

    def record(self, op: str, inputs: tuple, output: Matrix, fwd, bwd) -> None:
        self.nodes.append(_Node(op, inputs, output, fwd, bwd))
        self._out_ids.add(id(output))

    def owns(self, m: Matrix) -> bool:
        return id(m) in self._out_ids

    def replay_matches(self) -> bool:
        """Re-execute every recorded forward; True iff all outputs are bit-identical."""
        env: dict[int, np.ndarray] = {}
        for node in self.nodes:
            args = [env.get(id(x), x.value) for x in node.inputs]
            out = node.fwd(*args)
            if not np.array_equal(out, node.output.value):
                return False
            env[id(node.output)] = out
        return True


class GradientStore:
    """Gradients of one scalar loss, keyed by parameter name."""

    __slots__ = ("_grads",)

    def __init__(self, grads: dict[str, np.ndarray]):
        self._grads = grads

    def __getitem__(self, name: str) -> np.ndarray:
        return self._grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._grads.items())

    def names(self) -> list[str]:
        return list(self._grads)


def backward(tape: Tape, loss: Matrix) -> GradientStore:
    """Reverse sweep over the tape; returns d(loss)/d(param) for every watched param.

    Gradients of unwatched intermediates are accumulated during the sweep
    and discarded afterwards.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"loss must be a 1x1 scalar, got shape {loss.shape}")
    if not tape.owns(loss):
        raise ContractError("loss is not an output recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    get = grads.get
    for node in reversed(tape.nodes):
        g_out = get(id(node.output))
        if g_out is None:
            continue
        for x, g in zip(node.inputs, node.bwd(g_out)):
            if g is None:
                continue
            k = id(x)
            acc = get(k)
            if acc is None:
                grads[k] = g
            else:
                acc += g
    out = {}
    for name, p in tape.parameters.items():
        g = grads.get(id(p))
        out[name] = g.copy() if g is not None else np.zeros_like(p.value)
    return GradientStore(out)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if type(a) is not Matrix:
        a = Matrix(a)
    if type(b) is not Matrix:
        b = Matrix(b)
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, "
                         f"{av.shape[0]}x{av.shape[1]} @ {bv.shape[0]}x{bv.shape[1]}")
    out = _wrap(av @ bv)
    t = getattr(_TLS, "tape", None)
    if t is not None:
        def bwd(g):
            return g @ bv.T, av.T @ g
        t.record("matmul", (a, b), out, lambda x, y: x @ y, bwd)
    return out


def add(a: Matrix, b: Matrix) -> Matrix:
    if type(a) is not Matrix:
        a = Matrix(a)
    if type(b) is not Matrix:
        b = Matrix(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    out = _wrap(a.value + b.value)
    t = getattr(_TLS, "tape", None)
    if t is not None:
        # second copy keeps gradient buffers unaliased during accumulation
        t.record("add", (a, b), out, lambda x, y: x + y, lambda g: (g, g.copy()))
    return out


def mul(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise (Hadamard) product."""
    if type(a) is not Matrix:
        a = Matrix(a)
    if type(b) is not Matrix:
        b = Matrix(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shapes differ, {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    out = _wrap(av * bv)
    t = getattr(_TLS, "tape", None)
    if t is not None:
        t.record("mul", (a, b), out, lambda x, y: x * y, lambda g: (g * bv, g * av))
    return out


def scale(a: Matrix, c: float) -> Matrix:
    if type(a) is not Matrix:
        a = Matrix(a)
    c = float(c)
    out = _wrap(a.value * c)
    t = getattr(_TLS, "tape", None)
    if t is not None:
        t.record("scale", (a,), out, lambda x: x * c, lambda g: (g * c,))
    return out


def transpose(a: Matrix) -> Matrix:
    if type(a) is not Matrix:
        a = Matrix(a)
    out = _wrap(a.value.T.copy())
    t = getattr(_TLS, "tape", None)
    if t is not None:
        t.record("transpose", (a,), out, lambda x: x.T.copy(), lambda g: (g.T.copy(),))
    return out


def affine(x: Matrix, w: Matrix, b: Matrix) -> Matrix:
    """x @ w + b with b a 1xN row broadcast over the rows of x."""
    if type(x) is not Matrix:
        x = Matrix(x)
    xv, wv, bv = x.value, w.value, b.value
    if xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"affine: inner dims differ, {xv.shape} @ {wv.shape}")
    if bv.shape != (1, wv.shape[1]):
        raise ShapeError(f"affine: bias must be 1x{wv.shape[1]}, got {bv.shape}")
    o = xv @ wv
    np.add(o, bv, out=o)
    out = _wrap(o)
    t = getattr(_TLS, "tape", None)
    if t is not None:
        def bwd(g):
            return g @ wv.T, xv.T @ g, g.sum(axis=0, keepdims=True)
        t.record("affine", (x, w, b), out, lambda xx, ww, bb: xx @ ww + bb, bwd)
    return out


def hconcat(parts: Sequence[Matrix]) -> Matrix:
    parts = [p if type(p) is Matrix else Matrix(p) for p in parts]
    if not parts:
        raise ShapeError("hconcat of zero matrices")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError(f"hconcat: row counts differ, {rows} vs {p.rows}")
    widths = [p.cols for p in parts]
    out = _wrap(np.concatenate([p.value for p in parts], axis=1))
    t = getattr(_TLS, "tape", None)
    if t is not None:
        edges = np.cumsum([0] + widths)
        def bwd(g):
            return tuple(g[:, edges[i]:edges[i + 1]].copy() for i in range(len(widths)))
        t.record("hconcat", tuple(parts), out,
                 lambda *xs: np.concatenate(xs, axis=1), bwd)
    return out


def mean_rows(a: Matrix) -> Matrix:
    """Column means as a 1xN row (mean pooling over the sequence axis)."""
    if type(a) is not Matrix:
        a = Matrix(a)
    n = a.value.shape[0]
    if n < 1:
        raise ShapeError("mean_rows on empty matrix")
    o = np.add.reduce(a.value, axis=0, keepdims=True)
    o *= 1.0 / n
    out = _wrap(o)
    t = getattr(_TLS, "tape", None)
    if t is not None:
        def bwd(g):
            return (np.repeat(g / n, n, axis=0),)
        t.record("mean_rows", (a,), out, lambda x: x.mean(axis=0, keepdims=True), bwd)
    return out


def sum_all(a: Matrix) -> Matrix:
    if type(a) is not Matrix:
        a = Matrix(a)
    out = _wrap(np.array([[a.value.sum()]]))
    t = getattr(_TLS, "tape", None)
    if t is not None:
        shape = a.value.shape
        def bwd(g):
            return (np.full(shape, g[0, 0]),)
        t.record("sum_all", (a,), out, lambda x: np.array([[x.sum()]]), bwd)
    return out


def _softmax_last(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.maximum.reduce(x, axis=-1, keepdims=True))
    e /= np.add.reduce(e, axis=-1, keepdims=True)
    return e


def softmax_rows(a: Matrix) -> Matrix:
    """Row-wise softmax, stabilized by row-max subtraction."""
    if type(a) is not Matrix:
        a = Matrix(a)
    y = _softmax_last(a.value)
    out = _wrap(y)
    t = getattr(_TLS, "tape", None)
    if t is not None:
        def bwd(g):
            return (y * (g - (g * y).sum(axis=1, keepdims=True)),)
        t.record("softmax_rows", (a,), out, _softmax_last, bwd)
    return out


def layer_norm(x: Matrix, gain: Matrix, shift: Matrix) -> Matrix:
    """Per-row standardization followed by the affine (gain, shift).

    Variance uses epsilon 1e-5 inside the square root, so a constant row
    maps to the shift exactly.
    """
    if type(x) is not Matrix:
        x = Matrix(x)
    xv, gv, sv = x.value, gain.value, shift.value
    d = xv.shape[1]
    if gv.shape != (1, d) or sv.shape != (1, d):
        raise ShapeError(f"layer_norm: gain/shift must be 1x{d}, got {gv.shape} and {sv.shape}")
    inv_d = 1.0 / d
    mu = np.add.reduce(xv, axis=1, keepdims=True)
    mu *= inv_d
    xc = xv - mu
    var = np.add.reduce(xc * xc, axis=1, keepdims=True)
    var *= inv_d
    var += LN_EPS
    inv = var ** -0.5
    t = getattr(_TLS, "tape", None)
    if t is None:
        o = xc * (inv * gv)
        np.add(o, sv, out=o)
        return _wrap(o)
    xhat = xc * inv
    o = xhat * gv
    np.add(o, sv, out=o)
    out = _wrap(o)

    def fwd(xx, gg, ss):
        m_ = xx.mean(axis=1, keepdims=True)
        c = xx - m_
        i_ = 1.0 / np.sqrt((c * c).mean(axis=1, keepdims=True) + LN_EPS)
        return c * i_ * gg + ss

    def bwd(g):
        d_gain = (g * xhat).sum(axis=0, keepdims=True)
        d_shift = g.sum(axis=0, keepdims=True)
        dxhat = g * gv
        dx = inv * (dxhat
                    - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, d_gain, d_shift

    t.record("layer_norm", (x, gain, shift), out, fwd, bwd)
    return out


def tanh_unit(a: Matrix) -> Matrix:
    """Smooth ReLU-like gate y = x * (1 + tanh(x)) / 2 (= x * sigmoid(2x))."""
    if type(a) is not Matrix:
        a = Matrix(a)
    xv = a.value
    th = np.tanh(xv)
    t = getattr(_TLS, "tape", None)
    if t is None:
        th += 1.0
        th *= xv
        th *= 0.5
        return _wrap(th)
    out = _wrap(xv * (1.0 + th) * 0.5)

    def bwd(g):
        return (g * (0.5 * (1.0 + th) + 0.5 * xv * (1.0 - th * th)),)

    t.record("tanh_unit", (a,), out, lambda x: x * (1.0 + np.tanh(x)) * 0.5, bwd)
    return out


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dk = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dk)


def _mha_forward(qv, kv, vv, heads, inv_scale):
    qh = _split_heads(qv, heads)
    kh = _split_heads(kv, heads)
    vh = _split_heads(vv, heads)
    scores = qh @ kh.transpose(0, 2, 1)
    scores *= inv_scale
    w = _softmax_last(scores)
    return w, _merge_heads(w @ vh)


def multihead_attention(q: Matrix, k: Matrix, v: Matrix, heads: int,
                        capture: list | None = None) -> Matrix:
    """Scaled dot-product attention over `heads` column blocks.

    q is m x D and k, v are n x D with D divisible by heads; per head the
    scores q_h k_h^T are scaled by 1/sqrt(D/heads), row-softmaxed and
    applied to v_h, and head outputs are re-concatenated to m x D.
    If `capture` is given the (heads, m, n) weight array is appended to it.
    """
    if type(q) is not Matrix:
        q = Matrix(q)
    if type(k) is not Matrix:
        k = Matrix(k)
    if type(v) is not Matrix:
        v = Matrix(v)
    d = q.value.shape[1]
    if heads < 1 or d % heads != 0:
        raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
    if k.value.shape[1] != d or v.value.shape[1] != d:
        raise ShapeError(f"attention: widths differ, q {q.shape}, k {k.shape}, v {v.shape}")
    if k.value.shape[0] != v.value.shape[0]:
        raise ShapeError(f"attention: k has {k.rows} rows but v has {v.rows}")
    if q.value.shape[0] < 1 or k.value.shape[0] < 1:
        raise ShapeError("attention: q and k/v need at least one row")
    inv_scale = 1.0 / math.sqrt(d // heads)
    w, merged = _mha_forward(q.value, k.value, v.value, heads, inv_scale)
    if capture is not None:
        capture.append(w)
    out = _wrap(merged)
    t = getattr(_TLS, "tape", None)
    if t is not None:
        qh = _split_heads(q.value, heads)
        kh = _split_heads(k.value, heads)
        vh = _split_heads(v.value, heads)

        def bwd(g):
            gh = _split_heads(g, heads)
            dw = gh @ vh.transpose(0, 2, 1)
            dvh = w.transpose(0, 2, 1) @ gh
            ds = (w * (dw - (dw * w).sum(axis=2, keepdims=True)))
            ds *= inv_scale
            dqh = ds @ kh
            dkh = ds.transpose(0, 2, 1) @ qh
            return _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)

        t.record("multihead_attention", (q, k, v), out,
                 lambda a, b, c: _mha_forward(a, b, c, heads, inv_scale)[1], bwd)
    return out


def cross_entropy(p: Matrix, target) -> Matrix:
    """-sum_i target_i * log(p_i) over one probability row.

    Both rows must sum to 1 within 1e-6; p is clamped at 1e-12 before the
    log so certainty-zero components stay finite.  Supports soft targets.
    """
    if type(p) is not Matrix:
        p = Matrix(p)
    tgt = target.value if type(target) is Matrix else np.asarray(target, dtype=np.float64)
    tgt = tgt.reshape(1, -1)
    pv = p.value
    if pv.shape[0] != 1:
        raise ContractError(f"cross_entropy expects one probability row, got {p.shape}")
    if tgt.shape != pv.shape:
        raise ContractError(f"cross_entropy: lengths differ, {pv.shape[1]} vs {tgt.shape[1]}")
    if abs(pv.sum() - 1.0) > 1e-6:
        raise ContractError(f"probabilities sum to {pv.sum():.9f}, not 1")
    if abs(tgt.sum() - 1.0) > 1e-6:
        raise ContractError(f"target sums to {tgt.sum():.9f}, not 1")
    clamped = np.maximum(pv, LOG_CLAMP)
    out = _wrap(np.array([[-float(np.log(clamped)[0] @ tgt[0])]]))
    t = getattr(_TLS, "tape", None)
    if t is not None:
        def fwd(x):
            return np.array([[-(tgt * np.log(np.maximum(x, LOG_CLAMP))).sum()]])
        def bwd(g):
            dp = np.where(pv >= LOG_CLAMP, -tgt / clamped, 0.0)
            return (g[0, 0] * dp,)
        t.record("cross_entropy", (p,), out, fwd, bwd)
    return out


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW moments plus hyperparameters; one instance per training run."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, Matrix], grads: GradientStore, state: OptimizerState) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay is applied directly to each parameter (never through the moment
    estimates); moments are bias-corrected via the step-dependent rate
    lr * sqrt(1 - beta2^t) / (1 - beta1^t) with epsilon outside the root.
    """
    state.step += 1
    t = state.step
    alpha = state.lr * math.sqrt(1.0 - state.beta2 ** t) / (1.0 - state.beta1 ** t)
    decay = state.lr * state.weight_decay
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        if name not in grads:
            raise ContractError(f"no gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != p.value.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match parameter {name!r} shape {p.value.shape}")
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.value)
            v = state.second_moment[name] = np.zeros_like(p.value)
        else:
            v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        g2 = g * g
        g2 *= 1.0 - b2
        v += g2
        update = np.sqrt(v)
        update += state.eps
        np.divide(m, update, out=update)
        update *= alpha
        p.value *= 1.0 - decay
        p.value -= update
