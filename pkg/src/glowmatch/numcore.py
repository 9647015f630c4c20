"""Dense numeric kernel: tensors, reverse-mode gradients, FLOP accounting.

Every learned operation in the package flows through this module so that
gradient checking, 32/64-bit precision selection, and FLOP accounting have a
single choke point.  A ``Tensor`` wraps one C-order numpy array plus the
bookkeeping needed for the backward pass; a ``Tape`` records the operation
graph while active and replays it in reverse.

Reductions that run along a point axis (softmax normalizers, attention
aggregation) optionally use a value-sorted, order-canonical summation so that
forward results are bit-identical under any permutation of the input points.
That mode is slow and meant for invariant checks; see ``exact_reductions``.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit, log_expit

from .errors import ContractViolation

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

LAYERNORM_EPS = 1e-5

_state = threading.local()


def _tape() -> "Tape | None":
    return getattr(_state, "tape", None)


def _exact() -> bool:
    return getattr(_state, "exact", False)


@contextmanager
def exact_reductions():
    """Run point-axis reductions in order-canonical (value-sorted) form.

    Forward-only; intended for permutation-equivariance checks, not training.
    """
    prev = _exact()
    _state.exact = True
    try:
        yield
    finally:
        _state.exact = prev


def _csum(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum along ``axis``; order-canonical when exact mode is active."""
    if _exact():
        x = np.sort(x, axis=axis)
    return x.sum(axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------


class FlopCounter:
    """Tally of multiply-accumulate counts, grouped by labeled phase.

    Only dense contractions (matmul-like ops) are counted, one MAC per scalar
    multiply-add; softmax/elementwise work is excluded so phase totals stay
    exactly polynomial in the active point counts.
    """

    def __init__(self):
        self.enabled = False
        self._phase = "other"
        self.counts: dict[str, int] = {}

    def reset(self):
        self.counts = {}

    def add(self, macs: int):
        if self.enabled:
            self.counts[self._phase] = self.counts.get(self._phase, 0) + int(macs)

    def total(self) -> int:
        return sum(self.counts.values())

    def get(self, phase: str) -> int:
        return self.counts.get(phase, 0)

    @contextmanager
    def phase(self, label: str):
        prev = self._phase
        self._phase = label
        try:
            yield self
        finally:
            self._phase = prev

    @contextmanager
    def counting(self):
        prev = self.enabled
        self.enabled = True
        try:
            yield self
        finally:
            self.enabled = prev


flops = FlopCounter()


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A numpy array plus adjoint bookkeeping for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[-1]

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def _accum(self, g: np.ndarray, fresh: bool = False):
        # ``fresh`` marks arrays allocated solely for this adjoint, which may
        # be adopted without a defensive copy.
        if self.grad is None:
            if fresh:
                self.grad = g
            else:
                self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=self.data.dtype)
        else:
            self.grad += g

    # Operator sugar; the free functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records the operation graph; replays adjoints in reverse order.

    One tape serves one forward/backward cycle on one thread.  Nodes are
    appended in execution order, which is a valid topological order, so the
    backward pass is a single reversed sweep over the recorded list.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._entered = False

    def __enter__(self):
        if _tape() is not None:
            raise ContractViolation("nested gradient tapes are not supported")
        _state.tape = self
        self._entered = True
        return self

    def __exit__(self, *exc):
        _state.tape = None
        self._entered = False
        return False

    def watch(self, t: Tensor):
        t.requires_grad = True

    def backward(self, output: Tensor) -> None:
        """Fill ``.grad`` on every parameter reachable from ``output``.

        Unreached leaves keep ``grad=None`` (i.e. exactly zero contribution).
        """
        if output.data.size != 1:
            raise ContractViolation("backward expects a scalar output")
        recorded = {id(n) for n in self.nodes}
        if id(output) not in recorded:
            raise ContractViolation("output was not recorded on this tape")
        # Each node's adjoint is complete once every downstream consumer ran,
        # which the reversed execution order guarantees.
        output.grad = np.ones_like(output.data)
        needed = _reachable(output)
        for node in reversed(self.nodes):
            if id(node) in needed and node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def gradients(self, params) -> dict:
        return {name: p.grad for name, p in params.items()}


def _reachable(output: Tensor) -> set:
    seen = set()
    stack = [output]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.extend(t._parents)
    return seen


def backward(tape: Tape, output: Tensor) -> None:
    """Module-level alias for ``tape.backward(output)``."""
    tape.backward(output)


def _make(data: np.ndarray, parents: tuple, bwd) -> Tensor:
    out = Tensor(data)
    tape = _tape()
    req = any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    if tape is not None and req:
        out.requires_grad = True
        out._parents = tuple(p for p in parents if isinstance(p, Tensor))
        out._backward = bwd
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def constant(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Arithmetic primitives
# ---------------------------------------------------------------------------


def _as_array(x):
    # Python scalars stay scalars so numpy's weak promotion keeps the array
    # dtype (wrapping 0.5 in an array would upcast float32 work to float64).
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, (int, float)):
        return x
    return np.asarray(x)


def _accum_unbroadcast(t: Tensor, g: np.ndarray, shape):
    red = _unbroadcast(g, shape)
    t._accum(red, fresh=red is not g)


def add(a, b) -> Tensor:
    ad, bd = _as_array(a), _as_array(b)
    out_data = ad + bd

    def bwd(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum_unbroadcast(a, g, ad.shape)
        if isinstance(b, Tensor) and b.requires_grad:
            _accum_unbroadcast(b, g, bd.shape)

    return _make(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    ad, bd = _as_array(a), _as_array(b)
    out_data = ad - bd

    def bwd(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum_unbroadcast(a, g, ad.shape)
        if isinstance(b, Tensor) and b.requires_grad:
            b._accum(_unbroadcast(-g, bd.shape), fresh=True)

    return _make(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    ad, bd = _as_array(a), _as_array(b)
    out_data = ad * bd

    def bwd(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a._accum(_unbroadcast(g * bd, ad.shape), fresh=True)
        if isinstance(b, Tensor) and b.requires_grad:
            b._accum(_unbroadcast(g * ad, bd.shape), fresh=True)

    return _make(out_data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product; 2-D or identically-batched 3-D operands."""
    ad, bd = _as_array(a), _as_array(b)
    if ad.shape[-1] != bd.shape[-2]:
        raise ContractViolation(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    if ad.ndim != bd.ndim or ad.ndim not in (2, 3):
        raise ContractViolation(f"matmul expects equal-rank 2-D/3-D operands, got {ad.shape} @ {bd.shape}")
    batch = 1 if ad.ndim == 2 else ad.shape[0]
    flops.add(batch * ad.shape[-2] * ad.shape[-1] * bd.shape[-1])
    out_data = np.matmul(ad, bd)

    def bwd(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a._accum(np.matmul(g, bd.swapaxes(-1, -2)), fresh=True)
        if isinstance(b, Tensor) and b.requires_grad:
            b._accum(np.matmul(ad.swapaxes(-1, -2), g), fresh=True)

    return _make(out_data, (a, b), bwd)


def attn_apply(w, v) -> Tensor:
    """Attention aggregation ``w @ v`` where the contraction runs over points.

    Identical to ``matmul`` except that exact-reduction mode replaces the
    contraction with an order-canonical sum, making the result invariant to
    the ordering of the source points.
    """
    if not _exact():
        return matmul(w, v)
    wd, vd = _as_array(w), _as_array(v)
    batch = 1 if wd.ndim == 2 else wd.shape[0]
    flops.add(batch * wd.shape[-2] * wd.shape[-1] * vd.shape[-1])
    prods = wd[..., :, :, None] * vd[..., None, :, :]  # (..., i, j, k)
    out_data = _csum(prods, axis=-2)

    def bwd(g):
        if isinstance(w, Tensor) and w.requires_grad:
            w._accum(np.matmul(g, vd.swapaxes(-1, -2)), fresh=True)
        if isinstance(v, Tensor) and v.requires_grad:
            v._accum(np.matmul(wd.swapaxes(-1, -2), g), fresh=True)

    return _make(out_data, (w, v), bwd)


def concat(parts, axis: int = -1) -> Tensor:
    datas = [_as_array(p) for p in parts]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(p, Tensor) and p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accum(g[tuple(idx)])

    return _make(out_data, tuple(parts), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    ad = _as_array(a)
    out_data = ad.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a._accum(g.reshape(ad.shape))

    return _make(out_data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    # Materialized C-order: downstream matmuls hit the fast BLAS path.
    ad = _as_array(a)
    out_data = np.ascontiguousarray(np.transpose(ad, axes))
    inv = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            a._accum(np.ascontiguousarray(np.transpose(g, inv)), fresh=True)

    return _make(out_data, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    ad = _as_array(a)
    out_data = np.asarray(ad.sum())

    def bwd(g):
        if a.requires_grad:
            a._accum(np.broadcast_to(g, ad.shape).astype(ad.dtype), fresh=True)

    return _make(out_data, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    ad = _as_array(a)
    n = ad.size
    out_data = np.asarray(ad.sum() / n)

    def bwd(g):
        if a.requires_grad:
            a._accum(np.broadcast_to(g / n, ad.shape).astype(ad.dtype), fresh=True)

    return _make(out_data, (a,), bwd)


def take_pairs(m: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather ``m[rows[k], cols[k]]`` into a vector; adjoint scatter-adds."""
    md = _as_array(m)
    out_data = md[rows, cols]

    def bwd(g):
        if m.requires_grad:
            gm = np.zeros_like(md)
            np.add.at(gm, (rows, cols), g)
            m._accum(gm, fresh=True)

    return _make(out_data, (m,), bwd)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    ad = _as_array(a)
    out_data = ad[idx]

    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(ad)
            np.add.at(ga, idx, g)
            a._accum(ga, fresh=True)

    return _make(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# Nonlinearities and normalizers
# ---------------------------------------------------------------------------


def softmax_rows(m) -> Tensor:
    """Row-stabilized softmax along the last axis."""
    return softmax(m, axis=-1)


def softmax(a, axis: int = -1) -> Tensor:
    ad = _as_array(a)
    e = ad - ad.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    if _exact():
        out_data = e / _csum(e, axis=axis, keepdims=True)
    else:
        e /= e.sum(axis=axis, keepdims=True)
        out_data = e

    def bwd(g):
        if isinstance(a, Tensor) and a.requires_grad:
            prod = g * out_data
            dot = prod.sum(axis=axis, keepdims=True)
            np.subtract(g, dot, out=prod)
            prod *= out_data
            a._accum(prod, fresh=True)

    return _make(out_data, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    ad = _as_array(a)
    shifted = ad - ad.max(axis=axis, keepdims=True)
    probs = np.exp(shifted)
    ssum = _csum(probs, axis=axis, keepdims=True)
    shifted -= np.log(ssum)
    out_data = shifted
    probs /= ssum

    def bwd(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a._accum(g - probs * g.sum(axis=axis, keepdims=True), fresh=True)

    return _make(out_data, (a,), bwd)


def sigmoid(a) -> Tensor:
    ad = _as_array(a)
    out_data = expit(ad)

    def bwd(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a._accum(g * out_data * (1.0 - out_data), fresh=True)

    return _make(out_data, (a,), bwd)


def log_sigmoid(a) -> Tensor:
    ad = _as_array(a)
    out_data = log_expit(ad)

    def bwd(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a._accum(g * expit(-ad), fresh=True)

    return _make(out_data, (a,), bwd)


def gelu(a) -> Tensor:
    """Exact Gaussian-CDF GeLU (erf form, not the tanh approximation)."""
    ad = _as_array(a)
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))
    out_data = ad * cdf

    def bwd(g):
        if isinstance(a, Tensor) and a.requires_grad:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * ad * ad)
            a._accum(g * (cdf + ad * pdf), fresh=True)

    return _make(out_data, (a,), bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """LayerNorm over the last axis with learned scale and shift."""
    ad, gd, bd = _as_array(a), _as_array(gamma), _as_array(beta)
    mu = ad.mean(axis=-1, keepdims=True)
    xc = ad - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gd + bd

    def bwd(g):
        n = ad.shape[-1]
        if isinstance(gamma, Tensor) and gamma.requires_grad:
            gamma._accum(_unbroadcast(g * xhat, gd.shape), fresh=True)
        if isinstance(beta, Tensor) and beta.requires_grad:
            _accum_unbroadcast(beta, g, bd.shape)
        if isinstance(a, Tensor) and a.requires_grad:
            gx = g * gd
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            term *= inv
            a._accum(term, fresh=True)

    return _make(out_data, (a, gamma, beta), bwd)


def rotate_pairs(x, theta) -> Tensor:
    """Rotate consecutive coordinate pairs of ``x`` by the angles ``theta``.

    ``x``: (..., N, 2K); ``theta``: (N, K), broadcast over leading axes.
    Pair ``(x[..., 2k], x[..., 2k+1])`` is rotated by ``theta[..., k]``, which
    preserves the norm of every pair.  Gradients flow into both operands.
    """
    xd, td = _as_array(x), _as_array(theta)
    if xd.shape[-1] % 2 != 0:
        raise ContractViolation(f"rotate_pairs needs an even last dimension, got {xd.shape}")
    if xd.shape[-1] != 2 * td.shape[-1]:
        raise ContractViolation(f"angle count {td.shape} does not match vector width {xd.shape}")
    c, s = np.cos(td), np.sin(td)
    xe, xo = xd[..., 0::2], xd[..., 1::2]
    ye = xe * c - xo * s
    yo = xe * s + xo * c
    out_data = np.empty(xd.shape, dtype=xd.dtype)
    out_data[..., 0::2] = ye
    out_data[..., 1::2] = yo

    def bwd(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        if isinstance(x, Tensor) and x.requires_grad:
            gx = np.empty(xd.shape, dtype=xd.dtype)
            gx[..., 0::2] = ge * c + go * s
            gx[..., 1::2] = -ge * s + go * c
            x._accum(gx, fresh=True)
        if isinstance(theta, Tensor) and theta.requires_grad:
            gt = -ge * yo + go * ye
            theta._accum(_unbroadcast(gt, td.shape), fresh=True)

    return _make(out_data, (x, theta), bwd)


# ---------------------------------------------------------------------------
# Composite blocks
# ---------------------------------------------------------------------------


def linear(x, w, b=None) -> Tensor:
    """``x @ w (+ b)`` with ``w`` stored input-major: (d_in, d_out)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def mlp_block(x, params) -> Tensor:
    """Hidden linear -> LayerNorm -> exact GeLU -> output linear with bias.

    ``params`` carries w1/b1 (in, hidden), ln_gamma/ln_beta (hidden), and
    w2/b2 (hidden, out).
    """
    xd = _as_array(x)
    if xd.shape[-1] != _as_array(params.w1).shape[0]:
        raise ContractViolation(
            f"mlp_block input width {xd.shape[-1]} != {np.asarray(params.w1.data).shape[0]}"
        )
    h = linear(x, params.w1, params.b1)
    h = layer_norm(h, params.ln_gamma, params.ln_beta)
    h = gelu(h)
    return linear(h, params.w2, params.b2)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def numeric_gradient(f, arrays: list[np.ndarray], eps: float = 1e-5, indices=None):
    """Central finite differences of scalar ``f(arrays)`` w.r.t. each array.

    ``indices`` optionally restricts each array to a list of flat indices;
    the returned gradients hold values only at those positions.
    """
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        idxs = range(flat.size) if indices is None else indices[k]
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads
