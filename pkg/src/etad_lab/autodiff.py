"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op records a node on the active :class:`TapeGraph` (train mode only) and
retains exactly the buffers its backward rule needs. An optional
:class:`Accountant` tracks the bytes of those retained buffers per phase and
counts forward/backward FLOPs with the convention backward == forward.

    acct = Accountant()
    with acct.phase("encoder"), TapeGraph("train") as tape:
        y = relu(x @ w)
        tape.backward(y, seed)
    # leaving the tape block frees every retained buffer
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

BYTES_PER_ELEMENT = 8

_ids = itertools.count()
_local = threading.local()


class AutodiffError(ValueError):
    pass


def _graph_stack():
    if not hasattr(_local, "graphs"):
        _local.graphs = []
    return _local.graphs


def _phase_stack():
    if not hasattr(_local, "phases"):
        _local.phases = []
    return _local.phases


def active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


def is_recording():
    g = active_graph()
    return g is not None and g.mode == "train"


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, param=False, name=None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim and 0 in arr.shape:
            raise AutodiffError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.id = next(_ids)
        self.requires_grad = bool(requires_grad or param)
        self.is_param = param
        self.name = name
        self.grad = None
        self.node = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.id = next(_ids)
        t.requires_grad = False
        t.is_param = False
        t.name = None
        t.grad = None
        t.node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul", self, other)

    def __rmul__(self, other):
        return apply("mul", other, self)

    def __neg__(self):
        return apply("mul", self, -1.0)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __getitem__(self, key):
        return apply("slice", self, key=key)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# accounting


@dataclass
class MemoryReport:
    peak_live_bytes: dict
    current_live_bytes: int
    phase_live_bytes: dict
    breakdown: dict
    peak_total_bytes: int
    param_bytes: int

    def to_dict(self):
        return {
            "peak_live_bytes": dict(sorted(self.peak_live_bytes.items())),
            "current_live_bytes": self.current_live_bytes,
            "phase_live_bytes": dict(sorted(self.phase_live_bytes.items())),
            "breakdown": dict(sorted(self.breakdown.items())),
            "peak_total_bytes": self.peak_total_bytes,
            "param_bytes": self.param_bytes,
        }


@dataclass
class FlopLedger:
    forward_flops: dict = field(default_factory=dict)
    backward_flops: dict = field(default_factory=dict)

    def total(self, phase):
        return self.forward_flops.get(phase, 0) + self.backward_flops.get(phase, 0)

    def to_dict(self):
        return {
            "forward_flops": dict(sorted(self.forward_flops.items())),
            "backward_flops": dict(sorted(self.backward_flops.items())),
        }


class Accountant:
    """Live retained-activation bytes and FLOP counts, keyed by phase label.

    A buffer is attributed to the phase of the first node that retained it;
    buffers shared by several nodes are counted once. Parameter buffers are
    never counted as activations.
    """

    def __init__(self):
        self.reset()

    def reset(self):
        self._live = {}
        self.phase_live = defaultdict(int)
        self.phase_peak = defaultdict(int)
        self.op_live = defaultdict(int)
        self.total_live = 0
        self.total_peak = 0
        self.param_bytes = 0
        self.forward = defaultdict(int)
        self.backward = defaultdict(int)

    def reset_peaks(self):
        self.phase_peak = defaultdict(int, {k: v for k, v in self.phase_live.items()})
        self.total_peak = self.total_live

    @contextlib.contextmanager
    def phase(self, label):
        stack = _phase_stack()
        stack.append((self, label))
        self.phase_peak[label] = max(self.phase_peak[label], self.phase_live[label])
        try:
            yield self
        finally:
            stack.pop()

    def retain(self, arr, phase, op):
        key = id(arr)
        entry = self._live.get(key)
        if entry is not None:
            entry[0] += 1
            return key
        nbytes = arr.size * BYTES_PER_ELEMENT
        self._live[key] = [1, nbytes, phase, op, arr]
        self.total_live += nbytes
        self.phase_live[phase] += nbytes
        self.op_live[op] += nbytes
        self.phase_peak[phase] = max(self.phase_peak[phase], self.phase_live[phase])
        self.total_peak = max(self.total_peak, self.total_live)
        return key

    def release(self, key):
        entry = self._live[key]
        entry[0] -= 1
        if entry[0] == 0:
            _, nbytes, phase, op, _ = entry
            del self._live[key]
            self.total_live -= nbytes
            self.phase_live[phase] -= nbytes
            self.op_live[op] -= nbytes

    def register_params(self, tensors):
        self.param_bytes = sum(t.size * BYTES_PER_ELEMENT for t in tensors)

    def snapshot_memory(self, phase_label=None):
        peaks = dict(self.phase_peak)
        live = dict(self.phase_live)
        if phase_label is not None:
            peaks = {phase_label: peaks.get(phase_label, 0)}
            live = {phase_label: live.get(phase_label, 0)}
        return MemoryReport(
            peak_live_bytes=peaks,
            current_live_bytes=self.total_live,
            phase_live_bytes=live,
            breakdown={k: v for k, v in self.op_live.items() if v},
            peak_total_bytes=self.total_peak,
            param_bytes=self.param_bytes,
        )

    def read_flops(self):
        return FlopLedger(dict(self.forward), dict(self.backward))


def _active_phase():
    stack = _phase_stack()
    return stack[-1] if stack else (None, None)


# ---------------------------------------------------------------------------
# tape


class Node:
    __slots__ = ("op", "inputs", "output", "saved", "attrs", "needs", "flops",
                 "phase", "accountant", "keys", "graph", "index")


class TapeGraph:
    """Ordered record of train-mode ops. Used as a context manager; exiting frees the tape."""

    def __init__(self, mode="train"):
        if mode not in ("train", "eval"):
            raise AutodiffError(f"unknown tape mode {mode!r}")
        self.mode = mode
        self.nodes = []
        self.freed = False

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()
        self.free()
        return False

    @property
    def saved_bytes(self):
        seen = {}
        for node in self.nodes:
            for arr in _saved_arrays(node.saved):
                seen[id(arr)] = arr.size
        return sum(seen.values()) * BYTES_PER_ELEMENT

    def record(self, node):
        node.graph = self
        node.index = len(self.nodes)
        self.nodes.append(node)

    def backward(self, root, seed_grad):
        backward(root, seed_grad)

    def free(self):
        for node in self.nodes:
            if node.accountant is not None:
                for key in node.keys:
                    node.accountant.release(key)
            node.output.node = None
            node.saved = None
            node.inputs = ()
        self.nodes = []
        self.freed = True


def _saved_arrays(saved):
    for value in saved.values():
        if isinstance(value, Tensor):
            if not value.is_param:
                yield value.data
        elif isinstance(value, np.ndarray):
            yield value


def no_tape():
    """Context in which ops record nothing (eval mode)."""
    return TapeGraph("eval")


# ---------------------------------------------------------------------------
# ops


class Op:
    name = ""

    def forward(self, xs, attrs, needs):
        raise NotImplementedError

    def backward(self, g, saved, attrs, needs):
        raise NotImplementedError

    def flops(self, xs, out, attrs):
        return out.size


OPS = {}


def register(cls):
    OPS[cls.name] = cls()
    return cls


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise AutodiffError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


@register
class Add(Op):
    name = "add"

    def forward(self, xs, attrs, needs):
        a, b = xs
        _broadcast_shape(self.name, a, b)
        attrs["shapes"] = (a.shape, b.shape)
        return a + b, {}

    def backward(self, g, saved, attrs, needs):
        sa, sb = attrs["shapes"]
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)


@register
class Sub(Op):
    name = "sub"

    def forward(self, xs, attrs, needs):
        a, b = xs
        _broadcast_shape(self.name, a, b)
        attrs["shapes"] = (a.shape, b.shape)
        return a - b, {}

    def backward(self, g, saved, attrs, needs):
        sa, sb = attrs["shapes"]
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)


@register
class Mul(Op):
    name = "mul"

    def forward(self, xs, attrs, needs):
        a, b = xs
        _broadcast_shape(self.name, a, b)
        attrs["shapes"] = (a.shape, b.shape)
        saved = {}
        if needs[0]:
            saved["b"] = attrs["inputs"][1]
        if needs[1]:
            saved["a"] = attrs["inputs"][0]
        return a * b, saved

    def backward(self, g, saved, attrs, needs):
        sa, sb = attrs["shapes"]
        ga = _unbroadcast(g * saved["b"].data, sa) if needs[0] else None
        gb = _unbroadcast(g * saved["a"].data, sb) if needs[1] else None
        return ga, gb


def _rowwise_matmul(a, b):
    # per-row reduction order independent of the number of rows
    return np.einsum("ik,kn->in", a, b)


@register
class MatMul(Op):
    name = "matmul"

    def forward(self, xs, attrs, needs):
        a, b = xs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise AutodiffError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        saved = {}
        if needs[0]:
            saved["b"] = attrs["inputs"][1]
        if needs[1]:
            saved["a"] = attrs["inputs"][0]
        if attrs.get("kernel") == "rowwise":
            return _rowwise_matmul(a, b), saved
        return a @ b, saved

    def backward(self, g, saved, attrs, needs):
        ga = g @ saved["b"].data.T if needs[0] else None
        gb = saved["a"].data.T @ g if needs[1] else None
        return ga, gb

    def flops(self, xs, out, attrs):
        m, k = xs[0].shape
        return 2 * m * k * xs[1].shape[1]


@register
class Relu(Op):
    name = "relu"

    def forward(self, xs, attrs, needs):
        out = np.maximum(xs[0], 0.0)
        return out, {"out": out}

    def backward(self, g, saved, attrs, needs):
        return (g * (saved["out"] > 0),)


@register
class Sigmoid(Op):
    name = "sigmoid"

    def forward(self, xs, attrs, needs):
        out = _sigmoid(xs[0])
        return out, {"out": out}

    def backward(self, g, saved, attrs, needs):
        s = saved["out"]
        return (g * s * (1.0 - s),)


def _sigmoid(x):
    # stable for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@register
class Tanh(Op):
    name = "tanh"

    def forward(self, xs, attrs, needs):
        out = np.tanh(xs[0])
        return out, {"out": out}

    def backward(self, g, saved, attrs, needs):
        t = saved["out"]
        return (g * (1.0 - t * t),)


@register
class Exp(Op):
    name = "exp"

    def forward(self, xs, attrs, needs):
        out = np.exp(xs[0])
        return out, {"out": out}

    def backward(self, g, saved, attrs, needs):
        return (g * saved["out"],)


@register
class Log(Op):
    name = "log"

    def forward(self, xs, attrs, needs):
        if np.any(xs[0] <= 0):
            raise AutodiffError("log: input must be strictly positive")
        return np.log(xs[0]), {"x": attrs["inputs"][0]}

    def backward(self, g, saved, attrs, needs):
        return (g / saved["x"].data,)


@register
class LogSigmoid(Op):
    name = "log_sigmoid"

    def forward(self, xs, attrs, needs):
        x = xs[0]
        return -np.logaddexp(0.0, -x), {"x": attrs["inputs"][0]}

    def backward(self, g, saved, attrs, needs):
        return (g * _sigmoid(-saved["x"].data),)


@register
class Sum(Op):
    name = "sum"

    def forward(self, xs, attrs, needs):
        attrs["in_shape"] = xs[0].shape
        return np.sum(xs[0], axis=attrs.get("axis")), {}

    def backward(self, g, saved, attrs, needs):
        return (_expand_reduced(g, attrs["in_shape"], attrs.get("axis")),)

    def flops(self, xs, out, attrs):
        return xs[0].size


@register
class Mean(Op):
    name = "mean"

    def forward(self, xs, attrs, needs):
        attrs["in_shape"] = xs[0].shape
        return np.mean(xs[0], axis=attrs.get("axis")), {}

    def backward(self, g, saved, attrs, needs):
        shape = attrs["in_shape"]
        axis = attrs.get("axis")
        n = int(np.prod(shape)) if axis is None else shape[axis]
        return (_expand_reduced(g / n, shape, axis),)

    def flops(self, xs, out, attrs):
        return xs[0].size


def _expand_reduced(g, shape, axis):
    if axis is None:
        return np.full(shape, g, dtype=np.float64)
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


@register
class Concat(Op):
    name = "concat"

    def forward(self, xs, attrs, needs):
        axis = attrs.get("axis", 0)
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(
                    a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)):
                raise AutodiffError(f"concat: shapes {[x.shape for x in xs]} disagree off axis {axis}")
        attrs["sizes"] = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis), {}

    def backward(self, g, saved, attrs, needs):
        cuts = np.cumsum(attrs["sizes"])[:-1]
        parts = np.split(g, cuts, axis=attrs.get("axis", 0))
        return tuple(p.copy() if need else None for p, need in zip(parts, needs))


@register
class Slice(Op):
    name = "slice"

    def forward(self, xs, attrs, needs):
        attrs["in_shape"] = xs[0].shape
        try:
            out = xs[0][attrs["key"]]
        except IndexError as exc:
            raise AutodiffError(f"slice: {exc} for shape {xs[0].shape}") from None
        return np.array(out, dtype=np.float64), {}

    def backward(self, g, saved, attrs, needs):
        full = np.zeros(attrs["in_shape"])
        key = attrs["key"]
        keys = key if isinstance(key, tuple) else (key,)
        if any(isinstance(k, (list, np.ndarray)) for k in keys):
            np.add.at(full, key, g)
        else:
            full[key] += g
        return (full,)


@register
class Reshape(Op):
    name = "reshape"

    def forward(self, xs, attrs, needs):
        attrs["in_shape"] = xs[0].shape
        try:
            return xs[0].reshape(attrs["shape"]), {}
        except ValueError:
            raise AutodiffError(f"reshape: cannot view {xs[0].shape} as {attrs['shape']}") from None

    def backward(self, g, saved, attrs, needs):
        return (g.reshape(attrs["in_shape"]),)

    def flops(self, xs, out, attrs):
        return 0


@register
class Transpose(Op):
    name = "transpose"

    def forward(self, xs, attrs, needs):
        if xs[0].ndim != 2:
            raise AutodiffError(f"transpose: expected 2-d input, got {xs[0].shape}")
        return xs[0].T.copy(), {}

    def backward(self, g, saved, attrs, needs):
        return (g.T.copy(),)

    def flops(self, xs, out, attrs):
        return 0


@register
class InterpGather(Op):
    """Rows of a sparse interpolation matrix applied to a (N, C) sequence."""

    name = "interp_gather"

    def forward(self, xs, attrs, needs):
        m = attrs["matrix"]
        x = xs[0]
        if x.ndim != 2 or m.shape[1] != x.shape[0]:
            raise AutodiffError(f"interp_gather: matrix {m.shape} vs sequence {x.shape}")
        return np.asarray(m @ x), {}

    def backward(self, g, saved, attrs, needs):
        return (np.asarray(attrs["matrix"].T @ g),)

    def flops(self, xs, out, attrs):
        return 2 * attrs["matrix"].nnz * xs[0].shape[1]


@register
class GroupNorm(Op):
    """Group normalization of a (N, C) sequence, statistics over time and channels in a group."""

    name = "group_norm"

    def forward(self, xs, attrs, needs):
        x, gamma, beta = xs
        groups = attrs["groups"]
        n, c = x.shape if x.ndim == 2 else (None, None)
        if x.ndim != 2 or c % groups or gamma.shape != (c,) or beta.shape != (c,):
            raise AutodiffError(
                f"group_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}, groups {groups}")
        eps = attrs.get("eps", 1e-5)
        xg = x.reshape(n, groups, c // groups)
        mu = xg.mean(axis=(0, 2), keepdims=True)
        var = ((xg - mu) ** 2).mean(axis=(0, 2), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = ((xg - mu) * inv).reshape(n, c)
        saved = {}
        if needs[0] or needs[1]:
            saved["xhat"] = xhat
        if needs[0]:
            saved["inv"] = inv
            saved["gamma"] = attrs["inputs"][1]
        return xhat * gamma + beta, saved

    def backward(self, g, saved, attrs, needs):
        groups = attrs["groups"]
        gx = gg = gb = None
        if needs[2]:
            gb = g.sum(axis=0)
        if needs[1]:
            gg = (g * saved["xhat"]).sum(axis=0)
        if needs[0]:
            xhat = saved["xhat"]
            n, c = xhat.shape
            dxhat = (g * saved["gamma"].data).reshape(n, groups, c // groups)
            xh = xhat.reshape(n, groups, c // groups)
            m = n * (c // groups)
            gx = (saved["inv"] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2), keepdims=True)
                - xh * (dxhat * xh).sum(axis=(0, 2), keepdims=True))
            gx = gx.reshape(n, c)
        return gx, gg, gb

    def flops(self, xs, out, attrs):
        return 8 * xs[0].size


@register
class SmoothL1(Op):
    name = "smooth_l1"

    def forward(self, xs, attrs, needs):
        x = xs[0]
        beta = attrs.get("beta", 1.0)
        ax = np.abs(x)
        out = np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)
        return out, {"x": attrs["inputs"][0]}

    def backward(self, g, saved, attrs, needs):
        beta = attrs.get("beta", 1.0)
        return (g * np.clip(saved["x"].data / beta, -1.0, 1.0),)

    def flops(self, xs, out, attrs):
        return 3 * out.size


def _im2col(x, k):
    b, t, c = x.shape
    pad = k // 2
    xp = np.zeros((b, t + 2 * pad, c))
    xp[:, pad:pad + t] = x
    cols = np.concatenate([xp[:, j:j + t] for j in range(k)], axis=2)
    return cols.reshape(b * t, k * c)


@register
class GatedScan(Op):
    """Update-gate recurrence over time, fused into one node.

    Inputs are the input projections xz, xh (N, C) and recurrent weights uz, uh
    (C, C). With h_0 = 0 and steps taken in time order (or reversed):
    z = sigmoid(xz_t + h uz), c = tanh(xh_t + h uh), h <- h + z (c - h).
    Output row t is the state after step t.
    """

    name = "gated_scan"

    def forward(self, xs, attrs, needs):
        xz, xh, uz, uh = xs
        if xz.ndim != 2 or xz.shape != xh.shape or uz.shape != (xz.shape[1],) * 2 or uh.shape != uz.shape:
            raise AutodiffError(f"gated_scan: bad shapes {xz.shape}, {xh.shape}, {uz.shape}, {uh.shape}")
        n, c = xz.shape
        order = range(n - 1, -1, -1) if attrs.get("reverse") else range(n)
        prev = np.zeros((n, c))
        gate = np.empty((n, c))
        cand = np.empty((n, c))
        out = np.empty((n, c))
        h = np.zeros((1, c))
        for t in order:
            prev[t] = h[0]
            z = _sigmoid(xz[t:t + 1] + h @ uz)
            k = np.tanh(xh[t:t + 1] + h @ uh)
            h = h + z * (k - h)
            gate[t], cand[t], out[t] = z[0], k[0], h[0]
        saved = {"prev": prev, "gate": gate, "cand": cand} if any(needs) else {}
        if any(needs):
            saved["uz"], saved["uh"] = attrs["inputs"][2], attrs["inputs"][3]
        return out, saved

    def backward(self, g, saved, attrs, needs):
        prev, z, k = saved["prev"], saved["gate"], saved["cand"]
        uz, uh = saved["uz"].data, saved["uh"].data
        n, c = g.shape
        order = range(n) if attrs.get("reverse") else range(n - 1, -1, -1)
        d_az = np.empty((n, c))
        d_ac = np.empty((n, c))
        carry = np.zeros((1, c))
        for t in order:
            dh = g[t:t + 1] + carry
            dz = dh * (k[t] - prev[t])
            dk = dh * z[t]
            d_az[t] = (dz * z[t] * (1.0 - z[t]))[0]
            d_ac[t] = (dk * (1.0 - k[t] * k[t]))[0]
            carry = dh * (1.0 - z[t]) + d_az[t:t + 1] @ uz.T + d_ac[t:t + 1] @ uh.T
        return (d_az if needs[0] else None, d_ac if needs[1] else None,
                prev.T @ d_az if needs[2] else None, prev.T @ d_ac if needs[3] else None)

    def flops(self, xs, out, attrs):
        n, c = xs[0].shape
        # two (1, C) x (C, C) products, two adds and the activations and update per step
        return n * (4 * c * c + 9 * c)


@register
class Conv1d(Op):
    """Same-padded temporal convolution, input (B, T, Cin), weight (k*Cin, Cout)."""

    name = "conv1d"

    def forward(self, xs, attrs, needs):
        x, w = xs
        if x.ndim != 3 or w.ndim != 2 or w.shape[0] % x.shape[2] or (w.shape[0] // x.shape[2]) % 2 == 0:
            raise AutodiffError(f"conv1d: input {x.shape} vs weight {w.shape}")
        k = w.shape[0] // x.shape[2]
        attrs["k"] = k
        b, t, _ = x.shape
        cols = _im2col(x, k)
        out = _rowwise_matmul(cols, w) if attrs.get("kernel") == "rowwise" else cols @ w
        saved = {}
        if needs[1]:
            saved["x"] = attrs["inputs"][0]
        if needs[0]:
            saved["w"] = attrs["inputs"][1]
        return out.reshape(b, t, w.shape[1]), saved

    def backward(self, g, saved, attrs, needs):
        k = attrs["k"]
        b, t, cout = g.shape
        g2 = g.reshape(b * t, cout)
        gx = gw = None
        if needs[1]:
            gw = _im2col(saved["x"].data, k).T @ g2
        if needs[0]:
            w = saved["w"].data
            cin = w.shape[0] // k
            dcols = (g2 @ w.T).reshape(b, t, k, cin)
            pad = k // 2
            gp = np.zeros((b, t + 2 * pad, cin))
            for j in range(k):
                gp[:, j:j + t] += dcols[:, :, j]
            gx = gp[:, pad:pad + t].copy()
        return gx, gw

    def flops(self, xs, out, attrs):
        b, t, _ = xs[0].shape
        kc, cout = xs[1].shape
        return 2 * b * t * kc * cout


def apply(op_kind, *inputs, **attrs):
    """Run ``op_kind`` on ``inputs``; record a tape node when the active tape is in train mode."""
    op = OPS.get(op_kind)
    if op is None:
        raise AutodiffError(f"unknown op kind {op_kind!r}")
    tensors = tuple(as_tensor(x) for x in inputs)
    graph = active_graph()
    recording = graph is not None and graph.mode == "train"
    needs = tuple(recording and t.requires_grad for t in tensors)
    if recording:
        for t in tensors:
            if t.node is not None and t.node.graph is not graph:
                raise AutodiffError(f"{op_kind}: input belongs to a different tape")
    attrs["inputs"] = tensors
    out_arr, saved = op.forward([t.data for t in tensors], attrs, needs)
    del attrs["inputs"]
    out = Tensor._wrap(np.asarray(out_arr, dtype=np.float64))
    acct, phase = _active_phase()
    flops = op.flops([t.data for t in tensors], out.data, attrs)
    if acct is not None:
        acct.forward[phase] += flops
    if not any(needs):
        return out
    out.requires_grad = True
    node = Node()
    node.op = op_kind
    node.inputs = tensors
    node.output = out
    node.saved = saved
    node.attrs = attrs
    node.needs = needs
    node.flops = flops
    node.phase = phase
    node.accountant = acct
    node.keys = []
    if acct is not None:
        for arr in _saved_arrays(saved):
            node.keys.append(acct.retain(arr, phase, op_kind))
    graph.record(node)
    out.node = node
    return out


def backward(root, seed_grad):
    """Accumulate d(root)/d(leaf) . seed into every requires_grad leaf reachable from root."""
    seed = np.array(seed_grad, dtype=np.float64)
    if seed.shape != root.shape:
        raise AutodiffError(f"seed shape {seed.shape} does not match root shape {root.shape}")
    if root.node is None:
        raise AutodiffError("no tape recorded for root (eval mode or freed tape)")
    graph = root.node.graph
    grads = {root.id: seed}
    # a leaf's contributions are summed within the pass before touching .grad,
    # so splitting a seed over several passes accumulates the same totals
    leaves = {}
    for node in reversed(graph.nodes[:root.node.index + 1]):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        in_grads = OPS[node.op].backward(g, node.saved, node.attrs, node.needs)
        if node.accountant is not None:
            node.accountant.backward[node.phase] += node.flops
        for t, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if t.node is not None:
                prev = grads.get(t.id)
                grads[t.id] = gi if prev is None else prev + gi
            elif t.id in leaves:
                leaves[t.id] = (t, leaves[t.id][1] + gi)
            else:
                leaves[t.id] = (t, gi)
    for t, total in leaves.values():
        if t.grad is None:
            t.grad = np.array(total, dtype=np.float64)
        else:
            t.grad += total


# ---------------------------------------------------------------------------
# functional helpers


def matmul(a, b, kernel="blas"):
    return apply("matmul", a, b, kernel=kernel)


def relu(x):
    return apply("relu", x)


def sigmoid(x):
    return apply("sigmoid", x)


def tanh(x):
    return apply("tanh", x)


def exp(x):
    return apply("exp", x)


def log(x):
    return apply("log", x)


def log_sigmoid(x):
    return apply("log_sigmoid", x)


def tsum(x, axis=None):
    return apply("sum", x, axis=axis)


def mean(x, axis=None):
    return apply("mean", x, axis=axis)


def concat(xs, axis=0):
    return apply("concat", *xs, axis=axis)


def reshape(x, shape):
    return apply("reshape", x, shape=tuple(shape))


def transpose(x):
    return apply("transpose", x)


def interp_gather(x, matrix):
    if not sp.issparse(matrix):
        matrix = sp.csr_matrix(matrix)
    return apply("interp_gather", x, matrix=matrix.tocsr())


def group_norm(x, gamma, beta, groups, eps=1e-5):
    return apply("group_norm", x, gamma, beta, groups=groups, eps=eps)


def gated_scan(xz, xh, uz, uh, reverse=False):
    return apply("gated_scan", xz, xh, uz, uh, reverse=reverse)


def smooth_l1(x, beta=1.0):
    return apply("smooth_l1", x, beta=beta)


def conv1d(x, w, kernel="blas"):
    return apply("conv1d", x, w, kernel=kernel)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckResult:
    max_error: float
    excluded: tuple

    def __float__(self):
        return self.max_error


def grad_check(fn, x, eps=1e-5):
    """Compare the analytic gradient of scalar ``fn`` at ``x`` with central differences.

    Error per coordinate is |analytic - central| / max(1, |central|). Coordinates
    where ``fn`` is numerically non-smooth within ``eps`` (e.g. a relu kink) are
    excluded and reported instead of compared.
    """
    if eps <= 0:
        raise AutodiffError("grad_check: eps must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    with TapeGraph("train"):
        y = fn(xt)
        if y.size != 1:
            raise AutodiffError(f"grad_check: function output must be scalar, got shape {y.shape}")
        if y.node is None:
            analytic = np.zeros_like(x0)
        else:
            backward(y, np.ones(y.shape))
            analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    def f(v):
        with no_tape():
            return float(np.sum(fn(Tensor._wrap(v)).data))

    worst = 0.0
    excluded = []
    flat = x0.reshape(-1)
    for i in range(flat.size):
        vals = {}
        for step in (-eps, -eps / 2, eps / 2, eps):
            v = flat.copy()
            v[i] += step
            vals[step] = f(v.reshape(x0.shape))
        f0 = f(x0)
        central = (vals[eps] - vals[-eps]) / (2 * eps)
        half = (vals[eps / 2] - vals[-eps / 2]) / eps
        jump = (vals[eps] - f0) / eps - (f0 - vals[-eps]) / eps
        jump_half = (vals[eps / 2] - f0) / (eps / 2) - (f0 - vals[-eps / 2]) / (eps / 2)
        scale = max(1.0, abs(central), abs(f0))
        if abs(central - half) > 1e-7 * scale or abs(jump_half - jump / 2) > 1e-7 * scale:
            excluded.append(tuple(int(j) for j in np.unravel_index(i, x0.shape)))
            continue
        err = abs(analytic.reshape(-1)[i] - central) / max(1.0, abs(central))
        worst = max(worst, float(err))
    return GradCheckResult(worst, tuple(excluded))
