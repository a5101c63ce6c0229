"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every trainable quantity in this package is a ``Tensor``. Operations record
nodes on the active ``Tape`` (a thread-local stack makes taping explicit and
confines a tape to one thread); ``Tape.backward`` replays the records in
reverse. Arrays are float64 by default so finite-difference gradient checks
are decisive.

Broadcasting is deliberately restricted: ``add`` accepts a bias row onto a
matrix (and a single-element bias onto a vector); every other elementwise op
demands exactly matching shapes so shape bugs surface at the call site.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

# When True every op asserts its output (and later its gradients) are finite.
DEBUG_FINITE = False


class AutogradError(Exception):
    """Base error for tape/tensor misuse."""


class ShapeError(AutogradError):
    """Operand shapes do not conform to the requested operation."""


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def active_tape():
    """The innermost live Tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """n-dimensional value array with a lazily allocated gradient buffer.

    ``requires_grad=True`` marks a leaf (a parameter); intermediate results
    get a ``node`` handle when they are produced under an active tape from
    tracked inputs.
    """

    __slots__ = ("values", "grad", "node", "requires_grad")

    def __init__(self, values, requires_grad=False, dtype=np.float64):
        self.values = np.array(values, dtype=dtype)
        self.grad = None
        self.node = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _from_array(cls, arr):
        # internal: wrap an op result without copying
        t = cls.__new__(cls)
        t.values = arr
        t.grad = None
        t.node = None
        t.requires_grad = False
        return t

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self):
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def ensure_grad(self):
        """Allocate (or return) the same-shape gradient buffer."""
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad

    def _tracked(self, tape):
        return self.requires_grad or (self.node is not None and self.node.tape is tape)

    # operator sugar; scalars only via scale()
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def parameter(values, dtype=np.float64):
    """A leaf tensor that accumulates gradients."""
    return Tensor(values, requires_grad=True, dtype=dtype)


def constant(values, dtype=np.float64):
    """An untracked tensor (data, masks, targets)."""
    return Tensor(values, requires_grad=False, dtype=dtype)


class TapeNode:
    """One recorded primitive application."""

    __slots__ = ("kind", "out", "backward_fn", "tape", "kink_gap")

    def __init__(self, kind, out, backward_fn, tape, kink_gap=None):
        self.kind = kind
        self.out = out
        self.backward_fn = backward_fn
        self.tape = tape
        # distance to the nearest max-tie / hinge kink seen in this node's
        # forward pass; None for smooth ops
        self.kink_gap = kink_gap


class Tape:
    """Ordered record of primitive applications.

    Creation order is topological order (inputs exist before consumers), so
    a single reverse sweep visits every node exactly once.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def _record(self, kind, out, backward_fn, kink_gap=None):
        node = TapeNode(kind, out, backward_fn, self, kink_gap)
        out.node = node
        self.nodes.append(node)

    def kink_distance(self):
        """Smallest distance to a max-tie or hinge corner seen on this tape."""
        gaps = [n.kink_gap for n in self.nodes if n.kink_gap is not None]
        return min(gaps) if gaps else float("inf")

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into every tracked leaf's .grad."""
        if not isinstance(loss, Tensor):
            raise AutogradError("backward expects a Tensor loss")
        if loss.values.shape != ():
            raise AutogradError(
                f"backward needs a scalar loss, got shape {loss.values.shape}"
            )
        if loss.node is None or loss.node.tape is not self:
            raise AutogradError("loss tensor was not produced on this tape")
        loss.grad = np.ones((), dtype=loss.values.dtype)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue  # does not feed the loss
            node.backward_fn(g)
            if DEBUG_FINITE and not np.all(np.isfinite(g)):
                raise AutogradError(f"non-finite gradient at {node.kind} node")


def backward(tape, loss):
    """Functional alias for Tape.backward."""
    tape.backward(loss)


def _accum(t, g, tape):
    if t.requires_grad or (t.node is not None and t.node.tape is tape):
        if t.grad is None:
            t.grad = np.array(g, dtype=t.values.dtype)
        else:
            t.grad += g


def _finish(kind, inputs, out_values, backward_fn, kink_gap=None):
    """Wrap an op result; record on the active tape when any input is tracked."""
    if DEBUG_FINITE and not np.all(np.isfinite(out_values)):
        raise AutogradError(f"non-finite values produced by {kind}")
    out = Tensor._from_array(out_values)
    tape = active_tape()
    if tape is not None and any(t._tracked(tape) for t in inputs):
        tape._record(
            kind, out, lambda g, fn=backward_fn, tp=tape: fn(g, tp), kink_gap
        )
    return out


def _shape_err(kind, *shapes):
    rendered = " vs ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{kind}: shapes do not conform: {rendered}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    """Elementwise sum; also matrix+bias-row and vector+single-element bias."""
    va, vb = a.values, b.values
    if va.shape == vb.shape:
        mode = "same"
    elif va.ndim == 2 and vb.shape == (va.shape[1],):
        mode = "row"
    elif va.ndim == 1 and vb.shape in ((), (1,)):
        mode = "scalar"
    else:
        raise _shape_err("add", va.shape, vb.shape)

    def bwd(g, tape):
        _accum(a, g, tape)
        if mode == "same":
            _accum(b, g, tape)
        elif mode == "row":
            _accum(b, g.sum(axis=0), tape)
        else:
            _accum(b, np.sum(g).reshape(b.values.shape), tape)

    return _finish("add", (a, b), va + vb, bwd)


def sub(a, b):
    if a.values.shape != b.values.shape:
        raise _shape_err("sub", a.values.shape, b.values.shape)

    def bwd(g, tape):
        _accum(a, g, tape)
        _accum(b, -g, tape)

    return _finish("sub", (a, b), a.values - b.values, bwd)


def mul(a, b):
    """Elementwise (Hadamard) product; shapes must match exactly."""
    if a.values.shape != b.values.shape:
        raise _shape_err("mul", a.values.shape, b.values.shape)

    def bwd(g, tape):
        _accum(a, g * b.values, tape)
        _accum(b, g * a.values, tape)

    return _finish("mul", (a, b), a.values * b.values, bwd)


def matmul(a, b):
    """Matrix/vector product for 1-D and 2-D operands."""
    va, vb = a.values, b.values
    if va.ndim == 0 or vb.ndim == 0 or va.ndim > 2 or vb.ndim > 2:
        raise _shape_err("matmul", va.shape, vb.shape)
    if va.shape[-1] != vb.shape[0]:
        raise _shape_err("matmul", va.shape, vb.shape)

    def bwd(g, tape):
        if va.ndim == 2 and vb.ndim == 2:
            _accum(a, g @ vb.T, tape)
            _accum(b, va.T @ g, tape)
        elif va.ndim == 2 and vb.ndim == 1:
            _accum(a, np.outer(g, vb), tape)
            _accum(b, va.T @ g, tape)
        elif va.ndim == 1 and vb.ndim == 2:
            _accum(a, vb @ g, tape)
            _accum(b, np.outer(va, g), tape)
        else:  # vector dot vector -> scalar
            _accum(a, g * vb, tape)
            _accum(b, g * va, tape)

    return _finish("matmul", (a, b), va @ vb, bwd)


def tanh(a):
    out = np.tanh(a.values)

    def bwd(g, tape):
        _accum(a, g * (1.0 - out * out), tape)

    return _finish("tanh", (a,), out, bwd)


def sigmoid(a):
    v = a.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def bwd(g, tape):
        _accum(a, g * out * (1.0 - out), tape)

    return _finish("sigmoid", (a,), out, bwd)


def log(a):
    """Natural log; caller guarantees positive inputs."""

    def bwd(g, tape):
        _accum(a, g / a.values, tape)

    return _finish("log", (a,), np.log(a.values), bwd)


def softmax(a):
    """Softmax over the last axis, shift-stabilized."""
    v = a.values
    shifted = v - np.max(v, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g, tape):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        _accum(a, (g - dot) * out, tape)

    return _finish("softmax", (a,), out, bwd)


def concat(tensors):
    """Concatenate along the last axis."""
    tensors = list(tensors)
    if not tensors:
        raise AutogradError("concat: needs at least one input")
    lead = tensors[0].values.shape[:-1]
    for t in tensors[1:]:
        if t.values.shape[:-1] != lead or t.values.ndim != tensors[0].values.ndim:
            raise _shape_err("concat", tensors[0].values.shape, t.values.shape)
    widths = [t.values.shape[-1] for t in tensors]

    def bwd(g, tape):
        off = 0
        for t, w in zip(tensors, widths):
            _accum(t, g[..., off : off + w], tape)
            off += w

    return _finish("concat", tuple(tensors), np.concatenate([t.values for t in tensors], axis=-1), bwd)


def sum_along(a, axis=None):
    """Sum over one axis, or over everything when axis is None."""
    v = a.values
    out = np.sum(v, axis=axis)

    def bwd(g, tape):
        if axis is None:
            _accum(a, np.full_like(v, g), tape)
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), v.shape).copy(), tape)

    return _finish("sum", (a,), out, bwd)


def mean_along(a, axis=None):
    v = a.values
    count = v.size if axis is None else v.shape[axis]
    out = np.mean(v, axis=axis)

    def bwd(g, tape):
        if axis is None:
            _accum(a, np.full_like(v, g / count), tape)
        else:
            _accum(
                a,
                np.broadcast_to(np.expand_dims(g / count, axis), v.shape).copy(),
                tape,
            )

    return _finish("mean", (a,), out, bwd)


def scale(a, s):
    """Multiply by a Python scalar constant."""
    s = float(s)

    def bwd(g, tape):
        _accum(a, g * s, tape)

    return _finish("scale", (a,), a.values * s, bwd)


def _top2_gap(v, axis):
    """max minus runner-up, minimized over reduction groups; inf if group size 1."""
    if axis is None:
        flat = v.ravel()
        if flat.size < 2:
            return float("inf")
        top2 = np.partition(flat, flat.size - 2)[-2:]
        return float(top2[1] - top2[0])
    if v.shape[axis] < 2:
        return float("inf")
    part = np.partition(v, v.shape[axis] - 2, axis=axis)
    top = np.take(part, -1, axis=axis)
    second = np.take(part, -2, axis=axis)
    return float(np.min(top - second))


def amax(a, axis=None):
    """Max over an axis; gradient routes to the lowest-index arg-max only."""
    v = a.values
    out = np.max(v, axis=axis)
    gap = _top2_gap(v, axis)

    def bwd(g, tape):
        dv = np.zeros_like(v)
        if axis is None:
            idx = np.unravel_index(int(np.argmax(v)), v.shape)
            dv[idx] = g
        else:
            am = np.expand_dims(np.argmax(v, axis=axis), axis)
            np.put_along_axis(dv, am, np.expand_dims(g, axis), axis=axis)
        _accum(a, dv, tape)

    return _finish("max", (a,), out, bwd, kink_gap=gap)


def hinge(a):
    """max(x, 0) elementwise; subgradient at exactly 0 is 0."""
    v = a.values
    gap = float(np.min(np.abs(v))) if v.size else float("inf")

    def bwd(g, tape):
        _accum(a, g * (v > 0), tape)

    return _finish("hinge", (a,), np.maximum(v, 0.0), bwd, kink_gap=gap)


# ---------------------------------------------------------------------------
# structural ops (plumbing beyond the arithmetic kinds, same tape mechanics)
# ---------------------------------------------------------------------------

def reshape(a, shape):
    v = a.values
    try:
        out = v.reshape(shape).copy()
    except ValueError:
        raise _shape_err("reshape", v.shape, shape)

    def bwd(g, tape):
        _accum(a, g.reshape(v.shape), tape)

    return _finish("reshape", (a,), out, bwd)


def stack_rows(tensors):
    """Stack 1-D tensors of equal length into a matrix, one per row."""
    tensors = list(tensors)
    if not tensors:
        raise AutogradError("stack_rows: needs at least one input")
    width = tensors[0].values.shape
    for t in tensors:
        if t.values.ndim != 1 or t.values.shape != width:
            raise _shape_err("stack_rows", width, t.values.shape)

    def bwd(g, tape):
        for i, t in enumerate(tensors):
            _accum(t, g[i], tape)

    return _finish("stack_rows", tuple(tensors), np.stack([t.values for t in tensors]), bwd)


def conv3x3(x, kernel, bias):
    """3x3 same-padding convolution on one (H, W, Cin) image."""
    vx, vk, vb = x.values, kernel.values, bias.values
    if vx.ndim != 3 or vk.shape[:2] != (3, 3) or vk.shape[2] != vx.shape[2]:
        raise _shape_err("conv3x3", vx.shape, vk.shape)
    if vb.shape != (vk.shape[3],):
        raise _shape_err("conv3x3", vk.shape, vb.shape)
    h, w, _ = vx.shape
    cout = vk.shape[3]
    xp = np.pad(vx, ((1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(vb, (h, w, cout)).copy()
    for dy in range(3):
        for dx in range(3):
            out += xp[dy : dy + h, dx : dx + w, :] @ vk[dy, dx]

    def bwd(g, tape):
        dxp = np.zeros_like(xp)
        dk = np.zeros_like(vk)
        for dy in range(3):
            for dx in range(3):
                patch = xp[dy : dy + h, dx : dx + w, :]
                dk[dy, dx] = np.tensordot(patch, g, axes=([0, 1], [0, 1]))
                dxp[dy : dy + h, dx : dx + w, :] += g @ vk[dy, dx].T
        _accum(x, dxp[1:-1, 1:-1, :], tape)
        _accum(kernel, dk, tape)
        _accum(bias, g.sum(axis=(0, 1)), tape)

    return _finish("conv3x3", (x, kernel, bias), out, bwd)


def avg_pool2(x):
    """2x2 average pooling on one (H, W, C) map; H and W must be even."""
    v = x.values
    if v.ndim != 3 or v.shape[0] % 2 or v.shape[1] % 2:
        raise _shape_err("avg_pool2", v.shape)
    h2, w2 = v.shape[0] // 2, v.shape[1] // 2
    out = v.reshape(h2, 2, w2, 2, v.shape[2]).mean(axis=(1, 3))

    def bwd(g, tape):
        _accum(x, np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) / 4.0, tape)

    return _finish("avg_pool2", (x,), out, bwd)


def clamp(a, lo, hi):
    """Clamp into [lo, hi], composed from hinge ops (gradient 1 inside, 0 outside)."""
    lo_t = constant(np.full(a.values.shape, lo, dtype=a.values.dtype))
    hi_t = constant(np.full(a.values.shape, hi, dtype=a.values.dtype))
    lifted = add(hinge(sub(a, lo_t)), lo_t)
    return sub(lifted, hinge(sub(lifted, hi_t)))


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "concat": None,  # variadic, handled below
    "sum": sum_along,
    "mean": mean_along,
    "scale": scale,
    "max": amax,
    "log": log,
    "hinge": hinge,
}


def primitive(kind, *inputs, axis=None, factor=None):
    """Apply a named primitive. Records a tape node when any input is tracked.

    Kinds: add, sub, mul, matmul, tanh, sigmoid, softmax (last axis),
    concat (last axis), sum, mean (axis or full), scale (by ``factor``),
    max (axis or full, lowest-index tie gradient), log, hinge.
    """
    if kind not in _PRIMITIVES:
        raise AutogradError(
            f"unknown primitive kind {kind!r}; expected one of {sorted(_PRIMITIVES)}"
        )
    if kind == "concat":
        return concat(inputs)
    if kind in ("sum", "mean", "max"):
        (a,) = inputs
        return _PRIMITIVES[kind](a, axis=axis)
    if kind == "scale":
        (a,) = inputs
        if factor is None:
            raise AutogradError("scale requires factor=")
        return scale(a, factor)
    return _PRIMITIVES[kind](*inputs)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    checked_elements: int
    nonsmooth: bool = False

    @property
    def ok(self):
        return self.nonsmooth or self.max_rel_err <= self.tol  # set by report

    tol: float = field(default=0.0, repr=False)


@dataclass
class GradCheckReport:
    entries: list
    step: float
    tol: float
    kink_distance: float

    @property
    def passed(self):
        return all(e.nonsmooth or e.max_rel_err <= self.tol for e in self.entries)

    @property
    def max_rel_err(self):
        errs = [e.max_rel_err for e in self.entries if not e.nonsmooth]
        return max(errs) if errs else 0.0

    def lines(self):
        out = []
        for e in self.entries:
            if e.nonsmooth:
                out.append(f"{e.name}: non-smooth point, excluded")
            else:
                status = "ok" if e.max_rel_err <= self.tol else "FAIL"
                out.append(
                    f"{e.name}: max rel err {e.max_rel_err:.3e} "
                    f"({e.checked_elements} elements) {status}"
                )
        return out

    def __str__(self):
        return "\n".join(self.lines())


def grad_check(
    f,
    params,
    step=1e-5,
    tol=1e-4,
    rel_floor=1e-6,
    kink_tol=1e-6,
    max_elements=None,
    seed=0,
):
    """Compare analytic gradients of ``f()`` against central finite differences.

    ``f`` must be a deterministic closure over ``params`` (a list of leaf
    Tensors, or (name, Tensor) pairs) returning a scalar Tensor. Parameters
    whose evaluation passed within ``kink_tol`` of a max-tie or hinge corner
    are flagged non-smooth and excluded from the pass/fail verdict. With
    ``max_elements`` set, at most that many elements per parameter are
    checked (deterministically sampled).
    """
    named = [
        p if isinstance(p, tuple) else (f"param{i}", p) for i, p in enumerate(params)
    ]
    for _, p in named:
        if not p.requires_grad:
            raise AutogradError("grad_check: all params must require gradients")
        p.zero_grad()

    with Tape() as tape:
        y = f()
    if y.values.shape != ():
        raise AutogradError("grad_check: f must return a scalar")
    if not np.isfinite(y.values):
        raise AutogradError("grad_check: f evaluated non-finite")
    base_kink = tape.kink_distance()
    tape.backward(y)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
                for name, p in named}

    rng = np.random.default_rng(seed)
    entries = []
    for name, p in named:
        flat = p.values.reshape(-1)
        n = flat.size
        if max_elements is not None and n > max_elements:
            idxs = np.sort(rng.choice(n, size=max_elements, replace=False))
        else:
            idxs = np.arange(n)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            up = f().values
            flat[i] = orig - step
            down = f().values
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise AutogradError("grad_check: f evaluated non-finite")
            numeric = (float(up) - float(down)) / (2.0 * step)
            denom = max(abs(a_flat[i]), abs(numeric), rel_floor)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
        entries.append(
            ParamCheck(
                name=name,
                max_rel_err=worst,
                checked_elements=len(idxs),
                nonsmooth=base_kink < kink_tol,
                tol=tol,
            )
        )
    return GradCheckReport(entries=entries, step=step, tol=tol, kink_distance=base_kink)
