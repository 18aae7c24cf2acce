"""Reverse-mode differentiation for 1-D signal chains.

Every forward operation used inside a training path is recorded on a Tape
together with a closure that maps the output adjoint to input adjoints.
A single backward pass visits each node exactly once, in reverse topological
order, and accumulates gradients into the GradSlot of every watched
parameter.

Conventions
-----------
* Values are float64 or complex128 numpy arrays (0-d arrays for scalars).
* The loss must be a real scalar. For a complex intermediate z = x + jy the
  propagated adjoint is dL/dx + j*dL/dy, so linear complex operators are
  differentiated by applying their conjugate transpose to the adjoint.
* Adjoints of real inputs that feed complex operations are projected back to
  the real axis (taking the real part is exact, not an approximation).
* Noise vectors enter as constants: gradients pass through sums unchanged.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GradientError",
    "GradSlot",
    "Tape",
    "Var",
    "backward",
    "finite_diff_check",
]


class GradientError(RuntimeError):
    """Contract violation or numerical failure during backward."""


class GradSlot:
    """Trainable parameter vector paired with its gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, value, name: str = "") -> None:
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover
        return f"GradSlot({self.name or 'anon'}, shape={self.value.shape})"


class _Node:
    __slots__ = ("kind", "inputs", "backward")

    def __init__(self, kind, inputs, backward) -> None:
        self.kind = kind
        self.inputs = inputs  # node indices of the inputs
        self.backward = backward  # None for leaves


class Var:
    """Handle for a value recorded on a tape."""

    __slots__ = ("value", "tape", "_idx")

    def __init__(self, value: np.ndarray, tape: "Tape", idx: int) -> None:
        self.value = value
        self.tape = tape
        self._idx = idx

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.value)

    # arithmetic sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Var(shape={self.value.shape}, node={self._idx})"


class Tape:
    """Ordered record of one forward computation.

    Inputs of every node precede it, so a single reversed sweep implements
    backpropagation. A tape is single-writer and can be backpropagated once;
    saved forward values are freed afterwards.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._slots: dict[int, GradSlot] = {}
        self._consumed = False

    def const(self, value) -> Var:
        """Record a constant leaf (no gradient is accumulated for it)."""
        v = np.asarray(value)
        if not np.iscomplexobj(v):
            v = v.astype(np.float64, copy=False)
        return self._leaf(v)

    def watch(self, slot: GradSlot) -> Var:
        """Record a trainable leaf bound to ``slot``."""
        var = self._leaf(slot.value.copy())
        self._slots[var._idx] = slot
        return var

    def _leaf(self, value: np.ndarray) -> Var:
        idx = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None))
        return Var(value, self, idx)

    def emit(self, kind: str, value, inputs: Sequence[Var],
             backward: Callable) -> Var:
        """Record an operation node; used by the op library and extensions."""
        if self._consumed:
            raise GradientError("tape was already backpropagated")
        idxs = tuple(v._idx for v in inputs)
        idx = len(self.nodes)
        self.nodes.append(_Node(kind, idxs, backward))
        return Var(np.asarray(value), self, idx)

    def backward(self, loss: Var) -> None:
        """Accumulate d(loss)/d(slot) into every watched GradSlot."""
        if self._consumed:
            raise GradientError("tape was already backpropagated")
        if loss.tape is not self:
            raise GradientError("loss was recorded on a different tape")
        if loss.value.size != 1:
            raise GradientError(f"loss must be scalar, got shape {loss.value.shape}")
        if np.iscomplexobj(loss.value):
            raise GradientError("loss must be real-valued")

        adjoint: list = [None] * len(self.nodes)
        adjoint[loss._idx] = np.asarray(1.0)
        for i in range(loss._idx, -1, -1):
            g = adjoint[i]
            adjoint[i] = None  # free non-trainable intermediates
            if g is None:
                continue
            node = self.nodes[i]
            if node.backward is None:
                slot = self._slots.get(i)
                if slot is not None:
                    slot.grad += np.reshape(np.asarray(g, dtype=np.float64),
                                            slot.grad.shape)
                continue
            contributions = node.backward(g)
            for j, contrib in zip(node.inputs, contributions):
                if contrib is None:
                    continue
                if np.isnan(contrib).any():
                    raise GradientError(f"NaN adjoint produced by node '{node.kind}'")
                if adjoint[j] is None:
                    adjoint[j] = contrib
                else:
                    adjoint[j] = adjoint[j] + contrib
        self.nodes = []
        self._slots = {}
        self._consumed = True


def backward(tape: Tape, loss: Var) -> None:
    """Module-level alias for ``tape.backward(loss)``."""
    tape.backward(loss)


# ---------------------------------------------------------------------------
# op helpers


def _realify(adj, var: Var):
    return adj.real if not var.is_complex else adj


def _unbroadcast(adj, shape):
    """Reduce an adjoint to the shape of the input it belongs to."""
    adj = np.asarray(adj)
    if adj.shape == tuple(shape):
        return adj
    if np.prod(shape, dtype=int) == 1:
        return np.reshape(np.sum(adj), shape)
    raise GradientError(f"cannot reduce adjoint {adj.shape} to {shape}")


def _coerce_pair(a, b):
    if isinstance(a, Var):
        tape = a.tape
        if not isinstance(b, Var):
            b = tape.const(b)
    else:
        tape = b.tape
        a = tape.const(a)
    if a.tape is not b.tape:
        raise GradientError("operands live on different tapes")
    return a, b


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Var:
    a, b = _coerce_pair(a, b)

    def bwd(g):
        return (_unbroadcast(_realify(g, a), a.shape),
                _unbroadcast(_realify(g, b), b.shape))

    return a.tape.emit("add", a.value + b.value, (a, b), bwd)


def sub(a, b) -> Var:
    a, b = _coerce_pair(a, b)

    def bwd(g):
        return (_unbroadcast(_realify(g, a), a.shape),
                _unbroadcast(_realify(-g, b), b.shape))

    return a.tape.emit("sub", a.value - b.value, (a, b), bwd)


def mul(a, b) -> Var:
    a, b = _coerce_pair(a, b)
    av, bv = a.value, b.value

    def bwd(g):
        return (_unbroadcast(_realify(g * np.conj(bv), a), a.shape),
                _unbroadcast(_realify(g * np.conj(av), b), b.shape))

    return a.tape.emit("mul", av * bv, (a, b), bwd)


def div(a, b) -> Var:
    a, b = _coerce_pair(a, b)
    av, bv = a.value, b.value
    out = av / bv

    def bwd(g):
        return (_unbroadcast(_realify(g * np.conj(1.0 / bv), a), a.shape),
                _unbroadcast(_realify(g * np.conj(-av / (bv * bv)), b), b.shape))

    return a.tape.emit("div", out, (a, b), bwd)


def square(x: Var) -> Var:
    xv = x.value

    def bwd(g):
        return (_realify(2.0 * np.conj(xv) * g, x),)

    # real square for real inputs; for complex inputs use abs2 instead
    if x.is_complex:
        raise GradientError("square is defined for real inputs; use abs2")
    return x.tape.emit("square", xv * xv, (x,), bwd)


def sqrt(x: Var) -> Var:
    if x.is_complex:
        raise GradientError("sqrt is defined for real inputs")
    out = np.sqrt(x.value)

    def bwd(g):
        # subgradient 0 at exactly zero input (measure-zero boundary)
        d = np.where(out > 0.0, 0.5 / np.where(out > 0.0, out, 1.0), 0.0)
        return (g * d,)

    return x.tape.emit("sqrt", out, (x,), bwd)


def exp(x: Var) -> Var:
    if x.is_complex:
        raise GradientError("exp is defined for real inputs")
    out = np.exp(x.value)

    def bwd(g):
        return (g * out,)

    return x.tape.emit("exp", out, (x,), bwd)


def log(x: Var) -> Var:
    if x.is_complex:
        raise GradientError("log is defined for real inputs")
    xv = x.value

    def bwd(g):
        return (g / xv,)

    return x.tape.emit("log", np.log(xv), (x,), bwd)


def clip(x: Var, lo: float, hi: float) -> Var:
    """Hard clip with subgradient 1 inside [lo, hi] (boundary included)."""
    xv = x.value
    mask = (xv >= lo) & (xv <= hi)

    def bwd(g):
        return (g * mask,)

    return x.tape.emit("clip", np.clip(xv, lo, hi), (x,), bwd)


def abs2(x: Var) -> Var:
    """|x|^2, real output for real or complex input."""
    xv = x.value
    out = (xv * np.conj(xv)).real

    def bwd(g):
        return (_realify(2.0 * xv * g, x),)

    return x.tape.emit("abs2", out, (x,), bwd)


def real(x: Var) -> Var:
    if not x.is_complex:
        return x

    def bwd(g):
        return (g.astype(np.complex128),)

    return x.tape.emit("real", x.value.real, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions


def vsum(x: Var) -> Var:
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape.emit("sum", np.sum(x.value), (x,), bwd)


def vmean(x: Var) -> Var:
    n = x.size
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return x.tape.emit("mean", np.mean(x.value), (x,), bwd)


def dot(a: Var, b: Var) -> Var:
    a, b = _coerce_pair(a, b)
    if a.is_complex or b.is_complex:
        raise GradientError("dot is defined for real inputs")
    av, bv = a.value, b.value

    def bwd(g):
        return (g * bv, g * av)

    return a.tape.emit("dot", np.dot(av, bv), (a, b), bwd)


# ---------------------------------------------------------------------------
# structural ops


def roll(x: Var, shift: int) -> Var:
    def bwd(g):
        return (np.roll(g, -shift),)

    return x.tape.emit("roll", np.roll(x.value, shift), (x,), bwd)


def segment(x: Var, start: int, stop: int) -> Var:
    n = x.size
    if not (0 <= start <= stop <= n):
        raise GradientError(f"segment [{start}:{stop}] out of range for size {n}")
    dtype = x.value.dtype

    def bwd(g):
        full = np.zeros(n, dtype=dtype if np.iscomplexobj(g) else g.dtype)
        full[start:stop] = g
        return (full,)

    return x.tape.emit("segment", x.value[start:stop], (x,), bwd)


def upsample(x: Var, sps: int) -> Var:
    """Zero insertion: out[k*sps] = x[k]."""
    xv = x.value
    out = np.zeros(xv.size * sps, dtype=xv.dtype)
    out[::sps] = xv

    def bwd(g):
        return (g[::sps].copy(),)

    return x.tape.emit("upsample", out, (x,), bwd)


def downsample(x: Var, factor: int, offset: int = 0) -> Var:
    """out[k] = x[k*factor + offset]."""
    if not 0 <= offset < factor:
        raise GradientError("downsample offset must satisfy 0 <= offset < factor")
    xv = x.value
    n = xv.size
    dtype = xv.dtype

    def bwd(g):
        full = np.zeros(n, dtype=g.dtype if np.iscomplexobj(g) else np.float64)
        full[offset::factor] = g
        return (full,)

    return x.tape.emit("downsample", xv[offset::factor].copy(), (x,), bwd)


def conv_same(x: Var, h: Var) -> Var:
    """Same-length FIR convolution (zero padded), odd-length real taps."""
    x, h = _coerce_pair(x, h)
    if x.is_complex or h.is_complex:
        raise GradientError("conv_same is defined for real signals and taps")
    xv, hv = x.value, h.value
    m = hv.size
    if m % 2 == 0:
        raise GradientError("conv_same requires odd tap count")
    c = (m - 1) // 2

    def bwd(g):
        adj_x = np.convolve(g, hv[::-1], mode="same")
        # adj_h[i] = sum_j g[j] * x[j + c - i]
        xc = np.correlate(xv, g, mode="full")
        ng = g.size
        adj_h = xc[ng - 1 - c: ng + c][::-1]
        return (adj_x, adj_h)

    return x.tape.emit("conv", np.convolve(xv, hv, mode="same"), (x, h), bwd)


def spectral_filter(x: Var, response: np.ndarray) -> Var:
    """Multiply the spectrum of x by a fixed frequency response.

    The operator is linear; its adjoint is the same pipeline with the
    conjugate response. Real inputs whose filtered output is numerically real
    (Hermitian-symmetric response) are returned as real arrays.
    """
    xv = x.value
    H = np.asarray(response)
    if H.shape != xv.shape:
        raise GradientError("response grid must match the signal length")
    out = np.fft.ifft(H * np.fft.fft(xv))
    real_out = False
    if not x.is_complex:
        # Hermitian response => real output apart from rounding residue
        if np.abs(out.imag).max() <= 1e-9 * (np.abs(out).max() + 1e-300):
            out = out.real
            real_out = True

    def bwd(g):
        adj = np.fft.ifft(np.conj(H) * np.fft.fft(g))
        return (_realify(adj, x),)

    kind = "spectral_filter" + ("_r" if real_out else "")
    return x.tape.emit(kind, out, (x,), bwd)


def spline_eval(x: Var, spline) -> Var:
    """Cubic-spline evaluation with clamp-to-domain outside the knots.

    ``spline`` is a scipy CubicSpline; the adjoint uses its analytic
    derivative. Out-of-domain inputs are clamped to the boundary knots and
    receive zero gradient (constant extension).
    """
    lo, hi = spline.x[0], spline.x[-1]
    xv = x.value
    xc = np.clip(xv, lo, hi)
    inside = (xv >= lo) & (xv <= hi)
    deriv = spline.derivative()(xc) * inside

    def bwd(g):
        return (g * deriv,)

    return x.tape.emit("spline", spline(xc), (x,), bwd)


def chirp_field(amplitude: Var, alpha: float) -> Var:
    """Optical field A * exp(j * alpha * ln A) from a positive real envelope.

    Equivalent to A * exp(j * (alpha/2) * ln A^2). alpha = 0 keeps the field
    real.
    """
    if amplitude.is_complex:
        raise GradientError("chirp_field expects a real envelope")
    A = amplitude.value
    if alpha == 0.0:
        return amplitude
    safe = np.where(A > 0.0, A, 1.0)
    phase = alpha * np.log(safe)
    rot = np.exp(1j * phase)
    out = A * rot
    dE_dA = rot * (1.0 + 1j * alpha)

    def bwd(g):
        return ((np.conj(dE_dA) * g).real,)

    return amplitude.tape.emit("chirp_field", out, (amplitude,), bwd)


def power_normalize(x: Var, target_power: float) -> Var:
    """Rescale so the mean square magnitude equals target_power (exact AD)."""
    p = vmean(abs2(x)) if x.is_complex else vmean(square(x))
    if p.value == 0.0:
        raise GradientError("power_normalize of a zero-power signal")
    return mul(x, sqrt(div(x.tape.const(target_power), p)))


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(f, point, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(tape, var)`` must build a real scalar loss from ``var``; any
    stochastic element must be frozen by the caller so repeated evaluations
    are deterministic. Returns max_i |g_ad - g_fd| / (|g_fd| + 1e-12).
    """
    point = np.atleast_1d(np.asarray(point, dtype=np.float64))

    slot = GradSlot(point.copy(), "fd-check")
    tape = Tape()
    loss = f(tape, tape.watch(slot))
    tape.backward(loss)
    g_ad = slot.grad.copy()

    def value_at(p):
        t = Tape()
        out = f(t, t.const(p))
        val = np.asarray(out.value, dtype=np.float64)
        if np.isnan(val).any():
            raise GradientError("objective returned NaN during finite differencing")
        return float(val)

    g_fd = np.empty_like(point)
    for i in range(point.size):
        step = np.zeros_like(point)
        step[i] = eps
        g_fd[i] = (value_at(point + step) - value_at(point - step)) / (2.0 * eps)

    return float(np.max(np.abs(g_ad - g_fd) / (np.abs(g_fd) + 1e-12)))
