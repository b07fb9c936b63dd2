"""Immutable real/complex tensors with a small reverse-mode engine.

Gradients of a real scalar loss with respect to a complex tensor are stored
as ``dL/dRe + 1j * dL/dIm``.  With that convention the pullback of any
complex-linear map ``A`` is ``A^H``, and the pullback of ``a * b`` with
respect to ``a`` is ``g * conj(b)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from dunmri import fft as _fft

Vjp = Callable[[np.ndarray, tuple], tuple]


class Node:
    """One tape entry: the op that produced a tensor and how to pull back."""

    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple, vjp: Vjp | None):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


def _freeze(arr: np.ndarray) -> np.ndarray:
    if arr.dtype.kind == "c":
        arr = arr.astype(np.complex128, copy=False)
    else:
        arr = arr.astype(np.float64, copy=False)
    arr.flags.writeable = False
    return arr


class Tensor:
    __slots__ = ("data", "node", "name", "__weakref__")

    def __init__(self, data, node: Node | None = None, name: str | None = None):
        self.data = _freeze(np.array(data))
        self.node = node
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, node: Node | None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _freeze(np.asarray(arr))
        t.node = node
        t.name = None
        return t

    @classmethod
    def param(cls, data, name: str | None = None) -> "Tensor":
        """A leaf that collects gradients."""
        return cls(data, Node("leaf", (), None), name)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_complex(self) -> bool:
        return self.data.dtype.kind == "c"

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    @property
    def is_leaf(self) -> bool:
        return self.node is not None and self.node.op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self) -> str:
        kind = "complex" if self.is_complex else "real"
        tag = f", op={self.node.op}" if self.node else ""
        return f"Tensor({kind}, shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def make_op(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp) -> Tensor:
    """Record ``out`` on the tape if any input carries a grad record."""
    if any(t.node is not None for t in inputs):
        return Tensor._wrap(out, Node(op, tuple(inputs), vjp))
    return Tensor._wrap(out, None)


def _needs(inputs) -> tuple:
    return tuple(t.node is not None for t in inputs)


# ---------------------------------------------------------------- elementwise


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "add")

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return make_op("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "sub")

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return make_op("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    """Elementwise product (identical shapes, or one operand 0-d)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "mul")

    def vjp(g, needs):
        return (_unbroadcast(g * np.conj(b.data), a.shape) if needs[0] else None,
                _unbroadcast(g * np.conj(a.data), b.shape) if needs[1] else None)

    return make_op("mul", a.data * b.data, (a, b), vjp)


mul_elementwise = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "div")
    out = a.data / b.data

    def vjp(g, needs):
        ga = _unbroadcast(g / np.conj(b.data), a.shape) if needs[0] else None
        gb = _unbroadcast(-g * np.conj(out / b.data), b.shape) if needs[1] else None
        return ga, gb

    return make_op("div", out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    """Multiply by a fixed real scalar."""
    a = as_tensor(a)
    c = float(c)
    return make_op("scale", a.data * c, (a,), lambda g, needs: (g * c,))


def mul_const(a, c: np.ndarray) -> Tensor:
    """Multiply by a constant array that numpy-broadcasts to ``a``'s shape."""
    a = as_tensor(a)
    c = np.asarray(c)
    out = a.data * c
    if out.shape != a.shape:
        raise ValueError(f"mul_const: constant {c.shape} does not broadcast into {a.shape}")
    return make_op("mul_const", out, (a,), lambda g, needs: (g * np.conj(c),))


def mask_multiply(a, mask: np.ndarray) -> Tensor:
    """Zero entries where ``mask`` is false; self-adjoint and idempotent."""
    return mul_const(a, np.asarray(mask, dtype=np.float64))


def square(a) -> Tensor:
    a = as_tensor(a)
    if a.is_complex:
        raise TypeError("square expects a real tensor")
    return make_op("square", a.data * a.data, (a,), lambda g, needs: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op("sqrt", out, (a,), lambda g, needs: (g / (2.0 * out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return make_op("softplus", out, (a,), lambda g, needs: (g * sig,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return make_op("leaky_relu", out, (a,), lambda g, needs: (np.where(pos, g, slope * g),))


def soft_threshold(a, t: float) -> Tensor:
    """Shrink magnitudes by ``t`` and keep the phase (sign for real input)."""
    if t < 0:
        raise ValueError(f"soft_threshold: threshold must be >= 0, got {t}")
    a = as_tensor(a)
    x = a.data
    r = np.abs(x)
    alive = r > t
    safe_r = np.where(alive, r, 1.0)
    gain = np.where(alive, 1.0 - t / safe_r, 0.0)
    out = x * gain

    def vjp(g, needs):
        # Jacobian of x * (1 - t/|x|) viewed in R^2: gain*I + (t/|x|) u u^T
        u = np.where(alive, x / safe_r, 0.0)
        radial = np.where(alive, t / safe_r, 0.0) * np.real(np.conj(u) * g)
        return (gain * g + radial * u,)

    return make_op("soft_threshold", out, (a,), vjp)


def abs_(a) -> Tensor:
    """Complex magnitude (or |x| for real input); subgradient 0 at the origin."""
    a = as_tensor(a)
    r = np.abs(a.data)

    def vjp(g, needs):
        safe = np.where(r > 0, r, 1.0)
        return (np.where(r > 0, g * a.data / safe, 0.0),)

    return make_op("abs", r, (a,), vjp)


def real(a) -> Tensor:
    a = as_tensor(a)
    return make_op("real", np.real(a.data).copy(), (a,), lambda g, needs: (np.real(g),))


def conj(a) -> Tensor:
    a = as_tensor(a)
    return make_op("conj", np.conj(a.data), (a,), lambda g, needs: (np.conj(g),))


def sum_(a) -> Tensor:
    a = as_tensor(a)
    return make_op("sum", np.asarray(a.data.sum()), (a,),
                   lambda g, needs: (np.broadcast_to(g, a.shape),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return make_op("mean", np.asarray(a.data.mean()), (a,),
                   lambda g, needs: (np.broadcast_to(g / n, a.shape),))


def stop_gradient(a) -> Tensor:
    """Same buffer, no grad record: a constant as far as backward is concerned."""
    a = as_tensor(a)
    return Tensor._wrap(a.data, None)


# ------------------------------------------------------------ layout helpers


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_op("reshape", a.data.reshape(shape), (a,),
                   lambda g, needs: (g.reshape(a.shape),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g, needs):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] if needs[i] else None for i in range(len(tensors)))

    return make_op("stack", np.stack([t.data for t in tensors], axis=axis), tensors, vjp)


def concat_channels(a, b) -> Tensor:
    """Concatenate along the channel axis (axis -3)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[-3]

    def vjp(g, needs):
        return (g[..., :ca, :, :] if needs[0] else None,
                g[..., ca:, :, :] if needs[1] else None)

    return make_op("concat", np.concatenate([a.data, b.data], axis=-3), (a, b), vjp)


def complex_to_channels(a) -> Tensor:
    """(..., H, W) complex -> (..., 2, H, W) real with [real, imag] channels."""
    a = as_tensor(a)
    out = np.stack([a.data.real, a.data.imag], axis=-3)

    def vjp(g, needs):
        return (g[..., 0, :, :] + 1j * g[..., 1, :, :],)

    return make_op("complex_to_channels", out, (a,), vjp)


def channels_to_complex(a) -> Tensor:
    """Inverse of :func:`complex_to_channels`."""
    a = as_tensor(a)
    if a.shape[-3] != 2:
        raise ValueError(f"channels_to_complex needs 2 channels, got shape {a.shape}")
    out = a.data[..., 0, :, :] + 1j * a.data[..., 1, :, :]

    def vjp(g, needs):
        return (np.stack([g.real, g.imag], axis=-3),)

    return make_op("channels_to_complex", out, (a,), vjp)


# ---------------------------------------------------------------- transforms


def fft2(a) -> Tensor:
    a = as_tensor(a)
    return make_op("fft2", _fft.fft2(a.data), (a,), lambda g, needs: (_fft.ifft2(g),))


def ifft2(a) -> Tensor:
    a = as_tensor(a)
    return make_op("ifft2", _fft.ifft2(a.data), (a,), lambda g, needs: (_fft.fft2(g),))


# ------------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        t, expanded = stack_.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        for parent in reversed(t.node.inputs):
            if parent.node is not None and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a real scalar ``loss`` for every leaf parameter it reaches.

    The returned mapping is keyed by the leaf tensors themselves.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_complex:
        raise TypeError("backward needs a real-valued loss")
    grads: dict[Tensor, np.ndarray] = {}
    if loss.node is None:
        return grads
    pending: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for t in reversed(_topo_order(loss)):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t.node.op == "leaf":
            grads[t] = g
            continue
        inputs = t.node.inputs
        parts = t.node.vjp(g, _needs(inputs))
        for parent, gp in zip(inputs, parts):
            if parent.node is None or gp is None:
                continue
            if not parent.is_complex and np.iscomplexobj(gp):
                gp = gp.real
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + gp
            else:
                pending[key] = np.array(gp, dtype=parent.data.dtype)
    for p, g in list(grads.items()):
        grads[p] = _freeze(np.array(g).reshape(p.shape))
    return grads


# ----------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    """Per-parameter relative error between backward() and central differences."""

    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-6
    entries_checked: int = 0
    zero_groups: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def flagged(self) -> list[str]:
        return [k for k, v in self.errors.items() if v >= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.flagged

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        cmp = "<" if self.passed else ">="
        zero = f", {len(self.zero_groups)} zero within resolution" if self.zero_groups else ""
        return (f"{status}, max rel err {self.max_error:.3e} {cmp} {self.tolerance:g} "
                f"({len(self.errors)} parameter groups, {self.entries_checked} probes{zero})")


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale_ = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale_ == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale_)


def grad_check(f: Callable[[list[Tensor]], Tensor], params: Sequence[Tensor],
               step: float = 1e-6, tolerance: float = 1e-6,
               max_entries: int | None = None, directions: int = 0,
               seed: int = 0) -> GradCheckReport:
    """Compare ``backward(f(params))`` against central finite differences.

    Every real degree of freedom is probed unless ``max_entries`` caps the
    number sampled per parameter; ``directions`` adds random directional
    probes that cover all entries of a parameter at once.

    Central differences cannot resolve gradients much below eps |f| / step.
    A group whose analytic and numeric probes both sit under that floor is
    scored 0 and listed in ``zero_groups``.
    """
    rng = np.random.default_rng(seed)
    params = list(params)
    loss = f(params)
    analytic = backward(loss)
    floor = 100.0 * np.finfo(np.float64).eps * max(abs(float(loss.data)), 1.0) / step
    report = GradCheckReport(tolerance=tolerance)

    def evaluate(i: int, delta: np.ndarray) -> float:
        trial = list(params)
        trial[i] = Tensor.param(params[i].data + delta, params[i].name)
        return float(f(trial).data)

    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        g = analytic.get(p)
        g = np.zeros(p.shape, dtype=p.data.dtype) if g is None else np.asarray(g)
        # real view: complex entries contribute their real and imaginary parts
        g_real = np.stack([g.real, g.imag], -1).ravel() if p.is_complex else g.ravel()
        n = g_real.size
        idx = np.arange(n)
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        num = np.empty(len(idx))
        for j, flat in enumerate(idx):
            e = np.zeros(n)
            e[flat] = step
            delta = _to_param_shape(e, p)
            num[j] = (evaluate(i, delta) - evaluate(i, -delta)) / (2 * step)
        ana = g_real[idx]
        probes_a, probes_n = list(ana), list(num)
        for _ in range(directions):
            v = rng.standard_normal(n)
            v /= np.linalg.norm(v)
            delta = _to_param_shape(step * v, p)
            probes_n.append((evaluate(i, delta) - evaluate(i, -delta)) / (2 * step))
            probes_a.append(float(g_real @ v))
        probes_a, probes_n = np.array(probes_a), np.array(probes_n)
        if max(np.linalg.norm(probes_a), np.linalg.norm(probes_n)) < floor * np.sqrt(len(probes_a)):
            report.errors[name] = 0.0
            report.zero_groups.append(name)
        else:
            report.errors[name] = _rel_err(probes_a, probes_n)
        report.entries_checked += len(probes_a)
    return report


def _to_param_shape(flat_real: np.ndarray, p: Tensor) -> np.ndarray:
    if p.is_complex:
        pairs = flat_real.reshape(p.shape + (2,))
        return pairs[..., 0] + 1j * pairs[..., 1]
    return flat_real.reshape(p.shape)
