"""
Differentiable array core.

Arrays are numpy ndarrays. A Tape (the computation record) stores every
primitive applied during one forward pass together with a closure that
evaluates its adjoint; Tape.backward replays those closures in reverse and
accumulates gradients into the Parameters bound to the tape.

Only the operations the encoders and the policy loss need are provided.
Binary operations require equal shapes; the only broadcasting allowed is a
0-d scalar against an array.
"""

from __future__ import annotations

import logging
import math
import zlib
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import RecordError, ShapeError

logger = logging.getLogger(__name__)

PRECISIONS: Dict[str, type] = {"float32": np.float32, "float64": np.float64}


def resolve_dtype(precision: Union[str, type, np.dtype]) -> np.dtype:
    if isinstance(precision, str):
        if precision not in PRECISIONS:
            raise ShapeError(f"unknown precision '{precision}', expected one of {sorted(PRECISIONS)}")
        return np.dtype(PRECISIONS[precision])
    return np.dtype(precision)


# --- Parameters and graph nodes ---

class Parameter:
    """A trainable array with a gradient buffer of identical shape."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, dtype: np.dtype) -> None:
        self.value = np.ascontiguousarray(self.value.astype(dtype))
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.value.shape}, dtype={self.value.dtype})"


class Var:
    __slots__ = ("value", "tape", "parameter")

    def __init__(self, value, tape: Optional["Tape"] = None, parameter: Optional[Parameter] = None):
        self.value = np.asarray(value)
        self.tape = tape
        self.parameter = parameter

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tracked = ", tracked" if self.tape is not None else ""
        return f"Var(shape={self.value.shape}{tracked})"


Adjoint = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """
    Ordered record of primitives from one forward pass.

    A disabled tape records nothing; it is used for rollouts and evaluation
    where no gradient is needed.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._entries: List[Tuple[Var, Tuple[Var, ...], Adjoint]] = []
        self._bound: Dict[int, Var] = {}
        self._consumed = False

    def __len__(self) -> int:
        return len(self._entries)

    def use(self, parameter: Parameter) -> Var:
        """Bind a Parameter once; reuse across the pass accumulates its gradient."""
        key = id(parameter)
        if key not in self._bound:
            tape = self if self.enabled else None
            self._bound[key] = Var(parameter.value, tape, parameter)
        return self._bound[key]

    def record(self, value: np.ndarray, inputs: Sequence[Var], adjoint: Adjoint) -> Var:
        if self._consumed:
            raise RecordError("this record was already differentiated; run a new forward pass")
        out = Var(value, self)
        self._entries.append((out, tuple(inputs), adjoint))
        return out

    def backward(self, loss: Var) -> None:
        if self._consumed:
            raise RecordError("backward called twice on one record without re-running forward")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        self._consumed = True
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for out, inputs, adjoint in reversed(self._entries):
            upstream = grads.pop(id(out), None)
            if upstream is None:
                continue
            for var, g in zip(inputs, adjoint(upstream)):
                if g is None or var.tape is not self:
                    continue
                key = id(var)
                grads[key] = grads[key] + g if key in grads else g
        for var in self._bound.values():
            g = grads.get(id(var))
            if g is not None:
                var.parameter.grad += g.astype(var.parameter.grad.dtype, copy=False)
        self._entries.clear()


def _tape_of(*vars_: Var) -> Optional[Tape]:
    tape = None
    for v in vars_:
        if v.tape is not None:
            if tape is not None and v.tape is not tape:
                raise RecordError("operands belong to different computation records")
            tape = v.tape
    return tape


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _emit(value: np.ndarray, inputs: Sequence[Var], adjoint: Adjoint) -> Var:
    tape = _tape_of(*inputs)
    if tape is None or not tape.enabled:
        return Var(value)
    return tape.record(value, inputs, adjoint)


def _same_shape(op: str, a: Var, b: Var) -> None:
    if a.value.ndim == 0 or b.value.ndim == 0:
        return
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, var: Var) -> np.ndarray:
    """Collapse a gradient onto a 0-d scalar operand."""
    return np.asarray(g.sum()) if var.value.ndim == 0 and g.ndim > 0 else g


# --- Layer primitives ---

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Var:
    """Cross-correlation (no kernel flip) over B×Cin×H×W inputs."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.value.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d (B,Cin,H,W), got {x.shape}")
    if weight.value.ndim != 4:
        raise ShapeError(f"conv2d: weights must be 4-d (Cout,Cin,k,k), got {weight.shape}")
    batch, cin, height, width = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} != weight channels {wcin}")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > height + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh} exceeds padded height {height + 2 * padding}")
    if kw > width + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kw} exceeds padded width {width + 2 * padding}")

    k, s, p = kh, stride, padding
    xp = np.pad(x.value, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.value
    out_h = conv_output_size(height, k, s, p)
    out_w = conv_output_size(width, k, s, p)
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :out_h, :out_w]
    out = np.tensordot(windows, weight.value, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.value[None, :, None, None]

    def adjoint(g):
        g_bias = g.sum(axis=(0, 2, 3))
        g_weight = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, weight.value, axes=([1], [0]))  # B,Ho,Wo,Cin,k,k
        g_xp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                g_xp[:, :, i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        g_x = g_xp[:, :, p:p + height, p:p + width] if p else g_xp
        return g_x, g_weight, g_bias

    return _emit(np.ascontiguousarray(out), (x, weight, bias), adjoint)


def linear(x, weight, bias) -> Var:
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.value.ndim != 2 or weight.value.ndim != 2:
        raise ShapeError(f"linear: expected 2-d input and weights, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: inner dimension {x.shape[1]} != weight columns {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.value @ weight.value.T + bias.value

    def adjoint(g):
        return g @ weight.value, g.T @ x.value, g.sum(axis=0)

    return _emit(out, (x, weight, bias), adjoint)


# --- Elementwise ---

def relu(x) -> Var:
    x = _wrap(x)
    mask = x.value > 0
    return _emit(np.where(mask, x.value, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Var:
    x = _wrap(x)
    out = _stable_sigmoid(x.value)
    return _emit(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x) -> Var:
    x = _wrap(x)
    out = np.tanh(x.value)
    return _emit(out, (x,), lambda g: (g * (1 - out * out),))


def abs_(x) -> Var:
    x = _wrap(x)
    sign = np.sign(x.value)
    return _emit(np.abs(x.value), (x,), lambda g: (g * sign,))


def exp(x) -> Var:
    x = _wrap(x)
    out = np.exp(x.value)
    return _emit(out, (x,), lambda g: (g * out,))


def square(x) -> Var:
    x = _wrap(x)
    return _emit(x.value * x.value, (x,), lambda g: (2 * g * x.value,))


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    _same_shape("add", a, b)
    return _emit(a.value + b.value, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    _same_shape("sub", a, b)
    return _emit(a.value - b.value, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    _same_shape("mul", a, b)
    return _emit(a.value * b.value, (a, b),
                 lambda g: (_reduce_to(g * b.value, a), _reduce_to(g * a.value, b)))


def scale(x, c: float) -> Var:
    x = _wrap(x)
    c = x.dtype.type(c)
    return _emit(x.value * c, (x,), lambda g: (g * c,))


def add_scalar(x, c: float) -> Var:
    x = _wrap(x)
    return _emit(x.value + x.dtype.type(c), (x,), lambda g: (g,))


def rsub_scalar(c: float, x) -> Var:
    """c - x."""
    x = _wrap(x)
    return _emit(x.dtype.type(c) - x.value, (x,), lambda g: (-g,))


def minimum(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    _same_shape("minimum", a, b)
    pick_a = a.value <= b.value
    return _emit(np.where(pick_a, a.value, b.value), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


def clip(x, low: float, high: float) -> Var:
    x = _wrap(x)
    inside = (x.value >= low) & (x.value <= high)
    return _emit(np.clip(x.value, low, high), (x,), lambda g: (g * inside,))


def concat(vars_: Sequence, axis: int = 1) -> Var:
    """Concatenate along `axis` (channels for B×C×h×w maps)."""
    vars_ = [_wrap(v) for v in vars_]
    ref = vars_[0].shape
    for v in vars_[1:]:
        if v.value.ndim != len(ref) or any(v.shape[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise ShapeError(f"concat: incompatible shapes {ref} and {v.shape} along axis {axis}")
    sizes = [v.shape[axis] for v in vars_]
    bounds = np.cumsum([0] + sizes)

    def adjoint(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(vars_))]

    return _emit(np.concatenate([v.value for v in vars_], axis=axis), vars_, adjoint)


def slice_axis(x, axis: int, start: int, stop: int) -> Var:
    x = _wrap(x)
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.value.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def adjoint(g):
        full = np.zeros_like(x.value)
        full[index] = g
        return (full,)

    return _emit(x.value[index], (x,), adjoint)


def stack(vars_: Sequence, axis: int = 0) -> Var:
    vars_ = [_wrap(v) for v in vars_]
    for v in vars_[1:]:
        if v.shape != vars_[0].shape:
            raise ShapeError(f"stack: shape mismatch {vars_[0].shape} vs {v.shape}")

    def adjoint(g):
        return [np.take(g, i, axis=axis) for i in range(len(vars_))]

    return _emit(np.stack([v.value for v in vars_], axis=axis), vars_, adjoint)


def reshape(x, shape: Sequence[int]) -> Var:
    x = _wrap(x)
    out = x.value.reshape(shape)
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x) -> Var:
    """B×... → B×(prod ...)."""
    x = _wrap(x)
    return reshape(x, (x.shape[0], -1))


def sum_(x, axis: Optional[int] = None) -> Var:
    x = _wrap(x)
    out = x.value.sum(axis=axis)

    def adjoint(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _emit(np.asarray(out), (x,), adjoint)


def mean(x) -> Var:
    x = _wrap(x)
    return scale(sum_(x), 1.0 / max(x.value.size, 1))


def take(x, index: np.ndarray) -> Var:
    """out[i] = x[i, index[i]] for a 2-d x."""
    x = _wrap(x)
    index = np.asarray(index, dtype=np.int64)
    if x.value.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError(f"take: expected x (M,N) and index (M,), got {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])

    def adjoint(g):
        full = np.zeros_like(x.value)
        full[rows, index] = g
        return (full,)

    return _emit(x.value[rows, index], (x,), adjoint)


def take_rows(x, rows: np.ndarray) -> Var:
    x = _wrap(x)
    rows = np.asarray(rows, dtype=np.int64)

    def adjoint(g):
        full = np.zeros_like(x.value)
        np.add.at(full, rows, g)
        return (full,)

    return _emit(x.value[rows], (x,), adjoint)


def log_softmax(x) -> Var:
    """Row-wise log-softmax over the last axis, max-subtracted."""
    x = _wrap(x)
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _emit(out, (x,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def one_hot(index: np.ndarray, n: int, dtype=np.float64) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"one_hot: index out of range [0, {n})")
    out = np.zeros(index.shape + (n,), dtype=dtype)
    np.put_along_axis(out, index[..., None], 1, axis=-1)
    return out


ELEMENTWISE: Dict[str, Callable] = {
    "relu": relu, "sigmoid": sigmoid, "abs": abs_, "tanh": tanh, "exp": exp,
    "add": add, "sub": sub, "mul": mul, "concat": concat,
}


def elementwise(op: str, *args, **kwargs):
    if op == "one_hot":
        return one_hot(*args, **kwargs)
    if op not in ELEMENTWISE:
        raise ShapeError(f"unknown elementwise op '{op}'")
    return ELEMENTWISE[op](*args, **kwargs)


# --- Composite ops ---

def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh) -> Var:
    """
    Gated recurrent update with reset (r), update (z) and candidate (n) gates:
        h' = (1 - z) * n + z * h
    w_ih is (3m, n), w_hh is (3m, m), gates stacked in r, z, n order.
    """
    x, h = _wrap(x), _wrap(h)
    m = h.shape[1]
    if _wrap(w_ih).shape[0] != 3 * m or _wrap(w_hh).shape != (3 * m, m):
        raise ShapeError(f"gru_cell: hidden size {m} inconsistent with weights "
                         f"{_wrap(w_ih).shape} / {_wrap(w_hh).shape}")
    if x.shape[0] != h.shape[0]:
        raise ShapeError(f"gru_cell: batch {x.shape[0]} != hidden batch {h.shape[0]}")
    gi = linear(x, w_ih, b_ih)
    gh = linear(h, w_hh, b_hh)
    r = sigmoid(add(slice_axis(gi, 1, 0, m), slice_axis(gh, 1, 0, m)))
    z = sigmoid(add(slice_axis(gi, 1, m, 2 * m), slice_axis(gh, 1, m, 2 * m)))
    n = tanh(add(slice_axis(gi, 1, 2 * m, 3 * m), mul(r, slice_axis(gh, 1, 2 * m, 3 * m))))
    return add(n, mul(z, sub(h, n)))


def softmax_cross_entropy(logits, targets: np.ndarray) -> Var:
    """Mean over rows of -log softmax(logits)[target]."""
    logits = _wrap(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.value.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (M,N), got {logits.shape}")
    rows, n = logits.shape
    if targets.shape != (rows,):
        raise ShapeError(f"softmax_cross_entropy: targets shape {targets.shape} != ({rows},)")
    if rows and (targets.min() < 0 or targets.max() >= n):
        raise ShapeError(f"softmax_cross_entropy: target out of range [0, {n})")
    return scale(sum_(take(log_softmax(logits), targets)), -1.0 / rows)


# --- Gradient checking ---

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray,
                            eps: float = 1e-5, indices: Optional[Iterable[int]] = None) -> float:
    """
    Max relative error between `analytic` and central differences of f at x.

    `x` is perturbed in place and restored. `indices` restricts the check to
    a subset of flat positions.
    """
    if eps <= 0:
        raise ShapeError("finite_difference_check: eps must be > 0")
    base = f(x)
    if not math.isfinite(base):
        raise ShapeError("finite_difference_check: f(x) is not finite")
    flat = x.reshape(-1)
    grad = np.asarray(analytic).reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in positions:
        original = flat[i]
        flat[i] = original + eps
        plus = f(x)
        flat[i] = original - eps
        minus = f(x)
        flat[i] = original
        numeric = (plus - minus) / (2 * eps)
        worst = max(worst, float(relative_error(np.asarray(grad[i]), np.asarray(numeric))))
    return worst


def check_parameters(loss_fn: Callable[[Tape], Var], parameters: Dict[str, Parameter], eps: float = 1e-5,
                     max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None
                     ) -> Dict[str, float]:
    """Gradient check for every Parameter reachable by loss_fn; returns max error per name."""
    for p in parameters.values():
        p.zero_grad()
    tape = Tape()
    tape.backward(loss_fn(tape))
    analytic = {name: p.grad.copy() for name, p in parameters.items()}

    report = {}
    for name, p in parameters.items():
        def f(_, loss_fn=loss_fn):
            return float(loss_fn(Tape(enabled=False)).value)
        indices = None
        if max_entries is not None and p.value.size > max_entries:
            rng = rng or np.random.default_rng(0)
            indices = rng.choice(p.value.size, size=max_entries, replace=False)
        report[name] = finite_difference_check(f, p.value, analytic[name], eps, indices)
    for p in parameters.values():
        p.zero_grad()
    return report


# --- Modules and initialisation ---

def parameter_rng(seed: int, name: str) -> np.random.Generator:
    """Initial values depend only on (seed, parameter name)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


class Module:
    """Named collection of Parameters and child modules."""

    def __init__(self, name: str, seed: int = 0, precision: str = "float32"):
        self.name = name
        self.seed = seed
        self.dtype = resolve_dtype(precision)
        self._params: Dict[str, Parameter] = {}
        self._children: Dict[str, "Module"] = {}

    def _full(self, local: str) -> str:
        return f"{self.name}.{local}" if self.name else local

    def param(self, local: str, shape: Sequence[int], init: str = "fan_in", bound: float = 0.0) -> Parameter:
        name = self._full(local)
        rng = parameter_rng(self.seed, name)
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "uniform":
            value = rng.uniform(-bound, bound, size=shape)
        elif init == "fan_in":
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
            limit = 1.0 / math.sqrt(max(fan_in, 1))
            value = rng.uniform(-limit, limit, size=shape)
        else:
            raise ValueError(f"unknown init '{init}'")
        p = Parameter(name, value.astype(self.dtype))
        self._params[local] = p
        return p

    def child(self, module: "Module") -> "Module":
        self._children[module.name] = module
        return module

    def parameters(self) -> Dict[str, Parameter]:
        out: Dict[str, Parameter] = {p.name: p for p in self._params.values()}
        for c in self._children.values():
            out.update(c.parameters())
        return out

    def parameter_count(self) -> int:
        return int(sum(p.value.size for p in self.parameters().values()))

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def astype(self, precision: str) -> "Module":
        self.dtype = resolve_dtype(precision)
        for p in self._params.values():
            p.astype(self.dtype)
        for c in self._children.values():
            c.astype(precision)
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        mismatched = [f"{n}: {arrays[n].shape} != {p.shape}" for n, p in params.items()
                      if n in arrays and arrays[n].shape != p.shape]
        if missing or mismatched:
            raise ShapeError("parameter mismatch; missing=" + ",".join(missing)
                             + " shapes=" + "; ".join(mismatched))
        for name, p in params.items():
            p.value = np.ascontiguousarray(arrays[name].astype(p.value.dtype))
            p.grad = np.zeros_like(p.value)


# --- Optimizer ---

class Adam:
    """Adam with global gradient-norm clipping; zeroes gradients after each step."""

    def __init__(self, parameters: Dict[str, Parameter], lr: float = 2.5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-5, max_grad_norm: Optional[float] = 0.5):
        self.parameters = parameters
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in parameters.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in parameters.items()}

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                             for p in self.parameters.values()))

    def step(self) -> float:
        norm = self.grad_norm()
        clip_coef = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            clip_coef = self.max_grad_norm / (norm + 1e-6)
        self.t += 1
        bc1 = 1 - self.beta1 ** self.t
        bc2 = 1 - self.beta2 ** self.t
        for name, p in self.parameters.items():
            g = p.grad * p.value.dtype.type(clip_coef)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            step = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.value -= step.astype(p.value.dtype)
            p.zero_grad()
        return norm

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {f"adam.m.{n}": a.copy() for n, a in self.m.items()}
        out.update({f"adam.v.{n}": a.copy() for n, a in self.v.items()})
        return out

    def load_state_dict(self, arrays: Dict[str, np.ndarray], t: int) -> None:
        for n in self.parameters:
            self.m[n] = arrays[f"adam.m.{n}"].astype(self.m[n].dtype).copy()
            self.v[n] = arrays[f"adam.v.{n}"].astype(self.v[n].dtype).copy()
        self.t = int(t)
