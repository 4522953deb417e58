"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately minimal: elementwise arithmetic with numpy broadcasting,
matmul, the reductions and shape ops the backbone needs, and a handful of
nonlinearities. Operations build a define-by-run graph; backward() on a
scalar loss visits every recorded node exactly once in reverse topological
order and accumulates into the .grad of leaves created with
requires_grad=True. Single-threaded per graph; tensors that do not
participate in gradients are treated as immutable constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, DimensionError, NumericError

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_debug_finite = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every op output. Off by default."""
    global _debug_finite
    _debug_finite = bool(enabled)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _debug_finite and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast to produce it."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """N-dimensional float64 array that can participate in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- graph bookkeeping -------------------------------------------------

    def backward(self) -> None:
        """Reverse pass from a scalar. Consumes the graph; grads accumulate
        on every requires_grad tensor reachable from this node."""
        if self.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node._backward = None
                node._prev = ()

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        a, b = self, _as_tensor(other)
        out = _from_op(a.data + b.data, (a, b), "add")
        if out._backward is _PENDING:
            def bwd(g):
                _accum(a, _unbroadcast(g, a.data.shape))
                _accum(b, _unbroadcast(g, b.data.shape))
            out._backward = bwd
        return out

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _as_tensor(other)
        out = _from_op(a.data - b.data, (a, b), "sub")
        if out._backward is _PENDING:
            def bwd(g):
                _accum(a, _unbroadcast(g, a.data.shape))
                _accum(b, _unbroadcast(-g, b.data.shape))
            out._backward = bwd
        return out

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        a, b = self, _as_tensor(other)
        out = _from_op(a.data * b.data, (a, b), "mul")
        if out._backward is _PENDING:
            def bwd(g):
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
                _accum(b, _unbroadcast(g * a.data, b.data.shape))
            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _as_tensor(other)
        out = _from_op(a.data / b.data, (a, b), "div")
        if out._backward is _PENDING:
            def bwd(g):
                _accum(a, _unbroadcast(g / b.data, a.data.shape))
                _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
            out._backward = bwd
        return out

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        a = self
        out = _from_op(-a.data, (a,), "neg")
        if out._backward is _PENDING:
            def bwd(g):
                _accum(a, -g)
            out._backward = bwd
        return out

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ContractError("only scalar exponents are supported")
        a, p = self, float(exponent)
        out = _from_op(a.data ** p, (a,), "pow")
        if out._backward is _PENDING:
            def bwd(g):
                _accum(a, g * p * a.data ** (p - 1.0))
            out._backward = bwd
        return out

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    # -- reductions and shape ops --------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out = _from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
        if out._backward is _PENDING:
            def bwd(g):
                if axis is None:
                    _accum(a, np.broadcast_to(g, a.data.shape))
                else:
                    gg = g if keepdims else np.expand_dims(g, axis)
                    _accum(a, np.broadcast_to(gg, a.data.shape))
            out._backward = bwd
        return out

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        count = a.data.size if axis is None else a.data.shape[axis]
        out = _from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean")
        if out._backward is _PENDING:
            def bwd(g):
                if axis is None:
                    _accum(a, np.broadcast_to(g / count, a.data.shape))
                else:
                    gg = g if keepdims else np.expand_dims(g, axis)
                    _accum(a, np.broadcast_to(gg / count, a.data.shape))
            out._backward = bwd
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out = _from_op(a.data.reshape(shape), (a,), "reshape")
        if out._backward is _PENDING:
            def bwd(g):
                _accum(a, g.reshape(a.data.shape))
            out._backward = bwd
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        a = self
        inverse = tuple(np.argsort(axes))
        out = _from_op(a.data.transpose(axes), (a,), "transpose")
        if out._backward is _PENDING:
            def bwd(g):
                _accum(a, g.transpose(inverse))
            out._backward = bwd
        return out

    def exp(self):
        a = self
        out = _from_op(np.exp(a.data), (a,), "exp")
        if out._backward is _PENDING:
            out_data = out.data
            def bwd(g):
                _accum(a, g * out_data)
            out._backward = bwd
        return out

    def log(self):
        a = self
        out = _from_op(np.log(a.data), (a,), "log")
        if out._backward is _PENDING:
            def bwd(g):
                _accum(a, g / a.data)
            out._backward = bwd
        return out


_PENDING = object()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _from_op(data: np.ndarray, parents: tuple, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._prev = parents
        out._backward = _PENDING
    return out


# -- core operations ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2D x 2D, batched nD x nD with identical
    leading dims, and nD x 2D (shared right operand, as in linear layers)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(
            f"matmul leading dims must match: {a.shape} x {b.shape}"
        )
    out = _from_op(a.data @ b.data, (a, b), "matmul")
    if out._backward is _PENDING:
        def bwd(g):
            if a.requires_grad:
                _accum(a, g @ np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                if b.ndim == 2 and a.ndim > 2:
                    k = a.shape[-1]
                    n = g.shape[-1]
                    _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
                else:
                    _accum(b, np.swapaxes(a.data, -1, -2) @ g)
        out._backward = bwd
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis. Output sums to 1."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _from_op(y, (x,), "softmax")
    if out._backward is _PENDING:
        def bwd(g):
            gy = g * y
            _accum(x, gy - y * gy.sum(axis=axis, keepdims=True))
        out._backward = bwd
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = expit(x.data)
    out = _from_op(y, (x,), "sigmoid")
    if out._backward is _PENDING:
        def bwd(g):
            _accum(x, g * y * (1.0 - y))
        out._backward = bwd
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x). No tanh approximation."""
    x = _as_tensor(x)
    phi_cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = _from_op(x.data * phi_cdf, (x,), "gelu")
    if out._backward is _PENDING:
        def bwd(g):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
            _accum(x, g * (phi_cdf + x.data * pdf))
        out._backward = bwd
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    eps sits under the square root, so constant inputs normalize to zero
    instead of dividing by zero.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    extent = x.shape[-1]
    if gamma.shape != (extent,) or beta.shape != (extent,):
        raise DimensionError(
            f"layer_norm affine params must have shape ({extent},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered * (var + eps) ** -0.5
    return normed * gamma + beta


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along one axis; gradient splits back to the parents."""
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ContractError("concat needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = _from_op(data, tuple(parts), "concat")
    if out._backward is _PENDING:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum(sizes)[:-1]
        def bwd(g):
            for p, piece in zip(parts, np.split(g, offsets, axis=axis)):
                _accum(p, piece)
        out._backward = bwd
    return out


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic and central-difference gradients."""

    max_rel_err: float
    passed: bool
    tol: float
    step: float
    n_checked: int
    worst: tuple = ()
    per_tensor: dict = field(default_factory=dict)


def _rel_err(analytic: float, numeric: float) -> float:
    # Guarded relative error: behaves as absolute error below magnitude 1.
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def _eval_scalar(f, x: Tensor) -> float:
    out = f(x)
    val = float(out.data if isinstance(out, Tensor) else out)
    if not np.isfinite(val):
        raise NumericError("grad_check: function evaluated to a non-finite value")
    return val


def grad_check(f, x: Tensor, step: float = 1e-6, tol: float = 1e-4,
               max_elements=None, rng=None) -> GradCheckReport:
    """Compare f's analytic gradient at x against central differences.

    f must be a deterministic scalar function of a single tensor. Checks
    every element by default; pass max_elements to spot-check a random
    subset of large tensors.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("grad_check requires f to return a scalar Tensor")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: function evaluated to a non-finite value")
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat_indices = np.arange(x.data.size)
    if max_elements is not None and x.data.size > max_elements:
        rng = rng or np.random.default_rng(0)
        flat_indices = rng.choice(x.data.size, size=max_elements, replace=False)

    base = x.data.copy()
    max_err, worst = 0.0, ()
    for flat in flat_indices:
        idx = np.unravel_index(flat, x.data.shape)
        bumped = base.copy()
        bumped[idx] = base[idx] + step
        hi = _eval_scalar(f, Tensor(bumped))
        bumped[idx] = base[idx] - step
        lo = _eval_scalar(f, Tensor(bumped))
        numeric = (hi - lo) / (2.0 * step)
        err = _rel_err(float(analytic[idx]), numeric)
        if err > max_err:
            max_err, worst = err, idx
    return GradCheckReport(max_rel_err=max_err, passed=max_err < tol, tol=tol,
                           step=step, n_checked=len(flat_indices), worst=worst)


def grad_check_params(loss_fn, params: dict, step: float = 1e-6, tol: float = 1e-4,
                      max_elements=None, rng=None) -> GradCheckReport:
    """grad_check over a named parameter dict.

    loss_fn takes no arguments and recomputes the scalar loss from the
    current parameter values, so numeric probing works by mutating
    param.data in place and restoring it.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("grad_check_params requires a scalar loss")
    loss.backward()

    rng = rng or np.random.default_rng(0)
    max_err, worst, checked = 0.0, (), 0
    per_tensor = {}
    for name, p in sorted(params.items()):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat_indices = np.arange(p.data.size)
        if max_elements is not None and p.data.size > max_elements:
            flat_indices = rng.choice(p.data.size, size=max_elements, replace=False)
        tensor_max = 0.0
        for flat in flat_indices:
            idx = np.unravel_index(flat, p.data.shape)
            original = p.data[idx]
            p.data[idx] = original + step
            hi = float(loss_fn().data)
            p.data[idx] = original - step
            lo = float(loss_fn().data)
            p.data[idx] = original
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("grad_check: loss evaluated to a non-finite value")
            err = _rel_err(float(analytic[idx]), (hi - lo) / (2.0 * step))
            tensor_max = max(tensor_max, err)
            if err > max_err:
                max_err, worst = err, (name, idx)
        per_tensor[name] = tensor_max
        checked += len(flat_indices)
    return GradCheckReport(max_rel_err=max_err, passed=max_err < tol, tol=tol,
                           step=step, n_checked=checked, worst=worst,
                           per_tensor=per_tensor)
