"""
Differentiable numeric primitives with explicit forward and backward passes.

Every function here is pure: it reads numpy arrays and returns new ones. Parameter
gradients are returned, never written in place; callers accumulate them into the
`grad` half of a DualTensor. Leading axes are batch axes throughout.
"""

from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

from errors import DimensionError, NumericError, ValidationError

DEFAULT_DTYPE = np.float64
TINY = np.finfo(np.float64).tiny


class DualTensor:
    """A trainable value together with its accumulated gradient."""

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=DEFAULT_DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.value.shape:
            raise DimensionError(f"Gradient shape {grad.shape} does not match value shape {self.value.shape}")
        self.grad += grad

    def __repr__(self) -> str:
        return f"DualTensor(shape={self.shape})"


class AffineParams:
    """Weight (out x in) and bias (out) of a fully-connected map."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        weight = np.asarray(weight, dtype=DEFAULT_DTYPE)
        bias = np.asarray(bias, dtype=DEFAULT_DTYPE)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise DimensionError(f"Inconsistent affine shapes: weight {weight.shape}, bias {bias.shape}")
        self.weight = DualTensor(weight)
        self.bias = DualTensor(bias)

    @classmethod
    def uniform(cls, rng: np.random.Generator, n_out: int, n_in: int) -> "AffineParams":
        """Uniform init in [-s, s] with s = 1/sqrt(fan_in)."""
        s = 1.0 / np.sqrt(n_in)
        weight = rng.uniform(-s, s, size=(n_out, n_in))
        bias = rng.uniform(-s, s, size=n_out)
        return cls(weight, bias)

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def tensors(self, prefix: str) -> dict:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def accumulate(self, grads: Tuple[np.ndarray, np.ndarray]) -> None:
        grad_w, grad_b = grads
        self.weight.accumulate(grad_w)
        self.bias.accumulate(grad_b)


# --- Affine ---
def affine_forward(x: np.ndarray, params: AffineParams) -> np.ndarray:
    """y = W x + b over the last axis of x."""
    if x.shape[-1] != params.n_in:
        raise DimensionError(f"Affine input has inner extent {x.shape[-1]}, expected {params.n_in}")
    return x @ params.weight.value.T + params.bias.value


def affine_backward(x: np.ndarray, params: AffineParams, grad_out: np.ndarray) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """Return grad_x and (grad_W, grad_b), summed over every leading axis."""
    if x.shape[-1] != params.n_in or grad_out.shape[-1] != params.n_out or x.shape[:-1] != grad_out.shape[:-1]:
        raise DimensionError(f"Affine backward shapes disagree: x {x.shape}, grad_out {grad_out.shape}")
    grad_x = grad_out @ params.weight.value
    flat_x = x.reshape(-1, params.n_in)
    flat_g = grad_out.reshape(-1, params.n_out)
    grad_w = flat_g.T @ flat_x
    grad_b = flat_g.sum(axis=0)
    return grad_x, (grad_w, grad_b)


# --- Elementwise ---
def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0)


# largest double below 1; tanh saturates to exactly 1.0 past |x| ~ 19
_TANH_EDGE = np.nextafter(1.0, 0.0)


def tanh_forward(x: np.ndarray) -> np.ndarray:
    return np.clip(np.tanh(x), -_TANH_EDGE, _TANH_EDGE)


def tanh_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return (1.0 - y * y) * grad_out


# --- Grid softmax ---
def _flatten_grid(a: np.ndarray, grid_ndim: int) -> Tuple[np.ndarray, Tuple[int, ...]]:
    if grid_ndim < 1 or a.ndim < grid_ndim:
        raise DimensionError(f"Cannot take a {grid_ndim}-d grid from an array of shape {a.shape}")
    lead = a.shape[:a.ndim - grid_ndim]
    return a.reshape(lead + (-1,)), a.shape


def grid_softmax_forward(m: np.ndarray, grid_ndim: int = 2) -> np.ndarray:
    """Softmax over the trailing `grid_ndim` axes, max-stabilized."""
    flat, shape = _flatten_grid(m, grid_ndim)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    # underflowed cells are floored so p stays strictly positive; the sum moves by at most n * TINY
    p = np.maximum(p, TINY)
    return p.reshape(shape)


def grid_softmax_backward(p: np.ndarray, grad_out: np.ndarray, grid_ndim: int = 2) -> np.ndarray:
    """grad_m = p * (grad_out - sum(grad_out * p)) over the grid."""
    flat_p, shape = _flatten_grid(p, grid_ndim)
    flat_g, _ = _flatten_grid(grad_out, grid_ndim)
    inner = (flat_g * flat_p).sum(axis=-1, keepdims=True)
    return (flat_p * (flat_g - inner)).reshape(shape)


# --- Threshold with straight-through gradient ---
def threshold_ste_forward(p: np.ndarray, alpha: float) -> np.ndarray:
    """z = 1 where p >= alpha (inclusive), else 0."""
    if not alpha > 0:
        raise ValidationError(f"Threshold alpha must be positive, got {alpha}")
    return (p >= alpha).astype(p.dtype)


def threshold_ste_backward(grad_out: np.ndarray) -> np.ndarray:
    """Straight-through: the cotangent at p is the cotangent at z."""
    return np.array(grad_out, copy=True)


# --- Finite differences ---
@dataclass
class FiniteDiffReport:
    max_rel_err: float
    tol: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for idx in range(flat_x.size):
        orig = flat_x[idx]
        flat_x[idx] = orig + h
        f_plus = float(f(x))
        flat_x[idx] = orig - h
        f_minus = float(f(x))
        flat_x[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"Non-finite function value while differencing coordinate {idx}")
        flat_g[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


def finite_diff_check(f: Callable[[np.ndarray], Tuple[float, np.ndarray]], x: np.ndarray, tol: float = 1e-4, h: float = 1e-5) -> FiniteDiffReport:
    """Compare the analytic gradient of f at x with central differences.

    `f(x)` must return `(value, gradient)`; only the value is used while differencing.
    """
    x = np.asarray(x, dtype=np.float64)
    value, analytic = f(x)
    if not np.isfinite(value):
        raise NumericError(f"Function value at the check point is not finite: {value}")
    numeric = numeric_gradient(lambda v: f(v)[0], x, h=h)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise DimensionError(f"Analytic gradient shape {analytic.shape} differs from input shape {x.shape}")
    return FiniteDiffReport(relative_error(analytic, numeric), tol, analytic, numeric)
