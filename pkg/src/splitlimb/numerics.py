"""Dense-network numerics with a pinned, backend-independent operation order.

Everything a trainer touches lives here: dense layers, ReLU, sigmoid, binary
cross-entropy, SGD, Glorot initialization, and parameter checksums.  Two
invariants shape the implementation:

* **Bit-reproducibility.**  Any reduction goes through `backend` (pinned
  accumulation order); elementwise arithmetic uses plain numpy, which is
  deterministic per element.  Transcendentals are evaluated in float64 via
  the portable `backend.exp_f64` / `backend.log_f64` so results do not depend
  on the host libm, then cast back to the working dtype.
* **Dtype genericity.**  Training runs in float32.  The same code path
  accepts float64 so gradients can be finite-difference checked at a
  tolerance float32 noise would swamp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .rng import Rng

Matrix = np.ndarray


class ShapeError(ValueError):
    """Operand shape or dtype does not match the operation's contract."""


class NumericsError(RuntimeError):
    """A numeric invariant was violated (non-finite values where forbidden)."""


def _as_matrix(x: np.ndarray, what: str) -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 2:
        raise ShapeError(f"{what} must be a 2-D array")
    if x.dtype not in (np.float32, np.float64):
        raise ShapeError(f"{what} must be float32 or float64, got {x.dtype}")
    return x


@dataclass(eq=False)
class DenseLayer:
    """Weights [fan_in, fan_out] and bias [fan_out], same float dtype."""

    w: Matrix
    b: np.ndarray

    @property
    def fan_in(self) -> int:
        return self.w.shape[0]

    @property
    def fan_out(self) -> int:
        return self.w.shape[1]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.w.copy(), self.b.copy())


def init_dense(rng: Rng, fan_in: int, fan_out: int, dtype=np.float32) -> DenseLayer:
    """Glorot-uniform weights in ±sqrt(6/(fan_in+fan_out)), zero bias.

    Draws fan_in*fan_out uniforms from ``rng`` in row-major order (weight
    [i, j] consumes draw i*fan_out + j), maps them to the interval in float64,
    and casts once to ``dtype``.
    """
    if fan_in < 1 or fan_out < 1:
        raise ShapeError(f"init_dense needs positive dims, got {fan_in}x{fan_out}")
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    u = rng.u01_array(fan_in * fan_out)
    w64 = -limit + u * (2.0 * limit)
    w = w64.astype(dtype).reshape(fan_in, fan_out)
    b = np.zeros(fan_out, dtype=dtype)
    return DenseLayer(w, b)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    return backend.matmul(_as_matrix(a, "matmul lhs"), _as_matrix(b, "matmul rhs"))


def dense_forward(layer: DenseLayer, x: Matrix) -> tuple[Matrix, Matrix]:
    """x @ w + b.  Returns (pre-activations, cache); cache feeds dense_backward."""
    x = _as_matrix(x, "dense input")
    if x.shape[1] != layer.fan_in:
        raise ShapeError(f"dense input has {x.shape[1]} features, layer expects {layer.fan_in}")
    if x.dtype != layer.w.dtype:
        raise ShapeError(f"dense input dtype {x.dtype} != layer dtype {layer.w.dtype}")
    z = backend.matmul(x, layer.w)
    z = z + layer.b
    return z, x


def dense_backward(
    layer: DenseLayer, cache: Matrix, grad_out: Matrix
) -> tuple[Matrix, Matrix, np.ndarray]:
    """Gradients for a dense layer: (grad_input, grad_w, grad_b).

    grad_w accumulates over the batch in row order; grad_b sums rows of
    grad_out top to bottom.
    """
    x = cache
    grad_out = _as_matrix(grad_out, "grad_out")
    if grad_out.shape != (x.shape[0], layer.fan_out):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != ({x.shape[0]}, {layer.fan_out})"
        )
    grad_w = backend.matmul(x.T, grad_out)
    grad_b = backend.colsum(grad_out)
    grad_input = backend.matmul(grad_out, layer.w.T)
    return grad_input, grad_w, grad_b


def relu(x: Matrix) -> Matrix:
    return np.maximum(x, x.dtype.type(0))


def relu_backward(grad_out: Matrix, pre_act: Matrix) -> Matrix:
    """Upstream gradient masked where the pre-activation was <= 0."""
    return grad_out * (pre_act > 0)


def sigmoid(x: Matrix) -> Matrix:
    """Numerically stable logistic function.

    Both branches evaluate exp of a non-positive argument in float64:
    x >= 0 -> 1/(1+exp(-x)), x < 0 -> exp(x)/(1+exp(x)).  Output is cast back
    to the input dtype.
    """
    x = _as_matrix(x, "sigmoid input")
    x64 = x.astype(np.float64)
    t = backend.exp_f64(-np.abs(x64))
    pos = 1.0 / (1.0 + t)
    neg = t / (1.0 + t)
    y64 = np.where(x64 >= 0.0, pos, neg)
    return y64.astype(x.dtype)


def sigmoid_backward(y: Matrix, grad_out: Matrix) -> Matrix:
    """Chain rule through sigmoid given its *output* y: grad_out * y * (1-y)."""
    one = y.dtype.type(1)
    s = one - y
    d = y * s
    return grad_out * d


def bce_loss(pred: Matrix, target: Matrix) -> tuple[float, Matrix]:
    """Mean binary cross-entropy and its gradient w.r.t. pred.

    Predictions are clamped to [eps, 1-eps] with eps = 1e-7 in the working
    dtype.  Log terms are evaluated in float64 and summed sequentially; the
    scalar loss is cast back to the working dtype.  The gradient is computed
    in the working dtype from the clamped predictions:
    (p - y) / (p * (1 - p)) / n.
    """
    pred = _as_matrix(pred, "pred")
    target = _as_matrix(target, "target")
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    if pred.shape[0] == 0 or pred.shape[1] != 1:
        raise ShapeError(f"bce_loss expects a [n, 1] column with n >= 1, got {pred.shape}")
    dt = pred.dtype.type
    eps = dt(1e-7)
    one = dt(1)
    p = np.clip(pred, eps, one - eps)
    p64 = p.astype(np.float64)
    y64 = target.astype(np.float64)
    terms = y64 * backend.log_f64(p64) + (1.0 - y64) * backend.log_f64(1.0 - p64)
    n = pred.shape[0]
    loss64 = -float(backend.colsum(terms)[0]) / n
    denom = p * (one - p)
    grad = (p - target) / denom
    grad = grad / dt(n)
    return float(dt(loss64)), grad


def sgd_step(layer: DenseLayer, grad_w: Matrix, grad_b: np.ndarray, lr: float, what: str = "layer") -> None:
    """In-place SGD update: p -= lr * g.  Aborts on non-finite gradients."""
    if grad_w.shape != layer.w.shape or grad_b.shape != layer.b.shape:
        raise ShapeError(
            f"gradient shapes {grad_w.shape}/{grad_b.shape} do not match "
            f"{layer.w.shape}/{layer.b.shape}"
        )
    if not np.isfinite(grad_w).all() or not np.isfinite(grad_b).all():
        bad = int((~np.isfinite(grad_w)).sum() + (~np.isfinite(grad_b)).sum())
        raise NumericsError(f"non-finite gradient for {what}: {bad} bad entries")
    lr_t = layer.w.dtype.type(lr)
    layer.w -= grad_w * lr_t
    layer.b -= grad_b * lr_t


def param_checksum(layer: DenseLayer) -> int:
    """FNV-1a 64 over the little-endian bytes of w then b.

    The byte image is pinned to little-endian float32/float64 regardless of
    host endianness, so checksums are comparable across machines.
    """
    le = "<f4" if layer.w.dtype == np.float32 else "<f8"
    h = backend.fnv1a64(np.ascontiguousarray(layer.w).astype(le, copy=False).tobytes())
    return backend.fnv1a64(np.ascontiguousarray(layer.b).astype(le, copy=False).tobytes(), h)
