"""Dense float64 kernel and a central finite-difference gradient checker.

Dense matrices are plain row-major ``numpy.float64`` arrays; the helpers here
only add the shape/domain checks the rest of the package relies on.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError, ShapeError

DEFAULT_STEP = 1e-5
REL_EPS = 1e-8


def as_matrix(values, rows=None, cols=None):
    a = np.array(values, dtype=np.float64, order="C")
    if a.ndim == 1 and rows is not None and cols is not None:
        if a.size != rows * cols:
            raise ShapeError(f"{a.size} values cannot fill a {rows}x{cols} matrix")
        a = a.reshape(rows, cols)
    return a


def identity(n):
    return np.eye(n, dtype=np.float64)


def zeros(rows, cols):
    return np.zeros((rows, cols), dtype=np.float64)


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(v, axis=-1):
    """Numerically stable softmax along ``axis``."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise DomainError("softmax of an empty vector")
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def l2_norm(v, axis=-1):
    return np.sqrt(np.sum(np.square(v), axis=axis))


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    param_count: int
    worst_index: int

    def passed(self, tol=1e-4):
        return self.max_relative_error < tol


def relative_error(analytic, numeric, eps=REL_EPS):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), eps)
    return np.abs(analytic - numeric) / scale


def _central(f, x, flat, i, h):
    orig = flat[i]
    flat[i] = orig + h
    fp = float(f(x))
    flat[i] = orig - h
    fm = float(f(x))
    flat[i] = orig
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise NumericError(f"non-finite function value at coordinate {i}")
    return (fp - fm) / (2.0 * h)


def numeric_grad(f, params, step=DEFAULT_STEP, richardson=False):
    """Central differences of scalar ``f`` at ``params`` (any shape).

    With ``richardson`` the steps ``step`` and ``step/2`` are combined so the
    O(h^2) truncation term cancels, which allows a larger step (less rounding).
    """
    if not step > 0:
        raise DomainError(f"finite-difference step must be positive, got {step}")
    x = np.array(params, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        d = _central(f, x, flat, i, step)
        if richardson:
            d = (4.0 * _central(f, x, flat, i, step / 2) - d) / 3.0
        grad[i] = d
    return grad.reshape(x.shape)


def finite_diff_check(f, params, analytic_grad, step=DEFAULT_STEP, richardson=False, floor=REL_EPS):
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    if analytic.shape != params.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != parameter shape {params.shape}")
    numeric = numeric_grad(f, params, step, richardson)
    if params.size == 0:
        return GradCheckReport(0.0, 0, 0)
    err = relative_error(analytic, numeric, floor).reshape(-1)
    worst = int(np.argmax(err))
    return GradCheckReport(float(err[worst]), int(params.size), worst)
