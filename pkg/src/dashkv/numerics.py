"""Dense real-valued helpers with hand written backward passes.

Everything here works on float64 numpy arrays. Functions accept either a
single vector or a batch of row vectors where that makes sense, and the
backward passes mirror the forward ones argument for argument so they can
be verified with :func:`finite_diff_check`.

====
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import TYPE_CHECKING

import numpy as np
import numpy.typing as npt
from scipy import special

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

    from typing_extensions import TypeAlias

RealMatrix: TypeAlias = npt.NDArray[np.float64]

LAYER_NORM_EPS = 1e-5

_SQRT_HALF = math.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

logger = logging.getLogger(__name__)


class NumericsError(Exception):
    """Base class for numerical errors."""


class DimensionError(NumericsError):
    """Shapes or lengths do not agree."""


class DomainError(NumericsError):
    """Argument outside the domain of the operation."""


class EmptyDistributionError(NumericsError):
    """Every entry of a distribution is masked."""


class DegenerateInputError(NumericsError):
    """Input is empty or otherwise degenerate."""


class EvaluationError(NumericsError):
    """A function produced a non-finite value."""


@dataclasses.dataclass(frozen=True)
class GradCheckReport:
    """Result of comparing an analytic gradient to central differences."""

    # max |analytic - numeric| / max(1, |analytic|, |numeric|)
    max_relative_error: float
    # (row, col) of the worst coordinate, vectors are treated as one row
    worst_index: tuple[int, int]
    analytic: float
    numeric: float


def check_finite(name: str, value: npt.ArrayLike) -> None:
    """Raise EvaluationError if ``value`` has a NaN or infinite entry."""
    if not np.all(np.isfinite(value)):
        raise EvaluationError(f'{name} has non-finite entries')


def gelu(x: npt.ArrayLike) -> RealMatrix:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + special.erf(x * _SQRT_HALF))


def gelu_grad(x: npt.ArrayLike) -> RealMatrix:
    """Derivative of :func:`gelu`, ``Phi(x) + x * phi(x)``."""
    x = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + special.erf(x * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def sigmoid(x: npt.ArrayLike) -> RealMatrix:
    """Logistic sigmoid."""
    return special.expit(np.asarray(x, dtype=np.float64))


def layer_norm(
    v: npt.ArrayLike,
    gain: npt.ArrayLike,
    bias: npt.ArrayLike,
    eps: float = LAYER_NORM_EPS,
) -> RealMatrix:
    """Normalize the last axis of ``v`` to zero mean and unit variance.

    Uses the population variance. ``v`` may be one vector or a batch of
    rows; ``gain`` and ``bias`` are vectors of the same width.

    Raises:
        DimensionError: widths disagree.
        DomainError: eps is not positive.
    """
    v = np.asarray(v, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if v.shape[-1] != gain.shape[-1] or v.shape[-1] != bias.shape[-1]:
        raise DimensionError(
            f'layer_norm width mismatch: {v.shape[-1]}, '
            f'{gain.shape[-1]}, {bias.shape[-1]}'
        )
    if eps <= 0:
        raise DomainError('layer_norm eps must be positive')
    xhat, _ = _standardize(v, eps)
    return xhat * gain + bias


def _standardize(v: RealMatrix, eps: float) -> tuple[RealMatrix, RealMatrix]:
    mean = v.mean(axis=-1, keepdims=True)
    centered = v - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered * inv_std, inv_std


def layer_norm_backward(
    grad_out: RealMatrix,
    v: RealMatrix,
    gain: RealMatrix,
    eps: float = LAYER_NORM_EPS,
) -> tuple[RealMatrix, RealMatrix, RealMatrix]:
    """Backward pass of :func:`layer_norm`.

    Returns:
        A tuple (grad_v, grad_gain, grad_bias). Gain and bias gradients
        are summed over the batch.
    """
    xhat, inv_std = _standardize(np.asarray(v, dtype=np.float64), eps)
    grad_xhat = grad_out * gain
    grad_v = inv_std * (
        grad_xhat
        - grad_xhat.mean(axis=-1, keepdims=True)
        - xhat * (grad_xhat * xhat).mean(axis=-1, keepdims=True)
    )
    batch_axes = tuple(range(grad_out.ndim - 1))
    grad_gain = (grad_out * xhat).sum(axis=batch_axes)
    grad_bias = grad_out.sum(axis=batch_axes)
    return grad_v, grad_gain, grad_bias


def softmax(v: npt.ArrayLike, temperature: float = 1.0) -> RealMatrix:
    """Temperature softmax over the last axis.

    Entries equal to -inf are masked and get probability exactly zero.

    Raises:
        DomainError: temperature is not positive.
        EmptyDistributionError: a row has every entry masked.
    """
    if temperature <= 0:
        raise DomainError('softmax temperature must be positive')
    v = np.asarray(v, dtype=np.float64)
    peak = v.max(axis=-1, keepdims=True)
    if np.any(np.isneginf(peak)):
        raise EmptyDistributionError('all entries are masked')
    weights = np.exp((v - peak) / temperature)
    return weights / weights.sum(axis=-1, keepdims=True)


def log_softmax(v: npt.ArrayLike, temperature: float = 1.0) -> RealMatrix:
    """Log of :func:`softmax`; masked entries stay at -inf."""
    if temperature <= 0:
        raise DomainError('softmax temperature must be positive')
    v = np.asarray(v, dtype=np.float64)
    peak = v.max(axis=-1, keepdims=True)
    if np.any(np.isneginf(peak)):
        raise EmptyDistributionError('all entries are masked')
    shifted = (v - peak) / temperature
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def nearest_rank(values: npt.ArrayLike, percent: float) -> float:
    """Nearest-rank percentile, ``sorted[ceil(p/100 * n) - 1]``.

    ``percent == 0`` maps to the minimum.

    Raises:
        DegenerateInputError: ``values`` is empty.
        DomainError: percent is outside [0, 100].
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    n = values.size
    if n == 0:
        raise DegenerateInputError('percentile of an empty vector')
    if not 0 <= percent <= 100:  # noqa: PLR2004
        raise DomainError(f'percent out of range: {percent}')
    rank = max(math.ceil(percent * n / 100) - 1, 0)
    return float(np.partition(values, rank)[rank])


def finite_diff_check(
    f: Callable[[RealMatrix], float],
    params: npt.ArrayLike,
    analytic_grad: npt.ArrayLike,
    h: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> GradCheckReport:
    """Compare ``analytic_grad`` with central differences of ``f``.

    Args:
        f: Scalar function of an array shaped like ``params``.
        params: Point at which to check.
        analytic_grad: Gradient claimed for ``f`` at ``params``.
        h: Step size.
        coords: Optional flat indices to check. All coordinates
            are checked by default.

    Raises:
        DomainError: h is not positive.
        DimensionError: gradient and params shapes differ.
        EvaluationError: f returned a non-finite value.
    """
    if h <= 0:
        raise DomainError('finite difference step must be positive')
    point = np.array(params, dtype=np.float64)
    grad = np.asarray(analytic_grad, dtype=np.float64)
    if grad.shape != point.shape:
        raise DimensionError(
            f'gradient shape {grad.shape} != params shape {point.shape}'
        )
    shape2d = point.shape if point.ndim == 2 else (1, point.size)  # noqa
    flat = point.reshape(-1)
    flat_grad = grad.reshape(-1)
    indices = range(flat.size) if coords is None else coords

    worst: GradCheckReport | None = None
    for i in indices:
        saved = flat[i]
        flat[i] = saved + h
        f_plus = _evaluate(f, point)
        flat[i] = saved - h
        f_minus = _evaluate(f, point)
        flat[i] = saved
        numeric = (f_plus - f_minus) / (2.0 * h)
        analytic = float(flat_grad[i])
        scale = max(1.0, abs(analytic), abs(numeric))
        error = abs(analytic - numeric) / scale
        if worst is None or error > worst.max_relative_error:
            row, col = divmod(int(i), shape2d[1])
            worst = GradCheckReport(error, (row, col), analytic, numeric)
    if worst is None:
        return GradCheckReport(0.0, (0, 0), 0.0, 0.0)
    return worst


def _evaluate(f: Callable[[RealMatrix], float], point: RealMatrix) -> float:
    value = float(f(point))
    if not math.isfinite(value):
        raise EvaluationError(f'non-finite function value: {value}')
    return value
