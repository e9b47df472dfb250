"""Asymmetric query and key hash encoders.

Queries go through a three layer MLP::

    v_q = W3 . GELU(W2 . GELU(LayerNorm(W1 . q)))

and keys through a single projection ``z_k = Wk . k``. Codes are
``sign(v_q)`` and ``sign(z_k)``. During training the sign is replaced by
``tanh(beta * x)`` where beta is annealed by :func:`beta_schedule`.

Vectors are rows: a batch of queries is an ``(n, d)`` array and
``W1`` is ``(d, hidden)``.

====
"""

from __future__ import annotations

import dataclasses
import logging
from typing import TYPE_CHECKING

import numpy as np

from . import hashing
from .numerics import (
    DimensionError,
    gelu,
    gelu_grad,
    layer_norm,
    layer_norm_backward,
)

if TYPE_CHECKING:
    import numpy.typing as npt
    from typing_extensions import Self

    from .numerics import RealMatrix

HIDDEN_WIDTH = 256

BETA_MIN = 1.0
BETA_MAX = 10.0
# Annealing steps per unit of beta
_BETA_STEPS = 1000.0

logger = logging.getLogger(__name__)


def beta_schedule(global_step: int) -> float:
    """Tanh sharpness at a training step, ``min(10, 1 + step * 0.001)``."""
    return min(BETA_MAX, BETA_MIN + global_step / _BETA_STEPS)


def he_normal(
    rng: np.random.Generator, fan_in: int, fan_out: int
) -> RealMatrix:
    """Zero mean normal weights with std ``sqrt(2 / fan_in)``."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class ParamsMixin:
    """Field-wise helpers shared by the parameter dataclasses."""

    def zeros_like(self) -> Self:
        """Same shapes, all zero. Used to hold gradients."""
        return dataclasses.replace(
            self,  # type: ignore [type-var]
            **{
                f.name: np.zeros_like(getattr(self, f.name))
                for f in dataclasses.fields(self)  # type: ignore [arg-type]
            },
        )

    def copy(self) -> Self:
        """Deep copy of the arrays."""
        return dataclasses.replace(
            self,  # type: ignore [type-var]
            **{
                f.name: np.array(getattr(self, f.name), copy=True)
                for f in dataclasses.fields(self)  # type: ignore [arg-type]
            },
        )

    def matrices(self) -> list[RealMatrix]:
        """Arrays in field order."""
        return [
            getattr(self, f.name)
            for f in dataclasses.fields(self)  # type: ignore [arg-type]
        ]

    def accumulate(self, other: Self, scale: float = 1.0) -> None:
        """In place ``self += scale * other``."""
        for f in dataclasses.fields(self):  # type: ignore [arg-type]
            getattr(self, f.name)[...] += scale * getattr(other, f.name)


@dataclasses.dataclass(eq=False)
class QueryEncoderParams(ParamsMixin):
    """Weights of the query MLP."""

    # (d, hidden) first projection
    w1: RealMatrix
    # (hidden,) LayerNorm gain
    ln_gain: RealMatrix
    # (hidden,) LayerNorm bias
    ln_bias: RealMatrix
    # (hidden, hidden)
    w2: RealMatrix
    # (hidden, l) output projection
    w3: RealMatrix

    def __post_init__(self) -> None:
        """Check that shapes chain together."""
        d, hidden = self.w1.shape
        if (
            self.ln_gain.shape != (hidden,)
            or self.ln_bias.shape != (hidden,)
            or self.w2.shape != (hidden, hidden)
            or self.w3.shape[0] != hidden
        ):
            raise DimensionError(
                f'inconsistent query encoder shapes for d={d}, '
                f'hidden={hidden}'
            )

    @classmethod
    def init(
        cls,
        d: int,
        length_bits: int,
        rng: np.random.Generator,
        hidden: int = HIDDEN_WIDTH,
    ) -> Self:
        """Fan-in scaled random weights, unit gain and zero bias."""
        return cls(
            w1=he_normal(rng, d, hidden),
            ln_gain=np.ones(hidden),
            ln_bias=np.zeros(hidden),
            w2=he_normal(rng, hidden, hidden),
            w3=he_normal(rng, hidden, length_bits),
        )

    @property
    def d(self) -> int:
        """Input dimension."""
        return int(self.w1.shape[0])

    @property
    def length_bits(self) -> int:
        """Code length."""
        return int(self.w3.shape[1])


@dataclasses.dataclass(eq=False)
class KeyEncoderParams(ParamsMixin):
    """Weights of the key projection."""

    # (d, l)
    wk: RealMatrix

    @classmethod
    def init(
        cls, d: int, length_bits: int, rng: np.random.Generator
    ) -> Self:
        """Fan-in scaled random projection."""
        return cls(wk=he_normal(rng, d, length_bits))

    @property
    def d(self) -> int:
        """Input dimension."""
        return int(self.wk.shape[0])

    @property
    def length_bits(self) -> int:
        """Code length."""
        return int(self.wk.shape[1])


@dataclasses.dataclass
class QueryForward:
    """Activations kept for the query backward pass."""

    q: RealMatrix
    a1: RealMatrix
    n1: RealMatrix
    h1: RealMatrix
    a2: RealMatrix
    h2: RealMatrix
    v: RealMatrix
    beta: float
    out: RealMatrix


def _as_rows(x: npt.ArrayLike, d: int) -> tuple[RealMatrix, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != d:  # noqa: PLR2004
        raise DimensionError(
            f'expected vectors of dimension {d}, got {x.shape}'
        )
    return x, single


def _check_vector(x: npt.ArrayLike) -> None:
    if np.ndim(x) != 1:
        raise DimensionError('expected a single vector')


def query_logits(
    q: npt.ArrayLike,
    params: QueryEncoderParams,
    trace: list[str] | None = None,
) -> RealMatrix:
    """Pre-binarization query activation ``v_q``.

    ``trace``, if given, collects the names of the operations applied.
    """
    rows, single = _as_rows(q, params.d)
    v = _query_forward(rows, params, 1.0, trace).v
    return v[0] if single else v


def _query_forward(
    q: RealMatrix,
    params: QueryEncoderParams,
    beta: float,
    trace: list[str] | None = None,
) -> QueryForward:
    a1 = q @ params.w1
    n1 = layer_norm(a1, params.ln_gain, params.ln_bias)
    h1 = gelu(n1)
    a2 = h1 @ params.w2
    h2 = gelu(a2)
    v = h2 @ params.w3
    if trace is not None:
        trace.extend(
            ('matmul', 'layer_norm', 'gelu', 'matmul', 'gelu', 'matmul')
        )
    return QueryForward(q, a1, n1, h1, a2, h2, v, beta, np.tanh(beta * v))


def query_forward(
    q: npt.ArrayLike, params: QueryEncoderParams, step: int
) -> QueryForward:
    """Relaxed query encoding keeping activations for backward."""
    rows, _ = _as_rows(q, params.d)
    return _query_forward(rows, params, beta_schedule(step))


def query_encode_relaxed(
    q: npt.ArrayLike, params: QueryEncoderParams, step: int
) -> RealMatrix:
    """Training-time query code ``tanh(beta(step) * v_q)``.

    Raises:
        DimensionError: ``q`` does not have dimension d.
    """
    rows, single = _as_rows(q, params.d)
    out = _query_forward(rows, params, beta_schedule(step)).out
    return out[0] if single else out


def query_encode_backward(
    grad_out: RealMatrix, fwd: QueryForward, params: QueryEncoderParams
) -> QueryEncoderParams:
    """Gradients of the query MLP weights given dL/d(relaxed code)."""
    grad_v = np.atleast_2d(grad_out) * fwd.beta * (1.0 - fwd.out * fwd.out)
    grad_w3 = fwd.h2.T @ grad_v
    grad_a2 = (grad_v @ params.w3.T) * gelu_grad(fwd.a2)
    grad_w2 = fwd.h1.T @ grad_a2
    grad_n1 = (grad_a2 @ params.w2.T) * gelu_grad(fwd.n1)
    grad_a1, grad_gain, grad_bias = layer_norm_backward(
        grad_n1, fwd.a1, params.ln_gain
    )
    grad_w1 = fwd.q.T @ grad_a1
    return QueryEncoderParams(grad_w1, grad_gain, grad_bias, grad_w2, grad_w3)


def query_encode(
    q: npt.ArrayLike, params: QueryEncoderParams
) -> hashing.BitCode:
    """Binary query code ``sign(v_q)``; no tanh at inference."""
    _check_vector(q)
    return hashing.sign_binarize(query_logits(q, params))


def query_codes(
    q: npt.ArrayLike, params: QueryEncoderParams
) -> npt.NDArray[np.uint64]:
    """Packed codes for a batch of queries, one row each."""
    rows, _ = _as_rows(q, params.d)
    return hashing.pack_signs(_query_forward(rows, params, 1.0).v)


def key_logits(
    k: npt.ArrayLike,
    params: KeyEncoderParams,
    trace: list[str] | None = None,
) -> RealMatrix:
    """Pre-binarization key activation ``z_k = Wk . k``."""
    rows, single = _as_rows(k, params.d)
    z = rows @ params.wk
    if trace is not None:
        trace.append('matmul')
    return z[0] if single else z


def key_encode_relaxed(
    k: npt.ArrayLike, params: KeyEncoderParams, step: int
) -> RealMatrix:
    """Training-time key code ``tanh(beta(step) * Wk . k)``.

    Raises:
        DimensionError: ``k`` does not have dimension d.
    """
    return np.tanh(beta_schedule(step) * key_logits(k, params))


def key_encode_backward(
    grad_out: RealMatrix,
    k: RealMatrix,
    relaxed: RealMatrix,
    beta: float,
) -> KeyEncoderParams:
    """Gradient of ``Wk`` given dL/d(relaxed key codes)."""
    grad_z = np.atleast_2d(grad_out) * beta * (1.0 - relaxed * relaxed)
    return KeyEncoderParams(np.atleast_2d(k).T @ grad_z)


def key_encode(k: npt.ArrayLike, params: KeyEncoderParams) -> hashing.BitCode:
    """Binary key code ``sign(Wk . k)``; done once per key at cache write."""
    _check_vector(k)
    return hashing.sign_binarize(key_logits(k, params))


def key_codes(
    k: npt.ArrayLike, params: KeyEncoderParams
) -> npt.NDArray[np.uint64]:
    """Packed codes for a batch of keys, one row each."""
    rows, _ = _as_rows(k, params.d)
    return hashing.pack_signs(rows @ params.wk)
