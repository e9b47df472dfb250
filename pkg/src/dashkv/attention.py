"""Dynamic three tier mixed-precision attention.

For each decode step and head, keys are split by calibrated Hamming
distance into

* ``PRIOR``: sink and local-window keys, always exact,
* ``FULL``: ``D_final <= t1``, exact ``q . k / sqrt(d)`` logits,
* ``HASH_RESIDUAL``: ``t1 < D_final <= t2``, scored from the codes as
  ``<h_q, h_k> / l + delta(h_q, h_k)``,
* ``MASKED``: ``D_final > t2``, excluded from this step only.

``t1`` and ``t2`` are nearest-rank percentiles of the non-prior distances.
All tiers go through one softmax. Masked keys stay in the cache and may
be selected again at a later step.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
from typing import TYPE_CHECKING

import numpy as np

from . import calibration, encoders, hashing, options
from .numerics import (
    DegenerateInputError,
    DimensionError,
    DomainError,
    gelu,
    gelu_grad,
    nearest_rank,
    softmax,
)

if TYPE_CHECKING:
    from collections.abc import Iterator, Sequence

    import numpy.typing as npt
    from typing_extensions import Self

    from .numerics import RealMatrix

RESIDUAL_WIDTH = 64
# Bound on the magnitude of the zero initialized output weights
_ZERO_INIT_SCALE = 1e-6
_ZERO_INIT_BOUND = 1e-4

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class PriorPolicy(options.Options):
    """Which keys always bypass the hash filter."""

    # Initial tokens always retained
    n_sink: int = 4
    # Most recent tokens always retained
    n_local: int = 8
    # Explicit always-retain indices (for example separator tokens)
    extra_indices: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        """Validate counts."""
        if self.n_sink < 0 or self.n_local < 0:
            raise DomainError('prior window sizes must be nonnegative')
        self.extra_indices = tuple(self.extra_indices)


def build_prior_set(seq_len: int, policy: PriorPolicy) -> npt.NDArray[np.int64]:
    """Sorted, deduplicated indices retained at full precision.

    Out of range extra indices are dropped with a warning.
    """
    if seq_len <= 0:
        return np.zeros(0, dtype=np.int64)
    sink = np.arange(min(policy.n_sink, seq_len))
    local = np.arange(max(0, seq_len - policy.n_local), seq_len)
    extra = np.asarray(policy.extra_indices, dtype=np.int64)
    in_range = (extra >= 0) & (extra < seq_len)
    dropped = int(extra.size - in_range.sum())
    if dropped:
        logger.warning('dropped %d out of range prior indices', dropped)
    return np.union1d(np.union1d(sink, local), extra[in_range]).astype(
        np.int64
    )


class Tier(enum.IntEnum):
    """Per key precision tier."""

    PRIOR = 0
    FULL = 1
    HASH_RESIDUAL = 2
    MASKED = 3


class TierAssignment:
    """Tier of every key in the cache for one head and step."""

    tiers: npt.NDArray[np.int8]

    def __init__(self, tiers: npt.ArrayLike) -> None:
        """Wrap an array of :class:`Tier` values."""
        self.tiers = np.asarray(tiers, dtype=np.int8)

    def __len__(self) -> int:
        return int(self.tiers.size)

    def __getitem__(self, index: int) -> Tier:
        return Tier(int(self.tiers[index]))

    def __iter__(self) -> Iterator[Tier]:
        return (Tier(int(t)) for t in self.tiers)

    def indices(self, *tiers: Tier) -> npt.NDArray[np.int64]:
        """Ascending key indices belonging to any of ``tiers``."""
        return np.flatnonzero(np.isin(self.tiers, tiers)).astype(np.int64)

    def count(self, tier: Tier) -> int:
        """Number of keys in ``tier``."""
        return int(np.count_nonzero(self.tiers == tier))


def _integer_thresholds(
    values: npt.NDArray[np.unsignedinteger], p1: float, p2: float
) -> tuple[int, int]:
    cumulative = np.cumsum(np.bincount(values.ravel()))
    n = values.size

    def at(percent: float) -> int:
        rank = max(math.ceil(percent * n / 100), 1)
        return int(np.searchsorted(cumulative, rank))

    return at(p1), at(p2)


def compute_thresholds(
    d_final: npt.ArrayLike, p1: float, p2: float
) -> tuple[float, float]:
    """Nearest-rank percentiles ``t1 <= t2`` of the non-prior distances.

    Unsigned integer distances (uncalibrated Hamming distances) are
    thresholded from a histogram over ``0..l`` instead of a partition, and
    the thresholds come back as ints of the same value.

    Raises:
        DegenerateInputError: ``d_final`` is empty.
        DomainError: not ``0 <= p1 <= p2 <= 100``.
    """
    if not 0 <= p1 <= p2 <= 100:  # noqa: PLR2004
        raise DomainError(f'need 0 <= p1 <= p2 <= 100, got {p1}, {p2}')
    values = np.asarray(d_final)
    if values.size == 0:
        raise DegenerateInputError('no distances to threshold')
    if values.dtype.kind == 'u':
        return _integer_thresholds(values, p1, p2)
    values = values.astype(np.float64, copy=False)
    return nearest_rank(values, p1), nearest_rank(values, p2)


def assign_tiers(
    d_final: npt.ArrayLike,
    t1: float,
    t2: float,
    prior: npt.ArrayLike = (),
) -> TierAssignment:
    """Classify keys by calibrated distance; prior membership wins."""
    if t1 > t2:
        raise DomainError('t1 must not exceed t2')
    d_final = np.asarray(d_final, dtype=np.float64)
    tiers = np.full(d_final.shape, Tier.MASKED, dtype=np.int8)
    tiers[d_final <= t2] = Tier.HASH_RESIDUAL
    tiers[d_final <= t1] = Tier.FULL
    tiers[np.asarray(prior, dtype=np.int64)] = Tier.PRIOR
    return TierAssignment(tiers)


@dataclasses.dataclass(eq=False)
class ResidualParams(encoders.ParamsMixin):
    """Residual MLP ``2l -> width -> 1`` with a GELU hidden layer."""

    # (2l, width)
    w1: RealMatrix
    # (width,)
    b1: RealMatrix
    # (width,) output weights
    w2: RealMatrix
    # (1,) output bias
    b2: RealMatrix

    @classmethod
    def init(
        cls,
        length_bits: int,
        rng: np.random.Generator,
        width: int = RESIDUAL_WIDTH,
    ) -> Self:
        """Hidden layer fan-in scaled, output layer near zero, bias zero."""
        w2 = np.clip(
            rng.normal(0.0, _ZERO_INIT_SCALE, size=width),
            -_ZERO_INIT_BOUND,
            _ZERO_INIT_BOUND,
        )
        return cls(
            w1=encoders.he_normal(rng, 2 * length_bits, width),
            b1=np.zeros(width),
            w2=w2,
            b2=np.zeros(1),
        )

    @classmethod
    def zeros(cls, length_bits: int, width: int = RESIDUAL_WIDTH) -> Self:
        """A residual that is identically zero."""
        return cls(
            np.zeros((2 * length_bits, width)),
            np.zeros(width),
            np.zeros(width),
            np.zeros(1),
        )

    @property
    def length_bits(self) -> int:
        """Code length the residual expects."""
        return int(self.w1.shape[0] // 2)


@dataclasses.dataclass
class ResidualForward:
    """Activations kept for the residual backward pass."""

    x: RealMatrix
    a: RealMatrix
    g: RealMatrix
    out: RealMatrix


def residual_forward(
    hq: npt.ArrayLike, hk: npt.ArrayLike, phi: ResidualParams
) -> ResidualForward:
    """Residual for one query code against a batch of key codes."""
    hq = np.asarray(hq, dtype=np.float64)
    hk = np.atleast_2d(np.asarray(hk, dtype=np.float64))
    l = phi.length_bits  # noqa: E741
    if hq.shape != (l,) or hk.shape[1] != l:
        raise DimensionError(
            f'residual expects codes of length {l}, got {hq.shape}, '
            f'{hk.shape}'
        )
    x = np.concatenate([np.broadcast_to(hq, hk.shape), hk], axis=1)
    a = x @ phi.w1 + phi.b1
    g = gelu(a)
    return ResidualForward(x, a, g, g @ phi.w2 + phi.b2[0])


def residual_backward(
    grad_out: npt.ArrayLike, fwd: ResidualForward, phi: ResidualParams
) -> tuple[ResidualParams, RealMatrix, RealMatrix]:
    """Backward pass of :func:`residual_forward`.

    Returns:
        Parameter gradients, the gradient w.r.t. the query code (summed
        over the batch) and the gradient w.r.t. each key code.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    grad_w2 = fwd.g.T @ grad_out
    grad_b2 = np.array([grad_out.sum()])
    grad_a = np.outer(grad_out, phi.w2) * gelu_grad(fwd.a)
    grad_w1 = fwd.x.T @ grad_a
    grad_b1 = grad_a.sum(axis=0)
    grad_x = grad_a @ phi.w1.T
    l = phi.length_bits  # noqa: E741
    grads = ResidualParams(grad_w1, grad_b1, grad_w2, grad_b2)
    return grads, grad_x[:, :l].sum(axis=0), grad_x[:, l:]


def residual_delta(
    hq_relaxed: npt.ArrayLike, hk_relaxed: npt.ArrayLike, phi: ResidualParams
) -> float:
    """Scalar correction added to one hash score.

    Raises:
        DimensionError: codes are not both of length l.
    """
    if np.ndim(hk_relaxed) != 1:
        raise DimensionError('residual_delta expects a single key code')
    return float(residual_forward(hq_relaxed, hk_relaxed, phi).out[0])


@dataclasses.dataclass(eq=False)
class HeadParams:
    """Everything one attention head needs to hash and score keys."""

    # Query MLP, unused when the head is symmetric
    query: encoders.QueryEncoderParams | None
    key: encoders.KeyEncoderParams
    residual: ResidualParams
    # Encode queries with the key projection
    symmetric: bool = False

    def __post_init__(self) -> None:
        """Check that the parts agree on d and l."""
        if self.query is None:
            self.symmetric = True
        elif (
            self.query.d != self.key.d
            or self.query.length_bits != self.key.length_bits
        ):
            raise DimensionError('query and key encoders disagree on d or l')
        if self.residual.length_bits != self.key.length_bits:
            raise DimensionError('residual code length mismatch')

    @classmethod
    def init(
        cls,
        d: int,
        length_bits: int,
        rng: np.random.Generator,
        *,
        symmetric: bool = False,
        hidden: int = encoders.HIDDEN_WIDTH,
        residual_width: int = RESIDUAL_WIDTH,
    ) -> Self:
        """Freshly initialized head."""
        query = (
            None
            if symmetric
            else encoders.QueryEncoderParams.init(d, length_bits, rng, hidden)
        )
        key = encoders.KeyEncoderParams.init(d, length_bits, rng)
        residual = ResidualParams.init(length_bits, rng, residual_width)
        return cls(query, key, residual, symmetric)

    @property
    def d(self) -> int:
        """Head dimension."""
        return self.key.d

    @property
    def length_bits(self) -> int:
        """Code length."""
        return self.key.length_bits

    def copy(self) -> HeadParams:
        """Deep copy."""
        return HeadParams(
            None if self.query is None else self.query.copy(),
            self.key.copy(),
            self.residual.copy(),
            self.symmetric,
        )

    def query_code(self, q: npt.ArrayLike) -> hashing.BitCode:
        """Binary code of one query."""
        if self.symmetric or self.query is None:
            return encoders.key_encode(q, self.key)
        return encoders.query_encode(q, self.query)

    def query_codes(self, q: npt.ArrayLike) -> npt.NDArray[np.uint64]:
        """Packed codes of a batch of queries."""
        if self.symmetric or self.query is None:
            return encoders.key_codes(q, self.key)
        return encoders.query_codes(q, self.query)

    def key_codes(self, k: npt.ArrayLike) -> npt.NDArray[np.uint64]:
        """Packed codes of a batch of keys."""
        return encoders.key_codes(k, self.key)


def assemble_scores(
    q: npt.ArrayLike,
    keys: npt.ArrayLike,
    hq: hashing.BitCode,
    bank: hashing.CodeBank,
    tiers: TierAssignment,
    phi: ResidualParams,
    d: int,
    length_bits: int,
) -> RealMatrix:
    """Score vector over all cached keys for one head.

    Prior and full keys get ``q . k / sqrt(d)``; hash tier keys get
    ``(l - 2 * hamming) / l + delta``; masked keys get -inf.

    Raises:
        DimensionError: inconsistent shapes.
    """
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    n = len(tiers)
    if (
        q.shape != (d,)
        or keys.shape != (n, d)
        or bank.count != n
        or hq.length_bits != length_bits
        or bank.length_bits != length_bits
    ):
        raise DimensionError('assemble_scores: inconsistent shapes')
    scores = np.full(n, -np.inf)
    exact = tiers.indices(Tier.PRIOR, Tier.FULL)
    scores[exact] = keys[exact] @ q / math.sqrt(d)
    hashed = tiers.indices(Tier.HASH_RESIDUAL)
    if hashed.size:
        words = bank.words[hashed]
        inner = hashing.inner_from_hamming(
            length_bits, hashing.hamming_rows(hq.words, words)
        )
        delta = residual_forward(
            hq.unpack(), hashing.unpack_signs(words, length_bits), phi
        ).out
        scores[hashed] = inner / length_bits + delta
    return scores


@dataclasses.dataclass
class AttentionResult:
    """Per head outputs of one mixed-precision decode step."""

    # (H, d) attention outputs
    output: RealMatrix
    # (H, N) attention probabilities, zero on masked keys
    probs: RealMatrix
    tiers: list[TierAssignment]
    # (H, N) calibrated distances
    d_final: RealMatrix


def _as_heads(
    q: npt.ArrayLike, keys: npt.ArrayLike, values: npt.ArrayLike
) -> tuple[RealMatrix, RealMatrix, RealMatrix]:
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if q.ndim == 1:
        q, keys, values = q[np.newaxis], keys[np.newaxis], values[np.newaxis]
    if (
        keys.ndim != 3  # noqa: PLR2004
        or values.shape[:2] != keys.shape[:2]
        or q.shape != (keys.shape[0], keys.shape[2])
    ):
        raise DimensionError(
            f'bad attention shapes q={q.shape} k={keys.shape} '
            f'v={values.shape}'
        )
    return q, keys, values


def mixed_precision_attention(
    q: npt.ArrayLike,
    keys: npt.ArrayLike,
    values: npt.ArrayLike,
    heads: Sequence[HeadParams],
    calib: calibration.CalibrationParams,
    policy: PriorPolicy,
    p1: float,
    p2: float,
    *,
    layer: int = 0,
    store: calibration.MomentumStore | None = None,
    banks: Sequence[hashing.CodeBank] | None = None,
) -> AttentionResult:
    """One decode step of tiered attention over every head of a layer.

    Args:
        q: ``(H, d)`` queries, or one ``(d,)`` query for a single head.
        keys: ``(H, N, d)`` cached keys, or ``(N, d)`` for a single head.
        values: Same shape as ``keys``.
        heads: Per head encoders and residual.
        calib: Calibration parameters of the layer.
        policy: Prior set policy.
        p1: Full tier percentile.
        p2: Hash tier percentile.
        layer: Layer index, used to look up momentum.
        store: Momentum store. The caller records the returned
            probabilities in it.
        banks: Precomputed key codes per head. Encoded on the fly
            when omitted.

    Raises:
        DegenerateInputError: the cache is empty.
        DimensionError: inconsistent shapes.
    """
    q, keys, values = _as_heads(q, keys, values)
    n_heads, n_keys, d = keys.shape
    if n_keys == 0:
        raise DegenerateInputError('attention over an empty cache')
    if len(heads) != n_heads:
        raise DimensionError(f'{len(heads)} head params for {n_heads} heads')
    if banks is None:
        banks = [
            hashing.CodeBank.from_words(head.length_bits, head.key_codes(k))
            for head, k in zip(heads, keys)
        ]
    elif any(bank.count != n_keys for bank in banks):
        raise DimensionError('code banks and key cache disagree')

    hq_codes = [head.query_code(qh) for head, qh in zip(heads, q)]
    raw = np.stack([
        hashing.batch_hamming(hq, bank) for hq, bank in zip(hq_codes, banks)
    ])
    prev = None if store is None else store.previous(layer, n_keys)
    distances = calibration.calibrated_distances(raw, calib, prev)
    prior = build_prior_set(n_keys, policy)
    candidates = np.setdiff1d(np.arange(n_keys), prior)

    output = np.zeros((n_heads, values.shape[2]))
    probs = np.zeros((n_heads, n_keys))
    d_final = np.zeros((n_heads, n_keys))
    tiers = []
    for h, head in enumerate(heads):
        d_final[h] = distances[h]
        if candidates.size:
            t1, t2 = compute_thresholds(distances[h, candidates], p1, p2)
        else:
            t1 = t2 = -np.inf
        tier = assign_tiers(d_final[h], t1, t2, prior)
        scores = assemble_scores(
            q[h],
            keys[h],
            hq_codes[h],
            banks[h],
            tier,
            head.residual,
            d,
            head.length_bits,
        )
        probs[h] = softmax(scores)
        output[h] = probs[h] @ values[h]
        tiers.append(tier)
    return AttentionResult(output, probs, tiers, d_final)


def causal_mask(n_q: int, n_k: int) -> npt.NDArray[np.bool_]:
    """True where query row i may see key j.

    Query rows are the last ``n_q`` positions of an ``n_k`` long sequence.
    """
    offset = n_k - n_q
    return np.arange(n_k)[np.newaxis, :] <= (
        np.arange(n_q)[:, np.newaxis] + offset
    )


def full_attention_logits(
    q: npt.ArrayLike, keys: npt.ArrayLike, d: int
) -> RealMatrix:
    """Causally masked ``Q . K^T / sqrt(d)``."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    if q.shape[1] != d or keys.shape[1] != d or q.shape[0] > keys.shape[0]:
        raise DimensionError(
            f'bad oracle shapes q={q.shape} k={keys.shape} d={d}'
        )
    logits = q @ keys.T / math.sqrt(d)
    return np.where(causal_mask(q.shape[0], keys.shape[0]), logits, -np.inf)


def full_attention_oracle(
    q: npt.ArrayLike, keys: npt.ArrayLike, values: npt.ArrayLike, d: int
) -> RealMatrix:
    """Dense causal attention ``softmax(Q . K^T / sqrt(d)) . V``.

    Raises:
        DimensionError: shapes disagree.
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    logits = full_attention_logits(q, keys, d)
    if values.shape[0] != logits.shape[1]:
        raise DimensionError('keys and values differ in length')
    return softmax(logits) @ values


class _Rows:
    """Growable row buffer."""

    def __init__(self, width: int) -> None:
        self._data = np.zeros((64, width))
        self._count = 0

    def append(self, row: RealMatrix) -> None:
        if self._count == len(self._data):
            grown = np.zeros((2 * len(self._data), self._data.shape[1]))
            grown[: self._count] = self._data
            self._data = grown
        self._data[self._count] = row
        self._count += 1

    @property
    def rows(self) -> RealMatrix:
        return self._data[: self._count]


class DecodeSession:
    """Incremental decoding state of one layer for one sequence.

    Holds the per head key/value cache and code banks. Keys are encoded
    once when appended. Nothing is ever evicted. Single writer.
    """

    def __init__(
        self,
        heads: Sequence[HeadParams],
        calib: calibration.CalibrationParams,
        policy: PriorPolicy,
        p1: float,
        p2: float,
        *,
        layer: int = 0,
        store: calibration.MomentumStore | None = None,
    ) -> None:
        """Start an empty session."""
        self.heads = list(heads)
        self.calib = calib
        self.policy = policy
        self.p1 = p1
        self.p2 = p2
        self.layer = layer
        self.store = calibration.MomentumStore() if store is None else store
        d = self.heads[0].d
        self.banks = [hashing.CodeBank(h.length_bits) for h in self.heads]
        self._keys = [_Rows(d) for _ in self.heads]
        self._values = [_Rows(d) for _ in self.heads]

    def __len__(self) -> int:
        return self.banks[0].count

    def append(self, k_heads: npt.ArrayLike, v_heads: npt.ArrayLike) -> None:
        """Cache one token's per head keys and values."""
        k_heads = np.atleast_2d(np.asarray(k_heads, dtype=np.float64))
        v_heads = np.atleast_2d(np.asarray(v_heads, dtype=np.float64))
        for h, head in enumerate(self.heads):
            self.banks[h].append(encoders.key_encode(k_heads[h], head.key))
            self._keys[h].append(k_heads[h])
            self._values[h].append(v_heads[h])

    def step(self, q_heads: npt.ArrayLike) -> AttentionResult:
        """Attend over the whole cache and record momentum."""
        q_heads = np.atleast_2d(np.asarray(q_heads, dtype=np.float64))
        result = mixed_precision_attention(
            q_heads,
            np.stack([rows.rows for rows in self._keys]),
            np.stack([rows.rows for rows in self._values]),
            self.heads,
            self.calib,
            self.policy,
            self.p1,
            self.p2,
            layer=self.layer,
            store=self.store,
            banks=self.banks,
        )
        calibration.update_momentum(self.store, self.layer, result.probs)
        return result
