"""Distance calibration across heads and layers.

Raw per-head Hamming distances are discounted by two corrections:

* a spatial term counting how many heads consider a key close
  (consensus vote), scaled by ``beta_spatial``, and
* a temporal term from the attention the previous layer paid to the
  key, scaled by ``gamma_temporal``.

``D_final = D_raw + delta_spatial + delta_temporal``. Both corrections are
nonpositive when their scale parameters are nonnegative.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
from typing import TYPE_CHECKING

import numpy as np

from . import options
from .numerics import DimensionError, DomainError, nearest_rank, sigmoid

if TYPE_CHECKING:
    import numpy.typing as npt

    from .numerics import RealMatrix

# Row sum tolerance for attention probabilities fed to the store
_ROW_SUM_TOLERANCE = 1e-3

logger = logging.getLogger(__name__)


class ContractViolationError(Exception):
    """Attention probabilities do not form valid distributions."""


class Normalizer(str, enum.Enum):
    """Squashing function applied to previous-layer attention."""

    SIGMOID = 'sigmoid'


class VoteThresholdMode(str, enum.Enum):
    """How the vote threshold is chosen."""

    # t_vote is a fixed distance
    ABSOLUTE = 'absolute'
    # t_vote is a percentile of the pooled per-head raw distances
    PERCENTILE = 'percentile'


@dataclasses.dataclass
class CalibrationParams(options.Options):
    """Per-layer calibration state."""

    # Strength of the cross-head consensus discount (learned, >= 0)
    beta_spatial: float = 1.0
    # Strength of the cross-layer momentum discount (learned, >= 0)
    gamma_temporal: float = 1.0
    # Vote threshold: a distance or a percentile depending on t_vote_mode
    t_vote: float = 25.0
    t_vote_mode: VoteThresholdMode = VoteThresholdMode.PERCENTILE
    # Number of heads voting (H)
    num_heads: int = 1
    normalizer: Normalizer = Normalizer.SIGMOID

    def __post_init__(self) -> None:
        """Validate and coerce enum fields."""
        self.t_vote_mode = VoteThresholdMode(self.t_vote_mode)
        self.normalizer = Normalizer(self.normalizer)
        if self.num_heads < 1:
            raise DomainError('num_heads must be at least 1')
        if self.beta_spatial < 0 or self.gamma_temporal < 0:
            raise DomainError('calibration strengths must be nonnegative')

    def vote_threshold(self, raw_per_head: npt.ArrayLike) -> float:
        """The vote threshold for one decode step."""
        if self.t_vote_mode == VoteThresholdMode.ABSOLUTE:
            return float(self.t_vote)
        return nearest_rank(raw_per_head, self.t_vote)

    def project(self) -> None:
        """Clamp the learned strengths to be nonnegative."""
        self.beta_spatial = max(0.0, self.beta_spatial)
        self.gamma_temporal = max(0.0, self.gamma_temporal)


def vote_count(
    raw_per_head: npt.ArrayLike, t_vote: float
) -> npt.NDArray[np.int64]:
    """Per key, the number of heads whose raw distance is below t_vote."""
    raw = np.atleast_2d(np.asarray(raw_per_head, dtype=np.float64))
    return (raw < t_vote).sum(axis=0).astype(np.int64)


def spatial_correction(
    votes: npt.ArrayLike, params: CalibrationParams
) -> RealMatrix:
    """``-beta_spatial * votes / H``."""
    votes = np.asarray(votes, dtype=np.float64)
    return -params.beta_spatial * votes / params.num_heads


def temporal_correction(
    prev_attention: npt.ArrayLike, params: CalibrationParams
) -> RealMatrix:
    """``-gamma_temporal * sigmoid(A_prev)``."""
    return -params.gamma_temporal * sigmoid(prev_attention)


def calibrate(
    d_raw: npt.ArrayLike,
    delta_spatial: npt.ArrayLike,
    delta_temporal: npt.ArrayLike,
) -> RealMatrix:
    """Calibrated distance ``D_raw + delta_spatial + delta_temporal``.

    Raises:
        DimensionError: the three vectors differ in length.
    """
    d_raw = np.asarray(d_raw, dtype=np.float64)
    delta_spatial = np.asarray(delta_spatial, dtype=np.float64)
    delta_temporal = np.asarray(delta_temporal, dtype=np.float64)
    if not d_raw.shape == delta_spatial.shape == delta_temporal.shape:
        raise DimensionError(
            f'calibrate length mismatch: {d_raw.shape}, '
            f'{delta_spatial.shape}, {delta_temporal.shape}'
        )
    return d_raw + delta_spatial + delta_temporal


class MomentumStore:
    """Head-averaged attention of the latest decode step, per layer.

    One decode loop owns a store. Keys appended after a layer's entry was
    recorded read as zero attention.
    """

    _attention: dict[int, RealMatrix]

    def __init__(self) -> None:
        """Create an empty store."""
        self._attention = {}

    def __contains__(self, layer: int) -> bool:
        return layer in self._attention

    def __getitem__(self, layer: int) -> RealMatrix:
        return self._attention[layer]

    def set(self, layer: int, attention: npt.ArrayLike) -> None:
        """Record a per-key attention vector for ``layer``."""
        attention = np.asarray(attention, dtype=np.float64)
        if np.any(attention < 0) or np.any(attention > 1):
            raise ContractViolationError('attention values outside [0, 1]')
        self._attention[layer] = attention

    def previous(self, layer: int, n_keys: int) -> RealMatrix | None:
        """Attention from ``layer - 1`` padded or cut to ``n_keys``.

        Returns None for layer 0 or when the previous layer has no entry.
        """
        if layer <= 0 or (layer - 1) not in self._attention:
            return None
        prev = self._attention[layer - 1]
        out = np.zeros(n_keys)
        count = min(n_keys, prev.size)
        out[:count] = prev[:count]
        return out


def update_momentum(
    store: MomentumStore, layer: int, attention_probs: npt.ArrayLike
) -> MomentumStore:
    """Replace ``store[layer]`` with the head mean of ``attention_probs``.

    Raises:
        ContractViolationError: a row does not sum to 1 within 1e-3 or has
            entries outside [0, 1].
    """
    probs = np.atleast_2d(np.asarray(attention_probs, dtype=np.float64))
    row_sums = probs.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > _ROW_SUM_TOLERANCE):
        raise ContractViolationError(
            f'attention rows must sum to 1, got {row_sums}'
        )
    store.set(layer, probs.mean(axis=0))
    return store


@dataclasses.dataclass
class Corrections:
    """Calibration terms of one decode step, shared by all heads."""

    votes: npt.NDArray[np.int64]
    delta_spatial: RealMatrix
    delta_temporal: RealMatrix
    # sigmoid(A_prev), or None when there is no previous layer
    momentum: RealMatrix | None
    t_vote: float


def step_corrections(
    raw_per_head: npt.ArrayLike,
    params: CalibrationParams,
    prev_attention: npt.ArrayLike | None = None,
) -> Corrections:
    """Votes and both corrections for an ``(H, N)`` raw distance matrix."""
    raw = np.atleast_2d(np.asarray(raw_per_head, dtype=np.float64))
    n_keys = raw.shape[1]
    t_vote = params.vote_threshold(raw) if raw.size else 0.0
    votes = vote_count(raw, t_vote)
    delta_spatial = spatial_correction(votes, params)
    if prev_attention is None:
        momentum = None
        delta_temporal = np.zeros(n_keys)
    else:
        prev_attention = np.asarray(prev_attention, dtype=np.float64)
        if prev_attention.shape != (n_keys,):
            raise DimensionError('previous attention length mismatch')
        momentum = sigmoid(prev_attention)
        delta_temporal = temporal_correction(prev_attention, params)
    return Corrections(votes, delta_spatial, delta_temporal, momentum, t_vote)


def calibrated_distances(
    raw_per_head: npt.ArrayLike,
    params: CalibrationParams,
    prev_attention: npt.ArrayLike | None = None,
) -> npt.NDArray[np.generic]:
    """``D_final`` of every head for an ``(H, N)`` raw distance matrix.

    When neither correction can move a distance (zero spatial strength and
    no active temporal term) the raw matrix comes back unchanged, in its
    integer type, and no vote is counted.
    """
    raw = np.atleast_2d(np.asarray(raw_per_head))
    temporal = prev_attention is not None and params.gamma_temporal > 0
    if params.beta_spatial == 0 and not temporal:
        return raw
    corr = step_corrections(raw, params, prev_attention)
    return np.stack([
        calibrate(row, corr.delta_spatial, corr.delta_temporal) for row in raw
    ])
