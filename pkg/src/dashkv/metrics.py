"""Retrieval and distribution metrics, and the CSV result files."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import pathlib
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy import special

from . import hashing
from .numerics import DimensionError, DomainError

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence
    from os import PathLike

    import numpy.typing as npt

# Probability added to every entry before computing KL
KL_EPSILON = 1e-10
# Half precision reference key size
DENSE_BYTES_PER_VALUE = 2
# Top-k used once a cache reaches this many keys
_FULL_SCALE_KEYS = 10_000
_FULL_SCALE_K = 100
_MIN_K = 10

METRICS_FIELDS = (
    'variant',
    'layer',
    'seq_len',
    'k',
    'recall_at_k',
    'kl_to_full',
    'mean_latency_per_token_s',
    'code_bytes_per_key',
    'dense_bytes_per_key',
)
LATENCY_FIELDS = ('seq_len', 'method', 'median_s', 'spread_s', 'trials')
SENSITIVITY_FIELDS = ('replaced_layer', 'distortion')
CODE_LENGTH_FIELDS = (
    'code_bits',
    'recall_at_k',
    'kl_to_full',
    'mean_latency_per_token_s',
    'code_bytes_per_key',
    'compression_ratio',
)

logger = logging.getLogger(__name__)


def recall_at_k(
    approx_ranking: npt.ArrayLike, true_ranking: npt.ArrayLike, k: int
) -> float:
    """Fraction of the true top ``k`` found in the approximate top ``k``.

    Raises:
        DomainError: k is zero or larger than either ranking.
    """
    approx = np.asarray(approx_ranking)
    true = np.asarray(true_ranking)
    if k <= 0:
        raise DomainError('k must be positive')
    if k > min(approx.size, true.size):
        raise DomainError(f'k={k} exceeds the ranking length')
    hits = np.intersect1d(approx[:k], true[:k], assume_unique=True)
    return hits.size / k


def kl_divergence_metric(
    p_approx: npt.ArrayLike, p_full: npt.ArrayLike
) -> float:
    """``KL(p_approx || p_full)`` after epsilon smoothing.

    Both vectors get :data:`KL_EPSILON` added and are renormalized, so
    zeros on either side are finite.

    Raises:
        DimensionError: lengths differ.
    """
    p = np.asarray(p_approx, dtype=np.float64)
    q = np.asarray(p_full, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(
            f'distribution shapes differ: {p.shape}, {q.shape}'
        )
    p = p + KL_EPSILON
    q = q + KL_EPSILON
    p /= p.sum()
    q /= q.sum()
    return max(0.0, float(special.rel_entr(p, q).sum()))


def desk_k(n_keys: int) -> int:
    """Top-k used for recall on a cache of ``n_keys`` keys.

    ``max(10, 1% of the keys)`` for small caches, 100 otherwise, and never
    more than the cache holds.
    """
    k = (
        _FULL_SCALE_K
        if n_keys >= _FULL_SCALE_KEYS
        else max(_MIN_K, n_keys // 100)
    )
    return max(1, min(k, n_keys))


def memory_footprint(length_bits: int, d: int) -> tuple[int, int, float]:
    """Bytes per key of packed codes against a half precision key.

    Returns:
        A tuple (code_bytes_per_key, dense_bytes_per_key, ratio).
    """
    code_bytes = hashing.word_count(length_bits) * hashing.WORD_BITS // 8
    dense_bytes = DENSE_BYTES_PER_VALUE * d
    return code_bytes, dense_bytes, dense_bytes / code_bytes


def median_spread(samples: Sequence[float]) -> tuple[float, float]:
    """Median and interquartile range of timing samples."""
    values = np.asarray(samples, dtype=np.float64)
    q25, median, q75 = np.percentile(values, [25, 50, 75])
    return float(median), float(q75 - q25)


@dataclasses.dataclass
class MetricsRecord:
    """Evaluation result of one variant on one layer."""

    variant: str
    layer: int
    seq_len: int
    k: int
    recall_at_k: float
    kl_to_full: float
    mean_latency_per_token_s: float
    code_bytes_per_key: int
    dense_bytes_per_key: int

    def __post_init__(self) -> None:
        """Check metric ranges."""
        if not 0.0 <= self.recall_at_k <= 1.0:
            raise DomainError(f'recall out of range: {self.recall_at_k}')
        if self.kl_to_full < 0 or math.isnan(self.kl_to_full):
            raise DomainError(f'bad KL value: {self.kl_to_full}')


def write_rows(
    path: str | PathLike[str],
    fields: Sequence[str],
    rows: Iterable[Any],
) -> None:
    """Write dataclass instances or dicts as CSV with a fixed header."""
    with pathlib.Path(path).open('w', newline='', encoding='utf-8') as stream:
        writer = csv.DictWriter(stream, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(
                dataclasses.asdict(row)
                if dataclasses.is_dataclass(row)
                else row
            )


def read_rows(
    path: str | PathLike[str], fields: Sequence[str] | None = None
) -> list[dict[str, str]]:
    """Read a CSV result file.

    Raises:
        DimensionError: the header differs from ``fields``.
    """
    with pathlib.Path(path).open(newline='', encoding='utf-8') as stream:
        reader = csv.DictReader(stream)
        if fields is not None and tuple(reader.fieldnames or ()) != tuple(
            fields
        ):
            raise DimensionError(
                f'{path}: expected columns {fields}, got {reader.fieldnames}'
            )
        return list(reader)
