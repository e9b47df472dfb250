"""Attention traces and the synthetic trace generator.

A trace holds, for one (layer, head), the decode queries ``Q``, the whole
key and value cache ``K``, ``V`` and the causally masked teacher logits
``Q . K^T / sqrt(d)``. Query row ``i`` sits at sequence position
``n_k - n_q + i``.

DKVT file layout, little-endian::

    magic    4s  b'DKVT'
    version  u16
    layer    u32
    head     u32
    d        u32
    n_q      u32
    n_k      u32

then Q, K, V and the teacher logits as row-major 8-byte reals.

Synthetic traces
----------------

Tokens live in a latent space of clustered Gaussians. A query is close to
the keys of its own cluster. Per layer the latent space is rotated by
``expm(layer_drift * layer * S)`` for a fixed skew-symmetric ``S``. Per
head, keys are mapped by an anisotropic matrix ``A`` plus a large constant
offset, and queries by ``A^-T`` so that ``q . k`` equals the latent inner
product up to a per-query constant. The first tokens of every sequence
get an extra component along a direction every query shares, which makes
them attention sinks.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import logging
import math
import pathlib
import struct
from typing import TYPE_CHECKING, BinaryIO

import numpy as np
from scipy import linalg

from . import options
from .attention import full_attention_logits
from .numerics import DomainError

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence
    from os import PathLike

    from typing_extensions import Self

    from .numerics import RealMatrix

MAGIC = b'DKVT'
VERSION = 1

# Tolerance of the teacher logits self-consistency check
CONSISTENCY_TOLERANCE = 1e-5

_HEADER = struct.Struct('<4sHIIIII')
_FLOAT = np.dtype('<f8')

logger = logging.getLogger(__name__)


class TraceFormatError(Exception):
    """Malformed trace file or inconsistent trace."""


@dataclasses.dataclass(eq=False)
class AttentionTrace:
    """Teacher attention of one head of one layer."""

    layer: int
    head: int
    # (n_q, d) decode queries
    q: RealMatrix
    # (n_k, d) keys
    k: RealMatrix
    # (n_k, d) values
    v: RealMatrix
    # (n_q, n_k) causally masked Q . K^T / sqrt(d)
    teacher_logits: RealMatrix

    @property
    def d(self) -> int:
        """Head dimension."""
        return int(self.q.shape[1])

    @property
    def n_q(self) -> int:
        """Number of query rows."""
        return int(self.q.shape[0])

    @property
    def n_k(self) -> int:
        """Number of keys."""
        return int(self.k.shape[0])

    @classmethod
    def from_qkv(
        cls, layer: int, head: int, q: RealMatrix, k: RealMatrix, v: RealMatrix
    ) -> Self:
        """Trace with the teacher logits computed from ``q`` and ``k``."""
        logits = full_attention_logits(q, k, q.shape[1])
        return cls(layer, head, q, k, v, logits)

    def check(self, tolerance: float = CONSISTENCY_TOLERANCE) -> None:
        """Verify shapes and that the teacher logits match ``Q . K^T``.

        Raises:
            TraceFormatError: the trace is inconsistent.
        """
        if (
            self.k.shape != (self.n_k, self.d)
            or self.v.shape != (self.n_k, self.d)
            or self.teacher_logits.shape != (self.n_q, self.n_k)
            or self.n_q > self.n_k
        ):
            raise TraceFormatError(
                f'inconsistent trace shapes for layer {self.layer} '
                f'head {self.head}'
            )
        expected = full_attention_logits(self.q, self.k, self.d)
        finite = np.isfinite(expected)
        if np.any(finite != np.isfinite(self.teacher_logits)):
            raise TraceFormatError('teacher logits are not causally masked')
        error = np.abs(expected[finite] - self.teacher_logits[finite])
        if error.size and error.max() > tolerance:
            raise TraceFormatError(
                f'teacher logits differ from Q.K^T by {error.max():.3g}'
            )

    def write(self, stream: BinaryIO) -> None:
        """Serialize in DKVT format."""
        stream.write(
            _HEADER.pack(
                MAGIC,
                VERSION,
                self.layer,
                self.head,
                self.d,
                self.n_q,
                self.n_k,
            )
        )
        for matrix in (self.q, self.k, self.v, self.teacher_logits):
            stream.write(np.ascontiguousarray(matrix, dtype=_FLOAT).tobytes())

    @classmethod
    def read(cls, stream: BinaryIO, *, check: bool = True) -> Self:
        """Deserialize from DKVT format.

        Raises:
            TraceFormatError: bad header, truncated data or a failed
                self-consistency check.
        """
        raw = stream.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise TraceFormatError('truncated trace header')
        magic, version, layer, head, d, n_q, n_k = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise TraceFormatError(f'bad trace magic {magic!r}')
        if version != VERSION:
            raise TraceFormatError(f'unsupported trace version {version}')
        matrices = [
            _read_matrix(stream, shape)
            for shape in ((n_q, d), (n_k, d), (n_k, d), (n_q, n_k))
        ]
        if stream.read(1):
            raise TraceFormatError('trailing data after trace')
        trace = cls(layer, head, *matrices)
        if check:
            trace.check()
        return trace

    def save(self, path: pathlib.Path) -> None:
        """Write the trace to ``path``."""
        with path.open('wb') as stream:
            self.write(stream)

    @classmethod
    def load(cls, path: pathlib.Path) -> Self:
        """Read and check a trace file."""
        with path.open('rb') as stream:
            return cls.read(stream)


def _read_matrix(stream: BinaryIO, shape: tuple[int, int]) -> RealMatrix:
    count = shape[0] * shape[1]
    data = stream.read(count * _FLOAT.itemsize)
    if len(data) != count * _FLOAT.itemsize:
        raise TraceFormatError('truncated trace payload')
    return np.frombuffer(data, dtype=_FLOAT).reshape(shape).astype(np.float64)


def trace_name(layer: int, head: int) -> str:
    """File name of a trace."""
    return f'layer{layer:03d}_head{head:02d}.dkvt'


def save_traces(
    directory: str | PathLike[str], traces: Iterable[AttentionTrace]
) -> list[pathlib.Path]:
    """Write each trace to ``directory`` under its canonical name."""
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for trace in traces:
        path = directory / trace_name(trace.layer, trace.head)
        trace.save(path)
        paths.append(path)
    return paths


def load_layer_traces(
    directory: str | PathLike[str], layer: int
) -> list[AttentionTrace]:
    """Every head trace of ``layer``, ordered by head.

    Raises:
        FileNotFoundError: the layer has no traces.
        TraceFormatError: head indices are not contiguous from 0.
    """
    directory = pathlib.Path(directory)
    paths = sorted(directory.glob(f'layer{layer:03d}_head*.dkvt'))
    if not paths:
        raise FileNotFoundError(f'no traces for layer {layer} in {directory}')
    traces = [AttentionTrace.load(path) for path in paths]
    if [t.head for t in traces] != list(range(len(traces))):
        raise TraceFormatError(f'missing head traces for layer {layer}')
    return traces


def trace_layers(directory: str | PathLike[str]) -> list[int]:
    """Layer indices that have traces in ``directory``."""
    layers = {
        int(path.name[5:8])
        for path in pathlib.Path(directory).glob('layer*_head*.dkvt')
    }
    return sorted(layers)


@dataclasses.dataclass
class SyntheticConfig(options.Options):
    """Synthetic trace generator settings."""

    # Seed of the layer and head structure
    seed: int = 0
    # Seed of the sampled tokens; vary it for held-out traces
    sample_seed: int = 0
    n_layers: int = 4
    n_heads: int = 2
    # Head dimension
    d: int = 32
    # Keys per trace
    seq_len: int = 512
    # Decode queries per trace, the last positions of the sequence
    n_queries: int = 64
    n_clusters: int = 8
    # Per coordinate standard deviation of tokens around their center
    cluster_spread: float = 0.3
    # Norm of the cluster centers
    cluster_radius: float = 3.0
    # Extra logit given to the sink tokens
    sink_boost: float = 3.0
    # Number of leading sink tokens
    n_sink_tokens: int = 4
    # Rotation per layer of the latent space, in radians
    layer_drift: float = 0.15
    # Log standard deviation of the per head key scales
    anisotropy: float = 0.8
    # Norm of the constant key offset relative to the cluster radius
    key_offset: float = 4.0

    def __post_init__(self) -> None:
        """Validate ranges."""
        if min(self.n_layers, self.n_heads, self.d, self.n_clusters) < 1:
            raise DomainError('layer, head, dimension and cluster counts >= 1')
        if not 1 <= self.n_queries <= self.seq_len:
            raise DomainError('need 1 <= n_queries <= seq_len')
        if self.cluster_spread < 0 or self.layer_drift < 0:
            raise DomainError('spread and drift must be nonnegative')
        if self.n_sink_tokens < 0:
            raise DomainError('n_sink_tokens must be nonnegative')


@dataclasses.dataclass
class _HeadMap:
    # (d, d) key map A^T in row form
    key_map: RealMatrix
    # (d, d) query map A^-1 in row form
    query_map: RealMatrix
    offset: RealMatrix


@dataclasses.dataclass
class _Structure:
    centers: RealMatrix
    sink_direction: RealMatrix
    skew: RealMatrix
    heads: list[_HeadMap]


def _unit(rng: np.random.Generator, d: int) -> RealMatrix:
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def _orthogonal(rng: np.random.Generator, d: int) -> RealMatrix:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def _structure(config: SyntheticConfig) -> _Structure:
    rng = np.random.default_rng([config.seed, 0])
    d = config.d
    centers = rng.normal(size=(config.n_clusters, d))
    centers *= config.cluster_radius / np.linalg.norm(
        centers, axis=1, keepdims=True
    )
    sink_direction = _unit(rng, d)
    g = rng.normal(size=(d, d))
    skew = (g - g.T) / 2.0
    norm = np.linalg.norm(skew, 2)
    if norm > 0:
        skew /= norm
    heads = []
    for _ in range(config.n_heads):
        u = _orthogonal(rng, d)
        v = _orthogonal(rng, d)
        scales = np.exp(config.anisotropy * rng.normal(size=d))
        # A = U diag(s) V^T, rows are mapped by A^T and A^-1
        key_map = (v * scales) @ u.T
        query_map = (v / scales) @ u.T
        offset = _unit(rng, d) * config.key_offset * config.cluster_radius
        heads.append(_HeadMap(key_map, query_map, offset))
    return _Structure(centers, sink_direction, skew, heads)


def layer_rotation(config: SyntheticConfig, layer: int) -> RealMatrix:
    """Latent rotation of ``layer``, the identity when drift is zero."""
    skew = _structure(config).skew
    return linalg.expm(config.layer_drift * layer * skew)


def _generate_layer(
    config: SyntheticConfig, structure: _Structure, layer: int
) -> list[AttentionTrace]:
    rng = np.random.default_rng([config.seed, 1, config.sample_seed, layer])
    d, n_k, n_q = config.d, config.seq_len, config.n_queries
    rotation = linalg.expm(config.layer_drift * layer * structure.skew)
    clusters = rng.integers(config.n_clusters, size=n_k)
    x_k = structure.centers[clusters] + config.cluster_spread * rng.normal(
        size=(n_k, d)
    )
    n_sink = min(config.n_sink_tokens, n_k)
    x_k[:n_sink] += config.sink_boost * math.sqrt(d) * structure.sink_direction
    x_q = (
        structure.centers[clusters[n_k - n_q :]]
        + config.cluster_spread * rng.normal(size=(n_q, d))
        + structure.sink_direction
    )
    head_spread = 0.5 * config.cluster_spread
    traces = []
    for head, mapping in enumerate(structure.heads):
        keys = x_k + head_spread * rng.normal(size=(n_k, d))
        queries = x_q + head_spread * rng.normal(size=(n_q, d))
        k = keys @ rotation.T @ mapping.key_map + mapping.offset
        q = queries @ rotation.T @ mapping.query_map
        v = rng.normal(size=(n_k, d))
        traces.append(AttentionTrace.from_qkv(layer, head, q, k, v))
    return traces


def generate_traces(
    config: SyntheticConfig, workers: int | None = None
) -> list[AttentionTrace]:
    """Synthetic traces for every (layer, head), ordered by layer then head.

    Layers are generated concurrently. Each layer draws from its own
    random stream so the result does not depend on ``workers``.
    """
    structure = _structure(config)
    workers = options.max_workers() if workers is None else workers
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        per_layer = pool.map(
            lambda layer: _generate_layer(config, structure, layer),
            range(config.n_layers),
        )
        traces = [trace for layer in per_layer for trace in layer]
    logger.debug(
        'generated %d traces (seed %d, sample seed %d)',
        len(traces),
        config.seed,
        config.sample_seed,
    )
    return traces


def by_layer(
    traces: Iterable[AttentionTrace],
) -> dict[int, list[AttentionTrace]]:
    """Group traces by layer, each group ordered by head."""
    layers: dict[int, list[AttentionTrace]] = {}
    for trace in traces:
        layers.setdefault(trace.layer, []).append(trace)
    for group in layers.values():
        group.sort(key=lambda t: t.head)
    return layers


@dataclasses.dataclass
class StackCouplings:
    """Linear couplings that carry attention errors down a layer stack.

    The attention output error of a layer is added, scaled by that
    layer's gain, to a residual stream ``e``. Every later layer perturbs
    its queries by ``e . C_q`` and the keys at the query positions by
    ``e . C_k``.
    """

    # [layer][head] (d, d) query couplings
    c_q: list[list[RealMatrix]]
    # [layer][head] (d, d) key couplings
    c_k: list[list[RealMatrix]]
    # [layer] output gains
    gains: list[float]

    @classmethod
    def derive(
        cls,
        config: SyntheticConfig,
        coupling: float = 0.5,
        output_gain: float = 1.0,
        early_boost: float = 4.0,
    ) -> Self:
        """Couplings determined by the generator seed.

        Gains decay with depth as ``output_gain * (1 + early_boost /
        (1 + layer))``.
        """
        scale = coupling / math.sqrt(config.d)
        c_q, c_k = [], []
        for layer in range(config.n_layers):
            rng = np.random.default_rng([config.seed, 2, layer])
            c_q.append([
                rng.normal(0.0, scale, size=(config.d, config.d))
                for _ in range(config.n_heads)
            ])
            c_k.append([
                rng.normal(0.0, scale, size=(config.d, config.d))
                for _ in range(config.n_heads)
            ])
        gains = [
            output_gain * (1.0 + early_boost / (1.0 + layer))
            for layer in range(config.n_layers)
        ]
        return cls(c_q, c_k, gains)


def key_covariance(traces: Sequence[AttentionTrace]) -> RealMatrix:
    """Covariance of the keys pooled over the given traces."""
    return np.cov(np.concatenate([t.k for t in traces]), rowvar=False)
