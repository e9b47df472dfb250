"""Binary parameter checkpoints (DKVP).

One file per (layer, head). Layout, all little-endian::

    magic       4s  b'DKVP'
    version     u16
    d           u32
    l           u32
    layer       u32
    head        u32
    hidden      u32   query MLP width, 0 for a symmetric head
    width       u32   residual MLP width
    num_heads   u32
    vote_mode   u8    0 absolute, 1 percentile

followed by the matrices as row-major 8-byte reals: W1, ln_gain, ln_bias,
W2, W3 (asymmetric heads only), Wk, then the residual W1, b1, W2, b2 and
finally the three calibration reals beta_spatial, gamma_temporal, t_vote.
Shapes are implied by the header.
"""

from __future__ import annotations

import dataclasses
import logging
import pathlib
import struct
from typing import TYPE_CHECKING, BinaryIO

import numpy as np

from . import attention, calibration, encoders

if TYPE_CHECKING:
    from collections.abc import Sequence
    from os import PathLike

    from typing_extensions import Self

    from .numerics import RealMatrix

MAGIC = b'DKVP'
VERSION = 1

_HEADER = struct.Struct('<4sHIIIIIIIB')
_FLOAT = np.dtype('<f8')
_VOTE_MODES = (
    calibration.VoteThresholdMode.ABSOLUTE,
    calibration.VoteThresholdMode.PERCENTILE,
)

logger = logging.getLogger(__name__)


class CheckpointError(Exception):
    """Malformed or truncated checkpoint."""


@dataclasses.dataclass
class LayerParams:
    """Trained parameters of every head of one layer."""

    layer: int
    heads: list[attention.HeadParams]
    calib: calibration.CalibrationParams

    @property
    def num_heads(self) -> int:
        """Number of heads."""
        return len(self.heads)

    def copy(self) -> Self:
        """Deep copy."""
        return dataclasses.replace(
            self,
            heads=[head.copy() for head in self.heads],
            calib=dataclasses.replace(self.calib),
        )


def checkpoint_name(layer: int, head: int) -> str:
    """File name of a head checkpoint."""
    return f'layer{layer:03d}_head{head:02d}.dkvp'


def _write_matrix(stream: BinaryIO, matrix: RealMatrix) -> None:
    stream.write(np.ascontiguousarray(matrix, dtype=_FLOAT).tobytes())


def _read_matrix(stream: BinaryIO, shape: tuple[int, ...]) -> RealMatrix:
    count = int(np.prod(shape))
    data = stream.read(count * _FLOAT.itemsize)
    if len(data) != count * _FLOAT.itemsize:
        raise CheckpointError('truncated checkpoint')
    return np.frombuffer(data, dtype=_FLOAT).reshape(shape).astype(np.float64)


def write_head(
    stream: BinaryIO,
    head: attention.HeadParams,
    calib: calibration.CalibrationParams,
    layer: int,
    index: int,
) -> None:
    """Serialize one head and its layer's calibration."""
    query = None if head.symmetric else head.query
    hidden = 0 if query is None else query.w2.shape[0]
    stream.write(
        _HEADER.pack(
            MAGIC,
            VERSION,
            head.d,
            head.length_bits,
            layer,
            index,
            hidden,
            head.residual.w1.shape[1],
            calib.num_heads,
            _VOTE_MODES.index(calib.t_vote_mode),
        )
    )
    matrices: list[RealMatrix] = [] if query is None else query.matrices()
    matrices += head.key.matrices() + head.residual.matrices()
    matrices.append(
        np.array([calib.beta_spatial, calib.gamma_temporal, calib.t_vote])
    )
    for matrix in matrices:
        _write_matrix(stream, matrix)


def read_head(
    stream: BinaryIO,
) -> tuple[attention.HeadParams, calibration.CalibrationParams, int, int]:
    """Inverse of :func:`write_head`.

    Returns:
        A tuple (head, calib, layer, head_index).

    Raises:
        CheckpointError: bad magic, version or length.
    """
    raw = stream.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise CheckpointError('truncated checkpoint header')
    fields = _HEADER.unpack(raw)
    magic, version, d, nbits, layer, index = fields[:6]
    hidden, width, num_heads, mode = fields[6:]
    if magic != MAGIC:
        raise CheckpointError(f'bad checkpoint magic {magic!r}')
    if version != VERSION:
        raise CheckpointError(f'unsupported checkpoint version {version}')
    if mode >= len(_VOTE_MODES):
        raise CheckpointError(f'bad vote threshold mode {mode}')
    query = None
    if hidden:
        query = encoders.QueryEncoderParams(
            _read_matrix(stream, (d, hidden)),
            _read_matrix(stream, (hidden,)),
            _read_matrix(stream, (hidden,)),
            _read_matrix(stream, (hidden, hidden)),
            _read_matrix(stream, (hidden, nbits)),
        )
    key = encoders.KeyEncoderParams(_read_matrix(stream, (d, nbits)))
    residual = attention.ResidualParams(
        _read_matrix(stream, (2 * nbits, width)),
        _read_matrix(stream, (width,)),
        _read_matrix(stream, (width,)),
        _read_matrix(stream, (1,)),
    )
    beta_spatial, gamma_temporal, t_vote = _read_matrix(stream, (3,))
    if stream.read(1):
        raise CheckpointError('trailing data after checkpoint')
    calib = calibration.CalibrationParams(
        beta_spatial=float(beta_spatial),
        gamma_temporal=float(gamma_temporal),
        t_vote=float(t_vote),
        t_vote_mode=_VOTE_MODES[mode],
        num_heads=num_heads,
    )
    head = attention.HeadParams(query, key, residual, symmetric=not hidden)
    return head, calib, layer, index


def save_layer(
    directory: str | PathLike[str], params: LayerParams
) -> list[pathlib.Path]:
    """Write one checkpoint per head into ``directory``."""
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, head in enumerate(params.heads):
        path = directory / checkpoint_name(params.layer, index)
        with path.open('wb') as stream:
            write_head(stream, head, params.calib, params.layer, index)
        paths.append(path)
    logger.debug('wrote %d checkpoints for layer %d', len(paths), params.layer)
    return paths


def load_layer(
    directory: str | PathLike[str], layer: int, num_heads: int | None = None
) -> LayerParams:
    """Read every head checkpoint of ``layer`` from ``directory``.

    Raises:
        FileNotFoundError: a head checkpoint is missing.
        CheckpointError: checkpoints are malformed or disagree.
    """
    directory = pathlib.Path(directory)
    if num_heads is None:
        num_heads = len(list(directory.glob(f'layer{layer:03d}_head*.dkvp')))
        if num_heads == 0:
            raise FileNotFoundError(
                f'no checkpoints for layer {layer} in {directory}'
            )
    heads = []
    calib = None
    for index in range(num_heads):
        path = directory / checkpoint_name(layer, index)
        with path.open('rb') as stream:
            head, calib, file_layer, file_index = read_head(stream)
        if (file_layer, file_index) != (layer, index):
            raise CheckpointError(f'{path.name} holds layer {file_layer}')
        heads.append(head)
    assert calib is not None
    if calib.num_heads != num_heads:
        raise CheckpointError(
            f'layer {layer} was trained with {calib.num_heads} heads'
        )
    return LayerParams(layer, heads, calib)


def load_stack(
    directory: str | PathLike[str], layers: Sequence[int]
) -> dict[int, LayerParams]:
    """Checkpoints of several layers keyed by layer index."""
    return {layer: load_layer(directory, layer) for layer in layers}
