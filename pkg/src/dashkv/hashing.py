"""Packed binary hash codes and Hamming distance kernels.

A code of ``l`` bits is stored in ``ceil(l / 64)`` unsigned 64 bit words.
Code position ``i`` lives in word ``i // 64`` at bit ``i % 64`` (least
significant bit first). A set bit encodes +1 and a clear bit encodes -1.
Bits past ``l`` in the final word are always zero.

Since both codes are over {-1, +1}, the inner product and the Hamming
distance are tied by ``<a, b> = l - 2 * hamming(a, b)``, so ranking keys
by ascending Hamming distance is the same as ranking them by descending
inner product.

====
"""

from __future__ import annotations

import logging
import struct
from typing import TYPE_CHECKING, BinaryIO

import numpy as np
import numpy.typing as npt

from .numerics import DimensionError, DomainError

if TYPE_CHECKING:
    import pathlib

    from typing_extensions import Self

WORD_BITS = 64

_WORD_DTYPE = np.dtype('<u8')
_SHIFTS = np.arange(WORD_BITS, dtype=np.uint64)
_ONE = np.uint64(1)

# DKVC: magic, version u16, code length u32, count u64
_BANK_MAGIC = b'DKVC'
_BANK_VERSION = 1
_BANK_HEADER = struct.Struct('<4sHIQ')

# Rows per block in the vectorized distance scan
_SCAN_BLOCK = 1 << 16
# Largest distance a uint8 count holds
_UINT8_MAX = 255
_UINT16_MAX = 65535

logger = logging.getLogger(__name__)


class CodeFormatError(Exception):
    """Malformed code bank file."""


def _popcount_table() -> npt.NDArray[np.uint8]:
    table = np.zeros(256, dtype=np.uint8)
    for i in range(256):
        table[i] = table[i >> 1] + (i & 1)
    return table


_POPCOUNT_TABLE = _popcount_table()


def popcount(words: npt.NDArray[np.uint64]) -> npt.NDArray[np.uint8]:
    """Number of set bits in each 64 bit word, as uint8."""
    words = np.ascontiguousarray(words, dtype=np.uint64)
    if hasattr(np, 'bitwise_count'):
        return np.bitwise_count(words)
    as_bytes = words.view(np.uint8).reshape(*words.shape, 8)
    return _POPCOUNT_TABLE[as_bytes].sum(axis=-1, dtype=np.uint8)


def distance_dtype(length_bits: int) -> np.dtype[np.unsignedinteger]:
    """Narrowest unsigned type holding distances up to ``length_bits``."""
    if length_bits <= _UINT8_MAX:
        return np.dtype(np.uint8)
    if length_bits <= _UINT16_MAX:
        return np.dtype(np.uint16)
    return np.dtype(np.uint32)


def word_count(length_bits: int) -> int:
    """Words needed to hold ``length_bits`` bits."""
    return (length_bits + WORD_BITS - 1) // WORD_BITS


def pack_signs(values: npt.ArrayLike) -> npt.NDArray[np.uint64]:
    """Pack the signs of the last axis of ``values`` into words.

    ``sign(0)`` is taken as +1.
    Returns an array of shape ``values.shape[:-1] + (words,)``.
    """
    values = np.asarray(values, dtype=np.float64)
    length = values.shape[-1]
    nwords = word_count(length)
    bits = np.zeros((*values.shape[:-1], nwords * WORD_BITS), dtype=np.uint64)
    bits[..., :length] = values >= 0
    bits = bits.reshape(*values.shape[:-1], nwords, WORD_BITS)
    return np.bitwise_or.reduce(bits << _SHIFTS, axis=-1)


def unpack_bits(
    words: npt.NDArray[np.uint64], length_bits: int
) -> npt.NDArray[np.bool_]:
    """Inverse of :func:`pack_signs`: True where the code holds +1."""
    words = np.asarray(words, dtype=np.uint64)
    bits = (words[..., np.newaxis] >> _SHIFTS) & _ONE
    bits = bits.reshape(*words.shape[:-1], words.shape[-1] * WORD_BITS)
    return bits[..., :length_bits].astype(bool)


def unpack_signs(
    words: npt.NDArray[np.uint64], length_bits: int
) -> npt.NDArray[np.float64]:
    """Unpack words to a +/-1 float array."""
    return np.where(unpack_bits(words, length_bits), 1.0, -1.0)


def inner_from_hamming(
    length_bits: int, distance: int | npt.NDArray[np.int64]
) -> int | npt.NDArray[np.int64]:
    """The +/-1 inner product implied by a Hamming distance, ``l - 2h``.

    Works elementwise on arrays of distances.

    Raises:
        DomainError: a distance is negative or larger than ``length_bits``.
    """
    h = np.asarray(distance)
    if np.any(h < 0) or np.any(h > length_bits):
        raise DomainError(f'Hamming distance out of range [0, {length_bits}]')
    if h.ndim == 0:
        return int(length_bits - 2 * int(h))
    return length_bits - 2 * h.astype(np.int64)


class BitCode:
    """One packed +/-1 hash code."""

    __slots__ = ('length_bits', 'words')

    # Code length l
    length_bits: int
    # Packed words, read only
    words: npt.NDArray[np.uint64]

    def __init__(self, length_bits: int, words: npt.ArrayLike) -> None:
        """Wrap packed ``words`` holding a code of ``length_bits`` bits."""
        words = np.array(words, dtype=np.uint64).reshape(-1)
        if length_bits <= 0 or words.size != word_count(length_bits):
            raise DimensionError(
                f'{words.size} words cannot hold a {length_bits} bit code'
            )
        tail = length_bits % WORD_BITS
        if tail and words[-1] >> np.uint64(tail):
            raise DomainError('padding bits past the code length are set')
        words.flags.writeable = False
        self.length_bits = length_bits
        self.words = words

    @classmethod
    def from_signs(cls, values: npt.ArrayLike) -> Self:
        """Code holding the elementwise sign of a real vector."""
        return sign_binarize(values)  # type: ignore [return-value]

    def unpack(self) -> npt.NDArray[np.float64]:
        """The code as a +/-1 float vector."""
        return unpack_signs(self.words, self.length_bits)

    def complement(self) -> BitCode:
        """Code with every position negated."""
        return sign_binarize(-self.unpack())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BitCode):
            return NotImplemented
        return self.length_bits == other.length_bits and bool(
            np.array_equal(self.words, other.words)
        )

    def __hash__(self) -> int:
        return hash((self.length_bits, self.words.tobytes()))

    def __repr__(self) -> str:
        bits = ''.join('1' if b else '0' for b in self.unpack() > 0)
        return f'BitCode({self.length_bits}, {bits})'


def sign_binarize(values: npt.ArrayLike) -> BitCode:
    """Binarize a real vector: bit i is set iff ``values[i] >= 0``.

    Raises:
        DimensionError: empty or non-vector input.
        DomainError: non-finite entries.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise DimensionError('sign_binarize needs a nonempty vector')
    if not np.all(np.isfinite(values)):
        raise DomainError('sign_binarize input has non-finite entries')
    return BitCode(values.size, pack_signs(values))


def hamming(a: BitCode, b: BitCode) -> int:
    """Number of positions where two codes differ.

    Raises:
        DimensionError: the codes have different lengths.
    """
    if a.length_bits != b.length_bits:
        raise DimensionError(
            f'code length mismatch: {a.length_bits} != {b.length_bits}'
        )
    return int(popcount(a.words ^ b.words).sum(dtype=np.int64))


def hamming_rows(
    query_words: npt.ArrayLike, bank_words: npt.NDArray[np.uint64]
) -> npt.NDArray[np.unsignedinteger]:
    """Distances from packed queries to each row of packed banks.

    ``bank_words`` is ``(..., N, words)`` and ``query_words`` is
    ``(..., words)`` with the same leading shape, so one call can scan the
    banks of every head. The result is ``(..., N)`` in the narrowest
    unsigned type that holds it (see :func:`distance_dtype`). Word columns
    are added in that type, so no wide intermediate is allocated.
    """
    query_words = np.asarray(query_words, dtype=np.uint64)[..., np.newaxis, :]
    *lead, count, nwords = bank_words.shape
    result = np.empty((*lead, count), dtype=distance_dtype(nwords * WORD_BITS))
    for start in range(0, count, _SCAN_BLOCK):
        stop = start + _SCAN_BLOCK
        counts = popcount(bank_words[..., start:stop, :] ^ query_words)
        out = result[..., start:stop]
        np.copyto(out, counts[..., 0], casting='unsafe')
        for word in range(1, nwords):
            np.add(out, counts[..., word], out=out, casting='unsafe')
    return result


class CodeBank:
    """Append-only contiguous store of equal length codes.

    Appends must come from a single writer. Readers see a consistent
    prefix of the bank.
    """

    _INITIAL_CAPACITY = 64

    # Code length shared by every member
    length_bits: int
    _words: npt.NDArray[np.uint64]
    _count: int

    def __init__(self, length_bits: int, capacity: int = 0) -> None:
        """Create an empty bank for ``length_bits`` bit codes."""
        if length_bits <= 0:
            raise DimensionError('code length must be positive')
        self.length_bits = length_bits
        capacity = max(capacity, self._INITIAL_CAPACITY)
        self._words = np.zeros(
            (capacity, word_count(length_bits)), dtype=np.uint64
        )
        self._count = 0

    @classmethod
    def from_words(
        cls, length_bits: int, words: npt.NDArray[np.uint64]
    ) -> Self:
        """Bank holding already packed rows."""
        bank = cls(length_bits, capacity=len(words))
        bank.extend_words(words)
        return bank

    @property
    def count(self) -> int:
        """Number of codes stored."""
        return self._count

    @property
    def words(self) -> npt.NDArray[np.uint64]:
        """Read-only view of the packed codes, one row per key."""
        view = self._words[: self._count]
        view.flags.writeable = False
        return view

    def __len__(self) -> int:
        return self._count

    def __getitem__(self, index: int) -> BitCode:
        if not -self._count <= index < self._count:
            raise IndexError(index)
        return BitCode(self.length_bits, self._words[index % self._count])

    def append(self, code: BitCode) -> None:
        """Add one code at the end of the bank."""
        if code.length_bits != self.length_bits:
            raise DimensionError(
                f'code length {code.length_bits} != bank {self.length_bits}'
            )
        self.extend_words(code.words[np.newaxis, :])

    def extend_words(self, words: npt.ArrayLike) -> None:
        """Add packed rows at the end of the bank."""
        words = np.asarray(words, dtype=np.uint64)
        nwords = self._words.shape[1]
        if words.ndim != 2 or words.shape[1] != nwords:  # noqa: PLR2004
            raise DimensionError(f'bad packed row shape {words.shape}')
        needed = self._count + len(words)
        if needed > len(self._words):
            capacity = max(needed, 2 * len(self._words))
            grown = np.zeros((capacity, self._words.shape[1]), np.uint64)
            grown[: self._count] = self._words[: self._count]
            self._words = grown
        self._words[self._count : needed] = words
        self._count = needed

    def write(self, stream: BinaryIO) -> None:
        """Serialize to DKVC format."""
        stream.write(
            _BANK_HEADER.pack(
                _BANK_MAGIC, _BANK_VERSION, self.length_bits, self._count
            )
        )
        stream.write(self.words.astype(_WORD_DTYPE).tobytes())

    @classmethod
    def read(cls, stream: BinaryIO) -> Self:
        """Deserialize from DKVC format.

        Raises:
            CodeFormatError: bad magic, version or truncated data.
        """
        header = stream.read(_BANK_HEADER.size)
        if len(header) != _BANK_HEADER.size:
            raise CodeFormatError('truncated code bank header')
        magic, version, length_bits, count = _BANK_HEADER.unpack(header)
        if magic != _BANK_MAGIC:
            raise CodeFormatError(f'bad code bank magic {magic!r}')
        if version != _BANK_VERSION:
            raise CodeFormatError(f'unsupported code bank version {version}')
        nwords = word_count(length_bits)
        payload = stream.read(count * nwords * _WORD_DTYPE.itemsize)
        if len(payload) != count * nwords * _WORD_DTYPE.itemsize:
            raise CodeFormatError('truncated code bank payload')
        words = np.frombuffer(payload, dtype=_WORD_DTYPE).reshape(count, nwords)
        return cls.from_words(length_bits, words.astype(np.uint64))

    def save(self, path: pathlib.Path) -> None:
        """Write the bank to ``path``."""
        with path.open('wb') as stream:
            self.write(stream)

    @classmethod
    def load(cls, path: pathlib.Path) -> Self:
        """Read a bank from ``path``."""
        with path.open('rb') as stream:
            return cls.read(stream)


def batch_hamming(
    query: BitCode, bank: CodeBank
) -> npt.NDArray[np.unsignedinteger]:
    """Distances from ``query`` to every code in ``bank`` (D_raw).

    An empty bank yields an empty vector.

    Raises:
        DimensionError: code lengths differ.
    """
    if query.length_bits != bank.length_bits:
        raise DimensionError(
            f'code length mismatch: {query.length_bits} != {bank.length_bits}'
        )
    if bank.count == 0:
        return np.zeros(0, dtype=distance_dtype(bank.length_bits))
    return hamming_rows(query.words, bank.words)


def ranking(
    scores: npt.ArrayLike, *, descending: bool = False
) -> npt.NDArray[np.int64]:
    """Indices sorted by score with ties broken by lower index first."""
    scores = np.asarray(scores)
    if descending and scores.dtype.kind == 'u':
        scores = scores.astype(np.int64)
    keys = -scores if descending else scores
    return np.argsort(keys, kind='stable').astype(np.int64)
