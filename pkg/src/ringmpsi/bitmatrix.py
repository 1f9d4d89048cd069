"""Column-major binary matrices and the XOR / mux / gather kernels.

A BitMatrix is an m x w bit matrix stored as w contiguous columns of
ceil(m/8) bytes each, bits packed LSB-first within a byte.  One column is
one wire payload slice, so the in-memory layout doubles as the wire
encoding (columns concatenated in order, no per-column header).  Trailing
pad bits in the last byte of every column are kept at zero; every
operation preserves that canonical form.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "BitMatrix",
    "ChoiceString",
    "filled",
    "random",
    "xor",
    "mux",
    "mask_columns",
    "gather",
]

# An IndexVector is a length-w integer array with entries in [0, rows);
# produced by crypto.prf_indices and consumed by gather().
IndexVector = np.ndarray


class BitMatrix:
    """m x w bit matrix, column-major, one row of `data` per column."""

    __slots__ = ("rows", "cols", "data")

    def __init__(self, rows: int, cols: int, data: np.ndarray):
        if rows < 1 or cols < 1:
            raise ValueError("matrix dimensions must be positive")
        cb = (rows + 7) // 8
        if data.shape != (cols, cb) or data.dtype != np.uint8:
            raise ValueError(f"data must be uint8 of shape ({cols}, {cb})")
        self.rows = rows
        self.cols = cols
        self.data = data

    @property
    def col_bytes(self) -> int:
        return (self.rows + 7) // 8

    @property
    def pad_mask(self) -> int:
        """Byte mask of the valid bits in each column's last byte."""
        r = self.rows % 8
        return 0xFF if r == 0 else (1 << r) - 1

    def get_bit(self, row: int, col: int) -> int:
        return (self.data[col, row >> 3] >> (row & 7)) & 1

    def column(self, col: int) -> bytes:
        return self.data[col].tobytes()

    def to_bytes(self) -> bytes:
        """Wire encoding: columns concatenated in order."""
        return np.ascontiguousarray(self.data).tobytes()

    @classmethod
    def from_bytes(cls, rows: int, cols: int, raw: bytes) -> "BitMatrix":
        cb = (rows + 7) // 8
        if len(raw) != cols * cb:
            raise ValueError(f"expected {cols * cb} bytes, got {len(raw)}")
        data = np.frombuffer(raw, dtype=np.uint8).reshape(cols, cb).copy()
        mat = cls(rows, cols, data)
        if not mat.is_canonical():
            raise ValueError("pad bits must be zero")
        return mat

    def is_canonical(self) -> bool:
        """True iff every column's pad bits are zero."""
        return bool((self.data[:, -1] & ~np.uint8(self.pad_mask) & 0xFF).max(initial=0) == 0)

    def copy(self) -> "BitMatrix":
        return BitMatrix(self.rows, self.cols, self.data.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitMatrix):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and bool(np.array_equal(self.data, other.data))
        )

    def __xor__(self, other: "BitMatrix") -> "BitMatrix":
        return xor(self, other)

    def __repr__(self) -> str:
        return f"BitMatrix({self.rows}x{self.cols})"


class ChoiceString:
    """A length-w bit vector of per-column OT choices."""

    __slots__ = ("bits",)

    def __init__(self, bits: np.ndarray):
        if bits.ndim != 1 or bits.dtype != np.uint8:
            raise ValueError("bits must be a 1-d uint8 array")
        if bits.size == 0:
            raise ValueError("choice string must be non-empty")
        if bits.max(initial=0) > 1:
            raise ValueError("bits must be 0/1")
        self.bits = bits

    @classmethod
    def from_bits(cls, seq) -> "ChoiceString":
        return cls(np.asarray(list(seq), dtype=np.uint8))

    @classmethod
    def random(cls, w: int, rng) -> "ChoiceString":
        raw = np.frombuffer(rng.randbytes((w + 7) // 8), dtype=np.uint8)
        return cls(np.unpackbits(raw, bitorder="little")[:w].copy())

    @classmethod
    def zeros(cls, w: int) -> "ChoiceString":
        return cls(np.zeros(w, dtype=np.uint8))

    @classmethod
    def ones(cls, w: int) -> "ChoiceString":
        return cls(np.ones(w, dtype=np.uint8))

    def __len__(self) -> int:
        return self.bits.size

    def __getitem__(self, j: int) -> int:
        return int(self.bits[j])

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChoiceString):
            return NotImplemented
        return bool(np.array_equal(self.bits, other.bits))


def filled(rows: int, cols: int, bit: int) -> BitMatrix:
    """All-zero or all-one matrix (pad bits zero either way)."""
    if bit not in (0, 1):
        raise ValueError("bit must be 0 or 1")
    cb = (rows + 7) // 8
    data = np.full((cols, cb), 0xFF if bit else 0x00, dtype=np.uint8)
    mat = BitMatrix(rows, cols, data)
    if bit:
        data[:, -1] &= np.uint8(mat.pad_mask)
    return mat


def random(rows: int, cols: int, rng) -> BitMatrix:
    """Uniformly random matrix from `rng` (deterministic for a fixed seed)."""
    cb = (rows + 7) // 8
    raw = rng.randbytes(cb * cols)
    data = np.frombuffer(raw, dtype=np.uint8).reshape(cols, cb).copy()
    mat = BitMatrix(rows, cols, data)
    data[:, -1] &= np.uint8(mat.pad_mask)
    return mat


def _check_dims(a: BitMatrix, b: BitMatrix):
    if a.rows != b.rows or a.cols != b.cols:
        raise ValueError(f"dimension mismatch: {a!r} vs {b!r}")


def _check_choice(mat: BitMatrix, s: ChoiceString):
    if len(s) != mat.cols:
        raise ValueError(f"choice string length {len(s)} != cols {mat.cols}")


def xor(a: BitMatrix, b: BitMatrix) -> BitMatrix:
    """Bitwise exclusive-or, column by column."""
    _check_dims(a, b)
    return BitMatrix(a.rows, a.cols, a.data ^ b.data)


def mux(a: BitMatrix, b: BitMatrix, s: ChoiceString) -> BitMatrix:
    """Per-column select: column j of the result is a_j if s[j]=0 else b_j."""
    _check_dims(a, b)
    _check_choice(a, s)
    data = np.where(s.bits[:, None].astype(bool), b.data, a.data)
    return BitMatrix(a.rows, a.cols, data)


def mask_columns(d: BitMatrix, s: ChoiceString) -> BitMatrix:
    """Keep column j of d where s[j]=1, zero it where s[j]=0.

    Satisfies the select/mask identity used throughout the ring pass:
    mux(a, a^d, s) == a ^ mask_columns(d, s).
    """
    _check_choice(d, s)
    return BitMatrix(d.rows, d.cols, d.data * s.bits[:, None])


def gather(mat: BitMatrix, v: IndexVector) -> bytes:
    """One bit per column: bit j of the output is column j at row v[j].

    Output is packed LSB-first into ceil(w/8) bytes with zero pad bits.
    Linear over XOR: gather(a^b, v) == gather(a,v) XOR gather(b,v).
    """
    v = np.asarray(v)
    if v.shape != (mat.cols,):
        raise IndexError(f"index vector length {v.shape} != cols {mat.cols}")
    if v.size and (int(v.min()) < 0 or int(v.max()) >= mat.rows):
        raise IndexError("row index out of range")
    bits = (mat.data[np.arange(mat.cols), v >> 3] >> (v & 7).astype(np.uint8)) & 1
    return np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()
