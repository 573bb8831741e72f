"""Compressed structured block (CSB) sparse matrices.

A CSB matrix is a dense matrix cut into fixed-size blocks where, inside each
block, whole rows and whole columns are either kept or pruned.  The surviving
values of a block form a dense ``kernel`` sub-matrix at the cross-points of
the kept rows and kept columns.  Storage is five arrays: per-block kernel row
and column counts, the concatenated kept-row indices, the concatenated
kept-column indices, and the concatenated kernel values.  Blocks are laid out
in row-major order and accessed sequentially, so no per-block offsets are
stored.

Dense matrices and vectors are plain ``numpy`` arrays (float64, row-major).
Matrices whose dimensions are not multiples of the block shape are zero-padded
up during encoding; the padding never produces kernel entries and is stripped
again on decode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import BadMagicError, FormatError, ShapeError, TruncatedStreamError

_MAGIC = b"CSB1"


@dataclass(frozen=True)
class BlockShape:
    """Block geometry: ``block_rows`` x ``block_cols`` dense cells per block."""

    block_rows: int
    block_cols: int

    def __post_init__(self):
        if self.block_rows < 1 or self.block_cols < 1:
            raise ShapeError(f"block shape must be >= 1x1, got {self}")

    def padded(self, rows: int, cols: int) -> tuple[int, int]:
        """Smallest (rows, cols) >= input that are multiples of the block."""
        r = -(-rows // self.block_rows) * self.block_rows
        c = -(-cols // self.block_cols) * self.block_cols
        return r, c


@dataclass(frozen=True)
class CsbMatrix:
    """The five-array CSB storage of one matrix.

    ``rows``/``cols`` are the padded dense shape (multiples of the block
    shape); ``orig_rows``/``orig_cols`` remember the pre-padding shape so
    :func:`decode` can strip the zero padding again.  ``kernel_rows[b]`` and
    ``kernel_cols[b]`` give the kernel size m x n of block ``b`` (row-major
    block order); ``row_idx``/``col_idx`` hold the kept in-block indices of
    every block back to back, and ``val`` holds the kernel values, one
    row-major kernel after another.
    """

    rows: int
    cols: int
    block_shape: BlockShape
    kernel_rows: np.ndarray
    kernel_cols: np.ndarray
    row_idx: np.ndarray
    col_idx: np.ndarray
    val: np.ndarray
    orig_rows: int = field(default=0)
    orig_cols: int = field(default=0)

    def __post_init__(self):
        if self.orig_rows == 0:
            object.__setattr__(self, "orig_rows", self.rows)
        if self.orig_cols == 0:
            object.__setattr__(self, "orig_cols", self.cols)

    @property
    def grid_rows(self) -> int:
        return self.rows // self.block_shape.block_rows

    @property
    def grid_cols(self) -> int:
        return self.cols // self.block_shape.block_cols

    @property
    def block_count(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def nnz(self) -> int:
        return len(self.val)

    @cached_property
    def _row_off(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.kernel_rows)))

    @cached_property
    def _col_off(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.kernel_cols)))

    @cached_property
    def _val_off(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.kernel_rows * self.kernel_cols)))

    def block_row_idx(self, b: int) -> np.ndarray:
        """Kept in-block row indices of block ``b``."""
        return self.row_idx[self._row_off[b] : self._row_off[b + 1]]

    def block_col_idx(self, b: int) -> np.ndarray:
        """Kept in-block column indices of block ``b``."""
        return self.col_idx[self._col_off[b] : self._col_off[b + 1]]

    def block_kernel(self, b: int) -> np.ndarray:
        """Kernel values of block ``b`` as an m x n array (view)."""
        m = int(self.kernel_rows[b])
        n = int(self.kernel_cols[b])
        return self.val[self._val_off[b] : self._val_off[b + 1]].reshape(m, n)

    def block_at(self, bi: int, bj: int) -> int:
        """Row-major block index of grid position (bi, bj)."""
        return bi * self.grid_cols + bj

    def validate(self) -> None:
        """Check every structural invariant; raise :class:`FormatError` naming
        the offending block on the first violation."""
        bs = self.block_shape
        if self.rows % bs.block_rows or self.cols % bs.block_cols:
            raise FormatError(
                f"padded shape {self.rows}x{self.cols} not a multiple of "
                f"block {bs.block_rows}x{bs.block_cols}"
            )
        if not (0 < self.orig_rows <= self.rows and 0 < self.orig_cols <= self.cols):
            raise FormatError("original shape outside padded shape")
        nb = self.block_count
        if len(self.kernel_rows) != nb or len(self.kernel_cols) != nb:
            raise FormatError(
                f"expected {nb} per-block counts, got "
                f"{len(self.kernel_rows)}/{len(self.kernel_cols)}"
            )
        if len(self.row_idx) != int(np.sum(self.kernel_rows)):
            raise FormatError("row_idx length does not match kernel row counts")
        if len(self.col_idx) != int(np.sum(self.kernel_cols)):
            raise FormatError("col_idx length does not match kernel column counts")
        if len(self.val) != int(np.sum(self.kernel_rows * self.kernel_cols)):
            raise FormatError("val length does not match kernel sizes")
        for b in range(nb):
            bi, bj = divmod(b, self.grid_cols)
            m = int(self.kernel_rows[b])
            n = int(self.kernel_cols[b])
            if not (0 <= m <= bs.block_rows and 0 <= n <= bs.block_cols):
                raise FormatError(f"block ({bi},{bj}): kernel {m}x{n} exceeds block")
            for name, idx, bound in (
                ("row", self.block_row_idx(b), bs.block_rows),
                ("col", self.block_col_idx(b), bs.block_cols),
            ):
                if len(idx) and (idx[0] < 0 or idx[-1] >= bound):
                    raise FormatError(f"block ({bi},{bj}): {name} index out of range")
                if len(idx) > 1 and not np.all(np.diff(idx) > 0):
                    raise FormatError(
                        f"block ({bi},{bj}): {name} indices not strictly increasing"
                    )


def encode(dense: np.ndarray, shape: BlockShape, pad: bool = True) -> CsbMatrix:
    """Encode a dense matrix into CSB form.

    Per block, a row (column) is kept iff it contains at least one nonzero;
    the kernel is the dense sub-matrix at the kept cross-points, so any
    matrix round-trips exactly.  With ``pad=False`` a shape that is not a
    multiple of the block raises :class:`ShapeError`; otherwise the matrix is
    zero-padded, and the all-zero padding never reaches a kernel.
    """
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={dense.ndim}")
    orig_rows, orig_cols = dense.shape
    prows, pcols = shape.padded(orig_rows, orig_cols)
    if (prows, pcols) != dense.shape:
        if not pad:
            raise ShapeError(
                f"shape {orig_rows}x{orig_cols} not a multiple of block "
                f"{shape.block_rows}x{shape.block_cols} and padding is disabled"
            )
        padded = np.zeros((prows, pcols))
        padded[:orig_rows, :orig_cols] = dense
        dense = padded
    gr = prows // shape.block_rows
    gc = pcols // shape.block_cols
    # (gr, gc, block_rows, block_cols) view of the block grid
    blocks = dense.reshape(gr, shape.block_rows, gc, shape.block_cols).transpose(0, 2, 1, 3)
    nz = blocks != 0.0
    keep_rows = nz.any(axis=3)  # (gr, gc, block_rows)
    keep_cols = nz.any(axis=2)  # (gr, gc, block_cols)

    kernel_rows = np.zeros(gr * gc, dtype=np.int64)
    kernel_cols = np.zeros(gr * gc, dtype=np.int64)
    row_parts: list[np.ndarray] = []
    col_parts: list[np.ndarray] = []
    val_parts: list[np.ndarray] = []
    for bi in range(gr):
        for bj in range(gc):
            # A block with no kept rows has no kept columns either: both
            # sets are nonempty exactly when the block holds a nonzero.
            r = np.flatnonzero(keep_rows[bi, bj])
            c = np.flatnonzero(keep_cols[bi, bj])
            b = bi * gc + bj
            kernel_rows[b] = len(r)
            kernel_cols[b] = len(c)
            if len(r):
                row_parts.append(r)
                col_parts.append(c)
                val_parts.append(blocks[bi, bj][np.ix_(r, c)].ravel())

    def cat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    return CsbMatrix(
        rows=prows,
        cols=pcols,
        block_shape=shape,
        kernel_rows=kernel_rows,
        kernel_cols=kernel_cols,
        row_idx=cat(row_parts, np.int64),
        col_idx=cat(col_parts, np.int64),
        val=cat(val_parts, np.float64),
        orig_rows=orig_rows,
        orig_cols=orig_cols,
    )


def decode(csb: CsbMatrix) -> np.ndarray:
    """Scatter the kernels back to a dense matrix, stripping zero padding."""
    csb.validate()
    dense = np.zeros((csb.rows, csb.cols))
    bs = csb.block_shape
    for b in range(csb.block_count):
        m = int(csb.kernel_rows[b])
        n = int(csb.kernel_cols[b])
        if m == 0 or n == 0:
            continue
        bi, bj = divmod(b, csb.grid_cols)
        r0 = bi * bs.block_rows
        c0 = bj * bs.block_cols
        rows = r0 + csb.block_row_idx(b)
        cols = c0 + csb.block_col_idx(b)
        dense[np.ix_(rows, cols)] = csb.block_kernel(b)
    return dense[: csb.orig_rows, : csb.orig_cols]


def csb_mvm(csb: CsbMatrix, x: np.ndarray) -> np.ndarray:
    """Reference matrix-vector product y = decode(csb) . x on padded shapes.

    Blocks are walked in row-major order; each kernel gathers its x entries
    via the kept-column indices and scatter-accumulates partial sums via the
    kept-row indices.  This is the association order the engine simulator is
    checked against.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) != csb.cols:
        raise ShapeError(f"vector length {x.shape} does not match cols={csb.cols}")
    y = np.zeros(csb.rows)
    bs = csb.block_shape
    for b in range(csb.block_count):
        if csb.kernel_rows[b] == 0 or csb.kernel_cols[b] == 0:
            continue
        bi, bj = divmod(b, csb.grid_cols)
        xs = x[bj * bs.block_cols + csb.block_col_idx(b)]
        y[bi * bs.block_rows + csb.block_row_idx(b)] += csb.block_kernel(b) @ xs
    return y


def nio(csb: CsbMatrix) -> float:
    """Normalized index overhead: index elements stored per kernel value.

    Counts the two per-block size arrays (2 per block) plus every row and
    column index, each as one unit regardless of bit width, divided by the
    kernel value count.
    """
    if csb.nnz == 0:
        raise ShapeError("nio is undefined for a matrix with no stored values")
    idx = len(csb.row_idx) + len(csb.col_idx) + 2 * csb.block_count
    return idx / csb.nnz


def csr_index_count(dense: np.ndarray) -> int:
    """Index elements a CSR encoding of ``dense`` would store.

    One column index per nonzero plus ``rows + 1`` row pointers; used as the
    non-structured baseline when comparing index overheads.
    """
    dense = np.asarray(dense)
    return int(np.count_nonzero(dense)) + dense.shape[0] + 1


def serialize(csb: CsbMatrix) -> bytes:
    """Pack a CSB matrix into the little-endian ``CSB1`` byte format.

    Layout: magic ``CSB1``; u32 rows, cols, block_rows, block_cols; u32
    block count; per block (row-major) u16 kernel_rows, u16 kernel_cols;
    the row index stream (u16); the column index stream (u16); the value
    stream (IEEE-754 binary32).  Values are stored single precision, a
    documented lossy step relative to the float64 in-memory form.
    """
    csb.validate()
    bs = csb.block_shape
    if bs.block_rows > 0xFFFF or bs.block_cols > 0xFFFF:
        raise FormatError("block dimensions exceed the u16 range of the file format")
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<5I", csb.rows, csb.cols, bs.block_rows, bs.block_cols, csb.block_count)
    counts = np.empty(2 * csb.block_count, dtype="<u2")
    counts[0::2] = csb.kernel_rows
    counts[1::2] = csb.kernel_cols
    out += counts.tobytes()
    out += csb.row_idx.astype("<u2").tobytes()
    out += csb.col_idx.astype("<u2").tobytes()
    out += csb.val.astype("<f4").tobytes()
    return bytes(out)


def deserialize(data: bytes) -> CsbMatrix:
    """Inverse of :func:`serialize`; validates the result.

    Raises :class:`BadMagicError`, :class:`TruncatedStreamError` or a plain
    :class:`FormatError` (broken invariants, trailing bytes).
    """
    if len(data) < 4 or data[:4] != _MAGIC:
        raise BadMagicError(f"expected magic {_MAGIC!r}, got {bytes(data[:4])!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedStreamError(
                f"stream ends at byte {len(data)}, needed {pos + n}"
            )
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    rows, cols, brows, bcols, block_count = struct.unpack("<5I", take(20))
    if brows < 1 or bcols < 1:
        raise FormatError("block shape in header must be >= 1x1")
    if rows % brows or cols % bcols:
        raise FormatError("header shape is not a multiple of the block shape")
    if block_count != (rows // brows) * (cols // bcols):
        raise FormatError(
            f"block count {block_count} does not match grid "
            f"{(rows // brows)}x{(cols // bcols)}"
        )
    counts = np.frombuffer(take(4 * block_count), dtype="<u2").astype(np.int64)
    kernel_rows = counts[0::2].copy()
    kernel_cols = counts[1::2].copy()
    n_row = int(kernel_rows.sum())
    n_col = int(kernel_cols.sum())
    n_val = int((kernel_rows * kernel_cols).sum())
    row_idx = np.frombuffer(take(2 * n_row), dtype="<u2").astype(np.int64)
    col_idx = np.frombuffer(take(2 * n_col), dtype="<u2").astype(np.int64)
    val = np.frombuffer(take(4 * n_val), dtype="<f4").astype(np.float64)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after the value stream")
    csb = CsbMatrix(
        rows=rows,
        cols=cols,
        block_shape=BlockShape(brows, bcols),
        kernel_rows=kernel_rows,
        kernel_cols=kernel_cols,
        row_idx=row_idx,
        col_idx=col_idx,
        val=val,
    )
    csb.validate()
    return csb


def save(csb: CsbMatrix, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(csb))


def load(path) -> CsbMatrix:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
