"""Synthetic matrix generators for tests and trend sweeps.

The imbalance suite mixes four block-sparsity styles so that each sharing
path has cases it cannot fix alone: heavy block-rows defeat horizontal
sharing (the heavy blocks are each other's horizontal neighbors), heavy
block-columns defeat vertical sharing, diagonal-dense matrices need both
paths, and a heavy-tailed mix provides generic spread.  Kernel dimensions
are kept multiples of the PE-array dimensions so shared passes stay aligned.
"""

from __future__ import annotations

import numpy as np

from .format import BlockShape, CsbMatrix

__all__ = [
    "random_patterned_dense",
    "random_csb",
    "imbalance_matrix",
    "imbalance_suite",
    "SUITE_STYLES",
]

SUITE_STYLES = ("tail", "rows", "cols", "diag")


def random_patterned_dense(
    rng: np.random.Generator,
    rows: int,
    cols: int,
    shape: BlockShape,
    max_keep: float = 1.0,
) -> np.ndarray:
    """CSB-patterned dense matrix with random per-block row/column masks.

    Values are uniform in [-1, 1] at the kept cross-points; every kept
    cross-point is made nonzero so the pattern survives re-encoding.
    """
    bm, bn = shape.block_rows, shape.block_cols
    gr = -(-rows // bm)
    gc = -(-cols // bn)
    m_cnt = rng.integers(0, int(bm * max_keep) + 1, size=(gr, gc, 1))
    n_cnt = rng.integers(0, int(bn * max_keep) + 1, size=(gr, gc, 1))
    # per-block random subsets via rank thresholding
    keep_r = rng.random((gr, gc, bm)).argsort(-1).argsort(-1) < m_cnt
    keep_c = rng.random((gr, gc, bn)).argsort(-1).argsort(-1) < n_cnt
    cross = keep_r[:, :, :, None] & keep_c[:, :, None, :]
    vals = rng.uniform(0.1, 1.0, size=cross.shape)
    vals *= rng.integers(0, 2, size=cross.shape) * 2.0 - 1.0
    blocks = np.where(cross, vals, 0.0)
    dense = blocks.transpose(0, 2, 1, 3).reshape(gr * bm, gc * bn)
    return np.ascontiguousarray(dense[:rows, :cols])


def random_csb(
    rng: np.random.Generator,
    grid_rows: int,
    grid_cols: int,
    shape: BlockShape,
    dims_fn,
) -> CsbMatrix:
    """Build a CSB matrix directly from per-block kernel dimensions.

    ``dims_fn(rng, bi, bj) -> (m, n)`` chooses each block's kernel size;
    kept indices are random sorted subsets and values are nonzero uniforms.
    """
    kernel_rows = np.zeros(grid_rows * grid_cols, dtype=np.int64)
    kernel_cols = np.zeros(grid_rows * grid_cols, dtype=np.int64)
    row_parts, col_parts, val_parts = [], [], []
    for bi in range(grid_rows):
        for bj in range(grid_cols):
            m, n = dims_fn(rng, bi, bj)
            if m == 0 or n == 0:
                m = n = 0
            b = bi * grid_cols + bj
            kernel_rows[b] = m
            kernel_cols[b] = n
            if m:
                row_parts.append(np.sort(rng.choice(shape.block_rows, size=m, replace=False)))
                col_parts.append(np.sort(rng.choice(shape.block_cols, size=n, replace=False)))
                sign = rng.choice([-1.0, 1.0], size=m * n)
                val_parts.append(sign * rng.uniform(0.1, 1.0, size=m * n))

    def cat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    csb = CsbMatrix(
        rows=grid_rows * shape.block_rows,
        cols=grid_cols * shape.block_cols,
        block_shape=shape,
        kernel_rows=kernel_rows,
        kernel_cols=kernel_cols,
        row_idx=cat(row_parts, np.int64),
        col_idx=cat(col_parts, np.int64),
        val=cat(val_parts, np.float64),
    )
    csb.validate()
    return csb


def _tail_dim(rng: np.random.Generator, block: int, align: int) -> int:
    # Skewed toward small kernels; occasionally near-full.
    steps = block // align
    weights = np.array([1.5] + [3.0 / (s + 1) for s in range(1, steps + 1)])
    weights[-1] += 0.6
    weights /= weights.sum()
    return int(rng.choice(steps + 1, p=weights)) * align


def imbalance_matrix(
    rng: np.random.Generator,
    style: str,
    grid: int,
    shape: BlockShape,
    align: int,
) -> CsbMatrix:
    """One matrix of the given imbalance style on a square block grid."""
    block = shape.block_rows
    small_choices = np.arange(0, block // 4 + 1, align)

    def small(rng_):
        return int(rng_.choice(small_choices))

    def dims(rng_, bi, bj):
        if style == "tail":
            return _tail_dim(rng_, block, align), _tail_dim(rng_, shape.block_cols, align)
        if style == "rows":
            if bi % 2 == 0:
                return block, shape.block_cols
            return small(rng_), small(rng_)
        if style == "cols":
            if bj % 2 == 0:
                return block, shape.block_cols
            return small(rng_), small(rng_)
        if style == "diag":
            if bi == bj:
                return block, shape.block_cols
            return small(rng_), small(rng_)
        raise ValueError(f"unknown style {style!r}")

    return random_csb(rng, grid, grid, shape, dims)


def imbalance_suite(
    seed: int,
    count: int,
    grid: int = 4,
    block: int = 16,
    align: int = 2,
) -> list[tuple[str, CsbMatrix]]:
    """Deterministic list of (matrix_id, matrix), styles interleaved."""
    shape = BlockShape(block, block)
    out = []
    for idx in range(count):
        style = SUITE_STYLES[idx % len(SUITE_STYLES)]
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        out.append((f"{style}-{idx:03d}", imbalance_matrix(rng, style, grid, shape, align)))
    return out
