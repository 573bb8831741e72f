"""Workload-balanced micro-instruction compilation for the CSB engine.

The engine is a K x L grid of PEGroups, each a P x Q PE array.  One block
iteration maps a K x L window of blocks onto the grid; kernels of different
sizes make the groups finish at different times.  To balance an iteration,
each kernel may be split into three rectangles: a local part, a horizontal
share (handed to the right torus neighbor, which reads the owner's input
buffer through an extra port) and a vertical share (handed to the lower torus
neighbor, which accumulates back into the owner's output buffer).

The split is found by a bounded backtracking search over a discretized
constraint system:

  * share bounds: 0 <= dm_h <= m, 0 <= dn_h <= n, 0 <= dn_v <= n, and the
    vertical share height is capped at half the kernel, 0 <= dm_v <= m // 2;
  * tiling: the three rectangles partition the kernel exactly; with the
    fixed slicing geometry (local in the leading corner, horizontal share on
    the trailing columns, vertical share on the trailing rows) a nonempty
    pair of shares forces either a full-height horizontal share (dm_h = m)
    or a full-width vertical share (dn_v = n);
  * local dims: m' = m - dm_v and n' = n - dn_h;
  * alignment: every share dimension is a multiple of the PE array dimension
    it maps onto (dm_h, dm_v multiples of P; dn_h, dn_v multiples of Q), so
    shared passes never waste PEs;
  * load margin: per group, |local + incoming shares - avg| <= margin where
    avg is the exact rational mean workload of the window and the incoming
    shares come from the left and upper torus predecessors.

The margin starts at zero and relaxes in P*Q steps until the system is
satisfiable; the all-local assignment becomes feasible once the margin covers
the raw imbalance, so compilation always terminates.  Empty shares are
canonicalized to all-zero variables, and a group never shares with itself
(on a degenerate K=1 or L=1 grid the corresponding path is disabled).

The search is deterministic: groups are assigned in row-major order and each
group's candidates are tried no-share first, then full-height-horizontal
splits, then full-width-vertical splits, each family in ascending variable
order; the first satisfying assignment wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError
from .format import CsbMatrix

__all__ = [
    "SHARING_MODES",
    "EngineConfig",
    "KernelWindow",
    "PartitionVars",
    "MicroItem",
    "IterationSchedule",
    "MicroProgram",
    "analyze_iteration",
    "solve_partition",
    "validate_partition",
    "compile_micro",
    "check_cover",
    "format_micro",
]

SHARING_MODES = ("none", "vertical", "horizontal", "two_d")


@dataclass(frozen=True)
class EngineConfig:
    """K x L PEGroup grid, P x Q PEs per group, plus the sharing paths."""

    k: int
    l: int
    p: int
    q: int
    sharing_mode: str = "two_d"
    ew_unit_width: int = 1  # element-wise unit lanes, used by the RNN simulator

    def __post_init__(self):
        if min(self.k, self.l, self.p, self.q) < 1:
            raise ConfigError(f"grid dimensions must be >= 1, got {self}")
        if self.sharing_mode not in SHARING_MODES:
            raise ConfigError(
                f"sharing_mode must be one of {SHARING_MODES}, got {self.sharing_mode!r}"
            )
        if self.ew_unit_width < 1:
            raise ConfigError("ew_unit_width must be >= 1")

    @property
    def horizontal_enabled(self) -> bool:
        return self.sharing_mode in ("horizontal", "two_d") and self.l >= 2

    @property
    def vertical_enabled(self) -> bool:
        return self.sharing_mode in ("vertical", "two_d") and self.k >= 2

    @property
    def peak_pe_count(self) -> int:
        return self.k * self.l * self.p * self.q


@dataclass(frozen=True)
class KernelWindow:
    """Kernel sizes of the K x L blocks of one iteration, plus the mean load."""

    i: int
    j: int
    m: np.ndarray  # (K, L) kernel row counts, 0 for out-of-range blocks
    n: np.ndarray  # (K, L) kernel column counts
    avg: Fraction


@dataclass(frozen=True)
class PartitionVars:
    """One group's kernel split: local part plus the two outgoing shares."""

    m_local: int
    n_local: int
    dm_h: int
    dn_h: int
    dm_v: int
    dn_v: int

    @property
    def local_load(self) -> int:
        return self.m_local * self.n_local

    @property
    def horiz_load(self) -> int:
        return self.dm_h * self.dn_h

    @property
    def vert_load(self) -> int:
        return self.dm_v * self.dn_v


@dataclass(frozen=True)
class MicroItem:
    """One rectangle of kernel work assigned to a PEGroup.

    ``row_idx``/``col_idx`` are the kept in-block indices of the owning
    block covered by this rectangle; ``origin`` is that block's grid
    position.  ``sharing`` says where inputs/outputs live: ``local`` (own
    buffers), ``horizontal`` (inputs read from the left neighbor) or
    ``vertical`` (outputs accumulated to the upper neighbor).
    """

    sharing: str
    trip_rows: int
    trip_cols: int
    row_idx: np.ndarray
    col_idx: np.ndarray
    origin: tuple[int, int]


@dataclass(frozen=True)
class IterationSchedule:
    i: int
    j: int
    margin: int
    vars: dict[tuple[int, int], PartitionVars]
    items: dict[tuple[int, int], tuple[MicroItem, ...]]


@dataclass(frozen=True)
class MicroProgram:
    cfg: EngineConfig
    rows: int
    cols: int
    block_rows: int
    block_cols: int
    iters_v: int
    iters_h: int
    iterations: tuple[IterationSchedule, ...] = field(default_factory=tuple)


def _torus_prev(idx: int, size: int) -> int:
    return idx - 1 if idx > 1 else size


def analyze_iteration(csb: CsbMatrix, cfg: EngineConfig, i: int, j: int) -> KernelWindow:
    """Kernel dimensions of the K x L blocks mapped to iteration (i, j)."""
    iters_v = math.ceil(csb.grid_rows / cfg.k)
    iters_h = math.ceil(csb.grid_cols / cfg.l)
    if not (0 <= i < iters_v and 0 <= j < iters_h):
        raise IndexError(f"iteration ({i},{j}) outside {iters_v}x{iters_h}")
    m = np.zeros((cfg.k, cfg.l), dtype=np.int64)
    n = np.zeros((cfg.k, cfg.l), dtype=np.int64)
    for k in range(1, cfg.k + 1):
        for l_ in range(1, cfg.l + 1):
            bi = i * cfg.k + k - 1
            bj = j * cfg.l + l_ - 1
            if bi < csb.grid_rows and bj < csb.grid_cols:
                b = csb.block_at(bi, bj)
                m[k - 1, l_ - 1] = csb.kernel_rows[b]
                n[k - 1, l_ - 1] = csb.kernel_cols[b]
    avg = Fraction(int(np.sum(m * n)), cfg.k * cfg.l)
    return KernelWindow(i, j, m, n, avg)


def _candidates(m: int, n: int, p: int, q: int, horiz: bool, vert: bool):
    """Canonical split candidates for one kernel, in preference order.

    Each entry is (dm_h, dn_h, dm_v, dn_v, local, hout, vout).  Empty shares
    are encoded as all-zero pairs.
    """

    def entry(dmh, dnh, dmv, dnv):
        return (dmh, dnh, dmv, dnv, (m - dmv) * (n - dnh), dmh * dnh, dmv * dnv)

    out = [entry(0, 0, 0, 0)]
    if m == 0 or n == 0:
        return out
    fam_h: list[tuple] = []
    fam_v: list[tuple] = []
    if horiz and m % p == 0:
        for dnh in range(q, n + 1, q):
            fam_h.append(entry(m, dnh, 0, 0))
        if vert and n % q == 0:
            for dnh in range(q, n, q):
                for dmv in range(p, m // 2 + 1, p):
                    fam_h.append(entry(m, dnh, dmv, n - dnh))
    if vert and n % q == 0:
        for dmv in range(p, m // 2 + 1, p):
            fam_v.append(entry(0, 0, dmv, n))
        if horiz and m % p == 0:
            for dmv in range(p, m // 2 + 1, p):
                for dnh in range(q, n + 1, q):
                    fam_v.append(entry(m - dmv, dnh, dmv, n))
    fam_h.sort()
    fam_v.sort()
    return out + fam_h + fam_v


def _margin_floor(window: KernelWindow, cfg: EngineConfig) -> int:
    """Smallest margin rung not excluded by per-group load intervals.

    Any assignment keeps group (k,l)'s load within [min local, raw + max
    incoming]; a margin whose band misses that interval for some group is
    infeasible, so the ladder can start at the first rung whose band meets
    every interval.  This only skips provably dead rungs; the final margin
    equals what the plain zero-based ladder would find.
    """
    kk, ll = cfg.k, cfg.l
    mins = np.zeros((kk, ll), dtype=np.int64)
    hout_max = np.zeros((kk, ll), dtype=np.int64)
    vout_max = np.zeros((kk, ll), dtype=np.int64)
    for k in range(kk):
        for l_ in range(ll):
            cands = _candidates(
                int(window.m[k, l_]),
                int(window.n[k, l_]),
                cfg.p,
                cfg.q,
                cfg.horizontal_enabled,
                cfg.vertical_enabled,
            )
            mins[k, l_] = min(c[4] for c in cands)
            hout_max[k, l_] = max(c[5] for c in cands)
            vout_max[k, l_] = max(c[6] for c in cands)
    needed = Fraction(0)
    for k in range(kk):
        for l_ in range(ll):
            left = (k, (l_ - 1) % ll)
            up = ((k - 1) % kk, l_)
            hi = int(window.m[k, l_] * window.n[k, l_]) + hout_max[left] + vout_max[up]
            needed = max(needed, Fraction(int(mins[k, l_])) - window.avg, window.avg - hi)
    if needed <= 0:
        return 0
    step = cfg.p * cfg.q
    return int(math.ceil(needed / step)) * step


def solve_partition(
    window: KernelWindow, cfg: EngineConfig, margin: int
) -> tuple[bool, dict[tuple[int, int], PartitionVars] | None]:
    """Search for a split assignment keeping every group's load within
    ``margin`` of the window average.

    Returns ``(False, None)`` when no assignment exists at this margin.  All
    margin comparisons are exact (integer loads against the rational mean).
    """
    if margin < 0:
        raise ConfigError("margin must be >= 0")
    kk, ll = cfg.k, cfg.l
    ng = kk * ll
    mg = window.m.ravel()
    ngrid = window.n.ravel()
    total = int(np.sum(mg * ngrid))
    # |load - total/ng| <= margin  <=>  lo <= load * ng <= hi, all integers
    hi = total + margin * ng
    lo = total - margin * ng
    cands = [
        _candidates(
            int(mg[g]), int(ngrid[g]), cfg.p, cfg.q,
            cfg.horizontal_enabled, cfg.vertical_enabled,
        )
        for g in range(ng)
    ]
    # Contribution targets of group g: its own load, the right torus
    # neighbor's (g gives horizontally) and the lower torus neighbor's.
    targets = []
    for g in range(ng):
        k, l_ = divmod(g, ll)
        right = k * ll + (l_ + 1) % ll
        down = ((k + 1) % kk) * ll + l_
        targets.append((g, right, down))
    slot_max = [
        tuple(max(c[4 + s] for c in cands[g]) for s in range(3)) for g in range(ng)
    ]

    loads = [0] * ng
    # Largest load each group could still gain from unassigned contributors;
    # prunes branches where a group can no longer reach the lower band.
    remaining = [0] * ng
    for g in range(ng):
        for t, mx in zip(targets[g], slot_max[g]):
            remaining[t] += mx
    chosen: list[tuple | None] = [None] * ng

    def dfs(g: int) -> bool:
        if g == ng:
            return True
        tg = targets[g]
        mx = slot_max[g]
        for cand in cands[g]:
            amounts = cand[4:7]
            ok = True
            for t, a, m_ in zip(tg, amounts, mx):
                loads[t] += a
                remaining[t] -= m_
            for t in tg:
                if loads[t] * ng > hi or (loads[t] + remaining[t]) * ng < lo:
                    ok = False
                    break
            if ok:
                chosen[g] = cand
                if dfs(g + 1):
                    return True
                chosen[g] = None
            for t, a, m_ in zip(tg, amounts, mx):
                loads[t] -= a
                remaining[t] += m_
        return False

    if not dfs(0):
        return False, None
    out = {}
    for g in range(ng):
        k, l_ = divmod(g, ll)
        dmh, dnh, dmv, dnv = chosen[g][:4]
        out[(k + 1, l_ + 1)] = PartitionVars(
            m_local=int(mg[g]) - dmv,
            n_local=int(ngrid[g]) - dnh,
            dm_h=dmh,
            dn_h=dnh,
            dm_v=dmv,
            dn_v=dnv,
        )
    return True, out


def validate_partition(
    window: KernelWindow,
    cfg: EngineConfig,
    assignment: dict[tuple[int, int], PartitionVars],
    margin: int,
) -> list[str]:
    """Independent re-check of a solved assignment; returns violations.

    Deliberately avoids the solver's candidate algebra: the tiling check
    rasterizes the three rectangles over the kernel and counts coverage.
    """
    bad: list[str] = []
    kk, ll = cfg.k, cfg.l
    for k in range(1, kk + 1):
        for l_ in range(1, ll + 1):
            v = assignment[(k, l_)]
            m = int(window.m[k - 1, l_ - 1])
            n = int(window.n[k - 1, l_ - 1])
            tag = f"group ({k},{l_})"
            if not (0 <= v.dm_h <= m and 0 <= v.dn_h <= n):
                bad.append(f"{tag}: horizontal share exceeds kernel")
            if not (0 <= v.dm_v <= m // 2 and 0 <= v.dn_v <= n):
                bad.append(f"{tag}: vertical share exceeds its cap")
            if v.m_local != m - v.dm_v or v.n_local != n - v.dn_h:
                bad.append(f"{tag}: local dims break m'=m-dm_v / n'=n-dn_h")
            if v.dm_h % cfg.p or v.dm_v % cfg.p or v.dn_h % cfg.q or v.dn_v % cfg.q:
                bad.append(f"{tag}: share dims not PE-array aligned")
            if v.horiz_load == 0 and (v.dm_h, v.dn_h) != (0, 0):
                bad.append(f"{tag}: empty horizontal share not canonicalized")
            if v.vert_load == 0 and (v.dm_v, v.dn_v) != (0, 0):
                bad.append(f"{tag}: empty vertical share not canonicalized")
            if not cfg.horizontal_enabled and v.horiz_load:
                bad.append(f"{tag}: horizontal share without a sharing path")
            if not cfg.vertical_enabled and v.vert_load:
                bad.append(f"{tag}: vertical share without a sharing path")
            if m > 0 and n > 0:
                cover = np.zeros((m, n), dtype=np.int64)
                cover[m - v.dm_v :, : v.dn_v] += 1
                cover[: v.dm_h, n - v.dn_h :] += 1
                cover[: max(v.m_local, 0), : max(v.n_local, 0)] += 1
                if not np.all(cover == 1):
                    bad.append(f"{tag}: rectangles do not tile the kernel")
            elif v.local_load or v.horiz_load or v.vert_load:
                bad.append(f"{tag}: nonempty split of an empty kernel")
    for k in range(1, kk + 1):
        for l_ in range(1, ll + 1):
            left = assignment[(k, _torus_prev(l_, ll))]
            up = assignment[(_torus_prev(k, kk), l_)]
            load = assignment[(k, l_)].local_load + left.horiz_load + up.vert_load
            if abs(Fraction(load) - window.avg) > margin:
                bad.append(
                    f"group ({k},{l_}): load {load} deviates from avg "
                    f"{window.avg} by more than {margin}"
                )
    return bad


def _emit_items(
    csb: CsbMatrix,
    cfg: EngineConfig,
    window: KernelWindow,
    assignment: dict[tuple[int, int], PartitionVars],
) -> dict[tuple[int, int], tuple[MicroItem, ...]]:
    """Slice the kernels into per-group items per the partition geometry.

    The local part keeps the leading corner of the owner's index lists, a
    horizontal share takes the trailing dn_h columns across the first dm_h
    rows, and a vertical share takes the trailing dm_v rows across the first
    dn_v columns.
    """
    out: dict[tuple[int, int], tuple[MicroItem, ...]] = {}

    def owner_block(k: int, l_: int) -> tuple[int, int, int]:
        bi = window.i * cfg.k + k - 1
        bj = window.j * cfg.l + l_ - 1
        return bi, bj, csb.block_at(bi, bj)

    for k in range(1, cfg.k + 1):
        for l_ in range(1, cfg.l + 1):
            items: list[MicroItem] = []
            v = assignment[(k, l_)]
            if v.local_load:
                bi, bj, b = owner_block(k, l_)
                items.append(
                    MicroItem(
                        "local",
                        v.m_local,
                        v.n_local,
                        csb.block_row_idx(b)[: v.m_local].copy(),
                        csb.block_col_idx(b)[: v.n_local].copy(),
                        (bi, bj),
                    )
                )
            lk, ll_ = k, _torus_prev(l_, cfg.l)
            lv = assignment[(lk, ll_)]
            if lv.horiz_load:
                bi, bj, b = owner_block(lk, ll_)
                n_owner = int(csb.kernel_cols[b])
                items.append(
                    MicroItem(
                        "horizontal",
                        lv.dm_h,
                        lv.dn_h,
                        csb.block_row_idx(b)[: lv.dm_h].copy(),
                        csb.block_col_idx(b)[n_owner - lv.dn_h :].copy(),
                        (bi, bj),
                    )
                )
            uk, ul = _torus_prev(k, cfg.k), l_
            uv = assignment[(uk, ul)]
            if uv.vert_load:
                bi, bj, b = owner_block(uk, ul)
                m_owner = int(csb.kernel_rows[b])
                items.append(
                    MicroItem(
                        "vertical",
                        uv.dm_v,
                        uv.dn_v,
                        csb.block_row_idx(b)[m_owner - uv.dm_v :].copy(),
                        csb.block_col_idx(b)[: uv.dn_v].copy(),
                        (bi, bj),
                    )
                )
            out[(k, l_)] = tuple(items)
    return out


def compile_micro(csb: CsbMatrix, cfg: EngineConfig) -> MicroProgram:
    """Schedule every block iteration, relaxing the margin in P*Q steps."""
    csb.validate()
    iters_v = math.ceil(csb.grid_rows / cfg.k)
    iters_h = math.ceil(csb.grid_cols / cfg.l)
    iterations: list[IterationSchedule] = []
    for i in range(iters_v):
        for j in range(iters_h):
            window = analyze_iteration(csb, cfg, i, j)
            margin = _margin_floor(window, cfg)
            while True:
                sat, assignment = solve_partition(window, cfg, margin)
                if sat:
                    break
                margin += cfg.p * cfg.q
            items = _emit_items(csb, cfg, window, assignment)
            iterations.append(IterationSchedule(i, j, margin, assignment, items))
    return MicroProgram(
        cfg=cfg,
        rows=csb.rows,
        cols=csb.cols,
        block_rows=csb.block_shape.block_rows,
        block_cols=csb.block_shape.block_cols,
        iters_v=iters_v,
        iters_h=iters_h,
        iterations=tuple(iterations),
    )


def check_cover(prog: MicroProgram, csb: CsbMatrix) -> list[str]:
    """Brute-force check that the program covers each kernel cell once."""
    counts = {
        b: np.zeros((int(csb.kernel_rows[b]), int(csb.kernel_cols[b])), dtype=np.int64)
        for b in range(csb.block_count)
    }
    bad: list[str] = []
    for sched in prog.iterations:
        for items in sched.items.values():
            for item in items:
                b = csb.block_at(*item.origin)
                kr = csb.block_row_idx(b)
                kc = csb.block_col_idx(b)
                rpos = np.searchsorted(kr, item.row_idx)
                cpos = np.searchsorted(kc, item.col_idx)
                if (
                    np.any(rpos >= len(kr))
                    or np.any(cpos >= len(kc))
                    or not np.array_equal(kr[np.minimum(rpos, max(len(kr) - 1, 0))], item.row_idx)
                    or not np.array_equal(kc[np.minimum(cpos, max(len(kc) - 1, 0))], item.col_idx)
                ):
                    bad.append(f"block {item.origin}: item indices not in the kernel")
                    continue
                counts[b][np.ix_(rpos, cpos)] += 1
    for b, cnt in counts.items():
        if cnt.size and not np.all(cnt == 1):
            bi, bj = divmod(b, csb.grid_cols)
            bad.append(f"block ({bi},{bj}): kernel cells covered {cnt.min()}..{cnt.max()} times")
    return bad


_SHARING_TAG = {"local": "local", "horizontal": "horiz", "vertical": "vert"}


def format_micro(prog: MicroProgram) -> str:
    """Line-oriented listing, one item per line, for inspection and goldens."""
    lines = []
    for sched in prog.iterations:
        for k in range(1, prog.cfg.k + 1):
            for l_ in range(1, prog.cfg.l + 1):
                for item in sched.items[(k, l_)]:
                    rows = ",".join(str(int(r)) for r in item.row_idx)
                    cols = ",".join(str(int(c)) for c in item.col_idx)
                    lines.append(
                        f"iter {sched.i} {sched.j} | group {k} {l_} | "
                        f"{_SHARING_TAG[item.sharing]} {item.trip_rows}x{item.trip_cols} | "
                        f"rows={rows} | cols={cols}"
                    )
    return "\n".join(lines) + "\n"
