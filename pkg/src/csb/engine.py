"""Cycle-level simulator of the CSB engine.

Timing model: a PEGroup retires one P x Q tile per cycle, so an r x c item
costs ceil(r/P) * ceil(c/Q) cycles; a group's cycles in a block iteration are
the sum over its items, the iteration lasts as long as its slowest group, and
total cycles add up over iterations.  Horizontal reduction, output reordering
and buffer fills are free: the metric isolates PE pipeline utilization.

Functional model: local and horizontal items accumulate into the executing
group's accumulator at the owning block's row positions (horizontal inputs
arrive through the neighbor port, which costs nothing here); vertical items
accumulate into the owning upper neighbor's accumulator through the dedicated
merge path.  When a block-row completes, the accumulators reduce horizontally
into the output vector.  Every kernel cell must be multiplied exactly once;
a coverage counter enforces this against mismatched programs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dataflow as df
from .errors import LinkError, ProgramMismatchError, ShapeError
from .format import CsbMatrix
from .scheduler import EngineConfig, MicroProgram, _torus_prev

__all__ = [
    "CycleStats",
    "SimResult",
    "RnnSimResult",
    "simulate_mvm",
    "simulate_rnn",
    "CSV_FIELDS",
    "utilization_report",
]


@dataclass
class PEGroupState:
    """Per-group simulator state for one block-row residency.

    ``accum`` collects partial output sums at in-block row addresses until
    the block-row completes and reduces horizontally.  Input segments live
    in per-column buffers (one per grid column, shared down the column and
    readable by the right torus neighbor for horizontal shares).
    """

    accum: np.ndarray


@dataclass
class CycleStats:
    total_cycles: int
    effective_macs: int
    per_group_busy: np.ndarray  # (K, L) busy-cycle counts
    peak_pe_count: int

    def merge(self, other: "CycleStats") -> "CycleStats":
        return CycleStats(
            self.total_cycles + other.total_cycles,
            self.effective_macs + other.effective_macs,
            self.per_group_busy + other.per_group_busy,
            self.peak_pe_count,
        )


@dataclass
class SimResult:
    output: np.ndarray
    stats: CycleStats
    utilization: float


@dataclass
class RnnSimResult:
    h_sequence: np.ndarray
    final_state: tuple[np.ndarray, np.ndarray | None]
    stats: CycleStats
    utilization: float


def _utilization(stats: CycleStats) -> float:
    if stats.effective_macs == 0 or stats.total_cycles == 0:
        return 0.0
    return stats.effective_macs / (stats.total_cycles * stats.peak_pe_count)


def _item_cycles(item, cfg: EngineConfig) -> int:
    return math.ceil(item.trip_rows / cfg.p) * math.ceil(item.trip_cols / cfg.q)


def _kernel_positions(kept: np.ndarray, wanted: np.ndarray, block) -> np.ndarray:
    """Positions of ``wanted`` indices inside the block's kept-index list."""
    pos = np.searchsorted(kept, wanted)
    if np.any(pos >= len(kept)) or not np.array_equal(kept[np.minimum(pos, len(kept) - 1)], wanted):
        raise ProgramMismatchError(f"item indices not present in block {block}")
    return pos


def simulate_mvm(
    prog: MicroProgram,
    csb: CsbMatrix,
    x: np.ndarray,
    cfg: EngineConfig | None = None,
    trace: list | None = None,
) -> SimResult:
    """Run one matrix-vector product through the engine.

    ``trace``, when a list, receives one dict per block iteration with the
    per-group cycle counts.  Raises :class:`ProgramMismatchError` when the
    program does not belong to the matrix (shape or coverage disagreement).
    """
    if cfg is not None and cfg != prog.cfg:
        raise ProgramMismatchError("engine config differs from the compiled program")
    cfg = prog.cfg
    bs = csb.block_shape
    if (
        prog.rows != csb.rows
        or prog.cols != csb.cols
        or prog.block_rows != bs.block_rows
        or prog.block_cols != bs.block_cols
    ):
        raise ProgramMismatchError("program was compiled for a different matrix shape")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) != csb.cols:
        raise ShapeError(f"input length {x.shape} does not match cols={csb.cols}")

    covered = {
        b: np.zeros((int(csb.kernel_rows[b]), int(csb.kernel_cols[b])), dtype=np.int64)
        for b in range(csb.block_count)
    }
    y = np.zeros(csb.rows)
    busy = np.zeros((cfg.k, cfg.l), dtype=np.int64)
    total_cycles = 0
    macs = 0
    sched_ix = 0
    for i in range(prog.iters_v):
        groups = {
            (k, l_): PEGroupState(np.zeros(bs.block_rows))
            for k in range(1, cfg.k + 1)
            for l_ in range(1, cfg.l + 1)
        }
        for j in range(prog.iters_h):
            sched = prog.iterations[sched_ix]
            sched_ix += 1
            if (sched.i, sched.j) != (i, j):
                raise ProgramMismatchError("iterations out of order in program")
            # block-neuron buffers: one input segment per grid column,
            # shared down the column, neighbor-readable for horizontal items
            col_buf = {}
            for l_ in range(1, cfg.l + 1):
                bc = j * cfg.l + l_ - 1
                col_buf[bc] = (
                    x[bc * bs.block_cols : (bc + 1) * bs.block_cols]
                    if bc < csb.grid_cols
                    else np.zeros(bs.block_cols)
                )
            duration = 0
            group_cycles = {}
            for (k, l_), items in sched.items.items():
                cycles = 0
                for item in items:
                    b = csb.block_at(*item.origin)
                    rpos = _kernel_positions(csb.block_row_idx(b), item.row_idx, item.origin)
                    cpos = _kernel_positions(csb.block_col_idx(b), item.col_idx, item.origin)
                    kern = csb.block_kernel(b)[np.ix_(rpos, cpos)]
                    covered[b][np.ix_(rpos, cpos)] += 1
                    xseg = col_buf[item.origin[1]][item.col_idx]
                    part = kern @ xseg
                    target = (k, l_)
                    if item.sharing == "vertical":
                        target = (_torus_prev(k, cfg.k), l_)
                    groups[target].accum[item.row_idx] += part
                    cycles += _item_cycles(item, cfg)
                    macs += item.trip_rows * item.trip_cols
                busy[k - 1, l_ - 1] += cycles
                group_cycles[f"{k},{l_}"] = cycles
                duration = max(duration, cycles)
            total_cycles += duration
            if trace is not None:
                trace.append(
                    {
                        "i": i,
                        "j": j,
                        "margin": sched.margin,
                        "duration": duration,
                        "group_cycles": group_cycles,
                    }
                )
        for k in range(1, cfg.k + 1):
            block_row = i * cfg.k + k - 1
            if block_row >= csb.grid_rows:
                continue
            seg = sum(groups[(k, l_)].accum for l_ in range(1, cfg.l + 1))
            y[block_row * bs.block_rows : (block_row + 1) * bs.block_rows] += seg
    for b, cnt in covered.items():
        if cnt.size and not np.all(cnt == 1):
            raise ProgramMismatchError(
                f"kernel coverage broken in block {divmod(b, csb.grid_cols)}"
            )
    stats = CycleStats(total_cycles, macs, busy, cfg.peak_pe_count)
    return SimResult(y, stats, _utilization(stats))


def simulate_rnn(
    macro: df.MacroProgram,
    micro: dict[str, MicroProgram],
    weights: dict[str, CsbMatrix],
    x_sequence: np.ndarray,
    cfg: EngineConfig,
    h0: np.ndarray | None = None,
    c0: np.ndarray | None = None,
    biases: dict[str, np.ndarray] | None = None,
) -> RnnSimResult:
    """Execute a macro program word by word on the simulated engine.

    Engine sections run :func:`simulate_mvm` with the slot's micro program;
    element-wise sections cost ceil(count / ew_unit_width) cycles.  A word
    retires when its slowest active section finishes.
    """
    graph = macro.graph
    nodes = {n.nid: n for n in graph.nodes}
    for slot in graph.weights:
        if slot not in weights:
            raise LinkError(f"weight slot {slot!r} is not bound")
        if slot not in micro:
            raise LinkError(f"no micro program for weight slot {slot!r}")
    h = np.zeros(graph.hidden_dim) if h0 is None else np.asarray(h0, dtype=np.float64)
    c = None
    if graph.uses_cell_state:
        c = np.zeros(graph.hidden_dim) if c0 is None else np.asarray(c0, dtype=np.float64)
    stats = CycleStats(0, 0, np.zeros((cfg.k, cfg.l), dtype=np.int64), cfg.peak_pe_count)
    hs = []
    for x in np.asarray(x_sequence, dtype=np.float64):
        env = df._input_env(graph, biases, x, h, c)
        for word in macro.words:
            word_cycles = 0
            for kind, sec in word.sections.items():
                if not sec.active:
                    continue
                node = nodes[sec.node]
                if kind is df.Prim.CSB_MVM:
                    w = weights[node.weight]
                    vec = env[node.operands[0].source]
                    xp = np.zeros(w.cols)
                    xp[: len(vec)] = vec
                    res = simulate_mvm(micro[node.weight], w, xp)
                    env[f"node:{node.nid}"] = res.output[: graph.hidden_dim]
                    stats.effective_macs += res.stats.effective_macs
                    stats.per_group_busy += res.stats.per_group_busy
                    word_cycles = max(word_cycles, res.stats.total_cycles)
                else:
                    env[f"node:{node.nid}"] = df._eval_node(
                        node, env, weights, graph.hidden_dim
                    )
                    word_cycles = max(
                        word_cycles, math.ceil(sec.count / cfg.ew_unit_width)
                    )
            stats.total_cycles += word_cycles
        h = env[f"node:{graph.outputs['h']}"]
        if graph.uses_cell_state:
            c = env[f"node:{graph.outputs['c']}"]
        hs.append(h)
    return RnnSimResult(np.array(hs), (h, c), stats, _utilization(stats))


CSV_FIELDS = (
    "matrix_id",
    "rows",
    "cols",
    "block",
    "mode",
    "prune_ratio",
    "nnz",
    "cycles",
    "utilization",
    "nio",
)


def utilization_report(rows: list[dict]) -> dict[str, dict[str, float]]:
    """Arithmetic per-mode means of utilization, cycles and NIO."""
    if not rows:
        raise ShapeError("utilization report needs at least one result row")
    by_mode: dict[str, list[dict]] = {}
    for row in rows:
        by_mode.setdefault(row["mode"], []).append(row)
    return {
        mode: {
            "count": float(len(group)),
            "utilization": float(np.mean([r["utilization"] for r in group])),
            "cycles": float(np.mean([r["cycles"] for r in group])),
            "nio": float(np.mean([r["nio"] for r in group])),
        }
        for mode, group in sorted(by_mode.items())
    }
