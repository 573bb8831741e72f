"""RNN cells as dataflow graphs and their VLIW macro-instruction programs.

A cell (LSTM or GRU) is a DAG over five arithmetic primitives: the CSB
matrix-vector engine, element-wise multiply and add, sigmoid and tanh.  The
macro compiler packs the DAG into very long instruction words by ASAP list
scheduling: one hardware unit of each kind, one node per unit section per
word, and a word is a barrier (it retires when its slowest section finishes).
The functional interpreter executes a program in double precision and is the
golden model the cycle-level engine simulator is compared against.

The unit set has no subtract, so (1 - z) is realized as an add of a
constant-one vector with a sign-negated operand.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import LinkError, ShapeError
from .format import CsbMatrix, csb_mvm

__all__ = [
    "Prim",
    "Operand",
    "Node",
    "CellGraph",
    "build_cell_graph",
    "evaluate_cell",
    "Section",
    "MacroInstruction",
    "MacroProgram",
    "compile_macro",
    "bind_weights",
    "execute_macro",
    "format_macro",
]


class Prim(enum.Enum):
    CSB_MVM = "mvm"
    EW_MUL = "mul"
    EW_ADD = "add"
    SIGMOID = "sig"
    TANH = "tanh"


@dataclass(frozen=True)
class Operand:
    """Routing descriptor: where a primitive reads one input vector.

    ``source`` is ``input:<x|h_prev|c_prev>``, ``node:<id>``, ``bias:<name>``
    or ``const:ones``; ``negate`` flips the sign on the way in.
    """

    source: str
    negate: bool = False

    def __str__(self) -> str:
        return ("-" if self.negate else "") + self.source


@dataclass(frozen=True)
class Node:
    nid: str
    kind: Prim
    operands: tuple[Operand, ...]
    weight: str | None = None  # CSB_MVM only: the weight slot it consumes


@dataclass(frozen=True)
class CellGraph:
    """Dataflow DAG of one cell step; recurrence enters only via the inputs."""

    cell: str
    input_dim: int
    hidden_dim: int
    nodes: tuple[Node, ...]  # topological order
    outputs: dict[str, str]  # "h" -> node id, optionally "c" -> node id
    weights: dict[str, tuple[int, int]]  # slot -> (rows, cols)
    biases: tuple[str, ...]

    @property
    def uses_cell_state(self) -> bool:
        return "c" in self.outputs


def _gate(nodes, name, wx, uh, extra_in=None, act=Prim.SIGMOID):
    nodes.append(Node(f"{name}_x", Prim.CSB_MVM, (Operand("input:x"),), weight=wx))
    rec_src = extra_in if extra_in is not None else "input:h_prev"
    nodes.append(Node(f"{name}_h", Prim.CSB_MVM, (Operand(rec_src),), weight=uh))
    nodes.append(
        Node(f"{name}_s", Prim.EW_ADD, (Operand(f"node:{name}_x"), Operand(f"node:{name}_h")))
    )
    nodes.append(
        Node(f"{name}_b", Prim.EW_ADD, (Operand(f"node:{name}_s"), Operand(f"bias:b_{name}")))
    )
    nodes.append(Node(name, act, (Operand(f"node:{name}_b"),)))


def build_cell_graph(cell: str, input_dim: int, hidden_dim: int) -> CellGraph:
    """Standard GRU or LSTM step as a primitive DAG.

    GRU: z = sig(Wz x + Uz h + bz), r = sig(Wr x + Ur h + br),
    hc = tanh(Wh x + Uh (r*h) + bh), h' = (1-z)*h + z*hc.
    LSTM: i, f, o sigmoid gates and tanh g, c' = f*c + i*g,
    h' = o * tanh(c').
    """
    if input_dim < 1 or hidden_dim < 1:
        raise ShapeError("cell dimensions must be >= 1")
    nodes: list[Node] = []
    if cell == "gru":
        _gate(nodes, "z", "w_z", "u_z")
        _gate(nodes, "r", "w_r", "u_r")
        nodes.append(Node("rh", Prim.EW_MUL, (Operand("node:r"), Operand("input:h_prev"))))
        _gate(nodes, "c", "w_c", "u_c", extra_in="node:rh", act=Prim.TANH)
        nodes.append(Node("omz", Prim.EW_ADD, (Operand("const:ones"), Operand("node:z", negate=True))))
        nodes.append(Node("keep", Prim.EW_MUL, (Operand("node:omz"), Operand("input:h_prev"))))
        nodes.append(Node("upd", Prim.EW_MUL, (Operand("node:z"), Operand("node:c"))))
        nodes.append(Node("h", Prim.EW_ADD, (Operand("node:keep"), Operand("node:upd"))))
        outputs = {"h": "h"}
        slots = ["w_z", "u_z", "w_r", "u_r", "w_c", "u_c"]
        biases = ("b_z", "b_r", "b_c")
    elif cell == "lstm":
        for g in ("i", "f", "o"):
            _gate(nodes, g, f"w_{g}", f"u_{g}")
        _gate(nodes, "g", "w_g", "u_g", act=Prim.TANH)
        nodes.append(Node("fc", Prim.EW_MUL, (Operand("node:f"), Operand("input:c_prev"))))
        nodes.append(Node("ig", Prim.EW_MUL, (Operand("node:i"), Operand("node:g"))))
        nodes.append(Node("c", Prim.EW_ADD, (Operand("node:fc"), Operand("node:ig"))))
        nodes.append(Node("tc", Prim.TANH, (Operand("node:c"),)))
        nodes.append(Node("h", Prim.EW_MUL, (Operand("node:o"), Operand("node:tc"))))
        outputs = {"h": "h", "c": "c"}
        slots = ["w_i", "u_i", "w_f", "u_f", "w_o", "u_o", "w_g", "u_g"]
        biases = ("b_i", "b_f", "b_o", "b_g")
    else:
        raise ShapeError(f"unsupported cell type {cell!r} (supported: gru, lstm)")
    weights = {
        s: (hidden_dim, input_dim if s.startswith("w_") else hidden_dim) for s in slots
    }
    return CellGraph(cell, input_dim, hidden_dim, tuple(nodes), outputs, weights, biases)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-v))


def _mvm_fitted(w: CsbMatrix, v: np.ndarray, out_dim: int) -> np.ndarray:
    """csb_mvm with zero padding of the input and stripping of the output."""
    if len(v) > w.cols:
        raise ShapeError(f"operand length {len(v)} exceeds matrix cols {w.cols}")
    xp = np.zeros(w.cols)
    xp[: len(v)] = v
    return csb_mvm(w, xp)[:out_dim]


def _resolve(source: str, env: dict[str, np.ndarray]) -> np.ndarray:
    try:
        return env[source]
    except KeyError:
        raise LinkError(f"unbound operand source {source!r}") from None


def _eval_node(node: Node, env, weights, hidden_dim) -> np.ndarray:
    if node.kind is Prim.CSB_MVM:
        if node.weight not in weights:
            raise LinkError(f"weight slot {node.weight!r} is not bound")
        return _mvm_fitted(weights[node.weight], _resolve(node.operands[0].source, env), hidden_dim)
    ops = [
        (-1.0 if o.negate else 1.0) * _resolve(o.source, env) for o in node.operands
    ]
    if node.kind is Prim.EW_ADD:
        return ops[0] + ops[1]
    if node.kind is Prim.EW_MUL:
        return ops[0] * ops[1]
    if node.kind is Prim.SIGMOID:
        return _sigmoid(ops[0])
    return np.tanh(ops[0])


def _input_env(graph, biases, x, h_prev, c_prev):
    env = {
        "input:x": np.asarray(x, dtype=np.float64),
        "input:h_prev": np.asarray(h_prev, dtype=np.float64),
        "const:ones": np.ones(graph.hidden_dim),
    }
    if graph.uses_cell_state:
        env["input:c_prev"] = np.asarray(c_prev, dtype=np.float64)
    for name in graph.biases:
        vec = None if biases is None else biases.get(name)
        env[f"bias:{name}"] = np.zeros(graph.hidden_dim) if vec is None else np.asarray(vec)
    return env


def evaluate_cell(
    graph: CellGraph,
    weights: dict[str, CsbMatrix],
    x: np.ndarray,
    h_prev: np.ndarray,
    c_prev: np.ndarray | None = None,
    biases: dict[str, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Direct topological evaluation of one cell step (no scheduling)."""
    env = _input_env(graph, biases, x, h_prev, c_prev)
    for node in graph.nodes:
        env[f"node:{node.nid}"] = _eval_node(node, env, weights, graph.hidden_dim)
    h = env[f"node:{graph.outputs['h']}"]
    c = env[f"node:{graph.outputs['c']}"] if graph.uses_cell_state else None
    return h, c


# ---------------------------------------------------------------------------
# Macro instructions
# ---------------------------------------------------------------------------


@dataclass
class Section:
    """One unit's slice of a VLIW word."""

    active: bool
    node: str | None = None
    count: int | None = None  # elements, for the element-wise units
    count_h: int | None = None  # engine block iterations, filled at bind time
    count_v: int | None = None
    dataflow_idx: int = 0  # index into the program's routing table
    buffer_addr: int = 0  # destination buffer
    memory_addr: str | None = None  # weight slot handle (engine only)


@dataclass
class MacroInstruction:
    sections: dict[Prim, Section]


@dataclass
class MacroProgram:
    graph: CellGraph
    words: list[MacroInstruction]
    routing: list[tuple[Operand, ...]]  # dataflow_idx -> operand tuple
    buffers: dict[str, int]  # source name -> buffer id
    symbols: dict[str, CsbMatrix] = field(default_factory=dict)  # bound weights

    def word_of(self, nid: str) -> int:
        for w, word in enumerate(self.words):
            for sec in word.sections.values():
                if sec.active and sec.node == nid:
                    return w
        raise KeyError(nid)


def compile_macro(graph: CellGraph, cfg=None) -> MacroProgram:
    """ASAP list scheduling of the cell DAG into VLIW words.

    Each word offers one section per unit kind; a ready node (all producers
    scheduled in strictly earlier words) takes the earliest word whose unit
    section is still free.  Word count is minimal on dependency chains.
    ``cfg`` is accepted for engine geometry but not needed until bind time.
    """
    del cfg
    buffers: dict[str, int] = {}

    def buf(name: str) -> int:
        return buffers.setdefault(name, len(buffers))

    for name in ("input:x", "input:h_prev"):
        buf(name)
    if graph.uses_cell_state:
        buf("input:c_prev")
    buf("const:ones")
    for b in graph.biases:
        buf(f"bias:{b}")

    routing: list[tuple[Operand, ...]] = []

    def route(ops: tuple[Operand, ...]) -> int:
        if ops not in routing:
            routing.append(ops)
        return routing.index(ops)

    word_of: dict[str, int] = {}
    words: list[MacroInstruction] = []
    pending = list(graph.nodes)
    while pending:
        used: set[Prim] = set()
        placed: list[Node] = []
        current = len(words)
        for node in pending:
            if node.kind in used:
                continue
            deps = [o.source[5:] for o in node.operands if o.source.startswith("node:")]
            if all(word_of.get(d, current) < current for d in deps):
                used.add(node.kind)
                placed.append(node)
                word_of[node.nid] = current
        word = MacroInstruction({kind: Section(active=False) for kind in Prim})
        for node in placed:
            sec = word.sections[node.kind]
            sec.active = True
            sec.node = node.nid
            sec.dataflow_idx = route(node.operands)
            sec.buffer_addr = buf(f"node:{node.nid}")
            if node.kind is Prim.CSB_MVM:
                sec.memory_addr = node.weight
            else:
                sec.count = graph.hidden_dim
        words.append(word)
        pending = [n for n in pending if n.nid not in word_of]
    return MacroProgram(graph, words, routing, buffers)


def bind_weights(prog: MacroProgram, weights: dict[str, CsbMatrix], cfg=None) -> MacroProgram:
    """Attach CSB matrices to the weight slots and fill engine trip counts.

    ``cfg`` (an engine config with a K x L group grid) sizes the horizontal
    and vertical block-iteration counts of each engine section.
    """
    for slot, (rows, cols) in prog.graph.weights.items():
        if slot not in weights:
            raise LinkError(f"weight slot {slot!r} is not bound")
        w = weights[slot]
        if w.orig_rows != rows or w.orig_cols != cols:
            raise ShapeError(
                f"slot {slot!r} expects {rows}x{cols}, got {w.orig_rows}x{w.orig_cols}"
            )
    prog.symbols = dict(weights)
    k = getattr(cfg, "k", 1)
    l_ = getattr(cfg, "l", 1)
    for word in prog.words:
        sec = word.sections[Prim.CSB_MVM]
        if sec.active:
            w = weights[sec.memory_addr]
            sec.count_v = math.ceil(w.grid_rows / k)
            sec.count_h = math.ceil(w.grid_cols / l_)
    return prog


def execute_macro(
    prog: MacroProgram,
    weights: dict[str, CsbMatrix],
    x_sequence: np.ndarray,
    h0: np.ndarray | None = None,
    c0: np.ndarray | None = None,
    biases: dict[str, np.ndarray] | None = None,
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray | None]]:
    """Pure functional interpretation of the word stream, double precision.

    Sections within one word never depend on each other (the scheduler keeps
    producers in earlier words), so word-internal order is irrelevant.
    Returns the h sequence and the final (h, c) state.
    """
    graph = prog.graph
    nodes = {n.nid: n for n in graph.nodes}
    h = np.zeros(graph.hidden_dim) if h0 is None else np.asarray(h0, dtype=np.float64)
    c = None
    if graph.uses_cell_state:
        c = np.zeros(graph.hidden_dim) if c0 is None else np.asarray(c0, dtype=np.float64)
    hs = []
    for x in np.asarray(x_sequence, dtype=np.float64):
        env = _input_env(graph, biases, x, h, c)
        for word in prog.words:
            for sec in word.sections.values():
                if sec.active:
                    node = nodes[sec.node]
                    env[f"node:{node.nid}"] = _eval_node(node, env, weights, graph.hidden_dim)
        h = env[f"node:{graph.outputs['h']}"]
        if graph.uses_cell_state:
            c = env[f"node:{graph.outputs['c']}"]
        hs.append(h)
    return np.array(hs), (h, c)


def format_macro(prog: MacroProgram) -> str:
    """Human-readable listing: one word per line, sections pipe-separated."""
    lines = []
    for i, word in enumerate(prog.words):
        parts = [f"word {i}"]
        for kind in Prim:
            sec = word.sections[kind]
            if not sec.active:
                parts.append(f"{kind.value}: -")
                continue
            node = next(n for n in prog.graph.nodes if n.nid == sec.node)
            srcs = ",".join(str(o) for o in node.operands)
            if kind is Prim.CSB_MVM:
                cnt = (
                    f"{sec.count_v}x{sec.count_h}" if sec.count_v is not None else "?x?"
                )
                parts.append(
                    f"{kind.value}: {sec.node} w={sec.memory_addr} src={srcs} "
                    f"dst=b{sec.buffer_addr} iters={cnt} df={sec.dataflow_idx}"
                )
            else:
                parts.append(
                    f"{kind.value}: {sec.node} src={srcs} dst=b{sec.buffer_addr} "
                    f"cnt={sec.count} df={sec.dataflow_idx}"
                )
        lines.append(" | ".join(parts))
    return "\n".join(lines) + "\n"
