"""CSB: compressed structured block sparsity, pruning, compilation, simulation."""

from .format import (
    BlockShape,
    CsbMatrix,
    csb_mvm,
    csr_index_count,
    decode,
    deserialize,
    encode,
    load,
    nio,
    save,
    serialize,
)
from .pruning import (
    PruneConfig,
    PruneReport,
    SgdConfig,
    SyntheticTask,
    eval_loss,
    make_task,
    progressive_prune,
    project_csb,
)
from .dataflow import (
    CellGraph,
    MacroProgram,
    build_cell_graph,
    compile_macro,
    evaluate_cell,
    execute_macro,
)
from .scheduler import (
    EngineConfig,
    MicroProgram,
    analyze_iteration,
    compile_micro,
    solve_partition,
    validate_partition,
)
from .engine import SimResult, simulate_mvm, simulate_rnn, utilization_report

__all__ = [
    "BlockShape",
    "CsbMatrix",
    "csb_mvm",
    "csr_index_count",
    "decode",
    "deserialize",
    "encode",
    "load",
    "nio",
    "save",
    "serialize",
    "PruneConfig",
    "PruneReport",
    "SgdConfig",
    "SyntheticTask",
    "eval_loss",
    "make_task",
    "progressive_prune",
    "project_csb",
    "CellGraph",
    "MacroProgram",
    "build_cell_graph",
    "compile_macro",
    "evaluate_cell",
    "execute_macro",
    "EngineConfig",
    "MicroProgram",
    "analyze_iteration",
    "compile_micro",
    "solve_partition",
    "validate_partition",
    "SimResult",
    "simulate_mvm",
    "simulate_rnn",
    "utilization_report",
]

__version__ = "0.1.0"
