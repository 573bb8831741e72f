"""ADMM-based CSB pruning on a synthetic teacher-student regression task.

The projection step (row pruning per block-column, then column pruning per
block-row) forces a matrix onto the CSB sparsity pattern for a given prune
fraction.  Alternating SGD on the augmented loss with that projection, coupled
through a dual variable, trains a model that is simultaneously accurate and
CSB-patterned.  A progressive search then pushes the prune fraction as high
as it can go while a validation-loss target keeps passing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, InfeasibleTargetError, TrainingDivergedError
from .format import BlockShape, CsbMatrix, encode

__all__ = [
    "SgdConfig",
    "PruneConfig",
    "SyntheticTask",
    "AdmmState",
    "RoundRecord",
    "PruneReport",
    "make_task",
    "pruned_row_segments",
    "pruned_col_segments",
    "row_prune",
    "column_prune",
    "project_csb",
    "data_loss_grad",
    "admm_loss_grad",
    "eval_loss",
    "train_baseline",
    "sgd_epoch",
    "admm_round",
    "run_progressive",
    "progressive_prune",
]


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    batch_size: int = 256  # clamped to the training-set size
    steps_per_epoch: int = 16


@dataclass(frozen=True)
class PruneConfig:
    block_shape: BlockShape = field(default_factory=lambda: BlockShape(8, 8))
    init_prune_fraction: float = 0.3
    init_step: float = 0.2
    target_loss: float | None = None
    target_loss_factor: float = 1.1
    epochs_per_round: int = 100
    rho: float = 2.0
    sgd: SgdConfig = field(default_factory=SgdConfig)
    max_fraction: float = 0.99
    max_rounds: int = 100

    def __post_init__(self):
        if not (0.0 <= self.init_prune_fraction < self.max_fraction < 1.0):
            raise ConfigError(
                "need 0 <= init_prune_fraction < max_fraction < 1, got "
                f"{self.init_prune_fraction} / {self.max_fraction}"
            )
        if self.init_step <= 0.0:
            raise ConfigError("init_step must be > 0")
        if self.rho < 0.0:
            raise ConfigError("rho must be >= 0")
        if self.target_loss is None and self.target_loss_factor <= 0.0:
            raise ConfigError("target_loss_factor must be > 0")


@dataclass(frozen=True)
class SyntheticTask:
    """Regression task y = teacher . x + noise, regenerated from one seed."""

    teacher: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    noise_sigma: float
    seed: int


@dataclass(frozen=True)
class AdmmState:
    w_star: np.ndarray
    z: np.ndarray
    u: np.ndarray
    epoch: int = 0


@dataclass(frozen=True)
class RoundRecord:
    fraction: float
    step: float
    loss: float
    passed: bool


@dataclass(frozen=True)
class PruneReport:
    final_fraction: float
    compression_ratio: float
    rounds: tuple[RoundRecord, ...]
    model: CsbMatrix
    baseline_loss: float
    target_loss: float
    final_loss: float


def make_task(
    seed: int,
    input_dim: int,
    output_dim: int,
    noise_sigma: float = 0.01,
    n_train: int = 256,
    n_val: int = 128,
    teacher: np.ndarray | None = None,
    teacher_prune: tuple[BlockShape, float] | None = None,
) -> SyntheticTask:
    """Draw a teacher matrix and sample sets; fully determined by ``seed``.

    ``teacher_prune=(shape, fraction)`` projects the drawn teacher onto the
    CSB pattern first, so the optimum itself is representable at that
    fraction.  Bias is fixed at zero.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A5C]))
    if teacher is None:
        teacher = rng.standard_normal((output_dim, input_dim)) / math.sqrt(input_dim)
    else:
        teacher = np.asarray(teacher, dtype=np.float64)
    if teacher_prune is not None:
        shape, fraction = teacher_prune
        teacher = project_csb(teacher, shape, fraction)
    x_train = rng.standard_normal((n_train, input_dim))
    y_train = x_train @ teacher.T + noise_sigma * rng.standard_normal((n_train, output_dim))
    x_val = rng.standard_normal((n_val, input_dim))
    y_val = x_val @ teacher.T + noise_sigma * rng.standard_normal((n_val, output_dim))
    return SyntheticTask(teacher, x_train, y_train, x_val, y_val, noise_sigma, seed)


# ---------------------------------------------------------------------------
# CSB projection
# ---------------------------------------------------------------------------


def pruned_row_segments(block_column: np.ndarray, p: float) -> np.ndarray:
    """Indices of the floor(p * count) weakest row segments of a block-column.

    Every row of the slice is one in-block row segment; segments are ranked
    by l2 norm across the whole block-column, ties broken by pruning the
    higher index first.  Returns the selected indices, sorted.
    """
    count = block_column.shape[0]
    k = int(p * count)
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    norms = np.einsum("ij,ij->i", block_column, block_column)
    order = np.lexsort((-np.arange(count), norms))
    return np.sort(order[:k])


def pruned_col_segments(block_row: np.ndarray, p: float) -> np.ndarray:
    """Transpose-dual of :func:`pruned_row_segments` over column segments."""
    return pruned_row_segments(block_row.T, p)


def row_prune(block_column: np.ndarray, p: float) -> np.ndarray:
    out = np.array(block_column, dtype=np.float64)
    out[pruned_row_segments(out, p), :] = 0.0
    return out


def column_prune(block_row: np.ndarray, p: float) -> np.ndarray:
    out = np.array(block_row, dtype=np.float64)
    out[:, pruned_col_segments(out, p)] = 0.0
    return out


def per_dimension_rate(target_fraction: float) -> float:
    """Per-dimension prune rate that compounds to the target fraction."""
    if not (0.0 <= target_fraction < 1.0):
        raise ConfigError(f"prune fraction must be in [0, 1), got {target_fraction}")
    return 1.0 - math.sqrt(1.0 - target_fraction)


def project_csb(w: np.ndarray, shape: BlockShape, target_fraction: float) -> np.ndarray:
    """Euclidean projection of ``w`` onto the CSB pattern.

    Rows are pruned per block-column, then columns per block-row on the
    row-pruned result, each at the per-dimension rate.  The output is
    CSB-patterned with a kept-value fraction of about 1 - target_fraction
    (floor rounding per dimension) and the operator is idempotent: already
    zeroed segments have zero norm and are re-selected first.
    """
    p = per_dimension_rate(target_fraction)
    w = np.asarray(w, dtype=np.float64)
    orig_rows, orig_cols = w.shape
    prows, pcols = shape.padded(orig_rows, orig_cols)
    out = np.zeros((prows, pcols))
    out[:orig_rows, :orig_cols] = w
    bn = shape.block_cols
    for j in range(pcols // bn):
        out[:, j * bn : (j + 1) * bn] = row_prune(out[:, j * bn : (j + 1) * bn], p)
    bm = shape.block_rows
    for i in range(prows // bm):
        out[i * bm : (i + 1) * bm, :] = column_prune(out[i * bm : (i + 1) * bm, :], p)
    return out[:orig_rows, :orig_cols]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def data_loss_grad(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over a batch and its analytic gradient.

    loss = mean_s ||w x_s - y_s||^2,  grad = (2/batch) sum_s (w x_s - y_s) x_s^T
    """
    batch = x.shape[0]
    resid = w @ x.T - y.T
    loss = float(np.sum(resid * resid)) / batch
    grad = (2.0 / batch) * (resid @ x)
    return loss, grad


def admm_loss_grad(
    w: np.ndarray, x: np.ndarray, y: np.ndarray, z: np.ndarray, u: np.ndarray, rho: float
) -> tuple[float, np.ndarray]:
    """Augmented objective f(w) + (rho/2)||w - z + u||_F^2 and its gradient."""
    loss, grad = data_loss_grad(w, x, y)
    if rho != 0.0:
        gap = w - z + u
        loss += 0.5 * rho * float(np.sum(gap * gap))
        grad = grad + rho * gap
    return loss, grad


def eval_loss(z: np.ndarray, task: SyntheticTask) -> float:
    """Validation mean squared error of a weight matrix, deterministic."""
    resid = task.x_val @ z.T - task.y_val
    return float(np.sum(resid * resid)) / task.x_val.shape[0]


def _sgd_steps(
    w: np.ndarray,
    task: SyntheticTask,
    cfg: PruneConfig,
    rng: np.random.Generator,
    z: np.ndarray | None,
    u: np.ndarray | None,
    steps: int,
    step_base: int,
) -> np.ndarray:
    sgd = cfg.sgd
    n = task.x_train.shape[0]
    batch = min(sgd.batch_size, n)
    w = np.array(w)
    for s in range(steps):
        idx = rng.choice(n, size=batch, replace=False)
        xb, yb = task.x_train[idx], task.y_train[idx]
        if z is None:
            loss, grad = data_loss_grad(w, xb, yb)
        else:
            loss, grad = admm_loss_grad(w, xb, yb, z, u, cfg.rho)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step_base + s)
        w -= sgd.learning_rate * grad
    return w


def train_baseline(task: SyntheticTask, cfg: PruneConfig, rng: np.random.Generator) -> np.ndarray:
    """Plain SGD on the data loss; the dense starting point of the flow."""
    out_dim, in_dim = task.teacher.shape
    w = 0.01 * rng.standard_normal((out_dim, in_dim))
    total = cfg.epochs_per_round * cfg.sgd.steps_per_epoch
    return _sgd_steps(w, task, cfg, rng, None, None, total, 0)


def sgd_epoch(
    state: AdmmState, task: SyntheticTask, cfg: PruneConfig, rng: np.random.Generator
) -> AdmmState:
    """One epoch of SGD on the augmented loss; z and u stay fixed."""
    base = state.epoch * cfg.sgd.steps_per_epoch
    w = _sgd_steps(
        state.w_star, task, cfg, rng, state.z, state.u, cfg.sgd.steps_per_epoch, base
    )
    return replace(state, w_star=w, epoch=state.epoch + 1)


def admm_round(
    state: AdmmState,
    task: SyntheticTask,
    cfg: PruneConfig,
    fraction: float,
    rng: np.random.Generator,
) -> AdmmState:
    """epochs_per_round alternations of SGD, projection and dual update."""
    for _ in range(cfg.epochs_per_round):
        state = sgd_epoch(state, task, cfg, rng)
        z = project_csb(state.w_star + state.u, cfg.block_shape, fraction)
        u = state.u + state.w_star - z
        state = replace(state, z=z, u=u)
    return state


# ---------------------------------------------------------------------------
# Progressive rate search
# ---------------------------------------------------------------------------


def run_progressive(round_fn, cfg: PruneConfig, target: float):
    """Drive the progressive prune-rate search against ``round_fn``.

    ``round_fn(fraction)`` trains one round at the given fraction and returns
    ``(payload, loss)``.  A round passes when loss <= target.  On a failure
    the step halves and the fraction backs off by the new step; once a
    failure (or a clamp at the maximum fraction) has been seen, every further
    pass halves the step again before advancing.  The search stops after a
    passing round once the step has shrunk to a quarter of its initial value,
    returning the trace, the last passing fraction and its payload.
    """
    fraction = cfg.init_prune_fraction
    step = cfg.init_step
    halving = False
    rounds: list[RoundRecord] = []
    last_pass: tuple[float, object, float] | None = None
    while True:
        payload, loss = round_fn(fraction)
        passed = loss <= target
        rounds.append(RoundRecord(fraction, step, loss, passed))
        if passed:
            last_pass = (fraction, payload, loss)
            if halving:
                step /= 2.0
            fraction += step
            if fraction > cfg.max_fraction:
                # The ceiling acts like discovering the upper limit: stop
                # advancing and let the step shrink toward termination.
                fraction = cfg.max_fraction
                halving = True
        else:
            halving = True
            step /= 2.0
            fraction = max(0.0, fraction - step)
        if passed and step <= cfg.init_step / 4.0:
            return rounds, last_pass
        if len(rounds) >= cfg.max_rounds:
            raise InfeasibleTargetError(
                f"no terminating pass within {cfg.max_rounds} rounds "
                f"(last loss {loss:.6g} vs target {target:.6g})"
            )


def progressive_prune(task: SyntheticTask, cfg: PruneConfig) -> PruneReport:
    """Full flow: dense baseline, then ADMM rounds under progressive search.

    The loss target is ``cfg.target_loss`` when given, otherwise
    ``cfg.target_loss_factor`` times the trained dense baseline's validation
    loss.  Raises :class:`InfeasibleTargetError` if the baseline itself
    misses the target.
    """
    rng = np.random.default_rng(np.random.SeedSequence([task.seed, 0x5D]))
    baseline = train_baseline(task, cfg, rng)
    baseline_loss = eval_loss(baseline, task)
    target = cfg.target_loss if cfg.target_loss is not None else (
        cfg.target_loss_factor * baseline_loss
    )
    if not math.isfinite(baseline_loss) or baseline_loss > target:
        raise InfeasibleTargetError(
            f"dense baseline loss {baseline_loss:.6g} misses target {target:.6g}"
        )
    state = AdmmState(
        w_star=baseline.copy(), z=baseline.copy(), u=np.zeros_like(baseline)
    )

    def round_fn(fraction: float):
        nonlocal state
        state = admm_round(state, task, cfg, fraction, rng)
        return state.z, eval_loss(state.z, task)

    rounds, last_pass = run_progressive(round_fn, cfg, target)
    final_fraction, final_z, final_loss = last_pass
    return PruneReport(
        final_fraction=final_fraction,
        compression_ratio=1.0 / (1.0 - final_fraction),
        rounds=tuple(rounds),
        model=encode(final_z, cfg.block_shape),
        baseline_loss=baseline_loss,
        target_loss=target,
        final_loss=final_loss,
    )
