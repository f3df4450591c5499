"""Losses, full-batch and frozen-blanket mini-batch trainers, gradient checking, grid search."""
from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DivergenceError
from .metrics import EvalReport, decide_labels, f1_scores
from .model import (
    ClnParams, backward, forward, forward_rows, init_for_graph, param_count, replay_rows,
)
from .numerics import make_optimizer
from .relgraph import MULTICLASS, TEST, TRAIN, VALID, RelGraph, SplitMask

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_mode: str = "full"
    batch_size: int = 256
    refresh_period: int = 1
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.9
    eps: float = 1e-8
    patience: int = 10
    metric: str = "auto"
    threshold: float = 0.5
    grid_depths: tuple = (2, 6, 10, 14, 18, 22, 26, 30)
    grid_widths: tuple = (5, 10, 20, 40)
    grid_optimizers: tuple = ("adam", "rmsprop")
    seed: int = 0

    def __post_init__(self):
        if self.batch_mode not in ("full", "mini"):
            raise ConfigError(f"batch_mode must be full or mini, got {self.batch_mode!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.refresh_period < 1:
            raise ConfigError("refresh_period must be >= 1")
        if not (self.grid_depths and self.grid_widths and self.grid_optimizers):
            raise ConfigError("grid values must be nonempty")

    def metric_for(self, head_kind: str) -> str:
        if self.metric != "auto":
            return self.metric
        return "micro" if head_kind == MULTICLASS else "macro"

    def make_optimizer(self):
        return make_optimizer(self.optimizer, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                              rho=self.rho, eps=self.eps)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_metric: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = float("-inf")
    checkpoint: str | None = None

    def to_csv(self) -> str:
        lines = ["epoch,loss,val_metric,seconds"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.loss!r},{r.val_metric!r},{r.seconds:.6f}")
        return "\n".join(lines) + "\n"

    def without_times(self) -> list:
        return [(r.epoch, r.loss, r.val_metric) for r in self.records]

    def mean_epoch_seconds(self) -> float:
        return float(np.mean([r.seconds for r in self.records])) if self.records else 0.0


def masked_loss(probs: np.ndarray, Y: np.ndarray, split: SplitMask, role: int = TRAIN,
                head_kind: str = MULTICLASS) -> float:
    """Mean cross-entropy over the entities holding ``role``."""
    sel = split.roles == role
    n = int(sel.sum())
    if n == 0:
        raise ConfigError("loss role has no entities")
    p, y = probs[sel], Y[sel]
    ll = y * np.log(np.maximum(p, LOG_FLOOR))
    if head_kind != MULTICLASS:
        ll = ll + (1.0 - y) * np.log(np.maximum(1.0 - p, LOG_FLOOR))
    return float(-ll.sum() / n)


def logit_loss(logits: np.ndarray, Y: np.ndarray, split: SplitMask, role: int = TRAIN,
               head_kind: str = MULTICLASS) -> float:
    """Unclamped cross-entropy computed from logits.

    This is the objective :func:`colnet.model.backward` differentiates; it
    agrees with :func:`masked_loss` wherever no probability hits the clamp.
    """
    sel = split.roles == role
    n = int(sel.sum())
    if n == 0:
        raise ConfigError("loss role has no entities")
    z, y = logits[sel], Y[sel]
    if head_kind == MULTICLASS:
        return float((logsumexp(z, axis=1) - (y * z).sum(axis=1)).sum() / n)
    # -[y log s(z) + (1 - y) log(1 - s(z))] = softplus(z) - y z
    return float((np.logaddexp(0.0, z) - y * z).sum() / n)


def evaluate(g: RelGraph, probs: np.ndarray, split: SplitMask, role: int = TEST,
             threshold: float = 0.5, meta: dict | None = None) -> EvalReport:
    decided = decide_labels(probs, g.head_kind, threshold)
    return f1_scores(decided, g.Y, split.roles == role, g.label_names, meta)


class _EarlyStopper:
    def __init__(self, params: ClnParams, patience: int):
        self.best = params.copy()
        self.best_metric = float("-inf")
        self.best_epoch = 0
        self.patience = patience
        self.stale = 0

    def update(self, epoch: int, metric: float, params: ClnParams) -> bool:
        """Record one epoch; return True when training should stop."""
        if metric > self.best_metric:
            self.best_metric, self.best_epoch, self.stale = metric, epoch, 0
            self.best = params.copy()
            return False
        self.stale += 1
        return self.stale >= self.patience


def _check_finite(loss: float, epoch: int) -> None:
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch=epoch)


def train_full_batch(g: RelGraph, params: ClnParams, split: SplitMask, config: TrainConfig):
    """Exact full-graph gradient descent with early stopping.

    Returns ``(best_params, TrainLog)``; ``params`` is left untouched.
    """
    params = params.copy()
    params.check_graph(g)
    rng = np.random.default_rng([config.seed, 1])
    opt = config.make_optimizer()
    metric = config.metric_for(g.head_kind)
    stopper = _EarlyStopper(params, config.patience)
    tlog = TrainLog()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        probs, cache = forward(g, params, "train", rng)
        loss = masked_loss(probs, g.Y, split, TRAIN, g.head_kind)
        _check_finite(loss, epoch)
        grads = backward(g, params, cache, split, TRAIN)
        opt.step(params.arrays, grads)
        val_probs, _ = forward(g, params, "infer")
        val = evaluate(g, val_probs, split, VALID, config.threshold).metric(metric)
        tlog.records.append(EpochRecord(epoch, loss, val, time.perf_counter() - t0))
        log.debug("epoch %d loss %.5f val %.4f", epoch, loss, val)
        if stopper.update(epoch, val, params):
            break
    tlog.best_epoch, tlog.best_metric = stopper.best_epoch, stopper.best_metric
    return stopper.best, tlog


@dataclass
class BlanketCache:
    """Infer-mode states of every entity, read as constants by mini-batch passes.

    ``states[l]`` is the full-graph state fed to layer ``l + 1``.
    """

    states: list
    staleness: int = 0

    @classmethod
    def build(cls, g: RelGraph, params: ClnParams):
        probs, cache = forward(g, params, "infer")
        return cls([u if k == 0 else u.copy() for k, u in enumerate(cache.U)]), probs

    def write_rows(self, rows: np.ndarray, states: list) -> None:
        for l in range(1, len(self.states)):
            self.states[l][rows] = states[l]


def train_mini_batch(g: RelGraph, params: ClnParams, split: SplitMask, config: TrainConfig):
    """Mini-batch training with neighbor activations frozen to cached constants.

    Within a batch the relational contexts come from the blanket cache, so no
    gradient crosses into neighbor columns. After every update the batch
    entities' cached states are recomputed with the new parameters; the whole
    cache is rebuilt every ``refresh_period`` epochs.
    """
    params = params.copy()
    params.check_graph(g)
    train_ids = split.indices(TRAIN)
    if config.batch_size > len(train_ids):
        raise ConfigError(
            f"batch_size {config.batch_size} exceeds the {len(train_ids)} training entities"
        )
    rng = np.random.default_rng([config.seed, 1])
    opt = config.make_optimizer()
    metric = config.metric_for(g.head_kind)
    stopper = _EarlyStopper(params, config.patience)
    tlog = TrainLog()
    blanket, _ = BlanketCache.build(g, params) if config.epochs else (None, None)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = train_ids[rng.permutation(len(train_ids))]
        total = 0.0
        rebuild = (blanket.staleness + 1) >= config.refresh_period
        starts = range(0, len(order), config.batch_size)
        for start in starts:
            rows = np.sort(order[start:start + config.batch_size])
            probs, cache = forward_rows(g, params, rows, blanket.states, "train", rng)
            sub = SplitMask(split.roles[rows])
            total += masked_loss(probs, g.Y[rows], sub, TRAIN, g.head_kind) * len(rows)
            grads = backward(g, params, cache, split, TRAIN)
            opt.step(params.arrays, grads)
            # the last batch's states are overwritten by the rebuild below
            if not (rebuild and start == starts[-1]):
                blanket.write_rows(rows, replay_rows(params, cache))
        loss = total / len(order)
        _check_finite(loss, epoch)
        fresh, val_probs = BlanketCache.build(g, params)
        blanket.staleness += 1
        if rebuild:
            blanket = fresh
        val = evaluate(g, val_probs, split, VALID, config.threshold).metric(metric)
        tlog.records.append(EpochRecord(epoch, loss, val, time.perf_counter() - t0))
        log.debug("epoch %d loss %.5f val %.4f", epoch, loss, val)
        if stopper.update(epoch, val, params):
            break
    tlog.best_epoch, tlog.best_metric = stopper.best_epoch, stopper.best_metric
    return stopper.best, tlog


def train(g: RelGraph, params: ClnParams, split: SplitMask, config: TrainConfig):
    if config.batch_mode == "mini":
        return train_mini_batch(g, params, split, config)
    return train_full_batch(g, params, split, config)


# --- gradient checking --------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float
    # worst absolute discrepancy per array, for judging the roundoff floor
    abs_errors: dict = field(default_factory=dict)
    # coordinates left out because the perturbation crossed a kink
    skipped: dict = field(default_factory=dict)

    @property
    def failed(self) -> list:
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def to_text(self) -> str:
        lines = []
        for k, e in self.errors.items():
            note = f" ({self.skipped[k]} at kinks)" if self.skipped.get(k) else ""
            lines.append(f"{k:<12} {e:.3e} {'FAIL' if not e < self.tolerance else 'ok'}{note}")
        lines.append(f"{'PASS' if self.passed else 'FAIL'} worst {self.worst:.3e} tolerance {self.tolerance:g}")
        return "\n".join(lines) + "\n"


def _branches(cache) -> list:
    """ReLU activity and max-pool winners: the pieces of the piecewise-smooth forward."""
    out = [p > 0 for p in cache.pre if p is not None]
    for per_rel in cache.aux:
        for ax in per_rel or ():
            if ax is not None:
                out.append(ax[1])
    return out


def grad_check(g: RelGraph, params: ClnParams, split: SplitMask, epsilon: float = 1e-5,
               tolerance: float = 1e-4, floor: float = 1e-6, seed: int = 0,
               corrupt: str | None = None) -> GradCheckReport:
    """Central differences against :func:`backward`, worst relative error per array.

    The per-coordinate error is ``|a - n| / max(|a|, |n|, floor)``. Dropout is
    active with masks drawn once and reused for every perturbed evaluation.
    The difference quotient is taken on :func:`logit_loss`. A coordinate whose
    perturbation flips a ReLU or changes a max-pool winner has no derivative
    to compare against and is counted in ``skipped`` instead. ``corrupt``
    names an array whose analytic gradient is doubled, to exercise the
    harness.
    """
    if sum(a.size for a in params.arrays.values()) > 10_000:
        raise ConfigError("grad_check is limited to 1e4 scalar parameters")
    params = params.copy()
    rng = np.random.default_rng(seed)
    _, cache = forward(g, params, "train", rng)
    grads = backward(g, params, cache, split, TRAIN)
    if corrupt is not None:
        if corrupt not in grads:
            raise ConfigError(f"no parameter block named {corrupt!r}")
        grads[corrupt] = grads[corrupt] * 2.0
    base = _branches(cache)

    def loss():
        _, c = forward(g, params, "train", None, masks=cache.masks)
        smooth = all(np.array_equal(a, b) for a, b in zip(base, _branches(c)))
        return logit_loss(c.logits, g.Y, split, TRAIN, g.head_kind), smooth

    errors, abs_errors, skipped = {}, {}, {}
    for name, arr in params.arrays.items():
        worst = worst_abs = 0.0
        skipped[name] = 0
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + epsilon
            up, ok_up = loss()
            arr[idx] = old - epsilon
            down, ok_down = loss()
            arr[idx] = old
            if not (ok_up and ok_down):
                skipped[name] += 1
                continue
            num = (up - down) / (2 * epsilon)
            ana = grads[name][idx]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
            worst_abs = max(worst_abs, abs(ana - num))
        errors[name] = worst
        abs_errors[name] = worst_abs
    return GradCheckReport(errors, tolerance, abs_errors, skipped)


# --- experiments ---------------------------------------------------------------------


@dataclass
class RunResult:
    params: ClnParams
    log: TrainLog
    test: EvalReport
    val_metric: float


def run_once(g: RelGraph, split: SplitMask, hyper: dict, config: TrainConfig) -> RunResult:
    """Initialise from ``config.seed``, train, and score the test role."""
    params = init_for_graph(g, seed=config.seed, **hyper)
    best, tlog = train(g, params, split, config)
    probs, _ = forward(g, best, "infer")
    report = evaluate(g, probs, split, TEST, config.threshold)
    return RunResult(best, tlog, report, tlog.best_metric)


@dataclass
class GridCell:
    depth: int
    width: int
    optimizer: str
    n_params: int
    status: str = "ok"
    val_metric: float = float("nan")
    test_micro: float = float("nan")
    test_macro: float = float("nan")
    error: str = ""


def _cell_key(c: GridCell):
    return (-c.val_metric, c.n_params, c.depth)


def select_best(cells: list) -> int:
    """Index of the best successful cell: highest validation metric, then fewer parameters, then shallower."""
    ok = [k for k, c in enumerate(cells) if c.status == "ok"]
    if not ok:
        return -1
    return min(ok, key=lambda k: (_cell_key(cells[k]), k))


def grid_search(g: RelGraph, split: SplitMask, hyper: dict, config: TrainConfig,
                on_cell=None, done: dict | None = None):
    """Train every (depth, width, optimizer) cell and pick the best by validation metric.

    ``done`` maps ``(depth, width, optimizer)`` to already-finished cells,
    which are reused instead of retrained. ``on_cell(cell, result)`` is
    called after each newly trained cell.
    Returns ``(best_index, cells, results)``.
    """
    cells, results = [], []
    done = done or {}
    for depth, width, opt in itertools.product(config.grid_depths, config.grid_widths,
                                               config.grid_optimizers):
        key = (int(depth), int(width), str(opt))
        if key in done:
            cells.append(done[key])
            results.append(None)
            continue
        h = dict(hyper, depth=int(depth), width=int(width))
        cell = GridCell(int(depth), int(width), str(opt),
                        param_count(init_for_graph(g, seed=config.seed, **h)))
        try:
            res = run_once(g, split, h, replace(config, optimizer=opt))
        except DivergenceError as exc:
            cell.status, cell.error = "failed", str(exc)
            res = None
        else:
            cell.val_metric = res.val_metric
            cell.test_micro = res.test.micro_f1
            cell.test_macro = res.test.macro_f1
        cells.append(cell)
        results.append(res)
        if on_cell is not None:
            on_cell(cell, res)
    return select_best(cells), cells, results


@dataclass
class RunsSummary:
    micro: list
    macro: list

    @property
    def micro_mean(self):
        return float(np.mean(self.micro))

    @property
    def micro_std(self):
        return float(np.std(self.micro))

    @property
    def macro_mean(self):
        return float(np.mean(self.macro))

    @property
    def macro_std(self):
        return float(np.std(self.macro))


def mean_of_runs(g: RelGraph, split: SplitMask, hyper: dict, config: TrainConfig,
                 runs: int = 5) -> RunsSummary:
    """Repeat :func:`run_once` with seeds ``seed .. seed + runs - 1``."""
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    micro, macro = [], []
    for k in range(runs):
        res = run_once(g, split, hyper, replace(config, seed=config.seed + k))
        micro.append(res.test.micro_f1)
        macro.append(res.test.macro_f1)
    return RunsSummary(micro, macro)
