"""Comparison methods: stacked logistic regression and the edge-free highway net."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_container, save_container
from .errors import ConfigError, DivergenceError, ShapeError
from .numerics import Adam, sigmoid, softmax
from .relgraph import MULTICLASS, TRAIN, RelGraph, SplitMask
from .training import RunResult, TrainConfig, run_once

SL_CHECKPOINT_KIND = "sl"


@dataclass
class SlConfig:
    steps: int = 3
    iterations: int = 400
    lr: float = 0.05
    l2: float = 1e-4

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("stacked learning needs at least one step")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")


@dataclass(eq=False)
class SlStack:
    """One logistic-regression classifier per step over ``[x, p_prev, c_1..c_R]``."""

    M: int
    R: int
    L: int
    head_kind: str = MULTICLASS
    weights: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.M + self.L * (1 + self.R)


def _neighbor_mean(P: np.ndarray, a) -> np.ndarray:
    """Row-wise mean of ``P`` over CSR adjacency ``a`` (row = destination).

    Computed as the first neighbor's vector plus the mean deviation from it,
    so identical neighbor vectors come back bit-exact.
    """
    out = np.zeros((a.shape[0], P.shape[1]))
    deg = np.diff(a.indptr)
    nz = np.flatnonzero(deg)
    if len(nz) == 0:
        return out
    starts = a.indptr[nz]
    ref = np.zeros_like(out)
    ref[nz] = P[a.indices[starts]]
    rows = np.repeat(np.arange(a.shape[0]), deg)
    dev = (P[a.indices] - ref[rows]) * a.data[:, None]
    weight = np.add.reduceat(a.data, starts)
    out[nz] = ref[nz] + np.add.reduceat(dev, starts, axis=0) / weight[:, None]
    return out


def sl_context(P_prev: np.ndarray, g: RelGraph, i: int, r: int) -> np.ndarray:
    """Mean of the neighbors' probability vectors under relation ``r``; zeros if none."""
    if not 0 <= i < g.N:
        raise IndexError(f"entity {i} outside [0, {g.N})")
    if not 0 <= r < g.R:
        raise IndexError(f"relation {r} outside [0, {g.R})")
    a = g.adjacency[r][[i]]
    return _neighbor_mean(np.asarray(P_prev, dtype=float), a)[0]


def _inputs(g: RelGraph, P_prev: np.ndarray | None, L: int) -> np.ndarray:
    if P_prev is None:
        return np.hstack([g.features, np.zeros((g.N, L * (1 + g.R)))])
    ctx = [_neighbor_mean(P_prev, g.adjacency[r]) for r in range(g.R)]
    return np.hstack([g.features, P_prev, *ctx])


def _probs(Z: np.ndarray, head_kind: str) -> np.ndarray:
    return softmax(Z) if head_kind == MULTICLASS else sigmoid(Z)


def _fit_lr(X, Y, head_kind, cfg: SlConfig, step: int):
    W = np.zeros((Y.shape[1], X.shape[1]))
    b = np.zeros(Y.shape[1])
    params = {"W": W, "b": b}
    opt = Adam(lr=cfg.lr)
    n = len(X)
    for _ in range(cfg.iterations):
        P = _probs(X @ W.T + b, head_kind)
        D = (P - Y) / n
        grads = {"W": D.T @ X + cfg.l2 * W, "b": D.sum(axis=0)}
        opt.step(params, grads)
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise DivergenceError(f"stacked learning diverged at step {step}", epoch=step)
    return W, b


def sl_train(g: RelGraph, split: SplitMask, config: SlConfig | None = None) -> SlStack:
    """Fit the classifiers step by step on the training entities.

    Between steps the probabilities of every entity, training entities
    included, are recomputed with the classifier just fitted.
    """
    cfg = config or SlConfig()
    train = split.indices(TRAIN)
    if len(train) == 0:
        raise ConfigError("stacked learning needs training entities")
    stack = SlStack(g.M, g.R, g.L, g.head_kind)
    P = None
    for step in range(1, cfg.steps + 1):
        X = _inputs(g, P, g.L)
        W, b = _fit_lr(X[train], g.Y[train], g.head_kind, cfg, step)
        stack.weights.append((W, b))
        P = _probs(X @ W.T + b, g.head_kind)
    return stack


def sl_predict(stack: SlStack, g: RelGraph, upto: int | None = None) -> np.ndarray:
    """Final-step probabilities for every entity (or after ``upto`` steps)."""
    if (g.M, g.R, g.L) != (stack.M, stack.R, stack.L):
        raise ShapeError(
            f"stack expects (M, R, L) = ({stack.M}, {stack.R}, {stack.L}), "
            f"graph has ({g.M}, {g.R}, {g.L})"
        )
    P = None
    for W, b in stack.weights[:upto]:
        P = _probs(_inputs(g, P, stack.L) @ W.T + b, stack.head_kind)
    return P


def save_stack(stack: SlStack, path, extra: dict | None = None) -> None:
    meta = {"M": stack.M, "R": stack.R, "L": stack.L, "head_kind": stack.head_kind,
            "steps": stack.steps, "extra": extra or {}}
    arrays = {}
    for t, (W, b) in enumerate(stack.weights):
        arrays[f"step{t}.W"] = W
        arrays[f"step{t}.b"] = b
    save_container(path, SL_CHECKPOINT_KIND, meta, arrays)


def load_stack(path) -> SlStack:
    _, meta, arrays = load_container(path, expect_kind=SL_CHECKPOINT_KIND)
    stack = SlStack(meta["M"], meta["R"], meta["L"], meta["head_kind"])
    for t in range(meta["steps"]):
        stack.weights.append((arrays[f"step{t}.W"], arrays[f"step{t}.b"]))
    return stack


def hwn_norel(g: RelGraph, split: SplitMask, hyper: dict | None = None,
              config: TrainConfig | None = None) -> RunResult:
    """Train a column network on ``g`` with every relation removed.

    The returned parameters have ``R = 0``; score other graphs with
    ``forward(g.without_edges(), params)``.
    """
    return run_once(g.without_edges(), split, dict(hyper or {}), config or TrainConfig())
