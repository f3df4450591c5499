"""Column network forward pass and hand-derived backpropagation.

Layer 1 projects local features (width M) to the hidden width K with a plain
relational candidate layer. Layers 2..T+1 are the T hidden layers: highway
(gated carry of the previous state) or plain feed-forward, with either one
shared parameter set or one set per layer. A softmax (multiclass) or sigmoid
(multilabel) head reads the top state.

All entities are updated synchronously from the previous layer's states, so
the whole graph is processed as dense (entities x units) matrices, with
relational pooling done by sparse products.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_container, save_container
from .errors import ConfigError, ConsistencyError, ShapeError
from .numerics import dropout_mask, glorot_init, relu, sigmoid, softmax
from .relgraph import MULTICLASS, MULTILABEL, TRAIN, RelGraph, SplitMask

HIGHWAY = "highway"
FNN = "fnn"
SHARED = "shared"
PER_LAYER = "per_layer"
POOLINGS = ("mean", "sum", "max")
CHECKPOINT_KIND = "cln"


@dataclass(eq=False)
class ClnParams:
    """Hyperparameters plus the named weight arrays of one column network.

    Array names: ``in.*`` for the input projection, ``hid.*`` / ``hid{t}.*``
    for shared / per-layer hidden sets, ``gate.*`` / ``gate{t}.*`` for highway
    gates and ``out.*`` for the head. Each set holds ``W``, ``b`` and one
    ``V{r}`` per relation.
    """

    M: int
    R: int
    L: int
    width: int = 10
    depth: int = 10
    column_kind: str = HIGHWAY
    sharing: str = SHARED
    share_gates: bool = True
    pooling: str = "mean"
    z: float | None = None
    head_kind: str = MULTICLASS
    dropout_in: float = 0.5
    dropout_out: float = 0.5
    dropout_hidden: float = 0.5
    gate_bias: float = -1.0
    seed: int = 0
    arrays: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.column_kind not in (HIGHWAY, FNN):
            raise ConfigError(f"column_kind must be highway or fnn, got {self.column_kind!r}")
        if self.sharing not in (SHARED, PER_LAYER):
            raise ConfigError(f"sharing must be shared or per_layer, got {self.sharing!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.head_kind not in (MULTICLASS, MULTILABEL):
            raise ConfigError(f"head_kind must be multiclass or multilabel, got {self.head_kind!r}")
        if self.depth < 0 or self.width < 1:
            raise ConfigError(f"need depth >= 0 and width >= 1, got {self.depth}, {self.width}")
        if self.z is None:
            self.z = float(max(1, self.R))
        self.z = float(self.z)
        if not self.z > 0:
            raise ConfigError(f"z must be positive, got {self.z}")
        for rate in (self.dropout_in, self.dropout_out, self.dropout_hidden):
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"dropout rates must be in [0, 1), got {rate}")

    # -- naming ---------------------------------------------------------------

    def layer_prefix(self, l: int) -> str:
        if l == 1:
            return "in"
        return "hid" if self.sharing == SHARED else f"hid{l - 1}"

    def gate_prefix(self, l: int) -> str | None:
        if l == 1 or self.column_kind != HIGHWAY:
            return None
        if self.sharing == SHARED and self.share_gates:
            return "gate"
        return f"gate{l - 1}"

    def _set(self, prefix: str) -> dict:
        a = self.arrays
        return {"W": a[f"{prefix}.W"], "b": a[f"{prefix}.b"],
                "V": [a[f"{prefix}.V{r}"] for r in range(self.R)]}

    def layer(self, l: int) -> dict:
        return self._set(self.layer_prefix(l))

    def gate(self, l: int) -> dict | None:
        p = self.gate_prefix(l)
        return None if p is None else self._set(p)

    def post_dropout(self, l: int) -> float:
        if self.column_kind == FNN:
            return self.dropout_hidden
        return self.dropout_in if l == 1 else 0.0

    def out_dropout(self) -> float:
        return self.dropout_out if self.column_kind == HIGHWAY else 0.0

    def expected_shapes(self) -> dict[str, tuple]:
        K = self.width
        shapes: dict[str, tuple] = {}

        def add(prefix, cols):
            if f"{prefix}.W" in shapes:
                return
            shapes[f"{prefix}.W"] = (K, cols)
            shapes[f"{prefix}.b"] = (K,)
            for r in range(self.R):
                shapes[f"{prefix}.V{r}"] = (K, cols)

        add("in", self.M)
        for l in range(2, self.depth + 2):
            add(self.layer_prefix(l), K)
            gp = self.gate_prefix(l)
            if gp is not None:
                add(gp, K)
        shapes["out.W"] = (self.L, K)
        shapes["out.b"] = (self.L,)
        return shapes

    # -- misc -----------------------------------------------------------------

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in (
            "M", "R", "L", "width", "depth", "column_kind", "sharing", "share_gates",
            "pooling", "z", "head_kind", "dropout_in", "dropout_out", "dropout_hidden",
            "gate_bias", "seed")}

    def copy(self) -> ClnParams:
        return ClnParams(**self.hyper(), arrays={k: v.copy() for k, v in self.arrays.items()})

    def check_graph(self, g: RelGraph) -> None:
        if (g.M, g.R, g.L) != (self.M, self.R, self.L):
            raise ShapeError(
                f"model expects (M, R, L) = ({self.M}, {self.R}, {self.L}), "
                f"graph has ({g.M}, {g.R}, {g.L})"
            )
        if g.head_kind != self.head_kind:
            raise ShapeError(f"model head is {self.head_kind}, graph labels are {g.head_kind}")


def init_params(M: int, R: int, L: int, seed: int = 0, **hyper) -> ClnParams:
    """Glorot-uniform weights, zero biases, gate biases at ``gate_bias``."""
    params = ClnParams(M=M, R=R, L=L, seed=seed, **hyper)
    rng = np.random.default_rng(seed)
    for name, shape in params.expected_shapes().items():
        if len(shape) == 2:
            params.arrays[name] = glorot_init(shape[0], shape[1], rng)
        elif name.startswith("gate"):
            params.arrays[name] = np.full(shape, params.gate_bias)
        else:
            params.arrays[name] = np.zeros(shape)
    return params


def init_for_graph(g: RelGraph, seed: int = 0, **hyper) -> ClnParams:
    return init_params(g.M, g.R, g.L, seed=seed, head_kind=g.head_kind, **hyper)


def param_count(params: ClnParams) -> int:
    return int(sum(int(np.prod(s)) for s in params.expected_shapes().values()))


def fingerprint(g: RelGraph, params: ClnParams) -> tuple:
    h = hashlib.blake2b(digest_size=16)
    for k in sorted(params.arrays):
        h.update(k.encode())
        h.update(params.arrays[k].tobytes())
    return (id(g), g.N, h.hexdigest())


# --- pooling ------------------------------------------------------------------


def relational_context(H_prev: np.ndarray, g: RelGraph, i: int, r: int,
                       pooling: str = "mean") -> np.ndarray:
    """Pool the previous-layer states of ``i``'s inbound neighbors under relation ``r``."""
    nbrs = g.neighbors(i, r)
    if not nbrs:
        return np.zeros(H_prev.shape[1])
    states = H_prev[nbrs]
    if pooling == "mean":
        return states.mean(axis=0)
    if pooling == "sum":
        return states.sum(axis=0)
    if pooling == "max":
        return states.max(axis=0)
    raise ConfigError(f"unknown pooling {pooling!r}")


def relation_matrix(g: RelGraph, r: int, pooling: str, rows=None):
    """Sparse (destination x source) operator used to pool relation ``r``."""
    if pooling not in POOLINGS:
        raise ConfigError(f"unknown pooling {pooling!r}")
    a = g.mean_adjacency[r] if pooling == "mean" else g.adjacency[r]
    return a if rows is None else a[rows]


def pool_with(H: np.ndarray, a, pooling: str):
    """Pool source states ``H`` through operator ``a`` from :func:`relation_matrix`.

    Returns ``(C, aux)``; ``aux`` carries the arg-max sources for max pooling.
    """
    if pooling != "max":
        return a @ H, None
    indptr, indices = a.indptr, a.indices
    K = H.shape[1]
    C = np.zeros((a.shape[0], K))
    deg = np.diff(indptr)
    nz = np.flatnonzero(deg)
    if len(nz) == 0:
        return C, (nz, np.zeros((0, K), dtype=np.int64))
    G = H[indices]
    starts = indptr[nz]
    best = np.maximum.reduceat(G, starts, axis=0)
    C[nz] = best
    seg = np.repeat(np.arange(len(nz)), deg[nz])
    # first neighbor (lowest source id) attaining the max, per unit
    pos = np.where(G == best[seg], np.arange(len(G))[:, None], len(G))
    first = np.minimum.reduceat(pos, starts, axis=0)
    return C, (nz, indices[first])


def pool(H: np.ndarray, g: RelGraph, r: int, pooling: str, rows=None):
    """Contexts of relation ``r`` for ``rows`` (default all entities) from source states ``H``."""
    return pool_with(H, relation_matrix(g, r, pooling, rows), pooling)


def pool_backward(dC: np.ndarray, g: RelGraph, r: int, pooling: str, aux, n_src: int):
    """Gradient w.r.t. the full-graph source states of :func:`pool` (``rows=None``)."""
    if pooling == "mean":
        return g.mean_adjacency[r].T @ dC
    if pooling == "sum":
        return g.adjacency[r].T @ dC
    nz, argsrc = aux
    K = dC.shape[1]
    flat = (argsrc * K + np.arange(K)).ravel()
    return np.bincount(flat, weights=dC[nz].ravel(), minlength=n_src * K).reshape(n_src, K)


# --- per-layer pieces -----------------------------------------------------------


def _preact(h_prev, contexts, p, z):
    W, b, V = p["W"], p["b"], p["V"]
    if h_prev.shape[-1] != W.shape[1]:
        raise ShapeError(f"state has {h_prev.shape[-1]} units, W is {W.shape[0]}x{W.shape[1]}")
    if len(contexts) != len(V):
        raise ShapeError(f"{len(contexts)} contexts for {len(V)} relation weights")
    out = h_prev @ W.T + b
    if V:
        s = None
        for c, v in zip(contexts, V):
            if c.shape[-1] != v.shape[1]:
                raise ShapeError(f"context has {c.shape[-1]} units, V is {v.shape[0]}x{v.shape[1]}")
            term = c @ v.T
            s = term if s is None else s + term
        out = out + s / z
    return out


def candidate_hidden(h_prev, contexts, layer: dict, z: float = 1.0) -> np.ndarray:
    """ReLU of ``b + W h_prev + (1/z) sum_r V_r c_r`` for one entity or a row stack."""
    return relu(_preact(np.asarray(h_prev, dtype=np.float64), contexts, layer, z))


def highway_gate(h_prev, contexts, gate: dict, z: float = 1.0):
    """Transform gate ``a1`` and carry gate ``a2 = 1 - a1``."""
    a1 = sigmoid(_preact(np.asarray(h_prev, dtype=np.float64), contexts, gate, z))
    return a1, 1.0 - a1


def _fuse(layer: dict, gate: dict | None) -> dict:
    """Stack transform and gate weights so both pre-activations come from one product."""
    if gate is None:
        return layer
    return {"W": np.vstack([layer["W"], gate["W"]]),
            "b": np.concatenate([layer["b"], gate["b"]]),
            "V": [np.vstack([v, va]) for v, va in zip(layer["V"], gate["V"])]}


def _fused_sets(params: ClnParams) -> list:
    memo, out = {}, [None]
    for l in range(1, params.depth + 2):
        key = (params.layer_prefix(l), params.gate_prefix(l))
        if key not in memo:
            memo[key] = _fuse(params.layer(l), params.gate(l))
        out.append(memo[key])
    return out


def _column_step(prev, contexts, fused, gated, z):
    Z = _preact(prev, contexts, fused, z)
    if not gated:
        cand = relu(Z)
        return cand, Z, cand, None
    K = Z.shape[-1] // 2
    if K != prev.shape[-1]:
        raise ConfigError(f"highway layer needs equal widths, got {prev.shape[-1]} -> {K}")
    pre = Z[..., :K]
    cand = relu(pre)
    a1 = sigmoid(Z[..., K:])
    return a1 * cand + (1.0 - a1) * prev, pre, cand, a1


def layer_forward(H_prev: np.ndarray, g: RelGraph, layer: dict, gate: dict | None = None,
                  z: float = 1.0, pooling: str = "mean") -> np.ndarray:
    """One synchronous layer update for every entity (highway when ``gate`` is given)."""
    contexts = [pool(H_prev, g, r, pooling)[0] for r in range(g.R)]
    return _column_step(H_prev, contexts, _fuse(layer, gate), gate is not None, z)[0]


# --- whole network ----------------------------------------------------------------


@dataclass(eq=False)
class ActivationCache:
    """Everything the backward pass needs from one forward pass.

    ``U[l]`` is the state fed to layer ``l + 1`` (after any dropout), with
    ``U[0]`` the local features; ``H[l]`` is layer ``l``'s output before dropout.
    Index 0 of the per-layer lists is unused.
    """

    mode: str
    rows: np.ndarray | None
    U: list
    H: list
    contexts: list
    aux: list
    pre: list
    cand: list
    gate: list
    masks: dict
    top: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    token: tuple | None = None


def _head(params: ClnParams, logits):
    return softmax(logits) if params.head_kind == MULTICLASS else sigmoid(logits)


def _run(params: ClnParams, X, context_fn, mode, rng, masks) -> ActivationCache:
    train = mode == "train"
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be train or infer, got {mode!r}")
    used = {}
    masks = masks or {}

    def drop(key, h, rate):
        if not train or rate == 0.0:
            return h
        if key not in masks:
            if rng is None:
                raise ConfigError("train mode with dropout needs an rng")
            masks[key] = dropout_mask(h.shape, rate, rng)
        used[key] = masks[key]
        return h * used[key]

    fused = _fused_sets(params)
    U, H = [X], [X]
    contexts, aux, pre, cand, gates = [None], [None], [None], [None], [None]
    for l in range(1, params.depth + 2):
        ctx, ax = context_fn(l, U[l - 1])
        h, p, c, a1 = _column_step(U[l - 1], ctx, fused[l], params.gate_prefix(l) is not None,
                                   params.z)
        H.append(h)
        U.append(drop(f"post{l}", h, params.post_dropout(l)))
        contexts.append(ctx)
        aux.append(ax)
        pre.append(p)
        cand.append(c)
        gates.append(a1)
    top = drop("out", U[-1], params.out_dropout())
    logits = top @ params.arrays["out.W"].T + params.arrays["out.b"]
    return ActivationCache(mode, None, U, H, contexts, aux, pre, cand, gates, used, top,
                           logits, _head(params, logits))


def forward(g: RelGraph, params: ClnParams, mode: str = "infer",
            rng: np.random.Generator | None = None, masks: dict | None = None):
    """Label probabilities for every entity, plus the activation cache.

    In train mode dropout masks are drawn from ``rng`` unless supplied in
    ``masks`` (keys ``post{l}`` and ``out``); infer mode never drops.
    """
    params.check_graph(g)
    pooling = params.pooling

    def contexts(l, prev):
        pooled = [pool(prev, g, r, pooling) for r in range(g.R)]
        return [c for c, _ in pooled], [a for _, a in pooled]

    cache = _run(params, g.features, contexts, mode, rng, dict(masks) if masks else None)
    cache.token = fingerprint(g, params)
    return cache.probs, cache


def forward_rows(g: RelGraph, params: ClnParams, rows: np.ndarray, frozen: list,
                 mode: str = "infer", rng=None, masks=None):
    """Columns of ``rows`` only, with every neighbor state read from ``frozen``.

    ``frozen[l]`` is the full-graph state fed to layer ``l + 1``; contexts
    computed from it are constants for the backward pass.
    """
    params.check_graph(g)
    pooling = params.pooling
    ops = [relation_matrix(g, r, pooling, rows) for r in range(g.R)]

    def contexts(l, prev):
        pooled = [pool_with(frozen[l - 1], a, pooling) for a in ops]
        return [c for c, _ in pooled], [a for _, a in pooled]

    cache = _run(params, g.features[rows], contexts, mode, rng, dict(masks) if masks else None)
    cache.rows = np.asarray(rows)
    cache.token = fingerprint(g, params)
    return cache.probs, cache


def replay_rows(params: ClnParams, cache: ActivationCache) -> list:
    """Infer-mode states of ``cache.rows`` under ``params``, reusing the cached contexts."""
    fused = _fused_sets(params)
    U = [cache.U[0]]
    for l in range(1, params.depth + 2):
        gated = params.gate_prefix(l) is not None
        U.append(_column_step(U[l - 1], cache.contexts[l], fused[l], gated, params.z)[0])
    return U


def _accumulate(grads, prefixes, dZ, prev, contexts, z):
    """Add the weight gradients of one (possibly fused) layer, split back per array set."""
    parts = [(p, slice(k * dZ.shape[1] // len(prefixes), (k + 1) * dZ.shape[1] // len(prefixes)))
             for k, p in enumerate(prefixes)]
    gW = dZ.T @ prev
    gb = dZ.sum(axis=0)
    gV = [(dZ / z).T @ c for c in contexts]
    for prefix, sl in parts:
        grads[f"{prefix}.W"] += gW[sl]
        grads[f"{prefix}.b"] += gb[sl]
        for r, g in enumerate(gV):
            grads[f"{prefix}.V{r}"] += g[sl]


def _backprop(g: RelGraph, params: ClnParams, cache: ActivationCache, dlogits,
              through_contexts: bool) -> dict:
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    grads["out.W"] += dlogits.T @ cache.top
    grads["out.b"] += dlogits.sum(axis=0)
    dU = dlogits @ params.arrays["out.W"]
    if "out" in cache.masks:
        dU = dU * cache.masks["out"]
    z = params.z
    fused = _fused_sets(params)
    for l in range(params.depth + 1, 0, -1):
        key = f"post{l}"
        dH = dU * cache.masks[key] if key in cache.masks else dU
        prev, ctx, a1 = cache.U[l - 1], cache.contexts[l], cache.gate[l]
        prefixes = [params.layer_prefix(l)]
        if a1 is not None:
            prefixes.append(params.gate_prefix(l))
            dpre = dH * a1 * (cache.pre[l] > 0)
            dgate = dH * (cache.cand[l] - prev) * a1 * (1.0 - a1)
            dZ = np.hstack([dpre, dgate])
        else:
            dZ = dH * (cache.pre[l] > 0)
        _accumulate(grads, prefixes, dZ, prev, ctx, z)
        if l == 1:
            break
        d = dZ @ fused[l]["W"]
        if a1 is not None:
            d += dH * (1.0 - a1)
        if through_contexts:
            ds = dZ / z
            for r in range(params.R):
                d += pool_backward(ds @ fused[l]["V"][r], g, r, params.pooling,
                                   cache.aux[l][r], d.shape[0])
        dU = d
    return grads


def loss_weights(roles: np.ndarray, role: int) -> np.ndarray:
    sel = roles == role
    n = int(sel.sum())
    if n == 0:
        raise ConfigError("loss role has no entities")
    return sel / n


def backward(g: RelGraph, params: ClnParams, cache: ActivationCache, split: SplitMask,
             role: int = TRAIN) -> dict:
    """Exact gradients of the mean cross-entropy over ``role`` entities.

    For a full-graph cache the gradient flows through pooled contexts into
    neighbor columns; for a :func:`forward_rows` cache the contexts are
    constants and only the listed rows contribute.
    """
    if cache.token != fingerprint(g, params):
        raise ConsistencyError("activation cache is stale: graph or parameters changed since forward")
    roles = split.roles if cache.rows is None else split.roles[cache.rows]
    Y = g.Y if cache.rows is None else g.Y[cache.rows]
    w = loss_weights(roles, role)
    dlogits = (cache.probs - Y) * w[:, None]
    return _backprop(g, params, cache, dlogits, through_contexts=cache.rows is None)


# --- persistence ------------------------------------------------------------------


def save_params(params: ClnParams, path, extra: dict | None = None) -> None:
    meta = {"hyper": params.hyper(), "extra": extra or {}}
    save_container(path, CHECKPOINT_KIND, meta, params.arrays)


def load_params(path, expect_column_kind: str | None = None) -> ClnParams:
    _, meta, arrays = load_container(path, expect_kind=CHECKPOINT_KIND)
    hyper = meta["hyper"]
    if expect_column_kind is not None and hyper["column_kind"] != expect_column_kind:
        raise ConfigError(
            f"{path}: checkpoint column kind {hyper['column_kind']!r}, expected {expect_column_kind!r}"
        )
    params = ClnParams(**hyper, arrays=dict(arrays))
    shapes = params.expected_shapes()
    if set(shapes) != set(arrays) or any(arrays[k].shape != s for k, s in shapes.items()):
        raise ConfigError(f"{path}: arrays do not match the stored hyperparameters")
    return params
