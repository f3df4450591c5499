"""Multi-relational entity graphs: data model, TSV ingestion, splits, synthetic data."""
from __future__ import annotations

import os
import warnings
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ParseError, ReferentialError, ShapeError, ValidationError

MULTICLASS = "multiclass"
MULTILABEL = "multilabel"

TRAIN, VALID, TEST, UNLABELED = 0, 1, 2, -1
ROLE_NAMES = {TRAIN: "train", VALID: "valid", TEST: "test"}
ROLE_CODES = {"train": TRAIN, "valid": VALID, "validation": VALID, "test": TEST}

NODES_HEADER_ID = "id"
EDGES_HEADER = ["src", "dst", "relation", "direction"]
LABELS_HEADER = ["id", "label"]
SPLITS_HEADER = ["id", "role"]


@dataclass(eq=False)
class RelGraph:
    """Entities with local features, typed directed relations and (partial) labels.

    ``edges`` holds one ``(src, dst, relation)`` row per directed tuple, sorted
    by relation, then destination, then source. Treat instances as immutable:
    adjacency structures are cached on first use.
    """

    node_ids: list[str]
    features: np.ndarray
    relations: list[str]
    edges: np.ndarray
    label_names: list[str]
    Y: np.ndarray
    labeled: np.ndarray
    head_kind: str = MULTICLASS
    _index: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64).reshape(len(self.node_ids), -1)
        self.labeled = np.asarray(self.labeled, dtype=bool)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 3)
        if len(edges):
            edges = edges[np.lexsort((edges[:, 0], edges[:, 1], edges[:, 2]))]
        self.edges = edges
        self._index = {nid: k for k, nid in enumerate(self.node_ids)}
        self.validate()

    @property
    def N(self) -> int:
        return len(self.node_ids)

    @property
    def M(self) -> int:
        return self.features.shape[1]

    @property
    def R(self) -> int:
        return len(self.relations)

    @property
    def L(self) -> int:
        return len(self.label_names)

    def index_of(self, node_id: str) -> int:
        return self._index[node_id]

    def validate(self) -> None:
        n = self.N
        if len(self._index) != n:
            raise ValidationError("duplicate node ids")
        if self.features.shape[0] != n:
            raise ValidationError(f"{self.features.shape[0]} feature rows for {n} entities")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("non-finite feature values")
        if self.Y.shape != (n, self.L) or self.labeled.shape != (n,):
            raise ValidationError("label matrix does not match entities/labels")
        if self.head_kind not in (MULTICLASS, MULTILABEL):
            raise ValidationError(f"unknown head kind {self.head_kind!r}")
        if self.head_kind == MULTICLASS and self.L and np.any(
            self.Y[self.labeled].sum(axis=1) != 1
        ):
            raise ValidationError("multiclass entities must carry exactly one label")
        e = self.edges
        if len(e) == 0:
            return
        if e[:, :2].min() < 0 or e[:, :2].max() >= n:
            raise ReferentialError("edge endpoint outside [0, N)")
        if e[:, 2].min() < 0 or e[:, 2].max() >= self.R:
            raise ReferentialError("edge relation outside [0, R)")
        if np.any(e[:, 0] == e[:, 1]):
            k = int(np.flatnonzero(e[:, 0] == e[:, 1])[0])
            raise ValidationError(f"self-loop on entity {self.node_ids[e[k, 0]]!r}")
        dup = np.all(e[1:] == e[:-1], axis=1)
        if np.any(dup):
            s, d, r = e[int(np.flatnonzero(dup)[0])]
            raise ValidationError(
                f"duplicate tuple ({self.node_ids[s]}, {self.node_ids[d]}, {self.relations[r]})"
            )

    @cached_property
    def adjacency(self) -> list[sp.csr_matrix]:
        """Per relation, an N x N 0/1 CSR matrix with row = destination, column = source."""
        mats = []
        for r in range(self.R):
            sel = self.edges[self.edges[:, 2] == r]
            mats.append(
                sp.csr_matrix(
                    (np.ones(len(sel)), (sel[:, 1], sel[:, 0])), shape=(self.N, self.N)
                )
            )
        for a in mats:
            a.sort_indices()
        return mats

    @cached_property
    def mean_adjacency(self) -> list[sp.csr_matrix]:
        out = []
        for a in self.adjacency:
            deg = np.diff(a.indptr)
            inv = np.zeros(self.N)
            inv[deg > 0] = 1.0 / deg[deg > 0]
            m = sp.diags(inv) @ a
            out.append(sp.csr_matrix(m))
        return out

    @cached_property
    def out_lists(self) -> list[list[int]]:
        """Distinct destinations per source, over all relations."""
        out = [[] for _ in range(self.N)]
        if len(self.edges):
            for s, d in np.unique(self.edges[:, :2], axis=0):
                out[s].append(int(d))
        return out

    def neighbors(self, i: int, r: int) -> list[int]:
        """Sources j of tuples (j, i, r), sorted by id."""
        if not 0 <= i < self.N:
            raise IndexError(f"entity {i} outside [0, {self.N})")
        if not 0 <= r < self.R:
            raise IndexError(f"relation {r} outside [0, {self.R})")
        a = self.adjacency[r]
        return a.indices[a.indptr[i]:a.indptr[i + 1]].tolist()

    def all_neighbors(self, i: int) -> list[int]:
        out = set()
        for r in range(self.R):
            out.update(self.neighbors(i, r))
        return sorted(out)

    def without_edges(self) -> RelGraph:
        """Same entities, features and labels with every relation removed."""
        return RelGraph(
            list(self.node_ids), self.features, [], np.zeros((0, 3), dtype=np.int64),
            list(self.label_names), self.Y, self.labeled, self.head_kind,
        )

    def __eq__(self, other):
        if not isinstance(other, RelGraph):
            return NotImplemented
        return (
            self.node_ids == other.node_ids
            and self.relations == other.relations
            and self.label_names == other.label_names
            and self.head_kind == other.head_kind
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.Y, other.Y)
            and np.array_equal(self.labeled, other.labeled)
        )

    __hash__ = None


def neighbors(g: RelGraph, i: int, r: int) -> list[int]:
    return g.neighbors(i, r)


# --- ingestion ---------------------------------------------------------------


def _rows(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line.split("\t")


def _read_nodes(path):
    ids, feats = [], []
    width = None
    for lineno, cols in _rows(path):
        if width is None and cols[0] == NODES_HEADER_ID:
            width = len(cols) - 1
            continue
        if width is None:
            width = len(cols) - 1
        if len(cols) - 1 != width:
            raise ParseError(path, lineno, f"expected {width} features, found {len(cols) - 1}")
        try:
            feats.append([float(v) for v in cols[1:]])
        except ValueError as exc:
            raise ParseError(path, lineno, f"non-numeric feature: {exc}") from None
        ids.append(cols[0])
    width = width or 0
    return ids, np.array(feats, dtype=np.float64).reshape(len(ids), width)


def load_graph(nodes_path, edges_path, labels_path, head_kind: str = MULTICLASS) -> RelGraph:
    """Read the three TSV files into a validated :class:`RelGraph`."""
    ids, X = _read_nodes(nodes_path)
    index = {}
    for k, nid in enumerate(ids):
        if nid in index:
            raise ValidationError(f"{nodes_path}: duplicate node id {nid!r}")
        index[nid] = k

    relations: dict[str, int] = {}
    tuples = []
    seen = set()
    for lineno, cols in _rows(edges_path):
        if cols == EDGES_HEADER:
            continue
        if len(cols) != 4:
            raise ParseError(edges_path, lineno, f"expected 4 columns, found {len(cols)}")
        src, dst, rel, direction = cols
        if direction not in ("uni", "bi"):
            raise ParseError(edges_path, lineno, f"direction must be uni or bi, got {direction!r}")
        for nid in (src, dst):
            if nid not in index:
                raise ReferentialError(f"{edges_path}:{lineno}: undeclared node id {nid!r}")
        if src == dst:
            raise ValidationError(f"{edges_path}:{lineno}: self-loop on {src!r}")
        r = relations.setdefault(rel, len(relations))
        pairs = [(index[src], index[dst])]
        if direction == "bi":
            pairs.append((index[dst], index[src]))
        for s, d in pairs:
            if (s, d, r) in seen:
                raise ValidationError(
                    f"{edges_path}:{lineno}: duplicate tuple ({ids[s]}, {ids[d]}, {rel})"
                )
            seen.add((s, d, r))
            tuples.append((s, d, r))

    raw_labels: dict[int, list[str]] = {}
    for lineno, cols in _rows(labels_path):
        if cols == LABELS_HEADER:
            continue
        if len(cols) != 2 or not cols[1]:
            raise ParseError(labels_path, lineno, "expected node_id<TAB>label")
        nid, tok = cols
        if nid not in index:
            raise ReferentialError(f"{labels_path}:{lineno}: undeclared node id {nid!r}")
        toks = [t for t in tok.split(",") if t] if head_kind == MULTILABEL else [tok]
        if head_kind == MULTICLASS and "," in tok:
            raise ParseError(labels_path, lineno, "comma-separated labels need head_kind=multilabel")
        if index[nid] in raw_labels:
            raise ValidationError(f"{labels_path}:{lineno}: node {nid!r} labeled twice")
        raw_labels[index[nid]] = toks

    names = sorted({t for toks in raw_labels.values() for t in toks})
    col = {t: k for k, t in enumerate(names)}
    Y = np.zeros((len(ids), len(names)))
    labeled = np.zeros(len(ids), dtype=bool)
    for k, toks in raw_labels.items():
        labeled[k] = True
        for t in toks:
            Y[k, col[t]] = 1.0
    rel_names = sorted(relations, key=relations.get)
    return RelGraph(ids, X, rel_names, np.array(tuples, dtype=np.int64).reshape(-1, 3),
                    names, Y, labeled, head_kind)


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_graph(g: RelGraph, nodes_path, edges_path, labels_path) -> None:
    """Write ``g`` in the TSV formats read by :func:`load_graph` (all tuples as ``uni``)."""
    header = "\t".join([NODES_HEADER_ID] + [f"f{k + 1}" for k in range(g.M)])
    lines = [header]
    for nid, row in zip(g.node_ids, g.features):
        lines.append("\t".join([nid] + [repr(float(v)) for v in row]))
    _atomic_write(nodes_path, "\n".join(lines) + "\n")

    lines = ["\t".join(EDGES_HEADER)]
    for s, d, r in g.edges:
        lines.append(f"{g.node_ids[s]}\t{g.node_ids[d]}\t{g.relations[r]}\tuni")
    _atomic_write(edges_path, "\n".join(lines) + "\n")

    lines = ["\t".join(LABELS_HEADER)]
    for k in np.flatnonzero(g.labeled):
        toks = [g.label_names[c] for c in np.flatnonzero(g.Y[k])]
        lines.append(f"{g.node_ids[k]}\t{','.join(toks)}")
    _atomic_write(labels_path, "\n".join(lines) + "\n")


def standardize(g: RelGraph, stats: dict | None = None):
    """Column z-scored copy of ``g``; returns ``(graph, stats)``.

    ``stats`` (``mean`` and ``scale`` lists) reuses previously fitted values,
    so a saved model sees features scaled exactly as during training.
    Constant columns keep scale 1.
    """
    if stats is None:
        mu = g.features.mean(axis=0)
        sd = g.features.std(axis=0)
        sd[sd == 0] = 1.0
        stats = {"mean": mu.tolist(), "scale": sd.tolist()}
    mu, sd = np.asarray(stats["mean"]), np.asarray(stats["scale"])
    if mu.shape != (g.M,) or sd.shape != (g.M,):
        raise ShapeError(f"feature statistics have dim {len(mu)}, graph has {g.M}")
    g2 = RelGraph(g.node_ids, (g.features - mu) / sd, g.relations, g.edges, g.label_names,
                  g.Y, g.labeled, g.head_kind)
    return g2, stats


# --- splits -------------------------------------------------------------------


@dataclass(eq=False)
class SplitMask:
    """Role per entity: TRAIN, VALID, TEST, or UNLABELED for hidden-label entities."""

    roles: np.ndarray
    fractions: tuple = None

    def mask(self, role: int) -> np.ndarray:
        return self.roles == role

    def indices(self, role: int) -> np.ndarray:
        return np.flatnonzero(self.roles == role)

    def __eq__(self, other):
        return isinstance(other, SplitMask) and np.array_equal(self.roles, other.roles)

    __hash__ = None


def _stratum(g: RelGraph) -> np.ndarray:
    s = np.full(g.N, -1)
    if g.L:
        has = g.Y.any(axis=1)
        s[has] = np.argmax(g.Y[has] > 0, axis=1)
    return s


def make_split(g: RelGraph, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> SplitMask:
    """Stratified train/valid/test assignment over labeled entities.

    Entities are ordered class by class (shuffled within a class) and roles
    are dealt along that order by largest remaining quota, so each class and
    the whole set both land within one entity of the requested fractions.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    strata = _stratum(g)
    labeled = np.flatnonzero(g.labeled)
    order, leftovers = [], []
    for c in np.unique(strata[labeled]):
        members = labeled[strata[labeled] == c]
        members = members[rng.permutation(len(members))]
        if len(members) < 3:
            warnings.warn(
                f"class {c} has {len(members)} entities, fewer than the 3 split roles; "
                "assigning it unstratified",
                stacklevel=2,
            )
            leftovers.extend(members.tolist())
        else:
            order.extend(members.tolist())
    if leftovers:
        left = np.array(leftovers)
        order.extend(left[rng.permutation(len(left))].tolist())

    roles = np.full(g.N, UNLABELED, dtype=np.int8)
    counts = np.zeros(3)
    for p, k in enumerate(order):
        r = int(np.argmax(fr * (p + 1) - counts))
        counts[r] += 1
        roles[k] = r
    split = SplitMask(roles, tuple(float(f) for f in fr))
    for r, name in ROLE_NAMES.items():
        if not np.any(roles == r):
            raise ConfigError(f"split role {name!r} is empty ({len(order)} labeled entities)")
    return split


def load_splits(g: RelGraph, path) -> SplitMask:
    roles = np.full(g.N, UNLABELED, dtype=np.int8)
    for lineno, cols in _rows(path):
        if cols == SPLITS_HEADER:
            continue
        if len(cols) != 2 or cols[1] not in ROLE_CODES:
            raise ParseError(path, lineno, "expected node_id<TAB>{train,valid,test}")
        if cols[0] not in g._index:
            raise ReferentialError(f"{path}:{lineno}: undeclared node id {cols[0]!r}")
        roles[g.index_of(cols[0])] = ROLE_CODES[cols[1]]
    for r, name in ROLE_NAMES.items():
        if not np.any(roles == r):
            raise ConfigError(f"{path}: split role {name!r} is empty")
    return SplitMask(roles)


def save_splits(g: RelGraph, split: SplitMask, path) -> None:
    lines = ["\t".join(SPLITS_HEADER)]
    for k in np.flatnonzero(split.roles != UNLABELED):
        lines.append(f"{g.node_ids[k]}\t{ROLE_NAMES[int(split.roles[k])]}")
    _atomic_write(path, "\n".join(lines) + "\n")


# --- graph distances ----------------------------------------------------------


def hop_distances_from(g: RelGraph, j: int) -> np.ndarray:
    """BFS hop counts from ``j`` along tuple direction; -1 marks unreachable."""
    dist = np.full(g.N, -1, dtype=np.int64)
    dist[j] = 0
    queue = deque([j])
    adj = g.out_lists
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def hop_distance(g: RelGraph, i: int, j: int):
    """Length of the shortest directed path from ``j`` to ``i``; ``None`` if unreachable."""
    d = int(hop_distances_from(g, j)[i])
    return None if d < 0 else d


# --- synthetic data -----------------------------------------------------------


def generate_synthetic(n=2000, r_types=2, homophily=0.9, feature_noise=1.0, classes=3,
                       seed=0, feature_dim=16, degree=4.0, fractions=(0.6, 0.2, 0.2)):
    """Planted-partition multi-relational graph with noisy class-centroid features.

    Each relation contributes about ``degree`` inbound neighbors per entity.
    An edge joins two same-class entities with probability ``homophily`` and
    two entities of different classes otherwise. Even-numbered relations are
    symmetric (both directions present), odd-numbered ones are one-way.
    Returns ``(graph, split)``.
    """
    if n < classes or classes < 1:
        raise ConfigError(f"need n >= classes >= 1, got n={n}, classes={classes}")
    if not 0.0 <= homophily <= 1.0:
        raise ConfigError(f"homophily must be in [0, 1], got {homophily}")
    rng = np.random.default_rng(seed)
    y = rng.permutation(np.arange(n) % classes)
    members = [np.flatnonzero(y == c) for c in range(classes)]
    centroids = rng.normal(size=(classes, feature_dim))
    X = centroids[y] + feature_noise * rng.normal(size=(n, feature_dim))

    tuples = []
    for r in range(r_types):
        symmetric = r % 2 == 0
        target = int(round(n * degree / (2 if symmetric else 1)))
        keys = np.zeros(0, dtype=np.int64)
        for _ in range(50):
            need = target - len(keys)
            if need <= 0:
                break
            m = need + need // 4 + 8
            dst = rng.integers(n, size=m)
            same = rng.random(m) < homophily
            if classes == 1:
                same[:] = True
            other = (y[dst] + rng.integers(1, max(classes, 2), size=m)) % classes
            cls = np.where(same, y[dst], other)
            src = np.empty(m, dtype=np.int64)
            for c in range(classes):
                sel = cls == c
                src[sel] = members[c][rng.integers(len(members[c]), size=sel.sum())]
            ok = src != dst
            src, dst = src[ok], dst[ok]
            if symmetric:
                src, dst = np.minimum(src, dst), np.maximum(src, dst)
            new = src * n + dst
            # keep first occurrence, preserve sampling order for determinism
            _, first = np.unique(new, return_index=True)
            new = new[np.sort(first)]
            new = new[~np.isin(new, keys)]
            keys = np.concatenate([keys, new[:need]])
        src, dst = keys // n, keys % n
        tuples.append(np.stack([src, dst, np.full(len(src), r)], axis=1))
        if symmetric:
            tuples.append(np.stack([dst, src, np.full(len(src), r)], axis=1))

    edges = np.concatenate(tuples) if tuples else np.zeros((0, 3), dtype=np.int64)
    width = len(str(n - 1))
    ids = [f"n{k:0{width}d}" for k in range(n)]
    names = [f"c{c:0{len(str(classes - 1))}d}" for c in range(classes)]
    Y = np.zeros((n, classes))
    Y[np.arange(n), y] = 1.0
    g = RelGraph(ids, X, [f"rel{r}" for r in range(r_types)], edges, names, Y,
                 np.ones(n, dtype=bool), MULTICLASS)
    return g, make_split(g, fractions, seed)
