"""Graph containers, file loading, synthetic block-model generation, splits.

Graphs are desk scale: adjacency is kept dense and symmetrically normalized
once at construction (self-loops added there, never stored in the edge list).
All randomness flows through named Rng streams so a seed pins the dataset and
the session splits bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, ShapeError
from .rng import Rng, derive_seed
from .tensor import Tensor


def normalize_adjacency(edges: np.ndarray, n: int) -> Tensor:
    """D^-1/2 (A + I) D^-1/2 for an undirected simple edge list."""
    if n <= 0:
        raise ShapeError("graph needs at least one node")
    a = np.zeros((n, n))
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        if edges.min() < 0 or edges.max() >= n:
            raise DataError(f"edge endpoint out of range for {n} nodes")
        if (edges[:, 0] == edges[:, 1]).any():
            raise DataError("self-loops may not appear in the edge list")
        a[edges[:, 0], edges[:, 1]] = 1.0
        a[edges[:, 1], edges[:, 0]] = 1.0
    a[np.diag_indices(n)] = 1.0
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return Tensor(a * dinv[:, None] * dinv[None, :])


def _canonical_edges(pairs) -> np.ndarray:
    seen = set()
    for u, v in pairs:
        u, v = int(u), int(v)
        if u == v:
            raise FormatError(f"self-loop on node {u}")
        seen.add((u, v) if u < v else (v, u))
    if not seen:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array(sorted(seen), dtype=np.int64)


class Graph:
    """Node features, labels, and a normalized dense adjacency."""

    def __init__(self, features: np.ndarray, labels: np.ndarray, edges):
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise DataError("features must be a nonempty 2-D matrix")
        y = np.asarray(labels, dtype=np.int64).reshape(-1)
        if y.size != x.shape[0]:
            raise DataError(f"{y.size} labels for {x.shape[0]} nodes")
        self.n = x.shape[0]
        self.feature_dim = x.shape[1]
        self.x = Tensor(x)
        self.labels = y
        self.edges = _canonical_edges(edges)
        if self.edges.size and self.edges.max() >= self.n:
            raise DataError(f"edge endpoint out of range for {self.n} nodes")
        self.a_hat = normalize_adjacency(self.edges, self.n)
        self.classes: list[int] = sorted(int(c) for c in np.unique(y))
        self._ax: np.ndarray | None = None

    def nodes_of_class(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id).astype(np.int64)

    def propagated_features(self) -> np.ndarray:
        """A_hat @ X, cached; both factors are constants of the graph."""
        if self._ax is None:
            self._ax = self.a_hat.data @ self.x.data
        return self._ax

    def feature_rows(self, ids) -> Tensor:
        return Tensor(self.x.data[np.asarray(ids, dtype=np.int64)])


def load_graph(edges_path: str, features_path: str, labels_path: str) -> Graph:
    """Read a graph from three text files.

    features: one CSV row of floats per node. labels: one integer per line.
    edges: two whitespace-separated node ids per line; duplicates collapse,
    self-loops are format errors.
    """
    try:
        features = np.loadtxt(features_path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"bad feature file {features_path}: {exc}") from exc

    labels = []
    with open(labels_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                labels.append(int(text))
            except ValueError as exc:
                raise FormatError(f"{labels_path}:{lineno}: not an integer label") from exc

    pairs = []
    with open(edges_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise FormatError(f"{edges_path}:{lineno}: expected 'u v'")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise FormatError(f"{edges_path}:{lineno}: endpoints must be integers") from exc

    if len(labels) != features.shape[0]:
        raise DataError(
            f"{len(labels)} labels but {features.shape[0]} feature rows"
        )
    return Graph(features, np.array(labels), pairs)


@dataclass
class SbmConfig:
    """Stochastic block model with Gaussian features around per-class means."""

    classes: int
    nodes_per_class: int
    p_intra: float
    p_inter: float
    feature_dim: int
    class_mean_scale: float = 1.0
    noise_scale: float = 0.5

    def __post_init__(self):
        if self.classes <= 0 or self.nodes_per_class <= 0 or self.feature_dim <= 0:
            raise DataError("classes, nodes_per_class, feature_dim must be positive")
        if not (0.0 <= self.p_inter <= self.p_intra <= 1.0):
            raise DataError("need 0 <= p_inter <= p_intra <= 1")
        if self.class_mean_scale < 0 or self.noise_scale < 0:
            raise DataError("scales must be nonnegative")


def generate_sbm(cfg: SbmConfig, seed: int) -> Graph:
    """Sample a block-model graph; the draw order is part of the contract.

    Stream "sbm" of the seed draws, in order: class means (classes x dim
    normals), node features (n x dim normals, nodes in class-major order),
    then one uniform per node pair (u, v) with u < v in lexicographic order.
    """
    rng = Rng(derive_seed(seed, "sbm"))
    n = cfg.classes * cfg.nodes_per_class
    labels = np.repeat(np.arange(cfg.classes, dtype=np.int64), cfg.nodes_per_class)

    means = rng.normal_matrix(cfg.classes, cfg.feature_dim, std=cfg.class_mean_scale)
    noise = rng.normal_matrix(n, cfg.feature_dim, std=cfg.noise_scale)
    features = means[labels] + noise

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], cfg.p_intra, cfg.p_inter)
    draws = rng.uniforms(iu.size)
    mask = draws < prob
    edges = np.column_stack([iu[mask], ju[mask]]).astype(np.int64)
    return Graph(features, labels, edges)


@dataclass
class SessionTask:
    """One protocol step: a disjoint class set with shot train nodes per class."""

    index: int
    classes: tuple[int, ...]
    train_ids: np.ndarray
    test_ids: np.ndarray
    way: int
    shot: int

    def __post_init__(self):
        if len(self.classes) != len(set(self.classes)):
            raise DataError("session classes must be distinct")
        if self.train_ids.size != len(self.classes) * self.shot:
            raise DataError("train_ids must hold exactly shot nodes per class")
        if np.intersect1d(self.train_ids, self.test_ids).size:
            raise DataError("train and test nodes overlap")


def split_sessions(
    g: Graph,
    base_classes,
    novel_classes,
    way: int,
    shot: int,
    seed: int,
) -> tuple[SessionTask, list[SessionTask]]:
    """Base task plus incremental tasks of `way` classes, ascending class id.

    The seed shuffles only which nodes become the K shots (stream "split",
    classes visited in ascending id over base then novel, partial
    Fisher-Yates over each class's ascending node list). Class-to-session
    assignment is fixed by the ascending order.
    """
    base = sorted(int(c) for c in base_classes)
    novel = sorted(int(c) for c in novel_classes)
    if not base:
        raise DataError("need at least one base class")
    if set(base) & set(novel):
        raise DataError("base and novel classes overlap")
    missing = [c for c in base + novel if c not in set(g.classes)]
    if missing:
        raise DataError(f"classes absent from the graph: {missing}")
    if way <= 0 or shot <= 0:
        raise DataError("way and shot must be positive")
    if novel and len(novel) % way != 0:
        raise DataError(f"{len(novel)} novel classes do not divide into {way}-way sessions")

    rng = Rng(derive_seed(seed, "split"))
    train_by_class: dict[int, np.ndarray] = {}
    test_by_class: dict[int, np.ndarray] = {}
    for c in base + novel:
        nodes = g.nodes_of_class(c)
        if nodes.size < shot + 1:
            raise DataError(f"class {c} has {nodes.size} nodes, needs > {shot}")
        picked_idx = sorted(rng.choose(nodes.size, shot))
        picked = nodes[picked_idx]
        train_by_class[c] = picked
        test_by_class[c] = np.setdiff1d(nodes, picked)

    def build(index: int, classes: list[int], task_way: int) -> SessionTask:
        train = np.concatenate([train_by_class[c] for c in classes])
        test = np.concatenate([test_by_class[c] for c in classes])
        return SessionTask(
            index=index,
            classes=tuple(classes),
            train_ids=np.sort(train),
            test_ids=np.sort(test),
            way=task_way,
            shot=shot,
        )

    base_task = build(0, base, len(base))
    sessions = [
        build(i + 1, novel[i * way : (i + 1) * way], way)
        for i in range(len(novel) // way)
    ]
    return base_task, sessions
