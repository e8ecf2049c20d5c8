"""Class prototype construction and storage.

Prototypes live in a k-dimensional space assembled from two views of a train
batch: a cross-attention read of the frozen prototype store (projected down to
r dims through a fixed Gaussian map) and a self-attention summary of the raw
features (k - r dims). Concatenating the two gives the rows U that k-means
turns into per-class centroids. The store is append-only: once a class's
prototype is inserted its bytes never change.

Module-level CALLS counters exist so tests can assert which stages ran.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ContractError, DataError, DomainError, ShapeError, StateError
from .rng import Rng
from .tensor import (
    Tensor,
    concat_cols,
    matmul,
    relu,
    scale,
    softmax_rows,
    sub,
    sum_sq,
    transpose,
)

CALLS = {"cross_attend": 0, "graph_info": 0}


def reset_call_counters() -> None:
    for key in CALLS:
        CALLS[key] = 0


class PrototypeStore:
    """Append-only, one frozen k-dimensional row per class."""

    def __init__(self, dim: int):
        if dim <= 0:
            raise ShapeError("prototype dimension must be positive")
        self.dim = dim
        self._rows = np.zeros((0, dim))
        self._rows.flags.writeable = False
        self._class_ids: list[int] = []

    @property
    def size(self) -> int:
        return len(self._class_ids)

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(self._class_ids)

    def has_class(self, class_id: int) -> bool:
        return int(class_id) in self._class_ids

    def index_of(self, class_id: int) -> int:
        try:
            return self._class_ids.index(int(class_id))
        except ValueError:
            raise ContractError(f"class {class_id} has no prototype") from None

    def row(self, index: int) -> np.ndarray:
        return self._rows[index].copy()

    def matrix(self) -> np.ndarray:
        return self._rows  # read-only view

    def as_tensor(self) -> Tensor:
        if self.size == 0:
            raise StateError("prototype store is empty")
        return Tensor(self._rows)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.array(self._class_ids, dtype=np.int64).tobytes())
        h.update(self._rows.tobytes())
        return h.hexdigest()

    def _append(self, rows: np.ndarray, class_ids: list[int]) -> None:
        stacked = np.vstack([self._rows, rows]) if rows.size else self._rows.copy()
        stacked.flags.writeable = False
        self._rows = stacked
        self._class_ids.extend(class_ids)


class MecsParams:
    """Attention weights, the frozen Gaussian projection, and fusion dims.

    With the feature-summary branch enabled the layout is r projected dims
    plus (k - r) summary dims and 0 < r < k must hold; disabling the branch
    widens the projection to all k dims (r == k).
    """

    def __init__(
        self,
        feature_dim: int,
        hidden_dim: int,
        proto_dim: int,
        attn_dim: int,
        proj_dim: int,
        graphinfo_dim: int,
        use_graphinfo: bool,
        rng: Rng,
    ):
        h, k, m, r, a = hidden_dim, proto_dim, attn_dim, proj_dim, graphinfo_dim
        if min(h, k, m, r, a) <= 0:
            raise ShapeError("all attention dims must be positive")
        if use_graphinfo:
            if not r < k:
                raise ShapeError(f"need proj_dim < proto_dim, got {r} >= {k}")
        elif r != k:
            raise ShapeError("without the feature summary the projection must fill all k dims")
        if not k < h:
            raise ShapeError(f"need proto_dim < hidden_dim, got {k} >= {h}")
        self.hidden_dim = h
        self.proto_dim = k
        self.attn_dim = m
        self.proj_dim = r
        self.graphinfo_dim = a
        self.use_graphinfo = use_graphinfo
        # draw order: w_q, w_k, w_v, R, then the feature-summary triple
        self.w_q = Tensor(rng.normal_matrix(h, m, std=1.0 / np.sqrt(h)), requires_grad=True)
        self.w_k = Tensor(rng.normal_matrix(k, m, std=1.0 / np.sqrt(k)), requires_grad=True)
        self.w_v = Tensor(rng.normal_matrix(k, h, std=1.0 / np.sqrt(k)), requires_grad=True)
        self.projection = Tensor(rng.normal_matrix(h, r, std=1.0 / np.sqrt(r)))
        self.projection.data.flags.writeable = False
        self._projection_checksum = hashlib.sha256(self.projection.data.tobytes()).hexdigest()
        if use_graphinfo:
            d = feature_dim
            self.wq_g = Tensor(rng.normal_matrix(d, a, std=1.0 / np.sqrt(d)), requires_grad=True)
            self.wk_g = Tensor(rng.normal_matrix(d, a, std=1.0 / np.sqrt(d)), requires_grad=True)
            self.wv_g = Tensor(
                rng.normal_matrix(d, k - r, std=1.0 / np.sqrt(d)), requires_grad=True
            )
        else:
            self.wq_g = self.wk_g = self.wv_g = None

    def verify_projection(self) -> None:
        digest = hashlib.sha256(self.projection.data.tobytes()).hexdigest()
        if digest != self._projection_checksum:
            raise StateError("frozen Gaussian projection changed")

    def attention_params(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v]

    def graphinfo_params(self) -> list[Tensor]:
        if not self.use_graphinfo:
            return []
        return [self.wq_g, self.wk_g, self.wv_g]


def cross_attend(z: Tensor, store: PrototypeStore, params: MecsParams) -> Tensor:
    """Read the prototype store by scaled dot-product attention; output is n x h."""
    CALLS["cross_attend"] += 1
    if store.size == 0:
        raise StateError("cross_attend needs a non-empty prototype store")
    m_mat = store.as_tensor()
    queries = matmul(z, params.w_q)
    keys = matmul(m_mat, params.w_k)
    weights = softmax_rows(scale(matmul(queries, transpose(keys)), 1.0 / np.sqrt(params.attn_dim)))
    return matmul(weights, matmul(m_mat, params.w_v))


def project(h: Tensor, params: MecsParams) -> Tensor:
    """Fixed Gaussian down-projection of attention output rows."""
    params.verify_projection()
    return matmul(h, params.projection)


def graph_info(x: Tensor, params: MecsParams) -> Tensor:
    """Self-attention summary of the raw feature rows; output is n x (k - r)."""
    CALLS["graph_info"] += 1
    if not params.use_graphinfo:
        raise StateError("feature-summary branch is disabled in these params")
    queries = matmul(x, params.wq_g)
    keys = matmul(x, params.wk_g)
    weights = softmax_rows(
        scale(matmul(queries, transpose(keys)), 1.0 / np.sqrt(params.graphinfo_dim))
    )
    return matmul(weights, matmul(x, params.wv_g))


def fuse(summary: Tensor, projected: Tensor, placement: str = "left") -> Tensor:
    """Concatenate the two branches into U; placement picks which goes first."""
    if placement == "left":
        return concat_cols(summary, projected)
    if placement == "right":
        return concat_cols(projected, summary)
    raise DomainError(f"placement must be left or right, got {placement!r}")


def edge_loss(x: Tensor, u: Tensor) -> Tensor:
    """Squared Frobenius gap between feature and prototype-space Grams, over n^2."""
    if x.shape[0] != u.shape[0]:
        raise ShapeError(f"edge_loss row mismatch: {x.shape} vs {u.shape}")
    n = x.shape[0]
    gram_x = matmul(x, transpose(x))
    gram_u = matmul(u, transpose(u))
    return scale(sum_sq(sub(gram_x, gram_u)), 1.0 / float(n * n))


def prototype_kmeans(
    points: np.ndarray,
    n_clusters: int,
    rng: Rng,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iteration with k-means++ seeding, deterministic under rng.

    Ties in point assignment go to the lowest centroid index; an empty
    cluster steals the point currently farthest from its own centroid.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ShapeError("points must be 2-D")
    n = pts.shape[0]
    if n_clusters <= 0:
        raise DataError("need at least one cluster")
    if n < n_clusters:
        raise DataError(f"{n} points cannot fill {n_clusters} clusters")

    centroids = np.empty((n_clusters, pts.shape[1]))
    centroids[0] = pts[rng.below(n)]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for idx in range(1, n_clusters):
        total = d2.sum()
        if total <= 0.0:
            pick = rng.below(n)
        else:
            threshold = rng.uniform() * total
            pick = int(np.searchsorted(np.cumsum(d2), threshold, side="right"))
            pick = min(pick, n - 1)
        centroids[idx] = pts[pick]
        d2 = np.minimum(d2, ((pts - centroids[idx]) ** 2).sum(axis=1))

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dist2.argmin(axis=1)
        own = dist2[np.arange(n), assign].copy()
        while True:
            sizes = np.bincount(assign, minlength=n_clusters)
            empties = np.flatnonzero(sizes == 0)
            if empties.size == 0:
                break
            # steal the farthest point whose departure leaves its cluster nonempty
            candidates = np.where(sizes[assign] > 1, own, -np.inf)
            thief = int(candidates.argmax())
            assign[thief] = empties[0]
            own[thief] = -1.0
        new_centroids = np.vstack([pts[assign == c].mean(axis=0) for c in range(n_clusters)])
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if shift < tol:
            break
    dist2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assign = dist2.argmin(axis=1)
    return centroids, assign


def nearest_prototype(store: PrototypeStore, u_row: np.ndarray) -> int:
    """Index of the closest stored prototype (Euclidean, ties to lowest index)."""
    if store.size == 0:
        raise StateError("prototype store is empty")
    row = np.asarray(u_row, dtype=np.float64).reshape(-1)
    if row.size != store.dim:
        raise ShapeError(f"row has dim {row.size}, store holds dim {store.dim}")
    d2 = ((store.matrix() - row) ** 2).sum(axis=1)
    return int(d2.argmin())


def update_store(
    store: PrototypeStore, centroids: np.ndarray, cluster_labels
) -> list[int]:
    """Insert centroids for unseen classes; already-stored classes are dropped.

    cluster_labels[i] is the class id assigned to centroids[i]. New classes
    are appended in ascending class id so store order matches the order other
    per-class structures use. Returns the class ids actually inserted.
    """
    cents = np.asarray(centroids, dtype=np.float64)
    labels = [int(c) for c in cluster_labels]
    if cents.ndim != 2 or cents.shape[1] != store.dim:
        raise ShapeError(f"centroids must be (*, {store.dim})")
    if cents.shape[0] != len(labels):
        raise ShapeError("one class id per centroid required")
    fresh = [(c, cents[i]) for i, c in enumerate(labels) if not store.has_class(c)]
    fresh_ids = [c for c, _ in fresh]
    if len(fresh_ids) != len(set(fresh_ids)):
        raise ContractError("two new centroids mapped to the same class")
    fresh.sort(key=lambda item: item[0])
    if fresh:
        store._append(np.vstack([row for _, row in fresh]), [c for c, _ in fresh])
    return [c for c, _ in fresh]


def bootstrap_base_prototypes(
    u: np.ndarray, labels: np.ndarray, dim: int
) -> PrototypeStore:
    """Base-session store: the per-class mean of U rows, one row per class."""
    u = np.asarray(u, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if u.ndim != 2 or u.shape[1] != dim:
        raise ShapeError(f"U must be (*, {dim})")
    if u.shape[0] != labels.size:
        raise ShapeError("one label per U row required")
    store = PrototypeStore(dim)
    class_ids = sorted(int(c) for c in np.unique(labels))
    means = np.vstack([u[labels == c].mean(axis=0) for c in class_ids])
    store._append(means, class_ids)
    return store


class PrototypePipeline:
    """Turns (encoded rows, raw feature rows, store) into prototype-space rows U.

    The three switches mirror the ablation arms: use_mecs=False degenerates to
    a fixed Gaussian projection of the encoded rows (no attention, no
    trainables); use_cross_attend=False skips the store read; and
    use_graphinfo=False widens the projection to all k dims. Cross-attention
    only activates once the store holds at least one prototype, which is also
    what makes the base session a bootstrap pass.
    """

    def __init__(
        self,
        feature_dim: int,
        hidden_dim: int,
        proto_dim: int,
        attn_dim: int,
        proj_dim: int,
        graphinfo_attn_dim: int,
        use_mecs: bool,
        use_cross_attend: bool,
        use_graphinfo: bool,
        placement: str,
        rng: Rng,
    ):
        if placement not in ("left", "right"):
            raise DomainError(f"placement must be left or right, got {placement!r}")
        if (use_cross_attend or use_graphinfo) and not use_mecs:
            raise DomainError("attention stages require use_mecs")
        self.use_mecs = use_mecs
        self.use_cross_attend = use_cross_attend
        self.use_graphinfo = use_graphinfo
        self.placement = placement
        self.proto_dim = proto_dim
        if use_mecs:
            effective_r = proj_dim if use_graphinfo else proto_dim
            self.params = MecsParams(
                feature_dim,
                hidden_dim,
                proto_dim,
                attn_dim,
                effective_r,
                graphinfo_attn_dim,
                use_graphinfo,
                rng,
            )
            self.plain_projection = None
        else:
            self.params = None
            proj = rng.normal_matrix(hidden_dim, proto_dim, std=1.0 / np.sqrt(proto_dim))
            self.plain_projection = Tensor(proj)
            self.plain_projection.data.flags.writeable = False

    def trainable_params(self, store: PrototypeStore) -> list[Tensor]:
        """Parameters that actually receive gradient this session."""
        if not self.use_mecs:
            return []
        out: list[Tensor] = []
        if self.use_cross_attend and store.size > 0:
            out.extend(self.params.attention_params())
        out.extend(self.params.graphinfo_params())
        return out

    def build(self, z: Tensor, x: Tensor, store: PrototypeStore) -> Tensor:
        if not self.use_mecs:
            return matmul(z, self.plain_projection)
        if self.use_cross_attend and store.size > 0:
            h = cross_attend(z, store, self.params)
        else:
            h = z
        projected = project(h, self.params)
        if not self.use_graphinfo:
            return projected
        summary = graph_info(x, self.params)
        return fuse(summary, projected, self.placement)


def majority_vote_labels(assign: np.ndarray, node_labels: np.ndarray, n_clusters: int) -> list[int]:
    """Per-cluster majority class over the train nodes; ties to lowest class id."""
    assign = np.asarray(assign, dtype=np.int64)
    node_labels = np.asarray(node_labels, dtype=np.int64)
    votes: list[int] = []
    for c in range(n_clusters):
        members = node_labels[assign == c]
        if members.size == 0:
            raise DataError(f"cluster {c} has no members to vote")
        ids, counts = np.unique(members, return_counts=True)
        votes.append(int(ids[counts == counts.max()].min()))
    return votes
