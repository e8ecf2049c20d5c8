"""Prototype store, attention pipeline, k-means, and the gram-gap loss."""

import itertools

import numpy as np
import pytest

from gradcheck import assert_gradients_match
from protomem.errors import DataError, DomainError, ShapeError, StateError
from protomem.prototypes import (
    CALLS,
    MecsParams,
    PrototypePipeline,
    PrototypeStore,
    bootstrap_base_prototypes,
    cross_attend,
    edge_loss,
    fuse,
    graph_info,
    majority_vote_labels,
    nearest_prototype,
    project,
    prototype_kmeans,
    reset_call_counters,
    update_store,
)
from protomem.rng import Rng
from protomem.tensor import Tensor, sum_sq


def filled_store(rows, class_ids):
    store = PrototypeStore(np.asarray(rows).shape[1])
    update_store(store, np.asarray(rows, dtype=np.float64), class_ids)
    return store


def make_params(h=8, k=4, r=2, d=6, use_graphinfo=True, seed=0):
    return MecsParams(
        feature_dim=d, hidden_dim=h, proto_dim=k, attn_dim=k,
        proj_dim=r if use_graphinfo else k,
        graphinfo_dim=k, use_graphinfo=use_graphinfo, rng=Rng(seed),
    )


def test_store_append_and_lookup():
    store = filled_store([[1.0, 0.0], [0.0, 2.0]], [5, 3])
    assert store.size == 2
    assert store.class_ids == (5, 3)
    assert store.index_of(3) == 1
    assert np.array_equal(store.row(0), [1.0, 0.0])
    with pytest.raises(ValueError):
        store.matrix()[0, 0] = 9.0  # read-only view


def test_update_store_discards_seen_classes():
    store = filled_store([[1.0, 0.0]], [5])
    first_row = store.row(0).copy()
    added = update_store(store, np.array([[9.0, 9.0], [0.0, 1.0]]), [5, 7])
    assert store.class_ids == (5, 7)
    assert np.array_equal(store.row(0), first_row)
    assert np.array_equal(store.row(1), [0.0, 1.0])
    assert added == [1]


def test_nearest_prototype_matches_brute_force():
    rng = Rng(123)
    for _ in range(1000):
        n = 1 + rng.below(12)
        k = 1 + rng.below(6)
        mat = rng.normal_matrix(n, k)
        store = filled_store(mat, list(range(n)))
        probe = rng.normal_matrix(1, k)[0]
        best = min(
            range(n), key=lambda i: float(((mat[i] - probe) ** 2).sum())
        )
        assert nearest_prototype(store, probe) == best


def test_nearest_prototype_empty_store():
    with pytest.raises(StateError):
        nearest_prototype(PrototypeStore(3), np.zeros(3))


def test_cross_attend_single_prototype_is_constant():
    params = make_params()
    store = filled_store(Rng(1).normal_matrix(1, 4), [0])
    z = Tensor(Rng(2).normal_matrix(5, 8))
    h = cross_attend(z, store, params).data
    expected = store.matrix() @ params.w_v.data
    assert np.allclose(h, np.repeat(expected, 5, axis=0), atol=1e-12)


def test_cross_attend_zero_query_is_uniform():
    params = make_params()
    params.w_q.data[:] = 0.0
    store = filled_store(Rng(3).normal_matrix(4, 4), [0, 1, 2, 3])
    z = Tensor(Rng(4).normal_matrix(6, 8))
    h = cross_attend(z, store, params).data
    mean_row = (store.matrix() @ params.w_v.data).mean(axis=0)
    assert np.allclose(h, np.tile(mean_row, (6, 1)), atol=1e-12)


def test_cross_attend_requires_prototypes():
    params = make_params()
    with pytest.raises(StateError):
        cross_attend(Tensor(np.ones((2, 8))), PrototypeStore(4), params)


def test_projection_preserves_norms_on_average():
    # JL property: with entries N(0, 1/r), E||xR||^2 = ||x||^2
    x = Rng(5).normal_matrix(1, 24)
    target = float((x**2).sum())
    samples = []
    for seed in range(200):
        params = MecsParams(
            feature_dim=4, hidden_dim=24, proto_dim=20, attn_dim=4,
            proj_dim=16, graphinfo_dim=4, use_graphinfo=True, rng=Rng(seed),
        )
        projected = project(Tensor(x), params).data
        samples.append(float((projected**2).sum()))
    assert abs(np.mean(samples) - target) < 0.1 * target


def test_projection_is_frozen():
    params = make_params()
    params.projection.data.flags.writeable = True
    params.projection.data[0, 0] += 1.0
    with pytest.raises(StateError):
        project(Tensor(np.ones((2, 8))), params)


def test_graph_info_single_node_is_value_map():
    params = make_params()
    x = Tensor(Rng(6).normal_matrix(1, 6))
    got = graph_info(x, params).data
    assert np.allclose(got, x.data @ params.wv_g.data, atol=1e-12)


def test_graph_info_disabled_branch():
    params = make_params(use_graphinfo=False)
    with pytest.raises(StateError):
        graph_info(Tensor(np.ones((2, 6))), params)


def test_fuse_placement_and_width():
    g = Tensor(np.ones((3, 2)))
    p = Tensor(np.zeros((3, 1)))
    left = fuse(g, p, "left").data
    right = fuse(g, p, "right").data
    assert left.shape == (3, 3)
    assert np.array_equal(left, np.hstack([np.ones((3, 2)), np.zeros((3, 1))]))
    assert np.array_equal(right, np.hstack([np.zeros((3, 1)), np.ones((3, 2))]))
    with pytest.raises(DomainError):
        fuse(g, p, "middle")


def test_edge_loss_single_node_value():
    x = Tensor([[1.0]])
    u = Tensor([[2.0]])
    assert abs(edge_loss(x, u).item() - 9.0) < 1e-12


def test_edge_loss_zero_on_matching_grams():
    x = Tensor(Rng(7).normal_matrix(4, 3))
    assert edge_loss(x, x).item() < 1e-15


def test_edge_loss_permutation_invariant():
    rng = Rng(8)
    x = rng.normal_matrix(5, 3)
    u = rng.normal_matrix(5, 2)
    base = edge_loss(Tensor(x), Tensor(u)).item()
    perm = Rng(9).choose(5, 5)
    permuted = edge_loss(Tensor(x[perm]), Tensor(u[perm])).item()
    assert abs(base - permuted) < 1e-9


def test_edge_loss_row_mismatch():
    with pytest.raises(ShapeError):
        edge_loss(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 2))))


def test_kmeans_recovers_planted_pairs():
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    centroids, assign = prototype_kmeans(pts, 2, Rng(0))
    got = {tuple(c) for c in centroids}
    assert got == {(0.0, 0.5), (10.0, 0.5)}
    assert assign[0] == assign[1] and assign[2] == assign[3]
    assert assign[0] != assign[2]


def test_kmeans_matches_exhaustive_partition_optimum():
    pts = Rng(10).normal_matrix(7, 2)

    def cost_of(assign):
        total = 0.0
        for c in range(2):
            members = pts[np.array(assign) == c]
            if members.size == 0:
                return np.inf
            total += float(((members - members.mean(axis=0)) ** 2).sum())
        return total

    best = min(cost_of(a) for a in itertools.product([0, 1], repeat=7))
    centroids, assign = prototype_kmeans(pts, 2, Rng(0))
    got = cost_of(list(assign))
    assert got <= best + 1e-9


def test_kmeans_identical_points():
    pts = np.zeros((4, 2))
    centroids, assign = prototype_kmeans(pts, 2, Rng(1))
    assert np.allclose(centroids, 0.0)
    assert set(np.bincount(assign, minlength=2)) != {0}


def test_kmeans_input_validation():
    with pytest.raises(DataError):
        prototype_kmeans(np.ones((2, 2)), 3, Rng(0))
    with pytest.raises(DataError):
        prototype_kmeans(np.ones((2, 2)), 0, Rng(0))


def test_majority_vote_and_empty_cluster():
    assign = np.array([0, 0, 1, 1, 1])
    labels = np.array([4, 4, 9, 9, 4])
    assert majority_vote_labels(assign, labels, 2) == [4, 9]
    with pytest.raises(DataError):
        majority_vote_labels(np.array([0, 0]), np.array([1, 1]), 2)


def test_majority_vote_tie_breaks_low():
    assign = np.array([0, 0])
    labels = np.array([7, 3])
    assert majority_vote_labels(assign, labels, 1) == [3]


def test_bootstrap_base_prototypes_means():
    u = np.array([[0.0, 0.0], [2.0, 2.0], [4.0, 0.0], [8.0, 0.0]])
    labels = np.array([1, 1, 2, 2])
    store = bootstrap_base_prototypes(u, labels, 2)
    assert store.class_ids == (1, 2)
    assert np.array_equal(store.row(0), [1.0, 1.0])
    assert np.array_equal(store.row(1), [6.0, 0.0])


def pipeline_for(use_mecs=True, use_cross=True, use_gi=True, seed=0):
    return PrototypePipeline(
        feature_dim=6, hidden_dim=8, proto_dim=4,
        attn_dim=4, proj_dim=2 if use_gi else 4, graphinfo_attn_dim=4,
        use_mecs=use_mecs, use_cross_attend=use_cross, use_graphinfo=use_gi,
        placement="left", rng=Rng(seed),
    )


def test_pipeline_disabled_mecs_never_calls_attention():
    reset_call_counters()
    pipe = pipeline_for(use_mecs=False, use_cross=False, use_gi=False)
    store = filled_store(Rng(1).normal_matrix(2, 4), [0, 1])
    z = Tensor(Rng(2).normal_matrix(5, 8))
    x = Tensor(Rng(3).normal_matrix(5, 6))
    u = pipe.build(z, x, store)
    assert u.shape == (5, 4)
    assert CALLS["cross_attend"] == 0 and CALLS["graph_info"] == 0
    assert pipe.trainable_params(store) == []


def test_pipeline_empty_store_skips_cross_attend():
    reset_call_counters()
    pipe = pipeline_for()
    store = PrototypeStore(4)
    z = Tensor(Rng(2).normal_matrix(5, 8))
    x = Tensor(Rng(3).normal_matrix(5, 6))
    u = pipe.build(z, x, store)
    assert u.shape == (5, 4)
    assert CALLS["cross_attend"] == 0
    assert CALLS["graph_info"] == 1


def test_pipeline_full_branch_counts():
    reset_call_counters()
    pipe = pipeline_for()
    store = filled_store(Rng(1).normal_matrix(3, 4), [0, 1, 2])
    z = Tensor(Rng(2).normal_matrix(5, 8))
    x = Tensor(Rng(3).normal_matrix(5, 6))
    u = pipe.build(z, x, store)
    assert u.shape == (5, 4)
    assert CALLS["cross_attend"] == 1
    assert CALLS["graph_info"] == 1
    names = pipe.trainable_params(store)
    assert len(names) == 6  # attention triple + feature-summary triple


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_cross_attention_composite(seed):
    params = make_params(seed=seed + 40)
    store = filled_store(Rng(seed).normal_matrix(3, 4), [0, 1, 2])
    z = Tensor(Rng(seed + 1).normal_matrix(4, 8))

    def loss():
        return sum_sq(project(cross_attend(z, store, params), params))

    assert_gradients_match(loss, params.attention_params())


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_graph_info_composite(seed):
    params = make_params(seed=seed + 60)
    x = Tensor(Rng(seed + 2).normal_matrix(4, 6))

    def loss():
        return sum_sq(graph_info(x, params))

    assert_gradients_match(loss, params.graphinfo_params())


@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_edge_loss(seed):
    rng = Rng(seed + 80)
    x = Tensor(rng.normal_matrix(4, 3))
    u = Tensor(rng.normal_matrix(4, 2), requires_grad=True)
    assert_gradients_match(lambda: edge_loss(x, u), [u])
