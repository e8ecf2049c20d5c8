"""Graph loading, adjacency normalization, SBM sampling, session splits."""

import numpy as np
import pytest

from protomem.errors import DataError, FormatError
from protomem.graphs import (
    Graph,
    SbmConfig,
    SessionTask,
    generate_sbm,
    load_graph,
    normalize_adjacency,
    split_sessions,
)
from protomem.rng import Rng


def brute_force_normalized(edges, n):
    """Reference D^{-1/2} (A + I) D^{-1/2} built entry by entry."""
    a = np.eye(n)
    for u, v in edges:
        a[u, v] = 1.0
        a[v, u] = 1.0
    deg = a.sum(axis=1)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = a[i, j] / np.sqrt(deg[i] * deg[j])
    return out


def test_two_node_normalization():
    got = normalize_adjacency(np.array([[0, 1]]), 2).data
    assert np.allclose(got, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


def test_isolated_node_keeps_self_loop():
    got = normalize_adjacency(np.zeros((0, 2), dtype=np.int64), 3).data
    assert np.allclose(got, np.eye(3))


def test_normalization_matches_brute_force():
    for seed in range(50):
        rng = Rng(seed)
        n = 2 + rng.below(9)
        pairs = []
        for u in range(n):
            for v in range(u + 1, n):
                if rng.uniform() < 0.4:
                    pairs.append((u, v))
        edges = np.array(pairs, dtype=np.int64) if pairs else np.zeros((0, 2), dtype=np.int64)
        got = normalize_adjacency(edges, n).data
        assert np.allclose(got, brute_force_normalized(pairs, n), atol=1e-12)


def test_graph_basic_invariants():
    g = Graph(np.eye(4), np.array([0, 0, 1, 1]), [(0, 1), (2, 3)])
    assert g.n == 4 and g.feature_dim == 4
    assert list(g.classes) == [0, 1]
    assert list(g.nodes_of_class(1)) == [2, 3]
    rows = g.feature_rows([2, 0]).data
    assert np.array_equal(rows, np.eye(4)[[2, 0]])


def test_sbm_edge_counts_within_binomial_bounds():
    cfg = SbmConfig(classes=3, nodes_per_class=40, p_intra=0.2, p_inter=0.02, feature_dim=4)
    intra_trials = 3 * (40 * 39) // 2
    inter_trials = (120 * 119) // 2 - intra_trials
    intra_counts = []
    inter_counts = []
    for seed in range(20):
        g = generate_sbm(cfg, seed)
        same = g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]
        intra_counts.append(int(same.sum()))
        inter_counts.append(int((~same).sum()))
    for counts, trials, p in (
        (intra_counts, intra_trials, 0.2),
        (inter_counts, inter_trials, 0.02),
    ):
        mean = np.mean(counts)
        sigma = np.sqrt(trials * p * (1 - p) / len(counts))
        assert abs(mean - trials * p) < 3 * sigma


def test_sbm_extreme_probabilities():
    cfg = SbmConfig(classes=2, nodes_per_class=10, p_intra=1.0, p_inter=0.0, feature_dim=3)
    g = generate_sbm(cfg, 0)
    same = g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]
    assert same.all()
    assert len(g.edges) == 2 * (10 * 9) // 2


def test_sbm_feature_class_structure():
    cfg = SbmConfig(
        classes=4, nodes_per_class=50, p_intra=0.1, p_inter=0.01,
        feature_dim=16, class_mean_scale=1.0, noise_scale=0.1,
    )
    g = generate_sbm(cfg, 3)
    centers = np.vstack([g.x.data[g.labels == c].mean(axis=0) for c in range(4)])
    spread = np.vstack([g.x.data[g.labels == c].std(axis=0) for c in range(4)])
    gaps = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
    np.fill_diagonal(gaps, np.inf)
    assert gaps.min() > 10 * spread.mean()


def test_sbm_determinism_and_seed_sensitivity():
    cfg = SbmConfig(classes=2, nodes_per_class=10, p_intra=0.3, p_inter=0.05, feature_dim=4)
    a, b = generate_sbm(cfg, 5), generate_sbm(cfg, 5)
    assert np.array_equal(a.x.data, b.x.data)
    assert np.array_equal(a.edges, b.edges)
    c = generate_sbm(cfg, 6)
    assert not np.array_equal(a.x.data, c.x.data)


def test_sbm_config_validation():
    with pytest.raises(DataError):
        SbmConfig(classes=0, nodes_per_class=5, p_intra=0.1, p_inter=0.01, feature_dim=2)
    with pytest.raises(DataError):
        SbmConfig(classes=2, nodes_per_class=5, p_intra=0.1, p_inter=0.2, feature_dim=2)


def write_graph_files(tmp_path, features, labels, edge_lines):
    fpath = tmp_path / "features.csv"
    fpath.write_text("\n".join(",".join(f"{v}" for v in row) for row in features) + "\n")
    lpath = tmp_path / "labels.txt"
    lpath.write_text("\n".join(str(v) for v in labels) + "\n")
    epath = tmp_path / "edges.txt"
    epath.write_text("\n".join(edge_lines) + "\n")
    return str(epath), str(fpath), str(lpath)


def test_load_graph_round_trip(tmp_path):
    paths = write_graph_files(
        tmp_path,
        [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
        [0, 1, 1],
        ["0 1", "1 2", "# comment", "1 2"],
    )
    g = load_graph(*paths)
    assert g.n == 3
    assert np.array_equal(g.labels, [0, 1, 1])
    assert len(g.edges) == 2  # duplicate collapsed


def test_load_graph_error_surfaces(tmp_path):
    with pytest.raises(FormatError):
        load_graph(*write_graph_files(tmp_path, [[1.0], [2.0]], [0, 1], ["0 1 2"]))
    with pytest.raises(FormatError):
        load_graph(*write_graph_files(tmp_path, [[1.0], [2.0]], [0, 1], ["0 x"]))
    with pytest.raises(DataError):
        load_graph(*write_graph_files(tmp_path, [[1.0], [2.0], [3.0]], [0, 1], ["0 1"]))
    with pytest.raises(FormatError):
        load_graph(*write_graph_files(tmp_path, [[1.0], [2.0]], [0, "zero"], ["0 1"]))


def make_sbm(classes=24, nodes=12, seed=0):
    return generate_sbm(
        SbmConfig(classes=classes, nodes_per_class=nodes, p_intra=0.3,
                  p_inter=0.02, feature_dim=4),
        seed,
    )


def test_split_shapes_and_disjointness():
    g = make_sbm()
    base_task, sessions = split_sessions(g, range(4), range(4, 24), way=2, shot=5, seed=1)
    assert base_task.index == 0
    assert base_task.way == 4 and base_task.shot == 5
    assert base_task.train_ids.size == 4 * 5
    assert len(sessions) == 10
    all_classes = [base_task.classes] + [s.classes for s in sessions]
    flat = [c for group in all_classes for c in group]
    assert len(flat) == len(set(flat))
    for i, s in enumerate(sessions, start=1):
        assert s.index == i and s.way == 2
        assert s.train_ids.size == 2 * 5
        assert np.intersect1d(s.train_ids, s.test_ids).size == 0
        labels = g.labels[s.train_ids]
        for c in s.classes:
            assert (labels == c).sum() == 5
        assert s.test_ids.size == sum((g.labels == c).sum() - 5 for c in s.classes)


def test_split_sessions_ascending_class_order():
    g = make_sbm(classes=8)
    _, sessions = split_sessions(g, [0, 1], [2, 3, 4, 5, 6, 7], way=2, shot=3, seed=5)
    assert [s.classes for s in sessions] == [(2, 3), (4, 5), (6, 7)]


def test_split_seed_changes_picks_not_classes():
    g = make_sbm(classes=6)
    _, s1 = split_sessions(g, [0, 1], [2, 3, 4, 5], way=2, shot=4, seed=1)
    _, s2 = split_sessions(g, [0, 1], [2, 3, 4, 5], way=2, shot=4, seed=2)
    assert [s.classes for s in s1] == [s.classes for s in s2]
    assert not all(
        np.array_equal(a.train_ids, b.train_ids) for a, b in zip(s1, s2)
    )


def test_split_error_surfaces():
    g = make_sbm(classes=6)
    with pytest.raises(DataError):
        split_sessions(g, [0, 1], [1, 2], way=1, shot=3, seed=0)  # overlap
    with pytest.raises(DataError):
        split_sessions(g, [0], [1, 2, 3], way=2, shot=3, seed=0)  # 3 % 2 != 0
    with pytest.raises(DataError):
        split_sessions(g, [0], [9], way=1, shot=3, seed=0)  # absent class
    with pytest.raises(DataError):
        split_sessions(g, [0], [1], way=1, shot=12, seed=0)  # shot too large


def test_session_task_validation():
    with pytest.raises(DataError):
        SessionTask(0, (1, 1), np.array([0, 1]), np.array([2]), 2, 1)
    with pytest.raises(DataError):
        SessionTask(0, (1, 2), np.array([0]), np.array([2]), 2, 1)
    with pytest.raises(DataError):
        SessionTask(0, (1,), np.array([0]), np.array([0, 2]), 1, 1)
