"""Two-layer GCN encoder, linear head, pretraining, freezing."""

import numpy as np
import pytest

from gradcheck import assert_gradients_match
from protomem.encoder import (
    GcnEncoder,
    MlpHead,
    classify,
    encode,
    normalize_output_scale,
    pretrain,
)
from protomem.errors import DataError, StateError
from protomem.graphs import SbmConfig, SessionTask, generate_sbm
from protomem.rng import Rng, derive_seed
from protomem.tensor import Tensor, no_grad, relu, matmul, sum_sq


def small_graph(seed=0):
    cfg = SbmConfig(
        classes=4, nodes_per_class=50, p_intra=0.2, p_inter=0.01,
        feature_dim=32, class_mean_scale=1.0, noise_scale=0.5,
    )
    return generate_sbm(cfg, seed)


def base_split(g, shot=5, seed=0):
    rng = Rng(derive_seed(seed, "split"))
    train, test = [], []
    for c in g.classes:
        nodes = g.nodes_of_class(c)
        picked = sorted(nodes[i] for i in rng.choose(nodes.size, shot))
        train.extend(picked)
        test.extend(sorted(set(nodes) - set(picked)))
    return SessionTask(
        0, tuple(g.classes), np.sort(np.array(train)), np.sort(np.array(test)),
        len(g.classes), shot,
    )


def accuracy(head, encoder, g, ids):
    with no_grad():
        probs = classify(head, encode(encoder, g, ids)).data
    pred = np.array(head.class_order)[probs.argmax(axis=1)]
    return float((pred == g.labels[ids]).mean())


def test_encode_shapes_and_determinism():
    g = small_graph()
    enc = GcnEncoder(32, 16, Rng(1))
    z1 = encode(enc, g).data
    z2 = encode(enc, g).data
    assert z1.shape == (g.n, 16)
    assert np.array_equal(z1, z2)
    sub = encode(enc, g, [3, 1, 4]).data
    assert np.array_equal(sub, z1[[3, 1, 4]])


def test_encode_dropout_is_seeded():
    g = small_graph()
    enc = GcnEncoder(32, 16, Rng(1))
    a = encode(enc, g, None, 0.5, Rng(9)).data
    b = encode(enc, g, None, 0.5, Rng(9)).data
    c = encode(enc, g, None, 0.5, Rng(10)).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_pretrain_reaches_oracle_accuracy():
    # separable blocks with strong class means must classify at >= 0.9
    # within 300 epochs at learning rate 0.005
    for seed in range(3):
        g = small_graph(seed)
        task = base_split(g, seed=seed)
        enc = GcnEncoder(32, 32, Rng(derive_seed(seed, "encoder-init")))
        head = MlpHead(32, g.classes, Rng(derive_seed(seed, "head-init")))
        losses = pretrain(enc, head, g, task, 300, 0.005, 0.5, seed)
        assert accuracy(head, enc, g, task.test_ids) >= 0.9
        window = np.convolve(losses, np.ones(10) / 10.0, mode="valid")
        assert window[-1] <= window[0] + 1e-9


def test_pretrain_rejects_frozen_encoder():
    g = small_graph()
    enc = GcnEncoder(32, 16, Rng(0))
    enc.freeze()
    head = MlpHead(16, g.classes, Rng(1))
    with pytest.raises(StateError):
        pretrain(enc, head, g, base_split(g), 1, 0.01, 0.0, 0)


def test_freeze_checksum_detects_tampering():
    enc = GcnEncoder(8, 6, Rng(2))
    enc.freeze()
    enc.assert_intact()
    enc.w1.data.flags.writeable = True
    enc.w1.data[0, 0] += 1.0
    with pytest.raises(StateError):
        enc.assert_intact()


def test_normalize_output_scale_preserves_logits():
    g = small_graph()
    enc = GcnEncoder(32, 16, Rng(3))
    head = MlpHead(16, g.classes, Rng(4))
    head.b.data[:] = 0.1  # nonzero bias must survive untouched
    with no_grad():
        before = matmul(encode(enc, g), head.w).data + head.b.data
    normalize_output_scale(enc, head, g)
    with no_grad():
        z = encode(enc, g)
        after = matmul(z, head.w).data + head.b.data
    assert np.allclose(before, after, rtol=1e-9, atol=1e-12)
    assert abs(np.linalg.norm(z.data, axis=1).max() - 1.0) < 1e-9


def test_normalize_output_scale_rejects_frozen():
    g = small_graph()
    enc = GcnEncoder(32, 16, Rng(3))
    head = MlpHead(16, g.classes, Rng(4))
    enc.freeze()
    with pytest.raises(StateError):
        normalize_output_scale(enc, head, g)


def test_head_grow_preserves_old_columns_bitwise():
    head = MlpHead(8, [0, 1, 2], Rng(5))
    w_before = head.w.data.copy()
    b_before = head.b.data.copy()
    z = Tensor(Rng(6).normal_matrix(10, 8))
    with no_grad():
        logits_before = matmul(z, head.w).data + head.b.data
    head.grow([7, 9], Rng(7))
    assert head.class_order == [0, 1, 2, 7, 9]
    assert np.array_equal(head.w.data[:, :3], w_before)
    assert np.array_equal(head.b.data[:, :3], b_before)
    with no_grad():
        logits_after = matmul(z, head.w).data + head.b.data
    assert np.array_equal(logits_after[:, :3], logits_before)


def test_head_grow_rejects_duplicates():
    head = MlpHead(8, [0, 1], Rng(5))
    with pytest.raises(DataError):
        head.grow([1], Rng(6))


def test_head_column_lookup():
    head = MlpHead(4, [3, 1, 2], Rng(0))
    assert head.col_of(1) == 1
    assert list(head.columns_for([2, 3])) == [2, 0]
    with pytest.raises(DataError):
        head.col_of(9)


def test_head_clone_is_independent():
    head = MlpHead(4, [0, 1], Rng(0))
    dup = head.clone()
    dup.w.data[0, 0] += 1.0
    assert head.w.data[0, 0] != dup.w.data[0, 0]
    assert dup.class_order == head.class_order


def test_classify_rows_are_distributions():
    head = MlpHead(6, [0, 1, 2], Rng(1))
    z = Tensor(Rng(2).normal_matrix(5, 6))
    p = classify(head, z).data
    assert p.shape == (5, 3)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_gcn_layer_composite(seed):
    rng = Rng(seed + 900)
    a_hat = Tensor(np.abs(rng.normal_matrix(4, 4)) + 0.1)
    x = Tensor(rng.normal_matrix(4, 3))
    w1 = Tensor(rng.normal_matrix(3, 5) + 0.3, requires_grad=True)
    w2 = Tensor(rng.normal_matrix(5, 2) + 0.3, requires_grad=True)

    def loss():
        h = relu(matmul(matmul(a_hat, x), w1))
        return sum_sq(relu(matmul(matmul(a_hat, h), w2)))

    assert_gradients_match(loss, [w1, w2])
