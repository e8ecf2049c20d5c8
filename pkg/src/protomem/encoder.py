"""Frozen-after-pretraining GCN encoder and a growable softmax head.

The encoder is two propagation layers: Z = relu(A_hat relu(A_hat X W1) W2).
Pretraining trains encoder and head jointly with cross-entropy on the base
task's shots; freeze() then locks the encoder (arrays become read-only and a
checksum is recorded) so later sessions can only move the head.

The head grows by appending columns. Existing columns are copied verbatim,
so logits for old classes are bit-identical before and after a grow.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import DataError, NumericError, StateError
from .graphs import Graph, SessionTask
from .rng import Rng, derive_seed
from .tensor import (
    Sgd,
    Tensor,
    add,
    backward,
    cross_entropy,
    dropout,
    gather_rows,
    matmul,
    no_grad,
    relu,
    softmax_rows,
)


class GcnEncoder:
    def __init__(self, feature_dim: int, hidden_dim: int, rng: Rng):
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.w1 = Tensor(
            rng.normal_matrix(feature_dim, hidden_dim, std=1.0 / np.sqrt(feature_dim)),
            requires_grad=True,
        )
        self.w2 = Tensor(
            rng.normal_matrix(hidden_dim, hidden_dim, std=1.0 / np.sqrt(hidden_dim)),
            requires_grad=True,
        )
        self.frozen = False
        self._frozen_checksum: str | None = None

    def params(self) -> list[Tensor]:
        return [self.w1, self.w2]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.feature_dim, self.hidden_dim], dtype=np.int64).tobytes())
        h.update(self.w1.data.tobytes())
        h.update(self.w2.data.tobytes())
        return h.hexdigest()

    def freeze(self) -> None:
        self.frozen = True
        for p in self.params():
            p.requires_grad = False
            p.grad = None
            p.data.flags.writeable = False
        self._frozen_checksum = self.checksum()

    def assert_intact(self) -> None:
        if not self.frozen:
            raise StateError("encoder is not frozen yet")
        if self.checksum() != self._frozen_checksum:
            raise StateError("frozen encoder parameters changed")


def encode(
    encoder: GcnEncoder,
    g: Graph,
    node_ids=None,
    dropout_rate: float = 0.0,
    dropout_rng: Rng | None = None,
) -> Tensor:
    """Two-layer propagation, optionally restricted to node_ids rows.

    A_hat @ X is a constant of the graph and comes from its cache; the
    association (A_hat X) W1 is fixed so repeated runs are bit-identical.
    """
    if g.feature_dim != encoder.feature_dim:
        raise DataError(
            f"graph features have dim {g.feature_dim}, encoder expects {encoder.feature_dim}"
        )
    px = Tensor(g.propagated_features())
    h1 = relu(matmul(px, encoder.w1))
    if dropout_rate > 0.0:
        if dropout_rng is None:
            raise StateError("dropout_rate set but no rng supplied")
        h1 = dropout(h1, dropout_rate, dropout_rng)
    z = relu(matmul(g.a_hat, matmul(h1, encoder.w2)))
    if dropout_rate > 0.0:
        z = dropout(z, dropout_rate, dropout_rng)
    if node_ids is None:
        return z
    return gather_rows(z, node_ids)


class MlpHead:
    """Linear map to class probabilities; columns appear in class_order."""

    INIT_STD = 0.01

    def __init__(self, hidden_dim: int, classes, rng: Rng):
        self.hidden_dim = hidden_dim
        self.class_order: list[int] = [int(c) for c in classes]
        if len(self.class_order) != len(set(self.class_order)):
            raise DataError("duplicate class ids in head construction")
        c = len(self.class_order)
        self.w = Tensor(rng.normal_matrix(hidden_dim, c, std=self.INIT_STD), requires_grad=True)
        self.b = Tensor(np.zeros((1, c)), requires_grad=True)

    @property
    def n_classes(self) -> int:
        return len(self.class_order)

    def col_of(self, class_id: int) -> int:
        try:
            return self.class_order.index(int(class_id))
        except ValueError:
            raise DataError(f"class {class_id} unknown to the head") from None

    def columns_for(self, labels) -> np.ndarray:
        lut = {c: i for i, c in enumerate(self.class_order)}
        try:
            return np.array([lut[int(y)] for y in labels], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"label {exc.args[0]} unknown to the head") from None

    def params(self) -> list[Tensor]:
        return [self.w, self.b]

    def grow(self, new_classes, rng: Rng) -> None:
        """Append one column per new class; old columns are copied verbatim."""
        new_classes = [int(c) for c in new_classes]
        if not new_classes:
            raise DataError("grow called with no new classes")
        overlap = set(new_classes) & set(self.class_order)
        if overlap:
            raise DataError(f"classes already present: {sorted(overlap)}")
        extra_w = rng.normal_matrix(self.hidden_dim, len(new_classes), std=self.INIT_STD)
        self.w = Tensor(np.hstack([self.w.data, extra_w]), requires_grad=True)
        self.b = Tensor(
            np.hstack([self.b.data, np.zeros((1, len(new_classes)))]), requires_grad=True
        )
        self.class_order.extend(new_classes)

    def clone(self) -> "MlpHead":
        dup = MlpHead.__new__(MlpHead)
        dup.hidden_dim = self.hidden_dim
        dup.class_order = list(self.class_order)
        dup.w = Tensor(self.w.data, requires_grad=True)
        dup.b = Tensor(self.b.data, requires_grad=True)
        return dup


def classify(head: MlpHead, z: Tensor) -> Tensor:
    """Row-stochastic class probabilities for encoded nodes."""
    return softmax_rows(add(matmul(z, head.w), head.b))


def pretrain(
    encoder: GcnEncoder,
    head: MlpHead,
    g: Graph,
    base: SessionTask,
    epochs: int,
    lr: float,
    dropout_rate: float,
    seed: int,
    momentum: float = 0.0,
) -> list[float]:
    """Joint cross-entropy training on the base shots; returns the loss curve."""
    if encoder.frozen:
        raise StateError("encoder is already frozen")
    drop_rng = Rng(derive_seed(seed, "pretrain-dropout"))
    cols = head.columns_for(g.labels[base.train_ids])
    opt = Sgd(lr, momentum)
    losses: list[float] = []
    params = encoder.params() + head.params()
    for epoch in range(epochs):
        try:
            z = encode(encoder, g, base.train_ids, dropout_rate, drop_rng)
            probs = classify(head, z)
            loss = cross_entropy(probs, cols)
            backward(loss)
            opt.step(params)
        except NumericError as exc:
            raise NumericError(f"pretraining diverged at epoch {epoch}: {exc}") from exc
        losses.append(loss.item())
    normalize_output_scale(encoder, head, g)
    return losses


def normalize_output_scale(encoder: GcnEncoder, head: MlpHead, g: Graph) -> None:
    """Rescale (W2, head) so the largest embedding norm is 1.

    Cross-entropy inflates embeddings together with head weights; only their
    product matters to the classifier. Scaling W2 by 1/s and the head by s
    (ReLU is positively homogeneous, biases untouched by construction) leaves
    every logit unchanged up to float rounding while giving downstream
    consumers of the embedding a dataset-independent scale. The maximum, not
    an average, sets
    the scale: prototypes are mixtures of embedding rows and the gram terms
    they feed compare against bounded feature products, so it is the tail of
    the norm distribution that must be boxed in.
    """
    if encoder.frozen:
        raise StateError("cannot rescale a frozen encoder")
    with no_grad():
        z = encode(encoder, g)
    norms = np.linalg.norm(z.data, axis=1)
    s = float(norms.max())
    if not np.isfinite(s) or s < 1e-9:
        raise NumericError("encoder output collapsed; cannot normalize its scale")
    encoder.w2.data /= s
    head.w.data *= s
