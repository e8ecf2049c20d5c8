"""Incremental session protocol: pretraining, per-session training, metrics.

A run is: pretrain on the base task, freeze the encoder, then walk the
sessions in order. Each session grows the classifier head, creates memory rows
for the new classes, trains with the combined loss, and finally freezes the
session's centroids into the prototype store. Accuracy after each session is
measured on the union of all seen test sets with the classifier's argmax; the
memory-lookup route is logged as a diagnostic, not the headline number.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import GcnEncoder, MlpHead, classify, encode, pretrain
from .errors import (
    ConfigError,
    DataError,
    DomainError,
    NumericError,
    StateError,
)
from .graphs import Graph, SbmConfig, SessionTask, generate_sbm, load_graph, split_sessions
from .memory import MemoryStore, TeacherMlp, TEACHER_MODES, memory_loss, teacher_output, update_loss
from .prototypes import (
    PrototypePipeline,
    PrototypeStore,
    bootstrap_base_prototypes,
    edge_loss,
    majority_vote_labels,
    nearest_prototype,
    prototype_kmeans,
    update_store,
)
from .rng import Rng, derive_seed
from .tensor import LOG_FLOOR, Sgd, Tensor, add, backward, cross_entropy, no_grad, scale


@dataclass
class RunConfig:
    """Flat run description; every field doubles as a config-file key."""

    data: str = "sbm"
    edges_path: str = ""
    features_path: str = ""
    labels_path: str = ""

    sbm_classes: int = 10
    sbm_nodes_per_class: int = 200
    sbm_p_intra: float = 0.05
    sbm_p_inter: float = 0.005
    sbm_feature_dim: int = 32
    sbm_class_mean_scale: float = 0.2
    sbm_noise_scale: float = 0.06

    base_classes: int = 4
    novel_classes: int = 0  # 0 means: every class after the base block
    way: int = 2
    shot: int = 5

    hidden_dim: int = 32
    proto_dim: int = 14
    proj_dim: int = 1
    attn_dim: int = 0  # 0 means proto_dim
    graphinfo_attn_dim: int = 0  # 0 means proto_dim

    pretrain_epochs: int = 500
    pretrain_lr: float = 0.05
    session_epochs: int = 200
    session_lr: float = 0.005
    dropout: float = 0.5
    momentum: float = 0.0

    teacher_mode: str = "gkim"
    use_mecs: bool = True
    use_cross_attend: bool = True
    use_graphinfo: bool = True
    graphinfo_placement: str = "left"
    mlp_teacher_hidden: int = 16

    w_cls: float = 1.0
    w_edge: float = 1.0
    w_memory: float = 1.0
    w_update: float = 1.0
    temperature: float = 1.0

    include_baseline: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.data not in ("sbm", "files"):
            raise ConfigError(f"data must be sbm or files, got {self.data!r}")
        if self.data == "files":
            for key in ("edges_path", "features_path", "labels_path"):
                if not getattr(self, key):
                    raise ConfigError(f"data=files requires {key}")
        for key in ("base_classes", "way", "shot", "hidden_dim", "proto_dim",
                    "session_epochs", "pretrain_epochs", "mlp_teacher_hidden"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.novel_classes < 0:
            raise ConfigError("novel_classes must be >= 0 (0 = all remaining)")
        if not self.proto_dim < self.hidden_dim:
            raise ConfigError("proto_dim must be smaller than hidden_dim")
        if (self.use_cross_attend or self.use_graphinfo) and not self.use_mecs:
            raise ConfigError("use_cross_attend/use_graphinfo require use_mecs")
        if self.use_graphinfo and not 0 < self.proj_dim < self.proto_dim:
            raise ConfigError("need 0 < proj_dim < proto_dim when use_graphinfo is on")
        if self.graphinfo_placement not in ("left", "right"):
            raise ConfigError("graphinfo_placement must be left or right")
        if self.teacher_mode not in TEACHER_MODES:
            raise ConfigError(f"teacher_mode must be one of {TEACHER_MODES}")
        if self.pretrain_lr <= 0 or self.session_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        for key in ("w_cls", "w_edge", "w_memory", "w_update"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be nonnegative")
        if self.attn_dim < 0 or self.graphinfo_attn_dim < 0:
            raise ConfigError("attention dims must be nonnegative")

    @property
    def effective_attn_dim(self) -> int:
        return self.attn_dim or self.proto_dim

    @property
    def effective_graphinfo_attn_dim(self) -> int:
        return self.graphinfo_attn_dim or self.proto_dim

    @property
    def is_naive(self) -> bool:
        return not self.use_mecs and self.teacher_mode == "none"


@dataclass(frozen=True)
class Metrics:
    """Per-session accuracies plus the two protocol summaries."""

    acc: tuple[float, ...]
    pd: float
    avg_acc: float


def compute_metrics(acc) -> Metrics:
    values = [float(a) for a in acc]
    if not values:
        raise DataError("accuracy list is empty")
    for a in values:
        if not 0.0 <= a <= 100.0:
            raise DomainError(f"accuracy {a} outside [0, 100]")
    return Metrics(tuple(values), values[0] - values[-1], sum(values) / len(values))


def total_loss(l_cls, l_edge, l_memory, l_update, weights=(1.0, 1.0, 1.0, 1.0)) -> Tensor:
    """Weighted sum of the four terms; None terms contribute nothing."""
    total: Tensor | None = None
    names = ("l_cls", "l_edge", "l_memory", "l_update")
    for name, term, w in zip(names, (l_cls, l_edge, l_memory, l_update), weights):
        if term is None:
            continue
        value = term.item()
        if not np.isfinite(value):
            raise NumericError(f"loss term {name} is not finite")
        if value < -1e-9:
            raise DomainError(f"loss term {name} is negative")
        piece = scale(term, float(w))
        total = piece if total is None else add(total, piece)
    return total if total is not None else Tensor.scalar(0.0)


@dataclass
class PretrainedState:
    """Everything the sessions need and may not change."""

    cfg: RunConfig
    graph: Graph
    base_task: SessionTask
    sessions: list[SessionTask]
    encoder: GcnEncoder
    head0: MlpHead
    z_full: np.ndarray
    base_acc: float
    pretrain_losses: list[float]
    class_budget: int


@dataclass
class MethodResult:
    name: str
    metrics: Metrics
    loss_rows: list[tuple]  # (session, epoch, l_cls, l_edge, l_memory, l_update, total)
    mram_acc: list[float] | None
    match_acc: list[float] | None
    store_classes: tuple[int, ...]
    store: PrototypeStore | None = None
    memory: MemoryStore | None = None


def build_dataset(cfg: RunConfig) -> tuple[Graph, SessionTask, list[SessionTask]]:
    if cfg.data == "sbm":
        sbm = SbmConfig(
            classes=cfg.sbm_classes,
            nodes_per_class=cfg.sbm_nodes_per_class,
            p_intra=cfg.sbm_p_intra,
            p_inter=cfg.sbm_p_inter,
            feature_dim=cfg.sbm_feature_dim,
            class_mean_scale=cfg.sbm_class_mean_scale,
            noise_scale=cfg.sbm_noise_scale,
        )
        g = generate_sbm(sbm, cfg.seed)
    else:
        g = load_graph(cfg.edges_path, cfg.features_path, cfg.labels_path)
    classes = g.classes
    if cfg.base_classes >= len(classes):
        raise DataError(
            f"base_classes={cfg.base_classes} leaves no novel classes out of {len(classes)}"
        )
    base = classes[: cfg.base_classes]
    remaining = classes[cfg.base_classes :]
    count = cfg.novel_classes or len(remaining)
    if count > len(remaining):
        raise DataError(f"novel_classes={count} exceeds the {len(remaining)} available")
    novel = remaining[:count]
    base_task, sessions = split_sessions(g, base, novel, cfg.way, cfg.shot, cfg.seed)
    return g, base_task, sessions


def assemble_state(
    cfg: RunConfig,
    g: Graph,
    base_task: SessionTask,
    sessions: list[SessionTask],
    encoder: GcnEncoder,
    head: MlpHead,
    pretrain_losses: list[float] | None = None,
) -> PretrainedState:
    """Freeze-time bookkeeping shared by fresh pretraining and checkpoint load."""
    encoder.assert_intact()
    with no_grad():
        z_full = encode(encoder, g).data
    z_full.flags.writeable = False
    base_acc = evaluate_classifier(head, z_full, base_task.test_ids, g.labels)
    return PretrainedState(
        cfg=cfg,
        graph=g,
        base_task=base_task,
        sessions=sessions,
        encoder=encoder,
        head0=head,
        z_full=z_full,
        base_acc=base_acc,
        pretrain_losses=pretrain_losses or [],
        class_budget=len(g.classes),
    )


def prepare(cfg: RunConfig) -> PretrainedState:
    """Dataset, split, pretraining, freeze; the shared root of every arm."""
    cfg.validate()
    g, base_task, sessions = build_dataset(cfg)
    encoder = GcnEncoder(g.feature_dim, cfg.hidden_dim, Rng(derive_seed(cfg.seed, "encoder-init")))
    head = MlpHead(cfg.hidden_dim, base_task.classes, Rng(derive_seed(cfg.seed, "head-init")))
    losses = pretrain(
        encoder,
        head,
        g,
        base_task,
        epochs=cfg.pretrain_epochs,
        lr=cfg.pretrain_lr,
        dropout_rate=cfg.dropout,
        seed=cfg.seed,
        momentum=cfg.momentum,
    )
    encoder.freeze()
    return assemble_state(cfg, g, base_task, sessions, encoder, head, losses)


def evaluate_classifier(head: MlpHead, z_full: np.ndarray, test_ids, labels) -> float:
    """Percent accuracy of the classifier argmax over all known classes."""
    ids = np.asarray(test_ids, dtype=np.int64)
    if ids.size == 0:
        raise DataError("empty evaluation set")
    with no_grad():
        probs = classify(head, Tensor(z_full[ids]))
    pred = probs.data.argmax(axis=1)
    truth = head.columns_for(labels[ids])
    return 100.0 * float((pred == truth).mean())


def _soften(rows: np.ndarray, temperature: float) -> np.ndarray:
    if temperature == 1.0:
        return rows
    powered = np.power(np.clip(rows, LOG_FLOOR, 1.0), 1.0 / temperature)
    return powered / powered.sum(axis=1, keepdims=True)


def _resolve_cluster_classes(
    assign: np.ndarray, node_labels: np.ndarray, session_classes, n_clusters: int
) -> list[int]:
    """Majority vote per cluster; on a collision, the vote-maximizing matching.

    The repair only engages when two clusters claim the same class, which can
    happen early in training when the prototype space is still poorly shaped.
    """
    votes = majority_vote_labels(assign, node_labels, n_clusters)
    if len(votes) == len(set(votes)):
        return votes
    from itertools import permutations

    classes = sorted(int(c) for c in session_classes)
    if len(classes) != n_clusters:
        raise DataError("cluster count must match the session's class count")
    counts = np.zeros((n_clusters, len(classes)))
    for cluster in range(n_clusters):
        members = node_labels[assign == cluster]
        for j, c in enumerate(classes):
            counts[cluster, j] = (members == c).sum()
    best, best_score = None, -1.0
    for perm in permutations(range(len(classes))):
        score = sum(counts[i, perm[i]] for i in range(n_clusters))
        if score > best_score:
            best, best_score = perm, score
    return [classes[best[i]] for i in range(n_clusters)]


def _match_store(u: np.ndarray, store: PrototypeStore) -> np.ndarray:
    """Nearest stored prototype per row (Euclidean, ties to lowest index)."""
    proto = store.matrix()
    d2 = ((u[:, None, :] - proto[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def run_method(pre: PretrainedState, cfg: RunConfig, name: str | None = None) -> MethodResult:
    """Walk all sessions under one method configuration and score each step."""
    cfg.validate()
    g = pre.graph
    seed = cfg.seed
    head = pre.head0.clone()
    maintain_memory = cfg.teacher_mode != "none"
    maintain_store = cfg.use_mecs or maintain_memory
    if name is None:
        name = "naive" if cfg.is_naive else cfg.teacher_mode

    store = PrototypeStore(cfg.proto_dim)
    memory = MemoryStore(pre.class_budget) if maintain_memory else None
    pipeline = (
        PrototypePipeline(
            feature_dim=g.feature_dim,
            hidden_dim=cfg.hidden_dim,
            proto_dim=cfg.proto_dim,
            attn_dim=cfg.effective_attn_dim,
            proj_dim=cfg.proj_dim,
            graphinfo_attn_dim=cfg.effective_graphinfo_attn_dim,
            use_mecs=cfg.use_mecs,
            use_cross_attend=cfg.use_cross_attend,
            use_graphinfo=cfg.use_graphinfo,
            placement=cfg.graphinfo_placement,
            rng=Rng(derive_seed(seed, "mecs-init")),
        )
        if maintain_store
        else None
    )
    teacher = (
        TeacherMlp(pre.class_budget, cfg.mlp_teacher_hidden, Rng(derive_seed(seed, "teacher-init")))
        if cfg.teacher_mode == "mlp_teacher"
        else None
    )

    weights = (cfg.w_cls, cfg.w_edge, cfg.w_memory, cfg.w_update)
    retained_ids: list[np.ndarray] = []
    seen_test_ids: list[np.ndarray] = []
    acc: list[float] = []
    mram_acc: list[float] = []
    match_acc: list[float] = []
    loss_rows: list[tuple] = []

    for task in [pre.base_task] + pre.sessions:
        new_head = [c for c in task.classes if c not in head.class_order]
        if new_head:
            head.grow(new_head, Rng(derive_seed(seed, f"head-grow-{task.index}")))
        live_indices: list[int] = []
        if maintain_memory:
            new_rows = [c for c in task.classes if c not in memory.class_ids]
            if new_rows:
                live_indices = memory.init_entries(
                    new_rows, Rng(derive_seed(seed, f"memory-init-{task.index}"))
                )
            if list(head.class_order) != list(memory.class_ids):
                raise StateError("memory rows and head columns fell out of alignment")

        labels_cur = g.labels[task.train_ids]
        z_cur = Tensor(pre.z_full[task.train_ids])
        x_cur = g.feature_rows(task.train_ids)
        cols_cur = head.columns_for(labels_cur)
        mem_idx_cur = (
            [memory.index_of(int(l)) for l in labels_cur] if maintain_memory else []
        )

        if maintain_memory and retained_ids:
            seen_ids = np.concatenate(retained_ids)
            z_seen = Tensor(pre.z_full[seen_ids])
            x_seen = g.feature_rows(seen_ids)
        else:
            seen_ids = None

        kmeans_rng = Rng(derive_seed(seed, f"kmeans-{task.index}"))
        opt = Sgd(cfg.session_lr, cfg.momentum)
        centroids = assign = None

        for epoch in range(cfg.session_epochs):
            try:
                probs_cur = classify(head, z_cur)
                l_cls = cross_entropy(probs_cur, cols_cur)

                l_edge = None
                if maintain_store:
                    u_cur = pipeline.build(z_cur, x_cur, store)
                    if cfg.use_mecs:
                        l_edge = edge_loss(x_cur, u_cur)
                    if store.size > 0:
                        centroids, assign = prototype_kmeans(
                            u_cur.data, task.way, kmeans_rng
                        )

                l_memory_term = None
                l_update_term = None
                if maintain_memory:
                    if seen_ids is not None:
                        # Retained nodes reach their memory rows through the
                        # prototype match, so target quality tracks how well
                        # the store separates the seen classes.
                        with no_grad():
                            u_seen = pipeline.build(z_seen, x_seen, store)
                        fetch_idx = _match_store(u_seen.data, store)
                        fetched = Tensor(
                            np.vstack([memory.lookup(int(i)) for i in fetch_idx])
                        )
                        with no_grad():
                            out = teacher_output(
                                cfg.teacher_mode, fetched, teacher, memory.valid_cols
                            )
                        target_tensor = Tensor(_soften(out.data, cfg.temperature))
                        p_seen = classify(head, z_seen)
                        l_memory_term = memory_loss(memory, fetch_idx, p_seen, target_tensor)
                    l_update_term = update_loss(
                        memory,
                        mem_idx_cur,
                        probs_cur,
                        teacher if cfg.teacher_mode == "mlp_teacher" else None,
                    )

                loss = total_loss(l_cls, l_edge, l_memory_term, l_update_term, weights)
                backward(loss)

                params = head.params()
                if maintain_store and cfg.use_mecs:
                    params = params + pipeline.trainable_params(store)
                if l_update_term is not None:
                    params = params + memory.live_params()
                    if cfg.teacher_mode == "mlp_teacher":
                        params = params + teacher.params()
                opt.step(params)
                if l_update_term is not None:
                    memory.renormalize_live()
            except NumericError as exc:
                raise NumericError(
                    f"session {task.index} diverged at epoch {epoch}: {exc}"
                ) from exc

            loss_rows.append(
                (
                    task.index,
                    epoch,
                    l_cls.item(),
                    l_edge.item() if l_edge is not None else 0.0,
                    l_memory_term.item() if l_memory_term is not None else 0.0,
                    l_update_term.item() if l_update_term is not None else 0.0,
                    loss.item(),
                )
            )

        if maintain_store:
            with no_grad():
                u_final = pipeline.build(z_cur, x_cur, store).data
            if store.size == 0:
                store = bootstrap_base_prototypes(u_final, labels_cur, cfg.proto_dim)
            else:
                centroids, assign = prototype_kmeans(u_final, task.way, kmeans_rng)
                cluster_classes = _resolve_cluster_classes(
                    assign, labels_cur, task.classes, task.way
                )
                update_store(store, centroids, cluster_classes)
            if maintain_memory and list(store.class_ids) != list(memory.class_ids):
                raise StateError("prototype store and memory rows fell out of alignment")

        if maintain_memory:
            memory.seal_session()
            retained_ids.append(np.asarray(task.train_ids))

        pre.encoder.assert_intact()
        seen_test_ids.append(np.asarray(task.test_ids))
        union = np.concatenate(seen_test_ids)
        acc.append(evaluate_classifier(head, pre.z_full, union, g.labels))

        if maintain_memory and maintain_store and store.size > 0:
            lookup_acc, agree = _memory_diagnostics(
                pre, cfg, pipeline, store, memory, head, union
            )
            mram_acc.append(lookup_acc)
            match_acc.append(agree)

    return MethodResult(
        name=name,
        metrics=compute_metrics(acc),
        loss_rows=loss_rows,
        mram_acc=mram_acc if mram_acc else None,
        match_acc=match_acc if match_acc else None,
        store_classes=store.class_ids if maintain_store else tuple(),
        store=store if maintain_store else None,
        memory=memory,
    )


def _memory_diagnostics(pre, cfg, pipeline, store, memory, head, union_ids):
    """Accuracy of the match-then-lookup route, plus raw match agreement."""
    g = pre.graph
    with no_grad():
        u_test = pipeline.build(
            Tensor(pre.z_full[union_ids]), g.feature_rows(union_ids), store
        ).data
    matched = _match_store(u_test, store)
    rows = np.vstack([memory.lookup(i) for i in range(memory.size)])
    pred_cols = rows[matched].argmax(axis=1)
    class_order = np.array(head.class_order, dtype=np.int64)
    truth = g.labels[union_ids]
    lookup_acc = 100.0 * float((class_order[pred_cols] == truth).mean())
    proto_classes = np.array(store.class_ids, dtype=np.int64)
    agree = 100.0 * float((proto_classes[matched] == truth).mean())
    return lookup_acc, agree


def naive_baseline(pre: PretrainedState, cfg: RunConfig) -> MethodResult:
    """Grow-and-finetune with cross-entropy only; the forgetting yardstick."""
    stripped = replace(
        cfg,
        use_mecs=False,
        use_cross_attend=False,
        use_graphinfo=False,
        teacher_mode="none",
    )
    return run_method(pre, stripped, name="naive")


def run_protocol(pre: PretrainedState, cfg: RunConfig) -> list[MethodResult]:
    """The configured method plus, by default, the naive forgetting baseline."""
    results = [run_method(pre, cfg)]
    if cfg.include_baseline and not cfg.is_naive:
        results.append(naive_baseline(pre, cfg))
    return results


MECS_ARMS = (
    ("full", {}),
    ("no-graphinfo", {"use_graphinfo": False}),
    ("no-cross-attend", {"use_cross_attend": False}),
    ("no-mecs", {"use_mecs": False, "use_cross_attend": False, "use_graphinfo": False}),
)

TEACHER_ARMS = tuple((mode, {"teacher_mode": mode}) for mode in TEACHER_MODES)


def ablation_arms(cfg: RunConfig, family: str) -> list[tuple[str, dict]]:
    if family == "mecs":
        return [(n, dict(o)) for n, o in MECS_ARMS]
    if family == "teacher":
        return [(n, dict(o)) for n, o in TEACHER_ARMS]
    if family == "graphinfo":
        arms = []
        for placement in ("left", "right"):
            for r in range(1, cfg.proto_dim):
                arms.append(
                    (
                        f"graphinfo({cfg.proto_dim - r}-{r})-{placement}",
                        {"proj_dim": r, "graphinfo_placement": placement},
                    )
                )
        return arms
    raise ConfigError(f"unknown ablation family {family!r}")


def ablation_workers() -> int:
    raw = os.environ.get("PROTOMEM_THREADS", "1")
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"PROTOMEM_THREADS must be an integer, got {raw!r}") from None
    return max(1, workers)


def run_ablation(cfg: RunConfig, family: str, pre: PretrainedState | None = None) -> list[MethodResult]:
    """One result per arm, pretraining shared across arms; order is fixed."""
    cfg.validate()
    arms = ablation_arms(cfg, family)
    if pre is None:
        pre = prepare(cfg)
    jobs = [(name, replace(cfg, **overrides)) for name, overrides in arms]
    workers = min(ablation_workers(), len(jobs))
    if workers <= 1:
        return [run_method(pre, arm_cfg, arm_name) for arm_name, arm_cfg in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_method, pre, arm_cfg, arm_name) for arm_name, arm_cfg in jobs]
        return [f.result() for f in futures]
