"""Prototype-memory class-incremental learning on graphs.

A small, numpy-only stack: a reverse-mode autodiff core, a frozen two-layer
graph encoder, an attention pipeline that turns node embeddings into compact
class prototypes, a per-class probability memory with bidirectional
distillation, and the session protocol that strings them together.
"""

from .checkpoint import (
    load_pretrained,
    load_session_state,
    save_pretrained,
    save_session_state,
)
from .encoder import GcnEncoder, MlpHead, classify, encode, pretrain
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DomainError,
    FormatError,
    NumericError,
    ShapeError,
    StateError,
)
from .graphs import Graph, SbmConfig, SessionTask, generate_sbm, load_graph, split_sessions
from .memory import (
    TEACHER_MODES,
    MemoryStore,
    TeacherMlp,
    memory_loss,
    teacher_output,
    update_loss,
)
from .protocol import (
    Metrics,
    MethodResult,
    PretrainedState,
    RunConfig,
    compute_metrics,
    evaluate_classifier,
    naive_baseline,
    prepare,
    run_ablation,
    run_method,
    run_protocol,
    total_loss,
)
from .prototypes import (
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
    update_store,
)
from .rng import Rng, derive_seed
from .tensor import Sgd, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DomainError",
    "FormatError",
    "NumericError",
    "ShapeError",
    "StateError",
    "Graph",
    "SbmConfig",
    "SessionTask",
    "generate_sbm",
    "load_graph",
    "split_sessions",
    "GcnEncoder",
    "MlpHead",
    "classify",
    "encode",
    "pretrain",
    "PrototypePipeline",
    "PrototypeStore",
    "bootstrap_base_prototypes",
    "cross_attend",
    "edge_loss",
    "fuse",
    "graph_info",
    "majority_vote_labels",
    "nearest_prototype",
    "project",
    "prototype_kmeans",
    "update_store",
    "TEACHER_MODES",
    "MemoryStore",
    "TeacherMlp",
    "memory_loss",
    "teacher_output",
    "update_loss",
    "Metrics",
    "MethodResult",
    "PretrainedState",
    "RunConfig",
    "compute_metrics",
    "evaluate_classifier",
    "naive_baseline",
    "prepare",
    "run_ablation",
    "run_method",
    "run_protocol",
    "total_loss",
    "load_pretrained",
    "load_session_state",
    "save_pretrained",
    "save_session_state",
    "Rng",
    "derive_seed",
    "Sgd",
    "Tensor",
    "backward",
    "no_grad",
    "__version__",
]
