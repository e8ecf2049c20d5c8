"""Per-class probability memory with bidirectional distillation losses.

Row i is a probability vector over the class budget, index-aligned with the
prototype store. Rows are born in the session that introduces their class
(near-uniform noise over the classes valid at that moment), get trained by
update_loss (classifier output as fixed target, gradient into rows only), and
are sealed when the session ends. Sealed rows are bit-frozen: memory_loss uses
them as fixed targets whose gradient flows into the classifier alone, and no
later update may touch their bytes.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DomainError, ShapeError, StateError
from .rng import Rng
from .tensor import (
    LOG_FLOOR,
    Tensor,
    add,
    gather_rows,
    kl_div,
    matmul,
    relu,
    scale,
    slice_cols,
    softmax_rows,
    concat_cols,
)

TEACHER_MODES = ("gkim", "voting", "mlp_teacher", "none")


def _softmax_np(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


class MemoryStore:
    """Growable matrix of per-class probability rows under a fixed class budget."""

    def __init__(self, class_budget: int):
        if class_budget <= 0:
            raise ShapeError("class budget must be positive")
        self.class_budget = class_budget
        self._rows = np.zeros((0, class_budget))
        self._class_ids: list[int] = []
        self._sealed: list[bool] = []
        self._live_block: Tensor | None = None
        self._live_indices: list[int] = []

    @property
    def size(self) -> int:
        return len(self._class_ids)

    @property
    def valid_cols(self) -> int:
        return len(self._class_ids)

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(self._class_ids)

    def is_sealed(self, index: int) -> bool:
        return self._sealed[index]

    def index_of(self, class_id: int) -> int:
        try:
            return self._class_ids.index(int(class_id))
        except ValueError:
            raise ContractError(f"class {class_id} has no memory row") from None

    def init_entries(self, new_class_ids, rng: Rng) -> list[int]:
        """Create one near-uniform row per new class; widens valid_cols first.

        Rows are the softmax of N(0, 0.01^2) logits over the widened width, so
        a single new class over c columns lands within ~0.01 of uniform(c).
        """
        if self._live_block is not None:
            raise StateError("previous session's rows are not sealed yet")
        new_ids = [int(c) for c in new_class_ids]
        if not new_ids:
            raise ContractError("init_entries needs at least one class")
        if len(new_ids) != len(set(new_ids)):
            raise ContractError("duplicate class ids in init_entries")
        clash = set(new_ids) & set(self._class_ids)
        if clash:
            raise ContractError(f"classes already have rows: {sorted(clash)}")
        if self.size + len(new_ids) > self.class_budget:
            raise ShapeError("class budget exceeded")
        self._class_ids.extend(new_ids)
        width = self.valid_cols
        fresh = np.zeros((len(new_ids), self.class_budget))
        for i in range(len(new_ids)):
            logits = rng.normals(width) * 0.01
            fresh[i, :width] = _softmax_np(logits)
        self._rows = np.vstack([self._rows, fresh])
        start = self.size - len(new_ids)
        self._sealed.extend([False] * len(new_ids))
        self._live_indices = list(range(start, self.size))
        self._live_block = Tensor(self._rows[start:, :width], requires_grad=True)
        return self._live_indices.copy()

    def lookup(self, index: int) -> np.ndarray:
        """Stored distribution over the currently valid columns."""
        if not 0 <= index < self.size:
            raise IndexError(f"no memory row {index}")
        if index in self._live_indices and self._live_block is not None:
            pos = self._live_indices.index(index)
            return self._live_block.data[pos].copy()
        return self._rows[index, : self.valid_cols].copy()

    def live_params(self) -> list[Tensor]:
        return [self._live_block] if self._live_block is not None else []

    def renormalize_live(self) -> None:
        """Clamp and re-simplex the in-training rows, mirroring into storage."""
        if self._live_block is None:
            raise StateError("no rows are in training")
        data = self._live_block.data
        np.clip(data, LOG_FLOOR, None, out=data)
        data /= data.sum(axis=1, keepdims=True)
        self._rows[self._live_indices, : self.valid_cols] = data

    def seal_session(self) -> None:
        """Freeze the in-training rows; afterwards they are fixed targets."""
        if self._live_block is None:
            raise StateError("no rows are in training")
        self.renormalize_live()
        for idx in self._live_indices:
            self._sealed[idx] = True
        self._live_block = None
        self._live_indices = []

    def sealed_snapshot(self) -> np.ndarray:
        return self._rows[[i for i, s in enumerate(self._sealed) if s]].copy()


class TeacherMlp:
    """Single-hidden-layer map over memory rows, softmaxed back to the simplex.

    Operates at the full class budget (rows are zero-padded on the right) so
    its weights persist as valid_cols grows across sessions.
    """

    def __init__(self, class_budget: int, hidden: int, rng: Rng):
        if hidden <= 0:
            raise ShapeError("teacher hidden size must be positive")
        self.class_budget = class_budget
        self.hidden = hidden
        self.w1 = Tensor(
            rng.normal_matrix(class_budget, hidden, std=1.0 / np.sqrt(class_budget)),
            requires_grad=True,
        )
        self.b1 = Tensor(np.zeros((1, hidden)), requires_grad=True)
        self.w2 = Tensor(
            rng.normal_matrix(hidden, class_budget, std=1.0 / np.sqrt(hidden)),
            requires_grad=True,
        )
        self.b2 = Tensor(np.zeros((1, class_budget)), requires_grad=True)

    def params(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, rows: Tensor, valid_cols: int) -> Tensor:
        b, width = rows.shape
        if width != valid_cols:
            raise ShapeError(f"rows have width {width}, expected {valid_cols}")
        if valid_cols > self.class_budget:
            raise ShapeError("valid_cols exceeds the teacher's class budget")
        if valid_cols < self.class_budget:
            pad = Tensor(np.zeros((b, self.class_budget - valid_cols)))
            rows = concat_cols(rows, pad)
        hidden = relu(add(matmul(rows, self.w1), self.b1))
        logits = add(matmul(hidden, self.w2), self.b2)
        return softmax_rows(slice_cols(logits, 0, valid_cols))


def teacher_output(
    mode: str,
    fetched_rows: Tensor,
    teacher: TeacherMlp | None = None,
    valid_cols: int | None = None,
) -> Tensor:
    """Transform fetched memory rows into distillation targets.

    gkim passes rows through unchanged; voting pools the batch into one
    softmaxed average row; mlp_teacher applies the trainable map. Mode none
    has no teacher and calling this is a caller error.
    """
    if mode not in TEACHER_MODES:
        raise DomainError(f"unknown teacher mode {mode!r}")
    if fetched_rows.shape[0] == 0:
        raise ContractError("teacher_output on an empty batch")
    if mode == "none":
        raise ContractError("teacher mode 'none' produces no targets")
    if mode == "gkim":
        return fetched_rows
    if mode == "voting":
        n = fetched_rows.shape[0]
        ones = Tensor(np.ones((1, n)))
        pooled = scale(matmul(ones, fetched_rows), 1.0 / n)
        return softmax_rows(pooled)
    if teacher is None:
        raise ContractError("mlp_teacher mode needs a TeacherMlp")
    width = fetched_rows.shape[1] if valid_cols is None else valid_cols
    return teacher.forward(fetched_rows, width)


def _as_index_array(indices) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ContractError("empty index batch")
    return idx


def memory_loss(
    memory: MemoryStore,
    indices,
    p_mlp: Tensor,
    targets: Tensor | None = None,
) -> Tensor:
    """Mean KL(target_i || p_mlp_i) over sealed rows; trains the classifier only.

    targets defaults to the stored rows themselves; a teacher-transformed
    batch may be supplied instead (it is detached here either way).
    """
    idx = _as_index_array(indices)
    if idx.min() < 0 or idx.max() >= memory.size:
        raise IndexError("memory row index out of range")
    unsealed = [int(i) for i in idx if not memory.is_sealed(int(i))]
    if unsealed:
        raise ContractError(f"memory_loss over unsealed rows {sorted(set(unsealed))}")
    if p_mlp.shape != (idx.size, memory.valid_cols):
        raise ShapeError(
            f"p_mlp must be {(idx.size, memory.valid_cols)}, got {p_mlp.shape}"
        )
    if targets is None:
        target_mat = np.vstack([memory.lookup(int(i)) for i in idx])
        target_tensor = Tensor(target_mat)
    else:
        data = targets.data
        if data.shape == (1, memory.valid_cols) and idx.size > 1:
            data = np.repeat(data, idx.size, axis=0)
        if data.shape != (idx.size, memory.valid_cols):
            raise ShapeError("targets do not match the batch")
        target_tensor = Tensor(data)  # detached copy: fixed target side
    return kl_div(target_tensor, p_mlp)


def update_loss(
    memory: MemoryStore,
    indices,
    p_mlp: Tensor,
    teacher: TeacherMlp | None = None,
) -> Tensor:
    """Mean KL(p_mlp_i || row_i) over this session's rows; p_mlp is detached.

    Gradient flows into the live rows (and, when a teacher map is interposed,
    its weights). Sealed rows may not appear in the batch.
    """
    idx = _as_index_array(indices)
    if idx.min() < 0 or idx.max() >= memory.size:
        raise IndexError("memory row index out of range")
    sealed = [int(i) for i in idx if memory.is_sealed(int(i))]
    if sealed:
        raise ContractError(f"update_loss over sealed rows {sorted(set(sealed))}")
    if memory._live_block is None:
        raise StateError("no rows are in training")
    if p_mlp.shape != (idx.size, memory.valid_cols):
        raise ShapeError(
            f"p_mlp must be {(idx.size, memory.valid_cols)}, got {p_mlp.shape}"
        )
    positions = [memory._live_indices.index(int(i)) for i in idx]
    student = gather_rows(memory._live_block, positions)
    if teacher is not None:
        student = teacher.forward(student, memory.valid_cols)
    return kl_div(p_mlp.detach(), student)
