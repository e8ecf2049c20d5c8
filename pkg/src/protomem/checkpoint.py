"""Binary checkpoints for the frozen encoder/head and the session state.

Two formats, both little-endian with a 4-byte magic and a u32 version:

PMEC (pretrained encoder + classifier head)
    magic "PMEC", version, seed i64, dims d/h/c u32,
    class ids c*i64, W1 d*h f64, W2 h*h f64, W c*h... stored as h*c f64,
    bias c f64, raw sha256 digest (32 bytes) of the frozen encoder.

PMST (prototype store + probability memory after some sessions)
    magic "PMST", version, seed i64,
    k u32, n u32, class ids n*i64, prototype rows n*k f64,
    class_budget u32, m u32, class ids m*i64, sealed flags m*u8,
    memory rows m*class_budget f64.
    class_budget = 0 encodes "no memory was maintained".

All matrices are row-major float64. Loads validate magic, version, exact
length, finiteness, and (for PMEC) the encoder digest.
"""

from __future__ import annotations

import struct

import numpy as np

from .encoder import GcnEncoder, MlpHead
from .errors import DataError, FormatError, StateError
from .memory import MemoryStore
from .prototypes import PrototypeStore
from .tensor import Tensor

ENCODER_MAGIC = b"PMEC"
STATE_MAGIC = b"PMST"
VERSION = 1


class _Reader:
    def __init__(self, blob: bytes, label: str):
        self.blob = blob
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated {self.label} checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def i64_array(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<i8").astype(np.int64)

    def f64_matrix(self, rows: int, cols: int) -> np.ndarray:
        flat = np.frombuffer(self.take(8 * rows * cols), dtype="<f8")
        out = flat.astype(np.float64).reshape(rows, cols)
        if not np.all(np.isfinite(out)):
            raise DataError(f"non-finite values in {self.label} checkpoint")
        return out

    def done(self) -> None:
        if self.pos != len(self.blob):
            raise FormatError(f"trailing bytes in {self.label} checkpoint")


def _f64_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_pretrained(path: str, seed: int, encoder: GcnEncoder, head: MlpHead) -> None:
    encoder.assert_intact()
    d, h = encoder.feature_dim, encoder.hidden_dim
    c = head.n_classes
    parts = [
        ENCODER_MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<q", int(seed)),
        struct.pack("<III", d, h, c),
        np.array(head.class_order, dtype="<i8").tobytes(),
        _f64_bytes(encoder.w1.data),
        _f64_bytes(encoder.w2.data),
        _f64_bytes(head.w.data),
        _f64_bytes(head.b.data),
        bytes.fromhex(encoder.checksum()),
    ]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_pretrained(path: str) -> tuple[int, GcnEncoder, MlpHead]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), "encoder")
    if r.take(4) != ENCODER_MAGIC:
        raise FormatError("bad magic: not an encoder checkpoint")
    if r.u32() != VERSION:
        raise FormatError("unsupported encoder checkpoint version")
    seed = r.i64()
    d = r.u32()
    h = r.u32()
    c = r.u32()
    if d <= 0 or h <= 0 or c <= 0:
        raise FormatError("nonpositive dimensions in encoder checkpoint")
    class_ids = [int(x) for x in r.i64_array(c)]
    if len(set(class_ids)) != c:
        raise DataError("duplicate class ids in encoder checkpoint")
    w1 = r.f64_matrix(d, h)
    w2 = r.f64_matrix(h, h)
    w_out = r.f64_matrix(h, c)
    b_out = r.f64_matrix(1, c)
    digest = r.take(32)
    r.done()

    encoder = GcnEncoder.__new__(GcnEncoder)
    encoder.feature_dim = d
    encoder.hidden_dim = h
    encoder.w1 = Tensor(w1, requires_grad=True)
    encoder.w2 = Tensor(w2, requires_grad=True)
    encoder.frozen = False
    encoder._frozen_checksum = None
    encoder.freeze()
    if bytes.fromhex(encoder.checksum()) != digest:
        raise DataError("encoder checkpoint digest mismatch")

    head = MlpHead.__new__(MlpHead)
    head.hidden_dim = h
    head.class_order = class_ids
    head.w = Tensor(w_out, requires_grad=True)
    head.b = Tensor(b_out, requires_grad=True)
    return seed, encoder, head


def save_session_state(
    path: str, seed: int, store: PrototypeStore, memory: MemoryStore | None
) -> None:
    if memory is not None and memory.live_params():
        raise StateError("cannot save memory with unsealed rows")
    parts = [
        STATE_MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<q", int(seed)),
        struct.pack("<II", store.dim, store.size),
        np.array(store.class_ids, dtype="<i8").tobytes(),
        _f64_bytes(store.matrix()),
    ]
    if memory is None:
        parts.append(struct.pack("<II", 0, 0))
    else:
        parts.extend(
            [
                struct.pack("<II", memory.class_budget, memory.size),
                np.array(memory.class_ids, dtype="<i8").tobytes(),
                bytes(int(memory.is_sealed(i)) for i in range(memory.size)),
                _f64_bytes(memory._rows),
            ]
        )
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_session_state(path: str) -> tuple[int, PrototypeStore, MemoryStore | None]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), "session-state")
    if r.take(4) != STATE_MAGIC:
        raise FormatError("bad magic: not a session-state checkpoint")
    if r.u32() != VERSION:
        raise FormatError("unsupported session-state checkpoint version")
    seed = r.i64()
    k = r.u32()
    n = r.u32()
    if k <= 0:
        raise FormatError("nonpositive prototype dimension")
    store_ids = [int(x) for x in r.i64_array(n)]
    rows = r.f64_matrix(n, k)
    store = PrototypeStore(k)
    if n:
        store._append(rows, store_ids)

    budget = r.u32()
    m = r.u32()
    if budget == 0:
        if m != 0:
            raise FormatError("memory rows present without a class budget")
        r.done()
        return seed, store, None
    mem_ids = [int(x) for x in r.i64_array(m)]
    sealed = list(r.take(m))
    mem_rows = r.f64_matrix(m, budget) if m else np.zeros((0, budget))
    r.done()
    if any(flag not in (0, 1) for flag in sealed):
        raise FormatError("bad sealed flag in session-state checkpoint")
    if 0 in sealed:
        raise DataError("session-state checkpoint holds unsealed memory rows")
    if len(set(mem_ids)) != m:
        raise DataError("duplicate class ids in memory section")
    if m > budget:
        raise DataError("memory rows exceed the class budget")
    if m:
        valid = mem_rows[:, :m]
        if np.any(valid < 0) or np.any(np.abs(valid.sum(axis=1) - 1.0) > 1e-6):
            raise DataError("memory rows are not probability vectors")
        if np.any(mem_rows[:, m:] != 0.0):
            raise DataError("memory rows carry mass beyond the valid columns")
    memory = MemoryStore(budget)
    memory._rows = mem_rows
    memory._class_ids = mem_ids
    memory._sealed = [True] * m
    return seed, store, memory
