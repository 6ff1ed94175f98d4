"""Simulated TTT backends.

Two payload families share one interface: dense fast weights (``W``, d x d)
and low-rank delta adapters (``A``, ``B``, r x d). Every function here is
pure; inputs are never mutated and committed arrays are kept read-only so an
accidental in-place write raises instead of silently corrupting state.

All arithmetic is float64 with a fixed per-request evaluation order, which is
what lets the engine demand bit-exact agreement with the sequential oracle.
"""

from __future__ import annotations

import enum
import functools
import hashlib
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from tttserve.errors import ShapeMismatch, TailNotFull, TailOverflow

# Learning rate of the rank-1 boundary update.
ETA = 0.01

DEFAULT_DIM = 8
DEFAULT_RANK = 4
DEFAULT_CHUNK = 128


class BackendType(enum.IntEnum):
    FAST_WEIGHT = 0
    DELTA_ADAPTER = 1

    @property
    def label(self) -> str:
        return {0: "fast-weight", 1: "delta-adapter"}[int(self)]

    @classmethod
    def parse(cls, text: str | "BackendType") -> "BackendType":
        if isinstance(text, BackendType):
            return text
        norm = text.strip().lower().replace("_", "-")
        for member in cls:
            if norm in (member.label, member.name.lower().replace("_", "-")):
                return member
        raise ValueError(f"unknown backend type {text!r}")


@dataclass(frozen=True, order=True)
class ShapeClass:
    """Kernel-relevant dimensions; one component of the compatibility key."""

    dtype: str = "float64"
    hidden_dim: int = DEFAULT_DIM
    chunk_size: int = DEFAULT_CHUNK
    rank: int = 0
    layer_set: str = "decode"

    def __post_init__(self) -> None:
        if self.hidden_dim < 1 or self.chunk_size < 1 or self.rank < 0:
            raise ValueError(f"invalid shape class {self}")


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True, order="C")
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class FastWeightPayload:
    W: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "W", _frozen(self.W))
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]:
            raise ShapeMismatch(f"fast weights must be square, got {self.W.shape}")
        if not np.all(np.isfinite(self.W)):
            raise ValueError("non-finite fast weights")

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    @property
    def rank(self) -> int:
        return 0

    def tobytes(self) -> bytes:
        return self.W.tobytes()

    def to_flat(self) -> list[float]:
        return self.W.ravel().tolist()

    def copy(self) -> "FastWeightPayload":
        return FastWeightPayload(self.W.copy())


@dataclass(frozen=True, eq=False)
class DeltaAdapterPayload:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "A", _frozen(self.A))
        object.__setattr__(self, "B", _frozen(self.B))
        if self.A.ndim != 2 or self.A.shape != self.B.shape or self.A.shape[0] < 1:
            raise ShapeMismatch(f"adapter factors must both be r x d, got {self.A.shape}, {self.B.shape}")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("non-finite adapter factors")

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def tobytes(self) -> bytes:
        return self.A.tobytes() + self.B.tobytes()

    def to_flat(self) -> list[float]:
        return self.A.ravel().tolist() + self.B.ravel().tolist()

    def copy(self) -> "DeltaAdapterPayload":
        return DeltaAdapterPayload(self.A.copy(), self.B.copy())


Payload = Union[FastWeightPayload, DeltaAdapterPayload]


def payload_digest(payload: Payload) -> str:
    return hashlib.blake2b(payload.tobytes(), digest_size=16).hexdigest()


def _check_kind(backend: BackendType, payload: Payload) -> None:
    expected = FastWeightPayload if backend is BackendType.FAST_WEIGHT else DeltaAdapterPayload
    if not isinstance(payload, expected):
        raise ShapeMismatch(f"{backend.label} backend got {type(payload).__name__}")


def _check_vec(payload: Payload, x: np.ndarray) -> None:
    if x.shape != (payload.dim,):
        raise ShapeMismatch(f"expected vector of length {payload.dim}, got shape {x.shape}")


def apply_read(backend: BackendType, payload: Payload, x: np.ndarray) -> np.ndarray:
    """Apply the committed state to one token; the identity stands in for the base model."""
    _check_kind(backend, payload)
    x = np.asarray(x, dtype=np.float64)
    _check_vec(payload, x)
    if backend is BackendType.FAST_WEIGHT:
        return x + payload.W @ x
    return x + payload.B.T @ (payload.A @ x)


@dataclass
class TailBuffer:
    """Tokens seen since the last committed boundary."""

    capacity: int
    tokens: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def is_full(self) -> bool:
        return len(self.tokens) == self.capacity

    def clear(self) -> None:
        self.tokens.clear()


def tail_append(tail: TailBuffer, x: np.ndarray) -> TailBuffer:
    if len(tail) >= tail.capacity:
        raise TailOverflow(f"tail already holds {len(tail)} of {tail.capacity} tokens")
    tail.tokens.append(x)
    return tail


@dataclass(frozen=True, eq=False)
class UpdateEvidence:
    mean: np.ndarray
    count: int


def make_evidence(tail: TailBuffer) -> UpdateEvidence:
    if not tail.is_full:
        raise TailNotFull(f"tail holds {len(tail)} of {tail.capacity} tokens")
    mean = np.sum(np.stack(tail.tokens), axis=0) / tail.capacity
    mean.flags.writeable = False
    return UpdateEvidence(mean=mean, count=tail.capacity)


def boundary_update(backend: BackendType, payload: Payload, evidence: UpdateEvidence) -> Payload:
    """Deterministic rank-1 learning rule; returns a fresh candidate payload."""
    _check_kind(backend, payload)
    m = evidence.mean
    _check_vec(payload, m)
    if backend is BackendType.FAST_WEIGHT:
        return FastWeightPayload(payload.W + ETA * np.outer(m, m))
    return DeltaAdapterPayload(payload.A + ETA * np.outer(payload.A @ m, m), payload.B)


def make_shape(backend: BackendType, dim: int = DEFAULT_DIM, chunk: int = DEFAULT_CHUNK,
               rank: int = DEFAULT_RANK, layer_set: str = "decode") -> ShapeClass:
    r = rank if backend is BackendType.DELTA_ADAPTER else 0
    return ShapeClass(hidden_dim=dim, chunk_size=chunk, rank=r, layer_set=layer_set)


def shape_class(record) -> ShapeClass:
    """Shape class of a registered state record."""
    return record.shape


def _philox(*key_parts: object) -> np.random.Generator:
    text = ":".join(str(p) for p in key_parts).encode()
    key = np.frombuffer(hashlib.blake2b(text, digest_size=16).digest(), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@functools.lru_cache(maxsize=1 << 16)
def gen_token(owner: str, position: int, seed: int, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Input token for ``owner`` at ``position``; same key gives the same bits."""
    if position < 0:
        raise ValueError("position must be non-negative")
    vec = _philox("token", seed, owner, position).uniform(-1.0, 1.0, dim)
    vec.flags.writeable = False
    return vec


def init_payload(backend: BackendType, shape: ShapeClass, owner: str, seed: int) -> Payload:
    """Initial state: zero fast weights, or small seeded factors for adapters.

    A zero ``A`` would be a fixed point of the adapter update, so adapters
    start from seeded values instead.
    """
    d = shape.hidden_dim
    if backend is BackendType.FAST_WEIGHT:
        return FastWeightPayload(np.zeros((d, d)))
    gen = _philox("init", seed, owner)
    a = gen.uniform(-0.1, 0.1, (shape.rank, d))
    b = gen.uniform(-0.1, 0.1, (shape.rank, d))
    return DeltaAdapterPayload(a, b)
