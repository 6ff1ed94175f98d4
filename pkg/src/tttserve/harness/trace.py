"""Trace generation and the line-delimited JSON trace format."""

from __future__ import annotations

import enum
import json
import warnings
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from tttserve.backends import DEFAULT_DIM, DEFAULT_RANK, BackendType
from tttserve.engine import StreamSpec
from tttserve.errors import TraceError


class Pattern(enum.Enum):
    UNIFORM = "uniform"
    BURSTY_UPDATE = "bursty-update"
    ALL_UPDATE = "all-update"

    @classmethod
    def parse(cls, text: "str | Pattern") -> "Pattern":
        if isinstance(text, Pattern):
            return text
        norm = text.strip().lower().replace("_", "-")
        aliases = {"bursty": "bursty-update", "allupdate": "all-update"}
        return cls(aliases.get(norm, norm))


@dataclass(frozen=True)
class TraceSpec:
    streams: int = 8
    prompt_len: int = 4096
    decode_len: int = 512
    chunk: int = 128
    pattern: Pattern = Pattern.UNIFORM
    arrival: Optional[Sequence[int]] = None
    backends: Optional[Sequence[BackendType]] = None
    backend: BackendType = BackendType.FAST_WEIGHT
    dim: int = DEFAULT_DIM
    rank: int = DEFAULT_RANK
    seed: int = 0

    def backend_for(self, i: int) -> BackendType:
        return self.backends[i] if self.backends is not None else self.backend


# 16K-prompt shape with seven concurrent streams.
LONG_PROMPT = dict(streams=7, prompt_len=16384, decode_len=512, chunk=128)


def generate_trace(spec: TraceSpec) -> list[StreamSpec]:
    """Per-stream schedule for ``spec``; deterministic in ``spec.seed``.

    Bursty traces start each stream with a seeded number of carried prompt
    tokens in its tail, so boundaries fall at different steps per stream.
    """
    if spec.streams < 1:
        raise TraceError("a trace needs at least one stream")
    if spec.arrival is not None and len(spec.arrival) != spec.streams:
        raise TraceError("arrival schedule must list one step per stream")
    if spec.backends is not None and len(spec.backends) != spec.streams:
        raise TraceError("backend mix must list one backend per stream")
    pattern = Pattern.parse(spec.pattern)
    chunk = 1 if pattern is Pattern.ALL_UPDATE else spec.chunk
    if chunk < 1:
        raise TraceError("chunk must be positive")
    if pattern is Pattern.UNIFORM and chunk > spec.decode_len:
        warnings.warn(f"chunk {chunk} exceeds decode length {spec.decode_len}: trace has no writes", stacklevel=2)

    offsets = [0] * spec.streams
    if pattern is Pattern.BURSTY_UPDATE:
        rng = np.random.default_rng(spec.seed)
        offsets = [min(int(o), spec.prompt_len) for o in rng.integers(0, chunk, spec.streams)]

    out = []
    for i in range(spec.streams):
        out.append(StreamSpec(
            stream_id=f"r{i + 1}",
            arrival_step=spec.arrival[i] if spec.arrival is not None else 0,
            prompt_len=spec.prompt_len,
            decode_len=spec.decode_len,
            chunk=chunk,
            backend=spec.backend_for(i),
            dim=spec.dim,
            rank=spec.rank,
            tail_offset=offsets[i],
        ))
    return out


def stream_to_dict(s: StreamSpec) -> dict:
    return {
        "stream_id": s.stream_id,
        "arrival_step": s.arrival_step,
        "prompt_len": s.prompt_len,
        "decode_len": s.decode_len,
        "chunk": s.chunk,
        "backend": s.backend.label,
        "dims": {"d": s.dim, "rank": s.rank},
        "tail_offset": s.tail_offset,
        "placement": s.placement,
    }


def stream_from_dict(d: dict) -> StreamSpec:
    try:
        dims = d.get("dims", {})
        return StreamSpec(
            stream_id=str(d["stream_id"]),
            arrival_step=int(d.get("arrival_step", 0)),
            prompt_len=int(d["prompt_len"]),
            decode_len=int(d["decode_len"]),
            chunk=int(d["chunk"]),
            backend=BackendType.parse(d.get("backend", "fast-weight")),
            dim=int(dims.get("d", DEFAULT_DIM)),
            rank=int(dims.get("rank", DEFAULT_RANK)),
            tail_offset=int(d.get("tail_offset", 0)),
            placement=str(d.get("placement", "dev0")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceError(f"bad trace record {d!r}: {exc}") from exc


def dumps_trace(trace: Sequence[StreamSpec]) -> str:
    return "".join(json.dumps(stream_to_dict(s), sort_keys=True) + "\n" for s in trace)


def write_trace(trace: Sequence[StreamSpec], path: str | Path) -> None:
    Path(path).write_text(dumps_trace(trace))


def read_trace(path: str | Path) -> list[StreamSpec]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"{path}:{lineno}: {exc}") from exc
        out.append(stream_from_dict(rec))
    return out
