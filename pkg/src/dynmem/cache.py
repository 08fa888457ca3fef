"""Streaming dynamic memory: per-chunk key/value storage with original positions.

Cached keys and values are post-projection but pre-rotation; rotary phases are
applied at read time from the stored frame positions and pose metadata, so one
cache serves every attention mode and keeps the zero-init equivalence exact.

Reference chunks may be prepended at frame positions ``0 .. n_ref*m - 1``; the
target stream then starts at frame position ``gap_chunks * m``, preserving an
explicit temporal gap in the address space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose

RELIABILITIES = ("clean", "degraded", "noise")


class CacheError(ValueError):
    pass


@dataclass
class CacheEntry:
    """Keys/values for one chunk, tagged with its original frame positions."""

    chunk_id: int
    keys: list[np.ndarray]  # per layer, (tokens, inner_dim)
    values: list[np.ndarray]  # per layer, (tokens, inner_dim)
    frame_positions: np.ndarray  # (frames,) strictly increasing
    poses: list[CameraPose]  # per frame
    reliability: str = "clean"
    anchor: bool = False

    def validate(self, layers: int) -> None:
        pos = np.asarray(self.frame_positions)
        if len(pos) == 0:
            raise CacheError("entry has no frames")
        if not (np.diff(pos) > 0).all():
            raise CacheError("frame positions must be strictly increasing")
        if len(self.poses) != len(pos):
            raise CacheError("one pose required per frame position")
        if len(self.keys) != layers or len(self.values) != layers:
            raise CacheError(f"expected keys/values for {layers} layers")
        tokens = self.keys[0].shape[0]
        if tokens % len(pos) != 0:
            raise CacheError("token count must be a multiple of the frame count")
        for k, v in zip(self.keys, self.values):
            if k.shape != self.keys[0].shape or v.shape != self.keys[0].shape:
                raise CacheError("per-layer key/value shapes must agree")
        if self.reliability not in RELIABILITIES:
            raise CacheError(f"unknown reliability {self.reliability!r}")


@dataclass
class HistoryView:
    """Concatenation, in position order, of all entries before a chunk."""

    keys: list[np.ndarray]  # per layer, (total_tokens, inner_dim)
    values: list[np.ndarray]
    frame_positions: np.ndarray
    poses: list[CameraPose]
    chunk_of_frame: np.ndarray  # (frames,) chunk_id per frame

    def __len__(self) -> int:
        return 0 if not self.keys else self.keys[0].shape[0]


@dataclass
class KvCache:
    layers: int
    entries: list[CacheEntry] = field(default_factory=list)
    next_write_chunk: int = 0
    frame_offset: int = 0  # target stream start set by prepend_reference

    def positions_in_use(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.asarray(e.frame_positions) for e in self.entries])


def write_chunk(cache: KvCache, entry: CacheEntry) -> KvCache:
    """Append one chunk; positions must not collide with stored ones."""
    entry.validate(cache.layers)
    used = set(cache.positions_in_use().tolist())
    overlap = used.intersection(np.asarray(entry.frame_positions).tolist())
    if overlap:
        raise CacheError(f"frame positions already cached: {sorted(overlap)}")
    cache.entries.append(entry)
    cache.entries.sort(key=lambda e: int(np.asarray(e.frame_positions)[0]))
    cache.next_write_chunk = max(cache.next_write_chunk, entry.chunk_id + 1)
    return cache


def read_history(cache: KvCache, up_to_chunk: int) -> HistoryView:
    """All entries with chunk_id < ``up_to_chunk``, concatenated in position order."""
    selected = [e for e in cache.entries if e.chunk_id < up_to_chunk]
    if not selected:
        return HistoryView([], [], np.zeros(0, dtype=np.int64), [], np.zeros(0, dtype=np.int64))
    keys = [
        np.concatenate([e.keys[layer] for e in selected], axis=0)
        for layer in range(cache.layers)
    ]
    values = [
        np.concatenate([e.values[layer] for e in selected], axis=0)
        for layer in range(cache.layers)
    ]
    positions = np.concatenate([np.asarray(e.frame_positions) for e in selected])
    poses = [p for e in selected for p in e.poses]
    chunk_of = np.concatenate(
        [np.full(len(e.frame_positions), e.chunk_id, dtype=np.int64) for e in selected]
    )
    return HistoryView(keys, values, positions, poses, chunk_of)


def prepend_reference(
    cache: KvCache,
    ref_entries: list[CacheEntry],
    gap_chunks: int,
    frames_per_chunk: int,
) -> KvCache:
    """Place reference chunks at old positions and open a gap before the target.

    Reference chunk i occupies frame positions ``i*m .. (i+1)*m - 1``; the
    first target frame position becomes exactly ``gap_chunks * m``.
    """
    if any(e.chunk_id >= 0 for e in cache.entries):
        raise CacheError("cannot prepend references after target chunks were written")
    m = frames_per_chunk
    target_start = gap_chunks * m
    max_ref_pos = len(ref_entries) * m - 1
    if target_start <= max_ref_pos:
        raise CacheError(
            f"gap of {gap_chunks} chunks overlaps {len(ref_entries)} reference chunks"
        )
    for i, entry in enumerate(ref_entries):
        entry.chunk_id = -len(ref_entries) + i
        entry.frame_positions = np.arange(i * m, (i + 1) * m, dtype=np.int64)
        write_chunk(cache, entry)
    cache.frame_offset = target_start
    cache.next_write_chunk = 0
    return cache


def drop_nodes(
    cache: KvCache,
    chunk_ids: set[int],
    rng: np.random.Generator | None = None,
    mode: str = "noise",
) -> KvCache:
    """Noise-out (default) or remove the listed chunks, protecting anchors.

    At least one anchor-flagged entry must survive untouched.
    """
    if mode not in ("noise", "remove"):
        raise CacheError(f"unknown drop mode {mode!r}")
    if not chunk_ids:
        return cache
    surviving_anchors = [
        e for e in cache.entries if e.anchor and e.chunk_id not in chunk_ids
    ]
    if any(e.anchor for e in cache.entries) and not surviving_anchors:
        raise CacheError("drop set would remove every anchor entry")
    if mode == "remove":
        cache.entries = [e for e in cache.entries if e.chunk_id not in chunk_ids]
        return cache
    if rng is None:
        rng = np.random.default_rng(0)
    for e in cache.entries:
        if e.chunk_id in chunk_ids:
            e.values = [rng.standard_normal(v.shape).astype(v.dtype) for v in e.values]
            e.reliability = "noise"
    return cache
