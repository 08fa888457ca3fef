"""Binary dataset container and cache snapshots.

Envelope layout: 4-byte magic ``RMDS``, little-endian u32 version, u64 header
length, a sorted-keys JSON header, then the raw payload. The header records
the payload byte count and CRC32, which every read verifies.

A dataset payload holds, per clip, the observed latents followed by the clean
(pre-interruption) latents, both little-endian float32. Cache snapshots reuse
the same envelope with per-entry key/value blocks for diagnostic replay.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict

import numpy as np

from .cache import CacheEntry, KvCache
from .framegraph import FrameGraph, GraphNode, SyntheticClip, WorldConfig
from .geometry import pose_from_dict, pose_to_dict

MAGIC = b"RMDS"
VERSION = 1


class DatasetError(ValueError):
    pass


def write_envelope(path, header: dict, payload: bytes) -> None:
    header = dict(header)
    header["payload_bytes"] = len(payload)
    header["payload_crc32"] = zlib.crc32(payload)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def read_envelope(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DatasetError(f"not a dataset container (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise DatasetError(f"unsupported container version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        payload = fh.read()
    if len(payload) != header.get("payload_bytes"):
        raise DatasetError("payload length does not match header")
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise DatasetError("payload checksum mismatch")
    return header, payload


# ---------------------------------------------------------------------------
# graphs


def graph_to_dict(graph: FrameGraph | None) -> dict | None:
    if graph is None:
        return None
    return {
        "nodes": [[n.chunk_id, n.role, n.protected] for n in graph.nodes],
        "chain_edges": [list(e) for e in graph.chain_edges],
        "memory_edges": [list(e) for e in graph.memory_edges],
        "degradation_interval": (
            list(graph.degradation_interval)
            if graph.degradation_interval is not None
            else None
        ),
    }


def graph_from_dict(d: dict | None) -> FrameGraph | None:
    if d is None:
        return None
    return FrameGraph(
        nodes=[GraphNode(int(c), role, bool(p)) for c, role, p in d["nodes"]],
        chain_edges=[tuple(e) for e in d["chain_edges"]],
        memory_edges=[tuple(e) for e in d["memory_edges"]],
        degradation_interval=(
            tuple(d["degradation_interval"])
            if d["degradation_interval"] is not None
            else None
        ),
    )


# ---------------------------------------------------------------------------
# datasets


def write_dataset(path, clips: list[SyntheticClip], provenance: dict) -> None:
    if not clips:
        raise DatasetError("refusing to write an empty dataset")
    world = clips[0].config
    shape = clips[0].latents.shape
    records = []
    payload = bytearray()
    for clip in clips:
        if clip.latents.shape != shape:
            raise DatasetError("all clips must share one latent shape")
        records.append(
            {
                "seed": clip.seed,
                "scenario": clip.caption_tag,
                "rate": clip.rate,
                "state": [float(s) for s in clip.state],
                "interruption_kind": clip.interruption_kind,
                "degraded_frames": (
                    list(clip.degraded_frames) if clip.degraded_frames else None
                ),
                "poses": [pose_to_dict(p) for p in clip.poses],
                "graph": graph_to_dict(clip.graph),
            }
        )
        payload += np.ascontiguousarray(clip.latents, dtype="<f4").tobytes()
        payload += np.ascontiguousarray(clip.clean_latents, dtype="<f4").tobytes()
    header = {
        "kind": "dataset",
        "provenance": provenance,
        "clip_count": len(clips),
        "latent_shape": list(shape),
        "world": asdict(world),
        "clips": records,
    }
    write_envelope(path, header, bytes(payload))


def read_dataset(path) -> tuple[list[SyntheticClip], dict]:
    header, payload = read_envelope(path)
    if header.get("kind") != "dataset":
        raise DatasetError(f"container holds {header.get('kind')!r}, not a dataset")
    shape = tuple(header["latent_shape"])
    world = WorldConfig(**header["world"])
    per_clip = int(np.prod(shape)) * 4
    clips = []
    for i, rec in enumerate(header["clips"]):
        base = i * 2 * per_clip
        observed = np.frombuffer(payload[base : base + per_clip], dtype="<f4").reshape(shape)
        clean = np.frombuffer(
            payload[base + per_clip : base + 2 * per_clip], dtype="<f4"
        ).reshape(shape)
        clips.append(
            SyntheticClip(
                latents=observed.astype(np.float64),
                clean_latents=clean.astype(np.float64),
                poses=[pose_from_dict(p) for p in rec["poses"]],
                state=np.array(rec["state"], dtype=float),
                rate=float(rec["rate"]),
                caption_tag=rec["scenario"],
                config=world,
                seed=int(rec["seed"]),
                graph=graph_from_dict(rec["graph"]),
                degraded_frames=(
                    tuple(rec["degraded_frames"]) if rec["degraded_frames"] else None
                ),
                interruption_kind=rec["interruption_kind"],
            )
        )
    return clips, header


# ---------------------------------------------------------------------------
# cache snapshots


def save_cache_snapshot(path, cache: KvCache, provenance: dict | None = None) -> None:
    entries = []
    payload = bytearray()
    for e in cache.entries:
        arrays = list(e.keys) + list(e.values)
        offsets = []
        for arr in arrays:
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            offsets.append((len(payload), list(arr.shape)))
            payload += raw
        entries.append(
            {
                "chunk_id": e.chunk_id,
                "frame_positions": [int(p) for p in e.frame_positions],
                "poses": [pose_to_dict(p) for p in e.poses],
                "reliability": e.reliability,
                "anchor": e.anchor,
                "blocks": offsets,
            }
        )
    header = {
        "kind": "cache_snapshot",
        "provenance": provenance or {},
        "layers": cache.layers,
        "next_write_chunk": cache.next_write_chunk,
        "frame_offset": cache.frame_offset,
        "entries": entries,
    }
    write_envelope(path, header, bytes(payload))


def load_cache_snapshot(path) -> KvCache:
    header, payload = read_envelope(path)
    if header.get("kind") != "cache_snapshot":
        raise DatasetError("container does not hold a cache snapshot")
    layers = int(header["layers"])
    cache = KvCache(
        layers=layers,
        next_write_chunk=int(header["next_write_chunk"]),
        frame_offset=int(header["frame_offset"]),
    )
    for rec in header["entries"]:
        arrays = []
        for offset, shape in rec["blocks"]:
            count = int(np.prod(shape)) * 8
            arrays.append(
                np.frombuffer(payload[offset : offset + count], dtype="<f8")
                .reshape(shape)
                .copy()
            )
        cache.entries.append(
            CacheEntry(
                chunk_id=int(rec["chunk_id"]),
                keys=arrays[:layers],
                values=arrays[layers:],
                frame_positions=np.array(rec["frame_positions"], dtype=np.int64),
                poses=[pose_from_dict(p) for p in rec["poses"]],
                reliability=rec["reliability"],
                anchor=bool(rec["anchor"]),
            )
        )
    return cache
