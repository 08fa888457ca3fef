"""Synthetic worlds with known hidden state, interruptions, and memory graphs.

The latent "encoder" is analytic and invertible: each frame is a token grid
whose first channel carries the scenario state (bar occupancy or dot mask), so
ground truth can be decoded exactly from clean latents. Scenes live in a world
strip wider than the visible grid, which lets camera pans move the dynamic
region out of sight and back.

A clip's memory graph marks one protected anchor (last clean chunk before a
degradation window), the interruption chunks, and the first clean recovery
chunk, with a recovery->anchor memory edge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CameraPose, nearest_pose_index, rotation_about_y

SCENARIOS = ("filling_bar", "moving_dot", "pan_loop_scene")
INTERRUPTIONS = ("camera_loop", "light_toggle", "occluder", "zoom")
ROLES = ("anchor", "interruption", "recovery", "plain")

# Yaw per world column of pan; any small constant works, it only has to make
# panned poses distinguishable and return exactly to baseline.
COL_ANGLE = math.tau / 96.0
OCCLUDER_AMPLITUDE = 1.5


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    grid_rows: int = 8
    grid_cols: int = 8
    latent_dim: int = 16
    chunks: int = 7
    frames_per_chunk: int = 3
    world_cols: int = 24
    rate_min: float = 0.01
    rate_max: float = 0.04

    @property
    def frames(self) -> int:
        return self.chunks * self.frames_per_chunk

    @property
    def tokens(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass(frozen=True)
class InterruptionSpec:
    kind: str
    onset: int
    duration: int
    magnitude: float = 1.0

    def window(self) -> tuple[int, int] | None:
        """Inclusive degraded frame range, or None for zero duration."""
        if self.duration <= 0:
            return None
        return (self.onset, self.onset + self.duration - 1)


@dataclass
class GraphNode:
    chunk_id: int
    role: str
    protected: bool = False


@dataclass
class FrameGraph:
    nodes: list[GraphNode]
    chain_edges: list[tuple[int, int]]
    memory_edges: list[tuple[int, int]] = field(default_factory=list)
    degradation_interval: tuple[int, int] | None = None

    def role_chunks(self, role: str) -> list[int]:
        return [n.chunk_id for n in self.nodes if n.role == role]

    def validate(self) -> None:
        ids = [n.chunk_id for n in self.nodes]
        if ids != sorted(set(ids)):
            raise WorldError("node chunk ids must be unique and sorted")
        for n in self.nodes:
            if n.role not in ROLES:
                raise WorldError(f"unknown role {n.role!r}")
        anchors = {n.chunk_id for n in self.nodes if n.role == "anchor" and n.protected}
        interruptions = self.role_chunks("interruption")
        if interruptions and not anchors:
            raise WorldError("graphs with interruptions need a protected anchor")
        for rec, anc in self.memory_edges:
            if anc >= rec:
                raise WorldError("memory edges must point to an earlier anchor")
            if anc not in {n.chunk_id for n in self.nodes if n.role == "anchor"}:
                raise WorldError("memory edge target is not an anchor")
        recoveries = self.role_chunks("recovery")
        linked = {rec for rec, _ in self.memory_edges}
        if set(recoveries) - linked:
            raise WorldError("every recovery node needs a memory edge")
        if self.degradation_interval is not None:
            start, end = self.degradation_interval
            if anchors and min(anchors) >= start:
                raise WorldError("degradation must start after the anchor")
            if recoveries and max(recoveries) <= end:
                raise WorldError("degradation must end before the recovery")


@dataclass
class SyntheticClip:
    """Chunked latents plus exact ground truth for one generated clip."""

    latents: np.ndarray  # (chunks, frames_per_chunk, tokens, dim) as observed
    clean_latents: np.ndarray  # same shape, before any interruption
    poses: list[CameraPose]  # per frame
    state: np.ndarray  # (frames,) scalar hidden state
    rate: float
    caption_tag: str
    config: WorldConfig
    seed: int
    graph: FrameGraph | None = None
    degraded_frames: tuple[int, int] | None = None
    interruption_kind: str | None = None

    @property
    def n_chunks(self) -> int:
        return self.latents.shape[0]

    def frame_latents(self, kind: str = "observed") -> np.ndarray:
        """Flatten back to (frames, tokens, dim)."""
        src = self.latents if kind == "observed" else self.clean_latents
        c, f, t, d = src.shape
        return src.reshape(c * f, t, d)


# ---------------------------------------------------------------------------
# rendering


def _background(cfg: WorldConfig, view_offset: int) -> np.ndarray:
    """Static world texture for the visible window (tokens, dim)."""
    rows = np.arange(cfg.grid_rows)
    wcols = np.arange(cfg.grid_cols) + view_offset
    frame = np.zeros((cfg.grid_rows, cfg.grid_cols, cfg.latent_dim))
    frame[:, :, 1] = 0.5 * np.cos(math.tau * wcols / cfg.world_cols)[None, :]
    frame[:, :, 2] = 0.5 * np.sin(math.tau * rows / cfg.grid_rows)[:, None]
    frame[:, :, 3] = 0.5 * np.cos(math.tau * wcols / 5.0)[None, :]
    return frame


def _render_fill(cfg: WorldConfig, state: float, view_offset: int) -> np.ndarray:
    """Bar at world columns [0, grid_cols); row occupancy encodes fill level."""
    frame = _background(cfg, view_offset)
    rows = np.arange(cfg.grid_rows)
    height_above_bottom = cfg.grid_rows - 1 - rows
    occupancy = np.clip(cfg.grid_rows * state - height_above_bottom, 0.0, 1.0)
    wcols = np.arange(cfg.grid_cols) + view_offset
    visible_bar = (wcols >= 0) & (wcols < cfg.grid_cols)
    frame[:, visible_bar, 0] = occupancy[:, None]
    return frame.reshape(cfg.tokens, cfg.latent_dim)


def _render_dot(cfg: WorldConfig, col: int, view_offset: int) -> np.ndarray:
    frame = _background(cfg, view_offset)
    vis_col = col - view_offset
    if 0 <= vis_col < cfg.grid_cols:
        frame[cfg.grid_rows // 2, vis_col, 0] = 1.0
    return frame.reshape(cfg.tokens, cfg.latent_dim)


def render_frame(
    scenario: str, cfg: WorldConfig, state: float, view_offset: int = 0
) -> np.ndarray:
    if scenario in ("filling_bar", "pan_loop_scene"):
        return _render_fill(cfg, state, view_offset)
    if scenario == "moving_dot":
        return _render_dot(cfg, int(round(state * cfg.grid_cols)) % cfg.grid_cols, view_offset)
    raise WorldError(f"unknown scenario {scenario!r}")


def decode_state(frame: np.ndarray, scenario: str, cfg: WorldConfig) -> float:
    """Invert the analytic encoder on one clean, unpanned frame."""
    grid = frame.reshape(cfg.grid_rows, cfg.grid_cols, cfg.latent_dim)
    if scenario in ("filling_bar", "pan_loop_scene"):
        return float(np.clip(grid[:, :, 0], 0.0, 1.0).mean())
    if scenario == "moving_dot":
        col = int(np.argmax(grid[:, :, 0].max(axis=0)))
        return col / cfg.grid_cols
    raise WorldError(f"unknown scenario {scenario!r}")


def _pan_offsets(n: int, peak: int) -> np.ndarray:
    """Integer pan schedule: away and back, zero outside, peak mid-window."""
    j = np.arange(n)
    return np.rint(peak * np.sin(math.pi * (j + 1) / (n + 1))).astype(int)


def _pose_for_offset(offset: int) -> CameraPose:
    return CameraPose(rotation_about_y(offset * COL_ANGLE), np.zeros(3), 1.0, 1.0)


# ---------------------------------------------------------------------------
# operations


def chunk_clip(frames: np.ndarray, frames_per_chunk: int) -> np.ndarray:
    """Group (frames, tokens, dim) into chunks, repeating the last frame to pad."""
    if frames_per_chunk < 1:
        raise WorldError("frames_per_chunk must be at least 1")
    n = frames.shape[0]
    remainder = n % frames_per_chunk
    if remainder:
        pad = np.repeat(frames[-1:], frames_per_chunk - remainder, axis=0)
        frames = np.concatenate([frames, pad], axis=0)
    chunks = frames.shape[0] // frames_per_chunk
    return frames.reshape(chunks, frames_per_chunk, *frames.shape[1:])


def synth_world(
    seed: int, scenario: str, length: int, cfg: WorldConfig | None = None
) -> SyntheticClip:
    """Deterministically generate one clip with exact state and poses."""
    if scenario not in SCENARIOS:
        raise WorldError(f"unknown scenario {scenario!r}")
    cfg = cfg or WorldConfig()
    rng = np.random.default_rng(seed)
    frames = np.zeros((length, cfg.tokens, cfg.latent_dim))
    poses: list[CameraPose] = []

    if scenario in ("filling_bar", "pan_loop_scene"):
        rate = float(rng.uniform(cfg.rate_min, cfg.rate_max))
        state = np.minimum(1.0, rate * np.arange(length))
        offsets = np.zeros(length, dtype=int)
        if scenario == "pan_loop_scene":
            # Pan away and back over the middle chunks, snapped to chunk
            # boundaries so anchor/recovery land in clean chunks.
            fpc = cfg.frames_per_chunk
            pad = max(1, (length // fpc) // 3) * fpc
            start, stop = pad, max(pad + 1, length - pad)
            peak = 2 * cfg.grid_cols
            offsets[start:stop] = _pan_offsets(stop - start, peak)
        for k in range(length):
            frames[k] = _render_fill(cfg, float(state[k]), int(offsets[k]))
            poses.append(_pose_for_offset(int(offsets[k])))
        degraded = None
        if scenario == "pan_loop_scene":
            away = np.flatnonzero(offsets != 0)
            if away.size:
                degraded = (int(away[0]), int(away[-1]))
    else:  # moving_dot
        rate = 1.0 / cfg.grid_cols  # one column per frame
        col0 = int(rng.integers(0, cfg.grid_cols))
        cols = (col0 + np.arange(length)) % cfg.grid_cols
        state = cols / cfg.grid_cols
        for k in range(length):
            frames[k] = _render_dot(cfg, int(cols[k]), 0)
            poses.append(CameraPose.identity())
        degraded = None

    latents = chunk_clip(frames, cfg.frames_per_chunk)
    return SyntheticClip(
        latents=latents,
        clean_latents=latents.copy(),
        poses=poses,
        state=state.astype(float),
        rate=rate,
        caption_tag=scenario,
        config=cfg,
        seed=seed,
        degraded_frames=degraded,
        interruption_kind="camera_loop" if degraded is not None else None,
    )


def apply_interruption(clip: SyntheticClip, spec: InterruptionSpec) -> SyntheticClip:
    """Overwrite observed latents (and poses, for camera kinds) in the window.

    The hidden state keeps evolving untouched underneath the degradation.
    """
    if spec.kind not in INTERRUPTIONS:
        raise WorldError(f"unknown interruption kind {spec.kind!r}")
    window = spec.window()
    if window is None:
        return clip
    n_frames = len(clip.state)
    if spec.onset < 0 or window[1] >= n_frames:
        raise WorldError(f"window {window} out of bounds for {n_frames} frames")
    cfg = clip.config
    frames = clip.frame_latents("observed").copy()
    poses = list(clip.poses)

    if spec.kind == "light_toggle":
        m = spec.magnitude
        frames[spec.onset : window[1] + 1] *= 1.0 - m
    elif spec.kind == "occluder":
        rows = np.arange(cfg.grid_rows)
        cols = np.arange(cfg.grid_cols)
        checker = np.where((rows[:, None] + cols[None, :]) % 2 == 0, 1.0, -1.0)
        pattern = (OCCLUDER_AMPLITUDE * spec.magnitude) * checker
        frames[spec.onset : window[1] + 1] = np.repeat(
            pattern.reshape(cfg.tokens, 1), cfg.latent_dim, axis=1
        )
    elif spec.kind == "camera_loop":
        peak = int(round(2 * cfg.grid_cols * spec.magnitude))
        offsets = _pan_offsets(spec.duration, peak)
        for j, k in enumerate(range(spec.onset, window[1] + 1)):
            frames[k] = render_frame(clip.caption_tag, cfg, float(clip.state[k]), int(offsets[j]))
            poses[k] = _pose_for_offset(int(offsets[j]))
    elif spec.kind == "zoom":
        for k in range(spec.onset, window[1] + 1):
            p = poses[k]
            poses[k] = CameraPose(
                p.rotation, p.translation, p.fx * spec.magnitude, p.fy * spec.magnitude
            )

    return replace(
        clip,
        latents=chunk_clip(frames, cfg.frames_per_chunk),
        poses=poses,
        degraded_frames=window,
        interruption_kind=spec.kind,
    )


def build_graph(clip: SyntheticClip, spec: InterruptionSpec | None = None) -> FrameGraph:
    """Derive anchor / interruption / recovery roles from the degraded window."""
    n_chunks = clip.n_chunks
    fpc = clip.config.frames_per_chunk
    chain = [(i, i + 1) for i in range(n_chunks - 1)]
    window = spec.window() if spec is not None else clip.degraded_frames
    if window is None:
        return FrameGraph(
            [GraphNode(i, "plain") for i in range(n_chunks)], chain
        )
    start_chunk = window[0] // fpc
    end_chunk = window[1] // fpc
    if start_chunk == 0:
        raise WorldError("degradation window leaves no clean anchor chunk")
    anchor = start_chunk - 1
    if clip.interruption_kind == "camera_loop" and window[1] + 1 < len(clip.poses):
        # Loop-return point: first post-window frame whose pose is nearest the
        # initial view decides the recovery chunk.
        ret = nearest_pose_index(clip.poses, clip.poses[0], exclude_prefix=window[1] + 1)
        recovery = ret // fpc
    else:
        recovery = end_chunk + 1 if end_chunk + 1 < n_chunks else None
    nodes = []
    for i in range(n_chunks):
        if i == anchor:
            nodes.append(GraphNode(i, "anchor", protected=True))
        elif start_chunk <= i <= end_chunk:
            nodes.append(GraphNode(i, "interruption"))
        elif recovery is not None and i == recovery:
            nodes.append(GraphNode(i, "recovery"))
        else:
            nodes.append(GraphNode(i, "plain"))
    memory = [(recovery, anchor)] if recovery is not None else []
    graph = FrameGraph(nodes, chain, memory, (start_chunk, end_chunk))
    graph.validate()
    return graph
