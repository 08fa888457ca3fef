"""Chunk-causal self-attention with camera-phase rotary addressing.

Queries and keys are rotated by standard multi-axis rotary phases plus a
per-frame offset emitted by a zero-initialized pose network; values and
outputs receive zero-initialized residuals conditioned on the rigid camera
embedding. At initialization the whole operator therefore reduces exactly to
vanilla rotary attention.

Modes:
  full     phase offsets and value/output residuals both active
  qk_only  phase offsets only
  vo_only  value/output residuals only
  dual     two decoupled passes (temporal rotary / spatial+camera rotary),
           averaged 0.5/0.5 before the output projection
  vanilla  plain rotary attention (control)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .geometry import (
    DESCRIPTOR_LEN,
    EMBEDDING_LEN,
    CameraPose,
    pose_descriptor,
    six_dof_embedding,
)
from .numerics import Tensor

MODES = ("full", "qk_only", "vo_only", "dual", "vanilla")
PHASE_HIDDEN = 64
MASK_FILL = -1e30


class AttentionError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 2
    head_dim: int = 16
    mode: str = "full"
    temporal_bands: int = 4
    row_bands: int = 2
    col_bands: int = 2
    delta_all_bands: bool = False
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.head_dim % 2 != 0:
            raise AttentionError("head_dim must be even")
        if self.temporal_bands + self.row_bands + self.col_bands != self.head_dim // 2:
            raise AttentionError("temporal + row + col bands must sum to head_dim / 2")
        if self.mode not in MODES:
            raise AttentionError(f"unknown mode {self.mode!r}")

    @property
    def bands(self) -> int:
        return self.head_dim // 2

    @property
    def delta_bands(self) -> int:
        return self.bands if self.delta_all_bands else self.temporal_bands

    @property
    def inner_dim(self) -> int:
        return self.heads * self.head_dim


@dataclass
class TokenGeometry:
    """Per-token positions plus per-frame camera metadata (constants)."""

    frame_pos: np.ndarray  # (T,) int temporal index, gaps allowed
    row: np.ndarray  # (T,) int
    col: np.ndarray  # (T,) int
    frame_of: np.ndarray  # (T,) int local frame index per token
    frame_descriptors: np.ndarray  # (F, 14)
    frame_embeddings: np.ndarray  # (F, 12)

    def __len__(self) -> int:
        return len(self.frame_pos)

    @property
    def embeddings(self) -> np.ndarray:
        return self.frame_embeddings[self.frame_of]

    @property
    def descriptors(self) -> np.ndarray:
        return self.frame_descriptors[self.frame_of]

    @staticmethod
    def concat(parts: list["TokenGeometry"]) -> "TokenGeometry":
        offsets = np.cumsum([0] + [len(p.frame_descriptors) for p in parts[:-1]])
        return TokenGeometry(
            np.concatenate([p.frame_pos for p in parts]),
            np.concatenate([p.row for p in parts]),
            np.concatenate([p.col for p in parts]),
            np.concatenate([p.frame_of + off for p, off in zip(parts, offsets)]),
            np.concatenate([p.frame_descriptors for p in parts], axis=0),
            np.concatenate([p.frame_embeddings for p in parts], axis=0),
        )


def token_geometry(
    frame_positions: np.ndarray,
    poses: list[CameraPose],
    grid_rows: int,
    grid_cols: int,
) -> TokenGeometry:
    """Expand per-frame positions/poses to the frame-major token grid."""
    frame_positions = np.asarray(frame_positions, dtype=np.int64)
    if len(frame_positions) != len(poses):
        raise AttentionError("one pose required per frame position")
    per_frame = grid_rows * grid_cols
    n_frames = len(frame_positions)
    rows = np.tile(np.repeat(np.arange(grid_rows), grid_cols), n_frames)
    cols = np.tile(np.tile(np.arange(grid_cols), grid_rows), n_frames)
    return TokenGeometry(
        frame_pos=np.repeat(frame_positions, per_frame),
        row=rows,
        col=cols,
        frame_of=np.repeat(np.arange(n_frames), per_frame),
        frame_descriptors=np.stack([pose_descriptor(p) for p in poses]),
        frame_embeddings=np.stack([six_dof_embedding(p) for p in poses]),
    )


def band_frequencies(bands: int, base: float = 10000.0) -> np.ndarray:
    """Inverse-power frequency schedule over ``bands`` rotary bands."""
    if bands < 1:
        raise AttentionError("need at least one rotary band")
    return base ** (-np.arange(bands, dtype=np.float64) / bands)


def rotary_phases(
    positions: np.ndarray, bands: int, base: float = 10000.0
) -> np.ndarray:
    """Angle table theta[p, b] = position_p * omega_b (positions may be gapped)."""
    positions = np.asarray(positions, dtype=np.float64)
    return positions[:, None] * band_frequencies(bands, base)[None, :]


def phase_table(geo: TokenGeometry, cfg: AttentionConfig) -> np.ndarray:
    """Per-token base phases: [temporal bands | row bands | col bands]."""
    groups = []
    for positions, bands in (
        (geo.frame_pos, cfg.temporal_bands),
        (geo.row, cfg.row_bands),
        (geo.col, cfg.col_bands),
    ):
        if bands:
            groups.append(rotary_phases(positions, bands, cfg.rope_base))
    return np.concatenate(groups, axis=1)


def apply_rotary(x: Tensor, phases: Tensor | np.ndarray) -> Tensor:
    """Rotate consecutive feature pairs by band angles; norm preserving."""
    if not isinstance(phases, Tensor):
        phases = Tensor(np.asarray(phases, dtype=x.dtype))
    return nm.rotate_pairs(x, phases)


def chunk_causal_mask(num_chunks: int, tokens_per_chunk: int) -> np.ndarray:
    """Boolean mask: full attention within a chunk, causal across chunks."""
    if num_chunks < 1 or tokens_per_chunk < 1:
        raise AttentionError("chunk counts must be at least 1")
    chunk_of = np.repeat(np.arange(num_chunks), tokens_per_chunk)
    return chunk_of[None, :] <= chunk_of[:, None]


# ---------------------------------------------------------------------------
# parameters


@dataclass
class PhaseOffsetNet:
    """14-vector pose descriptor -> per-band phase offset; zero final layer."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


def init_phase_net(
    bands: int, rng: np.random.Generator, dtype=np.float64
) -> PhaseOffsetNet:
    w1 = rng.normal(0.0, 1.0 / math.sqrt(DESCRIPTOR_LEN), size=(DESCRIPTOR_LEN, PHASE_HIDDEN))
    return PhaseOffsetNet(
        Tensor(w1.astype(dtype)),
        Tensor(np.zeros(PHASE_HIDDEN, dtype=dtype)),
        Tensor(np.zeros((PHASE_HIDDEN, bands), dtype=dtype)),
        Tensor(np.zeros(bands, dtype=dtype)),
    )


def camera_phase_offset(net: PhaseOffsetNet, descriptors: np.ndarray | Tensor) -> Tensor:
    """delta = W2 tanh(W1 c + b1) + b2, one offset row per descriptor row."""
    if not isinstance(descriptors, Tensor):
        descriptors = Tensor(np.asarray(descriptors, dtype=net.w1.dtype))
    hidden = nm.tanh(nm.add(nm.matmul(descriptors, net.w1), net.b1))
    return nm.add(nm.matmul(hidden, net.w2), net.b2)


@dataclass
class AttentionParams:
    """Output projection, zero-init residual maps, and the phase net."""

    w_out: Tensor
    b_out: Tensor
    w_dv: Tensor
    b_dv: Tensor
    w_do: Tensor
    b_do: Tensor
    phase_net: PhaseOffsetNet

    def tensors(self, prefix: str):
        yield f"{prefix}.w_out", self.w_out
        yield f"{prefix}.b_out", self.b_out
        yield f"{prefix}.w_dv", self.w_dv
        yield f"{prefix}.b_dv", self.b_dv
        yield f"{prefix}.w_do", self.w_do
        yield f"{prefix}.b_do", self.b_do
        yield from self.phase_net.tensors(f"{prefix}.phase")


def init_attention_params(
    cfg: AttentionConfig, out_dim: int, rng: np.random.Generator, dtype=np.float64
) -> AttentionParams:
    inner = cfg.inner_dim
    w_out = rng.normal(0.0, 1.0 / math.sqrt(inner), size=(inner, out_dim))
    return AttentionParams(
        w_out=Tensor(w_out.astype(dtype)),
        b_out=Tensor(np.zeros(out_dim, dtype=dtype)),
        w_dv=Tensor(np.zeros((inner + EMBEDDING_LEN, inner), dtype=dtype)),
        b_dv=Tensor(np.zeros(inner, dtype=dtype)),
        w_do=Tensor(np.zeros((inner + EMBEDDING_LEN, out_dim), dtype=dtype)),
        b_do=Tensor(np.zeros(out_dim, dtype=dtype)),
        phase_net=init_phase_net(cfg.delta_bands, rng, dtype),
    )


# ---------------------------------------------------------------------------
# the operator


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    t = x.shape[0]
    return nm.transpose(nm.reshape(x, (t, heads, head_dim)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, t, d = x.shape
    return nm.reshape(nm.transpose(x, (1, 0, 2)), (t, h * d))


def _token_delta(net: PhaseOffsetNet, geo: TokenGeometry, cfg: AttentionConfig, dtype) -> Tensor:
    """Per-token padded phase offsets, computed once per frame then expanded."""
    delta_frames = camera_phase_offset(net, geo.frame_descriptors.astype(dtype))
    expand = (
        geo.frame_of[:, None] == np.arange(len(geo.frame_descriptors))[None, :]
    ).astype(dtype)
    delta = nm.matmul(Tensor(expand), delta_frames)
    if cfg.delta_bands < cfg.bands:
        rest = np.zeros((len(geo), cfg.bands - cfg.delta_bands), dtype=dtype)
        delta = nm.concat([delta, Tensor(rest)], axis=1)
    return nm.reshape(delta, (1, len(geo), cfg.bands))


def _attend(
    qh: Tensor,
    kh: Tensor,
    vh: Tensor,
    mask: np.ndarray,
    head_dim: int,
) -> tuple[Tensor, np.ndarray]:
    scores = nm.matmul(qh, nm.transpose(kh, (0, 2, 1)))
    bias = np.where(mask, 0.0, MASK_FILL).astype(scores.dtype)
    probs = nm.masked_softmax_rows(scores, bias, 1.0 / math.sqrt(head_dim))
    return nm.matmul(probs, vh), probs.data


def pm_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    q_geo: TokenGeometry,
    k_geo: TokenGeometry,
    mask: np.ndarray,
    cfg: AttentionConfig,
    params: AttentionParams,
    capture: list | None = None,
) -> Tensor:
    """Camera-phase rotary attention over post-projection q/k/v.

    ``q`` is (Tq, heads*head_dim); ``k``/``v`` are (Tk, heads*head_dim) and may
    include cached history ahead of the query tokens. ``mask[i, j]`` allows
    query i to attend key j and must be chunk-causal. ``capture``, when given,
    collects the (heads, Tq, Tk) attention probabilities.
    """
    if mask.shape != (len(q_geo), len(k_geo)):
        raise AttentionError(
            f"mask shape {mask.shape} does not match geometry "
            f"({len(q_geo)}, {len(k_geo)})"
        )
    heads, head_dim = cfg.heads, cfg.head_dim
    dtype = q.dtype
    use_delta = cfg.mode in ("full", "qk_only")
    use_residual = cfg.mode in ("full", "vo_only")

    v_tilde = v
    if use_residual:
        e_k = Tensor(k_geo.embeddings.astype(dtype))
        v_tilde = nm.add(
            v, nm.add(nm.matmul(nm.concat([v, e_k], axis=1), params.w_dv), params.b_dv)
        )

    qh = _split_heads(q, heads, head_dim)
    kh = _split_heads(k, heads, head_dim)
    vh = _split_heads(v_tilde, heads, head_dim)

    theta_q = phase_table(q_geo, cfg)
    theta_k = theta_q if k_geo is q_geo else phase_table(k_geo, cfg)

    if cfg.mode == "dual":
        y_a, probs_a = _attend(
            apply_rotary(qh, theta_q[None].astype(dtype)),
            apply_rotary(kh, theta_k[None].astype(dtype)),
            vh,
            mask,
            head_dim,
        )
        nt = cfg.temporal_bands
        spatial_q = theta_q.copy()
        spatial_q[:, :nt] = 0.0
        spatial_k = spatial_q if k_geo is q_geo else _zero_temporal(theta_k, nt)
        delta_q = _token_delta(params.phase_net, q_geo, cfg, dtype)
        delta_k = delta_q if k_geo is q_geo else _token_delta(params.phase_net, k_geo, cfg, dtype)
        y_b, probs_b = _attend(
            apply_rotary(qh, nm.add(Tensor(spatial_q[None].astype(dtype)), delta_q)),
            apply_rotary(kh, nm.add(Tensor(spatial_k[None].astype(dtype)), delta_k)),
            vh,
            mask,
            head_dim,
        )
        if capture is not None:
            capture.append(0.5 * probs_a + 0.5 * probs_b)
        y = nm.add(y_a * 0.5, y_b * 0.5)
    else:
        if use_delta:
            delta_q = _token_delta(params.phase_net, q_geo, cfg, dtype)
            delta_k = delta_q if k_geo is q_geo else _token_delta(params.phase_net, k_geo, cfg, dtype)
            phase_q = nm.add(Tensor(theta_q[None].astype(dtype)), delta_q)
            phase_k = nm.add(Tensor(theta_k[None].astype(dtype)), delta_k)
        else:
            phase_q = Tensor(theta_q[None].astype(dtype))
            phase_k = phase_q if k_geo is q_geo else Tensor(theta_k[None].astype(dtype))
        y, probs = _attend(
            apply_rotary(qh, phase_q), apply_rotary(kh, phase_k), vh, mask, head_dim
        )
        if capture is not None:
            capture.append(probs)

    merged = _merge_heads(y)
    out = nm.add(nm.matmul(merged, params.w_out), params.b_out)
    if use_residual:
        e_q = Tensor(q_geo.embeddings.astype(dtype))
        out = nm.add(
            out,
            nm.add(nm.matmul(nm.concat([merged, e_q], axis=1), params.w_do), params.b_do),
        )
    return out


def _zero_temporal(theta: np.ndarray, temporal_bands: int) -> np.ndarray:
    out = theta.copy()
    out[:, :temporal_bands] = 0.0
    return out
