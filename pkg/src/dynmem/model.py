"""Toy chunk-causal diffusion transformer built on the camera-phase attention.

Blocks are pre-normalized (RMS) with attention and a GELU MLP on residual
paths. Token features are the latent projection plus a learned per-scenario
embedding (standing in for the caption pathway) and sinusoidal features of the
per-chunk noise level. The model predicts the flow-matching velocity.

Two forward paths share all parameters: a full-sequence pass under a
chunk-causal mask, and a streaming per-chunk pass that reads history from a
:class:`~dynmem.cache.KvCache` and can emit the chunk's cache entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .attention import (
    AttentionConfig,
    AttentionParams,
    TokenGeometry,
    chunk_causal_mask,
    init_attention_params,
    pm_attention,
    token_geometry,
)
from .cache import CacheEntry, KvCache, read_history
from .framegraph import SCENARIOS
from .geometry import CameraPose
from .numerics import Tensor

RMS_EPS = 1e-6


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 2
    head_dim: int = 16
    token_dim: int = 16
    mlp_ratio: int = 4
    latent_dim: int = 16
    n_scenarios: int = len(SCENARIOS)
    mode: str = "full"
    delta_all_bands: bool = False
    temporal_bands: int = 4
    row_bands: int = 2
    col_bands: int = 2
    rope_base: float = 10000.0
    sigma_features: int = 8
    rollout_steps: int = 10
    dtype: str = "float64"

    def __post_init__(self):
        if self.head_dim % 2 != 0:
            raise ModelError("head_dim must be even")
        for name in ("heads", "head_dim", "token_dim", "mlp_ratio", "latent_dim"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be at least 1")
        if self.layers < 0:
            raise ModelError("layers must be nonnegative")
        if self.sigma_features % 2 != 0:
            raise ModelError("sigma_features must be even")
        if self.dtype not in ("float64", "float32"):
            raise ModelError(f"unsupported dtype {self.dtype!r}")

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            heads=self.heads,
            head_dim=self.head_dim,
            mode=self.mode,
            temporal_bands=self.temporal_bands,
            row_bands=self.row_bands,
            col_bands=self.col_bands,
            delta_all_bands=self.delta_all_bands,
            rope_base=self.rope_base,
        )

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def inner_dim(self) -> int:
        return self.heads * self.head_dim


@dataclass
class LayerParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    attn: AttentionParams
    g_attn: Tensor
    g_mlp: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def tensors(self, prefix: str):
        for name in ("wq", "bq", "wk", "bk", "wv", "bv"):
            yield f"{prefix}.{name}", getattr(self, name)
        yield from self.attn.tensors(f"{prefix}.attn")
        for name in ("g_attn", "g_mlp", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class Model:
    cfg: ModelConfig
    w_in: Tensor
    b_in: Tensor
    scenario_emb: Tensor
    w_sigma: Tensor
    blocks: list[LayerParams]
    g_head: Tensor
    w_head: Tensor
    b_head: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in ("w_in", "b_in", "scenario_emb", "w_sigma"):
            out[name] = getattr(self, name)
        for i, block in enumerate(self.blocks):
            for name, t in block.tensors(f"block{i}"):
                out[name] = t
        for name in ("g_head", "w_head", "b_head"):
            out[name] = getattr(self, name)
        return out


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> Model:
    dt = cfg.np_dtype
    att_cfg = cfg.attention_config()

    def dense(n_in, n_out):
        return Tensor((rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))).astype(dt))

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dt))

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dt))

    blocks = []
    for _ in range(cfg.layers):
        blocks.append(
            LayerParams(
                wq=dense(cfg.token_dim, cfg.inner_dim),
                bq=zeros(cfg.inner_dim),
                wk=dense(cfg.token_dim, cfg.inner_dim),
                bk=zeros(cfg.inner_dim),
                wv=dense(cfg.token_dim, cfg.inner_dim),
                bv=zeros(cfg.inner_dim),
                attn=init_attention_params(att_cfg, cfg.token_dim, rng, dt),
                g_attn=ones(cfg.token_dim),
                g_mlp=ones(cfg.token_dim),
                mlp_w1=dense(cfg.token_dim, cfg.token_dim * cfg.mlp_ratio),
                mlp_b1=zeros(cfg.token_dim * cfg.mlp_ratio),
                mlp_w2=dense(cfg.token_dim * cfg.mlp_ratio, cfg.token_dim),
                mlp_b2=zeros(cfg.token_dim),
            )
        )
    return Model(
        cfg=cfg,
        w_in=dense(cfg.latent_dim, cfg.token_dim),
        b_in=zeros(cfg.token_dim),
        scenario_emb=Tensor(
            (rng.normal(0.0, 0.1, size=(cfg.n_scenarios, cfg.token_dim))).astype(dt)
        ),
        w_sigma=dense(cfg.sigma_features, cfg.token_dim),
        blocks=blocks,
        g_head=ones(cfg.token_dim),
        w_head=dense(cfg.token_dim, cfg.latent_dim),
        b_head=zeros(cfg.latent_dim),
    )


def rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    ms = nm.mean(nm.mul(x, x), axis=-1, keepdims=True)
    return nm.mul(nm.mul(x, nm.pow_const(ms + RMS_EPS, -0.5)), gain)


def sigma_features(sigmas: np.ndarray, n_features: int) -> np.ndarray:
    """Sinusoidal noise-level features, one row per input value."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    k = np.arange(n_features // 2) + 1.0
    angles = math.pi * sigmas[:, None] * k[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _embed(model: Model, x: np.ndarray, sigma_tok: np.ndarray, scenario_id: int) -> Tensor:
    cfg = model.cfg
    dt = cfg.np_dtype
    h = nm.add(nm.matmul(Tensor(x.astype(dt)), model.w_in), model.b_in)
    onehot = np.zeros((1, cfg.n_scenarios), dtype=dt)
    onehot[0, scenario_id] = 1.0
    h = nm.add(h, nm.matmul(Tensor(onehot), model.scenario_emb))
    feats = sigma_features(sigma_tok, cfg.sigma_features).astype(dt)
    return nm.add(h, nm.matmul(Tensor(feats), model.w_sigma))


def _block(
    model: Model,
    block: LayerParams,
    h: Tensor,
    q_geo: TokenGeometry,
    k_geo: TokenGeometry,
    mask: np.ndarray,
    history: tuple[np.ndarray, np.ndarray] | None,
    capture: list | None,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """One pre-norm attention+MLP block; returns h plus this block's raw k/v."""
    att_cfg = model.cfg.attention_config()
    a_in = rms_norm(h, block.g_attn)
    q = nm.add(nm.matmul(a_in, block.wq), block.bq)
    k = nm.add(nm.matmul(a_in, block.wk), block.bk)
    v = nm.add(nm.matmul(a_in, block.wv), block.bv)
    k_new, v_new = k.data, v.data
    if history is not None:
        k = nm.concat([Tensor(history[0].astype(k.dtype)), k], axis=0)
        v = nm.concat([Tensor(history[1].astype(v.dtype)), v], axis=0)
    attn = pm_attention(q, k, v, q_geo, k_geo, mask, att_cfg, block.attn, capture)
    h = nm.add(h, attn)
    m_in = rms_norm(h, block.g_mlp)
    m = nm.add(nm.matmul(m_in, block.mlp_w1), block.mlp_b1)
    m = nm.add(nm.matmul(nm.gelu(m), block.mlp_w2), block.mlp_b2)
    return nm.add(h, m), k_new, v_new


def forward_tokens(
    model: Model,
    x: np.ndarray,
    geo: TokenGeometry,
    mask: np.ndarray,
    sigma_tok: np.ndarray,
    scenario_id: int,
    capture: list | None = None,
) -> Tensor:
    """Full-sequence chunk-causal pass over (T, latent_dim) tokens."""
    if len(geo) != x.shape[0]:
        raise ModelError("geometry does not match token count")
    h = _embed(model, x, sigma_tok, scenario_id)
    for block in model.blocks:
        h, _, _ = _block(model, block, h, geo, geo, mask, None, capture)
    return nm.add(nm.matmul(rms_norm(h, model.g_head), model.w_head), model.b_head)


def forward_chunk(
    model: Model,
    x: np.ndarray,
    geo: TokenGeometry,
    sigma: float,
    scenario_id: int,
    cache: KvCache,
    up_to_chunk: int,
    grid: tuple[int, int],
    capture: list | None = None,
) -> tuple[Tensor, "PendingEntry"]:
    """Streaming pass for one chunk's tokens against cached history.

    Returns the velocity prediction for the new tokens plus the chunk's raw
    (pre-rotation) per-layer keys/values, ready to be written into the cache.
    """
    history = read_history(cache, up_to_chunk)
    if len(history):
        hist_geo = token_geometry(history.frame_positions, history.poses, *grid)
        k_geo = TokenGeometry.concat([hist_geo, geo])
    else:
        k_geo = geo
    n_new = len(geo)
    mask = np.ones((n_new, len(k_geo)), dtype=bool)
    sigma_tok = np.full(n_new, sigma)
    h = _embed(model, x, sigma_tok, scenario_id)
    keys, values = [], []
    for layer_idx, block in enumerate(model.blocks):
        hist = (
            (history.keys[layer_idx], history.values[layer_idx]) if len(history) else None
        )
        h, k_new, v_new = _block(model, block, h, geo, k_geo, mask, hist, capture)
        keys.append(k_new)
        values.append(v_new)
    pred = nm.add(nm.matmul(rms_norm(h, model.g_head), model.w_head), model.b_head)
    return pred, PendingEntry(keys, values)


@dataclass
class PendingEntry:
    """Per-layer raw keys/values of a freshly processed chunk."""

    keys: list[np.ndarray]
    values: list[np.ndarray]

    def to_cache_entry(
        self,
        chunk_id: int,
        frame_positions: np.ndarray,
        poses: list[CameraPose],
        reliability: str = "clean",
        anchor: bool = False,
    ) -> CacheEntry:
        return CacheEntry(
            chunk_id=chunk_id,
            keys=self.keys,
            values=self.values,
            frame_positions=np.asarray(frame_positions, dtype=np.int64),
            poses=poses,
            reliability=reliability,
            anchor=anchor,
        )


def scenario_index(tag: str) -> int:
    try:
        return SCENARIOS.index(tag)
    except ValueError:
        raise ModelError(f"unknown scenario tag {tag!r}") from None
