"""Training loop, streaming rollout, and checkpoint IO for the toy model.

A training sample is assembled from a clip plus a :class:`TrainingPlan`:
per-chunk noising of the observed latents, pure-noise replacement for dropped
chunks, and optional clean reference chunks prepended at their original frame
positions with the target stream shifted past a sampled gap. Gradients flow
through the whole in-plan sequence (single forward graph; history is not
detached).

Checkpoints are a binary envelope: magic ``RMCK``, version, a JSON block with
configs, iteration, rng state, and the parameter manifest, then little-endian
float64 payloads for every parameter and both moment accumulators.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nm
from .attention import TokenGeometry, chunk_causal_mask, token_geometry
from .cache import KvCache, prepend_reference, write_chunk
from .curriculum import (
    CurriculumConfig,
    LossBundle,
    TrainingPlan,
    adaptive_weight,
    applicable_regimes,
    delta_loss,
    flow_loss,
    make_plan,
    noise_sample,
    sigma_batch,
)
from .framegraph import SyntheticClip
from .model import (
    Model,
    ModelConfig,
    forward_chunk,
    forward_tokens,
    init_model,
    scenario_index,
)
from .numerics import Tape, Tensor, grad

CHECKPOINT_MAGIC = b"RMCK"
CHECKPOINT_VERSION = 1


class TrainerError(RuntimeError):
    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass
class TrainState:
    model: Model
    opt: OptimizerConfig
    curriculum: CurriculumConfig
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    iteration: int
    rng: np.random.Generator


def init_train_state(
    model_cfg: ModelConfig,
    opt: OptimizerConfig | None = None,
    curriculum: CurriculumConfig | None = None,
    seed: int = 0,
) -> TrainState:
    seq = np.random.SeedSequence(seed)
    init_seed, run_seed = seq.spawn(2)
    model = init_model(model_cfg, np.random.default_rng(init_seed))
    params = model.named_parameters()
    return TrainState(
        model=model,
        opt=opt or OptimizerConfig(),
        curriculum=curriculum or CurriculumConfig(),
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
        iteration=0,
        rng=np.random.default_rng(run_seed),
    )


# ---------------------------------------------------------------------------
# sample assembly


@dataclass
class AssembledSample:
    x_t: np.ndarray  # (chunks_total, fpc, tokens, dim)
    u_t: np.ndarray
    x0: np.ndarray
    sigma_chunk: np.ndarray
    loss_mask: np.ndarray
    geo: TokenGeometry
    mask: np.ndarray
    scenario_id: int
    n_ref: int


def assemble_sample(
    clip: SyntheticClip, plan: TrainingPlan, rng: np.random.Generator, dtype
) -> AssembledSample:
    cfg = clip.config
    fpc = cfg.frames_per_chunk
    n = clip.n_chunks
    if len(plan.sigmas) != n or len(plan.loss_mask) != n:
        raise TrainerError(
            f"plan covers {len(plan.sigmas)} chunks but clip has {n}"
        )
    x0 = clip.latents.astype(dtype)

    ref_ids: tuple[int, ...] = ()
    offset = 0
    if plan.cache_prepend is not None:
        ref_ids, gap = plan.cache_prepend
        offset = gap * fpc

    chunks = []
    positions = []
    poses = []
    for j, rc in enumerate(ref_ids):
        ref_x = clip.clean_latents[rc].astype(dtype)
        chunks.append((ref_x, np.zeros_like(ref_x), ref_x, 0.0, 0.0))
        positions.append(np.arange(j * fpc, (j + 1) * fpc))
        poses.extend(clip.poses[rc * fpc : (rc + 1) * fpc])
    for c in range(n):
        sigma_c = float(plan.sigmas[c])
        masked = bool(plan.loss_mask[c])
        if c in plan.drop_set:
            x_t = rng.standard_normal(x0[c].shape).astype(dtype)
            u_t = np.zeros_like(x_t)
        elif sigma_c > 0.0 or masked:
            x_t, u_t = noise_sample(x0[c], sigma_c, rng)
        else:
            x_t, u_t = x0[c], np.zeros_like(x0[c])
        chunks.append((x_t, u_t, x0[c], sigma_c, float(masked)))
        positions.append(offset + np.arange(c * fpc, (c + 1) * fpc))
        poses.extend(clip.poses[c * fpc : (c + 1) * fpc])

    x_t = np.stack([c[0] for c in chunks])
    u_t = np.stack([c[1] for c in chunks])
    x0_all = np.stack([c[2] for c in chunks])
    sigma_chunk = np.array([c[3] for c in chunks])
    loss_mask = np.array([c[4] for c in chunks])
    geo = token_geometry(
        np.concatenate(positions), poses, cfg.grid_rows, cfg.grid_cols
    )
    mask = chunk_causal_mask(len(chunks), fpc * cfg.tokens)
    return AssembledSample(
        x_t=x_t,
        u_t=u_t,
        x0=x0_all,
        sigma_chunk=sigma_chunk,
        loss_mask=loss_mask,
        geo=geo,
        mask=mask,
        scenario_id=scenario_index(clip.caption_tag),
        n_ref=len(ref_ids),
    )


def forward_plan(
    model: Model,
    clip: SyntheticClip,
    plan: TrainingPlan,
    rng: np.random.Generator,
    capture: list | None = None,
) -> tuple[Tensor, AssembledSample]:
    """Noise per plan, run the chunk-causal pass, return per-chunk predictions."""
    sample = assemble_sample(clip, plan, rng, model.cfg.np_dtype)
    c_tot, fpc, tokens, dim = sample.x_t.shape
    flat = sample.x_t.reshape(c_tot * fpc * tokens, dim)
    sigma_tok = np.repeat(sample.sigma_chunk, fpc * tokens)
    pred = forward_tokens(
        model, flat, sample.geo, sample.mask, sigma_tok, sample.scenario_id, capture
    )
    return nm.reshape(pred, (c_tot, fpc, tokens, dim)), sample


# ---------------------------------------------------------------------------
# optimization


def _sample_losses(
    model: Model, clip: SyntheticClip, plan: TrainingPlan, rng: np.random.Generator
) -> tuple[Tensor, Tensor, AssembledSample]:
    pred, sample = forward_plan(model, clip, plan, rng)
    flow = flow_loss(pred, sample.u_t, sample.loss_mask)
    sig = sample.sigma_chunk.reshape(-1, 1, 1, 1).astype(pred.dtype)
    x0_hat = nm.add(Tensor(sample.x_t), nm.mul(pred, Tensor(-sig)))
    delta = delta_loss(x0_hat, sample.x0, sample.loss_mask)
    return flow, delta, sample


def train_step(
    state: TrainState, batch: list[tuple[SyntheticClip, TrainingPlan]]
) -> LossBundle:
    """One AdamW step on the summed flow + weighted delta objective."""
    if not batch:
        raise TrainerError("empty batch")
    x0_batch = np.stack([clip.latents for clip, _ in batch])
    lam = adaptive_weight(
        sigma_batch(x0_batch),
        state.iteration,
        state.curriculum.alpha,
        state.curriculum.gamma,
        state.curriculum.warmup,
    )
    params = state.model.named_parameters()
    flows, deltas = [], []

    def dump() -> dict:
        return {
            "iteration": state.iteration,
            "flows": flows,
            "deltas": deltas,
            "lambda": lam,
            "param_norms": {
                k: float(np.linalg.norm(t.data)) for k, t in params.items()
            },
        }

    with Tape() as tape:
        total = None
        try:
            for clip, plan in batch:
                flow, delta, _ = _sample_losses(state.model, clip, plan, state.rng)
                flows.append(float(flow.data))
                deltas.append(float(delta.data))
                piece = flow if lam == 0.0 else nm.add(flow, delta * lam)
                total = piece if total is None else nm.add(total, piece)
        except nm.NumericsError as exc:
            raise TrainerError(f"non-finite forward pass: {exc}", dump=dump()) from exc
        total = total * (1.0 / len(batch))
        if not np.isfinite(total.data):
            raise TrainerError("non-finite training loss", dump=dump())
        grads = grad(total, list(params.values()), tape)

    t = state.iteration + 1
    o = state.opt
    bc1 = 1.0 - o.beta1**t
    bc2 = 1.0 - o.beta2**t
    for (name, p), g in zip(params.items(), grads):
        m = state.m[name] = o.beta1 * state.m[name] + (1.0 - o.beta1) * g
        v = state.v[name] = o.beta2 * state.v[name] + (1.0 - o.beta2) * g * g
        step = (m / bc1) / (np.sqrt(v / bc2) + o.eps) + o.weight_decay * p.data
        p.data = p.data - o.lr * step
    state.iteration += 1
    bundle = LossBundle(
        flow=float(np.mean(flows)), delta=float(np.mean(deltas)), lam=lam
    )
    bundle.validate()
    return bundle


def train_run(
    state: TrainState,
    clips: list[SyntheticClip],
    iterations: int,
    regimes: tuple[str, ...],
    batch_size: int = 1,
    on_metrics=None,
) -> None:
    """Uniform clip/regime sampling loop; plans are drawn per batch element."""
    if not clips:
        raise TrainerError("no training clips")
    for _ in range(iterations):
        batch = []
        for _ in range(batch_size):
            clip = clips[int(state.rng.integers(0, len(clips)))]
            if clip.graph is None:
                raise TrainerError("training clips need frame graphs")
            options = applicable_regimes(clip.graph, regimes)
            if not options:
                raise TrainerError(f"no applicable regime for clip (from {regimes})")
            regime = options[int(state.rng.integers(0, len(options)))]
            batch.append(
                (clip, make_plan(clip.graph, regime, state.rng, state.curriculum))
            )
        bundle = train_step(state, batch)
        if on_metrics is not None:
            on_metrics(state.iteration, bundle, batch[0][1].regime)


# ---------------------------------------------------------------------------
# streaming rollout


@dataclass
class RolloutResult:
    latents: np.ndarray  # (n_seed + n_new, fpc, tokens, dim)
    cache: KvCache
    first_target_position: int


def _chunk_geo(clip: SyntheticClip, chunk: int, positions: np.ndarray) -> TokenGeometry:
    cfg = clip.config
    fpc = cfg.frames_per_chunk
    return token_geometry(
        positions,
        clip.poses[chunk * fpc : (chunk + 1) * fpc],
        cfg.grid_rows,
        cfg.grid_cols,
    )


def rollout(
    model: Model,
    clip: SyntheticClip,
    n_seed: int,
    n_new: int,
    rng: np.random.Generator,
    refcache: tuple[tuple[int, ...], int] | None = None,
    steps: int | None = None,
) -> RolloutResult:
    """Autoregressive chunk generation through the streaming KV cache.

    Seed chunks are conditioned clean; each new chunk is denoised with a
    deterministic fixed-step Euler pass on the flow field from sigma=1 to 0,
    then written into the cache at its original (possibly gapped) position.
    """
    cfg = clip.config
    fpc = cfg.frames_per_chunk
    grid = (cfg.grid_rows, cfg.grid_cols)
    steps = steps or model.cfg.rollout_steps
    scen = scenario_index(clip.caption_tag)
    dtype = model.cfg.np_dtype
    cache = KvCache(layers=model.cfg.layers)

    if refcache is not None:
        ref_ids, gap = refcache
        entries = []
        staging = KvCache(layers=model.cfg.layers)
        for j, rc in enumerate(ref_ids):
            positions = np.arange(j * fpc, (j + 1) * fpc)
            geo = _chunk_geo(clip, rc, positions)
            x_ref = clip.clean_latents[rc].reshape(-1, cfg.latent_dim).astype(dtype)
            _, pending = forward_chunk(model, x_ref, geo, 0.0, scen, staging, j, grid)
            entry = pending.to_cache_entry(
                j, positions, clip.poses[rc * fpc : (rc + 1) * fpc]
            )
            write_chunk(staging, entry)
            entries.append(entry)
        prepend_reference(cache, entries, gap, fpc)

    offset = cache.frame_offset
    out_chunks = []
    for c in range(n_seed):
        positions = offset + np.arange(c * fpc, (c + 1) * fpc)
        geo = _chunk_geo(clip, c, positions)
        x_seed = clip.latents[c].reshape(-1, cfg.latent_dim).astype(dtype)
        _, pending = forward_chunk(model, x_seed, geo, 0.0, scen, cache, c, grid)
        write_chunk(
            cache,
            pending.to_cache_entry(c, positions, clip.poses[c * fpc : (c + 1) * fpc]),
        )
        out_chunks.append(clip.latents[c].astype(dtype))

    for c in range(n_seed, n_seed + n_new):
        positions = offset + np.arange(c * fpc, (c + 1) * fpc)
        geo = _chunk_geo(clip, c, positions)
        x = rng.standard_normal((fpc * cfg.tokens, cfg.latent_dim)).astype(dtype)
        for k in range(steps):
            sigma_k = 1.0 - k / steps
            pred, _ = forward_chunk(model, x, geo, sigma_k, scen, cache, c, grid)
            x = x - pred.data / steps
        final_pred, pending = forward_chunk(model, x, geo, 0.0, scen, cache, c, grid)
        del final_pred
        write_chunk(
            cache,
            pending.to_cache_entry(c, positions, clip.poses[c * fpc : (c + 1) * fpc]),
        )
        out_chunks.append(x.reshape(fpc, cfg.tokens, cfg.latent_dim))

    latents = (
        np.stack(out_chunks)
        if out_chunks
        else np.zeros((0, fpc, cfg.tokens, cfg.latent_dim), dtype=dtype)
    )
    return RolloutResult(latents=latents, cache=cache, first_target_position=offset)


# ---------------------------------------------------------------------------
# checkpoints


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def _rng_state_from_json(d: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": d["bit_generator"],
        "state": {"state": int(d["state"]), "inc": int(d["inc"])},
        "has_uint32": int(d["has_uint32"]),
        "uinteger": int(d["uinteger"]),
    }
    return rng


def save_checkpoint(state: TrainState, path, provenance: dict | None = None) -> None:
    params = state.model.named_parameters()
    header = {
        "model": asdict(state.model.cfg),
        "optimizer": asdict(state.opt),
        "curriculum": asdict(state.curriculum),
        "iteration": state.iteration,
        "rng": _rng_state_to_json(state.rng),
        "params": [{"name": k, "shape": list(t.data.shape)} for k, t in params.items()],
        "provenance": provenance or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, tensor in params.items():
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(state.m[name], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(state.v[name], dtype="<f8").tobytes())


def load_checkpoint(path, expect_model: ModelConfig | None = None) -> TrainState:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise TrainerError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise TrainerError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        model_cfg = ModelConfig(**header["model"])
        if expect_model is not None and model_cfg != expect_model:
            raise TrainerError("checkpoint model config does not match")
        model = init_model(model_cfg, np.random.default_rng(0))
        params = model.named_parameters()
        manifest = header["params"]
        if [m["name"] for m in manifest] != list(params.keys()):
            raise TrainerError("checkpoint parameter manifest does not match model")
        state = TrainState(
            model=model,
            opt=OptimizerConfig(**header["optimizer"]),
            curriculum=CurriculumConfig(**header["curriculum"]),
            m={},
            v={},
            iteration=int(header["iteration"]),
            rng=_rng_state_from_json(header["rng"]),
        )
        dt = model_cfg.np_dtype
        for meta, (name, tensor) in zip(manifest, params.items()):
            shape = tuple(meta["shape"])
            if shape != tensor.data.shape:
                raise TrainerError(f"parameter {name} shape mismatch")
            count = int(np.prod(shape)) if shape else 1
            for target in ("param", "m", "v"):
                raw = fh.read(count * 8)
                if len(raw) != count * 8:
                    raise TrainerError("checkpoint payload truncated")
                arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
                if target == "param":
                    tensor.data = arr.astype(dt)
                elif target == "m":
                    state.m[name] = arr.astype(dt)
                else:
                    state.v[name] = arr.astype(dt)
        return state
