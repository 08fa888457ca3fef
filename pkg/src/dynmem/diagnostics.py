"""Attention diagnostics: KV-importance maps, anchor scores, identifiability.

The importance matrix aggregates captured attention probabilities to
query-chunk x history-chunk mass (mean over query tokens and heads per layer,
then elementwise max over the selected layers). Rows of each per-layer matrix
sum to one over the causally available columns; the layer-max matrix itself is
not renormalized.

The identifiability simulation contrasts a decoupled spatial+temporal+content
score against a joint clean-anchor selector on the same-address occlusion
setup: a clean anchor and a corrupted entry share a spatial address, the
content term is uninformative, and only the joint selector's pre-degradation
indicator can tell them apart.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .framegraph import FrameGraph, SyntheticClip
from .model import Model, forward_tokens, scenario_index
from .attention import chunk_causal_mask, token_geometry

CSV_NA = "NA"


class DiagnosticsError(ValueError):
    pass


@dataclass
class ImportanceMatrix:
    values: np.ndarray  # (chunks, chunks), NaN where unavailable
    available: np.ndarray  # bool mask, lower triangle incl. diagonal
    per_layer: list[np.ndarray] = field(default_factory=list)

    @property
    def n_chunks(self) -> int:
        return self.values.shape[0]


def _chunk_mass(probs: np.ndarray, chunk_of: np.ndarray, n_chunks: int) -> np.ndarray:
    """(heads, T, T) probabilities -> (chunks, chunks) attention mass."""
    mean_heads = probs.mean(axis=0)
    # Sum key tokens into chunks, then average query tokens per chunk.
    key_sum = np.zeros((mean_heads.shape[0], n_chunks))
    for j in range(n_chunks):
        key_sum[:, j] = mean_heads[:, chunk_of == j].sum(axis=1)
    out = np.zeros((n_chunks, n_chunks))
    for i in range(n_chunks):
        out[i] = key_sum[chunk_of == i].mean(axis=0)
    return out


def kv_importance(
    model: Model,
    clip: SyntheticClip,
    sigma_diag: float = 0.5,
    rng: np.random.Generator | None = None,
    layer_range: tuple[int, int] | None = None,
) -> ImportanceMatrix:
    """Chunk-level attention mass under a deployment-like diagnostic pass.

    Chunks at or after the clip's recovery point are noised to ``sigma_diag``
    (the generation condition); everything earlier is conditioned clean. The
    per-layer matrices are max-aggregated over ``layer_range`` (default: all).
    """
    if not model.blocks:
        raise DiagnosticsError("attention capture needs at least one layer")
    cfg = clip.config
    rng = rng or np.random.default_rng(0)
    n = clip.n_chunks
    fpc = cfg.frames_per_chunk
    sigmas = np.zeros(n)
    x_t = clip.latents.astype(model.cfg.np_dtype).copy()
    recovery = clip.graph.role_chunks("recovery") if clip.graph else []
    if recovery:
        start = min(recovery)
        sigmas[start:] = sigma_diag
        for c in range(start, n):
            eps = rng.standard_normal(x_t[c].shape).astype(x_t.dtype)
            x_t[c] = (1.0 - sigma_diag) * x_t[c] + sigma_diag * eps
    geo = token_geometry(
        np.arange(n * fpc), clip.poses, cfg.grid_rows, cfg.grid_cols
    )
    mask = chunk_causal_mask(n, fpc * cfg.tokens)
    capture: list[np.ndarray] = []
    forward_tokens(
        model,
        x_t.reshape(-1, cfg.latent_dim),
        geo,
        mask,
        np.repeat(sigmas, fpc * cfg.tokens),
        scenario_index(clip.caption_tag),
        capture=capture,
    )
    chunk_of = np.repeat(np.arange(n), fpc * cfg.tokens)
    per_layer = [_chunk_mass(p, chunk_of, n) for p in capture]
    lo, hi = layer_range if layer_range is not None else (0, len(per_layer) - 1)
    selected = per_layer[lo : hi + 1]
    if not selected:
        raise DiagnosticsError(f"layer range {layer_range} selects no layers")
    values = np.maximum.reduce(selected)
    available = np.tril(np.ones((n, n), dtype=bool))
    values = np.where(available, values, np.nan)
    return ImportanceMatrix(values=values, available=available, per_layer=per_layer)


def anchor_retrieval_score(mat: ImportanceMatrix, graph: FrameGraph) -> float:
    """Mean over recovery rows of (anchor mass - interruption mass)."""
    recovery = graph.role_chunks("recovery")
    if not recovery:
        raise DiagnosticsError("graph has no recovery nodes")
    anchors = graph.role_chunks("anchor")
    interruptions = graph.role_chunks("interruption")
    scores = []
    for r in recovery:
        row = mat.values[r]
        anchor_mass = sum(row[a] for a in anchors if mat.available[r, a])
        interruption_mass = sum(row[c] for c in interruptions if mat.available[r, c])
        scores.append(anchor_mass - interruption_mass)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# identifiability simulation


@dataclass(frozen=True)
class ScoringScenario:
    """Same-address occlusion setup: clean anchor vs corrupted context."""

    t_anchor: float = 0.0
    t_corrupt: float = 5.0
    t_query: float = 8.0
    tau_deg: float = 2.0  # degradation start; t_anchor < tau_deg <= t_corrupt
    beta: float = 1.0
    content_informative: bool = False

    def validate(self) -> None:
        if not (self.t_anchor <= self.t_corrupt < self.t_query):
            raise DiagnosticsError(
                "need t_anchor <= t_corrupt < t_query, got "
                f"({self.t_anchor}, {self.t_corrupt}, {self.t_query})"
            )
        if self.beta <= 0:
            raise DiagnosticsError("temporal decay beta must be positive")

    def to_dict(self) -> dict:
        return {
            "t_anchor": self.t_anchor,
            "t_corrupt": self.t_corrupt,
            "t_query": self.t_query,
            "tau_deg": self.tau_deg,
            "beta": self.beta,
            "content_informative": self.content_informative,
        }


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _compatibility(a: np.ndarray, b: np.ndarray) -> float:
    """Positive-shifted cosine used as the joint selector's content term."""
    return 0.5 * (1.0 + _cosine(a, b))


def _draw_contents(
    scenario: ScoringScenario, rng: np.random.Generator, dim: int = 8
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Query/anchor/corrupt content vectors for one trial.

    Uninformative case: both candidates exactly orthogonal to the query, so
    every content score ties. Informative case: the anchor content aligns with
    the query while the corrupted content stays orthogonal.
    """
    q = rng.normal(size=dim)
    q /= np.linalg.norm(q)
    def ortho():
        v = rng.normal(size=dim)
        v -= (v @ q) * q
        return v / np.linalg.norm(v)
    if scenario.content_informative:
        a = q.copy()
    else:
        a = ortho()
    c = ortho()
    return q, a, c


def _select(score_a: float, score_c: float, t_a: float, t_c: float) -> tuple[str, bool]:
    """Argmax plus tie flag; ties break toward the smaller time index."""
    if math.isclose(score_a, score_c, rel_tol=0.0, abs_tol=1e-12):
        return ("anchor" if t_a <= t_c else "corrupt"), True
    return ("anchor" if score_a > score_c else "corrupt"), False


def identifiability_sim(
    scenario: ScoringScenario, trials: int = 1, seed: int = 0
) -> dict:
    """Compare decoupled scorers against the joint clean-anchor selector.

    The decoupled score is phi_sp + phi_tmp + phi_cnt with a spatial tie and
    two temporal variants (recency decay over time, decay over cache rank).
    The joint selector multiplies the same-address indicator, the
    pre-degradation indicator 1{t < tau_deg}, and the content compatibility.
    """
    scenario.validate()
    rng = np.random.default_rng(seed)
    counts = {
        "decoupled_recency": {"anchor": 0, "corrupt": 0},
        "decoupled_cache_order": {"anchor": 0, "corrupt": 0},
        "joint": {"anchor": 0, "corrupt": 0},
    }
    ties = {"decoupled_recency": 0, "decoupled_cache_order": 0, "joint": 0}
    last_scores = {}
    for _ in range(max(1, trials)):
        q, a, c = _draw_contents(scenario, rng)
        phi_sp = 0.0  # same spatial address: identical for both candidates
        cnt_a = _cosine(q, a)
        cnt_c = _cosine(q, c)
        # Recency-favoring temporal score over absolute time.
        tmp_rec_a = -scenario.beta * (scenario.t_query - scenario.t_anchor)
        tmp_rec_c = -scenario.beta * (scenario.t_query - scenario.t_corrupt)
        rec_a = phi_sp + tmp_rec_a + cnt_a
        rec_c = phi_sp + tmp_rec_c + cnt_c
        # Cache-order variant: positions are compacted ranks, not times.
        rank = {"anchor": 0.0, "corrupt": 1.0, "query": 2.0}
        tmp_ord_a = -scenario.beta * (rank["query"] - rank["anchor"])
        tmp_ord_c = -scenario.beta * (rank["query"] - rank["corrupt"])
        ord_a = phi_sp + tmp_ord_a + cnt_a
        ord_c = phi_sp + tmp_ord_c + cnt_c
        # Joint selector: same-address and pre-degradation indicators times
        # the compatibility term.
        joint_a = 1.0 * float(scenario.t_anchor < scenario.tau_deg) * _compatibility(q, a)
        joint_c = 1.0 * float(scenario.t_corrupt < scenario.tau_deg) * _compatibility(q, c)
        for key, (sa, sc) in (
            ("decoupled_recency", (rec_a, rec_c)),
            ("decoupled_cache_order", (ord_a, ord_c)),
            ("joint", (joint_a, joint_c)),
        ):
            choice, tied = _select(sa, sc, scenario.t_anchor, scenario.t_corrupt)
            counts[key][choice] += 1
            ties[key] += int(tied)
        last_scores = {
            "decoupled_recency": {"anchor": rec_a, "corrupt": rec_c},
            "decoupled_cache_order": {"anchor": ord_a, "corrupt": ord_c},
            "joint": {"anchor": joint_a, "corrupt": joint_c},
        }

    def majority(key):
        return "anchor" if counts[key]["anchor"] >= counts[key]["corrupt"] else "corrupt"

    return {
        "scenario": scenario.to_dict(),
        "trials": max(1, trials),
        "counts": counts,
        "ties": ties,
        "decoupled_recency_choice": majority("decoupled_recency"),
        "decoupled_cache_order_choice": majority("decoupled_cache_order"),
        "joint_choice": majority("joint"),
        "scores": last_scores,
        "disagreement": majority("joint") != majority("decoupled_recency"),
    }


# ---------------------------------------------------------------------------
# export


def export_heatmap(mat: ImportanceMatrix, path_prefix) -> tuple[str, str]:
    """Write ``<prefix>.csv`` (headers, 6 decimals, NA cells) and a P5 PGM.

    PGM pixels are round(255 * value) with unavailable cells at 0.
    """
    values = mat.values
    if not np.all(np.isfinite(values[mat.available])):
        raise DiagnosticsError("importance matrix has non-finite available cells")
    n = mat.n_chunks
    csv_path = f"{path_prefix}.csv"
    pgm_path = f"{path_prefix}.pgm"
    lines = ["chunk," + ",".join(f"c{j}" for j in range(n))]
    for i in range(n):
        cells = [
            f"{values[i, j]:.6f}" if mat.available[i, j] else CSV_NA for j in range(n)
        ]
        lines.append(f"c{i}," + ",".join(cells))
    with open(csv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    pixels = np.where(mat.available, np.clip(values, 0.0, 1.0), 0.0)
    gray = np.rint(255 * np.nan_to_num(pixels)).astype(np.uint8)
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{n} {n}\n255\n".encode())
        fh.write(gray.tobytes())
    return csv_path, pgm_path


def read_heatmap_csv(path) -> ImportanceMatrix:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    header = lines[0].split(",")
    n = len(header) - 1
    values = np.full((n, n), np.nan)
    available = np.zeros((n, n), dtype=bool)
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")[1:]
        for j, cell in enumerate(cells):
            if cell != CSV_NA:
                values[i, j] = float(cell)
                available[i, j] = True
    return ImportanceMatrix(values=values, available=available)


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2)
