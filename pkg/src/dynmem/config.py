"""Run configuration: dotted-key text files with typed defaults.

Format is one ``section.key = value`` per line; ``#`` starts a comment.
Every key has a default below, unknown keys are rejected by name, and the
canonical sorted rendering is hashed into artifact provenance.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from . import VERSION_STRING
from .curriculum import CurriculumConfig, REGIMES
from .framegraph import INTERRUPTIONS, SCENARIOS, WorldConfig
from .model import ModelConfig
from .trainer import OptimizerConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "seed": 0,
    # model
    "model.layers": 2,
    "model.heads": 2,
    "model.head_dim": 16,
    "model.token_dim": 16,
    "model.mlp_ratio": 4,
    "model.mode": "full",
    "model.delta_all_bands": False,
    "model.temporal_bands": 4,
    "model.row_bands": 2,
    "model.col_bands": 2,
    "model.rope_base": 10000.0,
    "model.sigma_features": 8,
    "model.rollout_steps": 10,
    "model.dtype": "float64",
    # data
    "data.clips": 64,
    "data.heldout": 16,
    "data.chunks": 7,
    "data.frames_per_chunk": 3,
    "data.grid_rows": 8,
    "data.grid_cols": 8,
    "data.latent_dim": 16,
    "data.world_cols": 24,
    "data.rate_min": 0.01,
    "data.rate_max": 0.04,
    "data.scenario_mix": "filling_bar:1.0",
    "data.interruption": "occluder",
    "data.interruption_prob": 1.0,
    "data.window_start_chunk": 2,
    "data.window_end_chunk": 4,
    # curriculum
    "curriculum.regimes": "node_drop,reference_cache,v2v_frontier",
    "curriculum.alpha": 0.2,
    "curriculum.gamma": 5.0,
    "curriculum.warmup": 200,
    "curriculum.sigma_min": 0.02,
    "curriculum.sigma_max": 0.98,
    "curriculum.noisy_sigma_min": 0.8,
    "curriculum.noisy_sigma_max": 1.0,
    "curriculum.gap_min": 2,
    "curriculum.gap_max": 8,
    "curriculum.ref_chunks": 1,
    # optimizer
    "optimizer.lr": 2e-3,
    "optimizer.beta1": 0.9,
    "optimizer.beta2": 0.99,
    "optimizer.weight_decay": 1e-4,
    "optimizer.iters": 2000,
    "optimizer.batch_size": 1,
    "optimizer.checkpoint_every": 0,
    # diagnostics
    "diagnostics.sigma": 0.5,
    "diagnostics.layer_min": -1,
    "diagnostics.layer_max": -1,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r}: expected an integer, got {raw!r}")
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r}: expected a number, got {raw!r}")
    return raw


@dataclass
class RunConfig:
    values: dict[str, object]

    def __getitem__(self, key: str):
        return self.values[key]

    def canonical_text(self) -> str:
        lines = [f"{k} = {self.values[k]}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def provenance(self) -> dict:
        return {
            "config_hash": self.config_hash(),
            "seed": self.values["seed"],
            "version": VERSION_STRING,
        }

    # ------------------------------------------------------------------
    # typed views

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            layers=self["model.layers"],
            heads=self["model.heads"],
            head_dim=self["model.head_dim"],
            token_dim=self["model.token_dim"],
            mlp_ratio=self["model.mlp_ratio"],
            latent_dim=self["data.latent_dim"],
            mode=self["model.mode"],
            delta_all_bands=self["model.delta_all_bands"],
            temporal_bands=self["model.temporal_bands"],
            row_bands=self["model.row_bands"],
            col_bands=self["model.col_bands"],
            rope_base=self["model.rope_base"],
            sigma_features=self["model.sigma_features"],
            rollout_steps=self["model.rollout_steps"],
            dtype=self["model.dtype"],
        )

    def world_config(self) -> WorldConfig:
        return WorldConfig(
            grid_rows=self["data.grid_rows"],
            grid_cols=self["data.grid_cols"],
            latent_dim=self["data.latent_dim"],
            chunks=self["data.chunks"],
            frames_per_chunk=self["data.frames_per_chunk"],
            world_cols=self["data.world_cols"],
            rate_min=self["data.rate_min"],
            rate_max=self["data.rate_max"],
        )

    def curriculum_config(self) -> CurriculumConfig:
        return CurriculumConfig(
            sigma_min=self["curriculum.sigma_min"],
            sigma_max=self["curriculum.sigma_max"],
            noisy_sigma_min=self["curriculum.noisy_sigma_min"],
            noisy_sigma_max=self["curriculum.noisy_sigma_max"],
            gap_min=self["curriculum.gap_min"],
            gap_max=self["curriculum.gap_max"],
            ref_chunks=self["curriculum.ref_chunks"],
            alpha=self["curriculum.alpha"],
            gamma=self["curriculum.gamma"],
            warmup=self["curriculum.warmup"],
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            lr=self["optimizer.lr"],
            beta1=self["optimizer.beta1"],
            beta2=self["optimizer.beta2"],
            weight_decay=self["optimizer.weight_decay"],
        )

    def regimes(self) -> tuple[str, ...]:
        names = tuple(
            r.strip() for r in str(self["curriculum.regimes"]).split(",") if r.strip()
        )
        for r in names:
            if r not in REGIMES:
                raise ConfigError(f"unknown training regime {r!r}")
        if not names:
            raise ConfigError("curriculum.regimes must list at least one regime")
        return names

    def scenario_mix(self) -> list[tuple[str, float]]:
        out = []
        for piece in str(self["data.scenario_mix"]).split(","):
            piece = piece.strip()
            if not piece:
                continue
            name, _, weight = piece.partition(":")
            name = name.strip()
            if name not in SCENARIOS:
                raise ConfigError(f"unknown scenario {name!r}")
            out.append((name, float(weight) if weight else 1.0))
        total = sum(w for _, w in out)
        if total <= 0:
            raise ConfigError("scenario mix weights must sum to a positive value")
        return [(n, w / total) for n, w in out]

    def interruption_kind(self) -> str | None:
        kind = str(self["data.interruption"])
        if kind == "none":
            return None
        if kind not in INTERRUPTIONS:
            raise ConfigError(f"unknown interruption kind {kind!r}")
        return kind

    def diagnostics_layer_range(self, n_layers: int) -> tuple[int, int]:
        lo = self["diagnostics.layer_min"]
        hi = self["diagnostics.layer_max"]
        lo = 0 if lo < 0 else lo
        hi = n_layers - 1 if hi < 0 else hi
        return (lo, hi)


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the optional file, then ``key=value`` overrides."""
    values = dict(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, _, raw = line.partition("=")
                key = key.strip()
                if key not in DEFAULTS:
                    raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
                values[key] = _coerce(key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return RunConfig(values)
