"""Command-line pipeline: gen-data, train, rollout, diagnose, ablate.

Every command is deterministic under a fixed config seed and stamps its
artifacts with {config_hash, seed, version}. Config values come from defaults,
then an optional ``key = value`` file, then repeated ``--set key=value`` flags.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .dataset import read_dataset, write_dataset, write_envelope
from .diagnostics import (
    ScoringScenario,
    anchor_retrieval_score,
    export_heatmap,
    identifiability_sim,
    kv_importance,
)
from .evaluate import anchor_score_eval, generate_clips, recovery_eval
from .framegraph import decode_state
from .trainer import (
    TrainerError,
    init_train_state,
    load_checkpoint,
    rollout,
    save_checkpoint,
    train_run,
)

MODE_IDS = {"i2v": 1, "v2v": 2, "refcache": 3}
ABLATION_MODES = ("full", "qk_only", "vo_only", "dual")


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def cmd_gen_data(cfg: RunConfig, out_path: str) -> None:
    clips = generate_clips(cfg, int(cfg["data.clips"]), stream=0)
    write_dataset(out_path, clips, cfg.provenance())
    print(f"wrote {len(clips)} clips to {out_path}")


def _train_once(cfg: RunConfig, data_path: str, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    clips, _ = read_dataset(data_path)
    state = init_train_state(
        cfg.model_config(),
        cfg.optimizer_config(),
        cfg.curriculum_config(),
        seed=int(cfg["seed"]),
    )
    iters = int(cfg["optimizer.iters"])
    every = int(cfg["optimizer.checkpoint_every"])
    metrics_path = out_dir / "metrics.jsonl"
    last = {"flow": None, "delta": None, "lambda": None, "total": None}
    with open(metrics_path, "w") as log:

        def on_metrics(iteration, bundle, regime):
            rec = {
                "iter": iteration,
                "flow": bundle.flow,
                "delta": bundle.delta,
                "lambda": bundle.lam,
                "total": bundle.total,
                "regime": regime,
            }
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            last.update(
                flow=bundle.flow, delta=bundle.delta, total=bundle.total
            )
            last["lambda"] = bundle.lam
            if every > 0 and iteration % every == 0:
                save_checkpoint(
                    state, out_dir / f"checkpoint_{iteration:06d}.rmck", cfg.provenance()
                )

        try:
            train_run(
                state,
                clips,
                iters,
                cfg.regimes(),
                batch_size=int(cfg["optimizer.batch_size"]),
                on_metrics=on_metrics,
            )
        except TrainerError as err:
            _write_json(out_dir / "failure_dump.json", err.dump)
            raise
    save_checkpoint(state, out_dir / "checkpoint.rmck", cfg.provenance())
    summary = {
        "iterations": state.iteration,
        "final": last,
        "provenance": cfg.provenance(),
    }
    _write_json(out_dir / "summary.json", summary)
    return summary


def cmd_train(cfg: RunConfig, data_path: str, out_dir: str) -> None:
    summary = _train_once(cfg, data_path, Path(out_dir))
    print(f"trained {summary['iterations']} iterations -> {out_dir}")


def _load_model(cfg: RunConfig, checkpoint: str):
    state = load_checkpoint(checkpoint, expect_model=cfg.model_config())
    return state.model


def cmd_rollout(
    cfg: RunConfig,
    checkpoint: str,
    data_path: str,
    mode: str,
    clip_id: int,
    generate: int | None,
    gap: int,
    out_dir: str,
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(cfg, checkpoint)
    clips, _ = read_dataset(data_path)
    if not 0 <= clip_id < len(clips):
        raise ConfigError(f"clip {clip_id} out of range (dataset has {len(clips)})")
    clip = clips[clip_id]
    n = clip.n_chunks
    fpc = clip.config.frames_per_chunk
    refcache = None
    if mode == "i2v":
        n_seed = 1
        n_new = n - 1 if generate is None else generate
    elif mode == "v2v":
        recovery = clip.graph.role_chunks("recovery") if clip.graph else []
        n_seed = min(recovery) if recovery else n // 2
        if n_seed < 1:
            raise ConfigError("v2v mode needs a nonempty prefix")
        n_new = n - n_seed if generate is None else generate
    elif mode == "refcache":
        n_seed = 0
        n_new = n if generate is None else generate
        n_ref = int(cfg["curriculum.ref_chunks"])
        refcache = (tuple(range(n_ref)), gap)
    else:
        raise ConfigError(f"unknown rollout mode {mode!r}")

    rng = np.random.default_rng(
        np.random.SeedSequence([int(cfg["seed"]), MODE_IDS[mode], clip_id])
    )
    result = rollout(model, clip, n_seed, n_new, rng, refcache=refcache)
    decoded = [
        [
            decode_state(result.latents[c, f], clip.caption_tag, clip.config)
            for f in range(fpc)
        ]
        for c in range(result.latents.shape[0])
    ]
    truth = [
        [float(clip.state[c * fpc + f]) for f in range(fpc)]
        for c in range(result.latents.shape[0])
    ]
    report = {
        "mode": mode,
        "clip": clip_id,
        "scenario": clip.caption_tag,
        "n_seed": n_seed,
        "n_generated": n_new,
        "first_target_position": result.first_target_position,
        "decoded_states": decoded,
        "true_states": truth,
        "provenance": cfg.provenance(),
    }
    if clip.graph is not None and clip.graph.role_chunks("recovery"):
        recovery = min(clip.graph.role_chunks("recovery"))
        anchor = max(clip.graph.role_chunks("anchor"))
        if recovery < result.latents.shape[0]:
            anchor_state = float(clip.state[(anchor + 1) * fpc - 1])
            rec_err = float(
                np.mean(
                    np.abs(np.array(decoded[recovery]) - np.array(truth[recovery]))
                )
            )
            base_err = float(
                np.mean(np.abs(anchor_state - np.array(truth[recovery])))
            )
            report["recovery"] = {
                "chunk": recovery,
                "model_mae": rec_err,
                "baseline_mae": base_err,
            }
    payload = np.ascontiguousarray(result.latents, dtype="<f4").tobytes()
    write_envelope(
        out / "generated.rmds",
        {
            "kind": "rollout",
            "provenance": cfg.provenance(),
            "latent_shape": list(result.latents.shape),
            "mode": mode,
            "clip": clip_id,
        },
        payload,
    )
    _write_json(out / "report.json", report)
    print(f"rollout {mode} clip {clip_id}: wrote {out/'report.json'}")


def cmd_diagnose(
    cfg: RunConfig,
    checkpoint: str,
    data_path: str,
    clip_id: int,
    out_dir: str,
    identifiability: bool,
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(cfg, checkpoint)
    clips, _ = read_dataset(data_path)
    if not 0 <= clip_id < len(clips):
        raise ConfigError(f"clip {clip_id} out of range (dataset has {len(clips)})")
    clip = clips[clip_id]
    mat = kv_importance(
        model,
        clip,
        sigma_diag=float(cfg["diagnostics.sigma"]),
        rng=np.random.default_rng(np.random.SeedSequence([17, clip.seed])),
        layer_range=cfg.diagnostics_layer_range(model.cfg.layers),
    )
    csv_path, pgm_path = export_heatmap(mat, out / "importance")
    scores: dict = {"provenance": cfg.provenance(), "clip": clip_id}
    if clip.graph is not None and clip.graph.role_chunks("recovery"):
        scores["anchor_retrieval_score"] = anchor_retrieval_score(mat, clip.graph)
    _write_json(out / "scores.json", scores)
    if identifiability:
        report = identifiability_sim(ScoringScenario(), trials=25)
        report["provenance"] = cfg.provenance()
        _write_json(out / "identifiability.json", report)
    print(f"diagnostics written to {out} ({csv_path}, {pgm_path})")


def _ablate_one(args: tuple) -> dict:
    values, data_path, out_root, mode = args
    cfg = RunConfig(dict(values, **{"model.mode": mode}))
    out_dir = Path(out_root) / mode
    summary = _train_once(cfg, data_path, out_dir)
    state = load_checkpoint(out_dir / "checkpoint.rmck", expect_model=cfg.model_config())
    heldout = generate_clips(cfg, int(cfg["data.heldout"]), stream=1)
    rec = recovery_eval(state.model, heldout, eval_seed=int(cfg["seed"]))
    score = anchor_score_eval(
        state.model,
        heldout,
        sigma_diag=float(cfg["diagnostics.sigma"]),
        layer_range=cfg.diagnostics_layer_range(state.model.cfg.layers),
    )
    return {
        "mode": mode,
        "recovery_mae": rec["model_mae"],
        "baseline_mae": rec["baseline_mae"],
        "improvement": rec["improvement"],
        "anchor_score": score,
        "final_flow": summary["final"]["flow"],
    }


def cmd_ablate(
    cfg: RunConfig, data_path: str, out_dir: str, modes: list[str], parallel: bool
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(dict(cfg.values), data_path, str(out), mode) for mode in modes]
    if parallel:
        with concurrent.futures.ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            rows = list(pool.map(_ablate_one, jobs))
    else:
        rows = [_ablate_one(job) for job in jobs]
    lines = ["mode,recovery_mae,baseline_mae,improvement,anchor_score,final_flow"]
    for r in rows:
        lines.append(
            f"{r['mode']},{r['recovery_mae']:.6f},{r['baseline_mae']:.6f},"
            f"{r['improvement']:.6f},{r['anchor_score']:.6f},{r['final_flow']:.6f}"
        )
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "ablation.json", {"rows": rows, "provenance": cfg.provenance()})
    print((out / "ablation.csv").read_text())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynmem",
        description="Dynamic-memory toy video diffusion: data, training, rollout, diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )

    g = sub.add_parser("gen-data", help="generate a synthetic clip dataset")
    common(g)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train on a dataset container")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir", required=True)

    r = sub.add_parser("rollout", help="streaming generation from a checkpoint")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--mode", choices=sorted(MODE_IDS), required=True)
    r.add_argument("--clip", type=int, default=0)
    r.add_argument("--generate", type=int, default=None, help="chunks to generate")
    r.add_argument("--gap", type=int, default=4, help="reference gap G (refcache)")
    r.add_argument("--out-dir", required=True)

    d = sub.add_parser("diagnose", help="KV-importance maps and scores")
    common(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--clip", type=int, default=0)
    d.add_argument("--out-dir", required=True)
    d.add_argument("--identifiability", action="store_true")

    a = sub.add_parser("ablate", help="train and score attention-mode variants")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--modes", default=",".join(ABLATION_MODES))
    a.add_argument("--parallel", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.data, args.out_dir)
        elif args.command == "rollout":
            cmd_rollout(
                cfg,
                args.checkpoint,
                args.data,
                args.mode,
                args.clip,
                args.generate,
                args.gap,
                args.out_dir,
            )
        elif args.command == "diagnose":
            cmd_diagnose(
                cfg,
                args.checkpoint,
                args.data,
                args.clip,
                args.out_dir,
                args.identifiability,
            )
        elif args.command == "ablate":
            modes = [m.strip() for m in args.modes.split(",") if m.strip()]
            cmd_ablate(cfg, args.data, args.out_dir, modes, args.parallel)
    except (ConfigError, TrainerError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
