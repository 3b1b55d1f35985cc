"""Command-line entry point: ``geoid {gen,consense,guide,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiment import EvalReport, evaluate_run, reports_to_json, run_experiment
from .guidance import derive_seed
from .io import load_bundle, save_bundle, write_array
from .pipeline import PipelineResult, build_consensus, run_pipeline
from .scene import PipelineConfig
from .synthetic import corrupt_predictions, default_scene, generate_scene, load_scene_config

DEFAULTS = PipelineConfig()
EXIT_DEGENERATE = 2

log = logging.getLogger("geoid")


def _size(text: str) -> tuple[int, int]:
    h, _, w = text.lower().partition("x")
    return int(h), int(w or h)


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _add_consensus_args(p):
    p.add_argument("--bundle", required=True, type=Path)
    p.add_argument("--tau-c", type=float, default=DEFAULTS.tau_c)
    p.add_argument("--alpha", type=float, default=DEFAULTS.alpha)
    p.add_argument("--n-min", type=int, default=DEFAULTS.n_min)
    p.add_argument("--eps-vis", type=float, default=DEFAULTS.eps_vis)
    p.add_argument("--k-out", type=float, default=DEFAULTS.k_out)
    p.add_argument("--holdout", type=float, default=DEFAULTS.holdout_fraction)
    p.add_argument("--seed", type=int, default=DEFAULTS.seed)
    p.add_argument("--allow-degenerate", action="store_true",
                   help="exit 0 even when no voxel survives the view-count filter")


def _add_guide_args(p):
    p.add_argument("--steps", type=int, default=DEFAULTS.num_steps)
    p.add_argument("--eta", type=float, default=DEFAULTS.eta)
    p.add_argument("--guide-fraction", type=float, default=DEFAULTS.guide_fraction)
    p.add_argument("--huber", type=float, default=DEFAULTS.delta_huber)
    p.add_argument("--optimizer", choices=("plain", "adam"), default=DEFAULTS.optimizer)


def _config(args) -> PipelineConfig:
    kw = dict(
        tau_c=args.tau_c, alpha=args.alpha, n_min=args.n_min, eps_vis=args.eps_vis,
        k_out=args.k_out, holdout_fraction=args.holdout, seed=args.seed,
    )
    if hasattr(args, "steps"):
        kw.update(num_steps=args.steps, eta=args.eta, guide_fraction=args.guide_fraction,
                  delta_huber=args.huber, optimizer=args.optimizer)
    return PipelineConfig(**kw)


def cmd_gen(args) -> int:
    if args.scene:
        scene, corruption = load_scene_config(args.scene)
    else:
        scene, corruption = default_scene(), None
    bundle = generate_scene(scene, args.views, _size(args.size), args.seed, scene_id=args.scene_id)
    bundle = corrupt_predictions(bundle, corruption, derive_seed(args.seed, 0xC0FFEE))
    save_bundle(bundle, args.out)
    log.info("wrote %d views to %s", len(bundle.views), args.out)
    return 0


def _dump_targets(stage, bundle, out: Path) -> None:
    tdir = out / "targets"
    tdir.mkdir(parents=True, exist_ok=True)
    for i, per_mod in enumerate(stage.targets):
        H, W = bundle.views[i].shape
        for mod, t in per_mod.items():
            write_array(tdir / f"view{i:04d}_{mod}.gidb", t.to_image(H, W))


def _stage_summary(stage) -> dict:
    summary = {"degenerate": stage.degenerate, "delta": stage.delta}
    if stage.consensus is not None:
        cons = stage.consensus
        summary.update(
            voxels=len(cons),
            guide_voxels=len(stage.guide),
            holdout_voxels=len(stage.holdout),
            mean_views_per_voxel=float(cons.n_views.mean()),
            mean_observations_per_voxel=cons.grid.num_observations / len(cons),
            targets_per_view={m: [int((~t[m].holdout).sum()) for t in stage.targets] for m in cons.modalities},
        )
    return summary


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_consense(args) -> int:
    bundle = load_bundle(args.bundle)
    stage = build_consensus(bundle, _config(args))
    args.out.mkdir(parents=True, exist_ok=True)
    _dump_targets(stage, bundle, args.out)
    _write_json(args.out / "consensus.json", _stage_summary(stage))
    return _exit_for(stage.degenerate, args)


def cmd_guide(args) -> int:
    bundle = load_bundle(args.bundle)
    config = _config(args)
    result = run_pipeline(bundle, config)
    save_bundle(bundle.with_predictions(result.guided), args.out)
    tdir = args.out / "traces"
    tdir.mkdir(exist_ok=True)
    for i, states in enumerate(result.states):
        for mod, st in states.items():
            st.write_csv(tdir / f"view{i:04d}_{mod}.csv")
    summary = _stage_summary(result.stage)
    summary["config"] = config.to_dict()
    _write_json(args.out / "guidance.json", summary)
    return _exit_for(result.degenerate, args)


def cmd_eval(args) -> int:
    bundle = load_bundle(args.bundle)
    config = _config(args)
    if args.pred is None:
        reports = run_experiment(bundle, _int_list(args.views), args.seeds, config)
        degenerate = any(r.any_degenerate for r in reports)
    else:
        guided = [v.predictions for v in load_bundle(args.pred).views]
        if args.pred_unguided is not None:
            unguided = [v.predictions for v in load_bundle(args.pred_unguided).views]
        else:
            unguided = [dict(v.predictions) for v in bundle.views]
        if len(guided) != len(bundle.views) or len(unguided) != len(bundle.views):
            raise SystemExit("prediction bundles must have as many views as --bundle")
        stage = build_consensus(bundle, config)
        row = evaluate_run(bundle, PipelineResult(guided, unguided, stage))
        row.update(seed=config.seed, run=0, num_views=len(bundle.views))
        reports = [EvalReport.from_runs(len(bundle.views), [config.seed], config, [row])]
        degenerate = stage.degenerate
    args.report.parent.mkdir(parents=True, exist_ok=True)
    args.report.write_text(reports_to_json(reports))
    return _exit_for(degenerate, args)


def _exit_for(degenerate: bool, args) -> int:
    if degenerate and not args.allow_degenerate:
        log.error("empty consensus: no voxel observed from at least n_min views")
        return EXIT_DEGENERATE
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoid", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render and corrupt a synthetic bundle")
    p.add_argument("--scene", type=Path, help="scene config JSON (default: built-in scene)")
    p.add_argument("--views", type=int, default=32)
    p.add_argument("--size", default="64x64", help="HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scene-id", default="synthetic")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("consense", help="build consensus and dump per-view targets")
    _add_consensus_args(p)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_consense)

    p = sub.add_parser("guide", help="run the guided pipeline and write guided predictions")
    _add_consensus_args(p)
    _add_guide_args(p)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_guide)

    p = sub.add_parser("eval", help="consistency and quality metrics")
    _add_consensus_args(p)
    _add_guide_args(p)
    p.add_argument("--pred", type=Path, help="bundle holding guided predictions; omit to run experiments")
    p.add_argument("--pred-unguided", type=Path)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--views", default="4,8,16,32")
    p.add_argument("--report", required=True, type=Path)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
