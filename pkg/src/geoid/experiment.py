"""Seeded experiments over view counts, and the JSON report they produce."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .guidance import derive_seed
from .metrics import consistency_mad, quality_metrics
from .pipeline import PipelineResult, run_pipeline
from .scene import PipelineConfig, SceneBundle, subsample_views


def evaluate_run(bundle: SceneBundle, result: PipelineResult) -> dict:
    """Held-out MAD and ground-truth quality of guided and unguided outputs of one run."""
    row = {"degenerate": result.degenerate, "mad": {}, "quality": {}}
    if result.holdout is not None and len(result.holdout) > 0:
        row["mad"]["guided"] = consistency_mad(result.guided, result.holdout)
        row["mad"]["unguided"] = consistency_mad(result.unguided, result.holdout)
    has_gt = all(v.gt for v in bundle.views)
    if has_gt:
        for label, preds in (("guided", result.guided), ("unguided", result.unguided)):
            per_mod = {}
            for mod in preds[0]:
                scores = np.array([quality_metrics(p[mod], v.gt[mod]) for p, v in zip(preds, bundle.views)])
                per_mod[mod] = {
                    "psnr": float(np.mean(scores[:, 0])),
                    "ssim": float(np.mean(scores[:, 1])),
                    "rmse": float(np.mean(scores[:, 2])),
                }
            row["quality"][label] = per_mod
    return row


def _mean_std(values) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std())}


@dataclass
class EvalReport:
    """Aggregate over seeds for one view count. ``runs`` keeps every per-run row."""

    num_views: int
    seeds: list[int]
    config: dict
    mad: dict = field(default_factory=dict)  # label -> modality -> {mean, std}
    quality: dict = field(default_factory=dict)  # label -> modality -> metric -> {mean, std}
    runs: list[dict] = field(default_factory=list)
    mad_definition: str = "channel-mean absolute deviation from per-channel median; median over views"

    @classmethod
    def from_runs(cls, num_views: int, seeds, config: PipelineConfig, runs: list[dict]) -> "EvalReport":
        report = cls(num_views, list(seeds), config.to_dict(), runs=runs)
        usable = [r for r in runs if r["mad"]]
        for label in ("guided", "unguided"):
            if usable:
                mods = usable[0]["mad"][label]
                report.mad[label] = {m: _mean_std([r["mad"][label][m] for r in usable]) for m in mods}
            q_runs = [r for r in runs if label in r["quality"]]
            if q_runs:
                report.quality[label] = {
                    m: {k: _mean_std([r["quality"][label][m][k] for r in q_runs]) for k in ("psnr", "ssim", "rmse")}
                    for m in q_runs[0]["quality"][label]
                }
        return report

    @property
    def any_degenerate(self) -> bool:
        return any(r["degenerate"] for r in self.runs)

    def to_dict(self) -> dict:
        return asdict(self)


def _json_safe(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def reports_to_json(reports: list[EvalReport]) -> str:
    return json.dumps(_json_safe([r.to_dict() for r in reports]), indent=2, sort_keys=True) + "\n"


def run_experiment(bundle: SceneBundle, view_counts, num_seeds: int, config: PipelineConfig) -> list[EvalReport]:
    """For each view count, run ``num_seeds`` seeded subsets and aggregate guided vs unguided metrics."""
    view_counts = list(view_counts)
    if max(view_counts) > len(bundle.views):
        raise ValueError(f"view count {max(view_counts)} exceeds bundle size {len(bundle.views)}")
    reports = []
    for V in view_counts:
        seeds = [derive_seed(config.seed, V, k) % (2**32) for k in range(num_seeds)]
        runs = []
        for k, s in enumerate(seeds):
            sub = subsample_views(bundle, V, s)
            result = run_pipeline(sub, config.replace(seed=s))
            row = evaluate_run(sub, result)
            row.update(seed=s, run=k, num_views=V)
            runs.append(row)
        reports.append(EvalReport.from_runs(V, seeds, config, runs))
    return reports
