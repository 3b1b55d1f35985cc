"""End-to-end consensus pipeline: filter, voxelize, aggregate, split, guide."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .consensus import (
    ConsensusSet,
    ViewTargets,
    build_view_targets,
    compute_consensus,
    split_holdout,
)
from .geometry import VoxelGrid, filter_points, median_nn_distance, prune_cells, voxelize
from .guidance import GuidanceState, ToyDenoiser, derive_seed, guidance_schedule, guided_sample
from .scene import MODALITIES, MODALITY_CHANNELS, PipelineConfig, SceneBundle

logger = logging.getLogger(__name__)


@dataclass
class ConsensusStage:
    grid: VoxelGrid | None
    delta: float | None
    consensus: ConsensusSet | None
    guide: ConsensusSet | None
    holdout: ConsensusSet | None
    targets: list[dict[str, ViewTargets]]
    degenerate: bool = False


@dataclass
class PipelineResult:
    guided: list[dict[str, np.ndarray]]
    unguided: list[dict[str, np.ndarray]]
    stage: ConsensusStage
    states: list[dict[str, GuidanceState]] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return self.stage.degenerate

    @property
    def consensus(self) -> ConsensusSet | None:
        return self.stage.consensus

    @property
    def holdout(self) -> ConsensusSet | None:
        return self.stage.holdout


def _empty_targets(bundle: SceneBundle, modalities) -> list[dict[str, ViewTargets]]:
    return [
        {m: ViewTargets.empty(i, m, MODALITY_CHANNELS[m]) for m in modalities}
        for i in range(len(bundle.views))
    ]


def build_consensus(bundle: SceneBundle, config: PipelineConfig, predictions=None) -> ConsensusStage:
    """Everything up to and including the per-view guidance targets.

    ``predictions`` defaults to the bundle's own initial predictions.
    """
    if predictions is None:
        predictions = [v.predictions for v in bundle.views]
    modalities = [m for m in MODALITIES if m in predictions[0]]
    obs = filter_points(bundle, config.tau_c)
    if len(obs) < 2:
        logger.warning("fewer than two confident points; no consensus")
        return ConsensusStage(None, None, None, None, None, _empty_targets(bundle, modalities), True)

    if config.delta is not None:
        delta = config.delta
    else:
        d_nn = median_nn_distance(obs.points, config.nn_max_points, config.seed)
        delta = config.alpha * d_nn
    if not delta > 0:
        logger.warning("degenerate voxel size %r", delta)
        return ConsensusStage(None, delta, None, None, None, _empty_targets(bundle, modalities), True)

    grid = prune_cells(voxelize(obs, delta), config.n_min)
    if len(grid) == 0:
        logger.warning("no voxel is observed from %d views; running unguided", config.n_min)
        return ConsensusStage(grid, delta, None, None, None, _empty_targets(bundle, modalities), True)

    cons = compute_consensus(grid, predictions, modalities, config.k_out, config.eps_sigma)
    guide, holdout = split_holdout(cons, config.holdout_fraction, config.seed)
    mask = np.zeros(len(cons), dtype=bool)
    mask[holdout.ids] = True
    targets = build_view_targets(cons, bundle, config.eps_vis, mask, config.eps_sigma)
    return ConsensusStage(grid, delta, cons, guide, holdout, targets)


def make_denoiser(base: np.ndarray, config: PipelineConfig) -> ToyDenoiser:
    return ToyDenoiser(base, config.num_steps, config.rho0, config.prior_scale)


def _warn_if_unstable(stage: ConsensusStage, config: PipelineConfig) -> None:
    weights = [t.weights[~t.holdout] for per in stage.targets for t in per.values()]
    max_w = max((float(w.max()) for w in weights if len(w)), default=0.0)
    if max_w == 0.0:
        return
    probe = ToyDenoiser(np.zeros(1), config.num_steps, config.rho0, config.prior_scale)
    bound = probe.stability_bound(guidance_schedule(config.num_steps, config.guide_fraction), max_w)
    if config.eta >= bound:
        logger.info("eta=%g exceeds the plain-step stability bound %.3g for max weight %.3g",
                    config.eta, bound, max_w)


def run_pipeline(bundle: SceneBundle, config: PipelineConfig, guide: bool = True) -> PipelineResult:
    """Consensus construction followed by one guided trajectory per view and modality.

    Initial predictions are the bundle's predictions; the toy denoiser reproduces
    them exactly on an unguided pass. With ``guide=False`` or when no voxel
    survives, outputs are the unguided trajectories.
    """
    stage = build_consensus(bundle, config)
    if guide and config.optimizer == "plain":
        _warn_if_unstable(stage, config)
    unguided = [dict(v.predictions) for v in bundle.views]
    guided, states = [], []
    for i, view in enumerate(bundle.views):
        outs, sts = {}, {}
        for mi, mod in enumerate(MODALITIES):
            if mod not in view.predictions:
                continue
            denoiser = make_denoiser(view.predictions[mod], config)
            targets = stage.targets[i][mod] if guide else None
            out, st = guided_sample(
                denoiser,
                targets,
                fraction=config.guide_fraction,
                eta=config.eta,
                delta_h=config.delta_huber,
                optimizer=config.optimizer,
                seed=derive_seed(config.seed, mi),
                view_index=i,
            )
            outs[mod] = out.astype(np.float32)
            sts[mod] = st
        guided.append(outs)
        states.append(sts)
    return PipelineResult(guided, unguided, stage, states)
