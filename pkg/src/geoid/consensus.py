"""Robust per-voxel consensus over initial predictions and per-view guidance targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Observations, VoxelGrid, visibility_mask
from .scene import SceneBundle

MAD_SCALE = 1.4826
EPS_SIGMA = 1e-4


def weighted_median(values, weights) -> float:
    """Lower weighted median.

    The smallest input value whose cumulative weight (over values <= it) reaches
    half of the total weight.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("weighted_median of an empty sequence")
    if values.shape != weights.shape:
        raise ValueError("values and weights differ in length")
    if np.any(~(weights > 0)):
        raise ValueError("weights must be positive")
    order = np.argsort(values, kind="stable")
    cw = np.cumsum(weights[order])
    k = int(np.argmax(cw >= 0.5 * cw[-1]))
    return float(values[order[k]])


def _padded_groups(offsets: np.ndarray):
    """Yield ``(segment_ids, index_matrix, lengths)`` with segments bucketed by length.

    ``index_matrix`` rows hold member positions for one segment, padded with -1.
    Bucketing keeps the padded arrays small when a few cells are very large.
    """
    lengths = np.diff(offsets)
    if len(lengths) == 0:
        return
    bucket = np.ceil(np.log2(np.maximum(lengths, 1))).astype(np.int64)
    for b in np.unique(bucket):
        segs = np.flatnonzero(bucket == b)
        lens = lengths[segs]
        width = int(lens.max())
        cols = np.arange(width)
        idx = offsets[segs][:, None] + cols[None, :]
        idx = np.where(cols[None, :] < lens[:, None], idx, -1)
        yield segs, idx, lens


def segment_weighted_median(values: np.ndarray, weights: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """:func:`weighted_median` of every segment ``values[offsets[k]:offsets[k+1]]``.

    Summation order matches the scalar routine, so results agree bit for bit.
    """
    out = np.empty(len(offsets) - 1, dtype=np.float64)
    for segs, idx, lens in _padded_groups(offsets):
        pad = idx < 0
        v = np.where(pad, np.inf, values[idx])
        w = np.where(pad, 0.0, weights[idx])
        order = np.argsort(v, axis=1, kind="stable")
        v = np.take_along_axis(v, order, axis=1)
        cw = np.cumsum(np.take_along_axis(w, order, axis=1), axis=1)
        total = cw[np.arange(len(segs)), lens - 1]
        k = np.argmax(cw >= 0.5 * total[:, None], axis=1)
        out[segs] = v[np.arange(len(segs)), k]
    return out


def segment_median(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """``np.median`` of each segment (mean of the two middle values for even sizes)."""
    out = np.full(len(offsets) - 1, np.nan)
    for segs, idx, lens in _padded_groups(offsets):
        v = np.sort(np.where(idx < 0, np.inf, values[idx]), axis=1)
        rows = np.arange(len(segs))
        ok = lens > 0
        lo = v[rows, np.maximum((lens - 1) // 2, 0)]
        hi = v[rows, np.maximum(lens // 2, 0)]
        out[segs[ok]] = ((lo + hi) / 2)[ok]
    return out


def sample_predictions(predictions: list[dict[str, np.ndarray]], obs: Observations, modality: str) -> np.ndarray:
    """Prediction values at each observation's pixel, shape ``(N, C)``."""
    out = None
    for v in np.unique(obs.view_index):
        sel = obs.view_index == v
        arr = predictions[int(v)][modality]
        vals = arr[obs.rows[sel], obs.cols[sel]].astype(np.float64)
        if out is None:
            out = np.empty((len(obs), vals.shape[1]))
        out[sel] = vals
    if out is None:
        c = next(iter(predictions))[modality].shape[-1] if predictions else 1
        out = np.empty((0, c))
    return out


@dataclass(frozen=True)
class VoxelConsensus:
    key: tuple[int, int, int]
    center: np.ndarray
    values: dict[str, np.ndarray]
    sigma: dict[str, float]
    sigma_inlier: dict[str, float]
    n_views: int
    observations: Observations
    inliers: dict[str, Observations]


@dataclass(frozen=True)
class ConsensusSet:
    """Consensus for every voxel of ``grid``, in the grid's lexicographic cell order.

    ``sigma`` is the scaled MAD over all observations of a cell; ``sigma_inlier`` is
    the same statistic over the observations kept by outlier rejection and is the
    dispersion that drives target weights. ``inlier`` masks are aligned with
    ``grid.order``.
    """

    grid: VoxelGrid
    values: dict[str, np.ndarray]  # (M, C)
    sigma: dict[str, np.ndarray]  # (M,)
    sigma_inlier: dict[str, np.ndarray]  # (M,)
    inlier: dict[str, np.ndarray]  # (num members,) bool
    n_views: np.ndarray  # (M,)
    ids: np.ndarray  # (M,) position in the unsplit set

    def __len__(self) -> int:
        return len(self.grid)

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(self.values)

    @property
    def centers(self) -> np.ndarray:
        return self.grid.centers()

    def __getitem__(self, k: int) -> VoxelConsensus:
        members = self.grid.members(k)
        sl = slice(self.grid.offsets[k], self.grid.offsets[k + 1])
        return VoxelConsensus(
            key=tuple(int(x) for x in self.grid.keys[k]),
            center=self.centers[k],
            values={m: v[k] for m, v in self.values.items()},
            sigma={m: float(v[k]) for m, v in self.sigma.items()},
            sigma_inlier={m: float(v[k]) for m, v in self.sigma_inlier.items()},
            n_views=int(self.n_views[k]),
            observations=self.grid.obs.take(members),
            inliers={m: self.grid.obs.take(members[mask[sl]]) for m, mask in self.inlier.items()},
        )

    def subset(self, keep) -> "ConsensusSet":
        keep = np.asarray(keep)
        if keep.dtype != bool:
            mask = np.zeros(len(self), dtype=bool)
            mask[keep] = True
            keep = mask
        member_mask = np.repeat(keep, np.diff(self.grid.offsets))
        return ConsensusSet(
            grid=self.grid.subset(keep),
            values={m: v[keep] for m, v in self.values.items()},
            sigma={m: v[keep] for m, v in self.sigma.items()},
            sigma_inlier={m: v[keep] for m, v in self.sigma_inlier.items()},
            inlier={m: v[member_mask] for m, v in self.inlier.items()},
            n_views=self.n_views[keep],
            ids=self.ids[keep],
        )


def compute_consensus(
    grid: VoxelGrid,
    predictions: list[dict[str, np.ndarray]],
    modalities=None,
    k_out: float = 3.0,
    eps_sigma: float = EPS_SIGMA,
) -> ConsensusSet:
    """Weighted-median consensus and scaled-MAD dispersion per voxel and modality.

    Median weights are the observation confidences. Multi-channel maps use the
    per-channel weighted median; residuals are channel-mean absolute deviations.
    """
    if modalities is None:
        modalities = tuple(predictions[0]) if predictions else ()
    obs = grid.obs.take(grid.order)
    offsets = grid.offsets
    cid = grid.cell_ids()
    if np.any(np.diff(offsets) == 0):
        raise ValueError("voxel without observations")

    values, sigma, sigma_in, inlier = {}, {}, {}, {}
    for mod in modalities:
        y = sample_predictions(predictions, obs, mod)
        s = np.stack(
            [segment_weighted_median(y[:, c], obs.confidence, offsets) for c in range(y.shape[1])],
            axis=1,
        )
        resid = np.abs(y - s[cid]).mean(axis=1)
        sig = MAD_SCALE * segment_median(resid, offsets)
        keep = (resid <= k_out * sig[cid]) | (sig[cid] < eps_sigma)

        # dispersion recomputed over inliers; s_v itself is not re-estimated
        kept_sizes = np.bincount(cid[keep], minlength=len(grid))
        kept_offsets = np.concatenate([[0], np.cumsum(kept_sizes)])
        sig_in = MAD_SCALE * segment_median(resid[keep], kept_offsets)

        values[mod], sigma[mod], sigma_in[mod], inlier[mod] = s, sig, sig_in, keep

    return ConsensusSet(
        grid=grid,
        values=values,
        sigma=sigma,
        sigma_inlier=sigma_in,
        inlier=inlier,
        n_views=grid.view_counts(),
        ids=np.arange(len(grid)),
    )


def compute_target_weight(n_views, sigma_hat, eps_sigma: float = EPS_SIGMA):
    """Unnormalised target weight ``log2(1 + n_views) / (sigma_hat + eps_sigma)``."""
    return np.log2(1.0 + np.asarray(n_views, dtype=np.float64)) / (
        np.asarray(sigma_hat, dtype=np.float64) + eps_sigma
    )


@dataclass(frozen=True)
class ViewTargets:
    """Sparse consensus targets of one modality in one view, sorted row-major by pixel."""

    view_index: int
    modality: str
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray  # (N, C)
    weights: np.ndarray  # (N,)
    holdout: np.ndarray  # (N,) bool
    voxel: np.ndarray  # (N,) id of the source voxel

    def __len__(self) -> int:
        return len(self.rows)

    def guide(self) -> "ViewTargets":
        """Entries used for guidance (holdout entries removed)."""
        keep = ~self.holdout
        return ViewTargets(
            self.view_index, self.modality, self.rows[keep], self.cols[keep],
            self.values[keep], self.weights[keep], self.holdout[keep], self.voxel[keep],
        )

    @classmethod
    def empty(cls, view_index: int, modality: str, channels: int) -> "ViewTargets":
        z = np.zeros(0, dtype=np.int64)
        return cls(view_index, modality, z, z, np.zeros((0, channels)), np.zeros(0), np.zeros(0, bool), z)

    def to_image(self, height: int, width: int) -> np.ndarray:
        """Dense ``(H, W, C + 2)`` dump: value channels, weight, holdout flag."""
        c = self.values.shape[1]
        img = np.zeros((height, width, c + 2), dtype=np.float32)
        img[self.rows, self.cols, :c] = self.values
        img[self.rows, self.cols, c] = self.weights
        img[self.rows, self.cols, c + 1] = self.holdout
        return img


def build_view_targets(
    consensus: ConsensusSet,
    bundle: SceneBundle,
    eps_vis: float = 0.05,
    holdout=None,
    eps_sigma: float = EPS_SIGMA,
) -> list[dict[str, ViewTargets]]:
    """Visible consensus targets for every view and modality.

    A voxel yields an entry in view ``i`` iff its center passes the depth-verified
    visibility test there. When several voxels land on one pixel the entry with
    the larger weight is kept (guidance entries take precedence over held-out
    ones). Weights are normalised so that guidance entries of a view average 1.
    """
    holdout = np.zeros(len(consensus), dtype=bool) if holdout is None else np.asarray(holdout, bool)
    centers = consensus.centers
    out = []
    for i, view in enumerate(bundle.views):
        H, W = view.shape
        visible, rows, cols, _ = visibility_mask(centers, view, eps_vis)
        vox = np.flatnonzero(visible)
        per_mod = {}
        for mod in consensus.modalities:
            w = compute_target_weight(consensus.n_views[vox], consensus.sigma_inlier[mod][vox], eps_sigma)
            pix = rows[vox] * W + cols[vox]
            ho = holdout[vox]
            # best entry per pixel: guidance before holdout, then larger weight, then lower voxel id
            order = np.lexsort((vox, -w, ho, pix))
            first = np.ones(len(order), dtype=bool)
            first[1:] = pix[order][1:] != pix[order][:-1]
            sel = order[first]
            sel = sel[np.argsort(pix[sel], kind="stable")]
            weights = w[sel]
            g = ~ho[sel]
            if g.any():
                weights = weights / weights[g].mean()
            per_mod[mod] = ViewTargets(
                view_index=i,
                modality=mod,
                rows=rows[vox][sel],
                cols=cols[vox][sel],
                values=consensus.values[mod][vox][sel],
                weights=weights,
                holdout=ho[sel],
                voxel=consensus.ids[vox][sel],
            )
        out.append(per_mod)
    return out


def split_holdout(consensus: ConsensusSet, fraction: float, seed: int):
    """Seeded uniform split into ``(guide, holdout)``; holdout size ``round(fraction * N)``."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("holdout fraction must lie in (0, 1)")
    n = len(consensus)
    n_hold = int(np.floor(fraction * n + 0.5))
    rng = np.random.default_rng(seed)
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:n_hold]] = True
    return consensus.subset(~mask), consensus.subset(mask)


def holdout_mask(consensus: ConsensusSet, holdout: ConsensusSet) -> np.ndarray:
    """Boolean mask over ``consensus`` marking voxels present in ``holdout``."""
    return np.isin(consensus.ids, holdout.ids)
