"""Cross-view consistency and per-view quality metrics."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .consensus import ConsensusSet, sample_predictions, segment_median

PSNR_IDENTICAL = float("inf")


def voxel_mad(values_by_view: np.ndarray) -> float:
    """Median absolute deviation across views of ``(V, C)`` values; channel-mean deviations."""
    v = np.asarray(values_by_view, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    med = np.median(v, axis=0)
    return float(np.median(np.abs(v - med).mean(axis=1)))


def consistency_mad(predictions: list[dict[str, np.ndarray]], holdout: ConsensusSet, modalities=None) -> dict[str, float]:
    """Mean over held-out voxels of the cross-view MAD of predicted values.

    Each contributing view is represented by the mean of its observations in the
    voxel; per-channel absolute deviations from the per-channel median are averaged
    over channels before taking the median over views.
    """
    if len(holdout) == 0:
        raise ValueError("empty holdout set")
    modalities = modalities or holdout.modalities
    grid = holdout.grid
    obs = grid.obs.take(grid.order)
    cid = grid.cell_ids()
    # one slot per (voxel, view) pair, in grid order
    pair = np.stack([cid, obs.view_index], axis=1)
    uniq, slot = np.unique(pair, axis=0, return_inverse=True)
    slot = slot.ravel()
    counts = np.bincount(slot, minlength=len(uniq)).astype(np.float64)
    pair_cell = uniq[:, 0]
    pair_offsets = np.concatenate([[0], np.cumsum(np.bincount(pair_cell, minlength=len(grid)))])

    out = {}
    for mod in modalities:
        y = sample_predictions(predictions, obs, mod)
        per_view = np.stack(
            [np.bincount(slot, weights=y[:, c], minlength=len(uniq)) for c in range(y.shape[1])], axis=1
        ) / counts[:, None]
        med = np.stack([segment_median(per_view[:, c], pair_offsets) for c in range(y.shape[1])], axis=1)
        dev = np.abs(per_view - med[pair_cell]).mean(axis=1)
        out[mod] = float(segment_median(dev, pair_offsets).mean())
    return out


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = len(win) // 2
    out = correlate1d(correlate1d(img, win, axis=0, mode="reflect"), win, axis=1, mode="reflect")
    return out[r:-r, r:-r]


def ssim(pred: np.ndarray, gt: np.ndarray, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM with a Gaussian window, averaged over channels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    if min(pred.shape[:2]) < win_size:
        raise ValueError("image smaller than the SSIM window")
    win = _gaussian_window(win_size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    scores = []
    for ch in range(pred.shape[2]):
        x, y = pred[..., ch], gt[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def quality_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """``(psnr_db, ssim, rmse)`` for maps in [0, 1]; identical maps give PSNR = inf."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    psnr = PSNR_IDENTICAL if mse == 0 else 10.0 * np.log10(1.0 / mse)
    return float(psnr), ssim(pred, gt), float(np.sqrt(mse))
