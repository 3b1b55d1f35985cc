"""Projection, visibility, confidence filtering and voxelization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .scene import Camera, SceneBundle, ViewFrame


class Observation(NamedTuple):
    view_index: int
    pixel: tuple[int, int]  # (row, col)
    world_point: np.ndarray
    confidence: float


@dataclass(frozen=True)
class Observations:
    """Column store of retained points, ordered view-major then row-major."""

    view_index: np.ndarray  # (N,) int64
    rows: np.ndarray  # (N,) int64
    cols: np.ndarray  # (N,) int64
    points: np.ndarray  # (N, 3) float64
    confidence: np.ndarray  # (N,) float64

    def __len__(self) -> int:
        return len(self.view_index)

    def __getitem__(self, i: int) -> Observation:
        return Observation(
            int(self.view_index[i]),
            (int(self.rows[i]), int(self.cols[i])),
            self.points[i],
            float(self.confidence[i]),
        )

    def take(self, idx) -> "Observations":
        return Observations(
            self.view_index[idx], self.rows[idx], self.cols[idx], self.points[idx], self.confidence[idx]
        )

    @classmethod
    def empty(cls) -> "Observations":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, np.zeros((0, 3)), np.zeros(0))


def project(point, camera: Camera) -> tuple[np.ndarray, float]:
    """Project a world point. Returns ``((x, y), z)`` with x along columns; z may be <= 0."""
    uv, z = project_points(np.asarray(point, dtype=np.float64)[None], camera)
    return uv[0], float(z[0])


def project_points(points: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`project` for ``(N, 3)`` points."""
    q = points @ camera.rotation.T + camera.translation
    z = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        kq = q @ camera.intrinsics.T
        uv = kq[:, :2] / z[:, None]
    return uv, z


def unproject(pixel, depth: float, camera: Camera) -> np.ndarray:
    """Inverse of :func:`project` for a pixel ``(x, y)`` at camera depth ``depth``."""
    x, y = pixel
    ray = np.linalg.solve(camera.intrinsics, np.array([x, y, 1.0]))
    q = ray * depth
    return camera.rotation.T @ (q - camera.translation)


def round_pixels(uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-integer pixel ``(row, col)`` for projected ``(x, y)`` coordinates."""
    uv = np.nan_to_num(uv, nan=-1.0, posinf=-1.0, neginf=-1.0)
    uv = np.clip(uv, -1e9, 1e9)
    cols = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    rows = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    return rows, cols


def visibility_mask(centers: np.ndarray, view: ViewFrame, eps_vis: float):
    """Depth-verified visibility of ``(N, 3)`` points in ``view``.

    Returns ``(visible, rows, cols, z)``; rows/cols are only meaningful where visible.
    """
    uv, z = project_points(centers, view.camera)
    rows, cols = round_pixels(uv)
    H, W = view.shape
    inb = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W) & (z > 0)
    visible = np.zeros(len(centers), dtype=bool)
    idx = np.flatnonzero(inb)
    d = view.depth[rows[idx], cols[idx]].astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = (d > 0) & (np.abs(z[idx] - d) / d < eps_vis)
    visible[idx[ok]] = True
    return visible, rows, cols, z


def check_visibility(voxel_center, view: ViewFrame, eps_vis: float) -> bool:
    visible, *_ = visibility_mask(np.asarray(voxel_center, dtype=np.float64)[None], view, eps_vis)
    return bool(visible[0])


def filter_points(bundle: SceneBundle, tau_c: float) -> Observations:
    """Keep the pixels whose point confidence is at least ``tau_c``."""
    vidx, rr, cc, pts, conf = [], [], [], [], []
    for i, view in enumerate(bundle.views):
        rows, cols = np.nonzero(view.confidence >= tau_c)
        vidx.append(np.full(len(rows), i, dtype=np.int64))
        rr.append(rows.astype(np.int64))
        cc.append(cols.astype(np.int64))
        pts.append(view.point_map[rows, cols].astype(np.float64))
        conf.append(view.confidence[rows, cols].astype(np.float64))
    if not vidx:
        return Observations.empty()
    return Observations(
        np.concatenate(vidx), np.concatenate(rr), np.concatenate(cc),
        np.concatenate(pts).reshape(-1, 3), np.concatenate(conf),
    )


def median_nn_distance(points: np.ndarray, max_points: int | None = None, seed: int = 0) -> float:
    """Lower median of each point's distance to its nearest other point.

    When ``max_points`` is set and the cloud is larger, the median is taken over a
    seeded uniform subsample of query points; neighbours are still searched in the
    full cloud, so the estimate is not biased by the thinning.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        raise ValueError("need at least two points")
    queries = points
    if max_points is not None and len(points) > max_points:
        rng = np.random.default_rng(seed)
        queries = points[np.sort(rng.choice(len(points), size=max_points, replace=False))]
    dist, _ = cKDTree(points).query(queries, k=2)
    nn = np.sort(dist[:, 1])
    return float(nn[(len(nn) - 1) // 2])


@dataclass(frozen=True)
class VoxelGrid:
    """Sparse voxel grid.

    ``keys`` holds the integer cell indices in lexicographic order; the observations
    of cell ``k`` are ``obs.take(order[offsets[k]:offsets[k + 1]])``, sorted by
    (view, row, col).
    """

    origin: np.ndarray
    delta: float
    keys: np.ndarray  # (M, 3) int64
    offsets: np.ndarray  # (M + 1,) int64
    order: np.ndarray  # indices into obs
    obs: Observations

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def num_observations(self) -> int:
        return int(self.offsets[-1])

    def members(self, k: int) -> np.ndarray:
        return self.order[self.offsets[k] : self.offsets[k + 1]]

    def cell_observations(self, k: int) -> Observations:
        return self.obs.take(self.members(k))

    @property
    def cells(self) -> dict[tuple[int, int, int], list[Observation]]:
        out = {}
        for k, key in enumerate(self.keys):
            sub = self.cell_observations(k)
            out[tuple(int(x) for x in key)] = [sub[j] for j in range(len(sub))]
        return out

    def centers(self) -> np.ndarray:
        return self.origin + (self.keys + 0.5) * self.delta

    def cell_ids(self) -> np.ndarray:
        """Cell number of every grid member, aligned with ``order``."""
        return np.repeat(np.arange(len(self.keys)), np.diff(self.offsets))

    def view_counts(self) -> np.ndarray:
        """Number of distinct views contributing to each cell."""
        cid = self.cell_ids()
        views = self.obs.view_index[self.order]
        pairs = np.unique(np.stack([cid, views], axis=1), axis=0)
        return np.bincount(pairs[:, 0], minlength=len(self.keys))

    def subset(self, keep: np.ndarray) -> "VoxelGrid":
        keep = np.asarray(keep, dtype=bool)
        sizes = np.diff(self.offsets)[keep]
        member_mask = np.repeat(keep, np.diff(self.offsets))
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        return VoxelGrid(self.origin, self.delta, self.keys[keep], offsets, self.order[member_mask], self.obs)


def voxel_indices(points: np.ndarray, origin: np.ndarray, delta: float) -> np.ndarray:
    return np.floor((points - origin) / delta).astype(np.int64)


def voxelize(obs: Observations, delta: float, origin: np.ndarray | None = None) -> VoxelGrid:
    """Hash observations into axis-aligned cells of side ``delta``.

    The grid origin defaults to the component-wise minimum of the points.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    if len(obs) == 0:
        raise ValueError("no observations to voxelize")
    origin = obs.points.min(axis=0) if origin is None else np.asarray(origin, dtype=np.float64)
    idx = voxel_indices(obs.points, origin, delta)
    # sort by cell, then (view, row, col) inside each cell
    order = np.lexsort((obs.cols, obs.rows, obs.view_index, idx[:, 2], idx[:, 1], idx[:, 0]))
    sorted_idx = idx[order]
    new_cell = np.ones(len(order), dtype=bool)
    new_cell[1:] = np.any(sorted_idx[1:] != sorted_idx[:-1], axis=1)
    starts = np.flatnonzero(new_cell)
    offsets = np.concatenate([starts, [len(order)]]).astype(np.int64)
    return VoxelGrid(origin, float(delta), sorted_idx[starts], offsets, order, obs)


def prune_cells(grid: VoxelGrid, n_min: int) -> VoxelGrid:
    """Drop cells observed from fewer than ``n_min`` distinct views."""
    if len(grid) == 0:
        return grid
    return grid.subset(grid.view_counts() >= n_min)
