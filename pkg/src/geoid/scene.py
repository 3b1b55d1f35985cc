"""Core scene types, value checks and pipeline configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

MODALITY_CHANNELS = {"albedo": 3, "roughness": 1, "metallicity": 1}
MODALITIES = tuple(MODALITY_CHANNELS)


class BundleError(ValueError):
    """Raised when a bundle or one of its arrays fails validation."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``extrinsics`` maps world points into the camera frame."""

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "intrinsics", np.asarray(self.intrinsics, dtype=np.float64))
        object.__setattr__(self, "extrinsics", np.asarray(self.extrinsics, dtype=np.float64))

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def validate(self, where: str = "camera") -> None:
        K, E = self.intrinsics, self.extrinsics
        if K.shape != (3, 3) or E.shape != (4, 4):
            raise BundleError(f"{where}: K must be 3x3 and E 4x4")
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(E))):
            raise BundleError(f"{where}: non-finite camera matrix")
        if K[2, 2] != 1.0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise BundleError(f"{where}: malformed intrinsics")
        if not np.array_equal(E[3], [0.0, 0.0, 0.0, 1.0]):
            raise BundleError(f"{where}: extrinsics bottom row must be (0, 0, 0, 1)")
        R = E[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise BundleError(f"{where}: rotation block is not orthonormal")
        if self.width <= 0 or self.height <= 0:
            raise BundleError(f"{where}: non-positive image size")


@dataclass
class ViewFrame:
    """All per-view arrays. Intrinsic maps are stored as ``(H, W, C)`` arrays keyed by modality."""

    camera: Camera
    point_map: np.ndarray
    depth: np.ndarray
    confidence: np.ndarray
    predictions: dict[str, np.ndarray] = field(default_factory=dict)
    gt: dict[str, np.ndarray] = field(default_factory=dict)
    rgb: np.ndarray | None = None
    depth_confidence: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.camera.height, self.camera.width

    def replace(self, **changes) -> "ViewFrame":
        return dataclasses.replace(self, **changes)

    def validate(self, index: int = 0) -> None:
        where = f"view {index}"
        self.camera.validate(where)
        H, W = self.shape

        def check(name, arr, channels, lo=None, hi=None):
            if arr.shape != (H, W, channels) and not (channels == 0 and arr.shape == (H, W)):
                raise BundleError(f"{where}: array '{name}' has shape {arr.shape}, expected {(H, W)}")
            if not np.all(np.isfinite(arr)):
                raise BundleError(f"{where}: array '{name}' contains non-finite values")
            if lo is not None and (arr.min(initial=lo) < lo or arr.max(initial=hi) > hi):
                raise BundleError(f"{where}: array '{name}' has values outside [{lo}, {hi}]")

        check("point_map", self.point_map, 3)
        check("depth", self.depth, 0)
        check("confidence", self.confidence, 0, 0.0, 1.0)
        if np.any((self.confidence > 0) & (self.depth <= 0)):
            raise BundleError(f"{where}: array 'depth' must be positive where confidence > 0")
        if self.depth_confidence is not None:
            check("depth_confidence", self.depth_confidence, 0)
        if self.rgb is not None:
            check("rgb", self.rgb, 3)
        for kind, maps in (("pred", self.predictions), ("gt", self.gt)):
            for mod, arr in maps.items():
                if mod not in MODALITY_CHANNELS:
                    raise BundleError(f"{where}: unknown modality '{mod}'")
                check(f"{kind}_{mod}", arr, MODALITY_CHANNELS[mod], 0.0, 1.0)


@dataclass
class SceneBundle:
    views: list[ViewFrame]
    scene_id: str = "scene"
    rng_seed: int = 0

    def __len__(self) -> int:
        return len(self.views)

    @property
    def modalities(self) -> tuple[str, ...]:
        if not self.views:
            return ()
        return tuple(m for m in MODALITIES if m in self.views[0].predictions)

    def validate(self) -> None:
        if not self.views:
            raise BundleError("bundle has no views")
        mods = set(self.views[0].predictions)
        for i, view in enumerate(self.views):
            view.validate(i)
            if set(view.predictions) != mods:
                raise BundleError(f"view {i}: modality set differs from view 0")

    def with_predictions(self, predictions: list[dict[str, np.ndarray]]) -> "SceneBundle":
        """Copy of the bundle with each view's predictions replaced."""
        views = [v.replace(predictions=dict(p)) for v, p in zip(self.views, predictions)]
        return SceneBundle(views, self.scene_id, self.rng_seed)


def clamp_intrinsic(arr) -> np.ndarray:
    """Clamp an intrinsic map into [0, 1] as float32."""
    return np.clip(np.asarray(arr, dtype=np.float32), 0.0, 1.0)


@dataclass(frozen=True)
class PipelineConfig:
    tau_c: float = 0.35
    alpha: float = 2.5
    n_min: int = 2
    eps_vis: float = 0.05
    delta_huber: float = 1.0
    guide_fraction: float = 0.8
    eta: float = 0.5
    k_out: float = 3.0
    holdout_fraction: float = 0.2
    num_steps: int = 50
    optimizer: str = "plain"
    seed: int = 0
    # voxel size override; None means alpha * median NN distance
    delta: float | None = None
    eps_sigma: float = 1e-4
    nn_max_points: int = 20000
    # toy denoiser
    rho0: float = 1.0
    prior_scale: float = 0.1

    def __post_init__(self):
        for name in ("guide_fraction", "holdout_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        for name in ("tau_c", "eps_vis", "eta", "alpha", "delta_huber", "eps_sigma", "k_out"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_min < 2:
            raise ValueError("n_min must be at least 2")
        if self.num_steps < 1:
            raise ValueError("num_steps must be at least 1")
        if self.optimizer not in ("plain", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.delta is not None and self.delta <= 0:
            raise ValueError("delta must be positive")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def subsample_views(bundle: SceneBundle, num_views: int, seed: int) -> SceneBundle:
    """Draw ``num_views`` views uniformly without replacement, keeping their relative order.

    Selection is a partial Fisher-Yates shuffle: for ``i = 0 .. num_views-1`` draw
    ``j`` uniformly from ``[i, n)`` with ``numpy.random.default_rng(seed)`` and swap
    positions ``i`` and ``j``. The world frame is not re-anchored.
    """
    n = len(bundle.views)
    if not 1 <= num_views <= n:
        raise ValueError(f"cannot draw {num_views} views from {n}")
    rng = np.random.default_rng(seed)
    order = list(range(n))
    for i in range(num_views):
        j = int(rng.integers(i, n))
        order[i], order[j] = order[j], order[i]
    chosen = sorted(order[:num_views])
    return SceneBundle([bundle.views[i] for i in chosen], bundle.scene_id, bundle.rng_seed)
