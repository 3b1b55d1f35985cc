"""Synthetic scenes with exact geometry and ground-truth materials.

Scenes are a handful of axis-aligned boxes and axis-aligned finite planes, rendered
by analytic ray casting. Pixels that miss every primitive hit a per-camera
background plane at a fixed depth. Predictions are produced from the ground truth
by a seeded, view-dependent corruption model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .guidance import derive_seed
from .scene import Camera, SceneBundle, ViewFrame, clamp_intrinsic

AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class Material:
    albedo: tuple[float, float, float]
    roughness: float
    metallicity: float
    # optional checker: second material and tile size in world units
    checker_size: float | None = None
    albedo2: tuple[float, float, float] | None = None
    roughness2: float | None = None
    metallicity2: float | None = None

    def __post_init__(self):
        vals = list(self.albedo) + [self.roughness, self.metallicity]
        for extra in (self.albedo2, self.roughness2, self.metallicity2):
            if extra is not None:
                vals += list(np.atleast_1d(extra))
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValueError("material values must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "Material":
        d = dict(d)
        d["albedo"] = tuple(d["albedo"])
        if d.get("albedo2") is not None:
            d["albedo2"] = tuple(d["albedo2"])
        return cls(**d)


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    material: Material

    def bounds(self):
        return np.array(self.lo, float), np.array(self.hi, float)


@dataclass(frozen=True)
class Plane:
    """Finite rectangle ``{p : p[axis] == offset}`` clipped to ``extent`` on the other two axes."""

    axis: int
    offset: float
    extent: tuple[tuple[float, float], tuple[float, float]]
    material: Material

    def bounds(self):
        lo, hi = np.zeros(3), np.zeros(3)
        others = [a for a in range(3) if a != self.axis]
        lo[self.axis] = hi[self.axis] = self.offset
        for a, (l, h) in zip(others, self.extent):
            lo[a], hi[a] = l, h
        return lo, hi


@dataclass(frozen=True)
class PrimitiveScene:
    primitives: tuple
    background: Material
    far_depth: float | None = None  # camera depth of the background plane

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene has no primitives")

    def bounds(self):
        los, his = zip(*(p.bounds() for p in self.primitives))
        return np.min(los, axis=0), np.max(his, axis=0)

    def centroid(self) -> np.ndarray:
        lo, hi = self.bounds()
        return 0.5 * (lo + hi)

    def extent(self) -> float:
        """Radius of the bounding sphere of the primitives' box."""
        lo, hi = self.bounds()
        return float(0.5 * np.linalg.norm(hi - lo))


@dataclass(frozen=True)
class CorruptionConfig:
    gain: float = 0.15  # gains drawn from [1 - gain, 1 + gain], per view and channel
    offset: float = 0.05  # offsets drawn from [-offset, offset]
    bias_amplitude: float = 0.05
    bias_scale: float = 32.0  # shortest bias wavelength, pixels
    noise: float = 0.02
    outlier_prob: float = 0.3  # chance that a view carries an outlier patch
    outlier_size: int = 8
    confidence_rate: float = 0.05  # fraction of pixels given low confidence and a perturbed point
    low_confidence_max: float = 0.3
    point_noise: float = 0.1  # in units of scene extent

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative")

    @classmethod
    def zero(cls) -> "CorruptionConfig":
        return cls(0.0, 0.0, 0.0, 32.0, 0.0, 0.0, 0, 0.0, 0.3, 0.0)


# ----------------------------------------------------------------------------- config I/O


def _material_dict(m: Material) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(m).items() if v is not None}


def scene_to_dict(scene: PrimitiveScene, corruption: CorruptionConfig | None = None) -> dict:
    prims = []
    for p in scene.primitives:
        if isinstance(p, Box):
            prims.append({"type": "box", "min": list(p.lo), "max": list(p.hi), "material": _material_dict(p.material)})
        else:
            prims.append({
                "type": "plane",
                "axis": "xyz"[p.axis],
                "offset": p.offset,
                "extent": [list(e) for e in p.extent],
                "material": _material_dict(p.material),
            })
    out = {"primitives": prims, "background": _material_dict(scene.background)}
    if scene.far_depth is not None:
        out["far_depth"] = scene.far_depth
    if corruption is not None:
        out["corruption"] = asdict(corruption)
    return out


def scene_from_dict(d: dict) -> tuple[PrimitiveScene, CorruptionConfig]:
    prims = []
    for p in d["primitives"]:
        mat = Material.from_dict(p["material"])
        if p["type"] == "box":
            prims.append(Box(tuple(p["min"]), tuple(p["max"]), mat))
        elif p["type"] == "plane":
            prims.append(Plane(AXES[p["axis"]], float(p["offset"]), tuple(tuple(e) for e in p["extent"]), mat))
        else:
            raise ValueError(f"unknown primitive type {p['type']!r}")
    scene = PrimitiveScene(tuple(prims), Material.from_dict(d["background"]), d.get("far_depth"))
    corruption = CorruptionConfig(**d["corruption"]) if "corruption" in d else CorruptionConfig()
    return scene, corruption


def load_scene_config(path) -> tuple[PrimitiveScene, CorruptionConfig]:
    return scene_from_dict(json.loads(Path(path).read_text()))


def default_scene() -> PrimitiveScene:
    """Checkered floor with three boxes of distinct materials."""
    floor = Material((0.75, 0.7, 0.6), 0.7, 0.1, 0.5, (0.3, 0.35, 0.45), 0.4, 0.25)
    return PrimitiveScene(
        primitives=(
            Plane(1, 0.0, ((-1.0, 1.0), (-1.0, 1.0)), floor),
            Box((-0.7, 0.0, -0.6), (-0.2, 0.5, -0.1), Material((0.8, 0.25, 0.2), 0.35, 0.6)),
            Box((0.1, 0.0, -0.5), (0.6, 0.3, 0.0), Material((0.2, 0.6, 0.3), 0.8, 0.15, 0.25, (0.6, 0.8, 0.35), 0.55, 0.3)),
            Box((-0.3, 0.0, 0.2), (0.3, 0.7, 0.6), Material((0.25, 0.3, 0.75), 0.5, 0.75)),
        ),
        background=Material((0.5, 0.5, 0.5), 0.5, 0.2),
    )


# ----------------------------------------------------------------------------- ray casting


def cast_rays(scene: PrimitiveScene, origins: np.ndarray, dirs: np.ndarray):
    """First hit of each ray. Returns ``(t, primitive_index, normal)``; misses have t=inf, index -1."""
    origins = np.broadcast_to(np.asarray(origins, float), dirs.shape)
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    normal = np.zeros((n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        for k, prim in enumerate(scene.primitives):
            if isinstance(prim, Box):
                lo, hi = prim.bounds()
                t1 = (lo - origins) / dirs
                t2 = (hi - origins) / dirs
                tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
                tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
                tnear = tmin.max(axis=1)
                tfar = tmax.min(axis=1)
                axis = tmin.argmax(axis=1)
                hit = (tnear <= tfar) & (tnear > 0)
                t = np.where(hit, tnear, np.inf)
                nrm = np.zeros((n, 3))
                nrm[np.arange(n), axis] = -np.sign(dirs[np.arange(n), axis])
            else:
                a = prim.axis
                t = (prim.offset - origins[:, a]) / dirs[:, a]
                p = origins + t[:, None] * dirs
                hit = t > 0
                for b, (l, h) in zip([x for x in range(3) if x != a], prim.extent):
                    hit &= (p[:, b] >= l) & (p[:, b] <= h)
                t = np.where(hit, t, np.inf)
                nrm = np.zeros((n, 3))
                nrm[:, a] = -np.sign(dirs[:, a])
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_i = np.where(closer, k, best_i)
            normal[closer] = nrm[closer]
    return best_t, best_i, normal


def shade_materials(scene: PrimitiveScene, index: np.ndarray, points: np.ndarray, normals: np.ndarray):
    """Material maps at hit points; ``index == -1`` selects the background."""
    n = len(index)
    albedo = np.empty((n, 3))
    rough = np.empty(n)
    metal = np.empty(n)
    mats = [(-1, scene.background)] + list(enumerate(p.material for p in scene.primitives))
    for k, mat in mats:
        sel = index == k
        if not sel.any():
            continue
        albedo[sel], rough[sel], metal[sel] = mat.albedo, mat.roughness, mat.metallicity
        if mat.checker_size and k >= 0:
            # tile parity over the two in-face axes
            face_axis = np.abs(normals[sel]).argmax(axis=1)
            cells = np.floor(points[sel] / mat.checker_size).astype(np.int64)
            cells[np.arange(sel.sum()), face_axis] = 0
            odd = cells.sum(axis=1) % 2 == 1
            idx = np.flatnonzero(sel)[odd]
            albedo[idx] = mat.albedo2 if mat.albedo2 is not None else mat.albedo
            rough[idx] = mat.roughness2 if mat.roughness2 is not None else mat.roughness
            metal[idx] = mat.metallicity2 if mat.metallicity2 is not None else mat.metallicity
    return albedo, rough, metal


# ----------------------------------------------------------------------------- cameras


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``center`` looking at ``target`` (x right, y down, z forward)."""
    f = target - center
    f = f / np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, float))
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ center
    return E


def ring_cameras(scene: PrimitiveScene, count: int, size: tuple[int, int], rng, *,
                 radius_factor: float = 3.0, elevation_deg: float = 45.0, fov_deg: float = 25.0,
                 jitter: float = 1.0) -> list[Camera]:
    """Cameras on a jittered ring around the scene, all aimed at its centroid."""
    H, W = size
    c = scene.centroid()
    radius = radius_factor * scene.extent()
    f = 0.5 * W / np.tan(np.radians(fov_deg) / 2)
    K = np.array([[f, 0.0, (W - 1) / 2], [0.0, f, (H - 1) / 2], [0.0, 0.0, 1.0]])
    cams = []
    for k in range(count):
        az = 2 * np.pi * k / count + jitter * rng.uniform(-0.5, 0.5) * 2 * np.pi / count
        el = np.radians(elevation_deg + jitter * rng.uniform(-5.0, 5.0))
        r = radius * (1.0 + jitter * rng.uniform(-0.05, 0.05))
        pos = c + r * np.array([np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)])
        cams.append(Camera(K, look_at(pos, c), W, H))
    return cams


def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Camera center and world ray directions scaled so the ray parameter equals camera depth."""
    H, W = camera.height, camera.width
    rows, cols = np.mgrid[0:H, 0:W]
    pix = np.stack([cols.ravel(), rows.ravel(), np.ones(H * W)], axis=1).astype(float)
    d_cam = pix @ np.linalg.inv(camera.intrinsics).T
    return camera.center, d_cam @ camera.rotation


def render_view(scene: PrimitiveScene, camera: Camera):
    """Depth, world points, primitive index, normals and material maps for every pixel."""
    H, W = camera.height, camera.width
    origin, dirs = pixel_rays(camera)
    t, index, normal = cast_rays(scene, origin, dirs)
    far = scene.far_depth if scene.far_depth is not None else float(np.linalg.norm(origin - scene.centroid()) + 2 * scene.extent())
    miss = ~np.isfinite(t)
    t = np.where(miss, far, t)
    points = origin + t[:, None] * dirs
    albedo, rough, metal = shade_materials(scene, index, points, normal)
    return {
        "depth": t.reshape(H, W),
        "points": points.reshape(H, W, 3),
        "index": index.reshape(H, W),
        "normal": normal.reshape(H, W, 3),
        "albedo": albedo.reshape(H, W, 3),
        "roughness": rough.reshape(H, W, 1),
        "metallicity": metal.reshape(H, W, 1),
    }


def generate_scene(scene: PrimitiveScene, camera_count: int, image_size=(64, 64), seed: int = 0,
                   scene_id: str = "synthetic", **ring) -> SceneBundle:
    """Render a bundle with ground truth; predictions are left empty.

    World coordinates are re-expressed in the frame of camera 0.
    """
    H, W = image_size
    if camera_count < 1:
        raise ValueError("need at least one camera")
    if H < 16 or W < 16:
        raise ValueError("image size must be at least 16x16")
    rng = np.random.default_rng(seed)
    cams = ring_cameras(scene, camera_count, (H, W), rng, **ring)
    anchor = cams[0].extrinsics
    anchor_inv = np.linalg.inv(anchor)
    light = np.array([0.3, 0.9, 0.2]) / np.linalg.norm([0.3, 0.9, 0.2])

    views = []
    for cam in cams:
        r = render_view(scene, cam)
        pts = r["points"] @ anchor[:3, :3].T + anchor[:3, 3]
        E = cam.extrinsics @ anchor_inv
        E[3] = (0.0, 0.0, 0.0, 1.0)
        shading = 0.3 + 0.7 * np.clip(r["normal"] @ light, 0.0, None)
        shading[r["index"] < 0] = 1.0
        conf = np.where(r["index"] >= 0, 1.0, 0.9)
        views.append(ViewFrame(
            camera=Camera(cam.intrinsics, E, W, H),
            point_map=pts.astype(np.float32),
            depth=r["depth"].astype(np.float32),
            confidence=conf.astype(np.float32),
            gt={m: clamp_intrinsic(r[m]) for m in ("albedo", "roughness", "metallicity")},
            rgb=clamp_intrinsic(r["albedo"] * shading[..., None]),
        ))
    bundle = SceneBundle(views, scene_id, seed)
    bundle.validate()
    return bundle


def bias_field(shape, rng, amplitude: float, scale: float) -> np.ndarray:
    """Sum of three random low-frequency cosine modes, peak magnitude at most ``amplitude``."""
    H, W = shape
    rows, cols = np.mgrid[0:H, 0:W].astype(float)
    field_ = np.zeros((H, W))
    for _ in range(3):
        freq = rng.uniform(-1.0, 1.0, size=2) / scale
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(2 * np.pi * (freq[0] * cols + freq[1] * rows) + phase)
    return amplitude / 3.0 * field_


def corrupt_predictions(bundle: SceneBundle, corruption: CorruptionConfig | None = None, seed: int = 0) -> SceneBundle:
    """Fill predictions with view-dependent corrupted copies of the ground truth.

    Per view: channel gains and offsets, a smooth bias field, pixel noise and an
    optional constant outlier patch; a fraction of pixels additionally get a low
    point confidence and a displaced world point.
    """
    corruption = corruption or CorruptionConfig()
    c = corruption
    views = []
    for i, view in enumerate(bundle.views):
        if not view.gt:
            raise ValueError(f"view {i} has no ground truth")
        rng = np.random.default_rng(derive_seed(seed, i))
        H, W = view.shape
        bias = bias_field((H, W), rng, c.bias_amplitude, c.bias_scale)
        patch = None
        if rng.uniform() < c.outlier_prob and c.outlier_size > 0:
            s = min(c.outlier_size, H, W)
            r0, c0 = rng.integers(0, H - s + 1), rng.integers(0, W - s + 1)
            patch = (slice(r0, r0 + s), slice(c0, c0 + s))
        preds = {}
        for mod in ("albedo", "roughness", "metallicity"):
            if mod not in view.gt:
                continue
            gt = view.gt[mod].astype(np.float64)
            ch = gt.shape[-1]
            gain = rng.uniform(1 - c.gain, 1 + c.gain, size=ch)
            offset = rng.uniform(-c.offset, c.offset, size=ch)
            noise = c.noise * rng.standard_normal(gt.shape)
            pred = gain * gt + offset + bias[..., None] + noise
            if patch is not None:
                pred[patch] = rng.uniform(0.0, 1.0, size=ch)
            preds[mod] = clamp_intrinsic(pred)
        conf = view.confidence.copy()
        points = view.point_map.copy()
        if c.confidence_rate > 0:
            bad = rng.uniform(size=(H, W)) < c.confidence_rate
            n_bad = int(bad.sum())
            conf[bad] = rng.uniform(0.0, c.low_confidence_max, size=n_bad)
            scale = c.point_noise * _bundle_extent(bundle)
            points[bad] += (scale * rng.standard_normal((n_bad, 3))).astype(np.float32)
        views.append(view.replace(predictions=preds, confidence=conf.astype(np.float32), point_map=points))
    out = SceneBundle(views, bundle.scene_id, bundle.rng_seed)
    out.validate()
    return out


def _bundle_extent(bundle: SceneBundle) -> float:
    pts = bundle.views[0].point_map.reshape(-1, 3)
    return float(np.linalg.norm(np.percentile(pts, 95, axis=0) - np.percentile(pts, 5, axis=0)) / 2)


def make_synthetic_bundle(camera_count: int = 32, image_size=(64, 64), seed: int = 0,
                          scene: PrimitiveScene | None = None,
                          corruption: CorruptionConfig | None = None) -> SceneBundle:
    """Default scene rendered and corrupted with one seed."""
    scene = scene or default_scene()
    bundle = generate_scene(scene, camera_count, image_size, seed)
    return corrupt_predictions(bundle, corruption, derive_seed(seed, 0xC0FFEE))
