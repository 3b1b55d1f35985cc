"""On-disk bundle format.

A bundle is a directory holding ``manifest.json`` plus one raw array file per
array. Raw array files start with a 16-byte little-endian header::

    magic "GIDB" | u8 version=1 | u8 channels | u16 reserved=0 | u32 height | u32 width

followed by a row-major, channel-interleaved float32 payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .scene import MODALITIES, BundleError, Camera, SceneBundle, ViewFrame

MAGIC = b"GIDB"
VERSION = 1
_HEADER = struct.Struct("<4sBBHII")
MANIFEST = "manifest.json"


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected a 2D or 3D array, got shape {arr.shape}")
    h, w, c = arr.shape
    if not 1 <= c <= 255:
        raise ValueError(f"channel count {c} not representable")
    header = _HEADER.pack(MAGIC, VERSION, c, 0, h, w)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_array(data: bytes, name: str = "array") -> np.ndarray:
    """Decode a GIDB blob into a float32 ``(H, W, C)`` array."""
    if len(data) < _HEADER.size:
        raise BundleError(f"{name}: truncated header")
    magic, version, c, reserved, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION or reserved != 0:
        raise BundleError(f"{name}: bad GIDB header")
    expected = _HEADER.size + 4 * h * w * c
    if len(data) != expected:
        raise BundleError(f"{name}: payload is {len(data)} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w, c)
    return arr.astype(np.float32)


def write_array(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_array(arr))


def read_array(path, name: str | None = None) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise BundleError(f"{name or path.name}: missing file {path}")
    return decode_array(path.read_bytes(), name or path.name)


def _view_arrays(view: ViewFrame) -> dict[str, np.ndarray]:
    arrays = {
        "point_map": view.point_map,
        "depth": view.depth,
        "confidence": view.confidence,
    }
    if view.depth_confidence is not None:
        arrays["depth_confidence"] = view.depth_confidence
    if view.rgb is not None:
        arrays["rgb"] = view.rgb
    for mod in MODALITIES:
        if mod in view.predictions:
            arrays[f"pred_{mod}"] = view.predictions[mod]
    for mod in MODALITIES:
        if mod in view.gt:
            arrays[f"gt_{mod}"] = view.gt[mod]
    return arrays


def save_bundle(bundle: SceneBundle, path) -> None:
    """Write ``bundle`` to directory ``path``. Output bytes depend only on the bundle."""
    bundle.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    views = []
    for i, view in enumerate(bundle.views):
        files = {}
        for name, arr in _view_arrays(view).items():
            fname = f"view{i:04d}_{name}.gidb"
            write_array(root / fname, arr)
            files[name] = fname
        entry = {
            "width": int(view.camera.width),
            "height": int(view.camera.height),
            "K": [float(x) for x in view.camera.intrinsics.ravel()],
            "E": [float(x) for x in view.camera.extrinsics.ravel()],
            "modalities": [m for m in MODALITIES if m in view.predictions],
            "files": files,
        }
        gt_mods = [m for m in MODALITIES if m in view.gt]
        if gt_mods:
            entry["gt_modalities"] = gt_mods
        views.append(entry)
    manifest = {"scene_id": bundle.scene_id, "seed": int(bundle.rng_seed), "views": views}
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (root / MANIFEST).write_text(text, encoding="utf-8")


def load_bundle(path) -> SceneBundle:
    """Read and validate a bundle directory."""
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise BundleError(f"missing manifest {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleError(f"malformed manifest: {exc}") from exc

    views = []
    for i, entry in enumerate(manifest.get("views", [])):
        try:
            width, height = int(entry["width"]), int(entry["height"])
            K = np.array(entry["K"], dtype=np.float64).reshape(3, 3)
            E = np.array(entry["E"], dtype=np.float64).reshape(4, 4)
            files = entry["files"]
        except (KeyError, ValueError, TypeError) as exc:
            raise BundleError(f"view {i}: malformed manifest entry ({exc})") from exc

        def get(name, squeeze=False, required=True):
            if name not in files:
                if required:
                    raise BundleError(f"view {i}: array '{name}' not listed in manifest")
                return None
            arr = read_array(root / files[name], f"view {i}: array '{name}'")
            if arr.shape[:2] != (height, width):
                raise BundleError(
                    f"view {i}: array '{name}' is {arr.shape[:2]}, expected {(height, width)}"
                )
            return arr[:, :, 0] if squeeze else arr

        predictions = {m: get(f"pred_{m}") for m in entry.get("modalities", [])}
        gt = {m: get(f"gt_{m}") for m in entry.get("gt_modalities", [])}
        views.append(
            ViewFrame(
                camera=Camera(K, E, width, height),
                point_map=get("point_map"),
                depth=get("depth", squeeze=True),
                confidence=get("confidence", squeeze=True),
                predictions=predictions,
                gt=gt,
                rgb=get("rgb", required=False),
                depth_confidence=get("depth_confidence", squeeze=True, required=False),
            )
        )
    bundle = SceneBundle(views, str(manifest.get("scene_id", "scene")), int(manifest.get("seed", 0)))
    bundle.validate()
    return bundle
