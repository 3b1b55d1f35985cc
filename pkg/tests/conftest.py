import numpy as np
import pytest

from geoid.scene import Camera, SceneBundle, ViewFrame
from geoid.synthetic import make_synthetic_bundle

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def simple_camera(width=8, height=6, f=10.0, E=None):
    K = np.array([[f, 0.0, (width - 1) / 2], [0.0, f, (height - 1) / 2], [0.0, 0.0, 1.0]])
    return Camera(K, np.eye(4) if E is None else E, width, height)


def flat_view(width=8, height=6, depth=2.0, value=0.5, camera=None, with_gt=True):
    """Fronto-parallel wall at constant depth seen by an identity camera."""
    cam = camera or simple_camera(width, height)
    rows, cols = np.mgrid[0:height, 0:width]
    K = cam.intrinsics
    x = (cols - K[0, 2]) / K[0, 0] * depth
    y = (rows - K[1, 2]) / K[1, 1] * depth
    pts = np.stack([x, y, np.full_like(x, depth, dtype=float)], axis=-1)
    preds = {
        "albedo": np.full((height, width, 3), value, np.float32),
        "roughness": np.full((height, width, 1), value, np.float32),
        "metallicity": np.full((height, width, 1), value, np.float32),
    }
    return ViewFrame(
        camera=cam,
        point_map=pts.astype(np.float32),
        depth=np.full((height, width), depth, np.float32),
        confidence=np.ones((height, width), np.float32),
        predictions=preds,
        gt={k: v.copy() for k, v in preds.items()} if with_gt else {},
    )


@pytest.fixture
def tiny_bundle():
    return SceneBundle([flat_view(2, 2)], "tiny", 7)


@pytest.fixture(scope="session")
def small_bundle():
    return make_synthetic_bundle(8, (32, 32), seed=3)
