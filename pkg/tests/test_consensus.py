import math

import numpy as np
import pytest

from geoid.consensus import (
    MAD_SCALE,
    build_view_targets,
    compute_consensus,
    compute_target_weight,
    segment_median,
    segment_weighted_median,
    split_holdout,
    weighted_median,
)
from geoid.geometry import Observations, voxelize
from geoid.pipeline import build_consensus
from geoid.scene import PipelineConfig, SceneBundle

from conftest import flat_view


def weighted_median_oracle(values, weights):
    """Definition: smallest v with sum(w[values <= v]) >= total / 2."""
    total = sum(weights)
    for v in sorted(values):
        if sum(w for x, w in zip(values, weights) if x <= v) >= total / 2:
            return v


def single_cell(values, confidence=None, channels=1):
    """One voxel seen once by each of ``len(values)`` views at pixel (0, 0)."""
    n = len(values)
    conf = np.ones(n) if confidence is None else np.asarray(confidence, float)
    obs = Observations(
        np.arange(n), np.zeros(n, np.int64), np.zeros(n, np.int64), np.full((n, 3), 0.5), conf
    )
    preds = [
        {"roughness": np.full((1, 1, channels), v, np.float64)} for v in values
    ]
    return voxelize(obs, 1.0), preds


@pytest.mark.parametrize(
    "values,weights,expected",
    [([0.2], [3.0], 0.2), ([0.1, 0.2, 0.9], [1, 1, 1], 0.2), ([1, 2, 3], [1, 1, 1], 2), ([1, 2, 3, 4], [1, 1, 1, 1], 2), ([1, 2, 3], [1, 1, 5], 3), ([5], [0.2], 5)],
)
def test_weighted_median_examples(values, weights, expected):
    assert weighted_median(values, weights) == expected


def test_weighted_median_random_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        v = rng.integers(0, 6, n).astype(float) if rng.random() < 0.5 else rng.normal(size=n)
        w = rng.integers(1, 4, n).astype(float) if rng.random() < 0.5 else rng.uniform(0.01, 1, n)
        assert weighted_median(v, w) == weighted_median_oracle(list(v), list(w))


def test_weighted_median_single_replacement():
    rng = np.random.default_rng(7)
    for _ in range(300):
        n = int(rng.integers(2, 8))
        v = rng.integers(0, 10, n).astype(float)
        w = rng.integers(1, 5, n).astype(float)
        k = int(rng.integers(0, n))
        v2 = v.copy()
        v2[k] = rng.choice([-100.0, 100.0])
        assert weighted_median(v2, w) == weighted_median_oracle(list(v2), list(w))
        assert weighted_median(v2, w) in v2


def test_weighted_median_errors():
    with pytest.raises(ValueError):
        weighted_median([], [])
    with pytest.raises(ValueError):
        weighted_median([1.0, 2.0], [1.0, 0.0])


def test_segmented_medians_match_scalar():
    rng = np.random.default_rng(1)
    sizes = rng.integers(1, 70, 300)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    v = rng.normal(size=offsets[-1]).round(1)
    w = rng.uniform(0.3, 1.0, offsets[-1])
    seg = segment_weighted_median(v, w, offsets)
    med = segment_median(v, offsets)
    for k in range(len(sizes)):
        sl = slice(offsets[k], offsets[k + 1])
        assert seg[k] == weighted_median(v[sl], w[sl])
        assert med[k] == np.median(v[sl])


def test_identical_predictions_give_zero_dispersion():
    grid, preds = single_cell([0.5, 0.5, 0.5])
    cons = compute_consensus(grid, preds, ["roughness"])
    assert cons.values["roughness"][0, 0] == 0.5
    assert cons.sigma["roughness"][0] == 0.0
    assert cons.inlier["roughness"].all()


def test_dispersion_example():
    # residuals around s = 0.5 are {0, 0.1, 0.2, 0.3, 0.3}; their median is 0.2
    grid, preds = single_cell([0.5, 0.6, 0.3, 0.8, 0.2])
    cons = compute_consensus(grid, preds, ["roughness"])
    assert cons.values["roughness"][0, 0] == pytest.approx(0.5)
    assert cons.sigma["roughness"][0] == pytest.approx(0.29652, abs=1e-12)


def test_outlier_rejected():
    rng = np.random.default_rng(2)
    vals = list(0.5 + rng.uniform(-0.02, 0.02, 8)) + [0.95]
    grid, preds = single_cell(vals)
    cons = compute_consensus(grid, preds, ["roughness"])
    s = cons.values["roughness"][0, 0]
    assert abs(s - 0.5) < 0.02
    inl = cons.inlier["roughness"]
    sub = grid.cell_observations(0)
    assert not inl[sub.view_index == 8].any()
    assert inl[sub.view_index != 8].all()
    assert cons.sigma_inlier["roughness"][0] <= cons.sigma["roughness"][0]


def test_consensus_uses_confidence_weights():
    grid, preds = single_cell([0.1, 0.2, 0.9], confidence=[0.4, 0.4, 1.0])
    cons = compute_consensus(grid, preds, ["roughness"])
    assert cons.values["roughness"][0, 0] == pytest.approx(0.9)


def test_multichannel_residual_is_channel_mean():
    obs = Observations(np.arange(3), np.zeros(3, np.int64), np.zeros(3, np.int64), np.full((3, 3), 0.5), np.ones(3))
    vals = [[0.1, 0.5, 0.9], [0.2, 0.5, 0.9], [0.3, 0.5, 0.6]]
    preds = [{"albedo": np.array(v, float).reshape(1, 1, 3)} for v in vals]
    cons = compute_consensus(voxelize(obs, 1.0), preds, ["albedo"])
    np.testing.assert_allclose(cons.values["albedo"][0], [0.2, 0.5, 0.9])
    resid = sorted([abs(0.1 - 0.2) / 3, 0.0, (0.1 + 0.3) / 3])
    assert cons.sigma["albedo"][0] == pytest.approx(MAD_SCALE * resid[1])


@pytest.mark.parametrize("a,b", [(0.0, 1.0), (0.1, 0.5), (0.2, 0.7)])
def test_consensus_affine_equivariance(a, b):
    rng = np.random.default_rng(3)
    vals = rng.uniform(0, 1, 7)
    g0, p0 = single_cell(vals)
    g1, p1 = single_cell(a + b * vals)
    c0 = compute_consensus(g0, p0, ["roughness"])
    c1 = compute_consensus(g1, p1, ["roughness"])
    assert c1.values["roughness"][0, 0] == pytest.approx(a + b * c0.values["roughness"][0, 0])
    assert c1.sigma["roughness"][0] == pytest.approx(b * c0.sigma["roughness"][0])


def test_target_weight_examples():
    w = compute_target_weight([3, 3], [0.1, 0.2])
    assert w[0] / w[1] == pytest.approx(0.2001 / 0.1001)
    assert compute_target_weight(3, 0.0) == pytest.approx(2.0 / 1e-4)
    assert compute_target_weight(2, 0.0) == pytest.approx(np.log2(3.0) / 1e-4)
    assert compute_target_weight(7, 0.1) > compute_target_weight(3, 0.1)


# ---------------------------------------------------------------------------- targets


def brute_force_targets(cons, bundle, eps_vis, mod):
    """Per view: set of (row, col, voxel) pairs passing the visibility rule."""
    out = []
    for view in bundle.views:
        H, W = view.shape
        hits = {}
        for k, c in enumerate(cons.centers):
            E, K = view.camera.extrinsics, view.camera.intrinsics
            q = E[:3, :3] @ c + E[:3, 3]
            z = q[2]
            if not z > 0:
                continue
            x, y, _ = K @ q / z
            r, cc = math.floor(y + 0.5), math.floor(x + 0.5)
            if 0 <= r < H and 0 <= cc < W:
                d = float(view.depth[r, cc])
                if abs(z - d) / d < eps_vis:
                    hits.setdefault((r, cc), []).append(k)
        out.append(hits)
    return out


def test_targets_match_brute_force(small_bundle):
    config = PipelineConfig(holdout_fraction=0.2)
    stage = build_consensus(small_bundle, config)
    cons = stage.consensus
    oracle = brute_force_targets(cons, small_bundle, config.eps_vis, "albedo")
    for i, per_mod in enumerate(stage.targets):
        t = per_mod["albedo"]
        assert set(zip(t.rows.tolist(), t.cols.tolist())) == set(oracle[i])
        for r, c, v in zip(t.rows, t.cols, t.voxel):
            assert v in oracle[i][(r, c)]
        pix = t.rows * small_bundle.views[i].shape[1] + t.cols
        assert np.all(np.diff(pix) > 0)


def test_target_weights_normalised(small_bundle):
    stage = build_consensus(small_bundle, PipelineConfig())
    for per_mod in stage.targets:
        for t in per_mod.values():
            g = ~t.holdout
            if g.any():
                assert t.weights[g].mean() == pytest.approx(1.0)
                assert np.all(t.weights > 0)


def test_target_values_copy_consensus(small_bundle):
    stage = build_consensus(small_bundle, PipelineConfig())
    t = stage.targets[0]["albedo"]
    np.testing.assert_array_equal(t.values, stage.consensus.values["albedo"][t.voxel])
    np.testing.assert_array_equal(t.holdout, np.isin(t.voxel, stage.holdout.ids))


def test_voxel_behind_camera_has_no_target():
    front = flat_view(8, 6, depth=2.0)
    cons_bundle = SceneBundle([front, front])
    stage = build_consensus(cons_bundle, PipelineConfig(delta=0.3))
    flipped = np.diag([-1.0, 1.0, -1.0, 1.0])
    behind = front.replace(camera=type(front.camera)(front.camera.intrinsics, flipped, 8, 6))
    targets = build_view_targets(stage.consensus, SceneBundle([behind]), 0.05)
    assert len(targets[0]["albedo"]) == 0


def test_single_view_has_no_consensus():
    stage = build_consensus(SceneBundle([flat_view()]), PipelineConfig())
    assert stage.degenerate
    assert all(len(t) == 0 for t in stage.targets[0].values())


# ---------------------------------------------------------------------------- holdout


def _fake_consensus(n):
    obs = Observations(
        np.repeat([0, 1], n), np.zeros(2 * n, np.int64), np.zeros(2 * n, np.int64),
        np.repeat(np.arange(n, dtype=float)[:, None] * np.ones(3), 2, axis=0), np.ones(2 * n),
    )
    preds = [{"roughness": np.zeros((1, 1, 1))}, {"roughness": np.zeros((1, 1, 1))}]
    return compute_consensus(voxelize(obs, 0.5), preds, ["roughness"])


def test_holdout_size():
    guide, hold = split_holdout(_fake_consensus(10), 0.2, 0)
    assert len(hold) == 2 and len(guide) == 8


def test_holdout_partition():
    cons = _fake_consensus(37)
    sizes = set()
    for seed in range(100):
        guide, hold = split_holdout(cons, 0.2, seed)
        g, h = set(guide.ids.tolist()), set(hold.ids.tolist())
        assert not g & h and g | h == set(range(37))
        sizes.add(len(h))
    assert sizes == {7}
    a = split_holdout(cons, 0.2, 5)[1].ids
    b = split_holdout(cons, 0.2, 5)[1].ids
    np.testing.assert_array_equal(a, b)
