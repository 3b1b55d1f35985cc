"""Acceptance suite. Each criterion records one PASS/FAIL line in the terminal summary."""

import math
import time

import numpy as np
import pytest

from geoid.consensus import ViewTargets, weighted_median
from geoid.experiment import reports_to_json, run_experiment
from geoid.geometry import check_visibility, median_nn_distance
from geoid.guidance import ToyDenoiser, consensus_loss, guided_sample
from geoid.io import load_bundle, save_bundle
from geoid.metrics import consistency_mad
from geoid.pipeline import build_consensus, run_pipeline
from geoid.scene import MODALITIES, PipelineConfig, SceneBundle
from geoid.synthetic import (
    Box,
    CorruptionConfig,
    Material,
    Plane,
    PrimitiveScene,
    default_scene,
    make_synthetic_bundle,
    ring_cameras,
)

from conftest import ACCEPTANCE_LINES
from test_consensus import weighted_median_oracle
from test_geometry import brute_force_median_nn
from test_metrics import brute_force_mad

VIEW_COUNTS = (4, 8, 16, 32)
SEEDS = 5
BUNDLE_VIEWS = 40
RUNTIME_BUDGET = 120.0


def record(number, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def experiment():
    start = time.perf_counter()
    bundle = make_synthetic_bundle(BUNDLE_VIEWS, (64, 64), seed=0)
    reports = run_experiment(bundle, VIEW_COUNTS, SEEDS, PipelineConfig())
    elapsed = time.perf_counter() - start
    return {r.num_views: r for r in reports}, elapsed


def test_criterion_1_consistency_improvement(experiment):
    reports, elapsed = experiment
    lower = all(
        reports[V].mad["guided"][m]["mean"] < reports[V].mad["unguided"][m]["mean"]
        for V in VIEW_COUNTS for m in MODALITIES
    )
    g = reports[32].mad["guided"]["albedo"]["mean"]
    u = reports[32].mad["unguided"]["albedo"]["mean"]
    reduction = 1.0 - g / u
    ok = lower and reduction >= 0.10 and elapsed < RUNTIME_BUDGET
    record(1, "held-out MAD guided < unguided at every V; albedo V=32 reduction >= 10%; < 2 min", ok,
           f"albedo V=32 {u:.4f} -> {g:.4f}, reduction {100 * reduction:.1f}%, {elapsed:.1f}s")


def test_criterion_2_view_count_trend(experiment):
    reports, _ = experiment
    pairs = {m: (reports[4].mad["guided"][m]["mean"], reports[32].mad["guided"][m]["mean"]) for m in MODALITIES}
    ok = all(b <= a for a, b in pairs.values())
    detail = ", ".join(f"{m} {a:.4f}->{b:.4f}" for m, (a, b) in pairs.items())
    record(2, "guided MAD at V=32 <= V=4 for every modality", ok, detail)


def test_criterion_3_quality_preservation(experiment):
    reports, _ = experiment
    worst_psnr, worst_rmse = -math.inf, -math.inf
    for V in VIEW_COUNTS:
        q = reports[V].quality
        for m in MODALITIES:
            worst_psnr = max(worst_psnr, q["unguided"][m]["psnr"]["mean"] - q["guided"][m]["psnr"]["mean"])
            worst_rmse = max(worst_rmse, q["guided"][m]["rmse"]["mean"] - q["unguided"][m]["rmse"]["mean"])
    ok = worst_psnr <= 0.5 and worst_rmse <= 0.01
    record(3, "guided PSNR >= unguided - 0.5 dB and RMSE <= unguided + 0.01", ok,
           f"worst PSNR drop {worst_psnr:+.3f} dB, worst RMSE rise {worst_rmse:+.4f}")


# ---------------------------------------------------------------------------- criterion 4


def _ray_hit(scene, origin, direction):
    """First-hit ray parameter against the scene's primitives, scalar arithmetic only."""
    best = math.inf
    for prim in scene.primitives:
        if isinstance(prim, Box):
            t0, t1 = -math.inf, math.inf
            for a in range(3):
                if direction[a] == 0.0:
                    if not prim.lo[a] <= origin[a] <= prim.hi[a]:
                        t0, t1 = math.inf, -math.inf
                    continue
                ta = (prim.lo[a] - origin[a]) / direction[a]
                tb = (prim.hi[a] - origin[a]) / direction[a]
                t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
            if t0 <= t1 and t0 > 0:
                best = min(best, t0)
        else:
            a = prim.axis
            if direction[a] == 0.0:
                continue
            t = (prim.offset - origin[a]) / direction[a]
            if t <= 0:
                continue
            others = [k for k in range(3) if k != a]
            inside = all(lo <= origin[k] + t * direction[k] <= hi for k, (lo, hi) in zip(others, prim.extent))
            if inside:
                best = min(best, t)
    return best


def _zbuffer(scene, cam):
    K_inv = np.linalg.inv(cam.intrinsics)
    R = cam.rotation
    C = cam.center
    lo, hi = scene.bounds()
    far = float(np.linalg.norm(C - 0.5 * (lo + hi)) + 2 * 0.5 * np.linalg.norm(hi - lo))
    z = np.empty((cam.height, cam.width))
    for r in range(cam.height):
        for c in range(cam.width):
            d = R.T @ (K_inv @ np.array([c, r, 1.0]))
            t = _ray_hit(scene, C, d)
            z[r, c] = far if math.isinf(t) else t
    return z


def test_criterion_4_oracle_equivalences():
    rng = np.random.default_rng(0)
    wm_ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        v = rng.integers(0, 6, n).astype(float) if rng.random() < 0.5 else rng.normal(size=n)
        w = rng.integers(1, 4, n).astype(float) if rng.random() < 0.5 else rng.uniform(0.01, 1, n)
        wm_ok &= weighted_median(v, w) == weighted_median_oracle(list(v), list(w))

    bundle = make_synthetic_bundle(6, (32, 32), seed=1)
    stage = build_consensus(bundle, PipelineConfig())
    preds = [v.predictions for v in bundle.views]
    mad = consistency_mad(preds, stage.holdout)
    mad_ok = all(mad[m] == brute_force_mad(preds, stage.holdout, m) for m in MODALITIES)

    # z-buffer oracle: independent ray casting in the original world frame
    scene = default_scene()
    clean = make_synthetic_bundle(6, (32, 32), seed=1, corruption=CorruptionConfig.zero())
    cams = ring_cameras(scene, 6, (32, 32), np.random.default_rng(1))
    to_world = np.linalg.inv(cams[0].extrinsics)
    centers = build_consensus(clean, PipelineConfig()).consensus.centers
    agree = total = 0
    for cam, view in zip(cams, clean.views):
        zbuf = _zbuffer(scene, cam)
        for c in centers:
            p = to_world[:3, :3] @ c + to_world[:3, 3]
            q = cam.rotation @ p + cam.translation
            expected = False
            if q[2] > 0:
                x, y, _ = cam.intrinsics @ q / q[2]
                col, row = math.floor(x + 0.5), math.floor(y + 0.5)
                if 0 <= row < cam.height and 0 <= col < cam.width:
                    expected = abs(q[2] - zbuf[row, col]) / zbuf[row, col] < 0.05
            agree += check_visibility(c, view, 0.05) == expected
            total += 1
    vis_rate = agree / total

    pts = rng.normal(size=(500, 3))
    nn_err = abs(median_nn_distance(pts) - brute_force_median_nn(pts))
    ok = wm_ok and mad_ok and vis_rate >= 0.999 and nn_err < 1e-9
    record(4, "oracle equivalences", ok,
           f"weighted_median exact={wm_ok}, MAD exact={mad_ok}, visibility agreement {100 * vis_rate:.3f}% "
           f"of {total} pairs, nn error {nn_err:.1e}")


def test_criterion_5_gradient_correctness():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        H, W, C = int(rng.integers(3, 7)), int(rng.integers(3, 7)), int(rng.choice([1, 3]))
        T = int(rng.integers(5, 60))
        d = ToyDenoiser(rng.uniform(0, 1, (H, W, C)), T, rho0=rng.uniform(0.5, 2.0), prior_scale=rng.uniform(0.05, 0.5))
        x = d.init_latent(int(rng.integers(0, 100)), int(rng.integers(0, 1000)))
        t = int(rng.integers(0, T))
        n = int(rng.integers(1, H * W))
        pix = rng.choice(H * W, n, replace=False)
        targets = ViewTargets(0, "albedo", pix // W, pix % W, rng.uniform(0, 1, (n, C)),
                              rng.uniform(0.1, 5.0, n), np.zeros(n, bool), np.arange(n))
        _, g = consensus_loss(d.predict_clean(x, t), targets)
        analytic = d.pullback(x, t, g)
        fd = np.zeros_like(x)
        h = 1e-6
        for idx in np.ndindex(x.shape):
            e = np.zeros_like(x)
            e[idx] = h
            fd[idx] = (consensus_loss(d.predict_clean(x + e, t), targets)[0]
                       - consensus_loss(d.predict_clean(x - e, t), targets)[0]) / (2 * h)
        worst = max(worst, np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-12))
    record(5, "pullback gradient vs central differences on 20 instances", worst < 1e-4,
           f"max relative error {worst:.2e}")


def test_criterion_6_fixed_points():
    mat = Material((0.6, 0.4, 0.3), 0.45, 0.2)
    scene = default_scene()
    uniform = PrimitiveScene(
        tuple(
            Box(p.lo, p.hi, mat) if isinstance(p, Box) else Plane(p.axis, p.offset, p.extent, mat)
            for p in scene.primitives
        ),
        mat,
    )
    bundle = make_synthetic_bundle(8, (32, 32), seed=2, scene=uniform, corruption=CorruptionConfig.zero())
    config = PipelineConfig(seed=2)
    guided = run_pipeline(bundle, config)
    unguided = run_pipeline(bundle, config, guide=False)
    err = 0.0
    for g, u, v in zip(guided.guided, unguided.guided, bundle.views):
        for m in MODALITIES:
            err = max(err, float(np.abs(g[m] - v.gt[m]).max()), float(np.abs(u[m] - v.gt[m]).max()))

    base = bundle.views[3].predictions["albedo"]
    a, _ = guided_sample(ToyDenoiser(base), None, seed=11, view_index=3)
    b, _ = guided_sample(ToyDenoiser(base), ViewTargets.empty(3, "albedo", 3), seed=11, view_index=3)
    bit_identical = a.tobytes() == b.tobytes()
    single = SceneBundle(bundle.views[:1])
    bit_identical &= all(
        x[m].tobytes() == y[m].tobytes()
        for x, y in zip(run_pipeline(single, config).guided, run_pipeline(single, config, guide=False).guided)
        for m in x
    )
    ok = err <= 1e-6 and bit_identical
    record(6, "zero corruption gives guided = unguided = gt; empty targets bit-identical", ok,
           f"max error {err:.1e}, bit-identical={bit_identical}")


def test_criterion_7_schedule_ablation():
    bundle = make_synthetic_bundle(16, (64, 64), seed=0)
    stage = build_consensus(bundle, PipelineConfig())
    targets = stage.targets[0]["albedo"]
    base = bundle.views[0].predictions["albedo"]

    def final_loss(fraction):
        out, _ = guided_sample(ToyDenoiser(base), targets, fraction=fraction, seed=0)
        return consensus_loss(out, targets)[0]

    losses = {f: final_loss(f) for f in (1.0, 0.8, 0.2)}
    repeat = final_loss(0.8) == losses[0.8]
    ok = losses[1.0] <= losses[0.8] <= losses[0.2] and repeat
    record(7, "final loss ordering fraction 1.0 <= 0.8 <= 0.2", ok,
           ", ".join(f"{f}: {v:.4f}" for f, v in losses.items()))


def test_criterion_8_determinism_and_format(tmp_path):
    def files(root):
        return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    config = PipelineConfig(seed=3)
    outputs = []
    for k in range(2):
        bundle = make_synthetic_bundle(8, (32, 32), seed=4)
        save_bundle(bundle, tmp_path / f"bundle{k}")
        result = run_pipeline(bundle, config)
        save_bundle(bundle.with_predictions(result.guided), tmp_path / f"guided{k}")
        report = reports_to_json(run_experiment(bundle, [4, 8], 2, config.replace(num_steps=10)))
        outputs.append(report)
    same_bundle = files(tmp_path / "bundle0") == files(tmp_path / "bundle1")
    same_preds = files(tmp_path / "guided0") == files(tmp_path / "guided1")
    same_report = outputs[0] == outputs[1]
    save_bundle(load_bundle(tmp_path / "bundle0"), tmp_path / "roundtrip")
    round_trip = files(tmp_path / "bundle0") == files(tmp_path / "roundtrip")
    ok = same_bundle and same_preds and same_report and round_trip
    record(8, "byte-identical bundles, predictions and reports; byte-exact round trip", ok,
           f"bundles={same_bundle}, predictions={same_preds}, reports={same_report}, round trip={round_trip}")
