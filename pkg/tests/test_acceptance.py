"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 7 trains the full network three times on CPU and dominates the
runtime of this file.
"""
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from sceneloc.ba_trainer import (
    Observation,
    Track,
    TrainConfig,
    ba_loss,
    total_loss,
    train,
)
from sceneloc.data import coordinate_centroid, image_statistics
from sceneloc.evaluate import GroundTruthPredictor, evaluate
from sceneloc.geometry import (
    Intrinsics,
    PointBehindCamera,
    Pose,
    angle_error,
    angle_error_deg,
    project,
    random_rotation,
    rotation_from_rotvec,
    translation_error,
)
from sceneloc.keypoints import (
    PatchIndex,
    SelectionConfig,
    dynamic_threshold,
    patch_confidence,
    select_correspondences,
)
from sceneloc.network import (
    CONF_EPS,
    NetworkConfig,
    build_network,
    count_parameters,
    forward,
)
from sceneloc.pnp import Correspondences, RansacConfig, ransac_pnp, refine_pose
from sceneloc.synthetic import OracleProviders, frames_from_views, make_dataset

from .conftest import random_pose
from .test_keypoints import brute_select

SCENE_DIAMETER = 3.0 * np.sqrt(3.0)  # diagonal of the 3 m cube

# end-to-end run. alpha, beta, gamma and spatial_depth are fixed by the
# criterion; the rest is the tuned recipe (TrainConfig defaults). The cap of
# 1500 steps is about an hour per run on one CPU core.
SCENE_SEED = 7
WEIGHT_SEED = 0
PALETTE = "spatial"
TRAIN = TrainConfig(steps=1500, alpha=0.8, beta=100.0, gamma=0.25, plateau_window=250, plateau_tol=0.01,
                    log_every=100)


def say(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")


# -- 1 -----------------------------------------------------------------------

def test_criterion_1_geometry(capsys):
    t0 = time.perf_counter()
    k = Intrinsics(100.0, 100.0, 64.0, 64.0)
    ident = Pose.identity()
    checks = [
        angle_error(np.eye(3), np.eye(3)) == 0.0,
        abs(angle_error(np.eye(3), rotation_from_rotvec([0, 0, np.pi / 2])) - 0.5) < 1e-12,
        abs(angle_error(np.eye(3), rotation_from_rotvec([np.pi, 0, 0])) - 1.0) < 1e-12,
        translation_error([1, 2, 3], [1, 2, 3]) == 0.0,
        translation_error([1, 2, 2], [0, 0, 0]) == 3.0,
        translation_error([0, 0, 0], [0, -4, 3]) == 5.0,
        np.array_equal(project(k, ident, [0, 0, 2]), [64.0, 64.0]),
        np.array_equal(project(k, ident, [1, 0, 2]), [114.0, 64.0]),
    ]
    try:
        project(k, Pose(np.eye(3), [0, 0, -1]), [0, 0, 0.5])
        checks.append(False)
    except PointBehindCamera:
        checks.append(True)

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        r = random_rotation(rng)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        theta = rng.uniform(0, np.pi)
        got = angle_error(r, r @ rotation_from_rotvec(theta * axis)) * np.pi
        worst = max(worst, abs(got - theta))
    elapsed = time.perf_counter() - t0
    ok = all(checks) and worst < 1e-6 and elapsed < 10.0
    say(capsys, 1, ok, f"{sum(checks)}/{len(checks)} examples, round-trip max err {worst:.2e}, {elapsed:.2f}s")
    assert ok


# -- 2 -----------------------------------------------------------------------

def pnp_trials():
    k = Intrinsics(200.0, 200.0, 128.0, 128.0)
    rows = []
    for trial in range(100):
        rng = np.random.default_rng(5000 + trial)
        pose = random_pose(rng)
        world = rng.uniform(-1.5, 1.5, (200, 3))
        pix = project(k, pose, world) + rng.normal(0.0, 0.5, (200, 2))
        n_out = 60  # 30% of 200
        pix[:n_out] = rng.uniform(0, 256, (n_out, 2))
        est = ransac_pnp(Correspondences(pix, world), k, RansacConfig(inlier_threshold_px=2.0, rng_seed=trial))
        inl = Correspondences(pix[est.inlier_mask], world[est.inlier_mask])
        refined = refine_pose(est.pose, inl, k)
        rows.append((angle_error_deg(pose.rotation, refined.rotation),
                     translation_error(pose.translation, refined.translation),
                     refined.rotation.tobytes() + refined.translation.tobytes()))
    return rows


@pytest.fixture(scope="module")
def pnp_run():
    t0 = time.perf_counter()
    rows = pnp_trials()
    return rows, time.perf_counter() - t0


def test_criterion_2_pnp(pnp_run, capsys):
    rows, elapsed = pnp_run
    good = sum(a < 0.5 and t < 0.01 * SCENE_DIAMETER for a, t, _ in rows)
    ok = good >= 99 and elapsed < 60.0
    say(capsys, 2, ok, f"{good}/100 trials within 0.5 deg and 1% of diameter, {elapsed:.1f}s")
    assert ok


# -- 3 -----------------------------------------------------------------------

def test_criterion_3_keypoints(capsys):
    rng = np.random.default_rng(3)
    equal = 0
    for _ in range(100):
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        coord = rng.normal(size=(3, h, w))
        conf = rng.uniform(0, 1 - CONF_EPS, (64, h, w))
        got = select_correspondences(coord, conf, SelectionConfig(0.7), (8 * h, 8 * w))
        expect = brute_select(coord, conf, 0.7)
        same = len(got) == len(expect) and all(
            tuple(g.pixel) == px and tuple(g.world) == wd and g.confidence == cf
            for g, (px, wd, cf) in zip(got, expect))
        equal += same

    coord = rng.normal(size=(3, 8, 8))
    conf = rng.uniform(0, 1 - CONF_EPS, (64, 8, 8))
    counts = [len(select_correspondences(coord, conf, SelectionConfig(a), (64, 64)))
              for a in np.linspace(0.0, 1.0, 21)]
    monotone = all(a >= b for a, b in zip(counts, counts[1:]))

    grid = np.array([0.2, 1.0])
    c = patch_confidence(conf)
    endpoints = (abs(dynamic_threshold(grid, 0.75) - 0.8) < 1e-12
                 and dynamic_threshold(c, 0.0) == c.min() and dynamic_threshold(c, 1.0) == c.max())
    ok = equal == 100 and monotone and endpoints
    say(capsys, 3, ok, f"{equal}/100 match brute force, sweep counts {counts[0]}..{counts[-1]} "
                       f"monotone={monotone}, endpoints={endpoints}")
    assert ok


# -- 4 -----------------------------------------------------------------------

def test_criterion_4_loss_gradients(capsys):
    k = Intrinsics(200.0, 200.0, 128.0, 128.0)
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        n_views, n_pts = int(rng.integers(2, 5)), int(rng.integers(1, 6))
        poses = {i: random_pose(rng, 3.0) for i in range(n_views)}
        maps = {i: np.zeros((3, 2, 3)) for i in range(n_views)}
        tracks = []
        for p in range(n_pts):
            y = rng.uniform(-0.5, 0.5, 3)
            obs = []
            for i in range(n_views):
                u, v = p % 3, p // 3
                yi = y + rng.normal(0, 0.1, 3)
                maps[i][:, v, u] = yi
                px = project(k, poses[i], yi) + rng.normal(0, 2, 2)
                obs.append(Observation(i, PatchIndex(u, v), tuple(px)))
            tracks.append(Track(obs))
        tmaps = {i: torch.tensor(m, requires_grad=True) for i, m in maps.items()}
        ba_loss(tracks, tmaps, poses, k).backward()
        for t in tracks:
            for o in t.observations:
                for c in range(3):
                    idx = (c, o.patch.v, o.patch.u)
                    up, down = maps[o.image].copy(), maps[o.image].copy()
                    up[idx] += 1e-6
                    down[idx] -= 1e-6
                    f_up = float(ba_loss(tracks, {**maps, o.image: up}, poses, k))
                    f_down = float(ba_loss(tracks, {**maps, o.image: down}, poses, k))
                    fd = (f_up - f_down) / 2e-6
                    g = tmaps[o.image].grad[idx].item()
                    worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-6))
    example = total_loss(0.5, 0.01, 4.0)
    ok = worst <= 1e-4 and abs(example - 2.5) < 1e-12
    say(capsys, 4, ok, f"max relative gradient error {worst:.2e} over 20 configurations, total_loss example {example}")
    assert ok


# -- 5 -----------------------------------------------------------------------

def test_criterion_5_network(capsys):
    model = build_network(NetworkConfig(weight_seed=5))
    coord, conf = forward(model, np.zeros((512, 640, 3), np.uint8))
    shapes = coord.shape == (3, 64, 80) and conf.shape == (64, 64, 80)

    # adversarial: push the confidence logits up and down as far as gradient ascent goes
    x = torch.randn(1, 3, 64, 64, requires_grad=True)
    lo, hi = np.inf, -np.inf
    for sign in (1.0, -1.0):
        for _ in range(10):
            with torch.no_grad():
                _, c = model(x)
            lo, hi = min(lo, float(c.min())), max(hi, float(c.max()))
            (sign * model.forward_raw(x)[1].sum()).backward()
            with torch.no_grad():
                x += 50.0 * x.grad.sign()
                x.grad = None
    extremes = [torch.full((1, 3, 32, 32), v) for v in (1e6, -1e6)]
    for e in extremes:
        with torch.no_grad():
            _, c = model(e)
        lo, hi = min(lo, float(c.min())), max(hi, float(c.max()))
    in_range = lo >= 0.0 and hi < 1.0

    n2 = count_parameters(build_network(NetworkConfig(spatial_depth=2)))
    n4 = count_parameters(build_network(NetworkConfig(spatial_depth=4)))
    delta_ok = n4 - n2 == 2 * (512 * 512 + 512)

    net = build_network(NetworkConfig(spatial_depth=2, weight_seed=1)).double()
    gen = torch.Generator().manual_seed(2)
    xin = torch.randn(1, 3, 32, 32, generator=gen, dtype=torch.float64)
    wts = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)

    def loss():
        return (net(xin)[0] * wts).sum()

    net.zero_grad()
    loss().backward()
    params = list(net.parameters())
    rng = np.random.default_rng(3)
    checked, worst = 0, 0.0
    while checked < 12:
        p = params[rng.integers(len(params))]
        if p.grad is None:
            continue  # confidence-only parameters
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        g = p.grad[idx].item()
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + 1e-6
            up = loss().item()
            p[idx] = old - 1e-6
            down = loss().item()
            p[idx] = old
        fd = (up - down) / 2e-6
        if abs(g) < 1e-8 and abs(fd) < 1e-8:
            continue
        worst = max(worst, abs(fd - g) / max(abs(g), abs(fd)))
        checked += 1
    fd_ok = worst <= 1e-3
    ok = shapes and in_range and delta_ok and fd_ok
    say(capsys, 5, ok, f"shapes={shapes}, conf range [{lo:.3g}, {hi:.6f}], param delta {n4 - n2}, "
                       f"FD max rel err {worst:.1e}")
    assert ok


# -- 6 -----------------------------------------------------------------------

def test_criterion_6_bypass(capsys):
    # at 256x256 the +-0.5 px keypoint quantisation alone costs ~0.03 deg, so the
    # isolation check runs at a resolution where that floor sits under the bound
    t0 = time.perf_counter()
    ds = make_dataset(seed=6, n_train=0, n_test=50, size=(1024, 1280), focal=880.0)
    rep = evaluate(GroundTruthPredictor(), frames_from_views(ds.test, ds.intrinsics), 0.8)
    elapsed = time.perf_counter() - t0
    ok = (rep.failures == 0 and rep.median_rotation_deg < 1e-2
          and rep.median_translation_cm / 100.0 < 1e-3 and elapsed < 120.0)
    small = make_dataset(seed=6, n_train=0, n_test=10)
    low = evaluate(GroundTruthPredictor(), frames_from_views(small.test, small.intrinsics), 0.8)
    say(capsys, 6, ok, f"50 views at 1024x1280: {rep.median_rotation_deg:.4f} deg, "
                       f"{rep.median_translation_cm * 10:.3f} mm, {rep.failures} failures, {elapsed:.0f}s "
                       f"(256x256 for reference: {low.median_rotation_deg:.4f} deg, "
                       f"{low.median_translation_cm * 10:.3f} mm)")
    assert ok


# -- 7 and 8 -----------------------------------------------------------------

def end_to_end(gamma, log_path):
    ds = make_dataset(seed=SCENE_SEED, palette=PALETTE)
    frames = frames_from_views(ds.train, ds.intrinsics)
    mean, std = image_statistics(frames)
    model = build_network(NetworkConfig(spatial_depth=4, coordinate_offset=tuple(coordinate_centroid(frames)),
                                        weight_seed=WEIGHT_SEED, image_mean=tuple(mean), image_std=tuple(std)))
    t0 = time.perf_counter()
    res = train(model, frames, OracleProviders(ds.train, seed=TRAIN.data_seed), replace(TRAIN, gamma=gamma),
                log_path=log_path)
    elapsed = time.perf_counter() - t0
    report = evaluate(model, frames_from_views(ds.test, ds.intrinsics), 0.8)
    return report, log_path.read_text(), len(res.history), elapsed


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    d = tmp_path_factory.mktemp("e2e")
    return {"ba": end_to_end(0.25, d / "ba.jsonl"), "no_ba": end_to_end(0.0, d / "no_ba.jsonl")}


def _fmt(rep):
    if rep.median_translation_cm is None:
        return f"all {rep.failures} frames failed"
    return (f"{rep.median_translation_cm / 100:.3f} m / {rep.median_rotation_deg:.2f} deg, "
            f"{rep.failures} failures")


def test_criterion_7_end_to_end(runs, capsys):
    rep, _, steps, elapsed = runs["ba"]
    base, _, base_steps, _ = runs["no_ba"]
    bound_t = 0.05 * SCENE_DIAMETER
    ok_abs = (rep.median_translation_cm is not None and rep.median_translation_cm / 100 < bound_t
              and rep.median_rotation_deg < 5.0)
    # a run with no localized frame has unbounded error
    t_ba = rep.median_translation_cm if rep.median_translation_cm is not None else np.inf
    t_base = base.median_translation_cm if base.median_translation_cm is not None else np.inf
    ok_rel = t_ba <= 1.2 * t_base
    ok = ok_abs and ok_rel
    say(capsys, 7, ok, f"gamma=0.25: {_fmt(rep)} after {steps} steps ({elapsed / 60:.0f} min); "
                       f"gamma=0: {_fmt(base)} after {base_steps} steps; bound {bound_t:.3f} m / 5 deg")
    assert ok


def test_criterion_8_determinism(pnp_run, runs, tmp_path, capsys):
    again = pnp_trials()
    pnp_same = [r[2] for r in again] == [r[2] for r in pnp_run[0]]
    rep, log, _, _ = runs["ba"]
    rep2, log2, _, _ = end_to_end(0.25, tmp_path / "ba_again.jsonl")
    same_log = log == log2
    same_report = rep.to_text() == rep2.to_text()
    ok = pnp_same and same_log and same_report
    n = len(log.splitlines())
    say(capsys, 8, ok, f"PnP poses identical={pnp_same}, {n}-line loss log identical={same_log}, "
                       f"report identical={same_report}")
    assert ok
