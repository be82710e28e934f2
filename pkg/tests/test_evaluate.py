import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sceneloc.data import Frame
from sceneloc.evaluate import (
    PAPER_ALPHAS,
    EvalReport,
    FrameResult,
    GroundTruthPredictor,
    alpha_sweep,
    evaluate,
    export_trajectory,
    load_trajectory,
    localize_frame,
    median,
    summarize,
)
from sceneloc.geometry import Pose
from sceneloc.keypoints import NoSurvivors
from sceneloc.network import NetworkConfig, build_network
from sceneloc.synthetic import frames_from_views, make_dataset


@pytest.fixture(scope="module")
def scene():
    ds = make_dataset(seed=8, n_train=0, n_test=6)
    return ds, frames_from_views(ds.test, ds.intrinsics)


class ConstantPredictor:
    """Every patch predicts the same point: PnP cannot succeed."""

    def predict(self, frame):
        h, w = frame.image.shape[:2]
        return np.ones((3, h // 8, w // 8)), np.full((64, h // 8, w // 8), 0.5)


class TestMedian:
    def test_odd(self):
        assert median([1.0, 3.0, 2.0]) == 2.0

    def test_even(self):
        assert median([4.0, 1.0, 3.0, 2.0]) == 2.5

    def test_empty(self):
        assert median([]) is None

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40))
    def test_sort_oracle(self, vals):
        s = sorted(vals)
        n = len(s)
        expect = s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
        assert median(vals) == pytest.approx(expect, rel=1e-12, abs=1e-9)


class TestSummarize:
    def test_example(self):
        rows = [FrameResult(f"f{i}", True, float(c), 0.1 * c, survivors=5) for i, c in enumerate([1, 2, 3])]
        rep = summarize(rows, 0.8)
        assert rep.median_translation_cm == 2.0 and rep.failures == 0

    def test_failures_excluded(self):
        rows = [FrameResult("a", True, 1.0, 1.0), FrameResult("b", False), FrameResult("c", True, 3.0, 2.0)]
        rep = summarize(rows, 0.8)
        assert rep.median_translation_cm == 2.0 and rep.median_rotation_deg == 1.5 and rep.failures == 1

    def test_all_failed(self):
        rep = summarize([FrameResult("a", False), FrameResult("b", False)], 0.8)
        assert rep.median_translation_cm is None and rep.median_rotation_deg is None
        assert rep.failures == 2


class TestEvaluate:
    def test_bypass_is_accurate(self, scene):
        _, frames = scene
        rep = evaluate(GroundTruthPredictor(), frames, 0.8)
        assert rep.failures == 0
        assert rep.median_rotation_deg < 0.1 and rep.median_translation_cm < 1.0

    def test_permutation_invariant(self, scene):
        _, frames = scene
        a = evaluate(GroundTruthPredictor(), frames, 0.8)
        b = evaluate(GroundTruthPredictor(), frames[::-1], 0.8)
        assert a.to_text() == b.to_text()

    def test_all_fail(self, scene):
        _, frames = scene
        rep = evaluate(ConstantPredictor(), frames, 0.8)
        assert rep.failures == len(frames)
        assert rep.median_translation_cm is None
        assert all(not f.localized and f.failure for f in rep.frames)

    def test_untrained_model_never_crashes(self, scene):
        _, frames = scene
        rep = evaluate(build_network(NetworkConfig(spatial_depth=1)), frames[:2], 0.8)
        assert len(rep.frames) == 2

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(GroundTruthPredictor(), [], 0.8)

    def test_text_round_trip(self, scene):
        _, frames = scene
        rep = evaluate(GroundTruthPredictor(), frames, 0.8)
        text = rep.to_text()
        assert EvalReport.from_text(text).to_text() == text
        assert text.index('"summary"') < text.index('"per_frame"')

    def test_localize_frame_diagnostics(self, scene):
        _, frames = scene
        pose, diag = localize_frame(GroundTruthPredictor(), frames[0], 0.8)
        assert diag.inliers <= diag.survivors
        assert diag.mean_residual_px < 1.0
        np.testing.assert_allclose(pose.camera_center(), frames[0].pose.camera_center(), atol=0.01)

    def test_localize_frame_raises(self, scene):
        _, frames = scene

        class Nan:
            def predict(self, frame):
                return np.zeros((3, 32, 32)), np.full((64, 32, 32), np.nan)

        with pytest.raises(NoSurvivors):
            localize_frame(Nan(), frames[0], 0.8)


class TestAlphaSweep:
    def test_alpha_zero_keeps_every_patch(self, scene):
        _, frames = scene
        rows = alpha_sweep(GroundTruthPredictor(), frames[:2], [0.0])
        assert rows[0].survivors == [32 * 32, 32 * 32]

    def test_paper_range(self):
        assert PAPER_ALPHAS == (0.7, 0.75, 0.8, 0.85, 0.9, 0.95)

    def test_monotone(self, scene):
        _, frames = scene

        class Noisy(GroundTruthPredictor):
            def predict(self, frame):
                coord, conf = super().predict(frame)
                rng = np.random.default_rng(len(frame.name))
                return coord, np.clip(conf * 0.5 + rng.uniform(0, 0.5, conf.shape), 0, 1 - 1e-6)

        rows = alpha_sweep(Noisy(), frames[:3], list(PAPER_ALPHAS))
        for a, b in zip(rows, rows[1:]):
            assert all(x >= y for x, y in zip(a.survivors, b.survivors))

    def test_range_check(self, scene):
        with pytest.raises(ValueError):
            alpha_sweep(GroundTruthPredictor(), scene[1], [1.5])


class TestTrajectory:
    def report_for(self, poses):
        rows = [FrameResult(f"f{i}", True, 0.0, 0.0, rotation=p.rotation.tolist(),
                            translation=p.translation.tolist()) for i, p in enumerate(poses)]
        return summarize(rows, 0.8)

    def test_identity_centre(self, tmp_path):
        p = Pose.identity()
        frames = [Frame.in_memory("f0", np.zeros((8, 8, 3)), p, None)]
        path = export_trajectory(self.report_for([p]), frames, tmp_path / "t.txt")
        gt, est = load_trajectory(path)["f0"]
        np.testing.assert_array_equal(gt, 0.0)
        np.testing.assert_array_equal(est, 0.0)

    def test_translation_centre(self, tmp_path):
        p = Pose(np.eye(3), [1, 2, 3])
        frames = [Frame.in_memory("f0", np.zeros((8, 8, 3)), p, None)]
        gt, _ = load_trajectory(export_trajectory(self.report_for([p]), frames, tmp_path / "t.txt"))["f0"]
        np.testing.assert_array_equal(gt, [-1, -2, -3])

    def test_round_trip(self, scene, tmp_path):
        _, frames = scene
        rep = evaluate(GroundTruthPredictor(), frames, 0.8)
        traj = load_trajectory(export_trajectory(rep, frames, tmp_path / "t.txt"))
        for f in frames:
            np.testing.assert_allclose(traj[f.name][0], f.pose.camera_center(), atol=1e-9)

    def test_failed_frame_nan(self, scene, tmp_path):
        _, frames = scene
        rep = summarize([FrameResult(frames[0].name, False)], 0.8)
        _, est = load_trajectory(export_trajectory(rep, frames, tmp_path / "t.txt"))[frames[0].name]
        assert np.isnan(est).all()
