import numpy as np
import pytest

from stcalib.errors import DuplicateTimestamp, ParseError, TooFewKnots
from stcalib.geometry import SE3Pose, quat_log, quat_mul, quat_conj, rot_z, rotation_geodesic_deg
from stcalib.rig_sim import make_trajectory
from stcalib.trajectory import build_track, read_trajectory, write_trajectory


def P(R=np.eye(3), t=(0, 0, 0)):
    return SE3Pose.from_rt(R, t)


class TestBuild:
    def test_two_knots(self):
        tr = build_track([(0.0, P()), (1.0, P())])
        assert len(tr) == 2 and tr.t_first == 0.0 and tr.t_last == 1.0

    def test_duplicate(self):
        with pytest.raises(DuplicateTimestamp):
            build_track([(0.0, P()), (0.0, P())])

    def test_too_few(self):
        with pytest.raises(TooFewKnots):
            build_track([(0.0, P())])

    def test_unsorted_input_sorted(self):
        tr = build_track([(2.0, P(t=(2, 0, 0))), (0.0, P()), (1.0, P(t=(1, 0, 0)))])
        np.testing.assert_array_equal(tr.times, [0, 1, 2])
        np.testing.assert_array_equal(tr.translations[:, 0], [0, 1, 2])


class TestPoseAt:
    track = build_track([(0.0, P()), (1.0, P(rot_z(90), (2, 0, 0)))])

    def test_at_knot(self):
        p = self.track.pose_at(1.0)
        np.testing.assert_array_equal(p.translation, [2, 0, 0])
        assert rotation_geodesic_deg(p.R, rot_z(90)) < 1e-9

    def test_clamped(self):
        for t in (-5.0, -1e-3):
            p = self.track.pose_at(t)
            np.testing.assert_array_equal(p.translation, [0, 0, 0])
        np.testing.assert_array_equal(self.track.pose_at(7.0).translation, [2, 0, 0])

    def test_midpoint(self):
        p = self.track.pose_at(0.5)
        np.testing.assert_allclose(p.translation, [1, 0, 0], atol=1e-15)
        assert rotation_geodesic_deg(p.R, rot_z(45)) < 1e-9

    def test_continuous_at_knots(self):
        tr = make_trajectory("straight-arc", 4.0, 2.0, 10.0, 90.0)
        for t in tr.times[1:-1]:
            for eps in (1e-6, 1e-9):
                a, b = tr.pose_at(t - eps), tr.pose_at(t + eps)
                assert np.linalg.norm(a.translation - b.translation) < 10 * eps
                # a jump would show up as a fixed gap independent of eps
                assert rotation_geodesic_deg(a.R, b.R) < 1e3 * eps


class TestDerivative:
    def test_clamped_zero(self):
        tr = build_track([(0.0, P()), (1.0, P(rot_z(30), (1, 0, 0)))])
        v, w = tr.pose_time_derivative(3.0)
        assert not v.any() and not w.any()
        v, w = tr.pose_time_derivative(-3.0)
        assert not v.any() and not w.any()

    def test_translation(self):
        tr = build_track([(0.0, P()), (2.0, P(t=(4, 0, 0)))])
        v, w = tr.pose_time_derivative(1.0)
        np.testing.assert_allclose(v, [2, 0, 0])
        np.testing.assert_allclose(w, 0)

    def test_angular_velocity_against_finite_difference(self):
        tr = build_track([(0.0, P()), (1.0, P(rot_z(90)))])
        _, w = tr.pose_time_derivative(0.5)
        np.testing.assert_allclose(w, [0, 0, np.pi / 2], atol=1e-12)
        h = 1e-5
        geo = np.radians(rotation_geodesic_deg(tr.pose_at(0.5 + h).R, tr.pose_at(0.5 - h).R)) / (2 * h)
        assert geo == pytest.approx(np.pi / 2, rel=1e-6)

    def test_right_derivative_at_interior_knot(self):
        tr = build_track([(0.0, P()), (1.0, P(t=(1, 0, 0))), (2.0, P(t=(1, 3, 0)))])
        v, _ = tr.pose_time_derivative(1.0)
        np.testing.assert_allclose(v, [0, 3, 0])

    def test_matches_central_differences(self):
        tr = make_trajectory("s-curve", 6.0, 2.0, 5.0, 40.0)
        rng = np.random.default_rng(0)
        ts = rng.uniform(tr.t_first, tr.t_last, 100)
        h = 1e-6
        for t in ts:
            k = np.searchsorted(tr.times, t)
            if min(abs(t - tr.times[k - 1]), abs(tr.times[min(k, len(tr) - 1)] - t)) < 2 * h:
                continue
            v, w = tr.pose_time_derivative(t)
            a, b = tr.pose_at(t - h), tr.pose_at(t + h)
            np.testing.assert_allclose((b.translation - a.translation) / (2 * h), v, atol=1e-6)
            w_fd = quat_log(quat_mul(quat_conj(a.rotation), b.rotation)) / (2 * h)
            assert np.linalg.norm(w_fd - w) <= 1e-4 * max(np.linalg.norm(w), 1e-3)

    def test_vectorized_matches_scalar(self):
        tr = make_trajectory("arc", 3.0, 2.0, 10.0, 60.0)
        ts = np.linspace(-0.5, 3.5, 37)
        R, p, v, w = tr.evaluate(ts, derivatives=True)
        for i, t in enumerate(ts):
            pose = tr.pose_at(t)
            np.testing.assert_allclose(R[i], pose.R, atol=1e-12)
            np.testing.assert_allclose(p[i], pose.translation, atol=1e-12)
            vi, wi = tr.pose_time_derivative(t)
            np.testing.assert_allclose(v[i], vi, atol=1e-12)
            np.testing.assert_allclose(w[i], wi, atol=1e-12)


class TestFile:
    def test_round_trip_exact(self, tmp_path):
        tr = make_trajectory("s-curve", 2.0, 1.7, 10.0, 25.0)
        write_trajectory(tmp_path / "t.txt", tr)
        back = read_trajectory(tmp_path / "t.txt")
        np.testing.assert_array_equal(back.times, tr.times)
        np.testing.assert_array_equal(back.quats, tr.quats)
        np.testing.assert_array_equal(back.translations, tr.translations)

    def test_comments_and_errors(self, tmp_path):
        f = tmp_path / "t.txt"
        f.write_text("# header\n0 1 0 0 0 0 0 0\n1 1 0 0 0 1 0 0  # trailing\n")
        assert len(read_trajectory(f)) == 2
        f.write_text("0 1 0 0 0 0 0 0\n1 1 0 0\n")
        with pytest.raises(ParseError) as exc:
            read_trajectory(f)
        assert exc.value.line == 2
