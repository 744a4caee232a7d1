"""Tests for relative pose error metrics and the comparison table."""

import numpy as np
import pytest

from statvio.errors import MismatchedDatasets, NoAssociation, TooFewPoses
from statvio.evaluation import (
    ComparisonTable,
    RpeReport,
    Trajectory,
    compare,
    relative_pose,
    rpe,
)
from statvio.geometry import Pose, Rotation3, se3_exp, so3_exp

RNG = np.random.default_rng(2718)


def random_pose(rng) -> Pose:
    return Pose(so3_exp(rng.uniform(-1.0, 1.0, 3)), rng.uniform(-2.0, 2.0, 3))


def make_trajectory(n=20, rng=None, dt=0.05):
    rng = rng or RNG
    t = np.arange(n) * dt
    poses = [random_pose(rng) for _ in range(n)]
    return Trajectory(t=t, poses=poses)


class TestRelativePose:
    def test_same_pose_is_identity(self):
        T = random_pose(RNG)
        rel = relative_pose(T, T)
        np.testing.assert_allclose(rel.matrix(), np.eye(4), atol=1e-12)

    def test_identity_reference(self):
        T = random_pose(RNG)
        rel = relative_pose(Pose.identity(), T)
        np.testing.assert_allclose(rel.matrix(), T.matrix(), atol=1e-14)

    def test_inverse_symmetry(self):
        a, b = random_pose(RNG), random_pose(RNG)
        fwd = relative_pose(a, b)
        bwd = relative_pose(b, a)
        np.testing.assert_allclose(fwd.compose(bwd).matrix(), np.eye(4), atol=1e-12)


class TestRpe:
    def test_identical_trajectories(self):
        traj = make_trajectory()
        report = rpe(traj, traj)
        assert report.trans_rmse_cm == 0.0
        assert report.rot_rmse_deg == pytest.approx(0.0, abs=1e-9)
        assert report.pairs == len(traj) - 1

    def test_constant_world_offset_is_invisible(self):
        gt = make_trajectory()
        offset = np.array([5.0, -2.0, 1.0])
        est = Trajectory(t=gt.t, poses=[Pose(p.rotation, p.translation + offset)
                                        for p in gt.poses])
        report = rpe(est, gt)
        assert report.trans_rmse_cm < 1e-10

    def test_common_rigid_transform_is_invisible(self):
        gt = make_trajectory()
        g = random_pose(RNG)
        est = Trajectory(t=gt.t, poses=[g.compose(p) for p in gt.poses])
        gt2 = Trajectory(t=gt.t, poses=[g.compose(p) for p in gt.poses])
        base = rpe(est, gt)        # g applied to est only: errors appear
        both = rpe(est, gt2)       # g applied to both: invariant
        assert both.trans_rmse_cm < 1e-10
        assert both.rot_rmse_deg < 1e-7
        assert base.trans_rmse_cm >= both.trans_rmse_cm

    def test_alternating_translation_hand_computed(self):
        n = 11
        t = np.arange(n) * 0.1
        gt = Trajectory(t=t, poses=[Pose.identity() for _ in range(n)])
        est_poses = []
        for k in range(n):
            off = np.array([0.01, 0.0, 0.0]) if k % 2 else np.zeros(3)
            est_poses.append(Pose(Rotation3.identity(), off))
        est = Trajectory(t=t, poses=est_poses)
        report = rpe(est, gt)
        np.testing.assert_allclose(report.trans_errors_cm, np.ones(n - 1), atol=1e-12)
        assert report.trans_rmse_cm == pytest.approx(1.0)
        assert report.rot_rmse_deg == pytest.approx(0.0, abs=1e-9)

    def test_rotation_error_degrees(self):
        n = 3
        t = np.arange(n) * 0.1
        gt = Trajectory(t=t, poses=[Pose.identity() for _ in range(n)])
        step = so3_exp(np.array([0.0, 0.0, np.radians(2.0)]))
        est = Trajectory(t=t, poses=[Pose.identity(),
                                     Pose(step, np.zeros(3)),
                                     Pose.identity()])
        report = rpe(est, gt)
        np.testing.assert_allclose(report.rot_errors_deg, [2.0, 2.0], atol=1e-9)

    def test_no_association(self):
        gt = make_trajectory()
        est = Trajectory(t=gt.t + 10.0, poses=gt.poses)
        with pytest.raises(NoAssociation):
            rpe(est, gt)

    def test_too_few_poses(self):
        gt = make_trajectory()
        est = Trajectory(t=np.array([0.0, 7.77]), poses=[gt.poses[0], random_pose(RNG)])
        with pytest.raises(TooFewPoses):
            rpe(est, gt)

    def test_clamp_never_activates_on_clean_data(self):
        for _ in range(20):
            gt = make_trajectory(rng=np.random.default_rng(int(RNG.integers(1e6))))
            est = Trajectory(t=gt.t, poses=[
                p.compose(se3_exp(RNG.normal(0, 1e-3, 6))) for p in gt.poses])
            report = rpe(est, gt)
            assert report.clamp_activations == 0

    def test_rmse_recomputable_from_series(self):
        gt = make_trajectory()
        est = Trajectory(t=gt.t, poses=[
            p.compose(se3_exp(RNG.normal(0, 1e-2, 6))) for p in gt.poses])
        report = rpe(est, gt)
        np.testing.assert_allclose(report.trans_rmse_cm,
                                   np.sqrt(np.mean(report.trans_errors_cm ** 2)))
        np.testing.assert_allclose(report.rot_rmse_deg,
                                   np.sqrt(np.mean(report.rot_errors_deg ** 2)))


class TestCompare:
    def test_identical_reports_zero_change(self):
        rep = RpeReport.from_rmse(0.5, 0.1, sequence="s")
        table = compare({"baseline": rep, "phase2": rep})
        assert table.row("phase2").trans_change_pct == pytest.approx(0.0)
        assert table.row("phase2").rot_change_pct == pytest.approx(0.0)

    def test_published_v101_numbers(self):
        # baseline 0.276 cm vs phase2 0.255 cm must yield -7.6 +/- 0.1 percent
        table = compare({
            "baseline": RpeReport.from_rmse(0.276, 0.059, sequence="V1_01"),
            "phase2": RpeReport.from_rmse(0.255, 0.045, sequence="V1_01"),
        })
        assert table.row("phase2").trans_change_pct == pytest.approx(-7.6, abs=0.1)

    def test_missing_mode_renders_partial_table(self):
        table = compare({
            "phase1": RpeReport.from_rmse(0.4, 0.08, sequence="s"),
            "phase2": RpeReport.from_rmse(0.3, 0.06, sequence="s"),
        })
        assert [r.mode for r in table.rows] == ["phase1", "phase2"]
        assert all(r.trans_change_pct is None for r in table.rows)
        text = table.format_text()
        assert "baseline" not in text

    def test_mismatched_sequences(self):
        with pytest.raises(MismatchedDatasets):
            compare({
                "baseline": RpeReport.from_rmse(0.3, 0.05, sequence="a"),
                "phase2": RpeReport.from_rmse(0.2, 0.04, sequence="b"),
            })

    def test_csv_round_trip(self, tmp_path):
        table = compare({
            "baseline": RpeReport.from_rmse(0.276, 0.059, sequence="V1_01"),
            "phase2": RpeReport.from_rmse(0.255, 0.045, sequence="V1_01"),
        })
        out = tmp_path / "cmp.csv"
        table.to_csv(out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "mode,sequence,trans_rmse_cm,rot_rmse_deg,pairs"
        assert len(lines) == 3
        assert lines[1].startswith("baseline,V1_01,0.276")


class TestTrajectoryCsv:
    def test_round_trip(self, tmp_path):
        traj = make_trajectory(n=5)
        path = tmp_path / "traj.csv"
        with open(path, "w") as fh:
            fh.write("t,px,py,pz,qw,qx,qy,qz,vx,vy,vz\n")
            for t, p in zip(traj.t, traj.poses):
                q = p.rotation.as_quaternion()
                row = [t, *p.translation, *q, 0.0, 0.0, 0.0]
                fh.write(",".join(format(x, ".17g") for x in row) + "\n")
        loaded = Trajectory.load_csv(path)
        assert len(loaded) == 5
        report = rpe(loaded, traj)
        assert report.trans_rmse_cm < 1e-10
