import numpy as np
import pytest

from dvokit import bundled, fileio
from dvokit.cli import main
from dvokit.geometry import Pose6D, pose_from_matrix


@pytest.fixture()
def pair_files(tmp_path):
    ref_img, ref_depth, src_img, pose, k = bundled.small_motion_pair(11)
    ref = tmp_path / "ref.pgm"
    depth = tmp_path / "depth.pfm"
    src = tmp_path / "src.pgm"
    fileio.write_pgm(ref, ref_img)
    fileio.write_pfm(depth, ref_depth.values)
    fileio.write_pgm(src, src_img)
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"camera.fx = {k.fx}\ncamera.fy = {k.fy}\ncamera.cx = {k.cx}\ncamera.cy = {k.cy}\n")
    return ref, depth, src, pose, cfg


class TestOdometry:
    def test_identity_for_same_image(self, pair_files, capsys):
        ref, depth, _, _, cfg = pair_files
        code = main(["odometry", str(ref), str(depth), str(ref), "--config", str(cfg)])
        assert code == 0
        row = capsys.readouterr().out.splitlines()[0]
        T = np.array([float(v) for v in row.split()]).reshape(3, 4)
        assert np.max(np.abs(T - np.eye(4)[:3])) < 1e-6

    def test_recovers_bundled_pose(self, pair_files, capsys):
        ref, depth, src, pose, cfg = pair_files
        code = main(["odometry", str(ref), str(depth), str(src), "--config", str(cfg)])
        assert code == 0
        row = capsys.readouterr().out.splitlines()[0]
        T = np.array([float(v) for v in row.split()]).reshape(3, 4)
        got = pose_from_matrix(T)
        # 8-bit PGM quantization limits the accuracy; tolerances are loose
        # relative to the float-image solver checks.
        assert np.linalg.norm(got.t - pose.t) < 0.05 * np.linalg.norm(pose.t) + 1e-4
        assert np.linalg.norm(got.omega - pose.omega) < 2e-3

    def test_writes_trajectory_file(self, pair_files, tmp_path, capsys):
        ref, depth, src, _, cfg = pair_files
        out = tmp_path / "traj.txt"
        code = main(["odometry", str(ref), str(depth), str(src),
                     "--config", str(cfg), "--trajectory", str(out)])
        assert code == 0
        mats = fileio.read_trajectory(out)
        assert len(mats) == 2
        assert np.array_equal(mats[0], np.eye(4))

    def test_truncated_pfm_exit_1(self, pair_files, tmp_path, capsys):
        ref, depth, src, _, cfg = pair_files
        blob = depth.read_bytes()
        bad = tmp_path / "bad.pfm"
        bad.write_bytes(blob[: len(blob) // 2])
        code = main(["odometry", str(ref), str(bad), str(src), "--config", str(cfg)])
        assert code == 1
        err = capsys.readouterr().err
        assert "byte offset" in err
        assert "bad.pfm" in err

    def test_missing_file_exit_1(self, pair_files, capsys):
        ref, depth, _, _, cfg = pair_files
        assert main(["odometry", str(ref), str(depth), "/nonexistent.pgm"]) == 1


GRADCHECK_CFG = (
    "gradcheck.instances = 2\n"
    "gradcheck.width = 16\n"
    "gradcheck.height = 16\n"
)


class TestGradcheck:
    def test_default_passes(self, tmp_path, capsys):
        cfg = tmp_path / "g.cfg"
        cfg.write_text(GRADCHECK_CFG)
        code = main(["gradcheck", "--config", str(cfg), "--seed", "0"])
        out = capsys.readouterr().out
        assert code == 0
        assert "FAIL" not in out
        assert "solver depth (full chain)" in out

    def test_partial_chain_mode(self, tmp_path, capsys):
        cfg = tmp_path / "g.cfg"
        cfg.write_text(GRADCHECK_CFG + "ddvo.grad_through_jacobian = false\n")
        code = main(["gradcheck", "--config", str(cfg), "--seed", "0"])
        out = capsys.readouterr().out
        assert code == 0
        assert "skipped" in out
        assert "frozen Jacobian" in out

    def test_seeded_report_identical(self, tmp_path, capsys):
        cfg = tmp_path / "g.cfg"
        cfg.write_text(GRADCHECK_CFG)
        main(["gradcheck", "--config", str(cfg), "--seed", "3"])
        first = capsys.readouterr().out
        main(["gradcheck", "--config", str(cfg), "--seed", "3"])
        second = capsys.readouterr().out
        assert first == second


DEMO_CFG = (
    "train.steps = 3\n"
    "train.lr = 0.01\n"
    "ddvo.unroll_iters = 2\n"
    "ddvo.levels = 2\n"
    "dvo.levels = 2\n"
)


class TestTrainDemo:
    def test_writes_trace_and_depth(self, tmp_path, capsys):
        cfg = tmp_path / "t.cfg"
        cfg.write_text(DEMO_CFG)
        out = tmp_path / "trace.csv"
        code = main(["train-demo", "--mode", "fixed-pose-gt", "--normalize", "on",
                     "--config", str(cfg), "--out", str(out)])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "step,total,appearance,prior,mean_inv_depth,gt_error"
        assert len(lines) == 4
        depth = fileio.read_pfm(tmp_path / "trace_depth.pfm")
        assert depth.shape == (64, 80)

    def test_normalized_mean_column_pinned(self, tmp_path, capsys):
        cfg = tmp_path / "t.cfg"
        cfg.write_text(DEMO_CFG)
        out = tmp_path / "trace.csv"
        main(["train-demo", "--mode", "ddvo", "--normalize", "on",
              "--config", str(cfg), "--out", str(out)])
        for line in out.read_text().strip().splitlines()[1:]:
            mean = float(line.split(",")[4])
            assert abs(mean - 1.0) < 1e-9

    def test_seeded_runs_byte_identical(self, tmp_path, capsys):
        cfg = tmp_path / "t.cfg"
        cfg.write_text(DEMO_CFG)
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        for out in (a, b):
            main(["train-demo", "--mode", "dvo-em", "--normalize", "off",
                  "--config", str(cfg), "--out", str(out)])
        assert a.read_bytes() == b.read_bytes()

    def test_bad_mode_rejected(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["train-demo", "--mode", "cnn", "--out", str(tmp_path / "x.csv")])


class TestEval:
    def make_pfms(self, tmp_path, pred, gt):
        p = tmp_path / "pred.pfm"
        g = tmp_path / "gt.pfm"
        fileio.write_pfm(p, pred)
        fileio.write_pfm(g, gt)
        return p, g

    def test_identical_depths_zero_row(self, tmp_path, capsys):
        gt = np.random.default_rng(0).uniform(1.0, 5.0, size=(8, 8)).astype(np.float32)
        p, g = self.make_pfms(tmp_path, gt, gt)
        assert main(["eval", str(p), str(g)]) == 0
        header, row = capsys.readouterr().out.strip().splitlines()
        assert header.startswith("abs_rel")
        vals = [float(v) for v in row.split(",")]
        assert vals[:4] == [0.0, 0.0, 0.0, 0.0]
        assert vals[4:] == [1.0, 1.0, 1.0]

    def test_align_removes_global_scale(self, tmp_path, capsys):
        gt = np.random.default_rng(1).uniform(1.0, 5.0, size=(8, 8)).astype(np.float32)
        p, g = self.make_pfms(tmp_path, 2.0 * gt, gt)
        assert main(["eval", str(p), str(g), "--align"]) == 0
        row = capsys.readouterr().out.strip().splitlines()[1]
        assert float(row.split(",")[0]) < 1e-6

    def test_three_pixel_fixture(self, tmp_path, capsys):
        p, g = self.make_pfms(
            tmp_path, np.array([[1.0, 1.0, 4.0]]), np.array([[1.0, 2.0, 4.0]])
        )
        assert main(["eval", str(p), str(g)]) == 0
        row = capsys.readouterr().out.strip().splitlines()[1]
        vals = [float(v) for v in row.split(",")]
        assert abs(vals[0] - 1.0 / 6.0) < 1e-7
        assert abs(vals[4] - 2.0 / 3.0) < 1e-12

    def test_no_valid_pixels_exit_2(self, tmp_path, capsys):
        p, g = self.make_pfms(
            tmp_path, np.ones((2, 2)), np.full((2, 2), -1.0)
        )
        assert main(["eval", str(p), str(g)]) == 2


class TestEvalAte:
    def test_identical_trajectories(self, tmp_path, capsys):
        mats = [Pose6D(np.array([float(i), 0.0, 0.0]), np.zeros(3)).matrix()
                for i in range(6)]
        a = tmp_path / "a.txt"
        b = tmp_path / "b.txt"
        fileio.write_trajectory(a, mats)
        fileio.write_trajectory(b, mats)
        assert main(["eval-ate", str(a), str(b)]) == 0
        row = capsys.readouterr().out.strip().splitlines()[1]
        mean, std = (float(v) for v in row.split(","))
        assert mean < 1e-12
        assert std < 1e-12

    def test_length_mismatch_exit_2(self, tmp_path, capsys):
        mats = [Pose6D(np.array([float(i), 0.0, 0.0]), np.zeros(3)).matrix()
                for i in range(6)]
        a = tmp_path / "a.txt"
        b = tmp_path / "b.txt"
        fileio.write_trajectory(a, mats)
        fileio.write_trajectory(b, mats[:-1])
        assert main(["eval-ate", str(a), str(b)]) == 2


# Round-trip recovery of a 1%-depth motion needs a reasonably wide field
# of view; smaller grids make translation/rotation poorly separable.
# Depth relief also matters: a fronto-parallel plane leaves translation
# and rotation nearly indistinguishable at this field of view.
SYNTH_CFG = (
    "scene.kind = smooth-height-field\n"
    "scene.width = 128\n"
    "scene.height = 96\n"
)


class TestSynth:
    def test_deterministic_outputs(self, tmp_path, capsys):
        cfg = tmp_path / "s.cfg"
        cfg.write_text(SYNTH_CFG)
        d1 = tmp_path / "one"
        d2 = tmp_path / "two"
        for d in (d1, d2):
            assert main(["synth", "--out", str(d), "--config", str(cfg),
                         "--seed", "5"]) == 0
        for name in ("ref.pgm", "ref.pfm", "ref_depth.pfm", "view1.pfm",
                     "view2.pgm", "poses.txt"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_generated_pair_passes_odometry(self, tmp_path, capsys):
        cfg = tmp_path / "s.cfg"
        cfg.write_text(SYNTH_CFG)
        d = tmp_path / "scene"
        assert main(["synth", "--out", str(d), "--config", str(cfg),
                     "--seed", "2"]) == 0
        capsys.readouterr()
        gt = pose_from_matrix(fileio.read_trajectory(d / "poses.txt")[0])
        code = main(["odometry", str(d / "ref.pfm"), str(d / "ref_depth.pfm"),
                     str(d / "view1.pfm")])
        assert code == 0
        row = capsys.readouterr().out.splitlines()[0]
        got = pose_from_matrix(
            np.array([float(v) for v in row.split()]).reshape(3, 4)
        )
        assert np.linalg.norm(got.t - gt.t) < 0.1 * np.linalg.norm(gt.t)


class TestThreadCap:
    def test_invalid_value_exit_1(self, monkeypatch, tmp_path, capsys):
        monkeypatch.setenv("DDVO_THREADS", "lots")
        p = tmp_path / "x.pfm"
        fileio.write_pfm(p, np.ones((2, 2)))
        assert main(["eval", str(p), str(p)]) == 1

    def test_cap_accepted(self, monkeypatch, tmp_path, capsys):
        monkeypatch.setenv("DDVO_THREADS", "1")
        p = tmp_path / "x.pfm"
        fileio.write_pfm(p, np.ones((2, 2)))
        assert main(["eval", str(p), str(p)]) == 0
