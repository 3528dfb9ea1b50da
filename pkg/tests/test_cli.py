"""Test the command-line interface."""

import json

import numpy as np
import pytest

from specpose.cli import EXIT_OK, EXIT_VALIDATION, main
from specpose.codebook import build_codebook
from specpose.geometry import CameraIntrinsics, Pose
from specpose.harness import make_synthetic_dataset, save_dataset, save_predictions
from specpose.utils import PoseIO, TensorIO


def _json_out(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


class TestUsage:
    """Test argument handling and exit codes."""

    def test_no_command(self):
        """Test a bare invocation is a usage error."""
        assert main([]) == EXIT_VALIDATION

    def test_unknown_flag(self):
        """Test unknown flags exit with the validation code."""
        assert main(["--bogus"]) == EXIT_VALIDATION

    def test_help(self, capsys):
        """Test help exits cleanly."""
        assert main(["--help"]) == EXIT_OK
        assert "selftest" in capsys.readouterr().out

    def test_global_flag_before_subcommand(self, capsys):
        """Test --pretty given before the subcommand is kept."""
        assert main(["--pretty", "meshes"]) == EXIT_OK

        out = capsys.readouterr().out
        assert "pulley_with_screw" in out
        assert not out.lstrip().startswith("{")


class TestPoseCommands:
    """Test encode-pose and decode-pose."""

    def test_encode_identity(self, tmp_path, capsys):
        """Test the identity pose encodes to the codebook's bin."""
        path = PoseIO.save_pose(Pose(np.eye(3), [0.0, 0.0, 1.0]), tmp_path / "pose.json")

        assert main(["encode-pose", str(path)]) == EXIT_OK

        vp, ipr = build_codebook().encode_rotation(np.eye(3))
        assert _json_out(capsys) == {"vp": vp, "ipr": ipr}

    def test_encode_with_intrinsics(self, tmp_path, capsys):
        """Test intrinsics add offset and depth."""
        pose_path = PoseIO.save_pose(Pose(np.eye(3), [0.1, 0.0, 2.0]), tmp_path / "pose.json")
        intr_path = tmp_path / "intr.json"
        intr_path.write_text(json.dumps(CameraIntrinsics.default().to_dict()), encoding="utf-8")

        assert main(["encode-pose", str(pose_path), "--intrinsics", str(intr_path)]) == EXIT_OK

        data = _json_out(capsys)
        assert data["offset"] == pytest.approx([25.0, 0.0])
        assert data["depth"] == pytest.approx(2.0)

    def test_decode(self, capsys):
        """Test decoding places the center at the offset and depth."""
        assert main(["decode-pose", "10", "5", "50,0", "2.0"]) == EXIT_OK

        pose = Pose.from_dict(_json_out(capsys))
        assert pose.translation.tolist() == pytest.approx([0.2, 0.0, 2.0])
        assert pose.allclose(Pose(build_codebook().decode_rotation(10, 5), pose.translation))

    def test_decode_bad_offset(self, capsys):
        """Test a malformed offset is a validation error."""
        assert main(["decode-pose", "10", "5", "abc", "2.0"]) == EXIT_VALIDATION
        assert "offset" in capsys.readouterr().err

    def test_decode_out_of_range(self, capsys):
        """Test an out-of-range bin is a validation error."""
        assert main(["decode-pose", "64", "0", "0,0", "1.0"]) == EXIT_VALIDATION
        assert "out of range" in capsys.readouterr().err


class TestMeshCommands:
    """Test extract-edges, render and meshes."""

    def test_extract_edges(self, capsys):
        """Test the housing edge list."""
        assert main(["extract-edges", "housing"]) == EXIT_OK

        data = _json_out(capsys)
        assert data["mesh"] == "housing"
        assert data["count"] == len(data["edges"]) > 0

    def test_unknown_mesh(self, capsys):
        """Test an unknown mesh id fails with the validation code."""
        assert main(["extract-edges", "teapot"]) == EXIT_VALIDATION
        assert "unknown mesh_id" in capsys.readouterr().err

    def test_render(self, tmp_path, capsys):
        """Test render writes both images and the five-channel tensor."""
        pose_path = PoseIO.save_pose(Pose(np.eye(3), [0.0, 0.0, 0.4]), tmp_path / "pose.json")
        intr_path = tmp_path / "intr.json"
        intr_path.write_text(json.dumps(CameraIntrinsics.centered(160, 200.0).to_dict()), encoding="utf-8")
        out = tmp_path / "out"

        assert main(["render", "nut", str(pose_path), str(intr_path), "-o", str(out)]) == EXIT_OK

        data = _json_out(capsys)
        assert data["mask_pixels"] > 0
        assert (out / "mask.png").is_file()
        assert (out / "edges.png").is_file()
        assert TensorIO.load(out / "refiner_input.spk5").shape == (5, 240, 240)

    def test_meshes_export(self, tmp_path, capsys):
        """Test every bundled mesh is exported as OBJ."""
        assert main(["meshes", "--export", str(tmp_path)]) == EXIT_OK

        names = [m["name"] for m in _json_out(capsys)["meshes"]]
        assert names == ["pulley", "housing", "nut", "shaft", "pulley_with_screw"]
        assert all((tmp_path / f"{n}.obj").is_file() for n in names)


class TestRefineCommand:
    """Test the refine subcommand."""

    def test_refine_writes_trace(self, tmp_path, capsys):
        """Test a short refinement reports its ADD trace and writes CSV."""
        gt = Pose(np.eye(3), [0.0, 0.0, 0.5])
        init = Pose(np.eye(3), [0.004, -0.003, 0.51])
        gt_path = PoseIO.save_pose(gt, tmp_path / "gt.json")
        init_path = PoseIO.save_pose(init, tmp_path / "init.json")
        trace = tmp_path / "trace.csv"

        code = main(
            [
                "refine", "pulley_with_screw", str(init_path), str(gt_path),
                "--iters", "2", "--inner-steps", "10", "--n-points", "100",
                "--trace-csv", str(trace),
            ]
        )

        assert code == EXIT_OK
        data = _json_out(capsys)
        assert len(data["add_trace"]) == 3
        assert trace.is_file()


class TestEvaluateCommand:
    """Test evaluate."""

    def test_ground_truth(self, tmp_path, capsys):
        """Test perfect predictions report full success."""
        entries = make_synthetic_dataset(["nut"], 3)
        manifest = save_dataset(entries, tmp_path / "manifest.json")
        preds = save_predictions([e.gt_pose for e in entries], tmp_path / "preds.json")

        assert main(["evaluate", str(manifest), str(preds), "--n-points", "200"]) == EXIT_OK

        rows = _json_out(capsys)["rows"]
        assert rows[0]["add_rate"] == 100.0

    def test_count_mismatch(self, tmp_path, capsys):
        """Test mismatched predictions exit with the validation code."""
        entries = make_synthetic_dataset(["nut"], 3)
        manifest = save_dataset(entries, tmp_path / "manifest.json")
        preds = save_predictions([e.gt_pose for e in entries[:2]], tmp_path / "preds.json")

        assert main(["evaluate", str(manifest), str(preds)]) == EXIT_VALIDATION
        assert "count mismatch" in capsys.readouterr().err


class TestSelftestCommand:
    """Test selftest."""

    def test_stdout_is_json(self, capsys):
        """Test default output parses as a single JSON document."""
        assert main(["selftest"]) == EXIT_OK

        data = json.loads(capsys.readouterr().out)
        assert data["passed"] is True
        assert data["round_trips"] == data["bins"] == 3840

    def test_pretty_summary_line(self, capsys):
        """Test --pretty prints the one-line summary instead of JSON."""
        assert main(["selftest", "--pretty"]) == EXIT_OK

        out = capsys.readouterr().out.strip()
        assert out == "3840/3840 round-trips ok; gradient checks ok"
