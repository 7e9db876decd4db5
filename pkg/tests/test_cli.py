import subprocess
import sys

import numpy as np
import pytest

from nerfcloud import dataio
from nerfcloud.cli import main

SYNTH = ["--images", "8", "--res", "16", "--step", "0.02", "--surface-samples", "500"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    assert main(["synth", "--out", str(ds)] + SYNTH) == 0
    assert main(["normalize", "--input", str(ds / "trajectory.txt"), "--out", str(root / "dev.json")]) == 0
    assert main(["normalize", "--input", str(ds / "sfm"), "--source", "sfm", "--out", str(root / "sfm.json")]) == 0
    assert main(["train", "--manifest", str(root / "dev.json"), "--out", str(root / "run"), "--steps", "100",
                 "--rays", "256", "--samples", "16", "--bound", "1.5", "--eval-pixels", "16", "--log-every", "50",
                 "--refine-poses", "--pose-warmup", "50"]) == 0
    return root


class TestUsage:
    @pytest.mark.parametrize("argv", [[], ["bogus"], ["train"], ["synth"], ["synth", "--out", "x", "--images", "-3"],
                                      ["extract", "--checkpoint", "c", "--out", "o", "--res", "4", "4"]])
    def test_exit_2(self, argv, capsys):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2

    def test_images_not_multiple_of_rings(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path), "--images", "7"]) == 2

    def test_missing_input_exit_1(self, tmp_path, capsys):
        assert main(["normalize", "--input", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "m.json")]) == 1
        assert "not found" in capsys.readouterr().err

    def test_help_documents_every_flag(self):
        from nerfcloud.cli import build_parser

        ap = build_parser()
        subs = next(a for a in ap._actions if a.dest == "command").choices
        for name, sp in subs.items():
            text = sp.format_help()
            for act in sp._actions:
                for opt in act.option_strings:
                    assert opt in text, (name, opt)

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "nerfcloud", "--help"], capture_output=True, text=True)
        assert out.returncode == 0 and "normalize" in out.stdout


class TestPipeline:
    def test_synth_deterministic(self, pipeline, tmp_path):
        assert main(["synth", "--out", str(tmp_path)] + SYNTH) == 0
        for name in ("transforms.json", "trajectory.txt", "images/r_003.png", "surface.ply"):
            assert (tmp_path / name).read_bytes() == (pipeline / "ds" / name).read_bytes()

    def test_device_matches_sfm(self, pipeline):
        a = dataio.parse_pose_manifest(pipeline / "dev.json")
        b = dataio.parse_pose_manifest(pipeline / "sfm.json")
        for p, q in zip(a.poses, b.poses):
            np.testing.assert_allclose(p.matrix, q.matrix, atol=1e-9)
        assert a.extra["normalization"]["rotation_applied_deg"] == 90.0
        assert (pipeline / "dev_report.json").is_file()

    def test_rotation_overrides(self, pipeline, tmp_path):
        sfm = dataio.parse_pose_manifest(pipeline / "sfm.json")
        assert sfm.extra["normalization"]["rotation_applied_deg"] == 0.0
        out = tmp_path / "a0.json"
        assert main(["normalize", "--input", str(pipeline / "ds" / "trajectory.txt"), "--alpha", "0",
                     "--out", str(out)]) == 0
        assert dataio.parse_pose_manifest(out).extra["normalization"]["rotation_applied_deg"] == 0.0

    def test_train_outputs(self, pipeline):
        run = pipeline / "run"
        m = dataio.read_metrics(run / "metrics.csv")
        assert len(m["step"]) == 100
        man = dataio.parse_pose_manifest(run / "refined_poses.json")
        assert all((run / p).is_file() for p in man.file_paths)
        assert (run / "eval.csv").read_text().splitlines()[-1].startswith("mean,")

    def test_extract_and_eval(self, pipeline, capsys):
        ck = str(pipeline / "run" / "checkpoint.bin")
        out = pipeline / "empty.ply"
        assert main(["extract", "--checkpoint", ck, "--out", str(out), "--delta-t", "1e9", "--res", "8"]) == 0
        assert len(dataio.read_ply(out)) == 0
        counts = {}
        for r in (64, 128):
            p = pipeline / f"c{r}.ply"
            assert main(["extract", "--checkpoint", ck, "--out", str(p), "--res", str(r), "--delta-t", "1",
                         "--color", "average"]) == 0
            counts[r] = len(dataio.read_ply(p))
        assert counts[64] > 0
        assert abs(counts[128] / counts[64] - 8.0) < 0.2 * 8.0
        c = str(pipeline / "c64.ply")
        capsys.readouterr()
        assert main(["eval", "--cloud", c, "--reference", c, "--radius", "0.01",
                     "--csv", str(pipeline / "stats.csv")]) == 0
        assert "completeness: 1.0" in capsys.readouterr().out
        assert len((pipeline / "stats.csv").read_text().splitlines()) == 2

    def test_eval_mismatched_scale(self, pipeline, tmp_path, capsys):
        cloud = dataio.read_ply(pipeline / "ds" / "surface.ply")
        big = tmp_path / "big.ply"
        dataio.write_ply(type(cloud)(cloud.positions * 100.0, cloud.colors), big)
        capsys.readouterr()
        assert main(["eval", "--cloud", str(big), "--reference", str(pipeline / "ds" / "surface.ply")]) == 0
        out = capsys.readouterr().out
        completeness = float(out.split("completeness: ")[1].split()[0])
        assert completeness < 0.1

    def test_render(self, pipeline):
        out = pipeline / "view.png"
        assert main(["render", "--checkpoint", str(pipeline / "run" / "checkpoint.bin"),
                     "--manifest", str(pipeline / "dev.json"), "--index", "2", "--samples", "8",
                     "--out", str(out)]) == 0
        assert dataio.read_image(out).shape == (16, 16, 3)
