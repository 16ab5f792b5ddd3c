"""Command-line behavior: flags, exit codes, file outputs, determinism."""

import json
import os

import pytest

import crossfusion.tensor as T
from crossfusion.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small generated cohort plus a 2-fold trained run, shared per module."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    run = root / "run"
    assert main([
        "gen", "--out", str(data), "--n-slides", "16", "--seed", "3", "--d-in", "8",
    ]) == 0
    assert main([
        "train", "--data", str(data), "--out", str(run),
        "--folds", "2", "--epochs", "2", "--warmup", "2", "--bins", "2",
        "--d-model", "8", "--heads", "2", "--seed", "1",
    ]) == 0
    return root


class TestExitCodes:
    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "usage" in capsys.readouterr().out

    @pytest.mark.parametrize("cmd", ["gen", "train", "eval", "gradcheck", "heatmap", "km"])
    def test_subcommand_help_exits_zero(self, cmd, capsys):
        assert main([cmd, "--help"]) == 0
        assert "usage" in capsys.readouterr().out

    def test_unknown_flag_exits_two(self):
        assert main(["gen", "--bogus"]) == 2

    def test_bad_choice_exits_two(self):
        assert main(["gen", "--out", "/tmp/x", "--signal", "bogus"]) == 2

    def test_missing_required_flag_exits_two(self):
        assert main(["train", "--out", "/tmp/x"]) == 2

    def test_single_fold_exits_two(self, workspace):
        code = main([
            "train", "--data", str(workspace / "data"), "--out", str(workspace / "r1"),
            "--folds", "1", "--epochs", "1", "--warmup", "1", "--d-model", "8",
            "--heads", "2", "--bins", "2",
        ])
        assert code == 2

    def test_unwritable_dir_exits_two(self):
        assert main(["gen", "--out", "/proc/nope/cannot", "--n-slides", "2"]) == 2

    def test_corrupt_bag_exits_one_naming_file(self, workspace, tmp_path, capsys):
        data = tmp_path / "data"
        import shutil

        shutil.copytree(workspace / "data", data)
        victim = next((data / "bags").glob("*.xfb"))
        victim.write_bytes(b"XFBAG1" + b"\x01\x00" + b"\x03")  # truncated header
        code = main([
            "train", "--data", str(data), "--out", str(tmp_path / "run"),
            "--folds", "2", "--epochs", "1", "--warmup", "1", "--d-model", "8",
            "--heads", "2", "--bins", "2",
        ])
        assert code == 1
        assert victim.name in capsys.readouterr().err


class TestGen:
    def test_outputs_and_summary_line(self, workspace, capsys):
        data = workspace / "data"
        assert (data / "manifest.tsv").exists()
        assert len(list((data / "bags").glob("*.xfb"))) == 16

    def test_deterministic_across_invocations(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["gen", "--out", str(out), "--n-slides", "4", "--seed", "7",
                         "--d-in", "8"]) == 0
        assert (a / "manifest.tsv").read_bytes() == (b / "manifest.tsv").read_bytes()
        for bag in sorted((a / "bags").glob("*.xfb")):
            assert bag.read_bytes() == (b / "bags" / bag.name).read_bytes()

    def test_env_seed_override(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        os.environ["XFUSE_SEED"] = "9"
        try:
            assert main(["gen", "--out", str(a), "--n-slides", "3", "--seed", "1",
                         "--d-in", "8"]) == 0
        finally:
            del os.environ["XFUSE_SEED"]
        assert main(["gen", "--out", str(b), "--n-slides", "3", "--seed", "9",
                     "--d-in", "8"]) == 0
        assert (a / "manifest.tsv").read_bytes() == (b / "manifest.tsv").read_bytes()


class TestTrain:
    def test_run_layout(self, workspace):
        run = workspace / "run"
        assert (run / "config.json").exists()
        assert (run / "summary.json").exists()
        assert (run / "loss_curves.png").exists()
        summary = json.loads((run / "summary.json").read_text())
        assert len(summary["folds"]) == 2
        assert "c_index_mean" in summary and "c_index_std" in summary

    def test_variant_flags_run(self, workspace, tmp_path):
        for variant in ("no-cp", "no-fc"):
            code = main([
                "train", "--data", str(workspace / "data"),
                "--out", str(tmp_path / variant), "--folds", "2", "--epochs", "1",
                "--warmup", "1", "--d-model", "8", "--heads", "2", "--bins", "2",
                "--variant", variant,
            ])
            assert code == 0
            summary = json.loads((tmp_path / variant / "summary.json").read_text())
            assert summary["variant"] == variant.replace("-", "_")


class TestGradcheck:
    def test_default_run_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "full_model" in out and "FAIL" not in out

    def test_odd_head_split_rejected(self):
        assert main(["gradcheck", "--d-model", "6"]) == 2

    def test_corrupted_backward_detected(self, monkeypatch, capsys):
        """Negative control: a wrong backward rule must breach the threshold."""
        orig = T.sigmoid

        def broken_sigmoid(a):
            out = orig(a)
            if out._backward is not None:
                inner = out._backward

                def skewed(g):
                    inner(g * 1.01)

                out._backward = skewed
            return out

        monkeypatch.setattr(T, "sigmoid", broken_sigmoid)
        assert main(["gradcheck"]) == 1
        assert "FAIL" in capsys.readouterr().out


class TestHeatmap:
    def test_csv_rows_match_scale_patch_count(self, workspace, tmp_path):
        data = workspace / "data"
        manifest = (data / "manifest.tsv").read_text().splitlines()
        slide = manifest[1].split("\t")[0]
        out = tmp_path / "hm.csv"
        code = main([
            "heatmap", "--run", str(workspace / "run"), "--fold", "0",
            "--slide", slide, "--layer", "cab-coarse", "--out", str(out),
            "--pgm", str(tmp_path / "hm.pgm"), "--no-fig",
        ])
        assert code == 0
        rows = out.read_text().splitlines()
        from crossfusion.data import read_bag

        rec_path = next(l.split("\t")[3] for l in manifest[1:] if l.split("\t")[0] == slide)
        n_coarse = read_bag(data / rec_path).coarse.shape[0]
        assert len(rows) == 1 + n_coarse
        scores = [float(r.split(",")[2]) for r in rows[1:]]
        assert min(scores) == 0.0 and max(scores) == 1.0

    def test_pgm_is_valid_8bit(self, workspace, tmp_path):
        manifest = (workspace / "data" / "manifest.tsv").read_text().splitlines()
        slide = manifest[1].split("\t")[0]
        pgm = tmp_path / "map.pgm"
        assert main([
            "heatmap", "--run", str(workspace / "run"), "--fold", "0",
            "--slide", slide, "--layer", "pt-source", "--out", str(tmp_path / "m.csv"),
            "--pgm", str(pgm), "--no-fig",
        ]) == 0
        blob = pgm.read_bytes()
        assert blob.startswith(b"P5\n")
        header, rest = blob.split(b"\n255\n", 1)
        w, h = map(int, header.split(b"\n")[1].split())
        assert len(rest) == w * h

    def test_deterministic_outputs(self, workspace, tmp_path):
        manifest = (workspace / "data" / "manifest.tsv").read_text().splitlines()
        slide = manifest[1].split("\t")[0]
        files = []
        for tag in ("a", "b"):
            csv = tmp_path / f"{tag}.csv"
            fig = tmp_path / f"{tag}.png"
            assert main([
                "heatmap", "--run", str(workspace / "run"), "--fold", "0",
                "--slide", slide, "--layer", "cab-fine", "--out", str(csv),
                "--fig", str(fig),
            ]) == 0
            files.append((csv.read_bytes(), fig.read_bytes()))
        assert files[0][0] == files[1][0]
        assert files[0][1] == files[1][1]

    def test_unknown_slide_exits_two(self, workspace, tmp_path):
        assert main([
            "heatmap", "--run", str(workspace / "run"), "--fold", "0",
            "--slide", "nope", "--layer", "cab-fine", "--out", str(tmp_path / "x.csv"),
        ]) == 2

    def test_unavailable_layer_for_variant_exits_two(self, workspace, tmp_path):
        run = tmp_path / "nofc_run"
        assert main([
            "train", "--data", str(workspace / "data"), "--out", str(run),
            "--folds", "2", "--epochs", "1", "--warmup", "1", "--d-model", "8",
            "--heads", "2", "--bins", "2", "--variant", "no-fc",
        ]) == 0
        manifest = (workspace / "data" / "manifest.tsv").read_text().splitlines()
        slide = manifest[1].split("\t")[0]
        assert main([
            "heatmap", "--run", str(run), "--fold", "0", "--slide", slide,
            "--layer", "cab-coarse", "--out", str(tmp_path / "x.csv"),
        ]) == 2


class TestKm:
    def test_header_and_structure(self, workspace, tmp_path, capsys):
        out = tmp_path / "km.csv"
        assert main(["km", "--run", str(workspace / "run"), "--out", str(out),
                     "--no-fig"]) == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# logrank_p=")
        float(lines[0].split("=", 1)[1])  # parseable
        assert lines[2] == "group,time,survival" or lines[1] == "group,time,survival"
        groups = {l.split(",")[0] for l in lines if l and not l.startswith(("#", "group"))}
        assert groups == {"high", "low"}

    def test_deterministic(self, workspace, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert main(["km", "--run", str(workspace / "run"), "--out", str(out),
                         "--fig", str(out.with_suffix(".png"))]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert a.with_suffix(".png").read_bytes() == b.with_suffix(".png").read_bytes()

    def test_missing_fold_outputs_exit_one(self, workspace, tmp_path):
        import shutil

        broken = tmp_path / "broken_run"
        shutil.copytree(workspace / "run", broken)
        (broken / "fold_1" / "risks.tsv").unlink()
        assert main(["km", "--run", str(broken), "--out", str(tmp_path / "km.csv")]) == 1


class TestEval:
    def test_writes_report(self, workspace, capsys):
        assert main(["eval", "--run", str(workspace / "run"), "--fold", "0"]) == 0
        report_path = workspace / "run" / "fold_0" / "eval_val.json"
        assert report_path.exists()
        report = json.loads(report_path.read_text())
        assert report["km_high"] is not None and report["km_low"] is not None
        assert 0.0 <= report["c_index"] <= 1.0

    def test_deterministic_report(self, workspace):
        report_path = workspace / "run" / "fold_0" / "eval_val.json"
        assert main(["eval", "--run", str(workspace / "run"), "--fold", "0"]) == 0
        first = report_path.read_bytes()
        assert main(["eval", "--run", str(workspace / "run"), "--fold", "0"]) == 0
        assert report_path.read_bytes() == first
