import csv
import hashlib
import json
from pathlib import Path

import pytest

from coat import checks
from coat import cli
from coat import config as CF
from coat import toybench as tb


def tiny_yaml(tmp_path: Path, **extra) -> Path:
    cfg = CF.RunConfig(
        data=tb.SplitSpec(n_train_scenes=4, n_test_scenes=4, n_identities=4, n_unlabeled=1, gallery_size=4),
        model=checks.tiny_cascade(),
        loss=CF.LossConfig(cq_capacity=8),
        epochs=1,
        gallery_sizes=(2, 4),
    )
    if extra:
        cfg = CF.merge(cfg, extra)
    path = tmp_path / "run.yaml"
    CF.save(cfg, path)
    return path


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def error_line(capsys) -> str:
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1, err
    return err[0]


class TestGenData:
    def test_writes_benchmark(self, tmp_path):
        cfg = tiny_yaml(tmp_path)
        assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
        assert (tmp_path / "data" / "annotations.json").exists()
        assert any((tmp_path / "data" / "scenes").iterdir())

    def test_same_seed_same_tree(self, tmp_path):
        cfg = tiny_yaml(tmp_path)
        for name in ("a", "b"):
            cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / name)])
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_seed_flag_changes_data(self, tmp_path):
        cfg = tiny_yaml(tmp_path)
        cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "a")])
        cli.main(["gen-data", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "b")])
        assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "b")

    def test_infeasible_gallery(self, tmp_path, capsys):
        cfg = tiny_yaml(tmp_path, data={"gallery_size": 99})
        code = cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")])
        assert code == cli.EXIT_CODES["E_CONFIG"]
        assert error_line(capsys).startswith("error: E_CONFIG: ")

    def test_bad_yaml(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("epochs: [\n")
        assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) != 0
        assert error_line(capsys).startswith("error: E_CONFIG: ")

    def test_missing_config_file(self, tmp_path, capsys):
        code = cli.main(["gen-data", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "d")])
        assert code == cli.EXIT_CODES["E_IO"]
        assert error_line(capsys).startswith("error: E_IO: ")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_yaml(root)
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


class TestTrainEval:
    def test_train_outputs(self, trained):
        run = trained / "run"
        assert (run / "checkpoints" / "epoch-001" / "manifest.json").exists()
        assert (run / "config.yaml").exists()
        rows = list(csv.DictReader(open(run / "loss_log.csv")))
        assert len(rows) == 2 and "s3_oim" in rows[0]

    def test_eval_outputs(self, trained, capsys):
        out = trained / "eval"
        code = cli.main(
            ["eval", "--checkpoint", str(trained / "run"), "--data", str(trained / "data"), "--out", str(out),
             "--gallery-sizes", "2,4"]
        )
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert set(report) == {"detection", "retrieval", "curve"}
        rows = (out / "gallery_curve.csv").read_text().splitlines()
        assert rows[0] == "gallery_size,map,top1" and [r.split(",")[0] for r in rows[1:]] == ["2", "4"]
        assert len((out / "detections.jsonl").read_text().splitlines()) == 4
        assert "mAP" in capsys.readouterr().out

    def test_eval_version_mismatch(self, trained, tmp_path, capsys):
        ckpt = trained / "run" / "checkpoints" / "epoch-001"
        copy = tmp_path / "old"
        copy.mkdir()
        (copy / "weights.bin").write_bytes((ckpt / "weights.bin").read_bytes())
        manifest = json.loads((ckpt / "manifest.json").read_text())
        manifest["format_version"] = 0
        (copy / "manifest.json").write_text(json.dumps(manifest))
        code = cli.main(["eval", "--checkpoint", str(copy), "--data", str(trained / "data"), "--out", str(tmp_path / "e")])
        assert code == cli.EXIT_CODES["E_VERSION"]
        assert error_line(capsys).startswith("error: E_VERSION: ")

    def test_eval_missing_checkpoint(self, tmp_path, capsys):
        code = cli.main(["eval", "--checkpoint", str(tmp_path / "none"), "--out", str(tmp_path / "e")])
        assert code == cli.EXIT_CODES["E_IO"]
        assert error_line(capsys).startswith("error: E_IO: ")

    def test_eval_oversized_gallery(self, trained, tmp_path, capsys):
        code = cli.main(
            ["eval", "--checkpoint", str(trained / "run"), "--data", str(trained / "data"), "--out", str(tmp_path),
             "--gallery-sizes", "64"]
        )
        assert code == cli.EXIT_CODES["E_CONFIG"]
        error_line(capsys)

    def test_train_missing_data(self, tmp_path, capsys):
        cfg = tiny_yaml(tmp_path)
        code = cli.main(["train", "--config", str(cfg), "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")])
        assert code == cli.EXIT_CODES["E_IO"]
        error_line(capsys)

    def test_train_resume(self, trained, tmp_path):
        cfg = tiny_yaml(tmp_path, epochs=2)
        out = tmp_path / "r"
        args = ["train", "--config", str(cfg), "--data", str(trained / "data"), "--out", str(out)]
        assert cli.main(args + ["--max-steps", "1"]) == 0
        assert cli.main(args + ["--resume"]) == 0
        assert (out / "checkpoints" / "epoch-002" / "manifest.json").exists()
        rows = list(csv.DictReader(open(out / "loss_log.csv")))
        assert [int(r["global_step"]) for r in rows] == [0, 1, 2, 3]

    def test_resume_without_checkpoint(self, tmp_path, capsys):
        cfg = tiny_yaml(tmp_path)
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "empty"), "--resume"]) != 0
        assert error_line(capsys).startswith("error: E_IO: ")

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning", "ignore:invalid value:RuntimeWarning")
    def test_nan_exit_code(self, tmp_path, capsys):
        cfg = tiny_yaml(tmp_path, optim={"lr": 1e30, "warmup_epochs": 0, "clip_norm": 0.0}, epochs=3)
        code = cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")])
        assert code == cli.EXIT_CODES["E_NAN"]
        line = error_line(capsys)
        assert line.startswith("error: E_NAN: non-finite ")

    def test_precision_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("COAT_PRECISION", "64")
        assert cli.load_config(str(tiny_yaml(tmp_path))).precision == 64


class TestGradcheckAblate:
    @pytest.mark.parametrize("scope", ["op", "block"])
    def test_gradcheck_scopes(self, scope, capsys):
        assert cli.main(["gradcheck", "--scope", scope]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_unknown_preset(self, tmp_path, capsys):
        code = cli.main(["ablate", "--preset", "depth", "--out", str(tmp_path)])
        assert code == cli.EXIT_CODES["E_PRESET"]
        assert error_line(capsys).startswith("error: E_PRESET: ")

    def test_stages_preset_emits_three_rows(self, tmp_path, trained, capsys):
        cfg = tiny_yaml(tmp_path)
        code = cli.main(
            ["ablate", "--preset", "stages", "--config", str(cfg), "--data", str(trained / "data"), "--out",
             str(tmp_path / "ab"), "--epochs", "1"]
        )
        assert code == 0
        rows = (tmp_path / "ab" / "stages" / "table.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in rows[1:]] == ["1-stage", "2-stage", "3-stage"]
        assert "3-stage" in capsys.readouterr().out
