import json
from pathlib import Path

import numpy as np
import pytest

from polyalign import cli
from polyalign.dataset import load_annotations, save_annotations
from polyalign.geometry import AnnotationSet, Polygon

TINY = """
[dataset]
scenes = {scenes}
height = 64
width = 64
buildings = 2, 3

[training]
steps = 3
batch_size = 2
patch_size = 16
widths = 4, 8

[pipeline]
rounds = {rounds}
mode = {mode}
seed = 11
"""


def write_cfg(tmp_path, scenes=2, rounds=2, mode="standard", name="c.ini"):
    p = tmp_path / name
    p.write_text(TINY.format(scenes=scenes, rounds=rounds, mode=mode))
    return p


def test_config_parsing(tmp_path):
    cfg = cli.load_config(write_cfg(tmp_path))
    assert cfg.scenes == 2 and cfg.scene.height == 64 and cfg.scene.buildings == (2, 3)
    assert cfg.training.widths == (4, 8) and cfg.training.steps == 3
    assert cfg.rounds == 2 and cfg.mode == "standard" and cfg.seed == 11


def test_unknown_key_is_config_error(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[training]\nstepz = 3\n")
    assert cli.main(["synth", "--config", str(p), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_bad_mode_is_config_error(tmp_path):
    assert cli.main(["run", "--config", str(write_cfg(tmp_path, mode="AS9")), "--out", str(tmp_path)]) == 1


def test_deterministic_requires_seed(tmp_path):
    p = tmp_path / "noseed.ini"
    p.write_text("[dataset]\nscenes = 0\n")
    assert cli.main(["synth", "--config", str(p), "--deterministic", "--out", str(tmp_path / "o")]) == 1
    assert cli.main(["synth", "--config", str(p), "--deterministic", "--seed", "3",
                     "--out", str(tmp_path / "o")]) == 0


def test_usage_error_exit_code():
    assert cli.main(["frobnicate"]) == cli.EXIT_CONFIG


def test_synth_zero_scenes(tmp_path):
    assert cli.main(["synth", "--config", str(write_cfg(tmp_path, scenes=0)), "--out", str(tmp_path / "d")]) == 0
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["entries"] == []


def test_synth_reproducible(tmp_path):
    cfg = write_cfg(tmp_path)
    for d in ("a", "b"):
        assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    for p in sorted((tmp_path / "a").rglob("*.*")):
        assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_run_writes_reports(tmp_path, capsys):
    assert cli.main(["run", "--config", str(write_cfg(tmp_path)), "--out", str(tmp_path / "r")]) == 0
    out = capsys.readouterr().out
    assert "q50" in out and len(out.strip().splitlines()) == 4
    rep = tmp_path / "r" / "report"
    rounds = {line.split(",")[0] for line in (rep / "cdf.csv").read_text().splitlines()[1:]}
    assert rounds == {"0", "1", "2"}
    assert (tmp_path / "r" / "rounds" / "r2" / "metrics.csv").exists()


def test_run_missing_manifest(tmp_path):
    p = tmp_path / "m.ini"
    p.write_text("[dataset]\nmanifest = nowhere/manifest.json\n")
    assert cli.main(["run", "--config", str(p), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_run_corrupt_annotation_is_data_error(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    (tmp_path / "d" / "annotations" / "scene000.json").write_text("{not json")
    p = tmp_path / "m.ini"
    p.write_text(cfg.read_text().replace("[dataset]", "[dataset]\nmanifest = d/manifest.json"))
    assert cli.main(["run", "--config", str(p), "--out", str(tmp_path / "r")]) == cli.EXIT_DATA


def test_run_then_align(tmp_path):
    cfg = write_cfg(tmp_path, rounds=1)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    p = tmp_path / "a.ini"
    p.write_text(cfg.read_text().replace("[dataset]", "[dataset]\nmanifest = r/data/manifest.json"))
    assert cli.main(["align", "--config", str(p), "--checkpoints", str(tmp_path / "r"),
                     "--out", str(tmp_path / "al")]) == 0
    # round 1 standard inference on A_0 with the same checkpoints reproduces the run's output
    a = (tmp_path / "al" / "annotations" / "scene000.json").read_bytes()
    b = (tmp_path / "r" / "rounds" / "r1" / "annotations" / "scene000.json").read_bytes()
    assert a == b


def test_align_missing_checkpoints(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    p = tmp_path / "a.ini"
    p.write_text(cfg.read_text().replace("[dataset]", "[dataset]\nmanifest = d/manifest.json"))
    assert cli.main(["align", "--config", str(p), "--checkpoints", str(tmp_path / "d"),
                     "--out", str(tmp_path / "x")]) == cli.EXIT_DATA


class TestEval:
    def files(self, tmp_path, shift):
        a = AnnotationSet((Polygon([[1, 1], [5, 1], [3, 4]]),), "e", (8, 8))
        b = AnnotationSet((Polygon(a.polygons[0].vertices + shift),), "e", (8, 8))
        save_annotations(b, tmp_path / "eval.json")
        save_annotations(a, tmp_path / "gt.json")
        return str(tmp_path / "eval.json"), str(tmp_path / "gt.json")

    def test_identical_zero(self, tmp_path):
        e, g = self.files(tmp_path, (0, 0))
        assert cli.main(["eval", e, g, "--out", str(tmp_path / "o")]) == 0
        rows = (tmp_path / "o" / "distances.csv").read_text().splitlines()[1:]
        assert [r.split(",")[-1] for r in rows] == ["0.0"] * 3

    def test_shift_step(self, tmp_path):
        e, g = self.files(tmp_path, (3, 4))
        assert cli.main(["eval", e, g, "--out", str(tmp_path / "o")]) == 0
        for line in (tmp_path / "o" / "cdf.csv").read_text().splitlines()[1:]:
            tau, frac = float(line.split(",")[2]), float(line.split(",")[3])
            assert frac == (1.0 if tau > 5 else 0.0)

    def test_mismatch_is_data_error(self, tmp_path):
        e, g = self.files(tmp_path, (0, 0))
        save_annotations(AnnotationSet((Polygon([[1, 1], [5, 1], [5, 4], [1, 4]]),), "e", (8, 8)), g)
        assert cli.main(["eval", e, g, "--out", str(tmp_path / "o")]) == cli.EXIT_DATA

    def test_directories(self, tmp_path):
        for sub in ("ev", "gt"):
            (tmp_path / sub).mkdir()
        rng = np.random.default_rng(0)
        for k in range(3):
            a = AnnotationSet((Polygon(rng.uniform(0, 30, (4, 2))),), f"i{k}", (32, 32))
            save_annotations(a, tmp_path / "gt" / f"i{k}.json")
            save_annotations(AnnotationSet((Polygon(a.polygons[0].vertices + 1),), f"i{k}", (32, 32)),
                             tmp_path / "ev" / f"i{k}.json")
        assert cli.main(["eval", str(tmp_path / "ev"), str(tmp_path / "gt"), "--out", str(tmp_path / "o")]) == 0
        assert len((tmp_path / "o" / "distances.csv").read_text().splitlines()) == 13
        assert load_annotations(tmp_path / "gt" / "i0.json").image_id == "i0"


def test_gradcheck_command(capsys):
    assert cli.cmd_gradcheck() == 0
    assert "gradcheck PASS" in capsys.readouterr().out


def test_gradcheck_negative_control(capsys):
    assert cli.cmd_gradcheck(corrupt=True) != 0
    assert "gradcheck FAIL" in capsys.readouterr().out


@pytest.mark.parametrize("path", ["configs/desk.ini", "configs/smoke.ini"])
def test_shipped_configs_parse(path):
    cfg = cli.load_config(Path(__file__).parent.parent / path)
    assert cfg.seed is not None
