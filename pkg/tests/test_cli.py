import json

import numpy as np
import pytest

from conftest import write_small_config
from okaf import checkpoint
from okaf.cli import main


def run(out, cfg, *argv):
    return main([*argv, "--config", cfg, "--out", str(out), "-q"])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_small_config(base)
    out = base / "run"
    for argv in (["gen-data"], ["qc"], ["train", "--stage", "all"], ["eval", "--split", "test"]):
        assert run(out, cfg, *argv) == 0, argv
    return base, cfg, out


def test_pipeline_layout(pipeline):
    _, _, out = pipeline
    for rel in ("data/train/manifest.tsv", "data/test/manifest.tsv", "qc/manifest.tsv", "qc/scores.csv",
                "qc/review.jsonl", "train/model.cfg", "train/stage0.okaf", "train/stage3_ema.okaf",
                "train/stage2_trace.csv", "eval/report-test.json"):
        assert (out / rel).is_file(), rel
    report = json.loads((out / "eval/report-test.json").read_text())
    assert report["meta"]["split"] == "test"
    assert set(report["tasks"]) == {"i2t", "t2i", "segment", "superres", "counterfactual", "stain",
                                    "crossmodal"}


def test_sample_is_seeded(pipeline):
    _, cfg, out = pipeline
    prompt = "a ct image of a circle"
    assert run(out, cfg, "sample", "--prompt", prompt, "--steps", "3", "--seed", "4") == 0
    path = out / "samples/sample-seed4-steps3.pgm"
    first = path.read_bytes()
    assert run(out, cfg, "sample", "--prompt", prompt, "--steps", "3", "--seed", "4", "--ema") == 0
    assert run(out, cfg, "sample", "--prompt", prompt, "--steps", "3", "--seed", "4") == 0
    assert path.read_bytes() == first and first.startswith(b"P5")


def test_stage_by_stage_matches_all(pipeline, tmp_path):
    _, cfg, out = pipeline
    step = tmp_path / "run"
    assert run(step, cfg, "gen-data") == 0 and run(step, cfg, "qc") == 0
    for k in ("1", "2", "3"):
        assert run(step, cfg, "train", "--stage", k) == 0
    for name in ("stage3.okaf", "stage3_ema.okaf", "stage3_trace.csv"):
        assert (step / "train" / name).read_bytes() == (out / "train" / name).read_bytes(), name


def test_validation_failures_exit_2(pipeline, tmp_path, capsys):
    _, cfg, out = pipeline
    assert run(out, cfg, "sample", "--prompt", "Upper Case") == 2
    assert run(out, cfg, "sample", "--prompt", "ok", "--steps", "0") == 2
    assert run(tmp_path / "empty", cfg, "train") == 2
    assert run(out, str(tmp_path / "missing.cfg"), "qc") == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nlearning_rate = 1\n")
    assert run(out, str(bad), "qc") == 2
    assert run(out, cfg, "eval", "--split", "train") == 2
    assert "invalid input" in capsys.readouterr().err


def test_numeric_failure_exits_3(pipeline, tmp_path):
    base, cfg, out = pipeline
    broken = tmp_path / "run"
    (broken / "train").mkdir(parents=True)
    (broken / "train/model.cfg").write_bytes((out / "train/model.cfg").read_bytes())
    state = checkpoint.load(out / "train/stage3.okaf")
    for v in state.values():
        v[...] = np.nan
    checkpoint.save(broken / "train/stage1.okaf", state)
    assert run(broken, cfg, "sample", "--prompt", "a ct image", "--steps", "2") == 3


def test_options_after_or_before_subcommand(pipeline):
    _, cfg, out = pipeline
    assert main(["--out", str(out), "--config", cfg, "-q", "sample", "--prompt", "x", "--steps", "1"]) == 0
