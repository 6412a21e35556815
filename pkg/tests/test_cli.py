"""Command line surface: config handling, diagnostics, and the full pipeline."""

import json
import os

import pytest

from symphony.cli import (EVAL_DEFAULTS, GEN_DEFAULTS, main, merge_config,
                          read_config_file)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_read_config_file_parses_pairs(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nworld=fork\nseed = 9\n\nduration-s=6.0\n")
    cfg = read_config_file(str(p))
    assert cfg == {"world": "fork", "seed": "9", "duration-s": "6.0"}


def test_read_config_file_reports_bad_line(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("world=fork\nseed 9\n")
    with pytest.raises(ValueError, match="malformed-line: 2"):
        read_config_file(str(p))


class FakeArgs:
    def __init__(self, **kw):
        self.config = kw.pop("config", None)
        for k, v in kw.items():
            setattr(self, k.replace("-", "_"), v)


def args_for(defaults, **kw):
    config = kw.pop("config", None)
    ns = {k.replace("-", "_"): None for k in defaults}
    ns.update({k.replace("-", "_"): v for k, v in kw.items()})
    return FakeArgs(config=config, **ns)


def test_merge_config_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv("SYMPHONY_SEED", raising=False)
    p = tmp_path / "c.cfg"
    p.write_text("seed=5\nworld=merge\n")
    # file overrides defaults
    cfg = merge_config(args_for(GEN_DEFAULTS, config=str(p)), GEN_DEFAULTS)
    assert cfg["seed"] == 5 and cfg["world"] == "merge"
    assert cfg["agents"] == GEN_DEFAULTS["agents"]
    # flags override the file
    cfg = merge_config(args_for(GEN_DEFAULTS, config=str(p), seed=8), GEN_DEFAULTS)
    assert cfg["seed"] == 8 and cfg["world"] == "merge"


def test_merge_config_env_seed(monkeypatch):
    monkeypatch.setenv("SYMPHONY_SEED", "77")
    cfg = merge_config(args_for(GEN_DEFAULTS), GEN_DEFAULTS)
    assert cfg["seed"] == 77
    # an explicit flag beats the environment
    cfg = merge_config(args_for(GEN_DEFAULTS, seed=3), GEN_DEFAULTS)
    assert cfg["seed"] == 3


def test_merge_config_rejects_unknown_key(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("wrold=fork\n")
    with pytest.raises(ValueError, match="unknown config key: wrold"):
        merge_config(args_for(GEN_DEFAULTS, config=str(p)), GEN_DEFAULTS)


def test_missing_paths_name_the_file(tmp_path, capsys):
    code, _, err = run(["eval", "--ckpt", str(tmp_path / "nope"),
                        "--data", str(tmp_path / "d.json")], capsys)
    assert code == 2
    assert "error:" in err and "not found" in err and "nope" in err


def test_unknown_segment_index(tmp_path, capsys):
    data = str(tmp_path / "d.json")
    code, _, _ = run(["gen-data", "--world", "fork", "--num-segments", "2",
                      "--test-segments", "1", "--agents", "3",
                      "--duration-s", "4.0", "--route-weights", "0.7,0.3",
                      "--out", data], capsys)
    assert code == 0
    ck = str(tmp_path / "ck")
    code, _, _ = run(["train", "--data", data, "--steps", "1", "--batch", "1",
                      "--checkpoint-every", "1", "--expert-pairs", "4",
                      "--disc-pairs", "4", "--distill-pairs", "4",
                      "--val-segments", "0", "--select-rollouts", "2",
                      "--out-dir", ck], capsys)
    assert code == 0
    code, _, err = run(["simulate", "--ckpt", os.path.join(ck, "ckpt_1"),
                        "--data", data, "--segment", "5",
                        "--out", str(tmp_path / "t.jsonl")], capsys)
    assert code == 2
    assert "unknown-segment" in err


def test_pipeline_end_to_end_deterministic(tmp_path, capsys):
    data = str(tmp_path / "d.json")
    code, out, _ = run(["gen-data", "--world", "fork", "--num-segments", "6",
                        "--test-segments", "2", "--agents", "3",
                        "--duration-s", "6.0", "--route-weights", "0.7,0.3",
                        "--seed", "4", "--out", data], capsys)
    assert code == 0 and "6 train + 2 test" in out

    rundir = str(tmp_path / "run")
    code, out, _ = run(["train", "--data", data, "--variant", "bc-ts",
                        "--steps", "2", "--batch", "2", "--checkpoint-every", "2",
                        "--expert-pairs", "8", "--distill-pairs", "8",
                        "--disc-pairs", "8", "--val-segments", "1",
                        "--branches", "4", "--select-rollouts", "2",
                        "--out-dir", rundir], capsys)
    assert code == 0
    summary = json.loads(open(os.path.join(rundir, "train_summary.json")).read())
    ckpt = summary["selected"]
    assert os.path.exists(ckpt)
    assert summary["config"]["variant"] == "bc-ts"

    rep1, rep2 = str(tmp_path / "r1.json"), str(tmp_path / "r2.json")
    a = run(["eval", "--ckpt", ckpt, "--data", data, "--rollouts", "2",
             "--seed", "1", "--workers", "1", "--out", rep1], capsys)
    b = run(["eval", "--ckpt", ckpt, "--data", data, "--rollouts", "2",
             "--seed", "1", "--workers", "2", "--out", rep2], capsys)
    assert a[0] == 0 and b[0] == 0
    assert open(rep1, "rb").read() == open(rep2, "rb").read()
    assert a[1].split("->")[0] == b[1].split("->")[0]

    t1, t2 = str(tmp_path / "t1.jsonl"), str(tmp_path / "t2.jsonl")
    for t in (t1, t2):
        code, _, _ = run(["simulate", "--ckpt", ckpt, "--data", data,
                          "--segment", "0", "--branches", "4", "--seed", "2",
                          "--out", t], capsys)
        assert code == 0
    assert open(t1, "rb").read() == open(t2, "rb").read()
    first = json.loads(open(t1).read().splitlines()[0])
    assert first["kind"] == "meta"


def test_env_seed_matches_flag(tmp_path, capsys, monkeypatch):
    d1, d2 = str(tmp_path / "a.json"), str(tmp_path / "b.json")
    base = ["gen-data", "--world", "straight", "--num-segments", "2",
            "--test-segments", "1", "--agents", "2", "--duration-s", "4.0"]
    monkeypatch.setenv("SYMPHONY_SEED", "7")
    assert run(base + ["--out", d1], capsys)[0] == 0
    monkeypatch.delenv("SYMPHONY_SEED")
    assert run(base + ["--seed", "7", "--out", d2], capsys)[0] == 0
    assert open(d1, "rb").read() == open(d2, "rb").read()


def test_eval_defaults_cover_flags():
    assert set(EVAL_DEFAULTS) == {"ckpt", "data", "rollouts", "beam", "split",
                                  "seed", "workers", "out"}
