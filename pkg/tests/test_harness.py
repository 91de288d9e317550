import csv
import json
from pathlib import Path

import numpy as np
import pytest

from intentmaps.gridcore import read_pnm
from intentmaps.harness import (
    ARGMAX_COLOR, AGENT_COLORS, ConfigError, EvalReport, HarnessError, RunConfig, cmd_eval, cmd_render,
    cmd_train, comparison_table, main, ordered_variants, read_csv, summarize,
)

GOLDEN = Path(__file__).parent / "golden"


def tiny(**kw):
    data = {
        "environment": {"layout": "SmallEmpty", "dims": [6, 6], "num_objects": 2, "team": "1L+1P"},
        "variant": "RampPath",
        "train": {"total_steps": 120, "batch_size": 8, "target_update": 50},
        "seed": 3,
        "num_policies": 1,
        "eval_seeds": [0, 1, 2],
        "tick_budget": 25,
    }
    data.update(kw)
    return data


def write_config(tmp_path, **kw):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(tiny(**kw)))
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    cfg = RunConfig.from_json(tiny())
    cmd_train(cfg, out)
    return cfg, out


# config

def test_config_roundtrip_resolves_defaults():
    cfg = RunConfig.from_json(tiny(tick_budget=None))
    again = RunConfig.from_json(cfg.to_json())
    assert again.to_json() == cfg.to_json()
    assert cfg.out_size == 9 and cfg.tick_budget > 0
    assert cfg.to_json()["train"]["learning_rate"] == 0.01


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"variant": "Telepathy"},
    {"environment": {"layout": "SmallEmpty", "task": "Foraging", "team": "1R"}},
    {"environment": {"layout": "SmallEmpty", "task": "SearchAndRescue", "team": "2L"}},
    {"train": {"learning_rate": 0.01, "nope": 2}},
    {"eval_seeds": []},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_json(tiny(**bad))


def test_unknown_variant_lists_valid_tags():
    with pytest.raises(ConfigError, match="RampPath"):
        ordered_variants(["RampPath", "Telepathy"])


def test_overrides():
    cfg = RunConfig.from_json(tiny()).with_overrides(seed=9, variant="None", scale="full")
    assert (cfg.seed, cfg.variant.value, cfg.train.scale) == (9, "None", "full")
    with pytest.raises(ConfigError):
        RunConfig.from_json(tiny()).with_overrides(variant="Nope")


# train / eval

def test_train_writes_one_checkpoint_per_kind(trained):
    cfg, out = trained
    run = out / "run_0"
    assert sorted(p.name for p in run.glob("policy_*.simq")) == ["policy_lifting.simq", "policy_pushing.simq"]
    assert len(list((run / "checkpoints").glob("*.simq"))) == 2 * 10
    rows = read_csv(run / "train_log.csv")
    assert int(rows[-1]["end_step"]) == 120
    meta = json.loads((run / "train_log.csv.meta.json").read_text())
    assert meta["seed"] == 3 and meta["config"] == cfg.to_json()


def test_eval_is_bit_identical_and_recomputable(trained, tmp_path):
    cfg, out = trained
    a = cmd_eval(cfg, out, tmp_path / "a")
    cmd_eval(cfg, out, tmp_path / "b")
    for name in ("eval_episodes.csv", "eval_summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert (tmp_path / "a" / (name + ".meta.json")).exists()
    rows = read_csv(tmp_path / "a" / "eval_episodes.csv")
    assert [int(r["seed"]) for r in rows] == [0, 1, 2]
    assert summarize(rows) == a.summary
    removed = [float(r["objects_removed"]) for r in rows]
    assert a.metric()["episodes_mean"] == float(np.mean(removed))


def test_eval_rejects_mismatched_checkpoints(trained, tmp_path):
    _, out = trained
    other = RunConfig.from_json(tiny(environment={"layout": "SmallEmpty", "dims": [6, 6], "num_objects": 2,
                                                  "team": "2T"}))
    with pytest.raises(Exception, match="throwing"):
        cmd_eval(other, out, tmp_path)
    wrong_channels = RunConfig.from_json(tiny(variant="PerRobotChannels", environment={
        "layout": "SmallEmpty", "dims": [6, 6], "num_objects": 2, "team": "2L+1P"}))
    with pytest.raises(Exception, match="layout"):
        cmd_eval(wrong_channels, out, tmp_path)


def test_random_baseline_eval(tmp_path):
    rep = cmd_eval(RunConfig.from_json(tiny()), None, tmp_path, random_policy=True)
    assert rep.run_names == ["random"] and len(rep.rows) == 3


# compare

def report(seeds, values):
    rows = [{"run": "run_0", "seed": s, "objects_removed": v, "ticks": 1, "return": 0.0, "obstacle_collisions": 0,
             "agent_collisions": 0, "distance": 0.0} for s, v in zip(seeds, values)]
    return EvalReport(rows, list(seeds), summarize(rows), ["run_0"])


def test_comparison_header_matches_golden():
    from intentmaps.perception import IntentionVariant
    cfg = RunConfig.from_json(tiny())
    reports = {v: report([0, 1], [1, 2]) for v in reversed(list(IntentionVariant))}
    header, row = comparison_table(cfg, reports)
    golden = next(csv.reader((GOLDEN / "compare_header.csv").read_text().splitlines()))
    assert header == golden
    assert row[:3] == ["1L+1P", "SmallEmpty", "1.50 ± 0.00"]


def test_two_variant_table_and_seed_check():
    cfg = RunConfig.from_json(tiny())
    header, _ = comparison_table(cfg, {"None": report([0, 1], [0, 1]), "RampPath": report([0, 1], [1, 1])})
    assert header == ["team", "layout", "RampPath", "None"]
    with pytest.raises(HarnessError):
        comparison_table(cfg, {"None": report([0, 1], [0, 1]), "RampPath": report([0, 2], [1, 1])})


# render

def test_single_tick_log_renders_one_dot_per_agent(tmp_path):
    cfg = RunConfig.from_json(tiny())
    log = tmp_path / "t.csv"
    log.write_text("tick,id,x,y,heading,carrying\n0,0,1.5,1.5,0.0,0\n0,1,4.5,4.5,0.0,0\n")
    (path,) = cmd_render(cfg, tmp_path / "r", trajectory_log=log)
    img = read_pnm(path)
    for aid in (0, 1):
        assert np.all(img == AGENT_COLORS[aid], axis=2).sum() == 1
    assert Path(str(path) + ".meta.json").exists()


def test_unreadable_log_is_input_error(tmp_path):
    cfg = RunConfig.from_json(tiny())
    (tmp_path / "bad.csv").write_text("nope\n1\n")
    with pytest.raises(ConfigError):
        cmd_render(cfg, tmp_path / "r", trajectory_log=tmp_path / "bad.csv")
    with pytest.raises(ConfigError):
        cmd_render(cfg, tmp_path / "r", trajectory_log=tmp_path / "missing.csv")


def test_checkpoint_render_is_reproducible(trained, tmp_path):
    cfg, out = trained
    a = cmd_render(cfg, tmp_path / "a", checkpoints=out)
    b = cmd_render(cfg, tmp_path / "b", checkpoints=out)
    assert [p.name for p in a] == [p.name for p in b]
    for p, q in zip(a, b):
        assert p.read_bytes() == q.read_bytes()
    qmaps = [p for p in a if p.name.startswith("qmap")]
    assert len(qmaps) == 2
    for p in qmaps:
        assert np.all(read_pnm(p) == ARGMAX_COLOR, axis=2).sum() == 1
    assert any(p.suffix == ".pgm" for p in a)


# CLI

def test_cli_exit_codes(trained, tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    _, out = trained
    assert main(["eval", "--config", str(cfg_path), "--checkpoints", str(out), "--out", str(tmp_path / "e")]) == 0
    assert "objects removed" in capsys.readouterr().out
    assert main(["eval", "--config", str(tmp_path / "missing.json"), "--random"]) == 1
    (tmp_path / "broken.json").write_text("{")
    assert main(["train", "--config", str(tmp_path / "broken.json")]) == 1
    assert main(["eval", "--config", str(cfg_path), "--variant", "Nope", "--random"]) == 1
    assert main(["eval", "--config", str(cfg_path), "--checkpoints", str(tmp_path / "none"),
                 "--out", str(tmp_path / "x")]) == 2
    assert main(["compare", "--config", str(cfg_path), "--variants", "RampPath,Nope",
                 "--out", str(tmp_path / "c")]) == 1
