from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kitchenil.collect import waypoint_action
from kitchenil.harness import pipeline as P
from kitchenil.harness.cli import main, parse_ids
from kitchenil.harness.config import load, loads
from kitchenil.harness.evaluate import (CellResult, EvalReport, PolicyBundle, evaluate_layouts,
                                        mean_stderr, report_from_csv)
from kitchenil.numcore import ConfigError
from kitchenil.policy import init_policy

FIXTURES = Path(__file__).parent / "fixtures"


# ----------------------------------------------------------------- config
def test_bundled_configs_load(cfg, tiny_cfg):
    assert [t.name for t in cfg.tasks][:2] == ["reach_switch", "drag_mug"]
    assert cfg.layouts.study_counts == (2, 5, 10)
    assert tiny_cfg.train.epochs < cfg.train.epochs and tiny_cfg.tasks == cfg.tasks


def test_config_text_round_trips(cfg):
    assert loads(cfg.to_text()).to_text() == cfg.to_text()


@pytest.mark.parametrize("text,match", [
    ("[include]\nbase = default\n[train]\nepochz = 3\n", "unknown key 'epochz'"),
    ("[include]\nbase = default\n[trian]\nepochs = 3\n", "unknown config section"),
    ("[include]\nbase = default\n[train]\nmode = thaw\n", "mode"),
    ("[include]\nbase = default\n[train]\nepochs = many\n", "epochs"),
    ("[include]\nbase = default\n[study]\nscaling_arms = state,pixels\n", "subset"),
    ("[include]\nbase = nothere\n", "not found"),
    ("[include]\nbase = default\n[layouts]\nstudy_counts = 5,2\n", "ascending"),
])
def test_bad_configs_are_rejected(text, match):
    with pytest.raises(ConfigError, match=match):
        loads(text)


def test_overrides_apply(cfg):
    c = load("default", {"train.epochs": "3", "pipeline.master_seed": "9"})
    assert c.train.epochs == 3 and c.pipeline.master_seed == 9
    assert cfg.replace(**{"eval.episodes_per_cell": 2}).eval.episodes_per_cell == 2


# ---------------------------------------------------------------- reports
@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["a", "b"]), st.lists(st.booleans(), min_size=1,
                                                                  max_size=6)),
                min_size=1, max_size=8))
def test_report_aggregates_match_recount(cells):
    rep = EvalReport([CellResult(t, 0, i, "heldout", o) for i, (t, o) in enumerate(cells)])
    rates = [sum(o) / len(o) for _, o in cells]
    m, se = rep.overall("heldout")
    assert m == pytest.approx(np.mean(rates))
    if len(rates) > 1:
        assert se == pytest.approx(np.std(rates, ddof=1) / np.sqrt(len(rates)))
    for name, (tm, _) in rep.by_task().items():
        assert tm == pytest.approx(np.mean([r for (t, _), r in zip(cells, rates) if t == name]))
    back = report_from_csv(rep.to_csv())
    assert back.overall() == pytest.approx(rep.overall())


def test_mean_stderr_edge_cases():
    assert mean_stderr([0.5]) == (0.5, 0.0)
    assert np.isnan(mean_stderr([])[0])


# --------------------------------------------------------------- layouts
def test_heldout_layouts_are_disjoint_from_training(kitchen, cfg):
    suite = P.make_heldout_suite(kitchen, 10, 0, cfg.layouts.heldout_id_base, cfg)
    train = [P.train_layout(kitchen, 0, i) for i in range(10)]
    assert not set(suite.layout_ids) & {lay.layout_id for lay in train}
    for h in suite.layouts:
        assert all(not np.array_equal(h.poses, t.poses) for t in train)
    with pytest.raises(P.StageError, match="heldout"):
        P.collect_stage(cfg, [cfg.layouts.heldout_id_base], "/tmp/never", 0)


def _script_controller(kitchen):
    def factory(task):
        done = {}

        def ctrl(states, goals):
            out = []
            for k, (s, g) in enumerate(zip(states, goals)):
                a, done[k] = waypoint_action(kitchen, s, task, g, done.get(k, False))
                out.append(a)
            return out
        return ctrl
    return factory


def _bundle(cfg, kitchen, seed=0):
    from kitchenil.collect import feature_dim
    from kitchenil.policy import context_dim
    p = init_policy(feature_dim(kitchen), context_dim(len(cfg.tasks), kitchen.n_objects), (16,),
                    np.random.default_rng(seed))
    return PolicyBundle(p, None, bytes(32), "context", "state", list(range(2)), cfg.to_text(), 0)


def test_scripted_oracle_scores_one_on_heldout(kitchen, cfg):
    suite = P.make_heldout_suite(kitchen, 5, 0, cfg.layouts.heldout_id_base, cfg)
    rep = evaluate_layouts(kitchen, _bundle(cfg, kitchen), cfg.tasks, suite.layouts, "heldout", 2,
                           cfg.pipeline.horizon, 0, True, shuffle=True,
                           theme_sampler=lambda r: suite.theme(kitchen, r),
                           controller_factory=_script_controller(kitchen))
    assert rep.overall()[0] == 1.0


def test_untrained_policy_scores_near_zero(cfg):
    rep = P.evaluate(_bundle(cfg, P.make_kitchen(cfg)), "heldout", episodes_per_cell=3)
    assert rep.overall()[0] < 0.05


def test_evaluation_is_deterministic(cfg):
    b = _bundle(cfg, P.make_kitchen(cfg), seed=3)
    a = P.evaluate(b, "train", episodes_per_cell=2, seed=4, shuffle=True).to_csv()
    assert a == P.evaluate(b, "train", episodes_per_cell=2, seed=4, shuffle=True).to_csv()


def test_bundle_round_trip(cfg, kitchen, tmp_path):
    b = _bundle(cfg, kitchen)
    b.save(tmp_path / "p.npz")
    c = PolicyBundle.load(tmp_path / "p.npz")
    assert c.config.to_text() == cfg.to_text() and c.input_kind == "state"
    assert all(np.array_equal(x, y) for x, y in zip(b.params.arrays(), c.params.arrays()))


# -------------------------------------------------------------------- CLI
def test_parse_ids():
    assert parse_ids("0-3,7") == [0, 1, 2, 3, 7]


def test_cli_exit_codes(capsys, tmp_path):
    assert main(["nonsense"]) == 2
    assert main(["eval", "--policy", str(tmp_path / "missing.npz")]) == 1
    assert main(["run", "--set", "train.epochz=1", "--out", str(tmp_path)]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_cli_inspect(capsys, tmp_path):
    assert main(["inspect", str(FIXTURES / "golden.cact"), str(FIXTURES / "golden.cemb")]) == 0
    out = capsys.readouterr().out
    assert "task_id: 3" in out and "entry_count: 3" in out
    bad = tmp_path / "junk.bin"
    bad.write_bytes(b"JUNKJUNK")
    assert main(["inspect", str(bad)]) == 1
    assert "unrecognized magic" in capsys.readouterr().err


def test_cli_stage_by_stage(tmp_path, capsys):
    common = ["--config", "tiny", "--set", "pipeline.jobs=1"]
    assert main(["collect", *common, "--tasks", "reach_switch,open_toaster", "--layouts", "0-1",
                 "--out", str(tmp_path / "raw")]) == 0
    assert main(["augment", *common, "--in", str(tmp_path / "raw"), "--out",
                 str(tmp_path / "aug")]) == 0
    assert main(["compress", *common, "--mode", "frozen", "--in", str(tmp_path / "aug"),
                 "--out", str(tmp_path / "cache" / "random.cemb")]) == 0
    assert main(["train", *common, "--cache", str(tmp_path / "cache" / "random.cemb"),
                 "--shards", str(tmp_path / "aug"), "--out", str(tmp_path / "policy.npz")]) == 0
    assert main(["eval", *common, "--policy", str(tmp_path / "policy.npz"), "--split", "train",
                 "--episodes", "1", "--tasks", "reach_switch,open_toaster", "--out", str(tmp_path / "eval.csv")]) == 0
    assert (tmp_path / "eval.csv").read_text().startswith("kind,split,task")
    assert main(["inspect", str(tmp_path / "policy.npz")]) == 0
    assert "input: visual" in capsys.readouterr().out
