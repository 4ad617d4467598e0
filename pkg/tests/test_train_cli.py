import json
from dataclasses import replace

import numpy as np
import pytest

from robattr import autodiff as ad
from robattr import checks, cli
from robattr.adversary import PgdConfig, pgd_prediction_attack
from robattr.attribution import read_pgm
from robattr.config import ConfigError, config_from_dict, load_config, parse_config
from robattr.metrics import EvalReport
from robattr.nn import Adam, load_checkpoint, loss
from robattr.train import (TrainLog, TrainingDiverged, build_network, epsilon_at, load_datasets,
                           sweep_from_csv, sweep_to_csv, train)

TINY = {
    "seed": 3,
    "data": {"kind": "synthetic", "synth": "two_gaussians", "n_train": 60, "n_test": 20},
    "model": {"layers": [["dense", 2, 6], ["relu"], ["dense", 6, 2]], "input_shape": [2]},
    "objective": {"variant": "IG_NORM", "lam": 0.5, "m_gradient": 4, "epsilon": 0.1},
    "attack": {"steps": 2, "step_size": 0.05, "m_attack": 3, "epsilon": 0.1},
    "eval_attack": {"steps": 5, "step_size": 0.03, "epsilon": 0.1},
    "ifia": {"k": 2, "k_metric": 1, "epsilon": 0.1, "iters": 3, "restarts": 2,
             "m_attack": 3, "m_eval": 6},
    "optim": {"steps": 12, "batch_size": 20, "log_every": 4, "lr": 0.01},
}


def write_cfg(tmp_path, **changes):
    raw = json.loads(json.dumps(TINY))
    for key, value in changes.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return path


def test_malformed_json_reports_position(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "seed": 1,\n  "data": {,}\n}')
    with pytest.raises(ConfigError, match="line 3, column 12"):
        load_config(path)
    assert cli.main(["train", str(path)]) == 2
    assert "line 3" in capsys.readouterr().err


@pytest.mark.parametrize("raw, match", [
    ({"data": {"kind": "synthetic"}}, "seed"),
    ({"seed": 1, "colour": "red"}, "unknown"),
    ({"seed": 1, "optim": {"stepz": 3}}, "unknown"),
    ({"seed": 1, "data": {"kind": "idx", "train_images": "nope", "train_labels": "nope",
                          "test_images": "nope", "test_labels": "nope"}}, "not found"),
    ({"seed": 1, "data": {"kind": "synthetic"}, "objective": {"variant": "MADRY", "lam": 2.0}},
     "objective"),
    ({"seed": 1.5, "data": {"kind": "synthetic"}}, "integer"),
])
def test_config_validation(raw, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(raw)


def test_overrides_and_paths(tmp_path):
    cfg = load_config(write_cfg(tmp_path))
    o = cfg.with_overrides(seed=9, m_gradient=7, m_attack=2, epsilon=0.2, threads=2)
    assert (o.seed, o.objective.m_gradient, o.attack.m_attack, o.threads) == (9, 7, 2, 2)
    assert o.objective.epsilon == o.attack.epsilon == o.eval_attack.epsilon == o.ifia.epsilon == 0.2
    assert cfg.out_path == tmp_path / "runs/default"
    assert parse_config(cfg.to_json()).to_dict() == cfg.to_dict()


def test_usage_errors_exit_2(capsys):
    assert cli.main(["frobnicate"]) == 2
    assert cli.main([]) == 2
    assert cli.main(["check", "--suite", "nope"]) == 2


def test_check_exit_codes(monkeypatch, capsys):
    assert cli.main(["check", "--suite", "metrics"]) == 0
    assert "PASS" in capsys.readouterr().out
    failing = lambda: checks.CheckResult("always_fails", False, "forced")
    monkeypatch.setitem(checks.SUITES, "fake", failing)
    assert cli.main(["check", "--suite", "metrics", "--suite", "fake"]) == 1


def test_train_evaluate_attack_round_trip(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["train", str(cfg_path), "--out", str(out)]) == 0
    for name in ("config.json", "checkpoint.atrg", "train_log.csv"):
        assert (out / name).exists()
    log = TrainLog.from_csv((out / "train_log.csv").read_text())
    assert [r["step"] for r in log.rows] == [0, 4, 8, 11]
    assert TrainLog.from_csv(log.to_csv()) == log

    ck = str(out / "checkpoint.atrg")
    assert cli.main(["evaluate", str(cfg_path), ck, "--out", str(out)]) == 0
    report = EvalReport.from_json((out / "report.json").read_text())
    assert EvalReport.from_json(report.to_json()) == report
    rows = EvalReport.rows_from_csv((out / "report.csv").read_text())
    assert [r["adv_correct"] for r in rows] == [r["adv_correct"] for r in report.per_sample]

    # the saved config reproduces the run
    cfg = load_config(out / "config.json")
    net = build_network(cfg)
    net.set_params(load_checkpoint(ck))
    _, test_set = load_datasets(cfg)
    assert report.nat_acc == (net.predict(test_set.x) == test_set.y).mean()

    assert cli.main(["attack", str(cfg_path), ck, "--out", str(out), "--limit", "3"]) == 0
    pgms = sorted((out / "attack").glob("*_clean.pgm"))
    assert len(pgms) == 3
    px, bounds = read_pgm(pgms[0])
    assert px.shape == (1, 2) and set(bounds) == {"min", "max"}
    assert (out / "attack" / "metrics.csv").read_text().startswith("index,label,kendall")


def test_zero_radius_evaluation(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["train", str(cfg_path), "--out", str(out)]) == 0
    assert cli.main(["evaluate", str(cfg_path), str(out / "checkpoint.atrg"), "--out", str(out),
                     "--epsilon", "0"]) == 0
    rep = EvalReport.from_json((out / "report.json").read_text())
    assert rep.adv_acc == rep.nat_acc and rep.kendall == 1.0 and rep.topk_inter == 1.0


def test_bad_checkpoint_exits_2(tmp_path):
    cfg_path = write_cfg(tmp_path)
    bad = tmp_path / "bad.atrg"
    bad.write_bytes(b"nope")
    assert cli.main(["evaluate", str(cfg_path), str(bad)]) == 2


def test_zero_weight_matches_a_plain_training_loop(tmp_path):
    cfg = load_config(write_cfg(tmp_path, objective={"lam": 0.0}))
    tr, _ = load_datasets(cfg)
    net, _ = train(cfg, tr)

    ref = build_network(cfg)
    opt = Adam(cfg.optim.lr)
    bs = cfg.optim.batch_size
    for step in range(cfg.optim.steps):
        epoch, pos = divmod(step, len(tr) // bs)
        perm = np.random.default_rng([cfg.seed, 0, epoch]).permutation(len(tr))
        idx = perm[pos * bs:(pos + 1) * bs]
        names = list(ref.params)
        grads = ad.grad(ad.mean(loss(ref, tr.x[idx], tr.y[idx])), [ref.params[k] for k in names],
                        create_graph=False)
        ref.set_params(opt.step(ref.param_values(), {k: g.value for k, g in zip(names, grads)}))
    for k, v in ref.param_values().items():
        np.testing.assert_array_equal(net.params[k].value, v)


def test_threads_do_not_change_results(tmp_path):
    cfg = load_config(write_cfg(tmp_path, optim={"attack_chunk": 7}))
    tr, _ = load_datasets(cfg)
    a, _ = train(cfg, tr)
    b, _ = train(cfg.with_overrides(threads=3), tr)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].value, b.params[k].value)


def test_divergence_stops_with_snapshot(tmp_path):
    cfg = load_config(write_cfg(tmp_path, optim={"lr": 1e300, "kind": "sgd", "momentum": 0.0}))
    tr, _ = load_datasets(cfg)
    with pytest.raises(TrainingDiverged, match="snapshot"):
        train(cfg, tr, out=tmp_path / "out")
    snap = tmp_path / "out" / "diverged"
    state = json.loads((snap / "state.json").read_text())
    assert state["step"] >= 1 and len(state["batch"]) == cfg.optim.batch_size
    assert set(load_checkpoint(snap / "params.atrg")) == set(build_network(cfg).params)


def test_epsilon_ramp(tmp_path):
    cfg = load_config(write_cfg(tmp_path, optim={"epsilon_ramp_steps": 10}))
    assert [epsilon_at(cfg, s) for s in (0, 5, 10, 50)] == [0.0, 0.05, 0.1, 0.1]
    flat = replace(cfg, optim=replace(cfg.optim, epsilon_ramp_steps=0))
    assert epsilon_at(flat, 0) == 0.1


def test_sweep_cli_and_csv(tmp_path):
    cfg_path = write_cfg(tmp_path, optim={"steps": 4})
    out = tmp_path / "sweep"
    assert cli.main(["sweep-m", str(cfg_path), "--m", "2", "5", "--out", str(out)]) == 0
    table = sweep_from_csv((out / "sweep_m.csv").read_text())
    assert [r["m"] for r in table] == [2, 5]
    assert sweep_from_csv(sweep_to_csv(table)) == table
    assert all(0 <= r["nat_acc"] <= 1 and r["ig_residual"] >= 0 for r in table)


def test_untrained_network_is_near_chance_under_attack(mnist_dir):
    cfg = config_from_dict({"seed": 0, "data": {
        "kind": "idx", "train_images": str(mnist_dir / "train-images-idx3-ubyte"),
        "train_labels": str(mnist_dir / "train-labels-idx1-ubyte"),
        "test_images": str(mnist_dir / "test-images-idx3-ubyte"),
        "test_labels": str(mnist_dir / "test-labels-idx1-ubyte"), "test_limit": 200}})
    _, te = load_datasets(cfg)
    net = build_network(cfg)
    nat = net.predict(te.x) == te.y
    _, success = pgd_prediction_attack(net, te.x, te.y, PgdConfig(steps=20, step_size=0.03),
                                       key=(0, 1))
    assert nat.mean() < 0.25
    assert (nat & ~success).mean() <= 0.02
