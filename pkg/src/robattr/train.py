"""Training loop (attack step, then gradient step) and experiment drivers."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adversary import pgd_inner_max
from .config import ExperimentConfig
from .data import Dataset, load_idx, synth_dataset
from .metrics import EvalReport, evaluate
from .nn import Network, make_optimizer, save_checkpoint
from .objectives import objective_grad

LOG_FIELDS = ("step", "objective", "loss_term", "reg_term", "ig_residual")


class TrainingDiverged(ArithmeticError):
    pass


@dataclass
class TrainLog:
    rows: list[dict]

    def series(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_FIELDS})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            rows.append({k: int(r[k]) if k == "step" else float(r[k]) for k in LOG_FIELDS})
        return cls(rows)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.kind == "synthetic":
        train = synth_dataset(d.synth, d.n_train, cfg.seed)
        test = synth_dataset(d.synth, d.n_test, cfg.seed + 1)
        test.split = "test"
    else:
        train = load_idx(cfg.resolve(d.train_images), cfg.resolve(d.train_labels), "idx", "train")
        test = load_idx(cfg.resolve(d.test_images), cfg.resolve(d.test_labels), "idx", "test")
    if d.train_limit:
        train = train.take(slice(0, d.train_limit))
    if d.test_limit:
        test = test.take(slice(0, d.test_limit))
    if d.flatten:
        train, test = train.flat(), test.flat()
    else:
        train = Dataset(train.x.reshape(len(train), 1, *train.input_shape), train.y, train.name,
                        train.split, train.num_classes) if train.x.ndim == 3 else train
        test = Dataset(test.x.reshape(len(test), 1, *test.input_shape), test.y, test.name,
                       test.split, test.num_classes) if test.x.ndim == 3 else test
    return train, test


def build_network(cfg: ExperimentConfig) -> Network:
    m = cfg.model
    return Network(m.layers, m.input_shape, seed=cfg.seed, smooth=m.smooth)


def epsilon_at(cfg: ExperimentConfig, step: int) -> float:
    """Neighborhood radius at ``step``: linear warm-up over ``epsilon_ramp_steps``."""
    ramp = cfg.optim.epsilon_ramp_steps
    eps = cfg.objective.epsilon
    return eps if ramp <= 0 or step >= ramp else eps * step / ramp


def _attack_batch(spec, net, xb, yb, idx, cfg: ExperimentConfig, step: int, pool) -> np.ndarray:
    """Attack step in fixed-size chunks; the chunking does not depend on ``threads``."""
    chunk = max(1, cfg.optim.attack_chunk)
    starts = list(range(0, len(xb), chunk))
    eps = epsilon_at(cfg, step)
    attack = cfg.attack if eps == cfg.attack.epsilon else replace(cfg.attack, epsilon=eps)

    def run(s):
        sl = slice(s, s + chunk)
        return pgd_inner_max(spec, net, xb[sl], yb[sl], attack, key=(cfg.seed, 3, step),
                             ids=idx[sl])
    parts = list(pool.map(run, starts)) if pool is not None else [run(s) for s in starts]
    return np.concatenate(parts)


def _snapshot(out: Path | None, net: Network, step: int, idx, stats) -> Path | None:
    if out is None:
        return None
    snap = out / "diverged"
    snap.mkdir(parents=True, exist_ok=True)
    save_checkpoint(snap / "params.atrg", net.param_values())
    (snap / "state.json").write_text(json.dumps({"step": step, "batch": [int(i) for i in idx],
                                                 "stats": stats}, indent=2))
    return snap


def train(cfg: ExperimentConfig, train_set: Dataset | None = None, out: Path | None = None,
          progress=None) -> tuple[Network, TrainLog]:
    """Train a network under ``cfg.objective``.

    Each step draws a minibatch from a seeded per-epoch permutation, finds x*
    for every sample, and applies the optimizer to the objective gradient at
    the frozen x*.  A non-finite loss stops training with a snapshot written
    to ``out/diverged``.
    """
    if train_set is None:
        train_set, _ = load_datasets(cfg)
    spec = cfg.objective.spec()
    net = build_network(cfg)
    opt = make_optimizer(cfg.optim.kind, cfg.optim.lr, cfg.optim.momentum)
    n, bs = len(train_set), min(cfg.optim.batch_size, len(train_set))
    per_epoch = n // bs
    rows: list[dict] = []
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    perm = None
    try:
        for step in range(cfg.optim.steps):
            epoch, pos = divmod(step, per_epoch)
            if pos == 0:
                perm = np.random.default_rng([cfg.seed, 0, epoch]).permutation(n)
            idx = perm[pos * bs:(pos + 1) * bs]
            xb, yb = train_set.x[idx], train_set.y[idx]
            try:
                x_star = _attack_batch(spec, net, xb, yb, idx, cfg, step, pool)
                grads, stats = objective_grad(spec, net, xb, yb, x_star)
            except ad.NonFiniteError as e:
                snap = _snapshot(out, net, step, idx, {})
                raise TrainingDiverged(f"step {step}: {e}; snapshot at {snap}") from e
            if not all(np.isfinite(v) for v in stats.values()):
                snap = _snapshot(out, net, step, idx, stats)
                raise TrainingDiverged(f"step {step}: non-finite objective {stats}; snapshot at {snap}")
            net.set_params(opt.step(net.param_values(), grads))
            last = step == cfg.optim.steps - 1
            if step % cfg.optim.log_every == 0 or last:
                row = {"step": step, "objective": stats["objective"], "loss_term": stats["loss_term"],
                       "reg_term": stats["reg_term"], "ig_residual": stats.get("ig_residual", 0.0)}
                rows.append(row)
                if progress is not None:
                    progress(row)
    finally:
        if pool is not None:
            pool.shutdown()
    return net, TrainLog(rows)


def evaluate_net(net: Network, test_set: Dataset, cfg: ExperimentConfig) -> EvalReport:
    return evaluate(net, test_set.x, test_set.y, cfg.eval_attack, cfg.ifia, seed=cfg.seed)


def write_outputs(out: Path, net: Network | None = None, log: TrainLog | None = None,
                  report: EvalReport | None = None, cfg: ExperimentConfig | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        (out / "config.json").write_text(cfg.to_json())
    if net is not None:
        save_checkpoint(out / "checkpoint.atrg", net.param_values())
    if log is not None:
        (out / "train_log.csv").write_text(log.to_csv())
    if report is not None:
        (out / "report.json").write_text(report.to_json())
        (out / "report.csv").write_text(report.to_csv())


# -- m sweep --------------------------------------------------------------------------

SWEEP_FIELDS = ("m", "nat_acc", "adv_acc", "topk_inter", "kendall", "ig_residual")


def run_m_sweep(cfg: ExperimentConfig, ms, progress=None) -> list[dict]:
    """Train one model per gradient-step ``m`` and evaluate all with the same attacks."""
    train_set, test_set = load_datasets(cfg)
    table = []
    for m in ms:
        run_cfg = cfg.with_overrides(m_gradient=int(m))
        net, log = train(run_cfg, train_set)
        report = evaluate_net(net, test_set, run_cfg)
        res = log.series("ig_residual")
        row = {"m": int(m), "nat_acc": report.nat_acc, "adv_acc": report.adv_acc,
               "topk_inter": report.topk_inter, "kendall": report.kendall,
               "ig_residual": float(res.mean()) if res.size else 0.0}
        table.append(row)
        if progress is not None:
            progress(row)
    return table


def sweep_to_csv(table: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in table:
        w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in SWEEP_FIELDS})
    return buf.getvalue()


def sweep_from_csv(text: str) -> list[dict]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        out.append({k: int(r[k]) if k == "m" else (float(r[k]) if r[k] not in ("", "None") else None)
                    for k in SWEEP_FIELDS})
    return out
