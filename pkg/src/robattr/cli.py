"""Command-line entry point: ``robattr {train,evaluate,attack,check,sweep-m}``."""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from .adversary import ifia_topk
from .attribution import saliency, write_pgm
from .config import ConfigError, ExperimentConfig, load_config
from .data import IdxError
from .nn import CheckpointError, load_checkpoint

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--threads", type=int, help="worker threads for the attack step")
    p.add_argument("--m-gradient", type=int, help="IG segments in the gradient step")
    p.add_argument("--m-attack", type=int, help="IG segments in the training attack")
    p.add_argument("--epsilon", type=float, help="neighborhood radius for training and evaluation")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="robattr", description="Robust attribution training and verification.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("config")
    _overrides(t)

    e = sub.add_parser("evaluate", help="accuracy, PGD accuracy and IFIA metrics for a checkpoint")
    e.add_argument("config")
    e.add_argument("checkpoint")
    _overrides(e)

    a = sub.add_parser("attack", help="run IFIA and export saliency maps as PGM pairs")
    a.add_argument("config")
    a.add_argument("checkpoint")
    a.add_argument("--limit", type=int, default=10, help="number of correctly classified samples")
    _overrides(a)

    c = sub.add_parser("check", help="run the numerical verification suites")
    c.add_argument("--suite", action="append", help="run only this suite (repeatable)")

    s = sub.add_parser("sweep-m", help="train and evaluate one model per gradient-step m")
    s.add_argument("config")
    s.add_argument("--m", type=int, nargs="+", default=[2, 8, 32])
    _overrides(s)
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, out=args.out, threads=args.threads,
                              m_gradient=args.m_gradient, m_attack=args.m_attack,
                              epsilon=args.epsilon)


def _load_net(cfg: ExperimentConfig, path):
    from .train import build_network
    net = build_network(cfg)
    net.set_params(load_checkpoint(path))
    return net


def _image_shape(input_shape) -> tuple[int, int]:
    if len(input_shape) >= 2:
        return tuple(input_shape[-2:])
    side = int(math.isqrt(int(input_shape[0])))
    return (side, side) if side * side == input_shape[0] else (1, int(input_shape[0]))


def cmd_train(args) -> int:
    from .train import load_datasets, train, write_outputs
    cfg = _config(args)
    out = cfg.out_path
    train_set, _ = load_datasets(cfg)

    def show(row):
        print(f"step {row['step']:>6}  loss {row['loss_term']:.4f}  reg {row['reg_term']:.4f}", flush=True)
    net, log = train(cfg, train_set, out=out, progress=show)
    write_outputs(out, net=net, log=log, cfg=cfg)
    print(f"wrote {out / 'checkpoint.atrg'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .train import evaluate_net, load_datasets, write_outputs
    cfg = _config(args)
    net = _load_net(cfg, args.checkpoint)
    _, test_set = load_datasets(cfg)
    report = evaluate_net(net, test_set, cfg)
    write_outputs(cfg.out_path, report=report)
    print(f"nat_acc {report.nat_acc:.4f}  adv_acc {report.adv_acc:.4f}  "
          f"topk_inter {report.topk_inter}  kendall {report.kendall}")
    return EXIT_OK


def cmd_attack(args) -> int:
    from .train import load_datasets
    cfg = _config(args)
    net = _load_net(cfg, args.checkpoint)
    _, test_set = load_datasets(cfg)
    good = np.flatnonzero(net.predict(test_set.x) == test_set.y)[:args.limit]
    out = cfg.out_path / "attack"
    out.mkdir(parents=True, exist_ok=True)
    x, y = test_set.x[good], test_set.y[good]
    res = ifia_topk(net, x, y, cfg.ifia, key=(cfg.seed, 2), ids=good)
    shape = _image_shape(net.input_shape)
    clean = saliency(net, x, y, cfg.ifia.method, cfg.ifia.m_eval)
    pert = saliency(net, res.x_pert, y, cfg.ifia.method, cfg.ifia.m_eval)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "kendall", "topk_inter", "restart"])
        for j, i in enumerate(good):
            w.writerow([int(i), int(y[j]), repr(float(res.kendall[j])), repr(float(res.topk_inter[j])),
                        int(res.restart[j])])
            write_pgm(out / f"sample{i}_clean.pgm", clean[j].reshape(shape))
            write_pgm(out / f"sample{i}_perturbed.pgm", pert[j].reshape(shape))
    print(f"{len(good)} samples: mean kendall {res.kendall.mean():.4f}, "
          f"mean top-k {res.topk_inter.mean():.4f}; wrote {out}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import SUITES, run_all
    names = args.suite or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        print(f"unknown suite(s) {unknown}; available: {sorted(SUITES)}", file=sys.stderr)
        return EXIT_USAGE
    results = run_all(names, progress=lambda r: print(r.line(), flush=True))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_sweep(args) -> int:
    from .train import run_m_sweep, sweep_to_csv
    cfg = _config(args)
    table = run_m_sweep(cfg, args.m, progress=lambda r: print(r, flush=True))
    out = cfg.out_path
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep_m.csv").write_text(sweep_to_csv(table))
    print(f"wrote {out / 'sweep_m.csv'}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "attack": cmd_attack,
            "check": cmd_check, "sweep-m": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, IdxError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
