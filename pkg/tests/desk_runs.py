"""Desk-scale MNIST runs shared by the acceptance criteria, cached on disk.

A run is keyed by its resolved config and the package source, so editing
either retrains.  Set ROBATTR_DESK_CACHE to move the cache.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import robattr
from robattr.config import load_config
from robattr.metrics import EvalReport
from robattr.train import TrainLog, evaluate_net, load_datasets, train, write_outputs

from conftest import ROOT, ensure_mnist_subset

CONFIGS = ROOT / "configs"
CACHE = Path(os.environ.get("ROBATTR_DESK_CACHE", ROOT / ".cache" / "desk"))
VARIANTS = ("natural", "ig_norm", "ig_sum_norm")
SEEDS = (0, 1, 2)


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(robattr.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def desk_config(variant: str, seed: int):
    ensure_mnist_subset()
    return load_config(CONFIGS / f"desk_{variant}.json").with_overrides(seed=seed)


def desk_run(variant: str, seed: int) -> dict:
    """Train and evaluate one desk configuration (or load it from the cache)."""
    cfg = desk_config(variant, seed)
    key = hashlib.sha256((cfg.to_json() + _source_digest()).encode()).hexdigest()[:16]
    out = CACHE / f"{variant}_s{seed}_{key}"
    done = out / "timing.json"
    if not done.exists():
        train_set, test_set = load_datasets(cfg)
        t0 = time.perf_counter()
        net, log = train(cfg, train_set)
        t1 = time.perf_counter()
        report = evaluate_net(net, test_set, cfg)
        t2 = time.perf_counter()
        write_outputs(out, net=net, log=log, report=report, cfg=cfg)
        done.write_text(json.dumps({"train_s": t1 - t0, "eval_s": t2 - t1}))
    return {
        "report": EvalReport.from_json((out / "report.json").read_text()),
        "log": TrainLog.from_csv((out / "train_log.csv").read_text()),
        "timing": json.loads(done.read_text()),
        "dir": out,
    }
