"""Experiment configuration: one JSON document, loaded into dataclasses."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .adversary import IfiaConfig, PgdConfig
from .nn import INPUT
from .objectives import Neighborhood, ObjectiveSpec


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "idx"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    synth: str = "two_gaussians"
    n_train: int = 200
    n_test: int = 100
    train_limit: int | None = None
    test_limit: int | None = None
    flatten: bool = True


@dataclass
class ModelConfig:
    layers: list = field(default_factory=lambda: [["dense", 784, 128], ["relu"], ["dense", 128, 64],
                                                  ["relu"], ["dense", 64, 10]])
    input_shape: list = field(default_factory=lambda: [784])
    smooth: bool = False


@dataclass
class ObjectiveConfig:
    variant: str = "IG_NORM"
    lam: float = 1.0
    beta: float = 0.1
    lam_prime: float = 1.0
    q: float = 1.0
    layer: str = INPUT
    m_gradient: int = 16
    epsilon: float = 0.3
    loss_kind: str = "cross_entropy_nll"

    def spec(self) -> ObjectiveSpec:
        variant = self.variant.upper()
        lam = self.lam
        if variant == "NATURAL":
            variant, lam = "IG_NORM", 0.0
        m = 1 if variant == "INPUT_GRAD_REG" else self.m_gradient
        return ObjectiveSpec(variant, lam, self.beta, self.lam_prime, self.q, self.layer, m,
                             Neighborhood(self.epsilon), self.loss_kind)


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    steps: int = 2000
    batch_size: int = 50
    log_every: int = 50
    attack_chunk: int = 50
    epsilon_ramp_steps: int = 0


@dataclass
class ExperimentConfig:
    seed: int
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    attack: PgdConfig = field(default_factory=PgdConfig)
    eval_attack: PgdConfig = field(default_factory=lambda: PgdConfig(steps=100, step_size=0.01))
    ifia: IfiaConfig = field(default_factory=IfiaConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    out_dir: str = "runs/default"
    threads: int = 1
    base_dir: str = field(default=".", repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_path(self) -> Path:
        return self.resolve(self.out_dir)

    def with_overrides(self, seed=None, out=None, threads=None, m_gradient=None, m_attack=None,
                       epsilon=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if out is not None:
            cfg = replace(cfg, out_dir=str(Path(out).resolve()))
        if threads is not None:
            cfg = replace(cfg, threads=int(threads))
        if m_gradient is not None:
            cfg = replace(cfg, objective=replace(cfg.objective, m_gradient=int(m_gradient)))
        if m_attack is not None:
            cfg = replace(cfg, attack=replace(cfg.attack, m_attack=int(m_attack)))
        if epsilon is not None:
            e = float(epsilon)
            cfg = replace(cfg, objective=replace(cfg.objective, epsilon=e),
                          attack=replace(cfg.attack, epsilon=e),
                          eval_attack=replace(cfg.eval_attack, epsilon=e),
                          ifia=replace(cfg.ifia, epsilon=e))
        return cfg


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_dict(raw: dict, base_dir=".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "seed" not in raw:
        raise ConfigError("config: 'seed' is required")
    raw = dict(raw)
    parts = {"data": DataConfig, "model": ModelConfig, "objective": ObjectiveConfig,
             "attack": PgdConfig, "eval_attack": PgdConfig, "ifia": IfiaConfig,
             "optim": OptimConfig}
    kwargs = {k: _build(cls, raw.pop(k), k) for k, cls in parts.items() if k in raw}
    unknown = set(raw) - {"seed", "out_dir", "threads"}
    if unknown:
        raise ConfigError(f"config: unknown field(s) {sorted(unknown)}")
    if not isinstance(raw["seed"], int):
        raise ConfigError("config: 'seed' must be an integer")
    cfg = ExperimentConfig(seed=raw["seed"], out_dir=raw.get("out_dir", "runs/default"),
                           threads=int(raw.get("threads", 1)), base_dir=str(base_dir), **kwargs)
    try:
        cfg.objective.spec()
    except ValueError as e:
        raise ConfigError(f"objective: {e}") from None
    if cfg.data.kind == "idx":
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            path = cfg.resolve(getattr(cfg.data, name))
            if path is None:
                raise ConfigError(f"data.{name} is required for idx data")
            if not path.exists():
                raise ConfigError(f"data.{name}: file not found: {path}")
    elif cfg.data.kind != "synthetic":
        raise ConfigError(f"data.kind must be 'idx' or 'synthetic', got {cfg.data.kind!r}")
    return cfg


def parse_config(text: str, base_dir=".") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    return config_from_dict(raw, base_dir)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, base_dir=path.resolve().parent)
