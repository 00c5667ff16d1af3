"""Run configuration: nested dataclasses loaded from YAML with strict key checking."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

OUTPUT_ROOT_ENV = "VDEXPLORE_OUTPUT_ROOT"


@dataclass
class EnvSection:
    name: str | None = None
    params: dict = field(default_factory=dict)


@dataclass
class ModelSection:
    action_hidden: int = 64
    ird_hidden: int = 32
    ird_out: int = 5
    mixer_embed: int = 32
    hyper_hidden: int = 32
    nonneg: str = "softmax"


@dataclass
class ReplaySection:
    capacity: int = 5000
    alpha: float = 0.5
    c: float = -1e-4
    p_min: float = 1e-3
    uniform: bool = False
    leaf: str = "isweight"


@dataclass
class ScheduleSection:
    lr: float = 5e-4
    clip_norm: float | None = 10.0
    gamma_ext: float = 0.99
    gamma_int: float = 0.95
    beta: float = 0.5
    beta_dec: float = 1e-4
    beta_every: int = 1000
    intrinsic: bool = True
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal: int = 50_000


@dataclass
class RuntimeSection:
    workers: int = 3
    actors: int = 4
    distributed: bool = True
    queue_bound: int = 64
    publish_every: int = 100
    target_sync: int = 200
    norm_every: int = 50
    batch_size: int = 32


@dataclass
class BudgetSection:
    env_steps: int = 1_000_000
    train_steps: int | None = None
    eval_interval: int = 5000
    eval_episodes: int = 32
    log_every: int = 100
    stop_on_win: bool = False


@dataclass
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    model: ModelSection = field(default_factory=ModelSection)
    replay: ReplaySection = field(default_factory=ReplaySection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    runtime: RuntimeSection = field(default_factory=RuntimeSection)
    budget: BudgetSection = field(default_factory=BudgetSection)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / (self.env.name or "run")


SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(path: str, value: Any, default: Any, annotation: str) -> Any:
    if value is None:
        if "None" in annotation:
            return None
        raise ConfigError(f"{path}: must not be null")
    if annotation.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if annotation.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if annotation.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if annotation.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if annotation == "dict":
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return dict(value)
    if annotation == "list":
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return list(value)
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(", ".join(f"{prefix}{k}: unknown key" for k in unknown))
    obj = cls()
    for name, f in known.items():
        if name not in data:
            continue
        path = prefix + name
        if dataclasses.is_dataclass(f.default_factory() if f.default_factory is not dataclasses.MISSING else None):
            setattr(obj, name, _build(type(getattr(obj, name)), data[name] or {}, path + "."))
        else:
            setattr(obj, name, _coerce(path, data[name], getattr(obj, name), str(f.type)))
    return obj


def validate(cfg: RunConfig) -> RunConfig:
    errors = []
    if not cfg.env.name:
        errors.append("env.name: required field is missing")
    r, s, rt, b, m = cfg.replay, cfg.schedule, cfg.runtime, cfg.budget, cfg.model
    checks = [
        (r.capacity >= 1, "replay.capacity: must be >= 1"),
        (0.0 <= r.alpha <= 1.0, "replay.alpha: must lie in [0, 1]"),
        (r.p_min > 0, "replay.p_min: must be > 0"),
        (r.leaf in ("isweight", "priority"), "replay.leaf: must be 'isweight' or 'priority'"),
        (s.lr > 0, "schedule.lr: must be > 0"),
        (0.0 <= s.gamma_ext <= 1.0, "schedule.gamma_ext: must lie in [0, 1]"),
        (0.0 <= s.gamma_int <= 1.0, "schedule.gamma_int: must lie in [0, 1]"),
        (0.0 <= s.beta <= 1.0, "schedule.beta: must lie in [0, 1]"),
        (s.beta_dec >= 0, "schedule.beta_dec: must be >= 0"),
        (s.beta_every >= 1, "schedule.beta_every: must be >= 1"),
        (0.0 <= s.eps_end <= s.eps_start <= 1.0, "schedule.eps_start/eps_end: need 0 <= end <= start <= 1"),
        (s.eps_anneal >= 0, "schedule.eps_anneal: must be >= 0"),
        (s.clip_norm is None or s.clip_norm > 0, "schedule.clip_norm: must be > 0 or null"),
        (rt.workers >= 1, "runtime.workers: must be >= 1"),
        (rt.actors >= 1, "runtime.actors: must be >= 1"),
        (rt.queue_bound >= 1, "runtime.queue_bound: must be >= 1"),
        (rt.publish_every >= 1, "runtime.publish_every: must be >= 1"),
        (rt.target_sync >= 1, "runtime.target_sync: must be >= 1"),
        (rt.norm_every >= 1, "runtime.norm_every: must be >= 1"),
        (1 <= rt.batch_size <= r.capacity, "runtime.batch_size: must lie in [1, replay.capacity]"),
        (b.env_steps >= 0, "budget.env_steps: must be >= 0"),
        (b.train_steps is None or b.train_steps >= 0, "budget.train_steps: must be >= 0 or null"),
        (b.eval_interval >= 1, "budget.eval_interval: must be >= 1"),
        (b.eval_episodes >= 1, "budget.eval_episodes: must be >= 1"),
        (b.log_every >= 1, "budget.log_every: must be >= 1"),
        (all(v >= 1 for v in (m.action_hidden, m.ird_hidden, m.ird_out, m.mixer_embed, m.hyper_hidden)),
         "model: all widths must be >= 1"),
        (m.nonneg in ("softmax", "abs"), "model.nonneg: must be 'softmax' or 'abs'"),
        (len(cfg.seeds) >= 1 and all(isinstance(x, int) and not isinstance(x, bool) for x in cfg.seeds),
         "seeds: must be a non-empty list of integers"),
    ]
    errors += [msg for ok, msg in checks if not ok]
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def from_dict(data: dict | None, check: bool = True) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "")
    return validate(cfg) if check else cfg


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    out = yaml.safe_load(yaml.safe_dump(data or {})) or {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"override {item!r}: empty key component")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def load(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return from_dict(apply_overrides(data, overrides or []))


_COMMENTS = {
    "env.name": "cooperative_matrix | sparse_corridor | skirmish",
    "env.params": "constructor arguments of the environment",
    "model.action_hidden": "GRU width of the shared agent network",
    "model.ird_hidden": "hidden width of the novelty predictor and target",
    "model.ird_out": "embedding size compared by the novelty reward",
    "model.mixer_embed": "mixing network hidden width",
    "model.hyper_hidden": "hidden width of the second-layer bias hypernetworks",
    "model.nonneg": "softmax | abs: how mixing weights are kept positive",
    "replay.capacity": "episodes held in the buffer",
    "replay.alpha": "blend between TD priority and importance factor",
    "replay.c": "staleness coefficient of the importance factor (negative)",
    "replay.p_min": "priority floor",
    "replay.uniform": "uniform sampling with unit weights (ablation)",
    "replay.leaf": "isweight | priority: mass stored in the sum tree",
    "schedule.lr": "Adam step size",
    "schedule.clip_norm": "global gradient-norm clip (null disables)",
    "schedule.gamma_ext": "discount of the external-reward branch",
    "schedule.gamma_int": "discount of the intrinsic-reward branch",
    "schedule.beta": "initial weight of the intrinsic TD error",
    "schedule.beta_dec": "amount beta drops at each decrement",
    "schedule.beta_every": "training steps between beta decrements",
    "schedule.intrinsic": "false forces beta to 0 (ablation)",
    "schedule.eps_start": "initial exploration rate",
    "schedule.eps_end": "final exploration rate",
    "schedule.eps_anneal": "environment steps of linear annealing",
    "runtime.workers": "serving threads",
    "runtime.actors": "actors per worker",
    "runtime.distributed": "false runs the single-threaded 1x1 loop",
    "runtime.queue_bound": "capacity of the episode queue",
    "runtime.publish_every": "training steps between snapshot publishes",
    "runtime.target_sync": "training steps between target-network copies",
    "runtime.norm_every": "serving calls between normalizer updates",
    "runtime.batch_size": "episodes per training batch",
    "budget.env_steps": "environment-step budget",
    "budget.train_steps": "optional training-step cap",
    "budget.eval_interval": "environment steps between evaluations",
    "budget.eval_episodes": "greedy episodes per evaluation",
    "budget.log_every": "training steps between metric lines",
    "budget.stop_on_win": "end the run at the first evaluation with win rate 1.0",
    "seeds": "one run per seed",
    "output_dir": "null uses $" + OUTPUT_ROOT_ENV + "/<env name>",
}


def defaults_yaml() -> str:
    """Default configuration as YAML with a comment on every field."""
    lines = []
    for name, value in RunConfig().to_dict().items():
        if isinstance(value, dict):
            lines.append(f"{name}:")
            for k, v in value.items():
                lines.append(_commented(f"  {k}: {_scalar(v)}", _COMMENTS.get(f"{name}.{k}")))
        else:
            lines.append(_commented(f"{name}: {_scalar(value)}", _COMMENTS.get(name)))
    return "\n".join(lines) + "\n"


def _scalar(v) -> str:
    return yaml.safe_dump(v, default_flow_style=True).strip().removesuffix("...").strip()


def _commented(line: str, comment: str | None) -> str:
    return f"{line:<34}# {comment}" if comment else line
