"""Run configuration: one JSON file drives an entire run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .base_model import BaseConfig, ConfigError
from .data import TaskSpec

STAGE_OPTIMIZERS = ("pretrain", "stage1", "stage2", "stage3", "single_stage", "plug_expert", "plug_router")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 1
    steps: int | None = None  # overrides epochs when set

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("steps must be >= 0")

    def n_steps(self, n_examples: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * -(-n_examples // self.batch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> OptimizerConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown optimizer fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class RunConfig:
    base: BaseConfig = field(default_factory=BaseConfig)
    variant: str = "res"
    universal_rank: int = 4
    domain_rank: int = 2
    plain_rank: int | None = None  # plain-LoRA baseline rank; defaults to universal_rank
    universal_alpha: float | None = None
    domain_alpha: float | None = None
    leaky_slope: float = 0.01
    residual_enabled: bool = True
    route_universal: bool = True
    stage2_keep_universal: bool = True
    loss_positions: str = "all"  # "all" non-pad targets, or "answer" tokens only
    tasks: tuple[TaskSpec, ...] = ()
    domains: tuple[str, ...] = ()
    universal_tasks: tuple[str, ...] = ()
    universal_samples: int = 4096
    plug_task: str | None = None
    pretrain_tasks: tuple[str, ...] = ()
    pretrain_samples: int = 0
    base_checkpoint: str | None = None
    eval_samples: int = 256
    router_samples_per_task: int | None = None
    stages: tuple[str, ...] = ("stage1", "stage2", "stage3")
    baseline_steps: int | None = None  # None: match the staged run's step budget
    optimizers: dict = field(default_factory=dict)
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        for name in ("tasks", "domains", "universal_tasks", "pretrain_tasks", "stages"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        opts = {k: (v if isinstance(v, OptimizerConfig) else OptimizerConfig.from_dict(v))
                for k, v in self.optimizers.items()}
        object.__setattr__(self, "optimizers", opts)
        self.validate()

    def validate(self) -> None:
        if self.variant not in ("plain", "molora", "flan", "res"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.universal_rank < 1 or self.domain_rank < 1 or (self.plain_rank is not None and self.plain_rank < 1):
            raise ConfigError("ranks must be >= 1")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate task ids: {ids}")
        markers = [t.marker for t in self.tasks]
        if len(set(markers)) != len(markers):
            raise ConfigError("marker tokens must be unique per task")
        for t in self.tasks:
            if t.vocab[1] > self.base.n_vocab or t.marker >= self.base.n_vocab:
                raise ConfigError(f"task {t.task_id!r} uses tokens outside the vocabulary")
            if t.sequence_length > self.base.max_seq:
                raise ConfigError(f"task {t.task_id!r} sequences exceed max_seq")
        for group in ("domains", "universal_tasks", "pretrain_tasks"):
            missing = set(getattr(self, group)) - set(ids)
            if missing:
                raise ConfigError(f"{group} references unknown task ids {sorted(missing)}")
        if self.plug_task is not None and self.plug_task not in ids:
            raise ConfigError(f"plug_task {self.plug_task!r} is not a defined task")
        if self.plug_task in self.domains:
            raise ConfigError("plug_task must not already be a domain")
        if not self.domains:
            raise ConfigError("at least one domain task is required")
        unknown_opt = set(self.optimizers) - set(STAGE_OPTIMIZERS)
        if unknown_opt:
            raise ConfigError(f"unknown optimizer stages {sorted(unknown_opt)}")
        bad = set(self.stages) - {"stage1", "stage2", "stage3"}
        if bad:
            raise ConfigError(f"unknown stages {sorted(bad)}")
        if self.loss_positions not in ("all", "answer"):
            raise ConfigError(f"loss_positions must be 'all' or 'answer', got {self.loss_positions!r}")
        if self.eval_samples < 1:
            raise ConfigError("eval_samples must be >= 1")

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise ConfigError(f"unknown task id {task_id!r}")

    def optimizer(self, stage: str) -> OptimizerConfig:
        return self.optimizers.get(stage, OptimizerConfig())

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "variant": self.variant,
            "universal_rank": self.universal_rank,
            "domain_rank": self.domain_rank,
            "plain_rank": self.plain_rank,
            "universal_alpha": self.universal_alpha,
            "domain_alpha": self.domain_alpha,
            "leaky_slope": self.leaky_slope,
            "residual_enabled": self.residual_enabled,
            "route_universal": self.route_universal,
            "stage2_keep_universal": self.stage2_keep_universal,
            "loss_positions": self.loss_positions,
            "tasks": [t.to_dict() for t in self.tasks],
            "domains": list(self.domains),
            "universal_tasks": list(self.universal_tasks),
            "universal_samples": self.universal_samples,
            "plug_task": self.plug_task,
            "pretrain_tasks": list(self.pretrain_tasks),
            "pretrain_samples": self.pretrain_samples,
            "base_checkpoint": self.base_checkpoint,
            "eval_samples": self.eval_samples,
            "router_samples_per_task": self.router_samples_per_task,
            "stages": list(self.stages),
            "baseline_steps": self.baseline_steps,
            "optimizers": {k: v.to_dict() for k, v in sorted(self.optimizers.items())},
            "seed": self.seed,
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            if isinstance(d.get("base"), dict):
                d["base"] = BaseConfig(**d["base"])
            if "tasks" in d:
                d["tasks"] = [t if isinstance(t, TaskSpec) else TaskSpec.from_dict(t) for t in d["tasks"]]
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**d)

    def replace(self, **changes) -> RunConfig:
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"unreadable config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return RunConfig.from_dict(raw)


def desk_tasks() -> list[TaskSpec]:
    """The synthetic suite: copy pretrains the base, three domains, add is held back for plugging.

    Vocabulary: 0 pad, 1 reserved, 2-7 markers, then one slice per task
    (copy spans the whole token range).
    """
    return [
        TaskSpec("copy", "copy", marker=2, vocab=(16, 64), seed=1, length=4),
        TaskSpec("reverse", "reverse", marker=3, vocab=(16, 28), seed=2, length=4),
        TaskSpec("sort", "sort", marker=4, vocab=(28, 40), seed=3, length=4),
        TaskSpec("add", "modular_add", marker=5, vocab=(40, 50), seed=4, length=3),
        TaskSpec("parity", "parity", marker=6, vocab=(50, 64), seed=5, length=2),
    ]


def desk_config(**overrides) -> RunConfig:
    """Desk-scale defaults for the three-domain suite."""
    cfg = RunConfig(
        tasks=tuple(desk_tasks()),
        domains=("reverse", "sort", "parity"),
        universal_tasks=("reverse", "sort", "parity"),
        universal_samples=4096,
        plug_task="add",
        pretrain_tasks=("copy",),
        pretrain_samples=4096,
        router_samples_per_task=512,
        loss_positions="answer",
        optimizers={
            "pretrain": OptimizerConfig(lr=3e-3, batch_size=16, epochs=2),
            "stage1": OptimizerConfig(lr=1e-2, batch_size=16, epochs=16),
            "stage2": OptimizerConfig(lr=1e-2, batch_size=16, epochs=8),
            "stage3": OptimizerConfig(lr=1e-2, batch_size=16, epochs=8),
            "single_stage": OptimizerConfig(lr=1e-2, batch_size=16),
            "plug_expert": OptimizerConfig(lr=1e-2, batch_size=16, epochs=8),
            "plug_router": OptimizerConfig(lr=1e-2, batch_size=16, epochs=4),
        },
    )
    return cfg.replace(**overrides) if overrides else cfg
