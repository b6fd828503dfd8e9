"""Staged training: trainable masks, AdamW, the three-stage paradigm, plugging.

Stage tags are strings: ``stage1`` (universal expert only), ``stage2:<tag>``
(one domain expert only), ``stage3`` (routers only) and ``single_stage``
(every adapter tensor, used by the plain-LoRA and MoLoRA baselines). Frozen
base weights are never handed to the optimizer.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterError, AdapterStack, add_expert, attach_router, build_stack
from .base_model import BaseParams, ConfigError, SiteKey, forward, freeze, init_base
from .config import OptimizerConfig, RunConfig
from .data import DataError, Example, encode, generate, mixture, universal_mix

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


class FreezeViolation(RuntimeError):
    pass


def tensor_hash(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def site_name(key: SiteKey) -> str:
    return f"{key[0]}.{key[1]}"


def parse_stage(stage: str) -> tuple[str, str | None]:
    if stage in ("stage1", "stage3", "single_stage"):
        return stage, None
    if stage.startswith("stage2:") and len(stage) > 7:
        return "stage2", stage[7:]
    raise ConfigError(f"unknown stage tag {stage!r}")


def forward_stage(stage: str) -> int:
    """Stack forward path implied by a state's stage tag."""
    if stage.startswith("stage2"):
        return 2
    if stage in ("stage3", "single_stage"):
        return 3
    return 1


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """Adaptive moments with decoupled weight decay, updating ``Tensor.data`` in place."""

    def __init__(self, params: dict[str, ad.Tensor], config: OptimizerConfig,
                 moments: dict[str, tuple[np.ndarray, np.ndarray]] | None = None, t: int = 0):
        self.params = params
        self.config = config
        self.moments = {} if moments is None else moments
        self.t = t

    def step(self) -> None:
        cfg = self.config
        b1, b2 = cfg.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
            # state stays on the float32 grid so checkpoints round-trip exactly
            m = ad.float32_grid(b1 * m + (1.0 - b1) * g)
            v = ad.float32_grid(b2 * v + (1.0 - b2) * g * g)
            self.moments[name] = (m, v)
            update = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
            if cfg.weight_decay:
                update = update + cfg.lr * cfg.weight_decay * p.data
            p.data[...] = ad.float32_grid(p.data - update)

    def zero_grad(self) -> None:
        ad.zero_grad(self.params.values())


# ---------------------------------------------------------------------------
# state

@dataclass(eq=False)
class TrainState:
    base: BaseParams
    stacks: dict[SiteKey, AdapterStack]
    variant: str
    stage: str = "init"
    step: int = 0
    seed: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    adam_t: int = 0
    trainable: tuple[str, ...] = ()
    config: dict | None = None
    history: dict[str, list[float]] = field(default_factory=dict)

    def adapter_tensors(self) -> dict[str, ad.Tensor]:
        out = {}
        for key in sorted(self.stacks):
            for local, t in self.stacks[key].named_tensors().items():
                out[f"adapters.{site_name(key)}.{local}"] = t
        return out

    def named_tensors(self) -> dict[str, ad.Tensor]:
        return {**self.base.named_tensors(), **self.adapter_tensors()}

    def hashes(self) -> dict[str, str]:
        return {name: tensor_hash(t.data) for name, t in self.named_tensors().items()}

    def logits(self, tokens, trace: dict | None = None) -> ad.Tensor:
        return forward(self.base, self.stacks, tokens, stage=forward_stage(self.stage), trace=trace)

    def clone(self) -> TrainState:
        """Deep copy of the adapters and optimizer state; the frozen base is shared."""
        return TrainState(
            base=self.base,
            stacks=copy.deepcopy(self.stacks),
            variant=self.variant,
            stage=self.stage,
            step=self.step,
            seed=self.seed,
            moments=copy.deepcopy(self.moments),
            adam_t=self.adam_t,
            trainable=self.trainable,
            config=self.config,
            history={k: list(v) for k, v in self.history.items()},
        )


def init_state(config: RunConfig, base: BaseParams) -> TrainState:
    """Adapter stacks at every configured site; every expert starts with B = 0."""
    variant = config.variant
    stacks = {}
    for site in config.base.sites():
        if variant == "plain":
            tags, rank = ["lora"], config.plain_rank or config.universal_rank
        elif variant == "molora":
            tags, rank = list(config.domains), config.domain_rank
        else:
            tags, rank = list(config.domains), config.domain_rank
        stacks[site.key] = build_stack(
            variant, site.d_in, site.d_out, tags,
            seed=config.seed, site=site.key,
            universal_rank=config.universal_rank, domain_rank=rank,
            universal_alpha=config.universal_alpha, domain_alpha=config.domain_alpha,
            leaky_slope=config.leaky_slope, residual_enabled=config.residual_enabled,
            route_universal=config.route_universal, stage2_keep_universal=config.stage2_keep_universal,
        )
    return TrainState(base=base, stacks=stacks, variant=variant, seed=config.seed, config=config.to_dict())


def trainable_names(state: TrainState, stage: str) -> list[str]:
    kind, tag = parse_stage(stage)
    staged = state.variant in ("flan", "res")
    if kind == "single_stage" and staged:
        raise ConfigError(f"{state.variant} is trained in stages, not single_stage")
    if kind != "single_stage" and not staged:
        raise ConfigError(f"{state.variant} has no {kind}; use single_stage")
    names = []
    for key in sorted(state.stacks):
        stack = state.stacks[key]
        prefix = f"adapters.{site_name(key)}."
        if kind == "stage1":
            local = ["universal.A", "universal.B"]
        elif kind == "stage2":
            try:
                stack.expert_index(tag)
            except AdapterError as exc:
                raise ConfigError(f"stage2 for unknown expert {tag!r}") from exc
            local = [f"experts.{tag}.A", f"experts.{tag}.B"]
        elif kind == "stage3":
            if stack.router is None:
                raise ConfigError(f"stage3 needs a router at site {site_name(key)}")
            local = ["router.W"]
        else:
            local = list(stack.named_tensors())
        names.extend(prefix + n for n in local)
    return names


def set_trainable(state: TrainState, stage: str) -> TrainState:
    """Flip ``requires_grad`` so exactly the stage's tensors train; reset optimizer moments."""
    names = trainable_names(state, stage)
    kind, tag = parse_stage(stage)
    chosen = set(names)
    for name, t in state.adapter_tensors().items():
        t.requires_grad = name in chosen
        t.grad = None
    for t in state.base.named_tensors().values():
        if t.requires_grad:
            raise FreezeViolation("base parameters must stay frozen")
    for stack in state.stacks.values():
        stack.active_expert_override = stack.expert_index(tag) if kind == "stage2" else None
    state.stage = stage
    state.trainable = tuple(names)
    state.moments = {}
    state.adam_t = 0
    return state


# ---------------------------------------------------------------------------
# step loop

def batch_loss(logits: ad.Tensor, batch, positions: str = "answer") -> ad.Tensor:
    vocab = logits.shape[-1]
    flat = ad.reshape(logits, (-1, vocab))
    return ad.cross_entropy(flat, batch.targets.ravel(), batch.loss_weights(positions).ravel())


def _stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(stage.encode())])


def optimize(
    params: dict[str, ad.Tensor],
    examples: Sequence[Example],
    opt: OptimizerConfig,
    rng: np.random.Generator,
    loss_fn: Callable,
    optimizer: AdamW | None = None,
) -> list[float]:
    """Minibatch AdamW over ``examples``; a fresh permutation each pass."""
    if not examples:
        raise DataError("cannot train on an empty dataset")
    optimizer = optimizer or AdamW(params, opt)
    n = len(examples)
    total = opt.n_steps(n)
    per_epoch = -(-n // opt.batch_size)
    losses: list[float] = []
    order = None
    for step in range(total):
        within = step % per_epoch
        if within == 0:
            order = rng.permutation(n)
        idx = order[within * opt.batch_size : (within + 1) * opt.batch_size]
        batch = encode([examples[i] for i in idx])
        try:
            loss = loss_fn(batch)
        except FloatingPointError as exc:
            raise TrainingDivergedError(step, str(exc)) from exc
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergedError(step, "non-finite loss")
        ad.backward(loss)
        optimizer.step()
        optimizer.zero_grad()
        losses.append(value)
    return losses


def train_stage(
    state: TrainState,
    stage: str,
    dataset: Sequence[Example],
    opt: OptimizerConfig,
    loss_positions: str = "all",
) -> tuple[TrainState, list[float]]:
    """Train only the tensors ``stage`` unlocks; everything else is verified bit-identical after."""
    if not dataset:
        raise DataError("cannot train on an empty dataset")
    set_trainable(state, stage)
    params = {name: t for name, t in state.named_tensors().items() if name in set(state.trainable)}
    before = {k: v for k, v in state.hashes().items() if k not in params}
    fstage = forward_stage(stage)

    def loss_fn(batch):
        return batch_loss(forward(state.base, state.stacks, batch.tokens, stage=fstage), batch, loss_positions)

    optimizer = AdamW(params, opt, state.moments, state.adam_t)
    losses = optimize(params, dataset, opt, _stage_rng(state.seed, stage), loss_fn, optimizer)
    state.adam_t = optimizer.t
    state.step += len(losses)
    state.history[stage] = losses

    after = state.hashes()
    changed = [k for k, h in before.items() if after[k] != h]
    if changed:
        raise FreezeViolation(f"frozen tensors changed during {stage}: {changed[:5]}")
    log.info("%s: %d steps, loss %.4f -> %.4f", stage, len(losses), losses[0] if losses else float("nan"),
             losses[-1] if losses else float("nan"))
    return state, losses


# ---------------------------------------------------------------------------
# datasets for a run

@dataclass
class RunData:
    universal: list[Example]
    domains: dict[str, list[Example]]
    router: list[Example]
    pretrain: list[Example]

    def domain_router_subset(self, tag: str, per_task: int | None) -> list[Example]:
        ds = self.domains[tag]
        return ds if per_task is None else ds[:per_task]


def build_data(config: RunConfig) -> RunData:
    max_seq = config.base.max_seq
    domains = {tag: generate(config.task(tag), "train", max_seq) for tag in config.domains}
    universal_specs = [config.task(t) for t in (config.universal_tasks or config.domains)]
    universal = universal_mix(universal_specs, config.seed, config.universal_samples)
    per_task = config.router_samples_per_task
    router = mixture([ds if per_task is None else ds[:per_task] for ds in domains.values()], config.seed)
    pretrain = []
    if config.pretrain_tasks and config.pretrain_samples:
        specs = [config.task(t) for t in config.pretrain_tasks]
        pretrain = universal_mix(specs, config.seed + 7919, config.pretrain_samples)
    return RunData(universal, domains, router, pretrain)


def pretrain_base(config: RunConfig, examples: Sequence[Example]) -> BaseParams:
    """Harness-only warm start: train every base weight on ``examples``, then freeze."""
    base = init_base(config.base, config.seed, trainable=True)
    if examples:
        params = base.named_tensors()
        opt = config.optimizer("pretrain")

        def loss_fn(batch):
            return batch_loss(forward(base, None, batch.tokens), batch, config.loss_positions)

        losses = optimize(params, examples, opt, _stage_rng(config.seed, "pretrain"), loss_fn)
        log.info("pretrain: %d steps, loss %.4f -> %.4f", len(losses), losses[0], losses[-1])
    return freeze(base)


def load_base(config: RunConfig, data: RunData | None = None) -> BaseParams:
    if config.base_checkpoint:
        from .checkpoint import load_checkpoint

        base = load_checkpoint(config.base_checkpoint).base
        if base.config != config.base:
            raise ConfigError("base checkpoint was built with a different base config")
        return base
    data = data or build_data(config)
    return pretrain_base(config, data.pretrain)


def stage_budget(config: RunConfig, data: RunData) -> int:
    """Optimizer steps a full staged run takes (the baseline gets the same)."""
    total = 0
    if "stage1" in config.stages:
        total += config.optimizer("stage1").n_steps(len(data.universal))
    if "stage2" in config.stages:
        total += sum(config.optimizer("stage2").n_steps(len(ds)) for ds in data.domains.values())
    if "stage3" in config.stages:
        total += config.optimizer("stage3").n_steps(len(data.router))
    return total


# ---------------------------------------------------------------------------
# the paradigm

def _stage2_worker(snapshot: TrainState, tag: str, dataset, opt: OptimizerConfig, out_dir: str | None,
                   loss_positions: str = "all"):
    state = snapshot.clone()
    train_stage(state, f"stage2:{tag}", dataset, opt, loss_positions)
    if out_dir is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(state, Path(out_dir) / f"stage2-{tag}")
    experts = {key: stack.domain_experts[stack.expert_index(tag)] for key, stack in state.stacks.items()}
    return tag, experts, state.history[f"stage2:{tag}"], state.step - snapshot.step


def adopt_experts(state: TrainState, tag: str, experts: dict) -> None:
    """Install trained ``tag`` experts (one per site) into ``state``.

    ``experts`` maps site keys to experts, or is a donor ``TrainState``
    trained on ``stage2:<tag>`` from the same stage-1 snapshot.
    """
    if isinstance(experts, TrainState):
        donor = experts
        for key, stack in state.stacks.items():
            theirs = donor.stacks.get(key)
            if theirs is None or stack.universal is None:
                continue
            if tensor_hash(theirs.universal.B.data) != tensor_hash(stack.universal.B.data):
                raise ConfigError(f"expert {tag!r} was trained from a different stage-1 snapshot")
        experts = {k: s.domain_experts[s.expert_index(tag)] for k, s in donor.stacks.items()}
    if set(experts) != set(state.stacks):
        raise ConfigError(f"expert {tag!r} does not cover the same adapter sites")
    for key, expert in experts.items():
        stack = state.stacks[key]
        stack.domain_experts[stack.expert_index(tag)] = expert


def run_paradigm(
    config: RunConfig,
    out_dir: str | Path | None = None,
    base: BaseParams | None = None,
    data: RunData | None = None,
    domain_order: Sequence[str] | None = None,
    parallel_experts: bool = False,
) -> TrainState:
    """Stage 1, then every domain expert from the same stage-1 snapshot, then routers.

    A checkpoint is written after each stage when ``out_dir`` is given.
    """
    if config.variant not in ("flan", "res"):
        raise ConfigError(f"run_paradigm needs a flan or res variant, got {config.variant!r}")
    if config.variant == "res" and "stage1" not in config.stages:
        raise ConfigError("res needs stage1: its domain experts read the universal expert's output")
    from .checkpoint import save_checkpoint

    data = data or build_data(config)
    base = base or load_base(config, data)
    state = init_state(config, base)

    def checkpoint(s: TrainState, name: str):
        if out_dir is not None:
            save_checkpoint(s, Path(out_dir) / name)

    if "stage1" in config.stages:
        train_stage(state, "stage1", data.universal, config.optimizer("stage1"), config.loss_positions)
        checkpoint(state, "stage1")

    if "stage2" in config.stages:
        order = list(domain_order or config.domains)
        if sorted(order) != sorted(config.domains):
            raise ConfigError("domain_order must be a permutation of the configured domains")
        snapshot = state.clone()
        opt2 = config.optimizer("stage2")
        jobs = [(snapshot, tag, data.domains[tag], opt2, None if out_dir is None else str(out_dir),
                 config.loss_positions)
                for tag in order]
        if parallel_experts:
            with ProcessPoolExecutor() as pool:
                results = list(pool.map(_stage2_worker, *zip(*jobs)))
        else:
            results = [_stage2_worker(*job) for job in jobs]
        for tag, experts, losses, steps in results:
            adopt_experts(state, tag, experts)
            state.history[f"stage2:{tag}"] = losses
            state.step += steps

    if "stage3" in config.stages:
        for stack in state.stacks.values():
            attach_router(stack)
        train_stage(state, "stage3", data.router, config.optimizer("stage3"), config.loss_positions)
        checkpoint(state, "stage3")
    return state


def run_single_stage(
    config: RunConfig,
    out_dir: str | Path | None = None,
    base: BaseParams | None = None,
    data: RunData | None = None,
    steps: int | None = None,
) -> TrainState:
    """Plain-LoRA or MoLoRA baseline on the naive task mixture.

    By default it gets exactly the step budget a staged run of the same
    config would use.
    """
    if config.variant not in ("plain", "molora"):
        raise ConfigError(f"single-stage baselines are plain or molora, got {config.variant!r}")
    data = data or build_data(config)
    base = base or load_base(config, data)
    state = init_state(config, base)
    mix = mixture(list(data.domains.values()), config.seed)
    budget = steps if steps is not None else (config.baseline_steps or stage_budget(config, data))
    opt = config.optimizer("single_stage")
    opt = OptimizerConfig(opt.lr, opt.betas, opt.eps, opt.weight_decay, opt.batch_size, opt.epochs, budget)
    train_stage(state, "single_stage", mix, opt, config.loss_positions)
    if out_dir is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(state, Path(out_dir) / "single_stage")
    return state


# ---------------------------------------------------------------------------
# pluggability

@dataclass
class PlugAudit:
    tag: str
    trained_params: int
    total_params: int
    trained_data: int
    full_data: int
    per_tensor: dict[str, int]

    @property
    def param_fraction(self) -> float:
        return self.trained_params / self.total_params

    @property
    def data_fraction(self) -> float:
        return self.trained_data / self.full_data

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "trained_params": self.trained_params,
            "total_params": self.total_params,
            "param_fraction": self.param_fraction,
            "trained_data": self.trained_data,
            "full_data": self.full_data,
            "data_fraction": self.data_fraction,
        }


def plug_new_task(
    state: TrainState,
    new_dataset: Sequence[Example],
    tag: str,
    expert_opt: OptimizerConfig,
    router_opt: OptimizerConfig,
    router_data: Sequence[Example],
    full_retrain_data: Sequence[Sequence[Example]] = (),
    rank: int | None = None,
    loss_positions: str = "all",
) -> tuple[TrainState, PlugAudit]:
    """Add one expert per site, train it alone, then retrain only the routers.

    ``router_data`` should be the expanded mixture (old domains plus the new
    one). ``full_retrain_data`` lists every dataset a from-scratch run would
    consume; example identity is used to count the union, so overlapping
    subsets are not double counted.
    """
    if state.stage != "stage3":
        raise ConfigError(f"plugging needs a stage-3 state, this one is at {state.stage!r}")
    if state.variant not in ("flan", "res"):
        raise ConfigError(f"cannot plug experts into a {state.variant} state")
    for stack in state.stacks.values():
        if any(e.tag == tag for e in stack.domain_experts):
            raise ConfigError(f"expert tag {tag!r} already exists")
    old_names = [n for n in state.adapter_tensors() if ".experts." in n or ".universal." in n]
    before = {n: tensor_hash(state.adapter_tensors()[n].data) for n in old_names}

    for key in sorted(state.stacks):
        stack = state.stacks[key]
        r = rank if rank is not None else stack.domain_experts[0].rank
        alpha = stack.domain_experts[0].alpha / stack.domain_experts[0].rank * r
        add_expert(stack, tag, r, state.seed, alpha=alpha, site=key)

    train_stage(state, f"stage2:{tag}", new_dataset, expert_opt, loss_positions)
    train_stage(state, "stage3", router_data, router_opt, loss_positions)

    after = state.adapter_tensors()
    changed = [n for n in old_names if tensor_hash(after[n].data) != before[n]]
    if changed:
        raise FreezeViolation(f"pre-existing experts changed while plugging: {changed[:5]}")

    per_tensor = {n: t.size for n, t in after.items()}
    trained = sum(size for n, size in per_tensor.items() if f".experts.{tag}." in n or n.endswith(".router.W"))
    seen_trained = {id(e) for e in new_dataset} | {id(e) for e in router_data}
    seen_full = {id(e) for ds in full_retrain_data for e in ds} | seen_trained
    audit = PlugAudit(tag, trained, sum(per_tensor.values()), len(seen_trained), len(seen_full), per_tensor)
    return state, audit
