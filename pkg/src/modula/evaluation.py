"""Held-out metrics, router-distribution reports and parameter audits."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import attach_router, build_stack
from .base_model import ConfigError
from .config import RunConfig
from .data import Example, TaskSpec, encode, generate
from .training import TrainState, batch_loss, site_name


def eval_split(spec: TaskSpec, n: int, max_seq: int | None = None) -> list[Example]:
    return generate(replace(spec, n_samples=n), "eval", max_seq)


def greedy_decode(state: TrainState, prompts: np.ndarray, n_new: int) -> np.ndarray:
    """Greedy continuation of equal-length prompts, ``n_new`` tokens each."""
    seqs = np.array(prompts, dtype=np.int64)
    with ad.no_grad():
        for _ in range(n_new):
            logits = state.logits(seqs).data
            nxt = logits[:, -1, :].argmax(axis=-1)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return seqs[:, prompts.shape[1]:]


def task_metrics(state: TrainState, examples: Sequence[Example], chunk: int = 256) -> dict:
    """Exact-match accuracy (greedy) and teacher-forced mean answer loss."""
    correct = 0
    loss_sum = 0.0
    for start in range(0, len(examples), chunk):
        part = examples[start : start + chunk]
        groups: dict[tuple[int, int], list[Example]] = {}
        for ex in part:
            groups.setdefault((len(ex.input_tokens), len(ex.target_tokens)), []).append(ex)
        for (_, n_ans), group in groups.items():
            prompts = np.array([ex.input_tokens for ex in group])
            answers = np.array([ex.target_tokens for ex in group])
            pred = greedy_decode(state, prompts, n_ans)
            correct += int((pred == answers).all(axis=1).sum())
            batch = encode(group)
            with ad.no_grad():
                loss_sum += float(batch_loss(state.logits(batch.tokens), batch).data) * len(group)
    return {"accuracy": correct / len(examples), "loss": loss_sum / len(examples), "n": len(examples)}


def evaluate(state: TrainState, specs: Sequence[TaskSpec], n_eval: int = 256, max_seq: int | None = None) -> dict:
    """Per-task accuracy and loss on held-out splits, plus macro averages."""
    if not specs:
        raise ConfigError("evaluate needs at least one task")
    tasks = {spec.task_id: task_metrics(state, eval_split(spec, n_eval, max_seq)) for spec in specs}
    return {
        "tasks": tasks,
        "macro_accuracy": float(np.mean([m["accuracy"] for m in tasks.values()])),
        "macro_loss": float(np.mean([m["loss"] for m in tasks.values()])),
    }


def resolve_tasks(config: RunConfig, task_ids: Sequence[str]) -> list[TaskSpec]:
    return [config.task(t) for t in task_ids]


# ---------------------------------------------------------------------------
# router distributions

@dataclass
class RouterCell:
    layer: int
    site: str
    task: str
    mean: np.ndarray
    expert_tags: list[str]

    @property
    def entropy(self) -> float:
        p = self.mean[self.mean > 0]
        return float(-(p * np.log(p)).sum())

    def weight_of(self, tag: str) -> float | None:
        return float(self.mean[self.expert_tags.index(tag)]) if tag in self.expert_tags else None


@dataclass
class RouterReport:
    cells: list[RouterCell]

    def matching_weights(self) -> dict[str, dict[str, float]]:
        """task -> {site name: mean weight of the expert tagged with the task}."""
        out: dict[str, dict[str, float]] = {}
        for c in self.cells:
            w = c.weight_of(c.task)
            if w is not None:
                out.setdefault(c.task, {})[f"{c.layer}.{c.site}"] = w
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "site", "task", "expert", "mean_weight", "entropy"])
        for c in self.cells:
            for tag, w in zip(c.expert_tags, c.mean):
                writer.writerow([c.layer, c.site, c.task, tag, repr(float(w)), repr(c.entropy)])
        return buf.getvalue()


def analyze_router(
    state: TrainState,
    specs: Sequence[TaskSpec],
    n_eval: int = 256,
    layers: Sequence[int] | None = None,
) -> RouterReport:
    """Post-softmax routing vectors averaged over every non-pad evaluation token."""
    if state.stage != "stage3":
        raise ConfigError(f"router analysis needs a stage-3 state, got {state.stage!r}")
    cells = []
    for spec in specs:
        batch = encode(eval_split(spec, n_eval))
        valid = batch.tokens != 0
        trace: dict = {}
        with ad.no_grad():
            state.logits(batch.tokens, trace=trace)
        for key in sorted(trace):
            if layers is not None and key[0] not in layers:
                continue
            stack = state.stacks[key]
            tags = [e.tag or e.role for e in stack.routed_experts()]
            mean = trace[key][valid].mean(axis=0)
            cells.append(RouterCell(key[0], key[1], spec.task_id, mean, tags))
    return RouterReport(cells)


# ---------------------------------------------------------------------------
# parameter audit

def _audit_stacks(config: RunConfig, n_experts: int | None = None) -> dict:
    tags = list(config.domains)
    if n_experts is not None:
        tags = [f"expert{i}" for i in range(n_experts)]
    stacks = {}
    for site in config.base.sites():
        rank = config.domain_rank
        if config.variant == "plain":
            tags_here, rank = ["lora"], config.plain_rank or config.universal_rank
        else:
            tags_here = tags
        stack = build_stack(config.variant, site.d_in, site.d_out, tags_here, seed=0, site=site.key,
                            universal_rank=config.universal_rank, domain_rank=rank,
                            route_universal=config.route_universal)
        if stack.router is None and config.variant in ("flan", "res"):
            attach_router(stack)
        stacks[site.key] = stack
    return stacks


def param_audit(source: RunConfig | TrainState, scenario: str = "plug_task", n_experts: int | None = None) -> dict:
    """Enumerate adapter tensors and report what a scenario trains.

    ``full_retrain`` trains everything; ``plug_task`` trains the newest domain
    expert plus every router, over the total adapter parameter count.
    """
    if scenario not in ("full_retrain", "plug_task"):
        raise ConfigError(f"unknown audit scenario {scenario!r}")
    stacks = source.stacks if isinstance(source, TrainState) else _audit_stacks(source, n_experts)
    rows = []
    for key in sorted(stacks):
        stack = stacks[key]
        newest = stack.domain_experts[-1].tag if stack.domain_experts else None
        for local, t in stack.named_tensors().items():
            if scenario == "full_retrain":
                trained = True
            else:
                trained = local == "router.W" or local.startswith(f"experts.{newest}.")
            rows.append({"tensor": f"{site_name(key)}.{local}", "params": t.size, "trained": trained})
    total = sum(r["params"] for r in rows)
    trained = sum(r["params"] for r in rows if r["trained"])
    return {
        "scenario": scenario,
        "total_params": total,
        "trained_params": trained,
        "fraction": trained / total if total else math.nan,
        "tensors": rows,
    }
