"""Command-line front end.

Progress goes to standard error, machine-readable results to standard
output as JSON. Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from . import training as tr
from .adapters import AdapterError, attach_router
from .base_model import ConfigError
from .checkpoint import CheckpointError, CorruptCheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import DataError, export_examples, generate, mixture
from .evaluation import analyze_router, eval_split, evaluate, param_audit

log = logging.getLogger("modula")

PUBLISHED_PLUG_FRACTION = 0.198
PUBLISHED_PLUG_DATA_FRACTION = 0.373

COMMANDS = (
    "pretrain-base", "train-universal", "train-expert", "train-router", "run-all",
    "plug-task", "eval", "analyze-router", "param-audit", "export-data",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="modula", description="Universal and domain LoRA experts with a trained router.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text)

    add("pretrain-base", "warm-start the frozen base model and save it under <out>/base")
    add("train-universal", "stage 1: train the universal expert")
    p = add("train-expert", "stage 2: train one domain expert from the stage-1 checkpoint")
    p.add_argument("--domain", required=True)
    p.add_argument("--checkpoint", help="stage-1 checkpoint (default <out>/stage1)")
    p = add("train-router", "stage 3: merge stage-2 experts and train the routers")
    p.add_argument("--checkpoint", help="stage-1 checkpoint (default <out>/stage1)")
    p = add("run-all", "every stage, evaluation and router report")
    p.add_argument("--parallel-experts", action="store_true", help="train stage-2 experts in worker processes")
    p = add("plug-task", "add the config's plug task as a new expert, retrain routers")
    p.add_argument("--checkpoint", help="stage-3 checkpoint (default <out>/stage3)")
    p.add_argument("--domain", help="task to plug (default: the config's plug_task)")
    p = add("eval", "held-out exact-match accuracy and loss")
    p.add_argument("--checkpoint", help="state to evaluate (default: untrained adapters on the base)")
    p.add_argument("--tasks", help="comma-separated task ids (default: the config's domains)")
    p = add("analyze-router", "mean routing weights per layer, site and task")
    p.add_argument("--checkpoint", help="stage-3 checkpoint (default <out>/stage3)")
    p.add_argument("--layers", help="comma-separated layer indices (default: all)")
    p = add("param-audit", "trainable-parameter counts per scenario")
    p.add_argument("--scenario", choices=("full_retrain", "plug_task"), default="plug_task")
    p.add_argument("--checkpoint", help="audit a saved state instead of the config")
    p.add_argument("--experts", type=int, help="number of domain experts (config audit only)")
    add("export-data", "write every generated split as tab-separated records")
    return parser


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from exc


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _domain_specs(config: RunConfig, tasks: str | None = None):
    ids = [t for t in tasks.split(",") if t] if tasks else list(config.domains)
    return [config.task(t) for t in ids]


def _checkpoint_path(args, out: Path, default: str) -> Path:
    return Path(args.checkpoint) if getattr(args, "checkpoint", None) else out / default


# ---------------------------------------------------------------------------
# subcommands

def cmd_pretrain_base(config: RunConfig, out: Path, args) -> dict:
    data = tr.build_data(config)
    base = tr.pretrain_base(config, data.pretrain)
    state = tr.TrainState(base=base, stacks={}, variant=config.variant, stage="base",
                          seed=config.seed, config=config.to_dict())
    path = save_checkpoint(state, out / "base")
    return {"checkpoint": str(path), "pretrain_examples": len(data.pretrain)}


def cmd_train_universal(config: RunConfig, out: Path, args) -> dict:
    data = tr.build_data(config)
    state = tr.init_state(config, tr.load_base(config, data))
    _, losses = tr.train_stage(state, "stage1", data.universal, config.optimizer("stage1"), config.loss_positions)
    path = save_checkpoint(state, out / "stage1")
    return {"checkpoint": str(path), "steps": len(losses), "final_loss": losses[-1]}


def cmd_train_expert(config: RunConfig, out: Path, args) -> dict:
    if args.domain not in config.domains:
        raise UsageError(f"--domain {args.domain!r} is not one of the configured domains {list(config.domains)}")
    state = load_checkpoint(_checkpoint_path(args, out, "stage1"))
    if state.stage != "stage1":
        raise UsageError(f"--checkpoint must hold a stage-1 state, found {state.stage!r}")
    data = tr.build_data(config)
    _, losses = tr.train_stage(state, f"stage2:{args.domain}", data.domains[args.domain],
                               config.optimizer("stage2"), config.loss_positions)
    path = save_checkpoint(state, out / f"stage2-{args.domain}")
    return {"checkpoint": str(path), "steps": len(losses), "final_loss": losses[-1]}


def cmd_train_router(config: RunConfig, out: Path, args) -> dict:
    state = load_checkpoint(_checkpoint_path(args, out, "stage1"))
    for tag in config.domains:
        donor_path = out / f"stage2-{tag}"
        if not (donor_path / "manifest.json").exists():
            raise UsageError(f"missing stage-2 checkpoint for {tag!r} at {donor_path}; run train-expert first")
        tr.adopt_experts(state, tag, load_checkpoint(donor_path))
    for stack in state.stacks.values():
        attach_router(stack)
    data = tr.build_data(config)
    _, losses = tr.train_stage(state, "stage3", data.router, config.optimizer("stage3"), config.loss_positions)
    path = save_checkpoint(state, out / "stage3")
    return {"checkpoint": str(path), "steps": len(losses), "final_loss": losses[-1]}


def run_all(config: RunConfig, out: Path, parallel_experts: bool = False) -> dict:
    """Train, evaluate and report; returns the metrics written to ``metrics.json``."""
    timing: dict[str, float] = {}
    t0 = time.perf_counter()
    data = tr.build_data(config)
    base = tr.load_base(config, data)
    timing["base"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    if config.variant in ("flan", "res"):
        state = tr.run_paradigm(config, out, base=base, data=data, parallel_experts=parallel_experts)
    else:
        state = tr.run_single_stage(config, out, base=base, data=data)
    timing["train"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    specs = _domain_specs(config)
    metrics = evaluate(state, specs, config.eval_samples, config.base.max_seq)
    base_metrics = evaluate(tr.init_state(config, base), specs, config.eval_samples, config.base.max_seq)
    result = {
        "variant": config.variant,
        "seed": config.seed,
        "steps": state.step,
        "stage": state.stage,
        "tasks": metrics["tasks"],
        "macro_accuracy": metrics["macro_accuracy"],
        "macro_loss": metrics["macro_loss"],
        "base_macro_accuracy": base_metrics["macro_accuracy"],
        "base_tasks": base_metrics["tasks"],
    }
    if state.stage == "stage3":
        report = analyze_router(state, specs, config.eval_samples)
        (out / "router_report.csv").write_text(report.to_csv(), encoding="utf-8")
        result["router_matching_weight"] = report.matching_weights()
    timing["evaluate"] = time.perf_counter() - t2
    timing["total"] = time.perf_counter() - t0

    _write_json(out / "metrics.json", result)
    _write_json(out / "loss_curves.json", state.history)
    # wall time lives apart from metrics so identical runs give identical metrics files
    _write_json(out / "timing.json", timing)
    return result


def cmd_run_all(config: RunConfig, out: Path, args) -> dict:
    return run_all(config, out, parallel_experts=args.parallel_experts)


def cmd_plug_task(config: RunConfig, out: Path, args) -> dict:
    tag = args.domain or config.plug_task
    if tag is None:
        raise UsageError("no task to plug: set plug_task in the config or pass --domain")
    spec = config.task(tag)
    state = load_checkpoint(_checkpoint_path(args, out, "stage3"))
    data = tr.build_data(config)
    new_data = generate(spec, "train", config.base.max_seq)
    per_task = config.router_samples_per_task
    router_data = mixture(
        [ds if per_task is None else ds[:per_task] for ds in (*data.domains.values(), new_data)], config.seed
    )
    full = [data.universal, *data.domains.values(), new_data, router_data]
    state, audit = tr.plug_new_task(
        state, new_data, tag, config.optimizer("plug_expert"), config.optimizer("plug_router"),
        router_data, full, loss_positions=config.loss_positions,
    )
    path = save_checkpoint(state, out / f"plug-{tag}")
    metrics = evaluate(state, [*_domain_specs(config), spec], config.eval_samples, config.base.max_seq)
    result = {"checkpoint": str(path), "audit": audit.to_dict(), "metrics": metrics,
              "published_param_fraction": PUBLISHED_PLUG_FRACTION,
              "published_data_fraction": PUBLISHED_PLUG_DATA_FRACTION}
    _write_json(out / f"plug-{tag}" / "plug_metrics.json", result)
    return result


def cmd_eval(config: RunConfig, out: Path, args) -> dict:
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
    else:
        state = tr.init_state(config, tr.load_base(config))
    return evaluate(state, _domain_specs(config, args.tasks), config.eval_samples, config.base.max_seq)


def cmd_analyze_router(config: RunConfig, out: Path, args) -> dict:
    layers = _int_list(args.layers, "--layers") if args.layers else None
    if layers is not None:
        bad = [l for l in layers if not 0 <= l < config.base.n_layers]
        if bad:
            raise UsageError(f"--layers out of range for {config.base.n_layers} layers: {bad}")
    state = load_checkpoint(_checkpoint_path(args, out, "stage3"))
    report = analyze_router(state, _domain_specs(config), config.eval_samples, layers)
    out.mkdir(parents=True, exist_ok=True)
    (out / "router_report.csv").write_text(report.to_csv(), encoding="utf-8")
    return {"report": str(out / "router_report.csv"), "matching_weight": report.matching_weights()}


def cmd_param_audit(config: RunConfig, out: Path, args) -> dict:
    if args.checkpoint:
        if args.experts is not None:
            raise UsageError("--experts only applies to config audits, not --checkpoint")
        report = param_audit(load_checkpoint(args.checkpoint), args.scenario)
    else:
        if args.experts is not None and args.experts < 1:
            raise UsageError("--experts must be >= 1")
        report = param_audit(config, args.scenario, args.experts)
    if args.scenario == "plug_task":
        report["published_fraction"] = PUBLISHED_PLUG_FRACTION
        report["note"] = ("the published figure counts an unpublished set of adapted layers; "
                          "this fraction comes from enumerating the configured sites")
    return report


def cmd_export_data(config: RunConfig, out: Path, args) -> dict:
    data = tr.build_data(config)
    folder = out / "data"
    folder.mkdir(parents=True, exist_ok=True)
    written = {}

    def dump(name, examples):
        path = folder / f"{name}.tsv"
        export_examples(examples, path)
        written[name] = {"path": str(path), "examples": len(examples)}

    dump("universal", data.universal)
    dump("router", data.router)
    if data.pretrain:
        dump("pretrain", data.pretrain)
    for spec in config.tasks:
        dump(f"{spec.task_id}-eval", eval_split(spec, config.eval_samples, config.base.max_seq))
    for tag, examples in data.domains.items():
        dump(f"{tag}-train", examples)
    return written


HANDLERS = {
    "pretrain-base": cmd_pretrain_base,
    "train-universal": cmd_train_universal,
    "train-expert": cmd_train_expert,
    "train-router": cmd_train_router,
    "run-all": cmd_run_all,
    "plug-task": cmd_plug_task,
    "eval": cmd_eval,
    "analyze-router": cmd_analyze_router,
    "param-audit": cmd_param_audit,
    "export-data": cmd_export_data,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s", force=True)
    try:
        config = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        if overrides:
            config = config.replace(**overrides)
        out = Path(config.out)
        result = HANDLERS[args.command](config, out, args)
    except (UsageError, ConfigError, DataError, AdapterError) as exc:
        log.error("%s", exc)
        return 1
    except (CheckpointError, tr.TrainingDivergedError, tr.FreezeViolation, OSError) as exc:
        kind = "corrupt checkpoint" if isinstance(exc, CorruptCheckpointError) else type(exc).__name__
        log.error("%s: %s", kind, exc)
        return 2
    _emit(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
