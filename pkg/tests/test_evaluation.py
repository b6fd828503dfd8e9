import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from modula import training as tr
from modula.base_model import ConfigError, init_base
from modula.config import desk_config
from modula.evaluation import analyze_router, eval_split, evaluate, param_audit, task_metrics


def test_random_model_is_at_chance(tiny):
    cfg, _, _ = tiny
    state = tr.init_state(cfg, init_base(cfg.base, 123))
    spec = replace(cfg.task("reverse"), length=3)
    assert len(eval_split(spec, 1)[0].target_tokens) == 3
    assert task_metrics(state, eval_split(spec, 256))["accuracy"] < 1e-3


def test_macro_average_is_the_plain_mean(tiny_run, tiny):
    cfg, _, _ = tiny
    specs = [cfg.task(t) for t in cfg.domains]
    result = evaluate(tiny_run, specs, 32)
    accs = [result["tasks"][t]["accuracy"] for t in cfg.domains]
    losses = [result["tasks"][t]["loss"] for t in cfg.domains]
    assert result["macro_accuracy"] == pytest.approx(sum(accs) / len(accs), abs=1e-15)
    assert result["macro_loss"] == pytest.approx(sum(losses) / len(losses), abs=1e-15)


def test_accuracy_is_exact_match_by_brute_force(tiny_run, tiny):
    cfg, _, _ = tiny
    examples = eval_split(cfg.task("sort"), 16)
    hits = 0
    for ex in examples:
        seq = list(ex.input_tokens)
        for _ in ex.target_tokens:
            seq.append(int(tiny_run.logits(np.array([seq])).data[0, -1].argmax()))
        hits += seq[len(ex.input_tokens):] == list(ex.target_tokens)
    assert task_metrics(tiny_run, examples)["accuracy"] == hits / 16


def test_evaluate_needs_tasks(tiny_run):
    with pytest.raises(ConfigError):
        evaluate(tiny_run, [])


def test_router_report_vectors_are_distributions(tiny_run, tiny):
    cfg, _, _ = tiny
    report = analyze_router(tiny_run, [cfg.task(t) for t in cfg.domains], 32)
    assert len(report.cells) == len(cfg.domains) * len(tiny_run.stacks)
    for cell in report.cells:
        assert cell.mean.sum() == pytest.approx(1.0, abs=1e-9)
        assert 0 <= cell.entropy <= np.log(len(cell.mean)) + 1e-12
    weights = report.matching_weights()
    assert set(weights) == set(cfg.domains)


def test_untrained_router_is_uniform(tiny_run, tiny):
    cfg, _, _ = tiny
    state = tiny_run.clone()
    for stack in state.stacks.values():
        stack.router.W.data[...] = 0.0
    report = analyze_router(state, [cfg.task("sort")], 16)
    for cell in report.cells:
        np.testing.assert_allclose(cell.mean, 1 / len(cfg.domains), atol=1e-12)


def test_router_report_filters_layers(tiny_run, tiny):
    cfg, _, _ = tiny
    report = analyze_router(tiny_run, [cfg.task("sort")], 8, layers=[5])
    assert report.cells == []


def test_router_analysis_needs_stage3(tiny):
    cfg, _, base = tiny
    with pytest.raises(ConfigError):
        analyze_router(tr.init_state(cfg, base), [cfg.task("sort")])


def test_router_csv(tiny_run, tiny):
    cfg, _, _ = tiny
    text = analyze_router(tiny_run, [cfg.task("sort")], 8).to_csv()
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["layer", "site", "task", "expert", "mean_weight", "entropy"]
    assert len(rows) == 1 + len(tiny_run.stacks) * len(cfg.domains)


# ---------------------------------------------------------------------------
# parameter audit

def test_full_retrain_trains_everything(tiny):
    cfg, _, _ = tiny
    audit = param_audit(cfg, "full_retrain")
    assert audit["fraction"] == 1.0
    assert audit["trained_params"] == audit["total_params"]


def test_config_audit_matches_a_real_state(tiny, tiny_run):
    cfg, _, _ = tiny
    from_config = param_audit(cfg)
    from_state = param_audit(tiny_run)
    assert from_config["total_params"] == from_state["total_params"]
    assert from_config["trained_params"] == from_state["trained_params"]
    assert from_state["total_params"] == sum(t.size for t in tiny_run.adapter_tensors().values())


def test_plug_audit_trains_one_expert_and_routers(tiny):
    cfg, _, _ = tiny
    rows = param_audit(cfg)["tensors"]
    trained = {r["tensor"] for r in rows if r["trained"]}
    assert all(".router.W" in n or ".experts.parity." in n for n in trained)
    assert sum(".router.W" in n for n in trained) == len(cfg.base.sites())


def test_plug_fraction_falls_with_more_experts(tiny):
    cfg, _, _ = tiny
    fractions = [param_audit(cfg, n_experts=n)["fraction"] for n in range(1, 8)]
    assert all(b < a for a, b in zip(fractions, fractions[1:]))


def test_unknown_scenario(tiny):
    with pytest.raises(ConfigError):
        param_audit(tiny[0], "partial")


@pytest.mark.slow
def test_pretrained_base_copies():
    cfg = desk_config()
    data = tr.build_data(cfg)
    state = tr.init_state(cfg, tr.load_base(cfg, data))
    assert evaluate(state, [cfg.task("copy")], 256)["macro_accuracy"] > 0.9
