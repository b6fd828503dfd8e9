import numpy as np
import pytest

from modula import autodiff as ad
from modula import training as tr
from modula.base_model import ConfigError
from modula.config import OptimizerConfig
from modula.data import DataError, generate, mixture
from modula.evaluation import evaluate

def fresh_state(tiny, **overrides):
    cfg, _, base = tiny
    return tr.init_state(cfg.replace(**overrides) if overrides else cfg, base)


# ---------------------------------------------------------------------------
# trainable masks

def test_stage1_trains_only_the_universal_expert(tiny):
    state = tr.set_trainable(fresh_state(tiny), "stage1")
    sites = len(state.stacks)
    assert len(state.trainable) == 2 * sites
    assert all(".universal." in n for n in state.trainable)
    live = {n for n, t in state.named_tensors().items() if t.requires_grad}
    assert live == set(state.trainable)


def test_stage2_trains_only_the_tagged_expert(tiny):
    state = tr.set_trainable(fresh_state(tiny), "stage2:sort")
    assert all(".experts.sort." in n for n in state.trainable)
    assert all(s.domain_experts[s.active_expert_override].tag == "sort" for s in state.stacks.values())


def test_stage3_trains_only_routers(tiny_run):
    state = tiny_run.clone()
    tr.set_trainable(state, "stage3")
    assert all(n.endswith(".router.W") for n in state.trainable)
    assert len(state.trainable) == len(state.stacks)


def test_single_stage_trains_every_adapter(tiny):
    state = tr.set_trainable(fresh_state(tiny, variant="molora"), "single_stage")
    assert set(state.trainable) == set(state.adapter_tensors())
    assert not any(t.requires_grad for t in state.base.named_tensors().values())


def test_mask_errors(tiny):
    state = fresh_state(tiny)
    with pytest.raises(ConfigError):
        tr.set_trainable(state, "stage2:geometry")
    with pytest.raises(ConfigError):
        tr.set_trainable(state, "stage3")
    with pytest.raises(ConfigError):
        tr.set_trainable(state, "single_stage")
    with pytest.raises(ConfigError):
        tr.set_trainable(fresh_state(tiny, variant="plain"), "stage1")
    with pytest.raises(ConfigError):
        tr.set_trainable(state, "stage4")


def test_masks_are_a_function_of_variant_and_stage(tiny):
    a, b = fresh_state(tiny), fresh_state(tiny)
    tr.set_trainable(a, "stage2:reverse")
    tr.set_trainable(a, "stage1")
    tr.set_trainable(b, "stage1")
    assert a.trainable == b.trainable


# ---------------------------------------------------------------------------
# optimizer and step loop

def test_zero_learning_rate_changes_nothing(tiny):
    cfg, data, _ = tiny
    state = fresh_state(tiny)
    before = state.hashes()
    tr.train_stage(state, "stage1", data.universal, OptimizerConfig(lr=0.0, batch_size=8, steps=15))
    assert state.hashes() == before


def test_adamw_converges_on_a_quadratic():
    target = 3.0
    p = ad.Tensor([0.0], requires_grad=True)
    opt = tr.AdamW({"p": p}, OptimizerConfig(lr=0.05))
    for _ in range(500):
        loss = ad.sum((p - target) * (p - target))
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
    assert abs(p.data[0] - target) < 1e-4


def test_adamw_is_monotone_after_warmup():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(4, 4))
    q = q @ q.T + np.eye(4)
    p = ad.Tensor(rng.normal(size=4), requires_grad=True)
    opt = tr.AdamW({"p": p}, OptimizerConfig(lr=1e-3))
    values = []
    for _ in range(400):
        loss = ad.sum(p * ad.reshape(ad.matmul(ad.Tensor(q), ad.reshape(p, (4, 1))), (4,)))
        values.append(float(loss.data))
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
    assert all(b <= a for a, b in zip(values[20:], values[21:]))


def test_weight_decay_is_decoupled():
    p = ad.Tensor([2.0], requires_grad=True)
    opt = tr.AdamW({"p": p}, OptimizerConfig(lr=0.1, weight_decay=0.5))
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == ad.float32_grid(np.array(2.0 * (1 - 0.1 * 0.5)))


def test_trained_parameters_stay_on_the_float32_grid(tiny_run):
    for name, t in tiny_run.named_tensors().items():
        assert np.array_equal(t.data, ad.float32_grid(t.data)), name
    for name, (m, v) in tiny_run.moments.items():
        assert np.array_equal(m, ad.float32_grid(m)) and np.array_equal(v, ad.float32_grid(v)), name


def test_moments_only_for_trainable_tensors(tiny):
    _, data, _ = tiny
    state = fresh_state(tiny)
    tr.train_stage(state, "stage1", data.universal, OptimizerConfig(lr=1e-2, batch_size=8, steps=3))
    assert set(state.moments) == set(state.trainable)


def test_empty_dataset(tiny):
    with pytest.raises(DataError):
        tr.train_stage(fresh_state(tiny), "stage1", [], OptimizerConfig())


def test_divergence_reports_the_step(tiny):
    _, data, _ = tiny
    state = fresh_state(tiny)
    with pytest.raises(tr.TrainingDivergedError) as info:
        tr.train_stage(state, "stage1", data.universal, OptimizerConfig(lr=1e300, batch_size=8, steps=10))
    assert info.value.step >= 1


def test_stage2_leaves_everything_else_bit_identical(tiny, tiny_run):
    _, data, _ = tiny
    state = tiny_run.clone()
    before = state.hashes()
    tr.train_stage(state, "stage2:sort", data.domains["sort"], OptimizerConfig(lr=1e-2, batch_size=8, steps=100))
    after = state.hashes()
    changed = {n for n in before if before[n] != after[n]}
    assert changed and all(".experts.sort." in n for n in changed)


def test_freeze_violation_is_detected(tiny, monkeypatch):
    _, data, _ = tiny
    state = fresh_state(tiny)
    original = tr.optimize

    def tamper(params, *args, **kwargs):
        out = original(params, *args, **kwargs)
        next(iter(state.base.named_tensors().values())).data[0, 0] += 1.0
        return out

    monkeypatch.setattr(tr, "optimize", tamper)
    with pytest.raises(tr.FreezeViolation):
        tr.train_stage(state, "stage1", data.universal, OptimizerConfig(lr=1e-2, batch_size=8, steps=2))


# ---------------------------------------------------------------------------
# the paradigm

def test_stage2_order_does_not_matter(tiny, tiny_run):
    cfg, data, base = tiny
    permuted = tr.run_paradigm(cfg, base=base, data=data, domain_order=list(reversed(cfg.domains)))
    assert permuted.hashes() == tiny_run.hashes()


def test_parallel_experts_match_serial(tiny, tiny_run):
    cfg, data, base = tiny
    parallel = tr.run_paradigm(cfg, base=base, data=data, parallel_experts=True)
    assert parallel.hashes() == tiny_run.hashes()


def test_runs_are_deterministic(tiny, tiny_run):
    cfg, data, base = tiny
    again = tr.run_paradigm(cfg, base=base, data=data)
    assert again.hashes() == tiny_run.hashes()
    assert again.history == tiny_run.history


def test_res_without_stage1_is_rejected(tiny):
    cfg, data, base = tiny
    with pytest.raises(ConfigError):
        tr.run_paradigm(cfg.replace(stages=["stage2", "stage3"]), base=base, data=data)


def test_run_paradigm_rejects_single_stage_variants(tiny):
    cfg, data, base = tiny
    with pytest.raises(ConfigError):
        tr.run_paradigm(cfg.replace(variant="molora"), base=base, data=data)
    with pytest.raises(ConfigError):
        tr.run_single_stage(cfg, base=base, data=data)


def test_stage3_beats_a_frozen_uniform_router(tiny, tiny_run):
    cfg, _, _ = tiny
    specs = [cfg.task(t) for t in cfg.domains]
    uniform = tiny_run.clone()
    for stack in uniform.stacks.values():
        stack.router.W.data[...] = 0.0
    trained = evaluate(tiny_run, specs, 64)["macro_loss"]
    assert trained < evaluate(uniform, specs, 64)["macro_loss"]


def test_baseline_gets_the_same_step_budget(tiny, tiny_run):
    cfg, data, base = tiny
    plain = tr.run_single_stage(cfg.replace(variant="plain"), base=base, data=data)
    assert plain.step == tiny_run.step == tr.stage_budget(cfg, data)


def test_checkpoints_after_each_stage(tiny, tmp_path):
    cfg, data, base = tiny
    tr.run_paradigm(cfg, tmp_path, base=base, data=data)
    expected = {"stage1", "stage3", *[f"stage2-{t}" for t in cfg.domains]}
    assert {p.name for p in tmp_path.iterdir()} == expected


def test_adopt_experts_refuses_a_foreign_snapshot(tiny, tiny_run):
    other = tiny_run.clone()
    for stack in other.stacks.values():
        stack.universal.B.data += 1.0
    with pytest.raises(ConfigError):
        tr.adopt_experts(tiny_run.clone(), "sort", other)


# ---------------------------------------------------------------------------
# plugging

def _plug(tiny, state):
    cfg, data, _ = tiny
    spec = cfg.task(cfg.plug_task)
    new = generate(spec, "train")
    router = mixture([*(ds[:32] for ds in data.domains.values()), new[:32]], 0)
    full = [data.universal, *data.domains.values(), new, router]
    return tr.plug_new_task(state, new, spec.task_id, cfg.optimizer("plug_expert"), cfg.optimizer("plug_router"),
                            router, full)


def test_plug_keeps_old_experts_and_reports_fractions(tiny, tiny_run):
    state = tiny_run.clone()
    old = {n: t.data.copy() for n, t in state.adapter_tensors().items() if ".router." not in n}
    state, audit = _plug(tiny, state)
    now = state.adapter_tensors()
    assert all(np.array_equal(now[n].data, v) for n, v in old.items())
    assert all(len(s.domain_experts) == 4 for s in state.stacks.values())
    assert 0 < audit.param_fraction < 0.5
    assert 0 < audit.data_fraction < 1
    trained = sum(t.size for n, t in now.items() if ".experts.add." in n or n.endswith("router.W"))
    assert audit.trained_params == trained
    assert audit.total_params == sum(t.size for t in now.values())


def test_plug_errors(tiny, tiny_run):
    with pytest.raises(ConfigError):
        _plug(tiny, fresh_state(tiny))
    state = tiny_run.clone()
    cfg, data, _ = tiny
    with pytest.raises(ConfigError):
        tr.plug_new_task(state, data.domains["sort"], "sort", OptimizerConfig(), OptimizerConfig(), data.router)
