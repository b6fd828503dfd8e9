"""Random adapter stacks and an independent per-token reference evaluator."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from modula import autodiff as ad
from modula.adapters import AdapterStack, attach_router, build_stack
from modula.config import desk_config, desk_tasks


def random_stack(
    variant: str,
    rng: np.random.Generator,
    d_in: int = 8,
    d_out: int = 8,
    n_experts: int = 2,
    universal_rank: int = 2,
    domain_rank: int = 2,
    residual_enabled: bool = True,
    zero_b: bool = False,
    with_router: bool = True,
) -> AdapterStack:
    """A stack with every tensor drawn at random (B too, unless ``zero_b``)."""
    tags = [f"d{i}" for i in range(n_experts)]
    stack = build_stack(
        variant, d_in, d_out, tags, seed=int(rng.integers(2**31)),
        universal_rank=universal_rank, domain_rank=domain_rank, residual_enabled=residual_enabled,
    )
    if with_router and variant in ("flan", "res"):
        attach_router(stack)
    for name, t in stack.named_tensors().items():
        if name.endswith(".B") and zero_b:
            continue
        t.data[...] = rng.normal(0.0, 0.5, t.shape)
    return stack


def site_inputs(rng: np.random.Generator, d_in: int, d_out: int, n_tokens: int = 3):
    x = rng.normal(size=(n_tokens, d_in))
    w0 = rng.normal(size=(d_out, d_in))
    return ad.Tensor(x), ad.Tensor(x @ w0.T)


# ---------------------------------------------------------------------------
# reference: one token at a time, explicit loops, no autodiff

def _mv(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.array([math.fsum(m[i, j] * v[j] for j in range(m.shape[1])) for i in range(m.shape[0])])


def _softmax(z: np.ndarray) -> np.ndarray:
    top = max(z)
    e = [math.exp(v - top) for v in z]
    total = math.fsum(e)
    return np.array([v / total for v in e])


def _lora(e, v):
    return e.scale * _mv(e.B.data, _mv(e.A.data, v))


def _leaky(v, slope):
    return np.where(v >= 0, v, slope * v)


def reference_token(stack: AdapterStack, x: np.ndarray, w0x: np.ndarray, stage: int = 3) -> np.ndarray:
    """Per-token output of a stack written straight from the defining formulas."""
    v = stack.variant
    if v == "plain":
        return _lora(stack.domain_experts[0], x) + w0x
    if v == "molora":
        s = _softmax(_mv(stack.router.W.data, x))
        return sum(s[i] * _lora(e, x) for i, e in enumerate(stack.domain_experts)) + w0x
    if v == "flan":
        if stage == 1:
            return _lora(stack.universal, x) + w0x
        if stage == 2:
            e = stack.domain_experts[stack.active_expert_override]
            return _lora(stack.universal, x) + _lora(e, x) + w0x
        experts = [stack.universal, *stack.domain_experts]
        s = _softmax(_mv(stack.router.W.data, x))
        return sum(s[i] * _lora(e, x) for i, e in enumerate(experts)) + w0x
    h = _lora(stack.universal, x)
    if stage == 1:
        return h + w0x

    def refine(e):
        return e.scale * _mv(e.B.data, _leaky(_mv(e.A.data, h), stack.leaky_slope))

    if stage == 2:
        y = refine(stack.domain_experts[stack.active_expert_override]) + w0x
    else:
        s = _softmax(_mv(stack.router.W.data, x))
        y = sum(s[i] * refine(e) for i, e in enumerate(stack.domain_experts)) + w0x
    return y + h if stack.residual_enabled else y


def reference(stack: AdapterStack, x: np.ndarray, w0x: np.ndarray, stage: int = 3) -> np.ndarray:
    return np.stack([reference_token(stack, x[i], w0x[i], stage) for i in range(x.shape[0])])


# forwards exercised by the gradient oracle: (variant, stage, residual_enabled)
FORWARD_CASES = [
    ("plain", 3, True),
    ("molora", 3, True),
    ("flan", 1, True),
    ("flan", 2, True),
    ("flan", 3, True),
    ("res", 1, True),
    ("res", 2, True),
    ("res", 3, True),
    ("res", 2, False),
    ("res", 3, False),
]


def case_id(case) -> str:
    variant, stage, residual = case
    return f"{variant}-stage{stage}" + ("" if residual else "-ablation")


# ---------------------------------------------------------------------------
# a run small enough for unit tests

TINY_BASE = {"n_vocab": 64, "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_seq": 12,
             "adapter_sites": ["attn_q", "ff_in"]}


def tiny_config(**overrides):
    tasks = [replace(t, n_samples=96) for t in desk_tasks()]
    opts = {
        "pretrain": {"lr": 3e-3, "batch_size": 8, "steps": 30},
        "stage1": {"lr": 1e-2, "batch_size": 8, "steps": 40},
        "stage2": {"lr": 1e-2, "batch_size": 8, "steps": 20},
        "stage3": {"lr": 3e-2, "batch_size": 8, "steps": 60},
        "single_stage": {"lr": 1e-2, "batch_size": 8},
        "plug_expert": {"lr": 1e-2, "batch_size": 8, "steps": 10},
        "plug_router": {"lr": 1e-2, "batch_size": 8, "steps": 10},
    }
    settings = dict(base=TINY_BASE, tasks=[t.to_dict() for t in tasks], universal_samples=128,
                    pretrain_samples=64, router_samples_per_task=32, eval_samples=32, optimizers=opts)
    settings.update(overrides)
    return desk_config(**settings)
