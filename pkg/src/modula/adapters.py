"""LoRA experts, the softmax router, and the four stack compositions.

Shapes follow the column-vector convention of the method: ``A`` is
(rank, d_in), ``B`` is (d_out, rank), the router weight is (n_experts, d_in).
Inputs are row vectors of shape (..., d_in), so every product is evaluated as
``x @ W.T``; any number of leading token dims is allowed.

Variants
--------
plain   one expert, no router:            y = E(x) + W0 x
molora  n routed experts:                 y = sum_i s_i E_i(x) + W0 x
flan    universal + domain experts routed side by side after staging
res     universal trunk h = E*(x); domain experts refine h:
        y = sum_i s_i B_i LeakyReLU(A_i h) + W0 x + h
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VARIANTS = ("plain", "molora", "flan", "res")


class AdapterError(ValueError):
    pass


@dataclass(eq=False)
class LoraExpert:
    A: Tensor
    B: Tensor
    alpha: float
    role: str = "domain"
    tag: str = ""

    def __post_init__(self):
        r, d_in = self.A.shape
        d_out, r_b = self.B.shape
        if r != r_b:
            raise AdapterError(f"rank mismatch: A is {self.A.shape}, B is {self.B.shape}")
        if not 1 <= r <= min(d_in, d_out):
            raise AdapterError(f"rank {r} outside [1, min(d_in={d_in}, d_out={d_out})]")
        if self.role not in ("universal", "domain"):
            raise AdapterError(f"unknown expert role {self.role!r}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def tensors(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B}

    def param_count(self) -> int:
        return self.rank * (self.d_in + self.d_out)


def new_expert(
    d_in: int,
    d_out: int,
    rank: int,
    rng: np.random.Generator,
    alpha: float | None = None,
    role: str = "domain",
    tag: str = "",
) -> LoraExpert:
    """A ~ N(0, 1/rank), B = 0, alpha defaults to 2 * rank."""
    if rank < 1:
        raise AdapterError(f"rank must be >= 1, got {rank}")
    A = Tensor(ad.float32_grid(rng.normal(0.0, np.sqrt(1.0 / rank), (rank, d_in))))
    B = Tensor(np.zeros((d_out, rank)))
    return LoraExpert(A, B, float(2 * rank if alpha is None else alpha), role, tag)


@dataclass(eq=False)
class Router:
    W: Tensor

    @property
    def n_experts(self) -> int:
        return self.W.shape[0]

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @classmethod
    def zeros(cls, n_experts: int, d_in: int) -> Router:
        return cls(Tensor(np.zeros((n_experts, d_in))))


@dataclass(eq=False)
class AdapterStack:
    variant: str
    d_in: int
    d_out: int
    universal: LoraExpert | None = None
    domain_experts: list[LoraExpert] = field(default_factory=list)
    router: Router | None = None
    residual_enabled: bool = True
    leaky_slope: float = ad.DEFAULT_LEAKY_SLOPE
    active_expert_override: int | None = None
    # flan only: whether the universal expert takes a router row in stage 3,
    # and whether its frozen delta stays in the stage-2 sum
    route_universal: bool = True
    stage2_keep_universal: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise AdapterError(f"unknown variant {self.variant!r}")
        self.validate()

    def router_width(self) -> int:
        n = len(self.domain_experts)
        if self.variant == "flan" and self.route_universal:
            return n + 1
        return n

    def routed_experts(self) -> list[LoraExpert]:
        if self.variant == "flan" and self.route_universal:
            return [self.universal, *self.domain_experts]
        return list(self.domain_experts)

    def validate(self) -> None:
        v = self.variant
        if v in ("plain", "molora") and self.universal is not None:
            raise AdapterError(f"{v} stacks have no universal expert")
        if v in ("flan", "res") and self.universal is None:
            raise AdapterError(f"{v} stacks need a universal expert")
        if v == "plain" and (len(self.domain_experts) != 1 or self.router is not None):
            raise AdapterError("plain stacks hold exactly one expert and no router")
        if self.router is not None:
            if self.router.n_experts != self.router_width():
                raise AdapterError(
                    f"{v} router has {self.router.n_experts} rows, expected {self.router_width()}"
                )
            if self.router.d_in != self.d_in:
                raise AdapterError(f"router input dim {self.router.d_in} != stack d_in {self.d_in}")
        expert_in = self.d_out if v == "res" else self.d_in
        for e in self.domain_experts:
            if (e.d_in, e.d_out) != (expert_in, self.d_out):
                raise AdapterError(f"expert {e.tag!r} has dims {(e.d_in, e.d_out)}, expected {(expert_in, self.d_out)}")
        if self.universal is not None and (self.universal.d_in, self.universal.d_out) != (self.d_in, self.d_out):
            raise AdapterError("universal expert dims do not match the site")
        tags = [e.tag for e in self.domain_experts]
        if len(set(tags)) != len(tags):
            raise AdapterError(f"duplicate expert tags: {tags}")

    def expert_index(self, tag: str) -> int:
        for i, e in enumerate(self.domain_experts):
            if e.tag == tag:
                return i
        raise AdapterError(f"no expert tagged {tag!r}")

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        if self.universal is not None:
            out["universal.A"] = self.universal.A
            out["universal.B"] = self.universal.B
        for e in self.domain_experts:
            out[f"experts.{e.tag}.A"] = e.A
            out[f"experts.{e.tag}.B"] = e.B
        if self.router is not None:
            out["router.W"] = self.router.W
        return out


# ---------------------------------------------------------------------------
# building blocks

def expert_delta(e: LoraExpert, x: Tensor) -> Tensor:
    if x.shape[-1] != e.d_in:
        raise ad.ShapeError(f"expert {e.tag or e.role!r} expects d_in={e.d_in}, got input {x.shape}")
    return ad.linear(ad.linear(x, e.A), e.B) * e.scale


def res_expert_delta(e: LoraExpert, h: Tensor, slope: float) -> Tensor:
    if h.shape[-1] != e.d_in:
        raise ad.ShapeError(f"expert {e.tag!r} expects d_in={e.d_in}, got input {h.shape}")
    return ad.linear(ad.leaky_relu(ad.linear(h, e.A), slope), e.B) * e.scale


def route(router: Router, x: Tensor) -> Tensor:
    if x.shape[-1] != router.d_in:
        raise ad.ShapeError(f"router expects d_in={router.d_in}, got input {x.shape}")
    return ad.softmax(ad.linear(x, router.W), axis=-1)


def _mix(s: Tensor, deltas: list[Tensor]) -> Tensor:
    total = None
    for i, d in enumerate(deltas):
        term = s[..., i : i + 1] * d
        total = term if total is None else total + term
    return total


def _require_router(stack: AdapterStack) -> Router:
    if stack.router is None:
        raise AdapterError(f"{stack.variant} stack has no router")
    return stack.router


def _require_override(stack: AdapterStack) -> LoraExpert:
    i = stack.active_expert_override
    if i is None:
        raise AdapterError("stage 2 needs active_expert_override to select a domain expert")
    return stack.domain_experts[i]


# ---------------------------------------------------------------------------
# variant forwards

def plain_forward(stack: AdapterStack, x: Tensor, w0x: Tensor) -> tuple[Tensor, None]:
    return expert_delta(stack.domain_experts[0], x) + w0x, None


def molora_forward(stack: AdapterStack, x: Tensor, w0x: Tensor) -> tuple[Tensor, Tensor]:
    if stack.variant != "molora":
        raise AdapterError(f"molora_forward called on a {stack.variant} stack")
    s = route(_require_router(stack), x)
    return _mix(s, [expert_delta(e, x) for e in stack.domain_experts]) + w0x, s


def flan_forward(stack: AdapterStack, x: Tensor, w0x: Tensor, stage: int) -> tuple[Tensor, Tensor | None]:
    if stack.variant != "flan":
        raise AdapterError(f"flan_forward called on a {stack.variant} stack")
    if stage == 1:
        return expert_delta(stack.universal, x) + w0x, None
    if stage == 2:
        y = expert_delta(_require_override(stack), x) + w0x
        if stack.stage2_keep_universal:
            y = expert_delta(stack.universal, x) + y
        return y, None
    if stage == 3:
        s = route(_require_router(stack), x)
        y = _mix(s, [expert_delta(e, x) for e in stack.routed_experts()]) + w0x
        if not stack.route_universal:
            y = expert_delta(stack.universal, x) + y
        return y, s
    raise AdapterError(f"unknown stage {stage!r}")


def res_forward(
    stack: AdapterStack, x: Tensor, w0x: Tensor, stage: int
) -> tuple[Tensor, Tensor | None, Tensor]:
    """Residual composition; returns ``(y, s, h)``.

    The router reads ``x`` while the domain experts read ``h``. With
    ``residual_enabled=False`` only the ``+ h`` term is dropped, and only in
    stages 2 and 3: stage 1 has no domain experts, so the trunk is always kept
    there (otherwise the universal expert could not be trained at all).
    """
    if stack.variant != "res":
        raise AdapterError(f"res_forward called on a {stack.variant} stack")
    if stack.universal is None:
        raise AdapterError("res stack has no universal expert")
    h = expert_delta(stack.universal, x)
    if stage == 1:
        return h + w0x, None, h
    if stage == 2:
        y = res_expert_delta(_require_override(stack), h, stack.leaky_slope) + w0x
        s = None
    elif stage == 3:
        s = route(_require_router(stack), x)
        deltas = [res_expert_delta(e, h, stack.leaky_slope) for e in stack.domain_experts]
        y = _mix(s, deltas) + w0x
    else:
        raise AdapterError(f"unknown stage {stage!r}")
    if stack.residual_enabled:
        y = y + h
    return y, s, h


def stack_forward(stack: AdapterStack, x: Tensor, w0x: Tensor, stage: int = 3) -> tuple[Tensor, Tensor | None]:
    """Dispatch on the variant; plain and molora ignore ``stage``."""
    if stack.variant == "plain":
        return plain_forward(stack, x, w0x)
    if stack.variant == "molora":
        return molora_forward(stack, x, w0x)
    if stack.variant == "flan":
        return flan_forward(stack, x, w0x, stage)
    y, s, _ = res_forward(stack, x, w0x, stage)
    return y, s


# ---------------------------------------------------------------------------
# construction, counting, growth

def expert_seed(seed: int, site: tuple[int, str], tag: str) -> np.random.Generator:
    """RNG for one expert, keyed only by (seed, site, tag) so creation order is irrelevant."""
    key = zlib.crc32(f"{site[0]}|{site[1]}|{tag}".encode())
    return np.random.default_rng([seed, key])


def build_stack(
    variant: str,
    d_in: int,
    d_out: int,
    domain_tags: list[str],
    *,
    seed: int,
    site: tuple[int, str] = (0, ""),
    universal_rank: int = 4,
    domain_rank: int = 2,
    universal_alpha: float | None = None,
    domain_alpha: float | None = None,
    leaky_slope: float = ad.DEFAULT_LEAKY_SLOPE,
    residual_enabled: bool = True,
    route_universal: bool = True,
    stage2_keep_universal: bool = True,
) -> AdapterStack:
    """Fresh stack: zero-B experts; a zero router only for molora (others get one at stage 3)."""
    universal = None
    if variant in ("flan", "res"):
        universal = new_expert(d_in, d_out, universal_rank, expert_seed(seed, site, "__universal__"),
                               universal_alpha, role="universal")
    expert_in = d_out if variant == "res" else d_in
    if variant == "plain":
        domain_tags = domain_tags[:1] or ["lora"]
    experts = [
        new_expert(expert_in, d_out, domain_rank, expert_seed(seed, site, tag), domain_alpha, tag=tag)
        for tag in domain_tags
    ]
    stack = AdapterStack(
        variant, d_in, d_out, universal, experts,
        leaky_slope=leaky_slope, residual_enabled=residual_enabled,
        route_universal=route_universal, stage2_keep_universal=stage2_keep_universal,
    )
    if variant == "molora":
        attach_router(stack)
    return stack


def attach_router(stack: AdapterStack) -> Router:
    """Give the stack a zero-initialised router of the right width (uniform routing)."""
    if stack.variant == "plain":
        raise AdapterError("plain stacks have no router")
    stack.router = Router.zeros(stack.router_width(), stack.d_in)
    stack.validate()
    return stack.router


def param_count(stack: AdapterStack, d_in: int | None = None, d_out: int | None = None) -> dict:
    """Closed-form adapter parameter counts for one stack.

    Experts count ``r * (d_in + d_out)`` with their own input dim (``d_out``
    for res domain experts, which read ``h``); the router counts
    ``width * d_in`` once attached.
    """
    d_in = stack.d_in if d_in is None else d_in
    d_out = stack.d_out if d_out is None else d_out
    expert_in = d_out if stack.variant == "res" else d_in
    universal = stack.universal.rank * (d_in + d_out) if stack.universal is not None else 0
    per_expert = [e.rank * (expert_in + d_out) for e in stack.domain_experts]
    router = stack.router_width() * d_in if stack.router is not None else 0
    return {
        "universal": universal,
        "per_expert": per_expert,
        "router": router,
        "total": universal + int(np.sum(per_expert, dtype=np.int64)) + router,
    }


def add_expert(
    stack: AdapterStack,
    domain_tag: str,
    rank: int,
    seed: int,
    alpha: float | None = None,
    site: tuple[int, str] = (0, ""),
) -> AdapterStack:
    """Append a fresh zero-B domain expert; a present router gains a zero row.

    Existing expert tensors are left as the very same objects. The router is
    replaced by a widened copy whose old rows are unchanged.
    """
    if stack.variant not in ("flan", "res"):
        raise AdapterError(f"cannot add experts to a {stack.variant} stack")
    if any(e.tag == domain_tag for e in stack.domain_experts):
        raise AdapterError(f"expert tag {domain_tag!r} already exists")
    expert_in = stack.d_out if stack.variant == "res" else stack.d_in
    stack.domain_experts.append(
        new_expert(expert_in, stack.d_out, rank, expert_seed(seed, site, domain_tag), alpha, tag=domain_tag)
    )
    if stack.router is not None:
        old = stack.router.W.data
        stack.router = Router(Tensor(np.vstack([old, np.zeros((1, old.shape[1]))])))
    stack.validate()
    return stack
