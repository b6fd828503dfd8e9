"""A tiny frozen pre-norm decoder-only transformer.

Every linear projection inside a block is an *adapter site*. When a stack is
attached to a site, the stack decides the site output from the site input and
the frozen product ``W0 x``; otherwise the plain ``W0 x`` is used.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

if TYPE_CHECKING:
    from .adapters import AdapterStack

SITE_TAGS = ("attn_q", "attn_k", "attn_v", "attn_o", "ff_in", "ff_out")
DEFAULT_SITES = ("attn_q", "attn_v", "ff_in")
MASK_VALUE = -1e9

SiteKey = tuple[int, str]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BaseConfig:
    n_vocab: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    max_seq: int = 32
    adapter_sites: tuple[str, ...] = DEFAULT_SITES

    def __post_init__(self):
        object.__setattr__(self, "adapter_sites", tuple(self.adapter_sites))
        for name in ("n_vocab", "d_model", "n_layers", "n_heads", "d_ff", "max_seq"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_seq < 2:
            raise ConfigError("max_seq must be at least 2")
        unknown = set(self.adapter_sites) - set(SITE_TAGS)
        if unknown:
            raise ConfigError(f"unknown adapter sites: {sorted(unknown)}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def site_dims(self, tag: str) -> tuple[int, int]:
        """(d_in, d_out) of the frozen projection at ``tag``."""
        if tag == "ff_in":
            return self.d_model, self.d_ff
        if tag == "ff_out":
            return self.d_ff, self.d_model
        if tag in SITE_TAGS:
            return self.d_model, self.d_model
        raise ConfigError(f"unknown site tag {tag!r}")

    def sites(self) -> list[AdapterSite]:
        return [
            AdapterSite(layer, tag, *self.site_dims(tag))
            for layer in range(self.n_layers)
            for tag in SITE_TAGS
            if tag in self.adapter_sites
        ]

    def to_dict(self) -> dict:
        return {f.name: (list(getattr(self, f.name)) if f.name == "adapter_sites" else getattr(self, f.name))
                for f in fields(self)}


@dataclass(frozen=True)
class AdapterSite:
    layer: int
    tag: str
    d_in: int
    d_out: int

    @property
    def key(self) -> SiteKey:
        return (self.layer, self.tag)


@dataclass(eq=False)
class LayerParams:
    attn_q: Tensor
    attn_k: Tensor
    attn_v: Tensor
    attn_o: Tensor
    ff_in: Tensor
    ff_out: Tensor
    norm_attn: Tensor
    norm_ff: Tensor


@dataclass(eq=False)
class BaseParams:
    config: BaseConfig
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[LayerParams]
    norm_out: Tensor
    lm_head: Tensor
    frozen: bool = field(default=True)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"base.tok_emb": self.tok_emb, "base.pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            for f in fields(layer):
                out[f"base.layers.{i}.{f.name}"] = getattr(layer, f.name)
        out["base.norm_out"] = self.norm_out
        out["base.lm_head"] = self.lm_head
        return out

    def weight(self, key: SiteKey) -> Tensor:
        layer, tag = key
        return getattr(self.layers[layer], tag)


def _build(config: BaseConfig, arrays: dict[str, np.ndarray], trainable: bool) -> BaseParams:
    def t(name):
        return Tensor(ad.float32_grid(arrays[name]), requires_grad=trainable, name=name)

    layers = [
        LayerParams(**{f.name: t(f"base.layers.{i}.{f.name}") for f in fields(LayerParams)})
        for i in range(config.n_layers)
    ]
    return BaseParams(
        config=config,
        tok_emb=t("base.tok_emb"),
        pos_emb=t("base.pos_emb"),
        layers=layers,
        norm_out=t("base.norm_out"),
        lm_head=t("base.lm_head"),
        frozen=not trainable,
    )


def init_base(config: BaseConfig, seed: int, trainable: bool = False) -> BaseParams:
    """Scaled-normal init (std ``1/sqrt(d_model)``), unit norm gains.

    ``trainable=True`` is only meant for the pretraining harness; every other
    caller gets frozen parameters.
    """
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(config.d_model)
    d, v = config.d_model, config.n_vocab
    arrays = {
        "base.tok_emb": rng.normal(0.0, std, (v, d)),
        "base.pos_emb": rng.normal(0.0, std, (config.max_seq, d)),
    }
    for i in range(config.n_layers):
        for tag in SITE_TAGS:
            d_in, d_out = config.site_dims(tag)
            arrays[f"base.layers.{i}.{tag}"] = rng.normal(0.0, std, (d_out, d_in))
        arrays[f"base.layers.{i}.norm_attn"] = np.ones(d)
        arrays[f"base.layers.{i}.norm_ff"] = np.ones(d)
    arrays["base.norm_out"] = np.ones(d)
    arrays["base.lm_head"] = rng.normal(0.0, std, (v, d))
    return _build(config, arrays, trainable)


def from_arrays(config: BaseConfig, arrays: dict[str, np.ndarray], trainable: bool = False) -> BaseParams:
    return _build(config, arrays, trainable)


def freeze(params: BaseParams) -> BaseParams:
    """A frozen copy: fresh tensors with ``requires_grad=False``."""
    return _build(params.config, {k: t.data.copy() for k, t in params.named_tensors().items()}, False)


def _site(params, stacks, key, x, stage, trace):
    w0 = params.weight(key)
    w0x = ad.linear(x, w0)
    stack = stacks.get(key) if stacks else None
    if stack is None:
        return w0x
    if (stack.d_in, stack.d_out) != (w0.shape[1], w0.shape[0]):
        raise ConfigError(
            f"stack at {key} has dims {(stack.d_in, stack.d_out)}, "
            f"frozen weight has {(w0.shape[1], w0.shape[0])}"
        )
    from .adapters import stack_forward

    y, s = stack_forward(stack, x, w0x, stage)
    if trace is not None and s is not None:
        trace[key] = s.data
    return y


def _attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    b, t, d = q.shape
    hd = d // n_heads

    def heads(z):
        return ad.transpose(ad.reshape(z, (b, t, n_heads, hd)), (0, 2, 1, 3))

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
    mask = np.triu(np.full((t, t), MASK_VALUE), k=1)
    probs = ad.softmax(scores + mask, axis=-1)
    out = ad.matmul(probs, vh)
    return ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, d))


def forward(
    params: BaseParams,
    stacks: dict[SiteKey, AdapterStack] | None,
    tokens,
    stage: int = 3,
    trace: dict | None = None,
) -> Tensor:
    """Logits of shape (seq, n_vocab), or (batch, seq, n_vocab) for 2-D token input.

    ``stage`` selects the stack forward path (1, 2 or 3); ``trace``, when a
    dict, receives the per-token routing coefficients of every routed site.
    """
    cfg = params.config
    ids = np.asarray(tokens, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    b, t = ids.shape
    if t > cfg.max_seq:
        raise ValueError(f"sequence length {t} exceeds max_seq={cfg.max_seq}")
    if t == 0:
        raise ValueError("empty token sequence")

    x = ad.embedding(params.tok_emb, ids) + params.pos_emb[:t]
    for i, layer in enumerate(params.layers):
        h = ad.rms_norm(x, layer.norm_attn)
        q = _site(params, stacks, (i, "attn_q"), h, stage, trace)
        k = _site(params, stacks, (i, "attn_k"), h, stage, trace)
        v = _site(params, stacks, (i, "attn_v"), h, stage, trace)
        att = _attention(q, k, v, cfg.n_heads)
        x = x + _site(params, stacks, (i, "attn_o"), att, stage, trace)
        h = ad.rms_norm(x, layer.norm_ff)
        f = ad.gelu(_site(params, stacks, (i, "ff_in"), h, stage, trace))
        x = x + _site(params, stacks, (i, "ff_out"), f, stage, trace)
    logits = ad.linear(ad.rms_norm(x, params.norm_out), params.lm_head)
    if single:
        logits = ad.reshape(logits, (t, cfg.n_vocab))
        if trace is not None:
            for key in trace:
                trace[key] = trace[key][0]
    return logits
