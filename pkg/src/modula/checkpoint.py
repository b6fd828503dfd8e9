"""Checkpoint directory: ``manifest.json`` plus ``tensors.bin``.

The blob is the concatenation of raw little-endian float32 tensors in
manifest order. Every tensor carries a SHA-256 of its float32 bytes.
Compute stays in float64; a save rounds to float32, and saving a freshly
loaded state reproduces the files byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .adapters import AdapterStack, LoraExpert, Router
from .autodiff import Tensor
from .base_model import BaseConfig, from_arrays
from .training import TrainState, site_name

FORMAT_VERSION = 1
DTYPE = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


def _expert_meta(e: LoraExpert | None):
    if e is None:
        return None
    return {"tag": e.tag, "role": e.role, "rank": e.rank, "alpha": e.alpha, "d_in": e.d_in, "d_out": e.d_out}


def _stack_meta(key, stack: AdapterStack) -> dict:
    return {
        "layer": key[0],
        "site": key[1],
        "variant": stack.variant,
        "d_in": stack.d_in,
        "d_out": stack.d_out,
        "residual_enabled": stack.residual_enabled,
        "leaky_slope": stack.leaky_slope,
        "route_universal": stack.route_universal,
        "stage2_keep_universal": stack.stage2_keep_universal,
        "active_expert_override": stack.active_expert_override,
        "universal": _expert_meta(stack.universal),
        "experts": [_expert_meta(e) for e in stack.domain_experts],
        "router": stack.router.n_experts if stack.router is not None else None,
    }


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {n: t.data for n, t in state.named_tensors().items()}
    for name in sorted(state.moments):
        m, v = state.moments[name]
        arrays[f"opt.m.{name}"] = m
        arrays[f"opt.v.{name}"] = v

    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blobs.append(raw)
        offset += len(raw)

    manifest = {
        "format_version": FORMAT_VERSION,
        "config": state.config,
        "base_config": state.base.config.to_dict(),
        "variant": state.variant,
        "stage": state.stage,
        "step": state.step,
        "seed": state.seed,
        "adam_t": state.adam_t,
        "trainable": list(state.trainable),
        "stacks": [_stack_meta(k, state.stacks[k]) for k in sorted(state.stacks)],
        "tensors": entries,
    }
    (path / "tensors.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint manifest in {path}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint format version {version} is not supported (this build reads version {FORMAT_VERSION})"
        )
    return manifest


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / "tensors.bin").read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"] or hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CorruptCheckpointError(f"tensor {entry['name']!r} failed its hash check in {path}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=DTYPE).astype(np.float64).reshape(entry["shape"])

    base = from_arrays(BaseConfig(**manifest["base_config"]),
                       {k: v for k, v in arrays.items() if k.startswith("base.")})

    stacks = {}
    for meta in manifest["stacks"]:
        key = (meta["layer"], meta["site"])
        prefix = f"adapters.{site_name(key)}."

        def expert(m, local):
            return LoraExpert(
                Tensor(arrays[prefix + local + ".A"]),
                Tensor(arrays[prefix + local + ".B"]),
                m["alpha"], m["role"], m["tag"],
            )

        stacks[key] = AdapterStack(
            variant=meta["variant"],
            d_in=meta["d_in"],
            d_out=meta["d_out"],
            universal=expert(meta["universal"], "universal") if meta["universal"] else None,
            domain_experts=[expert(m, f"experts.{m['tag']}") for m in meta["experts"]],
            router=Router(Tensor(arrays[prefix + "router.W"])) if meta["router"] is not None else None,
            residual_enabled=meta["residual_enabled"],
            leaky_slope=meta["leaky_slope"],
            active_expert_override=meta["active_expert_override"],
            route_universal=meta["route_universal"],
            stage2_keep_universal=meta["stage2_keep_universal"],
        )

    moments = {}
    for name in arrays:
        if name.startswith("opt.m."):
            key = name[len("opt.m."):]
            moments[key] = (arrays[name], arrays["opt.v." + key])

    trainable = tuple(manifest["trainable"])
    state = TrainState(
        base=base,
        stacks=stacks,
        variant=manifest["variant"],
        stage=manifest["stage"],
        step=manifest["step"],
        seed=manifest["seed"],
        moments=moments,
        adam_t=manifest["adam_t"],
        trainable=trainable,
        config=manifest["config"],
    )
    chosen = set(trainable)
    for name, t in state.adapter_tensors().items():
        t.requires_grad = name in chosen
    return state
