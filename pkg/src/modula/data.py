"""Deterministic synthetic tasks standing in for real domain corpora.

Sequence layout: ``[marker, x_1 .. x_k, marker]`` is the prompt and the
answer follows it. The marker closes the prompt as well as opening it, so the
token at every position identifies its task on its own; a shared separator
would leave the position that predicts the first answer token ambiguous to a
per-token router. Token 0 is padding and token 1 is reserved. Tasks draw
their operands from a half-open vocabulary slice ``[lo, hi)``.
Train and eval splits are disjoint by construction: an operand sequence
belongs to the eval split iff its CRC32 falls in the eval bucket.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD = 0
KINDS = ("copy", "reverse", "modular_add", "sort", "parity")
EVAL_BUCKETS = 8


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: str
    marker: int
    vocab: tuple[int, int]
    n_samples: int = 2048
    seed: int = 0
    length: int = 4
    modulus: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        if self.kind not in KINDS:
            raise DataError(f"unknown generator kind {self.kind!r}")
        if self.n_samples < 1:
            raise DataError("sample count must be >= 1")
        lo, hi = self.vocab
        if not 0 <= lo < hi:
            raise DataError(f"bad vocabulary slice {self.vocab}")
        if self.length < 1:
            raise DataError("length must be >= 1")
        if self.kind == "parity" and hi - lo < 2:
            raise DataError("parity needs at least two tokens in its slice")
        if self.kind == "modular_add" and self.base > hi - lo:
            raise DataError(f"modulus {self.base} exceeds slice width {hi - lo}")

    @property
    def base(self) -> int:
        return self.modulus if self.modulus is not None else self.vocab[1] - self.vocab[0]

    @property
    def answer_length(self) -> int:
        return 1 if self.kind in ("modular_add", "parity") else self.length

    @property
    def sequence_length(self) -> int:
        return self.length + 2 + self.answer_length

    def to_dict(self) -> dict:
        out = {
            "id": self.task_id, "kind": self.kind, "marker": self.marker, "vocab": list(self.vocab),
            "samples": self.n_samples, "seed": self.seed, "length": self.length,
        }
        if self.modulus is not None:
            out["modulus"] = self.modulus
        return out

    @classmethod
    def from_dict(cls, d: dict) -> TaskSpec:
        return cls(
            task_id=d["id"], kind=d["kind"], marker=int(d["marker"]), vocab=tuple(d["vocab"]),
            n_samples=int(d.get("samples", 2048)), seed=int(d.get("seed", 0)),
            length=int(d.get("length", 4)), modulus=d.get("modulus"),
        )


@dataclass(frozen=True)
class Example:
    input_tokens: tuple[int, ...]
    target_tokens: tuple[int, ...]
    task_id: str


def solve(kind: str, operands: Sequence[int], vocab: tuple[int, int], modulus: int | None = None) -> list[int]:
    """Answer tokens for ``operands`` under generator ``kind``."""
    lo, hi = vocab
    ops = list(operands)
    if kind == "copy":
        return ops
    if kind == "reverse":
        return ops[::-1]
    if kind == "sort":
        return sorted(ops)
    values = [t - lo for t in ops]
    if kind == "modular_add":
        m = modulus if modulus is not None else hi - lo
        return [lo + sum(values) % m]
    if kind == "parity":
        return [lo + sum(values) % 2]
    raise DataError(f"unknown generator kind {kind!r}")


def _bucket(operands: np.ndarray) -> int:
    return zlib.crc32(operands.astype(np.int64).tobytes()) % EVAL_BUCKETS


def _operand_hi(spec: TaskSpec) -> int:
    # addition operands are digits of the modulus
    if spec.kind == "modular_add":
        return spec.vocab[0] + spec.base
    return spec.vocab[1]


def generate(spec: TaskSpec, split: str = "train", max_seq: int | None = None) -> list[Example]:
    """``spec.n_samples`` examples of one split, a pure function of ``spec``.

    Draws are sequential, so generating ``n`` samples yields a prefix of
    generating ``m > n`` samples with the same seed.
    """
    if split not in ("train", "eval"):
        raise DataError(f"unknown split {split!r}")
    if max_seq is not None and spec.sequence_length > max_seq:
        raise DataError(f"task {spec.task_id!r} sequences have {spec.sequence_length} tokens, max_seq is {max_seq}")
    rng = np.random.default_rng([spec.seed, zlib.crc32(spec.task_id.encode())])
    lo, hi = spec.vocab[0], _operand_hi(spec)
    want_eval = split == "eval"
    out: list[Example] = []
    attempts = 0
    while len(out) < spec.n_samples:
        attempts += 1
        if attempts > 1000 * spec.n_samples:
            raise DataError(f"task {spec.task_id!r} has too few distinct inputs for the {split} split")
        operands = rng.integers(lo, hi, size=spec.length)
        if (_bucket(operands) == 0) != want_eval:
            continue
        ops = [int(t) for t in operands]
        prompt = (spec.marker, *ops, spec.marker)
        answer = tuple(solve(spec.kind, ops, spec.vocab, spec.modulus))
        out.append(Example(prompt, answer, spec.task_id))
    return out


def universal_mix(specs: Sequence[TaskSpec], seed: int, n: int) -> list[Example]:
    """``n`` examples drawn uniformly over tasks, then shuffled deterministically.

    Each draw picks a task; task ``j`` contributes the first ``count_j`` of its
    own train stream, so a single-task mix is that task's sample reordered.
    """
    if n < 1:
        raise DataError("mix size must be >= 1")
    if not specs:
        raise DataError("universal mix needs at least one task")
    rng = np.random.default_rng([seed, 0x6D6978])
    draws = rng.integers(0, len(specs), size=n)
    out: list[Example] = []
    for j, spec in enumerate(specs):
        count = int((draws == j).sum())
        if count:
            out.extend(generate(replace(spec, n_samples=count)))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def mixture(datasets: Sequence[Sequence[Example]], seed: int) -> list[Example]:
    """Uniform concatenation of datasets, shuffled deterministically."""
    pooled = [ex for ds in datasets for ex in ds]
    if not pooled:
        raise DataError("mixture of empty datasets")
    order = np.random.default_rng([seed, 0x6D7874]).permutation(len(pooled))
    return [pooled[i] for i in order]


@dataclass
class Batch:
    tokens: np.ndarray  # (B, T) model inputs
    targets: np.ndarray  # (B, T) next-token ids
    loss_mask: np.ndarray  # (B, T) 1.0 on answer positions
    task_ids: list[str]
    pad_token: int = PAD

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def target_mask(self) -> np.ndarray:
        """1.0 wherever the next-token target is a real token."""
        return (self.targets != self.pad_token).astype(float)

    def loss_weights(self, positions: str = "answer") -> np.ndarray:
        """Per-position weights making the loss the mean of per-example means.

        ``answer`` scores the answer tokens only; ``all`` scores every
        non-pad target, prompt included.
        """
        if positions == "answer":
            mask = self.loss_mask
        elif positions == "all":
            mask = self.target_mask
        else:
            raise DataError(f"unknown loss positions {positions!r}")
        counts = mask.sum(axis=1, keepdims=True)
        return mask / np.maximum(counts, 1.0) / self.size


def encode(examples: Sequence[Example], pad_token: int = PAD) -> Batch:
    seqs = [ex.input_tokens + ex.target_tokens for ex in examples]
    width = max(len(s) for s in seqs) - 1
    n = len(seqs)
    tokens = np.full((n, width), pad_token, dtype=np.int64)
    targets = np.full((n, width), pad_token, dtype=np.int64)
    mask = np.zeros((n, width))
    for i, (ex, seq) in enumerate(zip(examples, seqs)):
        tokens[i, : len(seq) - 1] = seq[:-1]
        targets[i, : len(seq) - 1] = seq[1:]
        start = len(ex.input_tokens) - 1
        mask[i, start : start + len(ex.target_tokens)] = 1.0
    return Batch(tokens, targets, mask, [ex.task_id for ex in examples], pad_token)


def batch(examples: Sequence[Example], batch_size: int, pad_token: int = PAD) -> list[Batch]:
    """Right-padded batches in order; the last partial batch is kept."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    if not examples:
        raise DataError("cannot batch an empty example list")
    return [encode(examples[i : i + batch_size], pad_token) for i in range(0, len(examples), batch_size)]


# ---------------------------------------------------------------------------
# line-delimited export

def export_examples(examples: Iterable[Example], path: str | Path) -> None:
    lines = [
        f"{ex.task_id}\t{' '.join(map(str, ex.input_tokens))}\t{' '.join(map(str, ex.target_tokens))}\n"
        for ex in examples
    ]
    Path(path).write_text("".join(lines), encoding="utf-8")


def import_examples(path: str | Path) -> list[Example]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
        task_id, inputs, targets = parts
        out.append(Example(tuple(int(t) for t in inputs.split()), tuple(int(t) for t in targets.split()), task_id))
    return out
