"""Synthetic keyed classification tasks and the adaptation harness."""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .backbone import BackboneModel, pad_batch
from .errors import ContractError, GenerationError, TrainingError

PAD_ID = 0
NEUTRAL_ID = 1  # never emitted by a generator; prepending it is label-irrelevant
FIRST_MARKER_ID = 2
TASK_KINDS = ("keyed-count", "keyed-presence")


class Example(NamedTuple):
    ids: tuple[int, ...]
    label: int


@dataclass
class TaskSpec:
    kind: str = "keyed-presence"
    key: int = 20
    threshold: int = 1
    min_len: int = 6
    max_len: int = 16
    vocab_size: int = 64
    content_start: int = 8
    seed: int = 0
    marker: int | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ContractError(f"task.kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if not self.content_start <= self.key < self.vocab_size:
            raise ContractError(f"task.key {self.key} outside content range "
                                f"[{self.content_start}, {self.vocab_size})")
        if self.content_start <= NEUTRAL_ID:
            raise ContractError("task.content_start must leave room for the pad and neutral ids")
        if not 1 <= self.min_len <= self.max_len:
            raise ContractError("task lengths need 1 <= min_len <= max_len")
        if self.threshold < 1 or self.threshold > self.max_len:
            raise ContractError("task.threshold must lie in [1, max_len]")

    def label_of(self, ids: Sequence[int]) -> int:
        count = sum(1 for t in ids if t == self.key)
        need = 1 if self.kind == "keyed-presence" else self.threshold
        return int(count >= need)


@dataclass
class Dataset:
    train: list[Example] = field(default_factory=list)
    valid: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)

    def split(self, name: str) -> list[Example]:
        if name not in ("train", "valid", "test"):
            raise ContractError(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def sizes(self) -> dict[str, int]:
        return {"train": len(self.train), "valid": len(self.valid), "test": len(self.test)}


def _propose(spec: TaskSpec, rng: np.random.Generator) -> tuple[int, ...]:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    others = [t for t in range(spec.content_start, spec.vocab_size) if t != spec.key]
    ids = rng.choice(others, size=length)
    need = 1 if spec.kind == "keyed-presence" else spec.threshold
    hits = int(rng.integers(0, min(length, need + 1) + 1))
    ids[rng.choice(length, size=hits, replace=False)] = spec.key
    return tuple(int(t) for t in ids)


def generate(spec: TaskSpec, n: int, fractions: Sequence[float] = (0.6, 0.2, 0.2)) -> Dataset:
    """Deterministic balanced dataset of ``n`` examples split train/valid/test.

    Candidates come from a proposal that plants 0..threshold+1 copies of the
    key; each is labelled by the task rule and accepted only if it carries
    the label currently owed, which keeps every split exactly alternating.
    """
    if n < 10:
        raise ContractError("generate: n must be >= 10")
    rng = np.random.default_rng(spec.seed)
    sizes = [int(round(n * f)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    splits: list[list[Example]] = []
    attempts, budget = 0, 100 * n
    for size in sizes:
        rows: list[Example] = []
        while len(rows) < size:
            want = len(rows) % 2
            attempts += 1
            if attempts > budget:
                raise GenerationError(f"could not balance labels within {budget} attempts")
            ids = _propose(spec, rng)
            if spec.label_of(ids) == want:
                rows.append(Example(ids, want))
        splits.append(rows)
    return Dataset(*splits)


def save_jsonl(examples: Sequence[Example], path: str | Path) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps({"ids": list(ex.ids), "label": ex.label}) + "\n")


def load_jsonl(path: str | Path) -> list[Example]:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                rows.append(Example(tuple(int(t) for t in doc["ids"]), int(doc["label"])))
    return rows


# ---------------------------------------------------------------------------
# adaptation harness


@dataclass
class RunConfig:
    prompt_lr: float = 0.5
    network_lr: float = 0.01  # offset network (ADePT) or low-rank factors (DePT)
    steps: int = 2000
    batch_size: int = 16
    eval_interval: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.prompt_lr < 0 or self.network_lr < 0:
            raise ContractError("run learning rates must be non-negative")
        if self.steps < 0:
            raise ContractError("run.steps must be >= 0")
        if self.batch_size < 1 or self.eval_interval < 1:
            raise ContractError("run.batch_size and run.eval_interval must be >= 1")


def _eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("ADEPT_LAB_THREADS", "1")))
    except ValueError:
        return 1


def predict_logits(backbone: BackboneModel, method, examples: Sequence[Example],
                   prepend_neutral: int = 0) -> np.ndarray:
    """Logits for a list of examples run as one padded batch."""
    seqs = [(NEUTRAL_ID,) * prepend_neutral + tuple(ex.ids) for ex in examples]
    ids, mask = pad_batch(seqs, PAD_ID)
    E = backbone.embed(ids)
    if method is None:
        return backbone.classify(None, E, mask).data
    prompt, content = method.apply(E)
    return backbone.classify(prompt, content, mask).data


def evaluate(backbone: BackboneModel, method, examples: Sequence[Example],
             prepend_neutral: int = 0, chunk: int = 64) -> tuple[float, list[int]]:
    """Accuracy and per-example predictions on ``examples``.

    Examples are scored in fixed chunks, so results do not depend on
    ``ADEPT_LAB_THREADS`` (which only sets how many chunks run at once).
    """
    if not examples:
        raise ContractError("evaluate: empty split")
    if prepend_neutral < 0:
        raise ContractError("evaluate: prepend_neutral must be >= 0")
    parts = [examples[i:i + chunk] for i in range(0, len(examples), chunk)]
    run = lambda part: predict_logits(backbone, method, part, prepend_neutral).argmax(axis=1)
    threads = min(_eval_threads(), len(parts))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            outs = list(pool.map(run, parts))
    else:
        outs = [run(part) for part in parts]
    preds = [int(p) for out in outs for p in out]
    correct = sum(int(p == ex.label) for p, ex in zip(preds, examples))
    return correct / len(examples), preds


def adapt(backbone: BackboneModel, method, dataset: Dataset, config: RunConfig):
    """Train ``method`` on ``dataset.train`` against the frozen ``backbone``.

    Plain minibatch SGD with two learning rates: ``prompt_lr`` for the soft
    prompt and ``network_lr`` for everything else the method owns. Validation
    accuracy is recorded every ``eval_interval`` steps and at the last step;
    the returned method is the best-validation snapshot (earliest on ties).
    Returns ``(method, history)``.
    """
    if not backbone.frozen:
        raise ContractError("adapt: backbone must be frozen")
    if method.dim != backbone.config.embed_dim:
        raise ContractError(f"adapt: method width {method.dim} != backbone width "
                            f"{backbone.config.embed_dim}")
    history: list[dict] = []
    if config.steps == 0:
        return method, history
    train = dataset.train
    if not train or not dataset.valid:
        raise ContractError("adapt: dataset needs non-empty train and valid splits")
    rng = np.random.default_rng(config.seed)
    groups = [(t, config.prompt_lr) for t in method.prompt_tensors()]
    groups += [(t, config.network_lr) for t in method.network_tensors()]
    method.set_trainable(True)
    best, best_acc = method.copy(), -1.0
    window: list[float] = []
    for step in range(1, config.steps + 1):
        batch = [train[i] for i in rng.integers(0, len(train), size=config.batch_size)]
        ids, mask = pad_batch([ex.ids for ex in batch], PAD_ID)
        prompt, content = method.apply(backbone.embed(ids))
        loss = ag.cross_entropy(backbone.classify(prompt, content, mask), [ex.label for ex in batch])
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError("adaptation loss is not finite", step)
        window.append(value)
        for t, _ in groups:
            t.grad = None
        ag.backward(loss)
        for t, lr in groups:
            if t.grad is not None and lr:
                t.data -= lr * t.grad
        if step % config.eval_interval == 0 or step == config.steps:
            acc, _ = evaluate(backbone, method, dataset.valid)
            history.append({"step": step, "train_loss": float(np.mean(window)),
                            "valid_accuracy": acc})
            window = []
            if acc > best_acc:
                best, best_acc = method.copy(), acc
    for t, _ in groups:
        t.grad = None
    return best, history
