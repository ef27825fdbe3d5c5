"""Toy pre-norm transformer classifier used as the frozen backbone."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, LengthError, TrainingError

SCHEMA = "adept-lab/v1"
LN_EPS = 1e-5
# additive logit for masked keys; exp() of it underflows to exactly 0
MASKED_LOGIT = -1e9
POSITIONAL_MODES = ("none", "learned-absolute")


@dataclass
class BackboneConfig:
    vocab_size: int = 64
    embed_dim: int = 16
    heads: int = 2
    head_dim: int = 8
    layers: int = 2
    classes: int = 2
    max_content_len: int = 32
    max_prompt_len: int = 16
    ffn_dim: int = 32
    positional_mode: str = "none"

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, int) and value < 1:
                raise ContractError(f"backbone.{f.name} must be >= 1, got {value}")
        if self.embed_dim != self.heads * self.head_dim:
            raise ContractError(
                f"backbone.embed_dim ({self.embed_dim}) must equal heads * head_dim "
                f"({self.heads} * {self.head_dim})")
        if self.positional_mode not in POSITIONAL_MODES:
            raise ContractError(f"backbone.positional_mode must be one of {POSITIONAL_MODES}")

    @property
    def max_total_len(self) -> int:
        return self.max_prompt_len + self.max_content_len


def attend(queries: Tensor, keys_values: Tensor, W_Q: Tensor, W_K: Tensor, W_V: Tensor,
           scaled: bool = True, key_bias: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Single-head attention; returns ``(output, weights)``."""
    q = ag.matmul(queries, W_Q)
    k = ag.matmul(keys_values, W_K)
    v = ag.matmul(keys_values, W_V)
    logits = ag.matmul(q, ag.transpose(k))
    if scaled:
        logits = ag.scale(logits, 1.0 / math.sqrt(W_Q.shape[-1]))
    if key_bias is not None:
        logits = ag.add(logits, Tensor(key_bias))
    weights = ag.row_softmax(logits)
    return ag.matmul(weights, v), weights


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences; returns ``(ids[b, s], mask[b, s])``."""
    if not sequences:
        raise LengthError("pad_batch: no sequences")
    width = max(len(seq) for seq in sequences)
    ids = np.full((len(sequences), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for i, seq in enumerate(sequences):
        if len(seq) == 0:
            raise LengthError("pad_batch: empty sequence")
        ids[i, : len(seq)] = seq
        mask[i, : len(seq)] = True
    return ids, mask


class BackboneModel:
    """Parameters of the frozen model, addressed by stable dotted names.

    The embedding lookup deliberately adds no positional signal: any prompt
    is concatenated first and positions (if enabled) are added inside
    :meth:`forward` over the full prompt + content length.
    """

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: BackboneConfig, seed: int = 0) -> "BackboneModel":
        rng = np.random.default_rng(seed)
        c = config
        d, dh = c.embed_dim, c.head_dim
        params: dict[str, Tensor] = {}

        def new(name, arr):
            params[name] = Tensor(arr, requires_grad=True, name=name)

        new("embedding", rng.standard_normal((c.vocab_size, d)))
        if c.positional_mode == "learned-absolute":
            new("position", 0.1 * rng.standard_normal((c.max_total_len, d)))
        for i in range(c.layers):
            p = f"layer.{i}"
            new(f"{p}.ln1.gain", np.ones(d))
            new(f"{p}.ln1.bias", np.zeros(d))
            for h in range(c.heads):
                for w in ("W_Q", "W_K", "W_V"):
                    new(f"{p}.head.{h}.{w}", rng.standard_normal((d, dh)) / math.sqrt(d))
            new(f"{p}.W_O", rng.standard_normal((d, d)) / math.sqrt(d))
            new(f"{p}.ln2.gain", np.ones(d))
            new(f"{p}.ln2.bias", np.zeros(d))
            new(f"{p}.ffn.W_in", rng.standard_normal((d, c.ffn_dim)) / math.sqrt(d))
            new(f"{p}.ffn.b_in", np.zeros(c.ffn_dim))
            new(f"{p}.ffn.W_out", rng.standard_normal((c.ffn_dim, d)) / math.sqrt(c.ffn_dim))
            new(f"{p}.ffn.b_out", np.zeros(d))
        new("ln_f.gain", np.ones(d))
        new("ln_f.bias", np.zeros(d))
        new("W_cls", rng.standard_normal((d, c.classes)) / math.sqrt(d))
        return cls(config, params)

    # -- parameter management -------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def tensors(self) -> Iterable[Tensor]:
        return self.params.values()

    def freeze(self) -> "BackboneModel":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def unfreeze(self) -> "BackboneModel":
        for t in self.params.values():
            t.requires_grad = True
        return self

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    def copy(self) -> "BackboneModel":
        params = {n: Tensor(t.data.copy(), t.requires_grad, n) for n, t in self.params.items()}
        return BackboneModel(self.config, params)

    # -- computation ----------------------------------------------------------

    def embed(self, token_ids) -> Tensor:
        """Look up embedding rows for ``token_ids`` of shape ``[s]`` or ``[b, s]``."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size == 0 or ids.shape[-1] == 0:
            raise LengthError("embed: empty id sequence")
        if ids.shape[-1] > self.config.max_content_len:
            raise LengthError(
                f"embed: length {ids.shape[-1]} exceeds max_content_len {self.config.max_content_len}")
        return ag.row_select(self.params["embedding"], ids)

    def attention_head(self, queries: Tensor, keys_values: Tensor, head: int = 0, layer: int = 0,
                       scaled: bool = True, key_bias: np.ndarray | None = None) -> Tensor:
        """Softmax((Q W_Q)(K W_K)^T [/ sqrt(d_H)]) (K W_V) for one head.

        With ``scaled=False`` this is the unscaled form used in the analysis
        module. ``key_bias`` is an additive logit mask broadcast over queries.
        """
        return self.attention(queries, keys_values, head, layer, scaled, key_bias)[0]

    def attention(self, queries: Tensor, keys_values: Tensor, head: int = 0, layer: int = 0,
                  scaled: bool = True, key_bias: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Like :meth:`attention_head` but also returns the attention weights."""
        p = f"layer.{layer}.head.{head}"
        return attend(queries, keys_values, self.params[f"{p}.W_Q"], self.params[f"{p}.W_K"],
                      self.params[f"{p}.W_V"], scaled, key_bias)

    def forward(self, inputs: Tensor, content_mask=None, prompt_len: int = 0) -> Tensor:
        """Class logits for ``inputs = [prompt; content]`` of shape ``[t, d]`` or ``[b, t, d]``.

        ``content_mask`` marks real (True) vs padding (False) content
        positions and has shape ``[s]`` / ``[b, s]`` with ``s = t - prompt_len``.
        Attention sees every prompt position and every real content position;
        pooling averages real content positions only.
        """
        c = self.config
        single = inputs.ndim == 2
        x = ag.reshape(inputs, (1,) + inputs.shape) if single else inputs
        b, t, d = x.shape
        if t > c.max_total_len:
            raise LengthError(f"forward: total length {t} exceeds {c.max_total_len}")
        s = t - prompt_len
        if s < 1:
            raise LengthError("forward: no content positions")
        if content_mask is None:
            mask = np.ones((b, s), dtype=bool)
        else:
            mask = np.asarray(content_mask, dtype=bool).reshape(b, s)
        if not mask.any(axis=1).all():
            raise LengthError("forward: every example needs at least one content token")

        valid = np.concatenate([np.ones((b, prompt_len), dtype=bool), mask], axis=1)
        key_bias = np.where(valid, 0.0, MASKED_LOGIT)[:, None, :]

        if c.positional_mode == "learned-absolute":
            x = ag.add(x, ag.slice_rows(self.params["position"], 0, t))
        for i in range(c.layers):
            p = f"layer.{i}"
            h = ag.layer_norm(x, self.params[f"{p}.ln1.gain"], self.params[f"{p}.ln1.bias"], LN_EPS)
            heads = [self.attention_head(h, h, j, i, True, key_bias) for j in range(c.heads)]
            x = ag.add(x, ag.matmul(ag.concat(heads, axis=-1), self.params[f"{p}.W_O"]))
            h = ag.layer_norm(x, self.params[f"{p}.ln2.gain"], self.params[f"{p}.ln2.bias"], LN_EPS)
            h = ag.relu(ag.add(ag.matmul(h, self.params[f"{p}.ffn.W_in"]), self.params[f"{p}.ffn.b_in"]))
            x = ag.add(x, ag.add(ag.matmul(h, self.params[f"{p}.ffn.W_out"]), self.params[f"{p}.ffn.b_out"]))
        x = ag.layer_norm(x, self.params["ln_f.gain"], self.params["ln_f.bias"], LN_EPS)

        pool = np.zeros((b, 1, t))
        pool[:, 0, prompt_len:] = mask / mask.sum(axis=1, keepdims=True)
        pooled = ag.reshape(ag.matmul(Tensor(pool), x), (b, d))
        return ag.matmul(pooled, self.params["W_cls"])

    def classify(self, prompt: Tensor | None, content: Tensor, content_mask) -> Tensor:
        """Prepend ``prompt`` (``[l, d]`` or ``[b, l, d]``) to batched content and run forward."""
        if prompt is None or prompt.shape[-2] == 0:
            return self.forward(content, content_mask, 0)
        if content.ndim == 3 and prompt.ndim == 2:
            prompt = ag.broadcast_to(prompt, (content.shape[0],) + prompt.shape)
        return self.forward(ag.concat_rows(prompt, content), content_mask, prompt.shape[-2])

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "config": asdict(self.config),
            "tensors": tensors_to_dict(self.params),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BackboneModel":
        config = BackboneConfig(**doc["config"])
        params = tensors_from_dict(doc["tensors"])
        model = cls(config, params)
        expected = set(cls.init(config, 0).params)
        if set(params) != expected:
            raise ContractError(f"checkpoint tensors do not match config: {sorted(set(params) ^ expected)}")
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "BackboneModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def tensors_to_dict(params: dict[str, Tensor]) -> dict:
    # json writes floats with repr(), the shortest string that round-trips
    return {name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in params.items()}


def tensors_from_dict(doc: dict, requires_grad: bool = False) -> dict[str, Tensor]:
    out = {}
    for name, entry in doc.items():
        values = np.array(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape)):
            raise ContractError(f"tensor {name}: {values.size} values for shape {shape}")
        out[name] = Tensor(values.reshape(shape), requires_grad=requires_grad, name=name)
    return out


def pretrain(model: BackboneModel, suite, steps: int, lr: float = 0.1, batch_size: int = 32,
             seed: int = 0, history: list | None = None) -> BackboneModel:
    """Full-parameter plain SGD on a multi-task suite.

    ``suite`` is a sequence of ``(marker_id, examples)`` pairs; each example
    has ``ids`` and ``label``. The marker's embedding row is fed as a
    one-row prompt so the model learns to read the task from the prompt slot.
    Per-step losses are appended to ``history`` when given.
    """
    if steps <= 0:
        return model
    pool = [(marker, ex.ids, ex.label) for marker, examples in suite for ex in examples]
    if not pool:
        raise ContractError("pretrain: empty task suite")
    model.unfreeze()
    rng = np.random.default_rng(seed)
    table = model.params["embedding"]
    for step in range(steps):
        picks = rng.integers(0, len(pool), size=batch_size)
        markers = np.array([[pool[i][0]] for i in picks])
        ids, mask = pad_batch([pool[i][1] for i in picks])
        labels = [pool[i][2] for i in picks]
        logits = model.classify(ag.row_select(table, markers), model.embed(ids), mask)
        loss = ag.cross_entropy(logits, labels)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError("pretraining loss diverged", step)
        if history is not None:
            history.append(value)
        for t in model.tensors():
            t.grad = None
        ag.backward(loss)
        for t in model.tensors():
            if t.grad is not None:
                t.data -= lr * t.grad
    for t in model.tensors():
        t.grad = None
    return model
