"""First-layer attention decompositions and the position/offset probes.

For one attention head and a query row ``x_i``, attending over
``[P; C]`` (prompt rows then content rows) splits exactly into

    out = sum_k A_ik p_k W_V  +  (1 - sum_k A_ik) * softmax_content(x_i) C W_V

where ``A_ik`` is the full-softmax weight on prompt row ``k``. With PT the
content is ``E``; with ADePT it is ``E + f(E)`` and the query is
``e_i + f(e_i)``; with DePT it is ``E + dE`` and the query ``e_i + de_i``,
and the content term further splits into a ``dE W_V`` and an ``E W_V`` part.
Each decomposition here is computed from explicit exponentials and checked
against the backbone's own attention code.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor
from .backbone import SCHEMA, BackboneModel, attend
from .errors import ConsistencyError, ContractError
from .peft import AdaptivePrompt, DecomposedPrompt, PeftMethod, adept_offset
from .tasks import Example, evaluate

IDENTITY_TOL = 1e-10


def _array(x) -> np.ndarray:
    return np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


@dataclass
class HeadWeights:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray

    @classmethod
    def from_backbone(cls, model: BackboneModel, layer: int = 0, head: int = 0) -> "HeadWeights":
        p = f"layer.{layer}.head.{head}"
        return cls(*(model.params[f"{p}.{w}"].data.copy() for w in ("W_Q", "W_K", "W_V")))

    @classmethod
    def random(cls, rng: np.random.Generator, d: int, d_head: int) -> "HeadWeights":
        return cls(*(rng.standard_normal((d, d_head)) / math.sqrt(d) for _ in range(3)))


@dataclass
class DecompositionReport:
    method: str
    prefix_weights: np.ndarray  # A_ik, one per prompt row
    prefix_mass: float
    scale: float
    bias_term: np.ndarray
    content_weights: np.ndarray  # softmax over content rows only
    content_term: np.ndarray
    reconstructed: np.ndarray
    direct: np.ndarray
    max_abs_gap: float
    content_offset_term: np.ndarray | None = None  # DePT: softmax . dE W_V
    content_embed_term: np.ndarray | None = None  # DePT: softmax . E W_V

    def to_dict(self) -> dict:
        out = {"schema": SCHEMA, "report": "decomposition"}
        out.update({k: _jsonable(v) for k, v in self.__dict__.items()})
        return out


def direct_attention(query: np.ndarray, keys_values: np.ndarray, head: HeadWeights,
                     scaled: bool) -> np.ndarray:
    """Head output through the backbone's attention routine."""
    out, _ = attend(Tensor(query[None, :]), Tensor(keys_values), Tensor(head.W_Q),
                    Tensor(head.W_K), Tensor(head.W_V), scaled)
    return out.data[0]


def _decompose(method: str, query, prompt, content, head: HeadWeights, scaled: bool,
               tol: float, content_parts: Sequence[np.ndarray] | None = None) -> DecompositionReport:
    query, prompt, content = _array(query), _array(prompt), _array(content)
    if prompt.ndim != 2 or prompt.shape[0] < 1:
        raise ContractError("decomposition needs a prompt with at least one row")
    if content.ndim != 2 or content.shape[0] < 1:
        raise ContractError("decomposition needs at least one content row")
    c = 1.0 / math.sqrt(head.W_Q.shape[1]) if scaled else 1.0
    q = query @ head.W_Q
    prompt_logits = c * ((prompt @ head.W_K) @ q)
    content_logits = c * ((content @ head.W_K) @ q)
    top = max(prompt_logits.max(), content_logits.max())
    prompt_exp = np.exp(prompt_logits - top)
    content_exp = np.exp(content_logits - top)
    denom = prompt_exp.sum() + content_exp.sum()

    prefix_weights = prompt_exp / denom
    prefix_mass = float(prefix_weights.sum())
    scale = 1.0 - prefix_mass
    bias = prefix_weights @ (prompt @ head.W_V)
    content_weights = content_exp / content_exp.sum()
    offset_term = embed_term = None
    if content_parts is None:
        content_term = content_weights @ (content @ head.W_V)
    else:
        offset_part, embed_part = (_array(x) for x in content_parts)
        offset_term = content_weights @ (offset_part @ head.W_V)
        embed_term = content_weights @ (embed_part @ head.W_V)
        content_term = offset_term + embed_term
    reconstructed = bias + scale * content_term

    direct = direct_attention(query, np.vstack([prompt, content]), head, scaled)
    gap = float(np.max(np.abs(reconstructed - direct)))
    if not gap <= tol:
        raise ConsistencyError(f"{method} decomposition differs from direct attention by {gap:.3e}")
    return DecompositionReport(method, prefix_weights, prefix_mass, scale, bias, content_weights,
                               content_term, reconstructed, direct, gap, offset_term, embed_term)


def pt_decompose(e_i, E, P, head: HeadWeights, scaled: bool = False,
                 tol: float = IDENTITY_TOL) -> DecompositionReport:
    """Split the output for query ``e_i`` over ``[P; E]`` into bias + scale * o_i."""
    return _decompose("pt", e_i, P, E, head, scaled, tol)


def adept_decompose(e_i, E, ap: AdaptivePrompt, P, head: HeadWeights, scaled: bool = False,
                    tol: float = IDENTITY_TOL) -> DecompositionReport:
    """As :func:`pt_decompose` with query ``e_i + f(e_i)`` and content ``E + f(E)``."""
    e_i, E = _array(e_i), _array(E)
    query = e_i + adept_offset(Tensor(e_i[None, :]), ap).data[0]
    content = E + adept_offset(Tensor(E), ap).data
    return _decompose("adept", query, P, content, head, scaled, tol)


def dept_decompose(e_i, i: int, E, dp: DecomposedPrompt, head: HeadWeights, scaled: bool = False,
                   P=None, tol: float = IDENTITY_TOL) -> DecompositionReport:
    """As :func:`pt_decompose` with positional offsets; ``i`` is the query's position.

    The content term is reported both whole and split into its ``dE W_V``
    and ``E W_V`` parts. ``P`` defaults to the method's own short prompt.
    """
    e_i, E = _array(e_i), _array(E)
    delta = dp.offsets(Tensor(E)).data
    if not 0 <= i < E.shape[0]:
        raise ContractError(f"dept_decompose: position {i} outside [0, {E.shape[0]})")
    prompt = dp.prompt.data if P is None else P
    return _decompose("dept", e_i + delta[i], prompt, E + delta, head, scaled, tol,
                      content_parts=(delta, E))


# ---------------------------------------------------------------------------
# position probes


def cyclic_shift(offsets, j: int):
    """Rotate rows left by ``j``: row ``i`` of the result is row ``(i + j) mod s``."""
    arr = offsets.data if isinstance(offsets, Tensor) else np.asarray(offsets)
    s = arr.shape[-2]
    if not 0 <= j <= s:
        raise ContractError(f"cyclic_shift: shift {j} outside [0, {s}]")
    rows = (np.arange(s) + j) % s
    shifted = arr[..., rows, :].copy()
    return Tensor(shifted) if isinstance(offsets, Tensor) else shifted


@dataclass
class ShiftProbeReport:
    method: str
    shifts: list[int]
    baseline_accuracy: float
    accuracy: list[float]
    changed: list[list[bool]]  # per shift, per example
    n_changed: list[int]
    displacement_norms: list[list[float]]  # per shift, per offset row: ||dE'[i] - dE[i]||_2

    def to_dict(self) -> dict:
        out = {"schema": SCHEMA, "report": "shift_probe"}
        out.update(self.__dict__)
        return out


def shift_probe(backbone: BackboneModel, method: PeftMethod, examples: Sequence[Example],
                shifts: Sequence[int]) -> ShiftProbeReport:
    """Accuracy with DePT's offset rows cyclically rotated by each ``j``.

    Methods without positional offsets are reported as unaffected: the shift
    is defined as the identity for them.
    """
    base_acc, base_preds = evaluate(backbone, method, examples)
    accs, changed, norms = [], [], []
    for j in shifts:
        if isinstance(method, DecomposedPrompt):
            delta = method.offset_matrix().data
            norms.append(np.linalg.norm(cyclic_shift(delta, j) - delta, axis=1).tolist())
            acc, preds = evaluate(backbone, method.with_shift(j), examples)
        else:
            norms.append([])
            acc, preds = base_acc, base_preds
        accs.append(acc)
        changed.append([p != q for p, q in zip(preds, base_preds)])
    return ShiftProbeReport(method.kind, list(shifts), base_acc, accs, changed,
                            [sum(c) for c in changed], norms)


@dataclass
class OffsetStatsReport:
    method: str
    n_tokens: int
    embedding_mean: float
    embedding_variance: float
    offset_mean: float
    offset_variance: float

    def to_dict(self) -> dict:
        out = {"schema": SCHEMA, "report": "offset_stats"}
        out.update(self.__dict__)
        return out


def abs_moments(values) -> tuple[float, float]:
    """Mean and population variance of ``|x|`` over all elements."""
    a = np.abs(np.asarray(values, dtype=np.float64)).reshape(-1)
    if a.size == 0:
        raise ContractError("abs_moments: no values")
    mean = a.mean()
    return float(mean), float(((a - mean) ** 2).mean())


def offset_stats(backbone: BackboneModel, method: PeftMethod,
                 examples: Sequence[Example]) -> OffsetStatsReport:
    """Magnitude statistics of content-token embeddings and of the method's offsets."""
    if not examples:
        raise ContractError("offset_stats: empty dataset")
    embeds, offsets = [], []
    for ex in examples:
        E = backbone.embed(list(ex.ids))
        embeds.append(E.data)
        offsets.append(method.offsets(E).data)
    e_mean, e_var = abs_moments(np.concatenate(embeds))
    o_mean, o_var = abs_moments(np.concatenate(offsets))
    n_tokens = int(sum(len(ex.ids) for ex in examples))
    return OffsetStatsReport(method.kind, n_tokens, e_mean, e_var, o_mean, o_var)


def prepend_probe(method: PeftMethod, E, neutral_prefix) -> float:
    """Largest elementwise change in the offsets of ``E``'s rows when a prefix is prepended.

    Exactly 0.0 for the token-wise ADePT network; for DePT it is the slide
    ``max_i ||dE[i + p] - dE[i]||_inf``.
    """
    E, prefix = _array(E), _array(neutral_prefix)
    if prefix.ndim != 2 or prefix.shape[0] < 1:
        raise ContractError("prepend_probe: prefix must have at least one row")
    alone = method.offsets(Tensor(E)).data
    joined = method.offsets(Tensor(np.vstack([prefix, E]))).data[prefix.shape[0]:]
    return float(np.max(np.abs(joined - alone)))
