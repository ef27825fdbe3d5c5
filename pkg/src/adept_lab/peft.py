"""Input-layer adaptation methods: soft prompt, decomposed prompt, adaptive prompt.

Each method maps content embeddings ``E`` to ``(prompt, content)``, which
the backbone concatenates as ``[prompt; content]``:

* PT    -- ``(P, E)``
* DePT  -- ``(P_s1, E + (A B)[:s'])``: one offset row per *position*
* ADePT -- ``(P_s2, E + f(E))`` with the token-wise network
  ``f(e) = ReLU(e W_down + b_1) W_up + b_2``
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import SCHEMA, BackboneModel, tensors_from_dict, tensors_to_dict
from .errors import BudgetError, ContractError, DimensionError, LengthError

METHOD_KINDS = ("pt", "dept", "adept")


@dataclass
class MethodConfig:
    kind: str = "adept"
    prompt_len: int = 4
    rank: int = 2  # DePT r_s
    bottleneck: int = 4  # ADePT r
    max_len: int | None = None  # DePT s; None -> backbone max_content_len

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ContractError(f"method.kind must be one of {METHOD_KINDS}, got {self.kind!r}")
        if self.prompt_len < 0:
            raise ContractError("method.prompt_len must be >= 0")
        if self.kind == "pt" and self.prompt_len < 1:
            raise ContractError("method.prompt_len must be >= 1 for pt")
        if self.rank < 1 or self.bottleneck < 1:
            raise ContractError("method.rank and method.bottleneck must be >= 1")


@dataclass
class BudgetSpec:
    budget: int
    dim: int
    prompt_len: int

    def __post_init__(self):
        if self.budget < self.prompt_len * self.dim:
            raise BudgetError(f"budget {self.budget} is below the prompt alone "
                              f"({self.prompt_len} x {self.dim})")


def _check_width(E: Tensor, d: int, who: str) -> None:
    if E.shape[-1] != d:
        raise DimensionError(f"{who}: embeddings have width {E.shape[-1]}, method expects {d}")


class PeftMethod:
    """Trainable state of one method; subclasses define ``apply``."""

    kind = ""

    def __init__(self, tensors: dict[str, Tensor]):
        self.params = tensors
        for name, t in tensors.items():
            t.name = name

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def dim(self) -> int:
        return self.params["P"].shape[1]

    @property
    def prompt(self) -> Tensor:
        return self.params["P"]

    def prompt_tensors(self) -> list[Tensor]:
        return [self.params["P"]]

    def network_tensors(self) -> list[Tensor]:
        return [t for n, t in self.params.items() if n != "P"]

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def offsets(self, E: Tensor) -> Tensor:
        raise NotImplementedError

    def apply(self, E: Tensor) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def copy(self) -> "PeftMethod":
        clone = type(self).__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {n: Tensor(t.data.copy(), t.requires_grad, n) for n, t in self.params.items()}
        return clone

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def to_dict(self) -> dict:
        return {"schema": SCHEMA, "method_kind": self.kind, "config": self.config_dict(),
                "tensors": tensors_to_dict(self.params)}

    def config_dict(self) -> dict:
        return {}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


class SoftPrompt(PeftMethod):
    kind = "pt"

    def __init__(self, P: Tensor):
        if P.ndim != 2 or P.shape[0] < 1:
            raise ContractError("soft prompt needs shape [l >= 1, d]")
        super().__init__({"P": P})

    def offsets(self, E: Tensor) -> Tensor:
        return Tensor(np.zeros(E.shape))

    def apply(self, E: Tensor) -> tuple[Tensor, Tensor]:
        return pt_apply(E, self)


class DecomposedPrompt(PeftMethod):
    """Short prompt plus position-indexed offsets ``A B`` (``s x d``, rank ``r_s``).

    ``shift`` rotates the offset rows (used by the cyclic-shift probe); it is
    evaluation-only state and is not serialized.
    """

    kind = "dept"

    def __init__(self, P: Tensor, A: Tensor, B: Tensor, shift: int = 0):
        s, r = A.shape
        if B.shape[0] != r or B.shape[1] != P.shape[1]:
            raise DimensionError(f"DePT factors A{A.shape} B{B.shape} P{P.shape} are inconsistent")
        if r < 1 or r > min(s, B.shape[1]):
            raise ContractError(f"DePT rank {r} must lie in [1, min(s, d)] = [1, {min(s, B.shape[1])}]")
        super().__init__({"P": P, "A": A, "B": B})
        self.shift = shift

    @property
    def max_len(self) -> int:
        return self.params["A"].shape[0]

    def offset_matrix(self) -> Tensor:
        """``A B``, rotated left by ``shift`` rows."""
        delta = ag.matmul(self.params["A"], self.params["B"])
        if self.shift % self.max_len:
            rows = (np.arange(self.max_len) + self.shift) % self.max_len
            delta = ag.row_select(delta, rows)
        return delta

    def offsets(self, E: Tensor) -> Tensor:
        n = E.shape[-2]
        if n > self.max_len:
            raise LengthError(f"DePT offsets cover {self.max_len} positions, input has {n}")
        return ag.slice_rows(self.offset_matrix(), 0, n)

    def apply(self, E: Tensor) -> tuple[Tensor, Tensor]:
        return dept_apply(E, self)

    def with_shift(self, j: int) -> "DecomposedPrompt":
        out = DecomposedPrompt(*(self.params[n] for n in ("P", "A", "B")), shift=j)
        return out

    def config_dict(self) -> dict:
        return {"max_len": self.max_len, "rank": self.params["A"].shape[1]}


class AdaptivePrompt(PeftMethod):
    kind = "adept"

    def __init__(self, P: Tensor, W_down: Tensor, b_1: Tensor, W_up: Tensor, b_2: Tensor):
        d, r = W_down.shape
        if (P.shape[1], b_1.shape, W_up.shape, b_2.shape) != (d, (r,), (r, d), (d,)):
            raise DimensionError("ADePT network shapes are inconsistent: "
                                 f"P{P.shape} W_down{W_down.shape} b_1{b_1.shape} "
                                 f"W_up{W_up.shape} b_2{b_2.shape}")
        if r < 1:
            raise ContractError("ADePT bottleneck must be >= 1")
        super().__init__({"P": P, "W_down": W_down, "b_1": b_1, "W_up": W_up, "b_2": b_2})

    @property
    def dim(self) -> int:
        return self.params["W_down"].shape[0]

    def offsets(self, E: Tensor) -> Tensor:
        return adept_offset(E, self)

    def apply(self, E: Tensor) -> tuple[Tensor, Tensor]:
        return adept_apply(E, self)

    def config_dict(self) -> dict:
        return {"bottleneck": self.params["W_down"].shape[1]}


# ---------------------------------------------------------------------------
# method application


def pt_apply(E: Tensor, sp: SoftPrompt) -> tuple[Tensor, Tensor]:
    _check_width(E, sp.dim, "pt_apply")
    return sp.params["P"], E


def dept_apply(E: Tensor, dp: DecomposedPrompt) -> tuple[Tensor, Tensor]:
    _check_width(E, dp.dim, "dept_apply")
    return dp.params["P"], ag.add(E, dp.offsets(E))


def adept_offset(E: Tensor, ap: AdaptivePrompt) -> Tensor:
    """Token-wise offsets ``ReLU(E W_down + b_1) W_up + b_2``.

    Row ``i`` of the result depends on row ``i`` of ``E`` only, bit for bit;
    the products use the row-exact kernel for that reason.
    """
    _check_width(E, ap.dim, "adept_offset")
    p = ap.params
    hidden = ag.relu(ag.add(ag.matmul(E, p["W_down"], exact_rows=True), p["b_1"]))
    return ag.add(ag.matmul(hidden, p["W_up"], exact_rows=True), p["b_2"])


def adept_apply(E: Tensor, ap: AdaptivePrompt) -> tuple[Tensor, Tensor]:
    return ap.params["P"], ag.add(E, adept_offset(E, ap))


# ---------------------------------------------------------------------------
# parameter accounting


def count_params(kind: str, dim: int, prompt_len: int, rank: int = 0, bottleneck: int = 0,
                 max_len: int = 0) -> int:
    """Trainable scalar count of a method from its hyperparameters."""
    base = prompt_len * dim
    if kind == "pt":
        return base
    if kind == "dept":
        return base + max_len * rank + rank * dim
    if kind == "adept":
        return base + 2 * bottleneck * dim + bottleneck + dim
    raise ContractError(f"unknown method kind {kind!r}")


def param_count(method: PeftMethod) -> int:
    return method.param_count()


def solve_bottleneck(spec: BudgetSpec) -> int:
    """Largest ``r`` with ``l d + 2 r d + r + d <= budget``."""
    room = spec.budget - spec.prompt_len * spec.dim - spec.dim
    if room < 0:
        raise BudgetError(f"budget {spec.budget} leaves no room for the ADePT biases "
                          f"(needs at least {spec.prompt_len * spec.dim + spec.dim})")
    r = room // (2 * spec.dim + 1)
    if r < 1:
        raise BudgetError(f"budget {spec.budget} admits no bottleneck r >= 1")
    return r


def solve_rank(spec: BudgetSpec, max_len: int) -> int:
    """Largest DePT rank ``r_s`` with ``l d + r_s (s + d) <= budget``."""
    r = (spec.budget - spec.prompt_len * spec.dim) // (max_len + spec.dim)
    if r < 1:
        raise BudgetError(f"budget {spec.budget} admits no DePT rank >= 1")
    return r


# ---------------------------------------------------------------------------
# construction and checkpoints


def init_method(config: MethodConfig, backbone: BackboneModel, seed: int = 0) -> PeftMethod:
    """Fresh trainable method for ``backbone``.

    Prompt rows are copies of randomly chosen embedding-table rows; the
    low-rank factors and network weights are uniform(+-1/sqrt(d)); biases
    start at zero.
    """
    rng = np.random.default_rng(seed)
    table = backbone.params["embedding"].data
    V, d = table.shape
    rows = rng.choice(V, size=config.prompt_len, replace=config.prompt_len > V)
    P = Tensor(table[rows].copy(), requires_grad=True)
    bound = 1.0 / math.sqrt(d)
    u = lambda *shape: Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    if config.kind == "pt":
        return SoftPrompt(P)
    if config.kind == "dept":
        s = config.max_len or backbone.config.max_content_len
        return DecomposedPrompt(P, u(s, config.rank), u(config.rank, d))
    W_down = u(d, config.bottleneck)
    W_up = u(config.bottleneck, d)
    return AdaptivePrompt(P, W_down, Tensor(np.zeros(config.bottleneck), requires_grad=True),
                          W_up, Tensor(np.zeros(d), requires_grad=True))


def method_from_dict(doc: dict) -> PeftMethod:
    kind = doc.get("method_kind")
    t = tensors_from_dict(doc["tensors"], requires_grad=True)
    try:
        if kind == "pt":
            return SoftPrompt(t["P"])
        if kind == "dept":
            return DecomposedPrompt(t["P"], t["A"], t["B"])
        if kind == "adept":
            return AdaptivePrompt(t["P"], t["W_down"], t["b_1"], t["W_up"], t["b_2"])
    except KeyError as exc:
        raise ContractError(f"method checkpoint is missing tensor {exc}") from None
    raise ContractError(f"unknown method_kind {kind!r}")


def load_method(path: str | Path) -> PeftMethod:
    return method_from_dict(json.loads(Path(path).read_text()))
