"""Configuration sections and the pretrain -> freeze -> adapt pipeline."""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .autograd import Tensor
from .backbone import BackboneConfig, BackboneModel, pretrain
from .errors import ContractError
from .peft import BudgetSpec, MethodConfig, PeftMethod, SoftPrompt, count_params, init_method, \
    solve_bottleneck, solve_rank
from .tasks import FIRST_MARKER_ID, Dataset, RunConfig, TaskSpec, adapt, evaluate, generate


@dataclass
class TaskConfig:
    """Source suite (each task announced by its own marker token) and the held-out target."""

    target_kind: str = "keyed-presence"
    target_key: int = 20
    target_threshold: int = 1
    source_kinds: list[str] = field(
        default_factory=lambda: ["keyed-presence"] * 4 + ["keyed-count"] * 2)
    source_keys: list[int] = field(default_factory=lambda: [8, 9, 10, 11, 12, 13])
    source_threshold: int = 2
    min_len: int = 6
    max_len: int = 16
    n_source: int = 600
    n_target: int = 1000
    seed: int = 0

    def __post_init__(self):
        if len(self.source_kinds) != len(self.source_keys):
            raise ContractError("task.source_kinds and task.source_keys differ in length")


@dataclass
class PretrainConfig:
    steps: int = 3000
    lr: float = 0.1
    batch_size: int = 32

    def __post_init__(self):
        if self.steps < 0 or self.lr < 0 or self.batch_size < 1:
            raise ContractError("pretrain needs steps >= 0, lr >= 0, batch_size >= 1")


@dataclass
class AnalysisConfig:
    shifts: list[int] | None = None  # None -> [0, 1, s/4, s/2]
    prepend: int = 2
    split: str = "test"
    stats_split: str = "train"  # offset magnitude statistics are taken over training inputs
    layer: int = 0
    head: int = 0
    scaled: bool = False
    example: int = 0  # index into the split for decompositions
    query: int = 0  # position of the query token


SECTIONS = {
    "backbone": BackboneConfig,
    "task": TaskConfig,
    "pretrain": PretrainConfig,
    "method": MethodConfig,
    "run": RunConfig,
    "analysis": AnalysisConfig,
}


@dataclass
class LabConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    run: RunConfig = field(default_factory=RunConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ConfigError(ContractError):
    """Bad configuration; ``key`` is the offending dotted name."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _check_type(key: str, value, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        for arm in args:
            if arm is type(None):
                if value is None:
                    return None
                continue
            try:
                return _check_type(key, value, arm)
            except ConfigError:
                pass
        raise ConfigError(key, f"expected {hint}, got {value!r}")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return [_check_type(key, v, args[0]) for v in value]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    raise ConfigError(key, f"unsupported field type {hint}")


def build_config(doc: dict | None = None, overrides: dict[str, object] | None = None) -> LabConfig:
    """Assemble a :class:`LabConfig` from a JSON document and dotted overrides.

    Precedence is override > document > built-in default. Unknown sections or
    keys and ill-typed values raise :class:`ConfigError` naming the dotted key.
    """
    merged: dict[str, dict] = {name: {} for name in SECTIONS}
    for section, body in (doc or {}).items():
        if section == "schema":
            continue
        if section not in SECTIONS:
            raise ConfigError(section, "unknown config section")
        if not isinstance(body, dict):
            raise ConfigError(section, "section must be an object")
        merged[section].update(body)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(dotted, "unknown config key")
        merged[section][key] = value

    sections = {}
    for name, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls)}
        values = {}
        for key, value in merged[name].items():
            if key not in names:
                raise ConfigError(f"{name}.{key}", "unknown config key")
            values[key] = _check_type(f"{name}.{key}", value, hints[key])
        try:
            sections[name] = cls(**values)
        except ContractError as exc:
            raise ConfigError(name, str(exc)) from None
    return LabConfig(**sections)


def field_type(dotted: str):
    section, _, key = dotted.partition(".")
    cls = SECTIONS.get(section)
    if cls is None:
        raise ConfigError(dotted, "unknown config key")
    hints = typing.get_type_hints(cls)
    if key not in hints:
        raise ConfigError(dotted, "unknown config key")
    return hints[key]


def load_config(path: str | Path | None, overrides: dict[str, object] | None = None) -> LabConfig:
    doc = json.loads(Path(path).read_text()) if path else {}
    return build_config(doc, overrides)


# ---------------------------------------------------------------------------
# seeds: one run seed fans out to independent streams


def backbone_seed(cfg: LabConfig) -> int:
    return cfg.run.seed


def method_seed(cfg: LabConfig) -> int:
    return cfg.run.seed + 1


def pretrain_seed(cfg: LabConfig) -> int:
    return cfg.run.seed + 2


# ---------------------------------------------------------------------------
# datasets


def source_specs(cfg: LabConfig) -> list[TaskSpec]:
    t, b = cfg.task, cfg.backbone
    content_start = FIRST_MARKER_ID + len(t.source_keys)
    specs = []
    for i, (kind, key) in enumerate(zip(t.source_kinds, t.source_keys)):
        specs.append(TaskSpec(kind=kind, key=key, threshold=t.source_threshold if kind == "keyed-count" else 1,
                              min_len=t.min_len, max_len=t.max_len, vocab_size=b.vocab_size,
                              content_start=content_start, seed=t.seed + 1000 + i,
                              marker=FIRST_MARKER_ID + i))
    return specs


def target_spec(cfg: LabConfig) -> TaskSpec:
    t, b = cfg.task, cfg.backbone
    return TaskSpec(kind=t.target_kind, key=t.target_key, threshold=t.target_threshold,
                    min_len=t.min_len, max_len=t.max_len, vocab_size=b.vocab_size,
                    content_start=FIRST_MARKER_ID + len(t.source_keys), seed=t.seed)


def source_suite(cfg: LabConfig) -> list[tuple[TaskSpec, Dataset]]:
    return [(spec, generate(spec, cfg.task.n_source)) for spec in source_specs(cfg)]


def target_dataset(cfg: LabConfig) -> Dataset:
    return generate(target_spec(cfg), cfg.task.n_target)


# ---------------------------------------------------------------------------
# stages


def run_pretrain(cfg: LabConfig, history: list | None = None) -> BackboneModel:
    """Initialise, pretrain on the source suite, and freeze."""
    model = BackboneModel.init(cfg.backbone, backbone_seed(cfg))
    suite = [(spec.marker, data.train) for spec, data in source_suite(cfg)]
    pretrain(model, suite, cfg.pretrain.steps, cfg.pretrain.lr, cfg.pretrain.batch_size,
             pretrain_seed(cfg), history)
    return model.freeze()


def marker_prompt(backbone: BackboneModel, marker: int) -> SoftPrompt:
    table = backbone.params["embedding"].data
    return SoftPrompt(Tensor(table[[marker]].copy()))


def source_accuracies(backbone: BackboneModel, cfg: LabConfig, split: str = "test") -> dict[int, float]:
    """Accuracy of the backbone on each source task, keyed by task key."""
    out = {}
    for spec, data in source_suite(cfg):
        acc, _ = evaluate(backbone, marker_prompt(backbone, spec.marker), data.split(split))
        out[spec.key] = acc
    return out


def new_method(cfg: LabConfig, backbone: BackboneModel) -> PeftMethod:
    return init_method(cfg.method, backbone, method_seed(cfg))


def run_adapt(cfg: LabConfig, backbone: BackboneModel, dataset: Dataset | None = None):
    """Fresh method adapted on the target task; returns ``(method, history)``."""
    data = dataset if dataset is not None else target_dataset(cfg)
    return adapt(backbone, new_method(cfg, backbone), data, cfg.run)


def default_shifts(max_len: int) -> list[int]:
    return [0, 1, max_len // 4, max_len // 2]


def budget_report(budget: int, dim: int, prompt_len: int, dept_max_len: int = 256,
                  pt_prompt_len: int = 100) -> dict:
    """Bottleneck/rank that fit ``budget`` and the resulting parameter counts."""
    spec = BudgetSpec(budget=budget, dim=dim, prompt_len=prompt_len)
    r = solve_bottleneck(spec)
    r_s = solve_rank(spec, dept_max_len)
    return {
        "r": r,
        "adept_params": count_params("adept", dim, prompt_len, bottleneck=r),
        "dept_rank": r_s,
        "dept_params": count_params("dept", dim, prompt_len, rank=r_s, max_len=dept_max_len),
        "pt_params_at_100": count_params("pt", dim, pt_prompt_len),
        "budget": budget,
        "dim": dim,
        "prompt_len": prompt_len,
    }
