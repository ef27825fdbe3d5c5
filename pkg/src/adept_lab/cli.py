"""Command-line entry point: ``adept-lab {pretrain,adapt,eval,analyze,budget}``.

Every command accepts ``--config FILE`` (JSON with sections backbone, task,
pretrain, method, run, analysis) and any number of ``--<section>.<key> VALUE``
overrides. Precedence: flag > config file > built-in default. ``--seed``
overrides ``run.seed``.

Exit codes: 0 success, 1 runtime failure (diverged loss, identity check,
length overflow), 2 configuration or validation error.
"""
from __future__ import annotations

import argparse
import json
import sys
import types
import typing
from pathlib import Path

from . import analysis, pipeline
from .backbone import SCHEMA, BackboneModel
from .errors import BudgetError, ContractError
from .peft import load_method
from .tasks import NEUTRAL_ID, evaluate


class UsageError(Exception):
    """Reported with exit code 2."""


def _coerce(dotted: str, raw: str):
    hint = pipeline.field_type(dotted)
    arms = typing.get_args(hint) if typing.get_origin(hint) in (typing.Union, types.UnionType) else (hint,)
    if str in arms:
        return raw
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        if typing.get_origin(arms[0]) is list:
            return [json.loads(x) if x.strip().lstrip("-").isdigit() else x for x in raw.split(",") if x]
        return raw


def parse_overrides(extra: list[str]) -> dict[str, object]:
    """Turn ``--section.key value`` / ``--section.key=value`` pairs into a dict."""
    out: dict[str, object] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"{key}: missing value")
            i += 1
            raw = extra[i]
        out[key] = _coerce(key, raw)
        i += 1
    return out


def _config(args, extra: list[str]) -> pipeline.LabConfig:
    overrides = parse_overrides(extra)
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    path = getattr(args, "config", None)
    if path and not Path(path).exists():
        raise UsageError(f"config file {path} does not exist")
    return pipeline.load_config(path, overrides)


def _load_backbone(path: str) -> BackboneModel:
    if not Path(path).exists():
        raise UsageError(f"backbone checkpoint {path} does not exist")
    return BackboneModel.load(path).freeze()


def _load_method(path: str):
    if not Path(path).exists():
        raise UsageError(f"method checkpoint {path} does not exist")
    return load_method(path)


def _emit(doc: dict, out: str | None) -> None:
    doc = {"schema": SCHEMA, **doc}
    text = json.dumps(doc)
    if out:
        Path(out).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _with_backbone_config(cfg: pipeline.LabConfig, backbone: BackboneModel) -> pipeline.LabConfig:
    cfg.backbone = backbone.config
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args, cfg: pipeline.LabConfig) -> None:
    history: list[float] = []
    model = pipeline.run_pretrain(cfg, history)
    model.save(args.out)
    _emit({
        "command": "pretrain",
        "checkpoint": str(args.out),
        "steps": len(history),
        "final_loss": history[-1] if history else None,
        "source_accuracy": {str(k): v for k, v in pipeline.source_accuracies(model, cfg).items()},
        "checksum": model.checksum(),
    }, args.report)


def cmd_adapt(args, cfg: pipeline.LabConfig) -> None:
    backbone = _load_backbone(args.backbone)
    cfg = _with_backbone_config(cfg, backbone)
    method, history = pipeline.run_adapt(cfg, backbone)
    method.save(args.out)
    _emit({
        "command": "adapt",
        "method_kind": method.kind,
        "checkpoint": str(args.out),
        "param_count": method.param_count(),
        "history": history,
        "best_valid_accuracy": max((h["valid_accuracy"] for h in history), default=None),
    }, args.metrics)


def cmd_eval(args, cfg: pipeline.LabConfig) -> None:
    backbone = _load_backbone(args.backbone)
    cfg = _with_backbone_config(cfg, backbone)
    method = _load_method(args.method)
    examples = pipeline.target_dataset(cfg).split(args.split)
    acc, preds = evaluate(backbone, method, examples, prepend_neutral=args.prepend)
    _emit({"command": "eval", "method_kind": method.kind, "split": args.split,
           "prepend": args.prepend, "accuracy": acc, "predictions": preds}, args.out)


def cmd_analyze(args, cfg: pipeline.LabConfig) -> None:
    backbone = _load_backbone(args.backbone)
    cfg = _with_backbone_config(cfg, backbone)
    method = _load_method(args.method)
    a = cfg.analysis
    data = pipeline.target_dataset(cfg)
    if args.what == "shift":
        max_len = getattr(method, "max_len", backbone.config.max_content_len)
        shifts = a.shifts if a.shifts is not None else pipeline.default_shifts(max_len)
        doc = analysis.shift_probe(backbone, method, data.split(a.split), shifts).to_dict()
    elif args.what == "stats":
        doc = analysis.offset_stats(backbone, method, data.split(a.stats_split)).to_dict()
    elif args.what == "prepend":
        examples = data.split(a.split)
        prefix = backbone.embed([NEUTRAL_ID] * a.prepend).data
        per = [analysis.prepend_probe(method, backbone.embed(list(ex.ids)).data, prefix) for ex in examples]
        plain, plain_preds = evaluate(backbone, method, examples)
        shifted, shifted_preds = evaluate(backbone, method, examples, prepend_neutral=a.prepend)
        doc = {"report": "prepend_probe", "method": method.kind, "prepend": a.prepend,
               "max_offset_change": max(per), "per_example": per,
               "accuracy": plain, "accuracy_with_prefix": shifted,
               "prediction_changes": sum(p != q for p, q in zip(plain_preds, shifted_preds))}
    else:
        examples = data.split(a.split)
        if not 0 <= a.example < len(examples):
            raise UsageError(f"analysis.example: index {a.example} outside split of {len(examples)}")
        E = backbone.embed(list(examples[a.example].ids)).data
        if not 0 <= a.query < E.shape[0]:
            raise UsageError(f"analysis.query: position {a.query} outside sequence of {E.shape[0]}")
        head = analysis.HeadWeights.from_backbone(backbone, a.layer, a.head)
        P = method.prompt.data
        if method.kind == "pt":
            rep = analysis.pt_decompose(E[a.query], E, P, head, a.scaled)
        elif method.kind == "adept":
            rep = analysis.adept_decompose(E[a.query], E, method, P, head, a.scaled)
        else:
            rep = analysis.dept_decompose(E[a.query], a.query, E, method, head, a.scaled)
        doc = rep.to_dict()
    doc.pop("schema", None)
    _emit({"command": f"analyze {args.what}", **doc}, args.out)


def cmd_budget(args, cfg: pipeline.LabConfig) -> None:
    try:
        doc = pipeline.budget_report(args.budget, args.dim, args.prompt_len, args.dept_max_len)
    except BudgetError as exc:
        raise UsageError(str(exc)) from None
    _emit({"command": "budget", **doc}, args.out)


# ---------------------------------------------------------------------------


PRECEDENCE = ("Any config field can be set with --<section>.<key> VALUE; precedence is "
              "flag > config file > built-in default.")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="overrides run.seed")

    parser = argparse.ArgumentParser(
        prog="adept-lab",
        description="Prompt tuning (PT), decomposed prompt tuning (DePT) and adaptive decomposed "
                    "prompt tuning (ADePT) on a small frozen transformer.",
        epilog=PRECEDENCE)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        return sub.add_parser(name, parents=[common], help=help, epilog=PRECEDENCE)

    p = command("pretrain", "pretrain and freeze the backbone")
    p.add_argument("--out", required=True, help="backbone checkpoint path")
    p.add_argument("--report", help="write the summary JSON here instead of stdout")

    p = command("adapt", "adapt a method on the target task")
    p.add_argument("--backbone", required=True)
    p.add_argument("--out", required=True, help="method checkpoint path")
    p.add_argument("--metrics", help="write the metrics JSON here instead of stdout")

    p = command("eval", "evaluate a method checkpoint")
    p.add_argument("--backbone", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--prepend", type=int, default=0, help="prefix every input with N neutral tokens")
    p.add_argument("--out")

    p = command("analyze", "decomposition and position probes")
    p.add_argument("what", choices=("decompose", "shift", "stats", "prepend"))
    p.add_argument("--backbone", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--out")

    p = command("budget", "bottleneck size for a parameter budget")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--prompt-len", type=int, required=True)
    p.add_argument("--dept-max-len", type=int, default=256)
    p.add_argument("--out")
    return parser


COMMANDS = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval,
            "analyze": cmd_analyze, "budget": cmd_budget}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = _config(args, extra)
        if getattr(args, "prepend", 0) < 0:
            raise UsageError("--prepend must be >= 0")
        COMMANDS[args.command](args, cfg)
    except (UsageError, pipeline.ConfigError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, RuntimeError, IndexError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
