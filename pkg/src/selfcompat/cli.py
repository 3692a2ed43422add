"""Command-line entry point.

Exit codes: 0 success, 2 usage/config/input error, 3 numerical abort,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import build_dataclass, load_config
from .data import SyntheticSpec, generate_synthetic, load_dataset_dir, write_dataset_dir, write_spec
from .errors import NumericalAbort, SelfCompatError
from .gradcheck import run_gradcheck
from .model import build_model
from .retrieval import compat_matrix
from .trainer import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4

CHECKPOINT_NAME = "checkpoint.sfsc"
MANIFEST_NAME = "manifest.jsonl"
COMPAT_NAME = "compat.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _fail(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _read_spec(arg: str) -> dict:
    text = arg if arg.lstrip().startswith("{") else Path(arg).read_text()
    doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ValueError("spec must be a JSON object")
    return doc


def cmd_gen_data(args) -> int:
    try:
        spec = build_dataclass(SyntheticSpec, "spec", _read_spec(args.spec))
    except (OSError, ValueError) as exc:
        return _fail(f"invalid spec: {exc}", EXIT_USAGE)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        ds = generate_synthetic(spec)
        paths = write_dataset_dir(ds, out)
        write_spec(spec, out / "spec.json")
    except OSError as exc:
        return _fail(f"cannot write to {out}: {exc.strerror}", EXIT_USAGE)
    for p in paths:
        print(p)
    return EXIT_OK


def _parse_ratios(text: str | None):
    if text is None:
        return None
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise SelfCompatError(f"--ratios must be a comma-separated list of numbers, got {text!r}") from None


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    cfg = load_config(cfg_path)
    data = cfg.load_data(cfg_path.parent)
    model = build_model(cfg.model_config(data))
    out = Path(args.out)
    try:
        manifest = train(model, data, cfg.train, out, extra_config={"data": cfg.resolved(data)["data"]})
    except OSError as exc:
        return _fail(f"I/O failure under {out}: {exc}", EXIT_USAGE)
    last = manifest.epochs[-1] if manifest.epochs else {}
    print(json.dumps({"steps": len(manifest.steps), "last_epoch": last,
                      "checkpoint": str(out / CHECKPOINT_NAME)}, sort_keys=True))
    if cfg.evaluate and (data.split == "query").any():
        matrix = compat_matrix(model, data.part("query"), data.part("gallery"), cfg.eval_ratios,
                               {"checkpoint": CHECKPOINT_NAME, "dataset": str(cfg.data)})
        (out / COMPAT_NAME).write_text(matrix.dumps() + "\n")
        print(matrix.table())
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = load_dataset_dir(args.data)
    ratios = _parse_ratios(args.ratios)
    matrix = compat_matrix(model, data.part("query"), data.part("gallery"), ratios,
                           {"checkpoint": str(args.checkpoint), "dataset": str(args.data), "step": model.step})
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / COMPAT_NAME).write_text(matrix.dumps() + "\n")
    except OSError as exc:
        return _fail(f"cannot write {out / COMPAT_NAME}: {exc.strerror}", EXIT_USAGE)
    print(matrix.table())
    print()
    print(matrix.table("r1"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    overrides = {}
    if args.config:
        overrides = load_config(args.config).train.to_dict()
    base = {**overrides, "epochs": 0, "batch_size": 4, "instances_per_class": 2}
    report = run_gradcheck(TrainConfig(**base))
    print(json.dumps(report, indent=2, sort_keys=True, default=float))
    if not report["passed"]:
        print(f"gradient check failed: {report['worst_objective']} parameter index {report['worst_index']} "
              f"({report['worst_parameter']}), relative error {report['max_rel_error']:.3e}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="selfcompat", description="Train and evaluate width-switchable compatible embedders.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic train/query/gallery split as CSV")
    p.add_argument("--spec", required=True, help="JSON file or inline JSON with synthetic-data settings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a switchable model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="cross-ratio retrieval matrix for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory containing query.csv and gallery.csv")
    p.add_argument("--ratios", help="comma-separated crop ratios (default: all)")
    p.add_argument("--out", help="directory for compat.json (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all objectives on a tiny model")
    p.add_argument("--config", help="optional run config whose train section is reused")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    except SelfCompatError as exc:
        return _fail(str(exc), EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
