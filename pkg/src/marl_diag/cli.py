"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, config or paths), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path


from .checkpoint import load_checkpoint
from .data import SyntheticConfig, generate_synthetic, load_dataset_dir, load_manifest, split
from .errors import (CheckpointFormatError, CheckpointIntegrityError, ConfigError, ManifestError,
                     ShapeMismatchError)
from .evaluation import evaluate, export_attention
from .training import RunConfig, bundle_from_checkpoint, pretrain_priors, train

log = logging.getLogger("marl_diag")

OUTPUT_ROOT_ENV = "MARL_OUTPUT_ROOT"

# (visual, semantic, decoder, rl) per ablation row
ABLATION_GRID = [
    (False, True, True, True),
    (False, False, True, True),
    (False, False, False, True),
    (False, True, False, True),
    (True, True, False, True),
    (True, False, True, True),
    (True, False, False, True),
    (True, True, True, False),
    (True, True, True, True),
]


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# -- config handling ----------------------------------------------------------

def _check_type(name: str, value, default):
    if default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"field {name!r}: expected a string or null, got {type(value).__name__}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"field {name!r}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"field {name!r}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field {name!r}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"field {name!r}: expected a list, got {value!r}")
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"field {name!r}: expected a string, got {value!r}")
    return value


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for key, value in raw.items():
        if key == "derived_seeds":
            continue  # present in config echoes
        if key not in known:
            raise ConfigError(f"{source}: unknown field {key!r}")
        out[key] = _check_type(key, value, getattr(defaults, key))
    try:
        return RunConfig(**out)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def _coerce_override(name: str, text: str, default):
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"--set {name}: expected a boolean, got {text!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return _check_type(name, value, default)


def build_config(args) -> RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ValidationError(f"config file {path} does not exist")
        base = parse_config(path.read_text(), str(path)).to_dict()
    else:
        base = {}
    defaults = RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        if not hasattr(defaults, key):
            raise ConfigError(f"--set: unknown field {key!r}")
        base[key] = _coerce_override(key, text, getattr(defaults, key))
    for flag, key in (("data", "data"), ("pretrain_data", "pretrain_data"), ("out", "out_dir"),
                      ("seed", "seed"), ("epochs", "epochs"), ("eps_min", "eps_min"),
                      ("batch_size", "batch_size"), ("lr", "lr")):
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
    cfg = RunConfig(**base)
    if not cfg.out_dir or cfg.out_dir == RunConfig().out_dir:
        cfg.out_dir = str(output_root() / f"{args.command}-seed{cfg.seed}")
    return cfg


def _require_path(field_name: str, value) -> Path:
    if not value:
        raise ValidationError(f"field {field_name!r} is required")
    p = Path(value)
    if not p.exists():
        raise ValidationError(f"field {field_name!r}: path {p} does not exist")
    return p


def _load_any(path: Path):
    return load_dataset_dir(path) if path.is_dir() else load_manifest(path)


# -- commands -----------------------------------------------------------------

def cmd_gen_synthetic(args) -> None:
    overrides = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        known = {f.name for f in fields(SyntheticConfig)}
        bad = sorted(set(raw) - known)
        if bad:
            raise ConfigError(f"{args.config}: unknown field(s) {', '.join(bad)}")
        overrides.update(raw)
    for flag, key in (("seed", "seed"), ("classes", "num_classes"), ("n", "n"),
                      ("image_size", "image_size"), ("noise_rate", "noise_rate")):
        v = getattr(args, flag)
        if v is not None:
            overrides[key] = v
    cfg = SyntheticConfig(**overrides)
    out = Path(args.out) if args.out else output_root() / f"synthetic-seed{cfg.seed}"
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise ValidationError(f"{out} already exists; pass --overwrite to replace it")
    generate_synthetic(cfg, out)
    print(out)


def cmd_pretrain(args) -> None:
    cfg = build_config(args)
    src = _require_path("pretrain_data", cfg.pretrain_data or cfg.data)
    out = Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / "checkpoints" / "priors.ckpt"
    if out.exists() and not args.overwrite:
        raise ValidationError(f"{out} already exists; pass --overwrite to replace it")
    out.parent.mkdir(parents=True, exist_ok=True)
    (out.parent / "pretrain_config.json").write_text(
        json.dumps({**cfg.to_dict(), "derived_seeds": cfg.seeds()}, indent=2) + "\n")
    pretrain_priors(cfg, _load_any(src), out)
    print(out)


def cmd_train(args) -> None:
    cfg = build_config(args)
    _require_path("data", cfg.data)
    priors = load_checkpoint(_require_path("priors", args.priors)) if args.priors else None
    res = train(cfg, priors=priors, overwrite=args.overwrite)
    print(json.dumps({"run_dir": str(res.run_dir),
                      "test_mean_auc": None if res.test is None else res.test.mean_auc}))


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(_require_path("checkpoint", args.checkpoint))
    bundle, stats = bundle_from_checkpoint(ckpt)
    saved = ckpt.meta.get("config", {})
    data = args.data or saved.get("data")
    ds = _load_any(_require_path("data", data))
    if args.split != "all":
        parts = split(ds, saved.get("split", RunConfig().split), saved.get("split_seed", 0))
        ds = dict(zip(("train", "val", "test"), parts))[args.split]
    rep = evaluate(bundle, ds, stats, resamples=args.resamples, seed=args.seed,
                   config={"checkpoint": str(args.checkpoint), "data": str(data), "split": args.split})
    text = json.dumps({**rep.as_dict(), "config": rep.config}, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)


def _write_table(rows: list, cols: list, stem: Path) -> None:
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)

    def fmt(v):
        if isinstance(v, bool):
            return "+" if v else "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return "" if v is None else str(v)

    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(fmt(r[c]) for c in cols) + " |" for r in rows]
    stem.with_suffix(".md").write_text("\n".join(lines) + "\n")


def _check_fresh(base: Path, overwrite: bool) -> None:
    if base.exists() and any(base.iterdir()) and not overwrite:
        raise ValidationError(f"{base} already exists; pass --overwrite to replace it")


def cmd_ablate(args) -> None:
    cfg = build_config(args)
    _require_path("data", cfg.data)
    base = Path(cfg.out_dir)
    _check_fresh(base, args.overwrite)
    rows = []
    for i, (vis, sem, dec, rl) in enumerate(ABLATION_GRID, start=1):
        if args.rows and i not in args.rows:
            continue
        run = RunConfig(**{**cfg.to_dict(), "use_visual": vis, "use_semantic": sem, "use_decoder": dec,
                           "rl": rl, "out_dir": str(base / f"model{i}")})
        res = train(run, overwrite=args.overwrite)
        rows.append({"model": i, "visual": vis, "semantic": sem, "diagnostic": dec, "rl": rl,
                     "mean_auc": res.test.mean_auc})
        _write_table(rows, list(rows[0]), base / "ablation")
    print(base / "ablation.md")


def cmd_sweep(args) -> None:
    cfg = build_config(args)
    _require_path("data", cfg.data)
    base = Path(cfg.out_dir)
    _check_fresh(base, args.overwrite)
    rows = []
    for eps in args.values:
        if not 0 <= eps <= 1:
            raise ValidationError(f"eps_min value {eps} is outside [0, 1]")
        run = RunConfig(**{**cfg.to_dict(), "eps_min": eps, "out_dir": str(base / f"eps{eps:g}")})
        res = train(run, overwrite=args.overwrite)
        rows.append({"eps_min": eps, "mean_auc": res.test.mean_auc})
        _write_table(rows, ["eps_min", "mean_auc"], base / "sweep")
    print(base / "sweep.md")


def cmd_export(args) -> None:
    ckpt = load_checkpoint(_require_path("checkpoint", args.checkpoint))
    bundle, stats = bundle_from_checkpoint(ckpt)
    data = args.data or ckpt.meta.get("config", {}).get("data")
    ds = _load_any(_require_path("data", data))
    if not 0 <= args.index < len(ds):
        raise ValidationError(f"--index {args.index} outside dataset of {len(ds)} samples")
    out = Path(args.out) if args.out else output_root() / "attention"
    files = export_attention(bundle, ds.images[args.index], out, stats)
    (out / "export_config.json").write_text(json.dumps(
        {"checkpoint": str(args.checkpoint), "data": str(data), "index": args.index, "id": ds.ids[args.index]},
        indent=2) + "\n")
    print(f"wrote {len(files)} files to {out}")


# -- parser -------------------------------------------------------------------

def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--data")
    p.add_argument("--pretrain-data", dest="pretrain_data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--eps-min", dest="eps_min", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--overwrite", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="marl-diag", description="Multi-agent multi-label image diagnosis toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synthetic", help="render a synthetic multi-label dataset")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.add_argument("--classes", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--image-size", dest="image_size", type=int)
    g.add_argument("--noise-rate", dest="noise_rate", type=float)
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("pretrain-priors", help="pretrain the prior agents on a (possibly different) domain")
    _run_flags(p)
    p.add_argument("--checkpoint", help="output checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="run the full training loop")
    _run_flags(t)
    t.add_argument("--priors", help="prior-agent checkpoint to start from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--resamples", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the nine-row component ablation grid")
    _run_flags(a)
    a.add_argument("--rows", type=int, nargs="+", help="subset of rows (1-9)")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep-epsilon", help="train once per eps_min value")
    _run_flags(s)
    s.add_argument("--values", type=float, nargs="+", default=[0.1, 0.2, 0.4, 0.6, 0.8])
    s.set_defaults(func=cmd_sweep)

    x = sub.add_parser("export-attn", help="write attention and position maps for one sample")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data")
    x.add_argument("--index", type=int, default=0)
    x.add_argument("--out")
    x.set_defaults(func=cmd_export)
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, ConfigError, ManifestError, FileExistsError, FileNotFoundError,
            CheckpointFormatError, CheckpointIntegrityError, ShapeMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
