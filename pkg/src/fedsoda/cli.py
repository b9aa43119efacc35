"""Command-line entry point: ``fedsoda {run,compare,ablate,sweep,gen-data,grad-check}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import ftns
from .config import METHODS, TRANSPORTS, ConfigError, parse_config
from .data import generate_federation
from .fedcore.experiment import SWEEP_VALUES, ablate, compare, run_experiment, sweep
from .model import build_model
from .tensor import grad_check

log = logging.getLogger("fedsoda")

_LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _configure_logging() -> None:
    name = os.environ.get("FEDSODA_LOG", "error").lower()
    logging.basicConfig(level=_LOG_LEVELS.get(name, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _method_list(text: str) -> list[str]:
    methods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if not methods or bad:
        raise argparse.ArgumentTypeError(f"methods must be a comma list from {', '.join(METHODS)}; bad: {bad or text!r}")
    return methods


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    common.add_argument("--transport", choices=TRANSPORTS, help="override the transport backend")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    parser = argparse.ArgumentParser(prog="fedsoda", description="Federated segmentation experiments on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="one federated training run")
    p.add_argument("--method", choices=METHODS, help="override the config method")

    p = sub.add_parser("compare", parents=[common], help="run several methods under one config")
    p.add_argument("--methods", type=_method_list, default=list(METHODS), help="comma-separated methods")

    sub.add_parser("ablate", parents=[common], help="fedsoda module ablation (5 rows)")

    p = sub.add_parser("sweep", parents=[common], help="fedsoda hyperparameter sweep")
    p.add_argument("--param", choices=sorted(SWEEP_VALUES), required=True)
    p.add_argument("--values", type=lambda s: [float(v) for v in s.split(",")], help="comma-separated values")

    sub.add_parser("gen-data", parents=[common], help="write client datasets as FTNS files plus manifest.json")

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the model gradients")
    p.add_argument("--coords", type=int, default=200, help="sampled coordinates per layer")
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _load_config(args):
    overrides = {"seed": args.seed, "transport": args.transport}
    if getattr(args, "method", None):
        overrides["method"] = args.method
    raw: dict | str | None = args.config
    # commands that pick their own methods do not need one in the config
    if args.command not in ("run",):
        raw = _read_json(args.config) if args.config else {}
        raw.setdefault("method", "fedsoda")
        if args.command in ("gen-data", "grad-check"):
            raw.setdefault("seed", 0)
    return parse_config(raw, **overrides)


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from None
    if not text.strip():
        return {}
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a JSON object"])
    return raw


def _write_result(result, out_dir: str, stem: str) -> None:
    rounds_path, summary_path = result.write(out_dir, stem)
    print(f"wrote {rounds_path}")
    print(f"wrote {summary_path}")
    for row in result.summary():
        print(f"{row['method']}: avg_dice={row['avg_dice']:.4f} avg_accuracy={row['avg_accuracy']:.4f}")


def gen_data(cfg, out_dir: str) -> str:
    datasets = generate_federation(cfg.client_specs(), cfg.seed)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for ds in datasets:
        cid = ds.client_id
        files = {}
        for split in ("train", "eval"):
            for kind in ("images", "masks"):
                name = f"client{cid}_{split}_{kind}.ftns"
                ftns.write_ftns(os.path.join(out_dir, name), getattr(ds, f"{split}_{kind}"))
                files[f"{split}_{kind}"] = name
        entries.append({
            "client_id": cid,
            "n_train": int(len(ds.train_images)),
            "n_eval": int(len(ds.eval_images)),
            "stats": ds.stats.to_dict(),
            "spec": ds.spec.to_dict(),
            "files": files,
        })
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump({"seed": cfg.seed, "clients": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def run_grad_check(cfg, coords: int, tol: float) -> bool:
    model = build_model(cfg.model_spec(), seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 7])
    size = min(cfg.image_size, 12)
    x = rng.random((2, model.in_channels, size, size))
    y = (rng.random((2, 1, size, size)) > 0.5).astype(np.float64)
    report = grad_check(model, x, y, tol=tol, n_coords=coords, seed=cfg.seed)
    print(report.format())
    for kind, ok in report.by_kind().items():
        print(f"{kind}: {'PASS' if ok else 'FAIL'}")
    return report.passed


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print("config error:", file=sys.stderr)
        for e in exc.errors:
            print(f"  {e}", file=sys.stderr)
        return 2
    if args.print_config:
        print(cfg.to_json())
        return 0
    try:
        if args.command == "run":
            _write_result(run_experiment(cfg), args.out, "rounds")
        elif args.command == "compare":
            _write_result(compare(cfg, args.methods), args.out, "rounds")
        elif args.command == "ablate":
            _write_result(ablate(cfg), args.out, "rounds")
        elif args.command == "sweep":
            _write_result(sweep(cfg, args.param, args.values), args.out, "rounds")
        elif args.command == "gen-data":
            print(f"wrote {gen_data(cfg, args.out)}")
        elif args.command == "grad-check":
            return 0 if run_grad_check(cfg, args.coords, args.tol) else 1
    except (OSError, ValueError, RuntimeError) as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
