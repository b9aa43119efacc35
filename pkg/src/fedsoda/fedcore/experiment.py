"""Experiment drivers: single runs, method comparison, ablation, and hyperparameter sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
from dataclasses import dataclass, field

from ..config import ExperimentConfig, validate
from .server import Federation

log = logging.getLogger(__name__)

ROUND_HEADER = ("round", "client_id", "method", "dice", "accuracy", "loss_ce", "loss_sc")
SUMMARY_HEADER = ("method", "avg_dice", "avg_accuracy")
SUMMARY_WINDOW = 5

# (label, so, da, lsc): one row per ablation setting, baseline first
ABLATION_ROWS = (
    ("none", False, False, False),
    ("SO", True, False, False),
    ("DA", False, True, False),
    ("SO+DA", True, True, False),
    ("SO+DA+Lsc", True, True, True),
)
SWEEP_VALUES = {
    "lambda": (0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
    "gamma": (0.0, 0.25, 0.5, 0.75, 1.0),
}


@dataclass
class ExperimentResult:
    rows: list[dict] = field(default_factory=list)

    def extend(self, other: "ExperimentResult") -> "ExperimentResult":
        self.rows.extend(other.rows)
        return self

    def summary(self) -> list[dict]:
        return summarize(self.rows)

    def rounds_csv(self) -> str:
        return format_csv(ROUND_HEADER, self.rows)

    def summary_csv(self) -> str:
        return format_csv(SUMMARY_HEADER, self.summary())

    def run_hash(self) -> str:
        return hashlib.sha256(self.rounds_csv().encode()).hexdigest()

    def write(self, out_dir: str | os.PathLike, stem: str = "rounds") -> tuple[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        rounds_path = os.path.join(out_dir, f"{stem}.csv")
        summary_path = os.path.join(out_dir, "summary.csv" if stem == "rounds" else f"{stem}_summary.csv")
        with open(rounds_path, "w", newline="") as fh:
            fh.write(self.rounds_csv())
        with open(summary_path, "w", newline="") as fh:
            fh.write(self.summary_csv())
        return rounds_path, summary_path


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_csv(header, rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(row[k]) for k in header])
    return buf.getvalue()


def summarize(rows: list[dict], window: int = SUMMARY_WINDOW) -> list[dict]:
    """Average dice/accuracy per method over all clients and the last ``window`` rounds.

    Round 0 (the untrained model) only counts when no later round exists.
    """
    by_method: dict[str, list[dict]] = {}
    for r in rows:
        by_method.setdefault(r["method"], []).append(r)
    out = []
    for method, mrows in by_method.items():
        rounds = sorted({r["round"] for r in mrows})
        trained = [t for t in rounds if t > 0]
        keep = set((trained or rounds)[-window:])
        sel = [r for r in mrows if r["round"] in keep]
        out.append({
            "method": method,
            "avg_dice": sum(r["dice"] for r in sel) / len(sel),
            "avg_accuracy": sum(r["accuracy"] for r in sel) / len(sel),
        })
    return out


def run_experiment(config: ExperimentConfig, datasets=None) -> ExperimentResult:
    """Run every round of one configuration and collect per-client evaluation rows."""
    label = config.run_label
    with Federation(config, datasets) as fed:
        reports = fed.run()
    result = ExperimentResult()
    for rep in reports:
        for cid in sorted(rep.metrics):
            m = rep.metrics[cid]
            result.rows.append({
                "round": rep.round,
                "client_id": cid,
                "method": label,
                "dice": float(m["dice"]),
                "accuracy": float(m["accuracy"]),
                "loss_ce": float(m["loss_ce"]),
                "loss_sc": float(m["loss_sc"]),
            })
    log.info("%s finished: %s", label, result.summary())
    return result


def compare(config: ExperimentConfig, methods=("fedavg", "fedprox", "fedbn", "fedsoda")) -> ExperimentResult:
    result = ExperimentResult()
    for method in methods:
        result.extend(run_experiment(config.replace(method=method, label=method)))
    return result


def ablation_configs(config: ExperimentConfig) -> list[ExperimentConfig]:
    return [config.replace(method="fedsoda", so=so, da=da, lsc=lsc, label=label)
            for label, so, da, lsc in ABLATION_ROWS]


def ablate(config: ExperimentConfig) -> ExperimentResult:
    result = ExperimentResult()
    for cfg in ablation_configs(config):
        result.extend(run_experiment(cfg))
    return result


def sweep(config: ExperimentConfig, param: str, values=None) -> ExperimentResult:
    if param not in SWEEP_VALUES:
        raise ValueError(f"can only sweep {sorted(SWEEP_VALUES)}, got {param!r}")
    values = SWEEP_VALUES[param] if values is None else values
    attr = "lam" if param == "lambda" else param
    result = ExperimentResult()
    for v in values:
        cfg = config.replace(method="fedsoda", label=f"fedsoda[{param}={v}]", **{attr: float(v)})
        errors = validate(cfg)
        if errors:
            raise ValueError("; ".join(errors))
        result.extend(run_experiment(cfg))
    return result

