"""Experiment configuration: JSON in, validated dataclass out."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

from .data import PRESETS, ClientDatasetSpec
from .model import LayerSpec, ModelSpecError, validate_spec

METHODS = ("fedavg", "fedprox", "fedbn", "fedsoda")
TRANSPORTS = ("inproc", "socket")
SCALES = {
    "desk": {"rounds": 30, "local_epochs": 2, "data_preset": "default"},
    "full": {"rounds": 300, "local_epochs": 5, "data_preset": "full"},
}
REQUIRED = ("seed", "method")
# JSON key -> dataclass attribute, where they differ
_RENAMES = {"lambda": "lam"}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class ExperimentConfig:
    seed: int
    method: str
    scale: str = "desk"
    rounds: int = 30
    local_epochs: int = 2
    num_clients: int | None = None
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    lam: float = 0.4
    gamma: float = 0.25
    epsilon: float = 0.1
    alpha_sc: float = 1.0
    prox_mu: float = 0.01
    synth_batch: int = 4
    so: bool = True
    da: bool = True
    lsc: bool = True
    weighting: str = "samples"
    transport: str = "inproc"
    port: int = 0
    round_timeout: float = 600.0
    data_preset: str = "default"
    image_size: int = 50
    clients: list | None = None
    model: list | None = None
    label: str | None = None

    @property
    def run_label(self) -> str:
        return self.label or self.method

    def client_specs(self) -> list[ClientDatasetSpec]:
        from .data import preset_specs

        if self.clients is not None:
            specs = [ClientDatasetSpec.from_dict(d) for d in self.clients]
            return specs[: self.num_clients] if self.num_clients else specs
        return preset_specs(self.data_preset, self.num_clients, self.image_size)

    def model_spec(self) -> list[LayerSpec] | None:
        if self.model is None:
            return None
        return [LayerSpec.from_dict(d) for d in self.model]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            key = next((k for k, v in _RENAMES.items() if v == f.name), f.name)
            out[key] = getattr(self, f.name)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _check_types(raw: dict, errors: list[str]) -> dict:
    values = {}
    for key, val in raw.items():
        name = _RENAMES.get(key, key)
        if name not in _FIELDS or key in _RENAMES.values():
            errors.append(f"{key}: unknown key")
            continue
        default = _FIELDS[name].default
        if name in ("seed", "rounds", "local_epochs", "batch_size", "synth_batch", "port", "image_size", "num_clients"):
            if val is None and name == "num_clients":
                values[name] = None
                continue
            if isinstance(val, bool) or not isinstance(val, int):
                errors.append(f"{key}: expected an integer, got {val!r}")
                continue
        elif name in ("so", "da", "lsc"):
            if not isinstance(val, bool):
                errors.append(f"{key}: expected true/false, got {val!r}")
                continue
        elif isinstance(default, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                errors.append(f"{key}: expected a number, got {val!r}")
                continue
            val = float(val)
        elif name in ("clients", "model"):
            if val is not None and not isinstance(val, list):
                errors.append(f"{key}: expected a list")
                continue
        elif name in ("method", "scale", "weighting", "transport", "data_preset", "label"):
            if not isinstance(val, str) and not (name == "label" and val is None):
                errors.append(f"{key}: expected a string, got {val!r}")
                continue
        values[name] = val
    return values


def validate(cfg: ExperimentConfig) -> list[str]:
    errors = []
    if cfg.method not in METHODS:
        errors.append(f"method: {cfg.method!r} is not one of {', '.join(METHODS)}")
    if cfg.scale not in SCALES:
        errors.append(f"scale: {cfg.scale!r} is not one of {', '.join(SCALES)}")
    for name, key in (("lam", "lambda"), ("gamma", "gamma")):
        v = getattr(cfg, name)
        if not 0.0 <= v <= 1.0:
            errors.append(f"{key}: {v} is outside [0, 1]")
    if cfg.rounds < 0:
        errors.append(f"rounds: must be >= 0, got {cfg.rounds}")
    if cfg.local_epochs < 0:
        errors.append(f"local_epochs: must be >= 0, got {cfg.local_epochs}")
    for key in ("batch_size", "synth_batch", "image_size"):
        if getattr(cfg, key) < 1:
            errors.append(f"{key}: must be >= 1")
    if cfg.num_clients is not None and cfg.num_clients < 1:
        errors.append("num_clients: must be >= 1")
    if cfg.lr <= 0:
        errors.append("lr: must be > 0")
    for key in ("beta1", "beta2"):
        if not 0.0 <= getattr(cfg, key) < 1.0:
            errors.append(f"{key}: must lie in [0, 1)")
    for key in ("epsilon", "alpha_sc", "prox_mu"):
        if getattr(cfg, key) < 0:
            errors.append(f"{key}: must be >= 0")
    if cfg.round_timeout <= 0:
        errors.append("round_timeout: must be > 0")
    if cfg.weighting not in ("samples", "uniform"):
        errors.append(f"weighting: {cfg.weighting!r} is not 'samples' or 'uniform'")
    if cfg.transport not in TRANSPORTS:
        errors.append(f"transport: {cfg.transport!r} is not one of {', '.join(TRANSPORTS)}")
    if not 0 <= cfg.port < 65536:
        errors.append("port: must lie in [0, 65535]")
    if cfg.clients is None and cfg.data_preset not in PRESETS:
        errors.append(f"data_preset: {cfg.data_preset!r} is not one of {', '.join(PRESETS)}")
    if not errors:
        try:
            specs = cfg.client_specs()
            for s in specs:
                errors.extend(f"clients: {e}" for e in s.validate())
            if len({s.client_id for s in specs}) != len(specs):
                errors.append("clients: duplicate client_id")
            if any(not 0 <= s.client_id < 2**16 for s in specs):
                errors.append("clients: client_id must fit in 16 bits")
        except (TypeError, ValueError) as exc:
            errors.append(f"clients: {exc}")
    if cfg.model is not None:
        try:
            validate_spec(cfg.model_spec())
        except (ModelSpecError, TypeError, ValueError) as exc:
            errors.append(f"model: {exc}")
    return errors


def parse_config(source: str | os.PathLike | dict | None = None, **overrides) -> ExperimentConfig:
    """Build a validated config from a JSON file or dict, then apply overrides.

    Every violation is collected and reported in a single ``ConfigError``.
    """
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = dict(source)
    else:
        try:
            with open(source) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError([f"cannot read config {source}: {exc}"]) from None
        if not text.strip():
            raw = {}
        else:
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError([f"config is not valid JSON: {exc}"]) from None
        if not isinstance(raw, dict):
            raise ConfigError(["config must be a JSON object"])
    raw.update({k: v for k, v in overrides.items() if v is not None})

    errors: list[str] = []
    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        errors.append("missing required fields: " + ", ".join(missing))
    values = _check_types(raw, errors)
    if errors:
        raise ConfigError(errors)
    scale = values.get("scale", "desk")
    for key, val in SCALES.get(scale, {}).items():
        values.setdefault(key, val)
    cfg = ExperimentConfig(**values)
    errors = validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg
