import json

import pytest

from fedsoda.config import ConfigError, parse_config


def test_empty_file_lists_required_fields(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("")
    with pytest.raises(ConfigError) as err:
        parse_config(path)
    assert "seed" in str(err.value) and "method" in str(err.value)


def test_minimal_config_gets_defaults():
    cfg = parse_config({"seed": 1, "method": "fedsoda"})
    assert (cfg.lam, cfg.gamma, cfg.lr, cfg.beta1, cfg.beta2) == (0.4, 0.25, 1e-4, 0.9, 0.95)
    assert (cfg.rounds, cfg.local_epochs, cfg.batch_size) == (30, 2, 4)
    assert cfg.so and cfg.da and cfg.lsc


def test_full_scale_defaults():
    cfg = parse_config({"seed": 1, "method": "fedavg", "scale": "full"})
    assert (cfg.rounds, cfg.local_epochs, cfg.data_preset) == (300, 5, "full")
    assert len(cfg.client_specs()) == 7
    cfg = parse_config({"seed": 1, "method": "fedavg", "scale": "full", "rounds": 3})
    assert cfg.rounds == 3


def test_lambda_range_error_names_lambda():
    with pytest.raises(ConfigError) as err:
        parse_config({"seed": 0, "method": "fedsoda", "lambda": 1.5})
    assert any("lambda" in e for e in err.value.errors)


def test_all_errors_reported_at_once():
    with pytest.raises(ConfigError) as err:
        parse_config({"seed": 0, "method": "fedsgd", "gamma": -1, "rounds": -2})
    text = " | ".join(err.value.errors)
    assert "method" in text and "gamma" in text and "rounds" in text


def test_unknown_and_mistyped_keys():
    with pytest.raises(ConfigError) as err:
        parse_config({"seed": "zero", "method": "fedavg", "colour": "blue", "lam": 0.3, "so": 1})
    text = " | ".join(err.value.errors)
    assert "colour: unknown key" in text
    assert "lam: unknown key" in text
    assert "seed" in text and "so" in text


def test_overrides_and_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 1, "method": "fedavg", "lambda": 0.6}))
    cfg = parse_config(path, seed=9, transport="socket")
    assert (cfg.seed, cfg.transport, cfg.lam) == (9, "socket", 0.6)


def test_bad_json_and_missing_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{")
    with pytest.raises(ConfigError, match="JSON"):
        parse_config(path)
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "missing.json")
    path.write_text("[1]")
    with pytest.raises(ConfigError):
        parse_config(path)


def test_explicit_clients_and_model():
    cfg = parse_config({
        "seed": 0, "method": "fedavg",
        "clients": [{"client_id": 3, "n_samples": 4, "image_size": [16, 16], "blob_radius_range": [2, 4]}],
        "model": [{"kind": "conv", "in": 1, "out": 1, "kernel": 3}, {"kind": "activation", "fn": "sigmoid"}],
    })
    assert cfg.client_specs()[0].client_id == 3
    assert len(cfg.model_spec()) == 2
    with pytest.raises(ConfigError, match="model"):
        parse_config({"seed": 0, "method": "fedavg", "model": [{"kind": "activation", "fn": "relu"}]})
    with pytest.raises(ConfigError, match="clients"):
        parse_config({"seed": 0, "method": "fedavg", "clients": [{"client_id": 0, "n_samples": 0}]})


def test_to_dict_round_trips():
    cfg = parse_config({"seed": 2, "method": "fedprox", "lambda": 0.2})
    again = parse_config(json.loads(cfg.to_json()))
    assert again == cfg
