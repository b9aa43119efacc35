import csv
import io
import time

import numpy as np
import pytest

from fedsoda.config import parse_config
from fedsoda.data import generate_federation
from fedsoda.fedcore import client as client_mod
from fedsoda.fedcore.client import evaluate, local_train, make_client
from fedsoda.fedcore.experiment import ROUND_HEADER, ablate, compare, run_experiment, summarize, sweep
from fedsoda.fedcore.server import Federation, RoundAborted
from fedsoda.model import build_model
from fedsoda.tensor import loss_bce_weighted

SMALL = {"num_clients": 2, "image_size": 20, "rounds": 2, "local_epochs": 1}


def small_config(**kw):
    return parse_config({"seed": 0, "method": "fedsoda", **SMALL, **kw})


def max_param_diff(a, b):
    return max(float(np.max(np.abs(x.tensors()[k].astype(np.float64) - y.tensors()[k])))
               for x, y in zip(a, b) for k in x.tensors())


def one_client(cfg, seed=0):
    ds = generate_federation(cfg.client_specs(), seed)[0]
    return make_client(ds, build_model(seed=seed), cfg)


def test_zero_epochs_returns_global_params():
    cfg = small_config()
    c = one_client(cfg)
    glob = [b.copy() for b in build_model(seed=7).blocks]
    params, metrics = local_train(c, glob, 0, "fedsoda")
    assert metrics["steps"] == 0
    assert max_param_diff(params, glob) == 0


def test_fedprox_huge_mu_stays_near_global():
    cfg = small_config(prox_mu=1e6)
    c = one_client(cfg)
    glob = [b.copy() for b in build_model(seed=7).blocks]
    params, _ = local_train(c, glob, 1, "fedprox")
    # running statistics are buffers, outside the proximal term
    for p, g in zip(params, glob):
        assert np.max(np.abs(p.weights - g.weights)) < 1e-3
        assert np.max(np.abs(p.bias - g.bias)) < 1e-3


def test_local_training_reduces_loss():
    drops = []
    for seed in range(5):
        cfg = small_config(seed=seed)
        c = one_client(cfg, seed)
        ds = c.dataset
        before, _ = loss_bce_weighted(ds.train_masks, c.model.forward_with_taps(ds.train_images, training=False)[1])
        local_train(c, [b.copy() for b in c.model.blocks], 5, "fedavg")
        after, _ = loss_bce_weighted(ds.train_masks, c.model.forward_with_taps(ds.train_images, training=False)[1])
        assert np.isfinite(after)
        drops.append(before - after)
    assert np.median(drops) > 0


def test_fedbn_keeps_local_norm_layers():
    cfg = small_config(method="fedbn")
    with Federation(cfg) as fed:
        fed.run()
        norm_idx = [i for i, b in enumerate(fed.clients[0].model.blocks) if b.is_norm]
        conv_idx = [i for i, b in enumerate(fed.clients[0].model.blocks) if not b.is_norm]
        a, b = fed.clients[0].model.blocks, fed.clients[1].model.blocks
        g = fed.server.global_params
        assert all(np.array_equal(a[i].weights, g[i].weights) for i in conv_idx)
        assert any(not np.array_equal(a[i].buffers["running_mean"], b[i].buffers["running_mean"]) for i in norm_idx)


def test_fedavg_clients_hold_global_model_after_round():
    cfg = small_config(method="fedavg")
    with Federation(cfg) as fed:
        fed.run()
        for c in fed.clients:
            assert max_param_diff(c.model.blocks, fed.server.global_params) == 0


def test_lambda_one_matches_uniform_fedavg_end_to_end():
    sod = Federation(small_config(**{"lambda": 1.0}, lsc=False))
    avg = Federation(small_config(method="fedavg", weighting="uniform"))
    with sod, avg:
        sod.run()
        avg.run()
        assert max_param_diff(sod.server.global_params, avg.server.global_params) < 1e-6


def test_similarity_reported_per_round():
    with Federation(small_config()) as fed:
        reports = fed.run()
    assert reports[0].similarity is None
    for rep in reports[1:]:
        assert rep.raw_similarity.shape == (2, 2, 6)
        np.testing.assert_allclose(rep.similarity[0, 1], 1.0)


def test_so_off_uses_gaussian_probes():
    with Federation(small_config(so=False)) as fed:
        reports = fed.run()
    assert reports[-1].similarity is not None


def test_run_is_deterministic_and_transport_independent():
    a = Federation(small_config())
    b = Federation(small_config(transport="socket"))
    with a:
        a.run()
    with b:
        b.run()
    assert a.frame_digest == b.frame_digest
    r1 = run_experiment(small_config())
    r2 = run_experiment(small_config(transport="socket"))
    assert r1.rounds_csv() == r2.rounds_csv()


def test_csv_layout_and_summary_recomputes():
    res = run_experiment(small_config(rounds=3))
    text = res.rounds_csv()
    rows = list(csv.DictReader(io.StringIO(text)))
    assert tuple(rows[0]) == ROUND_HEADER
    assert len(rows) == 2 * 4
    parsed = [{**r, "round": int(r["round"]), "dice": float(r["dice"]), "accuracy": float(r["accuracy"])} for r in rows]
    (s,) = summarize(parsed)
    (t,) = res.summary()
    assert s["avg_dice"] == pytest.approx(t["avg_dice"], abs=1e-15)
    last = [r for r in parsed if r["round"] >= 1]
    assert t["avg_dice"] == pytest.approx(sum(r["dice"] for r in last) / len(last))


def test_summary_window_is_last_five_rounds():
    rows = [{"method": "m", "round": r, "dice": float(r), "accuracy": 0.0} for r in range(10)]
    assert summarize(rows)[0]["avg_dice"] == pytest.approx(7.0)
    assert summarize(rows[:1])[0]["avg_dice"] == 0.0


def test_compare_ablate_sweep_shapes():
    cfg = small_config(rounds=1)
    assert [r["method"] for r in compare(cfg, ["fedavg", "fedsoda"]).summary()] == ["fedavg", "fedsoda"]
    assert [r["method"] for r in ablate(cfg).summary()] == ["none", "SO", "DA", "SO+DA", "SO+DA+Lsc"]
    labels = [r["method"] for r in sweep(cfg, "gamma", [0.0, 1.0]).summary()]
    assert labels == ["fedsoda[gamma=0.0]", "fedsoda[gamma=1.0]"]
    with pytest.raises(ValueError):
        sweep(cfg, "lr")
    with pytest.raises(ValueError):
        sweep(cfg, "lambda", [2.0])


def test_zero_rounds_reports_initial_evaluation():
    res = run_experiment(small_config(rounds=0))
    assert {r["round"] for r in res.rows} == {0}


def test_client_failure_aborts_round(monkeypatch):
    def broken(*args, **kwargs):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(client_mod, "local_train", broken)
    with Federation(small_config()) as fed:
        fed.start()
        with pytest.raises(RoundAborted, match="disk on fire"):
            fed.run_round()


def test_slow_client_times_out(monkeypatch):
    real = client_mod.local_train

    def slow(*args, **kwargs):
        time.sleep(1.0)
        return real(*args, **kwargs)

    monkeypatch.setattr(client_mod, "local_train", slow)
    with Federation(small_config(round_timeout=0.2, so=False)) as fed:
        fed.start()
        with pytest.raises(RoundAborted, match="within 0.2s"):
            fed.run_round()


def test_evaluate_perfect_model_scores():
    model = build_model(seed=0)
    masks = np.zeros((2, 1, 4, 4), np.float32)
    out = evaluate(model, np.zeros((2, 1, 4, 4), np.float32), masks, 0.1)
    assert set(out) == {"dice", "accuracy", "loss_ce", "loss_sc"}
    assert 0 <= out["dice"] <= 1 and 0 <= out["accuracy"] <= 1
