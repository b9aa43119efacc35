"""Server-side aggregation rules.

Similarity cubes are indexed ``[k, j, l]``: probe owner ``k``, evaluated
model ``j``, stratified layer ``l``.
"""

from __future__ import annotations

import logging

import numpy as np

from ..model import LayeredModel
from ..tensor import ParamBlock, ShapeError

log = logging.getLogger(__name__)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _check_structure(client_blocks: list[list[ParamBlock]]) -> int:
    if not client_blocks:
        raise ValueError("no client parameters to aggregate")
    n_layers = len(client_blocks[0])
    for k, blocks in enumerate(client_blocks):
        if len(blocks) != n_layers:
            raise ShapeError(f"client {k} layer count", (len(blocks),), (n_layers,))
        for b, ref in zip(blocks, client_blocks[0]):
            for name, arr in ref.tensors().items():
                other = b.tensors().get(name)
                if other is None or other.shape != arr.shape:
                    raise ShapeError(f"client {k} layer {ref.layer_index} {name}",
                                     () if other is None else other.shape, arr.shape)
    return n_layers


def layer_features(model: LayeredModel, probe: np.ndarray) -> list[np.ndarray]:
    """Eval-mode taps for ``probe``, averaged over the probe batch and flattened."""
    taps, _ = model.forward_with_taps(probe, training=False)
    return [t.mean(axis=0, dtype=np.float64).ravel() for t in taps]


def cross_assess(models: list[LayeredModel], probes: list[np.ndarray]) -> np.ndarray:
    """raw[k, j, l] = cos(f_l(model_k, probe_k), f_l(model_j, probe_k)); diagonal is 1."""
    m = len(models)
    if m != len(probes):
        raise ValueError(f"{m} models but {len(probes)} probes")
    _check_structure([mod.blocks for mod in models])
    specs = {tuple(mod.spec) for mod in models}
    if len(specs) != 1:
        raise ValueError("client models differ in layer structure")
    n_layers = models[0].num_layers
    raw = np.zeros((m, m, n_layers))
    for k in range(m):
        own = layer_features(models[k], probes[k])
        for j in range(m):
            if j == k:
                raw[k, k, :] = 1.0
                continue
            other = layer_features(models[j], probes[k])
            for l in range(n_layers):
                raw[k, j, l] = _cosine(own[l], other[l])
    return raw


def normalize_similarity(raw: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and normalize each (k, l) row over j != k.

    Rows whose clamped off-diagonal entries are all zero fall back to
    uniform 1/(m-1). The diagonal of the result is zero.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[0] != raw.shape[1]:
        raise ShapeError("similarity cube", raw.shape, ("m", "m", "L"))
    if not np.all(np.isfinite(raw)):
        raise ValueError("similarity cube contains non-finite values")
    m = raw.shape[0]
    s = np.clip(raw, 0.0, 1.0)
    off = ~np.eye(m, dtype=bool)[:, :, None]
    s = np.where(off, s, 0.0)
    if m == 1:
        return s
    totals = s.sum(axis=1, keepdims=True)
    uniform = np.where(off, 1.0 / (m - 1), 0.0)
    safe = np.where(totals > 0, totals, 1.0)
    return np.where(totals > 0, s / safe, uniform)


def weighted_sum(layer_blocks: list[ParamBlock], coefs) -> ParamBlock:
    """Per-tensor sum of ``coefs[j] * block_j`` accumulated in float64."""
    ref = layer_blocks[0]
    out = {}
    for name, arr in ref.tensors().items():
        acc = np.zeros(arr.shape, dtype=np.float64)
        for c, b in zip(coefs, layer_blocks):
            acc += float(c) * b.tensors()[name].astype(np.float64)
        out[name] = acc.astype(arr.dtype)
    w = out.pop("weights")
    bias = out.pop("bias")
    return ParamBlock(ref.layer_index, w, bias, buffers=out, is_norm=ref.is_norm)


def dynamic_coefficients(s_hat: np.ndarray, lam: float) -> np.ndarray:
    """c[j, l] such that the layer-l aggregate is sum_j c[j, l] * p_j.

    Expands (1/m) sum_k [lam p_k + (1-lam) sum_{j!=k} s_hat[k,j,l] p_j].
    """
    m = s_hat.shape[0]
    off = ~np.eye(m, dtype=bool)[:, :, None]
    incoming = np.where(off, s_hat, 0.0).sum(axis=0)  # [j, l]
    return (lam + (1.0 - lam) * incoming) / m


def dynamic_aggregate(client_blocks: list[list[ParamBlock]], s_hat: np.ndarray, lam: float) -> list[ParamBlock]:
    """Layer-by-layer similarity-weighted aggregation of client parameters."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    n_layers = _check_structure(client_blocks)
    m = len(client_blocks)
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s_hat.shape != (m, m, n_layers):
        raise ShapeError("normalized similarity", s_hat.shape, (m, m, n_layers))
    if m == 1:
        log.warning("single client: returning its parameters unchanged")
        return [b.copy() for b in client_blocks[0]]
    coefs = dynamic_coefficients(s_hat, lam)
    return [weighted_sum([blocks[l] for blocks in client_blocks], coefs[:, l]) for l in range(n_layers)]


def fedavg_aggregate(client_blocks: list[list[ParamBlock]], counts=None) -> list[ParamBlock]:
    """Sample-count weighted mean; ``counts=None`` weights clients equally."""
    n_layers = _check_structure(client_blocks)
    m = len(client_blocks)
    counts = np.ones(m) if counts is None else np.asarray(counts, dtype=np.float64)
    if counts.shape != (m,) or np.any(counts < 0) or counts.sum() <= 0:
        raise ValueError(f"invalid sample counts {counts}")
    coefs = counts / counts.sum()
    return [weighted_sum([blocks[l] for blocks in client_blocks], coefs) for l in range(n_layers)]


def pairwise_aggregate(client_blocks: list[list[ParamBlock]], s_hat: np.ndarray, lam: float,
                       counts=None) -> list[ParamBlock]:
    """FedAvg whose per-client weight is modulated by layer-averaged similarity.

    Used when cross-assessment is on but layer-wise aggregation is off: every
    layer shares one coefficient per client, ``n_j * a_j`` renormalized, where
    ``a_j`` is the dynamic coefficient computed from the layer-mean similarity.
    """
    n_layers = _check_structure(client_blocks)
    m = len(client_blocks)
    if m == 1:
        return [b.copy() for b in client_blocks[0]]
    mean_s = np.asarray(s_hat, dtype=np.float64).mean(axis=2, keepdims=True)
    a = dynamic_coefficients(mean_s, lam)[:, 0]
    counts = np.ones(m) if counts is None else np.asarray(counts, dtype=np.float64)
    coefs = counts * a
    coefs = coefs / coefs.sum()
    return [weighted_sum([blocks[l] for blocks in client_blocks], coefs) for l in range(n_layers)]
