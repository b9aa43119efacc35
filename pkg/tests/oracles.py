"""Plain-loop reference implementations shared by the unit and acceptance tests.

These are written directly from the aggregation formulas, one scalar at a
time, with no numpy vector algebra, so they fail independently of the
vectorized code under test.
"""

import math
import random

import numpy as np

from fedsoda.tensor import ParamBlock


def layerwise_aggregate_scalar(params, s_hat, lam):
    """params[k][l] is a flat list of floats; s_hat[k][j][l] nested lists.

    w[l][i] = 1/m * sum_k ( lam * p_k[l][i] + (1 - lam) * sum_{j != k} s[k][j][l] * p_j[l][i] )
    """
    m = len(params)
    n_layers = len(params[0])
    out = []
    for l in range(n_layers):
        size = len(params[0][l])
        layer = []
        for i in range(size):
            total = 0.0
            for k in range(m):
                inner = 0.0
                for j in range(m):
                    if j != k:
                        inner += s_hat[k][j][l] * params[j][l][i]
                total += lam * params[k][l][i] + (1.0 - lam) * inner
            layer.append(total / m)
        out.append(layer)
    return out


def normalize_scalar(raw):
    """Clamp to [0, 1], zero the diagonal, normalize over j != k, uniform fallback."""
    m = len(raw)
    n_layers = len(raw[0][0])
    out = [[[0.0] * n_layers for _ in range(m)] for _ in range(m)]
    for k in range(m):
        for l in range(n_layers):
            vals = {j: min(1.0, max(0.0, raw[k][j][l])) for j in range(m) if j != k}
            total = sum(vals.values())
            for j, v in vals.items():
                out[k][j][l] = v / total if total > 0 else 1.0 / (m - 1)
    return out


def random_instance(seed, m=None, n_layers=None):
    """Random client parameters (flat per layer) and a normalized similarity cube."""
    rnd = random.Random(seed)
    m = m or rnd.randint(2, 5)
    n_layers = n_layers or rnd.randint(1, 4)
    sizes = [rnd.randint(1, 50) for _ in range(n_layers)]
    params = [[[rnd.uniform(-3, 3) for _ in range(sizes[l])] for l in range(n_layers)] for _ in range(m)]
    raw = [[[rnd.uniform(-0.5, 1.2) for _ in range(n_layers)] for _ in range(m)] for _ in range(m)]
    s_hat = normalize_scalar(raw)
    lam = rnd.random()
    return params, s_hat, lam


def to_blocks(params):
    """Flat per-layer lists -> ParamBlock lists (last value of each layer becomes the bias)."""
    clients = []
    for client in params:
        blocks = []
        for l, flat in enumerate(client):
            arr = np.array(flat, dtype=np.float64)
            blocks.append(ParamBlock(l, arr[:-1].copy() if arr.size > 1 else np.zeros(0), arr[-1:].copy()))
        clients.append(blocks)
    return clients


def from_blocks(blocks):
    return [list(np.concatenate([b.weights.ravel(), b.bias.ravel()])) for b in blocks]


def max_abs_diff(a, b):
    return max(abs(x - y) for la, lb in zip(a, b) for x, y in zip(la, lb))


LN2 = math.log(2.0)
