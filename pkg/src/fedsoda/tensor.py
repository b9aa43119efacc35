"""Numeric primitives: conv/norm/activation layers with hand-written backward
passes, weighted BCE, Adam, and a finite-difference gradient checker.

Tensors are plain ``numpy.ndarray`` objects. Training runs in float32; pass
``dtype=np.float64`` where tight oracles are needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

VARIANCE_FLOOR = 1e-5
PROB_CLAMP = 1e-7
NORM_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised when two tensors that must agree in shape do not."""

    def __init__(self, what: str, got, expected):
        self.got = tuple(got)
        self.expected = tuple(expected)
        super().__init__(f"{what}: got shape {self.got}, expected {self.expected}")


@dataclass
class ParamBlock:
    """Parameters of one parameterized layer plus their gradients.

    Norm layers also carry running statistics in ``buffers``; those are
    aggregated like parameters but never receive gradients.
    """

    layer_index: int
    weights: np.ndarray
    bias: np.ndarray
    grad_weights: np.ndarray = None
    grad_bias: np.ndarray = None
    buffers: dict = field(default_factory=dict)
    is_norm: bool = False

    def __post_init__(self):
        if self.grad_weights is None:
            self.grad_weights = np.zeros_like(self.weights)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"weights": self.weights, "bias": self.bias}
        out.update(self.buffers)
        return out

    def zero_grad(self) -> None:
        self.grad_weights[...] = 0
        self.grad_bias[...] = 0

    def copy(self) -> "ParamBlock":
        return ParamBlock(
            layer_index=self.layer_index,
            weights=self.weights.copy(),
            bias=self.bias.copy(),
            buffers={k: v.copy() for k, v in self.buffers.items()},
            is_norm=self.is_norm,
        )

    def astype(self, dtype) -> "ParamBlock":
        return ParamBlock(
            layer_index=self.layer_index,
            weights=self.weights.astype(dtype),
            bias=self.bias.astype(dtype),
            buffers={k: v.astype(dtype) for k, v in self.buffers.items()},
            is_norm=self.is_norm,
        )


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError("expected [C,H,W] or [N,C,H,W] input", x.shape, ("N", "C", "H", "W"))


# ---------------------------------------------------------------------------
# convolution (stride 1, same padding)


def _im2col(xb: np.ndarray, k: int) -> np.ndarray:
    """[N,C,H,W] -> [C, k*k, N, H, W] columns of the zero-padded input."""
    n, c, h, w = xb.shape
    p = k // 2
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))).transpose(1, 0, 2, 3)
    cols = np.empty((c, k * k, n, h, w), dtype=xb.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i * k + j] = xp[:, :, i:i + h, j:j + w]
    return cols


def _check_kernel(w: np.ndarray) -> None:
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError("conv kernel must be [C_out, C_in, k, k] with odd k", w.shape, ("C_out", "C_in", "k", "k"))


def conv2d_forward(x: np.ndarray, block: ParamBlock, cols: np.ndarray | None = None) -> np.ndarray:
    """Same-padded stride-1 cross-correlation. Accepts [C,H,W] or [N,C,H,W].

    ``cols`` may carry a precomputed column buffer from ``_im2col``.
    """
    w = block.weights
    _check_kernel(w)
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != w.shape[1]:
        raise ShapeError("conv input channels do not match kernel", xb.shape, (xb.shape[0], w.shape[1]) + xb.shape[2:])
    n, c, h, wd = xb.shape
    c_out, k = w.shape[0], w.shape[2]
    if k == 1:
        flat = xb.transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        if cols is None:
            cols = _im2col(xb, k)
        flat = cols.reshape(c * k * k, -1)
    out = w.reshape(c_out, -1) @ flat + block.bias.reshape(-1, 1)
    out = np.ascontiguousarray(out.reshape(c_out, n, h, wd).transpose(1, 0, 2, 3))
    return out[0] if squeeze else out


def conv2d_backward(grad_out: np.ndarray, cached_input: np.ndarray | None, block: ParamBlock,
                    cols: np.ndarray | None = None, need_input_grad: bool = True) -> np.ndarray | None:
    """Accumulate kernel/bias gradients into ``block`` and return dL/dinput.

    The input gradient is the same-padded correlation of ``grad_out`` with
    the spatially flipped, channel-transposed kernel.
    """
    if cached_input is None:
        raise RuntimeError(f"conv layer {block.layer_index}: backward called without a forward cache")
    xb, squeeze = _as_batch(cached_input)
    gb, _ = _as_batch(grad_out)
    w = block.weights
    n, c, h, wd = xb.shape
    c_out, k = w.shape[0], w.shape[2]
    expected = (n, c_out, h, wd)
    if gb.shape != expected:
        raise ShapeError("conv grad_out does not match forward output", gb.shape, expected)
    g2 = gb.transpose(1, 0, 2, 3).reshape(c_out, -1)
    block.grad_bias += g2.sum(axis=1)
    if k == 1:
        flat = xb.transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        flat = (cols if cols is not None else _im2col(xb, k)).reshape(c * k * k, -1)
    block.grad_weights += (g2 @ flat.T).reshape(w.shape)
    if not need_input_grad:
        return None
    if k == 1:
        gin = (w.reshape(c_out, c).T @ g2).reshape(c, n, h, wd)
    else:
        w_rev = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
        gin = (w_rev @ _im2col(gb, k).reshape(c_out * k * k, -1)).reshape(c, n, h, wd)
    gin = np.ascontiguousarray(gin.transpose(1, 0, 2, 3))
    return gin[0] if squeeze else gin


# ---------------------------------------------------------------------------
# activations


def activation_forward(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        # split by sign to avoid overflow in exp
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(grad_out: np.ndarray, x: np.ndarray, out: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "sigmoid":
        return grad_out * out * (1 - out)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# per-channel normalization


@dataclass
class NormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    floored: np.ndarray
    training: bool


def norm2d_forward(x: np.ndarray, block: ParamBlock, mode: str = "train") -> tuple[np.ndarray, NormCache]:
    """Batch normalization over (N, H, W) per channel.

    ``mode="train"`` uses batch statistics and folds them into the running
    stats; ``mode="eval"`` uses the running stats. Variance is floored at
    ``VARIANCE_FLOOR`` rather than offset by it.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    xb, squeeze = _as_batch(x)
    c = block.weights.shape[0]
    if xb.shape[1] != c:
        raise ShapeError("norm input channels", xb.shape, (xb.shape[0], c) + xb.shape[2:])
    if mode == "train":
        mean = xb.mean(axis=(0, 2, 3))
        var = xb.var(axis=(0, 2, 3))
        rm, rv = block.buffers["running_mean"], block.buffers["running_var"]
        rm *= NORM_MOMENTUM
        rm += (1 - NORM_MOMENTUM) * mean.astype(rm.dtype)
        rv *= NORM_MOMENTUM
        rv += (1 - NORM_MOMENTUM) * var.astype(rv.dtype)
    else:
        mean = block.buffers["running_mean"]
        var = block.buffers["running_var"]
    floored = var < VARIANCE_FLOOR
    inv_std = 1.0 / np.sqrt(np.maximum(var, VARIANCE_FLOOR))
    xhat = (xb - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = xhat * block.weights.reshape(1, -1, 1, 1) + block.bias.reshape(1, -1, 1, 1)
    out = out.astype(np.result_type(xb.dtype, block.weights.dtype), copy=False)
    cache = NormCache(xhat=xhat, inv_std=inv_std, floored=floored, training=mode == "train")
    return (out[0] if squeeze else out), cache


def norm2d_backward(grad_out: np.ndarray, cache: NormCache | None, block: ParamBlock) -> np.ndarray:
    if cache is None:
        raise RuntimeError(f"norm layer {block.layer_index}: backward called without a forward cache")
    gb, squeeze = _as_batch(grad_out)
    if gb.shape != cache.xhat.shape:
        raise ShapeError("norm grad_out does not match forward output", gb.shape, cache.xhat.shape)
    axes = (0, 2, 3)
    block.grad_weights += (gb * cache.xhat).sum(axis=axes)
    block.grad_bias += gb.sum(axis=axes)
    gxhat = gb * block.weights.reshape(1, -1, 1, 1)
    inv_std = cache.inv_std.reshape(1, -1, 1, 1)
    if not cache.training:
        gin = gxhat * inv_std
    else:
        mean_g = gxhat.mean(axis=axes, keepdims=True)
        mean_gx = (gxhat * cache.xhat).mean(axis=axes, keepdims=True)
        # floored channels: variance is a constant, so only the mean term remains
        keep_var = (~cache.floored).reshape(1, -1, 1, 1)
        gin = inv_std * (gxhat - mean_g - keep_var * cache.xhat * mean_gx)
    return gin[0] if squeeze else gin


# ---------------------------------------------------------------------------
# loss


def loss_bce_weighted(y: np.ndarray, y_hat: np.ndarray, w: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean over pixels of ``w * BCE(y, y_hat)`` and its gradient w.r.t. ``y_hat``.

    ``y_hat`` is clamped to ``[1e-7, 1 - 1e-7]``; the gradient is zero where
    the clamp is active.
    """
    if y.shape != y_hat.shape:
        raise ShapeError("loss target/prediction", y_hat.shape, y.shape)
    if w is None:
        w = np.ones_like(y_hat)
    elif w.shape != y.shape:
        raise ShapeError("loss weight", w.shape, y.shape)
    p = np.clip(y_hat, PROB_CLAMP, 1 - PROB_CLAMP)
    n = y.size
    per_pixel = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    loss = float(np.sum(w * per_pixel, dtype=np.float64) / n)
    grad = w * (-y / p + (1 - y) / (1 - p)) / n
    grad = np.where((y_hat > PROB_CLAMP) & (y_hat < 1 - PROB_CLAMP), grad, 0).astype(y_hat.dtype, copy=False)
    return loss, grad


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    step: int = 0
    moments: dict = field(default_factory=dict)


def adam_step(blocks: list[ParamBlock], state: AdamState) -> None:
    """One bias-corrected Adam update over every block; gradients are zeroed after."""
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for block in blocks:
        for name, param, grad in (("weights", block.weights, block.grad_weights), ("bias", block.bias, block.grad_bias)):
            key = (block.layer_index, name)
            if key not in state.moments:
                state.moments[key] = (np.zeros_like(param), np.zeros_like(param))
            m, v = state.moments[key]
            m *= state.beta1
            m += (1 - state.beta1) * grad
            v *= state.beta2
            v += (1 - state.beta2) * grad * grad
            param -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(param.dtype, copy=False)
        block.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class LayerCheck:
    layer_index: int
    kind: str
    checked: int
    max_error: float
    failures: list = field(default_factory=list)
    skipped: int = 0  # coordinates whose perturbation crossed a relu kink

    @property
    def passed(self) -> bool:
        return not self.failures


@dataclass
class GradCheckReport:
    layers: list[LayerCheck]
    tol: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.layers)

    def failing_layers(self) -> list[int]:
        return [c.layer_index for c in self.layers if not c.passed]

    def by_kind(self) -> dict[str, bool]:
        out: dict[str, bool] = {}
        for c in self.layers:
            out[c.kind] = out.get(c.kind, True) and c.passed
        return out

    def format(self) -> str:
        lines = []
        for c in self.layers:
            status = "PASS" if c.passed else "FAIL"
            lines.append(
                f"{status} layer {c.layer_index} ({c.kind}): {c.checked} coords, max rel err {c.max_error:.3e}"
                + (f", {c.skipped} skipped at relu kinks" if c.skipped else "")
            )
            for where, a, n in c.failures[:5]:
                lines.append(f"    {where}: analytic {a:.6e} vs numeric {n:.6e}")
        return "\n".join(lines)


def grad_check(model, x: np.ndarray, target: np.ndarray, h: float = 1e-4, tol: float = 1e-4,
               n_coords: int = 200, seed: int = 0) -> GradCheckReport:
    """Compare analytic parameter gradients against central differences.

    Works on a float64 copy of ``model``; up to ``n_coords`` coordinates are
    sampled per layer (all of them when the layer is smaller). The model is
    run in train mode so batch statistics are part of the checked graph.
    A coordinate whose +-h evaluations flip the sign of any relu input has no
    valid central difference; it is skipped and replaced by another sample.
    """
    m = model.copy(dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    rng = np.random.default_rng(seed)
    saved = [{k: v.copy() for k, v in b.buffers.items()} for b in m.blocks]
    relu_at = [i for i, layer in enumerate(m.spec) if layer.kind == "activation" and layer.activation == "relu"]

    def restore_buffers():
        for b, buf in zip(m.blocks, saved):
            for k, v in buf.items():
                b.buffers[k][...] = v

    def relu_pattern() -> list[np.ndarray]:
        return [m._cache[i][0] > 0 for i in relu_at]

    def loss_at() -> tuple[float, list[np.ndarray]]:
        _, y_hat = m.forward_with_taps(x, training=True)
        restore_buffers()
        return loss_bce_weighted(target, y_hat)[0], relu_pattern()

    for b in m.blocks:
        b.zero_grad()
    _, y_hat = m.forward_with_taps(x, training=True)
    restore_buffers()
    base_pattern = relu_pattern()
    _, g = loss_bce_weighted(target, y_hat)
    m.backward(g)

    def same(pattern):
        return all(np.array_equal(a, b) for a, b in zip(pattern, base_pattern))

    results = []
    for b in m.blocks:
        coords = [("weights", i) for i in range(b.weights.size)] + [("bias", i) for i in range(b.bias.size)]
        order = rng.permutation(len(coords))
        check = LayerCheck(layer_index=b.layer_index, kind=m.kind_of_block(b), checked=0, max_error=0.0)
        for pick in order:
            if check.checked >= n_coords:
                break
            name, i = coords[pick]
            param = getattr(b, name).reshape(-1)
            analytic = float((b.grad_weights if name == "weights" else b.grad_bias).reshape(-1)[i])
            orig = param[i]
            param[i] = orig + h
            lp, pat_p = loss_at()
            param[i] = orig - h
            lm, pat_m = loss_at()
            param[i] = orig
            if not (same(pat_p) and same(pat_m)):
                check.skipped += 1
                continue
            numeric = (lp - lm) / (2 * h)
            err = abs(analytic - numeric) / max(1.0, abs(analytic))
            check.checked += 1
            check.max_error = max(check.max_error, err)
            if not err < tol or not math.isfinite(err):
                check.failures.append((f"{name}[{i}]", analytic, numeric))
        results.append(check)
    return GradCheckReport(layers=results, tol=tol)
