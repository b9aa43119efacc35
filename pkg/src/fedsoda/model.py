"""Layered fully-convolutional segmentation network with per-layer feature taps."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import ftns
from .tensor import (
    ParamBlock,
    ShapeError,
    _im2col,
    activation_backward,
    activation_forward,
    conv2d_backward,
    conv2d_forward,
    norm2d_backward,
    norm2d_forward,
)


class ModelSpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "norm" | "activation"
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    activation: str = ""

    @property
    def is_parameterized(self) -> bool:
        return self.kind in ("conv", "norm")

    @property
    def is_norm(self) -> bool:
        return self.kind == "norm"

    @classmethod
    def conv(cls, c_in: int, c_out: int, k: int) -> "LayerSpec":
        return cls("conv", c_in, c_out, k)

    @classmethod
    def norm(cls, channels: int) -> "LayerSpec":
        return cls("norm", channels, channels)

    @classmethod
    def act(cls, kind: str) -> "LayerSpec":
        return cls("activation", activation=kind)

    def to_dict(self) -> dict:
        if self.kind == "conv":
            return {"kind": "conv", "in": self.in_channels, "out": self.out_channels, "kernel": self.kernel_size}
        if self.kind == "norm":
            return {"kind": "norm", "channels": self.out_channels}
        return {"kind": "activation", "fn": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        kind = d.get("kind")
        try:
            if kind == "conv":
                return cls.conv(int(d["in"]), int(d["out"]), int(d["kernel"]))
            if kind == "norm":
                return cls.norm(int(d["channels"]))
            if kind == "activation":
                return cls.act(str(d["fn"]))
        except KeyError as exc:
            raise ModelSpecError(f"layer {d!r} is missing {exc}") from None
        raise ModelSpecError(f"unknown layer kind {kind!r}")


def default_spec() -> list[LayerSpec]:
    return [
        LayerSpec.conv(1, 8, 3), LayerSpec.norm(8), LayerSpec.act("relu"),
        LayerSpec.conv(8, 16, 3), LayerSpec.norm(16), LayerSpec.act("relu"),
        LayerSpec.conv(16, 8, 3), LayerSpec.act("relu"),
        LayerSpec.conv(8, 1, 1), LayerSpec.act("sigmoid"),
    ]


def validate_spec(spec: list[LayerSpec]) -> None:
    if not spec:
        raise ModelSpecError("model spec is empty")
    channels = None
    for i, layer in enumerate(spec):
        if layer.kind == "conv":
            if layer.in_channels < 1 or layer.out_channels < 1:
                raise ModelSpecError(f"layer {i}: conv channels must be positive")
            if layer.kernel_size < 1 or layer.kernel_size % 2 == 0:
                raise ModelSpecError(f"layer {i}: kernel size must be odd, got {layer.kernel_size}")
            if channels is not None and layer.in_channels != channels:
                raise ModelSpecError(f"layer {i}: conv expects {layer.in_channels} channels, previous layer gives {channels}")
            channels = layer.out_channels
        elif layer.kind == "norm":
            if channels is None:
                raise ModelSpecError(f"layer {i}: norm cannot be the first layer")
            if layer.out_channels != channels:
                raise ModelSpecError(f"layer {i}: norm over {layer.out_channels} channels, previous layer gives {channels}")
        elif layer.kind == "activation":
            if layer.activation not in ("relu", "sigmoid"):
                raise ModelSpecError(f"layer {i}: unknown activation {layer.activation!r}")
        else:
            raise ModelSpecError(f"layer {i}: unknown kind {layer.kind!r}")
    if spec[0].kind != "conv":
        raise ModelSpecError("first layer must be a conv")
    last = spec[-1]
    if last.kind != "activation" or last.activation != "sigmoid" or channels != 1:
        raise ModelSpecError("spec must end with a sigmoid-activated 1-channel output layer")


class LayeredModel:
    """Ordered layers; ``blocks[l]`` holds the parameters of stratified layer ``l``.

    ``forward_with_taps`` returns one feature tensor per parameterized layer:
    the output of that layer plus any activations that follow it before the
    next parameterized layer.
    """

    def __init__(self, spec: list[LayerSpec], blocks: list[ParamBlock]):
        self.spec = list(spec)
        self.blocks = blocks
        self._block_of = {}
        it = iter(blocks)
        for i, layer in enumerate(self.spec):
            if layer.is_parameterized:
                self._block_of[i] = next(it)
        self._cache: list | None = None

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    @property
    def in_channels(self) -> int:
        return self.spec[0].in_channels

    @property
    def dtype(self):
        return self.blocks[0].weights.dtype

    def kind_of_block(self, block: ParamBlock) -> str:
        for i, b in self._block_of.items():
            if b is block:
                return self.spec[i].kind
        raise KeyError(block.layer_index)

    def copy(self, dtype=None) -> "LayeredModel":
        blocks = [b.astype(dtype) if dtype is not None else b.copy() for b in self.blocks]
        return LayeredModel(self.spec, blocks)

    def forward_with_taps(self, x: np.ndarray, training: bool = False) -> tuple[list[np.ndarray], np.ndarray]:
        squeeze = x.ndim == 3
        xb = x[None] if squeeze else x
        if xb.ndim != 4 or xb.shape[1] != self.in_channels:
            raise ShapeError("model input", x.shape, ("N", self.in_channels, "H", "W"))
        xb = xb.astype(self.dtype, copy=False)
        mode = "train" if training else "eval"
        cache = []
        taps = []
        h = xb
        for i, layer in enumerate(self.spec):
            if layer.kind == "conv":
                k = layer.kernel_size
                cols = _im2col(h, k) if k > 1 else None
                out = conv2d_forward(h, self._block_of[i], cols=cols)
                cache.append((h, cols))
            elif layer.kind == "norm":
                out, nc = norm2d_forward(h, self._block_of[i], mode)
                cache.append(nc)
            else:
                out = activation_forward(h, layer.activation)
                cache.append((h, out))
            if layer.is_parameterized and i > 0:
                taps.append(h)
            h = out
        taps.append(h)
        self._cache = cache
        if squeeze:
            return [t[0] for t in taps], h[0]
        return taps, h

    def backward(self, grad: np.ndarray) -> None:
        """Backpropagate dL/dy_hat through the last forward pass into the block grads.

        The first conv skips its input gradient; nothing upstream needs it.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        g = grad[None] if grad.ndim == 3 else grad
        for i in range(len(self.spec) - 1, -1, -1):
            layer = self.spec[i]
            c = self._cache[i]
            if layer.kind == "conv":
                g = conv2d_backward(g, c[0], self._block_of[i], cols=c[1], need_input_grad=i > 0)
            elif layer.kind == "norm":
                g = norm2d_backward(g, c, self._block_of[i])
            else:
                g = activation_backward(g, c[0], c[1], layer.activation)

    def zero_grad(self) -> None:
        for b in self.blocks:
            b.zero_grad()


def build_model(spec: list[LayerSpec] | None = None, seed: int = 0, dtype=np.float32) -> LayeredModel:
    """He-uniform conv weights drawn from ``seed``; zero biases; norm scale 1, shift 0."""
    spec = default_spec() if spec is None else list(spec)
    validate_spec(spec)
    rng = np.random.default_rng(seed)
    blocks = []
    for layer in spec:
        if not layer.is_parameterized:
            continue
        idx = len(blocks)
        if layer.kind == "conv":
            k = layer.kernel_size
            fan_in = layer.in_channels * k * k
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(layer.out_channels, layer.in_channels, k, k)).astype(dtype)
            blocks.append(ParamBlock(idx, w, np.zeros(layer.out_channels, dtype=dtype)))
        else:
            c = layer.out_channels
            blocks.append(ParamBlock(
                idx, np.ones(c, dtype=dtype), np.zeros(c, dtype=dtype),
                buffers={"running_mean": np.zeros(c, dtype=dtype), "running_var": np.ones(c, dtype=dtype)},
                is_norm=True,
            ))
    return LayeredModel(spec, blocks)


def forward_with_taps(model: LayeredModel, x: np.ndarray, training: bool = False):
    return model.forward_with_taps(x, training=training)


def params_flatten(model: LayeredModel) -> list[ParamBlock]:
    """The model's own blocks, in stratified-layer order (views, not copies)."""
    return model.blocks


def params_load(model: LayeredModel, blocks: list[ParamBlock], skip_norm: bool = False) -> None:
    """Copy values from ``blocks`` into ``model``. ``skip_norm`` keeps local norm layers (FedBN)."""
    if len(blocks) != len(model.blocks):
        raise ShapeError("params_load layer count", (len(blocks),), (len(model.blocks),))
    for dst, src in zip(model.blocks, blocks):
        for name, arr in dst.tensors().items():
            other = src.tensors().get(name)
            if other is None or other.shape != arr.shape:
                raise ShapeError(f"params_load layer {dst.layer_index} {name}",
                                 () if other is None else other.shape, arr.shape)
    for dst, src in zip(model.blocks, blocks):
        if skip_norm and dst.is_norm:
            continue
        for name, arr in dst.tensors().items():
            arr[...] = src.tensors()[name]


# ---------------------------------------------------------------------------
# serialization: u32 manifest length | JSON manifest | concatenated FTNS tensors


def encode_params(blocks: list[ParamBlock], spec: list[LayerSpec] | None = None) -> bytes:
    manifest = {"layers": []}
    if spec is not None:
        manifest["spec"] = [s.to_dict() for s in spec]
    body = []
    for b in blocks:
        entry = {"index": b.layer_index, "is_norm": b.is_norm, "tensors": []}
        for name, arr in b.tensors().items():
            entry["tensors"].append({"name": name, "shape": list(arr.shape)})
            body.append(ftns.dumps(arr))
        manifest["layers"].append(entry)
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<I", len(head)) + head + b"".join(body)


def decode_params(buf: bytes) -> tuple[list[ParamBlock], list[LayerSpec] | None]:
    buf = memoryview(buf)
    if len(buf) < 4:
        raise ftns.FTNSError("truncated parameter manifest")
    (n,) = struct.unpack_from("<I", buf, 0)
    if len(buf) < 4 + n:
        raise ftns.FTNSError("truncated parameter manifest")
    try:
        manifest = json.loads(bytes(buf[4:4 + n]))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ftns.FTNSError(f"bad parameter manifest: {exc}") from None
    pos = 4 + n
    blocks = []
    for entry in manifest["layers"]:
        arrays = {}
        for t in entry["tensors"]:
            arr, pos = ftns.loads_from(buf, pos)
            if list(arr.shape) != t["shape"]:
                raise ftns.FTNSError(f"layer {entry['index']} {t['name']}: manifest shape {t['shape']} != {list(arr.shape)}")
            arrays[t["name"]] = arr
        w = arrays.pop("weights")
        b = arrays.pop("bias")
        blocks.append(ParamBlock(entry["index"], w, b, buffers=arrays, is_norm=entry["is_norm"]))
    if pos != len(buf):
        raise ftns.FTNSError(f"{len(buf) - pos} trailing bytes after parameters")
    spec = [LayerSpec.from_dict(d) for d in manifest["spec"]] if "spec" in manifest else None
    return blocks, spec


def save_checkpoint(model: LayeredModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_params(model.blocks, model.spec))


def load_checkpoint(path) -> LayeredModel:
    with open(path, "rb") as fh:
        blocks, spec = decode_params(fh.read())
    if spec is None:
        raise ModelSpecError("checkpoint carries no layer spec")
    validate_spec(spec)
    return LayeredModel(spec, blocks)
