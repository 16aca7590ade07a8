"""Minimal feed-forward network stack with hand-written reverse mode.

Layers are plain dataclass specs; a model is the spec list plus per-layer
parameter and gradient buffers. Forward passes can record activations so a
later backward pass, seeded with a loss gradient on the logits, can fill
d(loss)/d(param) for every parameter. Training runs in float32 by default;
build with float64 when checking gradients against finite differences.

A ModelGraph is mutable (parameters, gradients, recorded activations) and
belongs to one training thread at a time, though it may be handed off
between threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2d:
    size: int


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Dense, Conv2d, ReLU, MaxPool2d, Flatten]


def parse_layer_spec(text: str) -> list[LayerSpec]:
    """Parse a whitespace-separated layer string.

    Grammar: ``dense(in,out)``, ``conv(in,out,k[,stride[,pad]])``, ``relu``,
    ``maxpool(k)``, ``flatten``. Example:
    ``dense(16,64) relu dense(64,10)``.
    """
    layers: list[LayerSpec] = []
    for token in text.split():
        name, _, rest = token.partition("(")
        args = []
        if rest:
            if not rest.endswith(")"):
                raise ValueError(f"malformed layer token {token!r}")
            args = [int(a) for a in rest[:-1].split(",") if a]
        try:
            if name == "dense":
                layers.append(Dense(*args))
            elif name == "conv":
                layers.append(Conv2d(*args))
            elif name == "relu":
                layers.append(ReLU(*args))
            elif name == "maxpool":
                layers.append(MaxPool2d(*args))
            elif name == "flatten":
                layers.append(Flatten(*args))
            else:
                raise ValueError(f"unknown layer {name!r} in {token!r}")
        except TypeError as exc:
            raise ValueError(f"bad arguments in layer token {token!r}") from exc
    if not layers:
        raise ValueError("empty layer spec")
    return layers


def format_layer_spec(layers: list[LayerSpec]) -> str:
    """Inverse of parse_layer_spec."""
    parts = []
    for layer in layers:
        if isinstance(layer, Dense):
            parts.append(f"dense({layer.in_features},{layer.out_features})")
        elif isinstance(layer, Conv2d):
            parts.append(
                f"conv({layer.in_channels},{layer.out_channels},{layer.kernel_size},"
                f"{layer.stride},{layer.padding})"
            )
        elif isinstance(layer, ReLU):
            parts.append("relu")
        elif isinstance(layer, MaxPool2d):
            parts.append(f"maxpool({layer.size})")
        elif isinstance(layer, Flatten):
            parts.append("flatten")
        else:
            raise TypeError(f"unknown layer type {type(layer).__name__}")
    return " ".join(parts)


@dataclass
class ModelGraph:
    layers: list[LayerSpec]
    params: list[dict[str, np.ndarray]]
    grads: list[dict[str, np.ndarray]]
    dtype: np.dtype
    _cache: list | None = field(default=None, repr=False)

    def param_count(self) -> int:
        return sum(t.size for layer in self.params for t in layer.values())


def _static_check(layers: list[LayerSpec]) -> None:
    """Reject adjacent layers whose feature counts cannot compose.

    Only statically decidable mismatches are caught here (dense widths,
    conv channels, dense feeding conv); spatial sizes are checked against
    the actual input at forward time.
    """
    prev_kind, prev_n, prev_idx = None, None, None
    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            if prev_kind == "flat" and prev_n != layer.in_features:
                raise ValueError(
                    f"layer {prev_idx} feeds {prev_n} features but layer {i} "
                    f"({format_layer_spec([layer])}) expects {layer.in_features}"
                )
            if prev_kind == "image":
                raise ValueError(
                    f"layer {i} ({format_layer_spec([layer])}) cannot follow the "
                    f"image output of layer {prev_idx}; add flatten between them"
                )
            prev_kind, prev_n, prev_idx = "flat", layer.out_features, i
        elif isinstance(layer, Conv2d):
            if prev_kind == "image" and prev_n != layer.in_channels:
                raise ValueError(
                    f"layer {prev_idx} feeds {prev_n} channels but layer {i} "
                    f"({format_layer_spec([layer])}) expects {layer.in_channels}"
                )
            if prev_kind == "flat":
                raise ValueError(
                    f"layer {i} ({format_layer_spec([layer])}) cannot follow the "
                    f"flat output of layer {prev_idx}"
                )
            prev_kind, prev_n, prev_idx = "image", layer.out_channels, i
        elif isinstance(layer, Flatten):
            prev_kind, prev_n, prev_idx = None, None, i
        # relu and maxpool preserve whatever shape they get


def build_model(spec, seed: int, dtype=np.float32) -> ModelGraph:
    """Initialize a model: He-uniform weights (bound sqrt(6/fan_in)), zero biases.

    ``spec`` is a layer list or a layer string. Deterministic given the seed.
    """
    layers = parse_layer_spec(spec) if isinstance(spec, str) else list(spec)
    _static_check(layers)
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    params: list[dict[str, np.ndarray]] = []
    grads: list[dict[str, np.ndarray]] = []
    for layer in layers:
        if isinstance(layer, Dense):
            bound = np.sqrt(6.0 / layer.in_features)
            w = rng.uniform(-bound, bound, size=(layer.in_features, layer.out_features))
            b = np.zeros(layer.out_features)
        elif isinstance(layer, Conv2d):
            fan_in = layer.in_channels * layer.kernel_size * layer.kernel_size
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(
                -bound,
                bound,
                size=(layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size),
            )
            b = np.zeros(layer.out_channels)
        else:
            params.append({})
            grads.append({})
            continue
        params.append({"w": w.astype(dtype), "b": b.astype(dtype)})
        grads.append({"w": np.zeros_like(params[-1]["w"]), "b": np.zeros_like(params[-1]["b"])})
    return ModelGraph(layers=layers, params=params, grads=grads, dtype=dtype)


def _conv_forward(x, w, b, stride, padding):
    m, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        h, wd = h + 2 * padding, wd + 2 * padding
    h_out = (h - kh) // stride + 1
    w_out = (wd - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(f"conv kernel {kh}x{kw} does not fit input {h}x{wd}")
    y = np.zeros((m, c_out, h_out, w_out), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = x[:, :, u : u + stride * h_out : stride, v : v + stride * w_out : stride]
            y += np.einsum("mcij,oc->moij", patch, w[:, :, u, v])
    return y + b[np.newaxis, :, np.newaxis, np.newaxis], x


def _conv_backward(grad, x_padded, w, stride, padding, in_shape):
    m, c_out, h_out, w_out = grad.shape
    _, _, kh, kw = w.shape
    dw = np.zeros_like(w)
    db = grad.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x_padded)
    for u in range(kh):
        for v in range(kw):
            patch = x_padded[:, :, u : u + stride * h_out : stride, v : v + stride * w_out : stride]
            dw[:, :, u, v] = np.einsum("moij,mcij->oc", grad, patch)
            dx[:, :, u : u + stride * h_out : stride, v : v + stride * w_out : stride] += np.einsum(
                "moij,oc->mcij", grad, w[:, :, u, v]
            )
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    assert dx.shape == in_shape
    return dx, dw, db


def forward(model: ModelGraph, inputs, record: bool = False) -> np.ndarray:
    """Run the model on a batch; with record=True keep activations for backward."""
    x = np.asarray(inputs, dtype=model.dtype)
    cache: list = [] if record else None
    model._cache = None
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Dense):
            if x.ndim != 2 or x.shape[1] != layer.in_features:
                raise ValueError(
                    f"layer {i} expects (M, {layer.in_features}) input, got {x.shape}"
                )
            p = model.params[i]
            out = x @ p["w"] + p["b"]
            if record:
                cache.append(x)
            x = out
        elif isinstance(layer, Conv2d):
            if x.ndim != 4 or x.shape[1] != layer.in_channels:
                raise ValueError(
                    f"layer {i} expects (M, {layer.in_channels}, H, W) input, got {x.shape}"
                )
            p = model.params[i]
            out, x_padded = _conv_forward(x, p["w"], p["b"], layer.stride, layer.padding)
            if record:
                cache.append((x_padded, x.shape))
            x = out
        elif isinstance(layer, ReLU):
            if record:
                cache.append(x)
            x = np.maximum(x, 0)
        elif isinstance(layer, MaxPool2d):
            s = layer.size
            m, c, h, w = x.shape
            if h % s or w % s:
                raise ValueError(f"maxpool({s}) needs H, W divisible by {s}, got {h}x{w}")
            windows = x.reshape(m, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5)
            windows = windows.reshape(m, c, h // s, w // s, s * s)
            arg = np.argmax(windows, axis=-1)
            if record:
                cache.append((arg, x.shape))
            x = np.take_along_axis(windows, arg[..., np.newaxis], axis=-1)[..., 0]
        elif isinstance(layer, Flatten):
            if record:
                cache.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        else:
            raise TypeError(f"unknown layer type {type(layer).__name__}")
    if record:
        model._cache = cache
    return x


def backward(model: ModelGraph, grad_logits) -> None:
    """Fill model.grads from a loss gradient on the logits.

    Requires a preceding forward(record=True) on the same batch. Gradients
    are zeroed first, then assigned.
    """
    if model._cache is None:
        raise RuntimeError("backward without a recorded forward pass")
    for g in model.grads:
        for t in g.values():
            t[...] = 0.0
    grad = np.asarray(grad_logits, dtype=model.dtype)
    cache = model._cache
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        saved = cache[i]
        if isinstance(layer, Dense):
            x = saved
            model.grads[i]["w"][...] = x.T @ grad
            model.grads[i]["b"][...] = grad.sum(axis=0)
            grad = grad @ model.params[i]["w"].T
        elif isinstance(layer, Conv2d):
            x_padded, in_shape = saved
            grad, dw, db = _conv_backward(
                grad, x_padded, model.params[i]["w"], layer.stride, layer.padding, in_shape
            )
            model.grads[i]["w"][...] = dw
            model.grads[i]["b"][...] = db
        elif isinstance(layer, ReLU):
            grad = grad * (saved > 0)
        elif isinstance(layer, MaxPool2d):
            arg, in_shape = saved
            s = layer.size
            m, c, h, w = in_shape
            scattered = np.zeros((m, c, h // s, w // s, s * s), dtype=grad.dtype)
            np.put_along_axis(scattered, arg[..., np.newaxis], grad[..., np.newaxis], axis=-1)
            grad = (
                scattered.reshape(m, c, h // s, w // s, s, s)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(in_shape)
            )
        elif isinstance(layer, Flatten):
            grad = grad.reshape(saved)


def finite_diff_grad(
    model: ModelGraph,
    loss_fn: Callable[[np.ndarray, object], float],
    inputs,
    targets,
    h: float = 1e-6,
) -> list[dict[str, np.ndarray]]:
    """Central-difference parameter gradients, the oracle for backward().

    ``loss_fn(logits, targets)`` maps a forward pass to a scalar loss. The
    model must hold float64 buffers; float32 would drown the differences in
    rounding noise.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    if model.dtype != np.float64:
        raise ValueError("finite differences need a float64 model")
    out: list[dict[str, np.ndarray]] = []
    for tensors in model.params:
        layer_grads = {}
        for name, t in tensors.items():
            g = np.zeros_like(t)
            flat = t.reshape(-1)
            gflat = g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                lo_plus = loss_fn(forward(model, inputs), targets)
                flat[j] = orig - h
                lo_minus = loss_fn(forward(model, inputs), targets)
                flat[j] = orig
                gflat[j] = (lo_plus - lo_minus) / (2.0 * h)
            layer_grads[name] = g
        out.append(layer_grads)
    return out


@dataclass
class OptimizerState:
    """SGD with momentum and decoupled-on-gradient weight decay."""

    velocity: list[dict[str, np.ndarray]]
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0

    @classmethod
    def for_model(cls, model: ModelGraph, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError(f"lr must be nonnegative, got {lr}")
        velocity = [{n: np.zeros_like(t) for n, t in layer.items()} for layer in model.params]
        return cls(velocity=velocity, lr=lr, momentum=momentum, weight_decay=weight_decay)


def sgd_step(model: ModelGraph, opt: OptimizerState) -> None:
    """One update: g' = grad + wd*param; v <- mom*v + g'; param <- param - lr*v."""
    for p_layer, g_layer, v_layer in zip(model.params, model.grads, opt.velocity):
        for name in p_layer:
            g = g_layer[name] + opt.weight_decay * p_layer[name]
            v_layer[name][...] = opt.momentum * v_layer[name] + g
            p_layer[name] -= opt.lr * v_layer[name]


@dataclass(frozen=True)
class LrSchedule:
    """Step schedule: lr drops by ``factor`` at each milestone epoch."""

    initial_lr: float
    milestones: tuple[int, ...] = ()
    factor: float = 0.1

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if not 0.0 < self.factor < 1.0:
            raise ValueError(f"factor must be in (0, 1), got {self.factor}")
        object.__setattr__(self, "milestones", ms)


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    """initial_lr * factor^(number of milestones at or before the epoch)."""
    if epoch < 0:
        raise ValueError(f"epoch must be nonnegative, got {epoch}")
    passed = sum(1 for ms in schedule.milestones if ms <= epoch)
    return schedule.initial_lr * schedule.factor**passed


# Checkpoint layout (little-endian):
#   8 bytes   magic b"SOSRNET\0"
#   uint32    format version (1)
#   uint32    byte length of the utf-8 layer-spec string
#   bytes     layer-spec string (parse_layer_spec grammar)
#   then per parameterized layer, in layer order: raw float32 weight buffer
#   followed by raw float32 bias buffer, shapes implied by the spec.
CHECKPOINT_MAGIC = b"SOSRNET\0"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: ModelGraph, path) -> None:
    """Write the documented little-endian binary checkpoint."""
    spec = format_layer_spec(model.layers).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(spec)))
        fh.write(spec)
        for layer in model.params:
            for name in ("w", "b"):
                if name in layer:
                    fh.write(np.ascontiguousarray(layer[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelGraph:
    """Read a checkpoint back into a float32 model."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic {magic!r})")
        version, spec_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        spec = fh.read(spec_len).decode("utf-8")
        model = build_model(spec, seed=0, dtype=np.float32)
        for layer in model.params:
            for name in ("w", "b"):
                if name in layer:
                    n = layer[name].size
                    raw = fh.read(4 * n)
                    if len(raw) != 4 * n:
                        raise ValueError(f"{path}: truncated parameter buffer")
                    layer[name][...] = np.frombuffer(raw, dtype="<f4").reshape(layer[name].shape)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after parameter buffers")
    return model
