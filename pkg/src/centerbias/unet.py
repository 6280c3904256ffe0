"""Small U-Net for the composite digit-segmentation task.

Encoder levels are [conv3x3, relu, conv3x3, relu] followed by 2x2 max pooling
(except at the deepest level); the decoder upsamples 2x, concatenates the
skip connection, and applies two more conv3x3+relu pairs; a 1x1 conv head
emits per-pixel class logits.  The padding mode of every 3x3 conv is a config
knob, which is the whole point of this laboratory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_core as tc
from .rng import stream

__all__ = [
    "UNetConfig", "ConvLayer", "Model",
    "build_unet", "param_count", "forward", "backward", "train_step",
    "save_checkpoint", "load_checkpoint",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}

CHECKPOINT_FORMAT = "centerbias-unet"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 1
    num_classes: int = 11
    padding: tc.PaddingMode = tc.ZERO
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {tuple(_DTYPES)}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(_DTYPES[self.precision])

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "base_channels": self.base_channels,
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "padding": tc.padding_to_dict(self.padding),
            "precision": self.precision,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["padding"] = tc.padding_from_dict(d["padding"])
        return cls(**d)


@dataclass
class ConvLayer:
    name: str
    spec: tc.ConvSpec
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class Model:
    config: UNetConfig
    encoder: list[list[ConvLayer]]   # depth levels, two convs each
    decoder: list[list[ConvLayer]]   # depth-1 levels, shallowest first
    head: ConvLayer
    flat_params: np.ndarray          # backing store; layers hold views
    step: int = 0

    def layers(self) -> list[ConvLayer]:
        out = [l for lvl in self.encoder for l in lvl]
        out += [l for lvl in self.decoder for l in lvl]
        out.append(self.head)
        return out

    def parameters(self) -> list[np.ndarray]:
        """Weight and bias arrays in declaration order (views of flat_params)."""
        params = []
        for layer in self.layers():
            params.append(layer.weight)
            params.append(layer.bias)
        return params


def _layer_plan(config: UNetConfig) -> list[tuple[str, int, int, tuple[int, int]]]:
    """(name, in_channels, out_channels, kernel) in declaration order."""
    base, depth = config.base_channels, config.depth
    plan = []
    for lvl in range(depth):
        cin = config.in_channels if lvl == 0 else base * 2 ** (lvl - 1)
        cout = base * 2 ** lvl
        plan.append((f"enc{lvl}a", cin, cout, (3, 3)))
        plan.append((f"enc{lvl}b", cout, cout, (3, 3)))
    for lvl in range(depth - 2, -1, -1):
        cout = base * 2 ** lvl
        plan.append((f"dec{lvl}a", 3 * cout, cout, (3, 3)))
        plan.append((f"dec{lvl}b", cout, cout, (3, 3)))
    plan.append(("head", base, config.num_classes, (1, 1)))
    return plan


def param_count(config: UNetConfig) -> int:
    """Closed-form parameter count for a config."""
    total = 0
    for _, cin, cout, (kh, kw) in _layer_plan(config):
        total += cout * cin * kh * kw + cout
    return total


def build_unet(config: UNetConfig) -> Model:
    """He-uniform initialized model; bit-identical for equal seeds."""
    rng = stream(config.seed)
    dtype = config.dtype
    flat = np.empty(param_count(config), dtype=dtype)
    layers = {}
    cursor = 0

    def carve(shape):
        nonlocal cursor
        size = int(np.prod(shape))
        view = flat[cursor:cursor + size].reshape(shape)
        cursor += size
        return view

    for name, cin, cout, kernel in _layer_plan(config):
        pad = 1 if kernel == (3, 3) else 0
        spec = tc.ConvSpec(cin, cout, kernel, 1, pad, config.padding)
        fan_in = cin * kernel[0] * kernel[1]
        bound = np.sqrt(6.0 / fan_in)
        weight = carve((cout, cin) + kernel)
        weight[...] = rng.uniform(-bound, bound, weight.shape)
        bias = carve((cout,))
        bias[...] = 0
        layers[name] = ConvLayer(name, spec, weight, bias)
    encoder = [[layers[f"enc{l}a"], layers[f"enc{l}b"]] for l in range(config.depth)]
    decoder = [[layers[f"dec{l}a"], layers[f"dec{l}b"]] for l in range(config.depth - 1)]
    return Model(config, encoder, decoder, layers["head"], flat)


@dataclass
class _Tape:
    conv_tapes: dict[str, tc.ConvTape] = field(default_factory=dict)
    activations: dict[str, np.ndarray] = field(default_factory=dict)
    pools: list[tc.PoolRecord] = field(default_factory=list)
    concat_split: list[int] = field(default_factory=list)  # upsampled channels
    input_shape: tuple = ()


def _conv_relu(layer: ConvLayer, x, tape, rng):
    y, ct = tc.conv2d_forward(x, layer.weight, layer.bias, layer.spec, rng)
    y = tc.relu(y, out=y)
    tape.conv_tapes[layer.name] = ct
    tape.activations[layer.name] = y
    return y


def forward(model: Model, batch: np.ndarray,
            rng: np.random.Generator | None = None
            ) -> tuple[np.ndarray, _Tape]:
    """Run the network; returns (logits, tape).

    `rng` is only consumed by random-fill padding, so runs are deterministic
    given (weights, input) plus the seed when that mode is active.
    """
    cfg = model.config
    div = 2 ** (cfg.depth - 1)
    if batch.shape[2] % div or batch.shape[3] % div:
        raise ValueError(
            f"input dims {batch.shape[2:]} must be divisible by {div}")
    x = batch.astype(cfg.dtype, copy=False)
    tape = _Tape(input_shape=batch.shape)
    skips = []
    for lvl in range(cfg.depth):
        a, b = model.encoder[lvl]
        x = _conv_relu(a, x, tape, rng)
        x = _conv_relu(b, x, tape, rng)
        if lvl < cfg.depth - 1:
            skips.append(x)
            rec = tc.maxpool2x2_forward(x)
            tape.pools.append(rec)
            x = rec.output
    for lvl in range(cfg.depth - 2, -1, -1):
        up = tc.upsample_nearest2x(x)
        tape.concat_split.append(up.shape[1])
        x = np.concatenate([up, skips[lvl]], axis=1)
        a, b = model.decoder[lvl]
        x = _conv_relu(a, x, tape, rng)
        x = _conv_relu(b, x, tape, rng)
    head = model.head
    logits, ct = tc.conv2d_forward(x, head.weight, head.bias, head.spec, rng)
    tape.conv_tapes[head.name] = ct
    return logits, tape


def backward(model: Model, tape: _Tape, grad_logits: np.ndarray
             ) -> tuple[list[np.ndarray], np.ndarray]:
    """VJP through the whole net.

    Returns (param_grads, grad_input); param_grads aligns with
    model.parameters().
    """
    cfg = model.config
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def back_conv_relu(layer, g):
        g = tc.relu_backward(tape.activations[layer.name], g)
        gx, gw, gb = tc.conv2d_backward(tape.conv_tapes[layer.name], g)
        grads[layer.name] = (gw, gb)
        return gx

    g, gw, gb = tc.conv2d_backward(tape.conv_tapes[model.head.name], grad_logits)
    grads[model.head.name] = (gw, gb)

    skip_grads: dict[int, np.ndarray] = {}
    for i, lvl in enumerate(range(cfg.depth - 1)):
        a, b = model.decoder[lvl]
        g = back_conv_relu(b, g)
        g = back_conv_relu(a, g)
        split = tape.concat_split[len(tape.concat_split) - 1 - i]
        g_up, g_skip = g[:, :split], g[:, split:]
        skip_grads[lvl] = g_skip
        g = tc.upsample_nearest2x_backward(np.ascontiguousarray(g_up))
    for lvl in range(cfg.depth - 1, -1, -1):
        if lvl < cfg.depth - 1:
            g = tc.maxpool2x2_backward(tape.pools[lvl], g)
            g = g + skip_grads[lvl]
        a, b = model.encoder[lvl]
        g = back_conv_relu(b, g)
        g = back_conv_relu(a, g)

    param_grads = []
    for layer in model.layers():
        gw, gb = grads[layer.name]
        param_grads.append(gw)
        param_grads.append(gb)
    return param_grads, g


def train_step(model: Model, batch: np.ndarray, targets: np.ndarray,
               adam: tc.AdamState,
               rng: np.random.Generator | None = None) -> float:
    """One forward/backward/Adam cycle; returns the pre-update loss.

    `adam` may hold either one moment pair per parameter array or a single
    pair for the flat buffer (AdamState.for_params([model.flat_params])),
    which updates the exact same values with far fewer array ops.
    """
    logits, tape = forward(model, batch, rng)
    loss, grad_logits = tc.softmax_cross_entropy_pixelwise(logits, targets)
    param_grads, _ = backward(model, tape, grad_logits)
    if len(adam.m) == 1:
        flat_grads = np.concatenate([g.reshape(-1) for g in param_grads])
        tc.adam_step([model.flat_params], [flat_grads], adam)
    else:
        tc.adam_step(model.parameters(), param_grads, adam)
    model.step += 1
    return loss


def save_checkpoint(model: Model, path) -> None:
    """One JSON header line, then all parameters as little-endian floats."""
    params = model.parameters()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "precision": model.config.precision,
        "step": model.step,
        "param_shapes": [list(p.shape) for p in params],
    }
    le = "<f4" if model.config.precision == "f32" else "<f8"
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        for p in params:
            f.write(np.ascontiguousarray(p, dtype=le).tobytes())


def load_checkpoint(path) -> Model:
    """Rebuild a model bit-exactly from save_checkpoint output."""
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt checkpoint header: {e}") from e
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a centerbias U-Net checkpoint")
    config = UNetConfig.from_dict(header["config"])
    if header["precision"] != config.precision:
        raise ValueError("header precision disagrees with config")
    model = build_unet(config)
    model.step = int(header.get("step", 0))
    params = model.parameters()
    shapes = [tuple(s) for s in header["param_shapes"]]
    if shapes != [p.shape for p in params]:
        raise ValueError("checkpoint shapes do not match its config")
    le = np.dtype("<f4" if config.precision == "f32" else "<f8")
    expected = sum(int(np.prod(s)) for s in shapes) * le.itemsize
    if len(payload) != expected:
        raise ValueError(
            f"payload holds {len(payload)} bytes, header declares {expected}")
    offset = 0
    for p in params:
        nbytes = p.size * le.itemsize
        chunk = np.frombuffer(payload, dtype=le, count=p.size,
                              offset=offset).reshape(p.shape)
        p[...] = chunk.astype(config.dtype)
        offset += nbytes
    return model
