"""Network specs and builders: generator G, critics D and S, independent steganalyser S*."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .autodiff import (
    ParamSet,
    ShapeError,
    Tensor,
    batch_norm,
    conv2d,
    conv_transpose2d,
    depthwise_highpass,
    fully_connected,
    global_avg_pool,
    leaky_relu,
    load_arrays,
    max_pool2d,
    reshape,
    save_arrays,
    sigmoid,
    tanh,
)

F0_INTEGER = np.array(
    [
        [-1, 2, -2, 2, -1],
        [2, -6, 8, -6, 2],
        [-2, 8, -12, 8, -2],
        [2, -6, 8, -6, 2],
        [-1, 2, -2, 2, -1],
    ],
    dtype=np.float64,
)
F0_KERNEL = F0_INTEGER / 12.0
F0_KERNEL.flags.writeable = False

LEAK = 0.2
INIT_STD = 0.02


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    shape: tuple = ()


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    role: str  # generator | discriminator | steganalyser | independent_steganalyser
    input_shape: tuple
    layers: tuple
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def output_shape(self) -> tuple:
        return infer_shapes(self)[-1]

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "role": self.role,
                "input_shape": list(self.input_shape),
                "output_shape": list(self.output_shape),
                "layers": [{k: v for k, v in asdict(l).items() if v not in ("", 0, ())} | {"kind": l.kind} for l in self.layers],
                "meta": self.meta,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        d = json.loads(text)
        layers = tuple(LayerSpec(**{**l, "shape": tuple(l.get("shape", ()))}) for l in d["layers"])
        return cls(d["name"], d["role"], tuple(d["input_shape"]), layers, d.get("meta", {}))


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def infer_shapes(spec: NetworkSpec) -> list[tuple]:
    """Symbolic per-sample shapes after every layer; raises ShapeError on a mismatch."""
    shapes = [tuple(spec.input_shape)]
    cur = tuple(spec.input_shape)
    for layer in spec.layers:
        k = layer.kind
        if k == "linear":
            if cur != (layer.in_ch,):
                raise ShapeError(f"{layer.name}: expects ({layer.in_ch},), got {cur}")
            cur = (layer.out_ch,)
        elif k in ("conv", "deconv"):
            if len(cur) != 3 or cur[0] != layer.in_ch:
                raise ShapeError(f"{layer.name}: expects {layer.in_ch} channels, got {cur}")
            if k == "conv":
                h, w = (_conv_out(d, layer.kernel, layer.stride, layer.pad) for d in cur[1:])
            else:
                h, w = ((d - 1) * layer.stride - 2 * layer.pad + layer.kernel for d in cur[1:])
            if h < 1 or w < 1:
                raise ShapeError(f"{layer.name}: non-positive output extent from {cur}")
            cur = (layer.out_ch, h, w)
        elif k == "highpass":
            if len(cur) != 3 or cur[1] < 5 or cur[2] < 5:
                raise ShapeError(f"{layer.name}: needs a 3-d input of at least 5x5, got {cur}")
            cur = (cur[0], cur[1] - 4, cur[2] - 4)
        elif k == "bn":
            if cur[0] != layer.in_ch:
                raise ShapeError(f"{layer.name}: expects {layer.in_ch} channels, got {cur}")
        elif k == "reshape":
            if int(np.prod(cur)) != int(np.prod(layer.shape)):
                raise ShapeError(f"{layer.name}: cannot reshape {cur} to {layer.shape}")
            cur = tuple(layer.shape)
        elif k == "flatten":
            cur = (int(np.prod(cur)),)
        elif k == "maxpool":
            if len(cur) != 3 or min(cur[1:]) < layer.kernel:
                raise ShapeError(f"{layer.name}: window {layer.kernel} exceeds {cur}")
            cur = (cur[0],) + tuple(_conv_out(d, layer.kernel, layer.stride, 0) for d in cur[1:])
        elif k == "gap":
            cur = (cur[0],)
        elif k in ("lrelu", "tanh", "sigmoid"):
            pass
        else:
            raise ValueError(f"unknown layer kind {k!r}")
        shapes.append(cur)
    return shapes


def _check_size(size: int, what: str) -> int:
    if size < 16 or size % 16 or (size // 16) & (size // 16 - 1):
        raise ValueError(f"{what} must be 16 * 2**k (16, 32, 64, ...), got {size}")
    return size // 16


def build_generator(z_dim: int = 100, base_channels: int = 64, out_size: int = 64, channels: int = 3) -> NetworkSpec:
    """FC -> [8b, s/16, s/16] -> four stride-2 fractionally-strided convs -> tanh."""
    s0 = _check_size(out_size, "out_size")
    b = base_channels
    widths = [8 * b, 4 * b, 2 * b, b, channels]
    layers = [
        LayerSpec("linear", "fc", z_dim, widths[0] * s0 * s0),
        LayerSpec("bn", "fc_bn", widths[0] * s0 * s0),
        LayerSpec("lrelu", "fc_act"),
        LayerSpec("reshape", "to_map", shape=(widths[0], s0, s0)),
    ]
    for i in range(4):
        layers.append(LayerSpec("deconv", f"up{i + 1}", widths[i], widths[i + 1], 4, 2, 1))
        if i < 3:
            layers += [LayerSpec("bn", f"up{i + 1}_bn", widths[i + 1]), LayerSpec("lrelu", f"up{i + 1}_act")]
    layers.append(LayerSpec("tanh", "out"))
    return NetworkSpec("generator", "generator", (z_dim,), tuple(layers),
                       {"z_dim": z_dim, "base_channels": b, "out_size": out_size})


def build_critic(kind: str = "discriminator", in_size: int = 64, base_channels: int = 64, channels: int = 3) -> NetworkSpec:
    """Four stride-2 C2D-BN-LR stages, then a one-unit FC head and sigmoid."""
    if kind not in ("discriminator", "steganalyser"):
        raise ValueError(f"critic kind must be 'discriminator' or 'steganalyser', got {kind!r}")
    s_end = in_size // 16
    _check_size(in_size, "in_size")
    b = base_channels
    widths = [channels, b, 2 * b, 4 * b, 8 * b]
    layers = []
    for i in range(4):
        layers += [
            LayerSpec("conv", f"down{i + 1}", widths[i], widths[i + 1], 4, 2, 1),
            LayerSpec("bn", f"down{i + 1}_bn", widths[i + 1]),
            LayerSpec("lrelu", f"down{i + 1}_act"),
        ]
    layers += [
        LayerSpec("flatten", "flat"),
        LayerSpec("linear", "head", widths[-1] * s_end * s_end, 1),
        LayerSpec("sigmoid", "prob"),
    ]
    return NetworkSpec(kind, kind, (channels, in_size, in_size), tuple(layers),
                       {"base_channels": b, "in_size": in_size})


def build_independent_steganalyser(
    in_size: int = 64,
    channels: int = 3,
    conv_channels: tuple = (16, 32),
    fc_units: int = 1024,
    batch_norm: bool = True,
) -> NetworkSpec:
    """F0 high-pass -> Conv -> Conv -> MaxPool -> Conv -> Conv -> MaxPool -> FC(fc_units) -> FC(1) -> sigmoid.

    Inner convs are 3x3/stride 1/pad 1 with leaky ReLU; a global average
    over the remaining spatial map feeds the first FC layer.
    """
    if in_size < 16:
        raise ValueError(f"in_size must be >= 16, got {in_size}")
    c1, c2 = conv_channels
    layers = [LayerSpec("highpass", "f0")]
    cin = channels
    for i, cout in enumerate((c1, c1, None, c2, c2, None)):
        if cout is None:
            layers.append(LayerSpec("maxpool", f"pool{i}", kernel=2, stride=2))
            continue
        layers.append(LayerSpec("conv", f"conv{i}", cin, cout, 3, 1, 1))
        if batch_norm:
            layers.append(LayerSpec("bn", f"conv{i}_bn", cout))
        layers.append(LayerSpec("lrelu", f"conv{i}_act"))
        cin = cout
    layers += [
        LayerSpec("gap", "gap"),
        LayerSpec("linear", "fc1", c2, fc_units),
        LayerSpec("lrelu", "fc1_act"),
        LayerSpec("linear", "head", fc_units, 1),
        LayerSpec("sigmoid", "prob"),
    ]
    return NetworkSpec("independent_steganalyser", "independent_steganalyser", (channels, in_size, in_size),
                       tuple(layers), {"conv_channels": list(conv_channels), "fc_units": fc_units,
                                       "batch_norm": batch_norm, "in_size": in_size})


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParamSet:
    """Weights ~ N(0, 0.02), BN scale ~ N(1, 0.02), biases and shifts 0."""
    params = ParamSet()

    def add(name, data, trainable=True):
        params[name] = Tensor(data, requires_grad=trainable, name=name)

    for layer in spec.layers:
        n = layer.name
        if layer.kind == "linear":
            add(f"{n}.w", rng.normal(0.0, INIT_STD, size=(layer.in_ch, layer.out_ch)))
            add(f"{n}.b", np.zeros(layer.out_ch))
        elif layer.kind == "conv":
            add(f"{n}.w", rng.normal(0.0, INIT_STD, size=(layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)))
        elif layer.kind == "deconv":
            add(f"{n}.w", rng.normal(0.0, INIT_STD, size=(layer.in_ch, layer.out_ch, layer.kernel, layer.kernel)))
        elif layer.kind == "bn":
            add(f"{n}.scale", rng.normal(1.0, INIT_STD, size=layer.in_ch))
            add(f"{n}.shift", np.zeros(layer.in_ch))
            add(f"{n}.running_mean", np.zeros(layer.in_ch), trainable=False)
            add(f"{n}.running_var", np.ones(layer.in_ch), trainable=False)
    return params


class Network:
    """A spec bound to its parameters."""

    def __init__(self, spec: NetworkSpec, params: ParamSet, bn_momentum: float = 0.9, bn_eps: float = 1e-5):
        infer_shapes(spec)
        self.spec = spec
        self.params = params
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps

    @classmethod
    def create(cls, spec: NetworkSpec, seed_or_rng, **kw) -> "Network":
        rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
        return cls(spec, init_params(spec, rng), **kw)

    def forward(self, x, training: bool = True, update_stats: bool = True) -> Tensor:
        """Run the layers on a batch.

        ``update_stats=False`` keeps batch-norm running statistics untouched,
        which lets one network's forward pass feed another network's update
        without altering its own state.
        """
        h = x if isinstance(x, Tensor) else Tensor(x)
        p = self.params
        for layer in self.spec.layers:
            k, n = layer.kind, layer.name
            if k == "linear":
                h = fully_connected(h, p[f"{n}.w"], p[f"{n}.b"])
            elif k == "conv":
                h = conv2d(h, p[f"{n}.w"], layer.stride, layer.pad)
            elif k == "deconv":
                h = conv_transpose2d(h, p[f"{n}.w"], layer.stride, layer.pad)
            elif k == "highpass":
                h = depthwise_highpass(h, F0_KERNEL)
            elif k == "bn":
                h = batch_norm(h, p[f"{n}.scale"], p[f"{n}.shift"], p[f"{n}.running_mean"].data,
                               p[f"{n}.running_var"].data, training, self.bn_momentum, self.bn_eps, update_stats)
            elif k == "lrelu":
                h = leaky_relu(h, LEAK)
            elif k == "tanh":
                h = tanh(h)
            elif k == "sigmoid":
                h = sigmoid(h)
            elif k == "reshape":
                h = reshape(h, (h.shape[0],) + tuple(layer.shape))
            elif k == "flatten":
                h = reshape(h, (h.shape[0], -1))
            elif k == "maxpool":
                h = max_pool2d(h, layer.kernel, layer.stride)
            elif k == "gap":
                h = global_avg_pool(h)
        return h

    __call__ = forward

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode probabilities for an (N, C, H, W) array, shape (N,)."""
        outs = [self.forward(Tensor(x[i : i + batch_size]), training=False).data.reshape(-1)
                for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros(0)

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: t.data for k, t in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, t in self.params.items():
            key = prefix + k
            if key not in arrays:
                raise KeyError(f"checkpoint lacks {key!r}")
            if arrays[key].shape != t.data.shape:
                raise ShapeError(f"{key}: checkpoint shape {arrays[key].shape} != {t.data.shape}")
            t.data = np.array(arrays[key], dtype=np.float64)

    def save(self, path, meta: Optional[dict] = None) -> None:
        save_arrays(path, self.state_arrays(), {"spec": json.loads(self.spec.to_json()), **(meta or {})})

    @classmethod
    def load(cls, path) -> "Network":
        arrays, meta = load_arrays(path)
        spec = NetworkSpec.from_json(json.dumps(meta["spec"]))
        net = cls(spec, init_params(spec, np.random.default_rng(0)))
        net.load_state_arrays(arrays)
        return net
