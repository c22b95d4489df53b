"""Sequential layer graphs for the three stage networks.

A :class:`NetworkDef` is a plain description; parameters live in a separate
``dict`` keyed ``"{net}.{index}.{param}"`` in definition order, so the same
definition can be evaluated against freshly initialised, trained, loaded or
served weights.
"""
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers as L
from .layers import BatchNormParams, ConvParams, ShapeError

KINDS = ("conv3x3", "batchnorm", "relu", "maxpool2", "avgpool2", "dropout", "flatten", "dense", "softmax")

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


class WeightError(KeyError):
    """A weight entry is missing or has the wrong shape."""

    def __str__(self):
        return self.args[0] if self.args else ""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0  # output channels (conv3x3) or units (dense)
    rate: float = 0.0  # dropout only
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv3x3", "dense") and self.size < 1:
            raise ValueError(f"{self.kind} needs a positive size")
        if self.kind == "dropout" and not 0 <= self.rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")

    def describe(self) -> str:
        if self.kind in ("conv3x3", "dense"):
            return f"{self.kind}({self.size})"
        if self.kind == "dropout":
            return f"dropout({self.rate:g})"
        return self.kind


@dataclass(frozen=True)
class NetworkDef:
    name: str
    input_dims: tuple  # (C, H, W)
    layers: tuple
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.layers:
            if self.layers[-1].kind != "softmax":
                raise ValueError(f"{self.name}: final layer must be softmax")
            self.trace()  # raises on ill-formed dimension propagation

    def trace(self) -> list:
        """Output shape (without batch) of every layer, input first."""
        shapes = [self.input_dims]
        cur = self.input_dims
        for i, spec in enumerate(self.layers):
            k = spec.kind
            if k in ("conv3x3", "batchnorm", "maxpool2", "avgpool2") and len(cur) != 3:
                raise ShapeError(f"{self.name}.{i}: {k} needs a (C, H, W) input, got {cur}")
            if k == "conv3x3":
                cur = (spec.size, cur[1], cur[2])
            elif k in ("maxpool2", "avgpool2"):
                if cur[1] < 2 or cur[2] < 2:
                    raise ShapeError(f"{self.name}.{i}: {k} on spatial extent {cur[1:]}")
                cur = (cur[0], cur[1] // 2, cur[2] // 2)
            elif k == "flatten":
                cur = (int(np.prod(cur)),)
            elif k == "dense":
                if len(cur) != 1:
                    raise ShapeError(f"{self.name}.{i}: dense needs a flat input, got {cur}")
                cur = (spec.size,)
            elif k == "softmax" and cur != (self.class_count,):
                raise ShapeError(f"{self.name}.{i}: softmax over {cur}, expected ({self.class_count},)")
            shapes.append(cur)
        return shapes

    def spatial_trace(self) -> list:
        """Distinct spatial extents seen along the network, e.g. 128, 64, ..."""
        out = []
        for s in self.trace():
            if len(s) == 3 and (not out or out[-1] != s[1]):
                out.append(s[1])
        return out


def param_specs(net: NetworkDef) -> list:
    """``(name, shape, trainable)`` for every parameter, in definition order."""
    specs = []
    shapes = net.trace()
    for i, spec in enumerate(net.layers):
        prefix = f"{net.name}.{i}."
        inp = shapes[i]
        if spec.kind == "conv3x3":
            specs.append((prefix + "kernel", (spec.size, inp[0], 3, 3), True))
            specs.append((prefix + "bias", (spec.size,), True))
        elif spec.kind == "batchnorm":
            c = inp[0]
            specs.append((prefix + "gamma", (c,), True))
            specs.append((prefix + "beta", (c,), True))
            specs.append((prefix + "moving_mean", (c,), False))
            specs.append((prefix + "moving_var", (c,), False))
        elif spec.kind == "dense":
            specs.append((prefix + "kernel", (inp[0], spec.size), True))
            specs.append((prefix + "bias", (spec.size,), True))
    return specs


def count_params(net: NetworkDef):
    """Return ``(total, trainable, non_trainable)``."""
    trainable = non_trainable = 0
    for _, shape, is_trainable in param_specs(net):
        n = int(np.prod(shape))
        if is_trainable:
            trainable += n
        else:
            non_trainable += n
    return trainable + non_trainable, trainable, non_trainable


# -- builders -------------------------------------------------------------


def _cbr_net(name, input_dims, blocks, class_count):
    """``blocks`` is a sequence of ``(channels, pool_kind, dropout_rate_or_None)``."""
    if class_count < 2:
        raise ValueError("class_count must be at least 2")
    seq = []
    for channels, pool, rate in blocks:
        seq += [LayerSpec("conv3x3", channels), LayerSpec("batchnorm"), LayerSpec("relu"), LayerSpec(pool)]
        if rate is not None:
            seq.append(LayerSpec("dropout", rate=rate))
    seq += [LayerSpec("flatten"), LayerSpec("dense", class_count), LayerSpec("softmax")]
    return NetworkDef(name, input_dims, seq, class_count)


S_CHANNELS = (64, 128, 160, 224, 256)
W_CHANNELS = (64, 128, 160, 192, 224, 320, 256)
P_CHANNELS = (64, 128, 160, 192, 224, 256)


def build_s_leafnet(class_count: int, input_hw: int = 128, channels: Sequence[int] = S_CHANNELS,
                    name: str = "s_leafnet") -> NetworkDef:
    """Shallow binary-silhouette network: five CBR blocks, last pool averaging."""
    if len(channels) != 5:
        raise ValueError("s_leafnet has exactly five CBR blocks")
    pools = ("maxpool2",) * 4 + ("avgpool2",)
    rates = (None, 0.1, 0.2, 0.3, 0.4)
    return _cbr_net(name, (1, input_hw, input_hw), zip(channels, pools, rates), class_count)


def build_w_leafnet(class_count: int, input_hw: int = 196, channels: Sequence[int] = W_CHANNELS,
                    name: str = "w_leafnet") -> NetworkDef:
    """Whole-leaf RGB network: seven CBR blocks, all max pooling."""
    if len(channels) != 7:
        raise ValueError("w_leafnet has exactly seven CBR blocks")
    rates = (None, 0.1, 0.2, 0.3, 0.4, 0.5, None)
    return _cbr_net(name, (3, input_hw, input_hw), zip(channels, ("maxpool2",) * 7, rates), class_count)


def build_p_fallback(class_count: int, input_hw: int = 96, channels: Sequence[int] = P_CHANNELS,
                     name: str = "p_fallback") -> NetworkDef:
    """In-process stand-in for the patch model: w_leafnet pattern on 96x96 patches.

    Six blocks instead of seven, since 96 reaches 1x1 after six halvings.
    """
    if len(channels) != 6:
        raise ValueError("p_fallback has exactly six CBR blocks")
    rates = (None, 0.1, 0.2, 0.3, 0.4, None)
    return _cbr_net(name, (3, input_hw, input_hw), zip(channels, ("maxpool2",) * 6, rates), class_count)


BUILDERS = {"s": build_s_leafnet, "w": build_w_leafnet, "p": build_p_fallback}


def build(net: str, class_count: int, **kwargs) -> NetworkDef:
    try:
        return BUILDERS[net](class_count, **kwargs)
    except KeyError:
        raise ValueError(f"unknown network {net!r}; choose from {sorted(BUILDERS)}") from None


def netdef_to_dict(net: NetworkDef) -> dict:
    return {
        "name": net.name,
        "input_dims": list(net.input_dims),
        "class_count": net.class_count,
        "layers": [
            {k: v for k, v in (("kind", s.kind), ("size", s.size), ("rate", s.rate),
                               ("epsilon", s.epsilon), ("momentum", s.momentum))
             if k == "kind" or (k == "size" and s.size) or (k == "rate" and s.kind == "dropout")
             or (k in ("epsilon", "momentum") and s.kind == "batchnorm")}
            for s in net.layers
        ],
    }


def netdef_from_dict(d: dict) -> NetworkDef:
    return NetworkDef(d["name"], tuple(d["input_dims"]), tuple(LayerSpec(**s) for s in d["layers"]),
                      int(d["class_count"]))


# -- evaluation -----------------------------------------------------------


def _get(weights, net, i, param, shape):
    key = f"{net.name}.{i}.{param}"
    try:
        arr = weights[key]
    except KeyError:
        raise WeightError(f"layer {i} ({net.layers[i].describe()}): missing weight {key!r}") from None
    if tuple(arr.shape) != tuple(shape):
        raise WeightError(f"layer {i} ({net.layers[i].describe()}): {key!r} has shape "
                          f"{tuple(arr.shape)}, expected {tuple(shape)}")
    return arr


def _layer_params(net, weights, i, in_shape):
    spec = net.layers[i]
    if spec.kind == "conv3x3":
        return ConvParams(_get(weights, net, i, "kernel", (spec.size, in_shape[0], 3, 3)),
                          _get(weights, net, i, "bias", (spec.size,)))
    if spec.kind == "batchnorm":
        c = (in_shape[0],)
        return BatchNormParams(*(_get(weights, net, i, p, c) for p in ("gamma", "beta", "moving_mean", "moving_var")),
                               epsilon=spec.epsilon, momentum=spec.momentum)
    if spec.kind == "dense":
        return (_get(weights, net, i, "kernel", (in_shape[0], spec.size)), _get(weights, net, i, "bias", (spec.size,)))
    return None


def _run(net, weights, x, mode, rng, keep_tape, stop_at=None):
    shapes = net.trace()
    tape = []
    updates = {}
    for i, spec in enumerate(net.layers):
        params = _layer_params(net, weights, i, shapes[i])
        inp = x
        extra = None
        k = spec.kind
        if k == "conv3x3":
            x = L.conv2d_forward(x, params)
        elif k == "batchnorm":
            x, new = L.batchnorm_forward(x, params, mode)
            if mode == "train":
                updates[f"{net.name}.{i}.moving_mean"] = new.moving_mean
                updates[f"{net.name}.{i}.moving_var"] = new.moving_var
        elif k == "relu":
            x = L.relu(x)
        elif k == "maxpool2":
            x = L.max_pool2(x)
        elif k == "avgpool2":
            x = L.avg_pool2(x)
        elif k == "dropout":
            x, extra = L.dropout(x, spec.rate, mode, rng)
        elif k == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif k == "dense":
            x = L.dense_forward(x, *params)
        elif k == "softmax":
            x = L.softmax(x)
        if keep_tape:
            tape.append((inp, params, extra))
        if stop_at is not None and i == stop_at:
            break
    return x, tape, updates


def _check_input(net, x):
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != net.input_dims:
        raise ShapeError(f"{net.name}: input shape {x.shape} does not match {net.input_dims}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    return np.ascontiguousarray(x), single


def forward(net: NetworkDef, weights: dict, x, mode: str = "infer", rng=None):
    """Class probabilities for ``x`` of shape ``(C, H, W)`` or ``(N, C, H, W)``."""
    x, single = _check_input(net, x)
    out, _, _ = _run(net, weights, x, mode, rng, keep_tape=False)
    return out[0] if single else out


@dataclass
class Tape:
    net: NetworkDef
    probs: np.ndarray
    records: list
    bn_updates: dict = field(default_factory=dict)


def forward_train(net: NetworkDef, weights: dict, x, rng=None, mode: str = "train") -> Tape:
    """Forward pass that records what :func:`backward` needs."""
    x, _ = _check_input(net, x)
    out, records, updates = _run(net, weights, x, mode, rng, keep_tape=True)
    return Tape(net, out, records, updates)


def backward(tape: Tape, grad_probs, mode: str = "train") -> dict:
    """Gradients of a scalar loss w.r.t. every trainable parameter.

    ``grad_probs`` is dLoss/dProbs with the batch shape of ``tape.probs``.
    """
    net = tape.net
    g = grad_probs
    grads = {}
    for i in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[i]
        inp, params, extra = tape.records[i]
        k = spec.kind
        pre = f"{net.name}.{i}."
        if k == "softmax":
            g = L.softmax_backward(tape.probs, g)
        elif k == "dense":
            g, gw, gb = L.dense_backward(inp, params[0], g)
            grads[pre + "kernel"], grads[pre + "bias"] = gw, gb
        elif k == "flatten":
            g = g.reshape(inp.shape)
        elif k == "dropout":
            g = L.dropout_backward(extra, g)
        elif k == "avgpool2":
            g = L.avg_pool2_backward(inp.shape, g)
        elif k == "maxpool2":
            g = L.max_pool2_backward(inp, g)
        elif k == "relu":
            g = L.relu_backward(inp, g)
        elif k == "batchnorm":
            g, gg, gb = L.batchnorm_backward(inp, params, g, mode)
            grads[pre + "gamma"], grads[pre + "beta"] = gg, gb
        elif k == "conv3x3":
            g, gk, gb = L.conv2d_backward(inp, params, g)
            grads[pre + "kernel"], grads[pre + "bias"] = gk, gb
    return grads


def activation(net: NetworkDef, weights: dict, x, layer_index: int):
    """Output of layer ``layer_index`` in infer mode."""
    if not 0 <= layer_index < len(net.layers):
        raise IndexError(f"{net.name} has no layer {layer_index}")
    x, single = _check_input(net, x)
    out, _, _ = _run(net, weights, x, "infer", None, keep_tape=False, stop_at=layer_index)
    return out[0] if single else out


def conv_layer_indices(net: NetworkDef) -> list:
    return [i for i, s in enumerate(net.layers) if s.kind == "conv3x3"]


def export_feature_maps(net: NetworkDef, weights: dict, x, layer_indices, out_dir) -> list:
    """Write every channel of each requested conv activation as an 8-bit PGM.

    Channels are min-max normalised independently; constant channels become
    mid-gray (128). Returns the written paths in (layer, channel) order.
    """
    from .imageio import write_pgm

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for idx in layer_indices:
        if not 0 <= idx < len(net.layers) or net.layers[idx].kind != "conv3x3":
            raise ValueError(f"layer {idx} of {net.name} is not a conv3x3 layer")
        act = activation(net, weights, x, idx)
        if act.ndim == 4:
            act = act[0]
        for ch, fmap in enumerate(act):
            path = out_dir / f"{net.name}_layer{idx:02d}_ch{ch:03d}.pgm"
            write_pgm(path, normalize_to_u8(fmap))
            paths.append(path)
    return paths


def normalize_to_u8(fmap) -> np.ndarray:
    fmap = np.asarray(fmap, dtype=np.float64)
    lo, hi = fmap.min(), fmap.max()
    if hi == lo:
        return np.full(fmap.shape, 128, dtype=np.uint8)
    return np.round((fmap - lo) / (hi - lo) * 255).astype(np.uint8)


# -- stage models ---------------------------------------------------------


class StageUnavailable(RuntimeError):
    """A stage model could not produce a probability vector (e.g. remote outage)."""


class LocalStage:
    """Probability provider backed by a NetworkDef and its weights."""

    def __init__(self, net: NetworkDef, weights: dict):
        for name, shape, _ in param_specs(net):
            _get(weights, net, int(name.split(".")[-2]), name.split(".")[-1], shape)
        self.net = net
        self.weights = weights
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def input_dims(self):
        return self.net.input_dims

    @property
    def class_count(self):
        return self.net.class_count

    def __call__(self, x) -> np.ndarray:
        with self._lock:
            self.calls += 1
        return forward(self.net, self.weights, np.asarray(x, dtype=np.float32))


def uniform_weights(net: NetworkDef, dtype=np.float32) -> dict:
    """All-zero kernels and biases, identity batchnorm; forward yields a uniform vector."""
    w = {}
    for name, shape, _ in param_specs(net):
        fill = 1.0 if name.endswith(("gamma", "moving_var")) else 0.0
        w[name] = np.full(shape, fill, dtype=dtype)
    return w


def cast_weights(weights: dict, dtype) -> dict:
    return {k: v.astype(dtype) for k, v in weights.items()}

