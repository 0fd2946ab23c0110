"""Declarative layer-graph specs and runtime networks for the three experts.

The global expert (GE) is a LeNet-style CNN. The local expert (LE) and the
gating network (GN) own no convolutions at all: they tap the activations
after GE's first conv+pool block (12x12x20 for the stock GE), subsample them
with their own max pooling, and finish with a single fully connected layer.
The tap exposes activations and shapes only, never GE's weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T

TAP_SIDE = 12  # spatial side of the tapped feature maps in the stock GE
TAP_CHANNELS = 20


class SpecError(ValueError):
    pass


@dataclass
class LayerSpec:
    """One layer of a network spec; geometry fields depend on kind.

    conv: kernel, in_channels, filters, stride
    maxpool: window, stride
    fully_connected: fan_in, fan_out
    relu: no geometry
    """

    name: str
    kind: str
    kernel: int = 0
    in_channels: int = 0
    filters: int = 0
    stride: int = 1
    window: int = 0
    fan_in: int = 0
    fan_out: int = 0

    def weight_count(self) -> int:
        """Distinct weights, biases excluded (the network-size metric)."""
        if self.kind == "conv":
            return self.kernel * self.kernel * self.in_channels * self.filters
        if self.kind == "fully_connected":
            return self.fan_in * self.fan_out
        return 0

    def param_shapes(self):
        if self.kind == "conv":
            return (self.kernel, self.kernel, self.in_channels, self.filters), (self.filters,)
        if self.kind == "fully_connected":
            return (self.fan_in, self.fan_out), (self.fan_out,)
        return None

    def out_shape(self, in_shape: tuple) -> tuple:
        if self.kind == "conv":
            h, w, c = in_shape
            if c != self.in_channels:
                raise SpecError(f"{self.name}: expects {self.in_channels} channels, got {c}")
            hp, rem_h = divmod(h - self.kernel, self.stride)
            wp, rem_w = divmod(w - self.kernel, self.stride)
            if rem_h or rem_w or hp < 0 or wp < 0:
                raise SpecError(f"{self.name}: geometry {h}x{w} / kernel {self.kernel} stride {self.stride}")
            return (hp + 1, wp + 1, self.filters)
        if self.kind == "maxpool":
            h, w, c = in_shape
            hp, rem_h = divmod(h - self.window, self.stride)
            wp, rem_w = divmod(w - self.window, self.stride)
            if rem_h or rem_w or hp < 0 or wp < 0:
                raise SpecError(f"{self.name}: geometry {h}x{w} / window {self.window} stride {self.stride}")
            return (hp + 1, wp + 1, c)
        if self.kind == "fully_connected":
            if int(np.prod(in_shape)) != self.fan_in:
                raise SpecError(f"{self.name}: fan-in {self.fan_in} vs input {in_shape}")
            return (self.fan_out,)
        if self.kind == "relu":
            return in_shape
        raise SpecError(f"unknown layer kind '{self.kind}'")

    def mac_count(self, in_shape: tuple) -> int:
        """Multiplies per inference: conv H'W'k^2*Cin*Cout, FC Nin*Nout, else 0."""
        if self.kind == "conv":
            hp, wp, cout = self.out_shape(in_shape)
            return hp * wp * self.kernel * self.kernel * self.in_channels * cout
        if self.kind == "fully_connected":
            return self.fan_in * self.fan_out
        return 0


@dataclass
class NetworkSpec:
    name: str
    layers: list[LayerSpec]
    input_shape: tuple
    output_count: int

    def shape_chain(self, validate_output: bool = True) -> list[tuple]:
        """Shapes from input through every layer; raises if inconsistent.

        validate_output=False admits headless specs (e.g. pooling only), which
        the cost model still needs to account for.
        """
        shapes = [tuple(self.input_shape)]
        for layer in self.layers:
            shapes.append(layer.out_shape(shapes[-1]))
        if validate_output and self.layers and shapes[-1] != (self.output_count,):
            raise SpecError(f"{self.name}: final shape {shapes[-1]} vs output_count {self.output_count}")
        return shapes

    def weight_count(self) -> int:
        return sum(layer.weight_count() for layer in self.layers)

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "input_shape": list(self.input_shape),
                "output_count": self.output_count,
                "layers": [vars(layer) for layer in self.layers],
            },
            indent=2,
        )

    @staticmethod
    def from_json(text: str) -> "NetworkSpec":
        raw = json.loads(text)
        return NetworkSpec(
            name=raw["name"],
            layers=[LayerSpec(**entry) for entry in raw["layers"]],
            input_shape=tuple(raw["input_shape"]),
            output_count=raw["output_count"],
        )


def build_ge(class_count: int = 62) -> NetworkSpec:
    """Global expert: conv(5x5,20) pool(2) conv(5x5,50) pool(2) fc(500) relu fc(K).

    The 28 -> 24 -> 12 -> 8 -> 4 shape chain puts the tapped feature maps at
    12x12x20 after the first pool.
    """
    layers = [
        LayerSpec("conv1", "conv", kernel=5, in_channels=1, filters=20, stride=1),
        LayerSpec("pool1", "maxpool", window=2, stride=2),
        LayerSpec("conv2", "conv", kernel=5, in_channels=20, filters=50, stride=1),
        LayerSpec("pool2", "maxpool", window=2, stride=2),
        LayerSpec("fc1", "fully_connected", fan_in=4 * 4 * 50, fan_out=500),
        LayerSpec("relu1", "relu"),
        LayerSpec("fc2", "fully_connected", fan_in=500, fan_out=class_count),
    ]
    spec = NetworkSpec("ge", layers, (28, 28, 1), class_count)
    spec.shape_chain()
    return spec


def _head_spec(name: str, side: int, outputs: int) -> NetworkSpec:
    if side <= 0 or TAP_SIDE % side:
        raise SpecError(f"{name}: pooled side {side} does not divide the {TAP_SIDE}-wide tap")
    window = TAP_SIDE // side
    layers = [
        LayerSpec(f"pool_{name}", "maxpool", window=window, stride=window),
        LayerSpec(f"fc_{name}", "fully_connected", fan_in=side * side * TAP_CHANNELS, fan_out=outputs),
    ]
    spec = NetworkSpec(name, layers, (TAP_SIDE, TAP_SIDE, TAP_CHANNELS), outputs)
    spec.shape_chain()
    return spec


def build_le(n: int, class_count: int = 62) -> NetworkSpec:
    """Local expert head over the tap: maxpool to n x n x 20, then FC to K."""
    return _head_spec("le", n, class_count)


def build_gn(m: int) -> NetworkSpec:
    """Gating head over the tap: maxpool to m x m x 20, then FC to 2 outputs."""
    return _head_spec("gn", m, 2)


@dataclass
class FeatureTap:
    """Where LE/GN attach to GE: the layer index after the first conv+pool
    block, plus the activation shape there. Exposes no weights."""

    source_layer: int
    tap_shape: tuple


def ge_feature_tap(ge_spec: NetworkSpec) -> FeatureTap:
    shapes = ge_spec.shape_chain()
    for i, layer in enumerate(ge_spec.layers):
        if layer.kind == "maxpool":
            return FeatureTap(source_layer=i, tap_shape=shapes[i + 1])
    raise SpecError(f"{ge_spec.name}: no pooling layer to tap")


class Network:
    """A spec bound to parameter stores, with forward passes over the tape ops."""

    def __init__(self, spec: NetworkSpec, params: list[Optional[T.LayerParams]]):
        self.spec = spec
        self.params = params
        self.trained = False

    @staticmethod
    def build(spec: NetworkSpec, seed: int) -> "Network":
        spec.shape_chain()
        rng = np.random.default_rng(seed)
        params: list[Optional[T.LayerParams]] = []
        for layer in spec.layers:
            shapes = layer.param_shapes()
            if shapes is None:
                params.append(None)
                continue
            w_shape, b_shape = shapes
            if layer.kind == "conv":
                fan_in = layer.kernel * layer.kernel * layer.in_channels
                fan_out = layer.kernel * layer.kernel * layer.filters
            else:
                fan_in, fan_out = layer.fan_in, layer.fan_out
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, w_shape)
            params.append(T.LayerParams(layer.name, w, np.zeros(b_shape)))
        return Network(spec, params)

    # -- parameter access ---------------------------------------------------

    def param_list(self) -> list[T.LayerParams]:
        return [p for p in self.params if p is not None]

    def trainable(self) -> list[T.LayerParams]:
        return [p for p in self.param_list() if not p.frozen]

    def freeze(self) -> None:
        for p in self.param_list():
            p.freeze()

    def is_frozen(self) -> bool:
        return all(p.frozen for p in self.param_list())

    def weight_count(self) -> int:
        """Allocated weight elements, biases excluded (spec/runtime cross-check)."""
        return sum(p.weights.size for p in self.param_list())

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for p in self.param_list():
            out[f"{p.name}.weights"] = p.weights
            out[f"{p.name}.biases"] = p.biases
        return out

    def load_state(self, mapping, trained: bool = True) -> None:
        for p in self.param_list():
            for attr, key in (("weights", f"{p.name}.weights"), ("biases", f"{p.name}.biases")):
                if key not in mapping:
                    raise SpecError(f"checkpoint is missing entry '{key}'")
                arr = np.asarray(mapping[key], dtype=np.float64)
                if arr.shape != getattr(p, attr).shape:
                    raise SpecError(
                        f"checkpoint entry '{key}' has shape {arr.shape}, expected {getattr(p, attr).shape}"
                    )
                setattr(p, attr, arr.copy())
        self.trained = trained

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state().items()}

    def clone(self, unfreeze: bool = False) -> "Network":
        params = []
        for p in self.params:
            if p is None:
                params.append(None)
            else:
                params.append(
                    T.LayerParams(p.name, p.weights.copy(), p.biases.copy(), frozen=p.frozen and not unfreeze)
                )
        net = Network(self.spec, params)
        net.trained = self.trained
        return net

    # -- forward ------------------------------------------------------------

    def _apply(self, layer: LayerSpec, params, x, tape):
        if layer.kind == "conv":
            return T.conv2d(x, params, layer.stride, tape)
        if layer.kind == "maxpool":
            out, _ = T.maxpool(x, layer.window, layer.stride, tape)
            return out
        if layer.kind == "fully_connected":
            return T.fully_connected(x, params, tape)
        if layer.kind == "relu":
            return T.relu(x, tape)
        raise SpecError(f"unknown layer kind '{layer.kind}'")

    def forward(self, x, tape: T.Tape | None = None):
        for layer, params in zip(self.spec.layers, self.params):
            x = self._apply(layer, params, x, tape)
        return x

    def forward_range(self, x, start: int, stop: int, tape: T.Tape | None = None):
        """Run layers [start, stop); used for the tap prefix and suffix."""
        for layer, params in list(zip(self.spec.layers, self.params))[start:stop]:
            x = self._apply(layer, params, x, tape)
        return x


def tap_features(ge: Network, x, tap: FeatureTap | None = None):
    """Activations at the tap; the only thing GE reveals to LE and GN."""
    if tap is None:
        tap = ge_feature_tap(ge.spec)
    return ge.forward_range(x, 0, tap.source_layer + 1)


def forward_with_tap(ge: Network, le: Network, gn: Network, x, tap: FeatureTap | None = None):
    """Evaluate all three experts with the shared prefix computed exactly once.

    Returns (ge_logits, le_logits, gn_logits, tap_activations).
    """
    if tap is None:
        tap = ge_feature_tap(ge.spec)
    for head in (le, gn):
        if tuple(head.spec.input_shape) != tuple(tap.tap_shape):
            raise T.ShapeError(
                f"{head.spec.name} expects input {head.spec.input_shape}, tap provides {tap.tap_shape}"
            )
    feats = tap_features(ge, x, tap)
    ge_logits = ge.forward_range(feats, tap.source_layer + 1, len(ge.spec.layers))
    le_logits = le.forward(feats)
    gn_logits = gn.forward(feats)
    return ge_logits, le_logits, gn_logits, feats
