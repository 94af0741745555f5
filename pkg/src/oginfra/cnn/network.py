"""Layer specifications and a small feed-forward network with optional skips."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from oginfra.cnn import ops
from oginfra.errors import ConfigError, ShapeError, UsageError


class LayerKind(str, Enum):
    CONV2D = "conv2d"
    MAXPOOL2D = "maxpool2d"
    RELU = "relu"
    DENSE = "dense"
    RESIDUAL_ADD = "residual_add"
    FLATTEN = "flatten"
    SIGMOID = "sigmoid"


@dataclass(frozen=True)
class LayerSpec:
    """One layer. Only the fields relevant to ``kind`` are used.

    ``skip_from`` indexes the network's activation list: 0 is the network
    input and ``k`` is the output of layer ``k - 1``.
    """

    kind: LayerKind
    channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    units: int = 0
    skip_from: int = -1

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LayerKind(self.kind))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LayerSpec:
        return cls(**d)


def conv(channels: int, kernel: int = 3, stride: int = 1, padding: int = 1) -> LayerSpec:
    return LayerSpec(LayerKind.CONV2D, channels=channels, kernel=kernel, stride=stride, padding=padding)


def maxpool(kernel: int = 2, stride: int | None = None) -> LayerSpec:
    return LayerSpec(LayerKind.MAXPOOL2D, kernel=kernel, stride=stride or kernel)


def relu() -> LayerSpec:
    return LayerSpec(LayerKind.RELU)


def dense(units: int) -> LayerSpec:
    return LayerSpec(LayerKind.DENSE, units=units)


def flatten() -> LayerSpec:
    return LayerSpec(LayerKind.FLATTEN)


def sigmoid() -> LayerSpec:
    return LayerSpec(LayerKind.SIGMOID)


def residual_add(skip_from: int) -> LayerSpec:
    return LayerSpec(LayerKind.RESIDUAL_ADD, skip_from=skip_from)


def _infer_shapes(specs: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    shapes = [tuple(input_shape)]
    for i, spec in enumerate(specs):
        cur = shapes[-1]
        kind = spec.kind
        if kind is LayerKind.CONV2D:
            if len(cur) != 3:
                raise ShapeError(f"layer {i} conv2d needs a (C, H, W) input, got {cur}")
            h = ops.conv_output_size(cur[1], spec.kernel, spec.stride, spec.padding)
            w = ops.conv_output_size(cur[2], spec.kernel, spec.stride, spec.padding)
            if h < 1 or w < 1 or spec.channels < 1:
                raise ShapeError(f"layer {i} conv2d does not fit input {cur}")
            cur = (spec.channels, h, w)
        elif kind is LayerKind.MAXPOOL2D:
            if len(cur) != 3:
                raise ShapeError(f"layer {i} maxpool2d needs a (C, H, W) input, got {cur}")
            h = ops.conv_output_size(cur[1], spec.kernel, spec.stride, 0)
            w = ops.conv_output_size(cur[2], spec.kernel, spec.stride, 0)
            if h < 1 or w < 1:
                raise ShapeError(f"layer {i} maxpool2d window larger than input {cur}")
            cur = (cur[0], h, w)
        elif kind is LayerKind.FLATTEN:
            cur = (int(np.prod(cur)),)
        elif kind is LayerKind.DENSE:
            if len(cur) != 1 or spec.units < 1:
                raise ShapeError(f"layer {i} dense needs a flat input, got {cur}")
            cur = (spec.units,)
        elif kind is LayerKind.RESIDUAL_ADD:
            if not 0 <= spec.skip_from <= i:
                raise ShapeError(f"layer {i} residual_add skip_from={spec.skip_from} must be in [0, {i}]")
            if shapes[spec.skip_from] != cur:
                raise ShapeError(
                    f"layer {i} residual_add joins {shapes[spec.skip_from]} with {cur}; shapes must match"
                )
        shapes.append(cur)
    return shapes


class Network:
    """A chain of layers where ``residual_add`` may reach back to any earlier activation."""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: tuple[int, ...], seed: int = 0):
        self.specs = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in specs]
        if not self.specs:
            raise ConfigError("a network needs at least one layer")
        self.input_shape = tuple(int(d) for d in input_shape)
        self.shapes = _infer_shapes(self.specs, self.input_shape)
        self.params: list[dict[str, np.ndarray]] = []
        self.grads: list[dict[str, np.ndarray]] = []
        self._caches: list | None = None
        rng = np.random.default_rng(seed)
        for spec, in_shape in zip(self.specs, self.shapes):
            p = {}
            if spec.kind is LayerKind.CONV2D:
                fan_in = in_shape[0] * spec.kernel * spec.kernel
                p["w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (spec.channels, in_shape[0], spec.kernel, spec.kernel))
                p["b"] = np.zeros(spec.channels)
            elif spec.kind is LayerKind.DENSE:
                p["w"] = rng.normal(0.0, np.sqrt(2.0 / in_shape[0]), (in_shape[0], spec.units))
                p["b"] = np.zeros(spec.units)
            self.params.append(p)
            self.grads.append({k: np.zeros_like(v) for k, v in p.items()})

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match model input {self.input_shape}")
        acts = [x]
        caches = []
        for spec, p in zip(self.specs, self.params):
            cur = acts[-1]
            kind = spec.kind
            if kind is LayerKind.CONV2D:
                out, cache = ops.conv2d_forward(cur, p["w"], p["b"], spec.stride, spec.padding)
            elif kind is LayerKind.MAXPOOL2D:
                out, cache = ops.maxpool2d_forward(cur, spec.kernel, spec.stride)
            elif kind is LayerKind.RELU:
                out, cache = ops.relu_forward(cur)
            elif kind is LayerKind.DENSE:
                out, cache = ops.dense_forward(cur, p["w"], p["b"])
            elif kind is LayerKind.FLATTEN:
                out, cache = ops.flatten_forward(cur)
            elif kind is LayerKind.SIGMOID:
                out, cache = ops.sigmoid_forward(cur)
            else:
                out, cache = ops.residual_forward(cur, acts[spec.skip_from])
            acts.append(out)
            caches.append(cache)
        self._caches = caches
        return acts[-1]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients into ``self.grads``; returns d(input)."""
        if self._caches is None:
            raise UsageError("backward called before forward")
        grads: list[np.ndarray | None] = [None] * (len(self.specs) + 1)
        grads[-1] = dout

        def add(i: int, g: np.ndarray) -> None:
            grads[i] = g if grads[i] is None else grads[i] + g

        for i in range(len(self.specs) - 1, -1, -1):
            spec, cache, g = self.specs[i], self._caches[i], grads[i + 1]
            if g is None:
                continue
            kind = spec.kind
            if kind is LayerKind.CONV2D:
                dx, dw, db = ops.conv2d_backward(g, cache)
                self.grads[i]["w"] += dw
                self.grads[i]["b"] += db
            elif kind is LayerKind.MAXPOOL2D:
                dx = ops.maxpool2d_backward(g, cache)
            elif kind is LayerKind.RELU:
                dx = ops.relu_backward(g, cache)
            elif kind is LayerKind.DENSE:
                dx, dw, db = ops.dense_backward(g, cache)
                self.grads[i]["w"] += dw
                self.grads[i]["b"] += db
            elif kind is LayerKind.FLATTEN:
                dx = ops.flatten_backward(g, cache)
            elif kind is LayerKind.SIGMOID:
                dx = ops.sigmoid_backward(g, cache)
            else:
                dx, dskip = ops.residual_backward(g, cache)
                add(spec.skip_from, dskip)
            add(i, dx)
        return grads[0]

    def zero_grad(self) -> None:
        for g in self.grads:
            for v in g.values():
                v.fill(0.0)

    def get_weights(self) -> list[dict[str, np.ndarray]]:
        return [{k: v.copy() for k, v in p.items()} for p in self.params]

    def set_weights(self, weights: list[dict[str, np.ndarray]]) -> None:
        if len(weights) != len(self.params):
            raise ShapeError(f"expected weights for {len(self.params)} layers, got {len(weights)}")
        for p, w in zip(self.params, weights):
            for k in p:
                if w[k].shape != p[k].shape:
                    raise ShapeError(f"weight {k}: shape {w[k].shape} != {p[k].shape}")
                p[k][...] = w[k]

    def n_parameters(self) -> int:
        return sum(v.size for p in self.params for v in p.values())


def build_classifier(
    input_shape: tuple[int, int, int],
    channels: Sequence[int] = (8, 16, 16),
    residual: bool = False,
    seed: int = 0,
) -> Network:
    """Binary classifier of ``len(channels)`` conv blocks followed by dense + sigmoid.

    A plain block is conv-relu-maxpool. With ``residual=True`` each block is
    conv-relu-conv-(add skip)-relu-maxpool, the skip reaching back to the
    first relu of the block.
    """
    specs: list[LayerSpec] = []
    for c in channels:
        specs += [conv(c), relu()]
        if residual:
            skip = len(specs)  # activation index of the relu output
            specs += [conv(c), residual_add(skip), relu()]
        specs.append(maxpool(2))
    specs += [flatten(), dense(1), sigmoid()]
    return Network(specs, input_shape, seed=seed)
