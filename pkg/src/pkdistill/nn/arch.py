"""Layer specs and the architecture descriptor.

An :class:`ArchDescriptor` is the single source of truth for a network's
shape: parameter layout, parameter count and the canonical text written into
checkpoint headers are all pure functions of it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Union


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class MaxPool2x2:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_features: int


Layer = Union[Conv2D, MaxPool2x2, ReLU, Flatten, Dense]

_KIND = {Conv2D: "conv2d", MaxPool2x2: "maxpool2x2", ReLU: "relu", Flatten: "flatten", Dense: "dense"}
_BY_KIND = {v: k for k, v in _KIND.items()}

N_CLASSES = 2


class ArchError(ValueError):
    pass


@dataclass(frozen=True)
class ArchDescriptor:
    """Input geometry ``(height, width, channels)`` plus an ordered layer list."""

    input: tuple[int, int, int]
    layers: tuple[Layer, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "input", tuple(int(v) for v in self.input))
        object.__setattr__(self, "layers", tuple(self.layers))

    def shapes(self) -> list[tuple[int, ...]]:
        """Activation shape after each layer, channels-first; index 0 is the input."""
        h, w, c = self.input
        if min(h, w, c) < 1:
            raise ArchError(f"input dimensions must be positive, got {self.input}")
        shape: tuple[int, ...] = (c, h, w)
        out = [shape]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2D):
                if len(shape) != 3:
                    raise ArchError(f"layer {i} conv2d needs a (C, H, W) input, got {shape}")
                c, h, w = shape
                k, s, p = layer.kernel, layer.stride, layer.padding
                if k < 1 or s < 1 or p < 0 or layer.out_channels < 1:
                    raise ArchError(f"layer {i} conv2d has invalid hyperparameters {layer}")
                span_h, span_w = h + 2 * p - k, w + 2 * p - k
                if span_h < 0 or span_w < 0:
                    raise ArchError(f"layer {i} conv2d kernel {k} larger than padded input {h}x{w}")
                if span_h % s or span_w % s:
                    raise ArchError(f"layer {i} conv2d stride {s} does not tile padded input {h}x{w}")
                shape = (layer.out_channels, span_h // s + 1, span_w // s + 1)
            elif isinstance(layer, MaxPool2x2):
                if len(shape) != 3:
                    raise ArchError(f"layer {i} maxpool2x2 needs a (C, H, W) input, got {shape}")
                c, h, w = shape
                if h % 2 or w % 2:
                    raise ArchError(f"layer {i} maxpool2x2 needs even height and width, got {h}x{w}")
                shape = (c, h // 2, w // 2)
            elif isinstance(layer, ReLU):
                pass
            elif isinstance(layer, Flatten):
                n = 1
                for d in shape:
                    n *= d
                shape = (n,)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ArchError(f"layer {i} dense needs a flat input, got {shape}; add Flatten")
                if layer.out_features < 1:
                    raise ArchError(f"layer {i} dense has invalid out_features {layer.out_features}")
                shape = (layer.out_features,)
            else:
                raise ArchError(f"layer {i}: unknown layer type {type(layer).__name__}")
            out.append(shape)
        return out

    def validate(self) -> None:
        """Check that layers chain to a terminal Dense producing two logits."""
        shapes = self.shapes()
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ArchError("architecture must end with a Dense layer")
        if shapes[-1] != (N_CLASSES,):
            raise ArchError(f"terminal Dense must output {N_CLASSES} logits, got {shapes[-1]}")

    def param_shapes(self) -> list[tuple[int, ...]]:
        """Weight and bias shapes in descriptor order (weights then bias per layer)."""
        shapes = self.shapes()
        out: list[tuple[int, ...]] = []
        for layer, shape_in in zip(self.layers, shapes):
            if isinstance(layer, Conv2D):
                out.append((layer.out_channels, shape_in[0], layer.kernel, layer.kernel))
                out.append((layer.out_channels,))
            elif isinstance(layer, Dense):
                out.append((layer.out_features, shape_in[0]))
                out.append((layer.out_features,))
        return out

    def param_layers(self) -> list[int]:
        """Index into ``layers`` of the layer owning each parameter tensor."""
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (Conv2D, Dense)):
                out.extend([i, i])
        return out

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = {"type": _KIND[type(layer)]}
            d.update(layer.__dict__)
            layers.append(d)
        return {"input": list(self.input), "layers": layers}

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        layers = []
        for spec in d["layers"]:
            spec = dict(spec)
            kind = spec.pop("type")
            if kind not in _BY_KIND:
                raise ArchError(f"unknown layer type {kind!r}")
            layers.append(_BY_KIND[kind](**spec))
        return cls(tuple(d["input"]), tuple(layers))

    @classmethod
    def from_text(cls, text: str) -> "ArchDescriptor":
        return cls.from_dict(json.loads(text))


def param_count(arch: ArchDescriptor) -> int:
    """Total number of weight and bias elements."""
    total = 0
    for shape in arch.param_shapes():
        n = 1
        for d in shape:
            n *= d
        total += n
    return total


def five_stage(channels: tuple[int, int, int], size: int = 32) -> ArchDescriptor:
    """Three convolutions, two 2x2 pools and one classifying dense layer."""
    c1, c2, c3 = channels
    return ArchDescriptor(
        (size, size, 3),
        (
            Conv2D(c1, 5, 1, 2), ReLU(), MaxPool2x2(),
            Conv2D(c2, 5, 1, 2), ReLU(), MaxPool2x2(),
            Conv2D(c3, 3, 1, 1), ReLU(),
            Flatten(), Dense(N_CLASSES),
        ),
    )


STUDENT = five_stage((32, 64, 128))
TEACHER_MEMBER = five_stage((48, 96, 192))

NAMED_ARCHS = {"student": STUDENT, "teacher": TEACHER_MEMBER}


def resolve_arch(spec: str | dict | ArchDescriptor) -> ArchDescriptor:
    """Accept a registered name, a descriptor dict or a descriptor."""
    if isinstance(spec, ArchDescriptor):
        arch = spec
    elif isinstance(spec, str):
        if spec not in NAMED_ARCHS:
            raise ArchError(f"unknown architecture name {spec!r}; known: {sorted(NAMED_ARCHS)}")
        arch = NAMED_ARCHS[spec]
    else:
        arch = ArchDescriptor.from_dict(spec)
    arch.validate()
    return arch
