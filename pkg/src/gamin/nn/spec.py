"""Layer and architecture descriptions with static shape checking.

An ArchitectureSpec is a pure description: input/output dimensions plus an
ordered layer list. Shape propagation happens at construction so that any
mis-chained architecture fails loudly, naming the offending layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

ACTIVATIONS = ("identity", "relu", "tanh", "softmax")
LAYER_KINDS = ("dense", "conv2d", "maxpool2d", "dropout", "flatten", "reshape")
PADDINGS = ("valid", "same")


class SpecError(ValueError):
    """Raised for invalid layer parameters or a broken shape chain."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind, size parameters and an elementwise activation.

    Size parameters by kind -- dense: units; conv2d: filters, kernel,
    padding; maxpool2d: window; dropout: rate; reshape: shape. Activations
    other than identity are only meaningful on dense/conv2d.
    """

    kind: str
    units: int = 0
    filters: int = 0
    kernel: int = 0
    padding: str = "valid"
    window: int = 0
    rate: float = 0.0
    shape: tuple = ()
    activation: str = "identity"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.kind == "dense" and self.units < 1:
            raise SpecError("dense layer needs units >= 1")
        if self.kind == "conv2d":
            if self.filters < 1 or self.kernel < 1:
                raise SpecError("conv2d needs filters >= 1 and kernel >= 1")
            if self.padding not in PADDINGS:
                raise SpecError(f"conv2d padding must be one of {PADDINGS}")
        if self.kind == "maxpool2d" and self.window < 1:
            raise SpecError("maxpool2d needs window >= 1")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise SpecError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.kind == "reshape" and (not self.shape or any(s < 1 for s in self.shape)):
            raise SpecError("reshape needs a tuple of positive extents")
        if self.kind not in ("dense", "conv2d") and self.activation != "identity":
            raise SpecError(f"{self.kind} layer cannot carry activation {self.activation!r}")


def dense(units, activation="identity"):
    return LayerSpec("dense", units=units, activation=activation)


def conv2d(filters, kernel, padding="valid", activation="identity"):
    return LayerSpec("conv2d", filters=filters, kernel=kernel, padding=padding,
                     activation=activation)


def maxpool2d(window):
    return LayerSpec("maxpool2d", window=window)


def dropout(rate):
    return LayerSpec("dropout", rate=rate)


def flatten():
    return LayerSpec("flatten")


def reshape(shape):
    return LayerSpec("reshape", shape=tuple(shape))


def _chain(kind_idx, layer, shape):
    """Output shape of `layer` applied to per-sample `shape` (no batch dim)."""
    where = f"layer {kind_idx} ({layer.kind})"
    if layer.kind == "dense":
        if len(shape) != 1:
            raise SpecError(f"{where}: expects flat input, got {shape}")
        return (layer.units,)
    if layer.kind == "conv2d":
        if len(shape) != 3:
            raise SpecError(f"{where}: expects (channels, h, w) input, got {shape}")
        c, h, w = shape
        k = layer.kernel
        if layer.padding == "same":
            return (layer.filters, h, w)
        if k > h or k > w:
            raise SpecError(f"{where}: kernel {k} exceeds spatial extent {h}x{w}")
        return (layer.filters, h - k + 1, w - k + 1)
    if layer.kind == "maxpool2d":
        if len(shape) != 3:
            raise SpecError(f"{where}: expects (channels, h, w) input, got {shape}")
        c, h, w = shape
        p = layer.window
        if p > h or p > w:
            raise SpecError(f"{where}: window {p} exceeds spatial extent {h}x{w}")
        return (c, h // p, w // p)
    if layer.kind == "dropout":
        return shape
    if layer.kind == "flatten":
        return (int(math.prod(shape)),)
    if layer.kind == "reshape":
        if math.prod(shape) != math.prod(layer.shape):
            raise SpecError(f"{where}: cannot reshape {shape} to {layer.shape}")
        return layer.shape
    raise SpecError(f"{where}: unhandled kind")  # unreachable


@dataclass(frozen=True)
class ArchitectureSpec:
    """Input dim, output dim and the layer chain; validated on construction."""

    input_dim: int
    output_dim: int
    layers: tuple = ()
    # per-layer input shapes plus the final output shape, computed once
    shapes: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise SpecError("input_dim and output_dim must be positive")
        if not self.layers:
            raise SpecError("architecture needs at least one layer")
        shapes = [(self.input_dim,)]
        for i, layer in enumerate(self.layers):
            shapes.append(_chain(i, layer, shapes[-1]))
        if shapes[-1] != (self.output_dim,):
            raise SpecError(
                f"final layer produces {shapes[-1]}, expected ({self.output_dim},)")
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def layer_shapes(self):
        """(input_shape, output_shape) per layer."""
        return tuple(zip(self.shapes[:-1], self.shapes[1:]))

    def param_shapes(self):
        """Per layer: (weight_shape, bias_shape) or None for parameterless."""
        out = []
        for layer, (inshape, _) in zip(self.layers, self.layer_shapes):
            if layer.kind == "dense":
                out.append(((inshape[0], layer.units), (layer.units,)))
            elif layer.kind == "conv2d":
                c = inshape[0]
                out.append(((layer.filters, c, layer.kernel, layer.kernel),
                            (layer.filters,)))
            else:
                out.append(None)
        return out

    @property
    def has_dropout(self):
        return any(l.kind == "dropout" for l in self.layers)
