"""
Dense feed-forward networks with ReLU hidden layers and exact reverse-mode
gradients. Everything is float64 numpy; parameters live in one flat vector
with per-layer views.
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from lab.exceptions import NonFiniteParamsError, PreconditionError, ShapeError


class HeadKind(str, Enum):
    SOFTMAX = "softmax"
    MEAN_ONLY = "mean"
    MEAN_LOGVAR = "mean_logvar"


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    head: HeadKind = HeadKind.SOFTMAX

    def __post_init__(self):
        widths = tuple(int(width) for width in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "head", HeadKind(self.head))

        if len(widths) < 2:
            raise ShapeError(f"Need at least input and output widths, got {widths}")
        if any(width < 1 for width in widths):
            raise ShapeError(f"Layer widths must be positive, got {widths}")

        out = widths[-1]
        if self.head is HeadKind.MEAN_ONLY and out != 1:
            raise ShapeError(f"Mean-only regression head needs output width 1, got {out}")
        if self.head is HeadKind.MEAN_LOGVAR and out != 2:
            raise ShapeError(f"Mean/log-variance head needs output width 2, got {out}")

    @classmethod
    def from_string(cls, text, head=HeadKind.SOFTMAX):
        return cls(tuple(int(part) for part in text.split("-")), head)

    @property
    def input_width(self):
        return self.layer_widths[0]

    @property
    def output_width(self):
        return self.layer_widths[-1]

    @property
    def n_classes(self):
        if self.head is not HeadKind.SOFTMAX:
            raise ShapeError(f"{self} is not a classifier")
        return self.layer_widths[-1]

    @property
    def layer_shapes(self):
        return list(zip(self.layer_widths[:-1], self.layer_widths[1:]))

    def __str__(self):
        return "-".join(str(width) for width in self.layer_widths)


def num_params(spec, include_biases=True):
    """Total parameter count; include_biases=False gives the weights-only count."""
    total = 0
    for fan_in, fan_out in spec.layer_shapes:
        total += fan_in * fan_out
        if include_biases:
            total += fan_out
    return total


class ParamVector:
    """Flat float64 parameters laid out as W_1, b_1, W_2, b_2, ... (W is fan_in x fan_out)."""

    __slots__ = ("spec", "values")

    def __init__(self, spec, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != num_params(spec):
            raise ShapeError(
                f"{spec} needs {num_params(spec)} parameters, got shape {values.shape}"
            )
        if not np.isfinite(values).all():
            raise NonFiniteParamsError(f"{spec} parameters must be finite")
        self.spec = spec
        self.values = values

    @classmethod
    def zeros(cls, spec):
        return cls(spec, np.zeros(num_params(spec)))

    @classmethod
    def from_layers(cls, spec, layers):
        chunks = []
        for (weights, bias), (fan_in, fan_out) in zip(layers, spec.layer_shapes):
            if weights.shape != (fan_in, fan_out) or bias.shape != (fan_out,):
                raise ShapeError(f"Layer shapes {weights.shape}/{bias.shape} do not fit {spec}")
            chunks.append(weights.ravel())
            chunks.append(bias)
        return cls(spec, np.concatenate(chunks))

    def layers(self):
        """Per-layer (weights, bias) views into the flat vector."""
        views = []
        offset = 0
        for fan_in, fan_out in self.spec.layer_shapes:
            weights = self.values[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            bias = self.values[offset:offset + fan_out]
            offset += fan_out
            views.append((weights, bias))
        return views

    def bias_mask(self):
        mask = np.zeros(len(self), dtype=bool)
        offset = 0
        for fan_in, fan_out in self.spec.layer_shapes:
            offset += fan_in * fan_out
            mask[offset:offset + fan_out] = True
            offset += fan_out
        return mask

    def with_values(self, values):
        return ParamVector(self.spec, values)

    def copy(self):
        return ParamVector(self.spec, self.values.copy())

    def __len__(self):
        return self.values.shape[0]

    def __repr__(self):
        return f"ParamVector({self.spec}, n={len(self)})"


@dataclass
class ForwardTrace:
    # activations[0] is the input batch; pre_activations[l] feeds activations[l + 1]
    activations: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)


def matmul(a, b):
    return a @ b


def relu(z):
    return np.maximum(z, 0.0)


def init_params(spec, rng, scale=np.sqrt(2.0)):
    """Weights ~ N(0, scale**2 / fan_in), zero biases. The default scale is He initialisation."""
    if not scale > 0:
        raise PreconditionError(f"Initialisation scale must be positive, got {scale}")

    layers = []
    for fan_in, fan_out in spec.layer_shapes:
        weights = rng.standard_normal((fan_in, fan_out)) * (scale / np.sqrt(fan_in))
        layers.append((weights, np.zeros(fan_out)))
    return ParamVector.from_layers(spec, layers)


def forward(spec, params, x_batch):
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.ndim != 2 or x_batch.shape[1] != spec.input_width:
        raise ShapeError(f"{spec} expects inputs with {spec.input_width} columns, got {x_batch.shape}")

    trace = ForwardTrace(activations=[x_batch])
    layers = params.layers()
    hidden = x_batch
    for index, (weights, bias) in enumerate(layers):
        z = matmul(hidden, weights) + bias
        trace.pre_activations.append(z)
        if index < len(layers) - 1:
            hidden = relu(z)
            trace.activations.append(hidden)
    return trace.pre_activations[-1], trace


def backward(spec, params, trace, output_grad):
    """Gradient of the batch-summed loss w.r.t. params, given d loss / d outputs."""
    output_grad = np.asarray(output_grad, dtype=np.float64)
    outputs = trace.pre_activations[-1]
    if output_grad.shape != outputs.shape:
        raise ShapeError(f"Output gradient shape {output_grad.shape} != outputs {outputs.shape}")

    layers = params.layers()
    grads = [None] * len(layers)
    delta = output_grad
    for index in range(len(layers) - 1, -1, -1):
        weights, _ = layers[index]
        grads[index] = (matmul(trace.activations[index].T, delta), delta.sum(axis=0))
        if index > 0:
            # ReLU subgradient at 0 is 0
            delta = matmul(delta, weights.T) * (trace.pre_activations[index - 1] > 0)
    return ParamVector.from_layers(spec, grads)
