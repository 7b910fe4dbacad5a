from __future__ import annotations
import math
from dataclasses import dataclass, asdict
from typing import Any, Dict, List, Tuple, Union

from .errors import DimensionError, ValidationError
from .types import Activation, LossKind, Padding

Shape = Tuple[int, ...]


def conv_output_size(size: int, kernel: int, stride: int, padding: Padding) -> int:
    """Output length along one spatial axis of a convolution."""
    if padding == Padding.SAME:
        return math.ceil(size / stride)
    if kernel > size:
        raise DimensionError(f"kernel {kernel} larger than input {size}")
    return (size - kernel) // stride + 1


def same_padding(size: int, kernel: int, stride: int) -> Tuple[int, int]:
    """(before, after) zero padding for `same` mode; odd totals put the extra row after."""
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


@dataclass(frozen=True)
class DenseSpec:
    """
    Fully connected layer descriptor:
    - n_in / n_out: c and c' of the weight matrix
    - activation: softplus / relu / linear / softmax
    """
    n_in: int
    n_out: int
    activation: Activation = Activation.SOFTPLUS
    kind: str = "dense"

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 1 or input_shape[0] != self.n_in:
            raise DimensionError(f"dense expects ({self.n_in},), got {input_shape}")
        return (self.n_out,)


@dataclass(frozen=True)
class ConvSpec:
    """
    2-D convolution descriptor. Kernels are stored k_h x k_w x c_in x n_filters.
    """
    k_h: int
    k_w: int
    c_in: int
    n_filters: int
    activation: Activation = Activation.RELU
    stride: int = 1
    padding: Padding = Padding.VALID
    kind: str = "conv"

    def __post_init__(self) -> None:
        if min(self.k_h, self.k_w, self.c_in, self.n_filters, self.stride) < 1:
            raise ValidationError(f"conv dimensions must be >= 1: {self}")

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3:
            raise DimensionError(f"conv expects (h, w, c), got {input_shape}")
        h, w, c = input_shape
        if c != self.c_in:
            raise DimensionError(f"conv expects {self.c_in} channels, got {c} (input {input_shape})")
        return (
            conv_output_size(h, self.k_h, self.stride, self.padding),
            conv_output_size(w, self.k_w, self.stride, self.padding),
            self.n_filters,
        )


@dataclass(frozen=True)
class PoolSpec:
    """Max-pooling descriptor; stride defaults to the window height."""
    p_h: int = 2
    p_w: int = 2
    stride: int = 0
    kind: str = "pool"

    def __post_init__(self) -> None:
        if self.p_h < 1 or self.p_w < 1 or self.stride < 0:
            raise ValidationError(f"pool window/stride must be >= 1: {self}")
        if self.stride == 0:
            object.__setattr__(self, "stride", self.p_h)

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3:
            raise DimensionError(f"pool expects (h, w, c), got {input_shape}")
        h, w, c = input_shape
        if self.p_h > h or self.p_w > w:
            raise DimensionError(f"pool window ({self.p_h}, {self.p_w}) does not fit input {input_shape}")
        return ((h - self.p_h) // self.stride + 1, (w - self.p_w) // self.stride + 1, c)


@dataclass(frozen=True)
class FlattenSpec:
    kind: str = "flatten"

    def output_shape(self, input_shape: Shape) -> Shape:
        return (int(math.prod(input_shape)),)


LayerSpec = Union[DenseSpec, ConvSpec, PoolSpec, FlattenSpec]


def layer_to_dict(layer: LayerSpec) -> Dict[str, Any]:
    d = asdict(layer)
    for k, v in d.items():
        if isinstance(v, (Activation, Padding)):
            d[k] = v.value
    return d


def layer_from_dict(d: Dict[str, Any]) -> LayerSpec:
    kind = d.get("kind")
    if kind == "dense":
        return DenseSpec(int(d["n_in"]), int(d["n_out"]), Activation(d["activation"]))
    if kind == "conv":
        return ConvSpec(
            k_h=int(d["k_h"]),
            k_w=int(d["k_w"]),
            c_in=int(d["c_in"]),
            n_filters=int(d["n_filters"]),
            activation=Activation(d["activation"]),
            stride=int(d["stride"]),
            padding=Padding(d["padding"]),
        )
    if kind == "pool":
        return PoolSpec(int(d["p_h"]), int(d["p_w"]), int(d["stride"]))
    if kind == "flatten":
        return FlattenSpec()
    raise ValidationError(f"Unknown layer kind: {kind}")


@dataclass
class NetworkSpec:
    """
    Layered model description: input shape (per sample), ordered layers, loss.
    """
    input_shape: Shape
    layers: List[LayerSpec]
    loss: LossKind = LossKind.MSE

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.loss = LossKind(self.loss)

    def shapes(self) -> List[Shape]:
        """
        Per-sample shape after every layer (index 0 is the input).
        Raises DimensionError naming the first layer that does not compose.
        """
        out = [self.input_shape]
        for k, layer in enumerate(self.layers):
            try:
                out.append(layer.output_shape(out[-1]))
            except DimensionError as e:
                raise DimensionError(f"layer {k} ({layer.kind}): {e}") from e
        return out

    def validate(self) -> None:
        if not self.layers:
            raise ValidationError("network needs at least one layer")
        self.shapes()
        last = self.layers[-1]
        if not isinstance(last, DenseSpec):
            raise ValidationError("final layer must be dense")
        want = Activation.LINEAR if self.loss == LossKind.MSE else Activation.SOFTMAX
        if last.activation != want:
            raise ValidationError(f"loss {self.loss.value} requires final activation {want.value}, got {last.activation.value}")
        for k, layer in enumerate(self.layers[:-1]):
            if getattr(layer, "activation", None) == Activation.SOFTMAX:
                raise ValidationError(f"softmax only allowed on the final layer (layer {k})")

    @property
    def output_dim(self) -> int:
        return self.shapes()[-1][0]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer_to_dict(x) for x in self.layers],
            "loss": self.loss.value,
        }

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "NetworkSpec":
        return NetworkSpec(
            input_shape=tuple(d["input_shape"]),
            layers=[layer_from_dict(x) for x in d["layers"]],
            loss=LossKind(d["loss"]),
        )


def mlp_spec(sizes: List[int], hidden: Activation, output: Activation, loss: LossKind) -> NetworkSpec:
    """Dense stack sizes[0] -> sizes[1] -> ... -> sizes[-1]."""
    layers: List[LayerSpec] = []
    for i in range(len(sizes) - 1):
        act = output if i == len(sizes) - 2 else hidden
        layers.append(DenseSpec(sizes[i], sizes[i + 1], act))
    return NetworkSpec(input_shape=(sizes[0],), layers=layers, loss=loss)
