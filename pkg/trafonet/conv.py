from __future__ import annotations
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .catalog import ConvSpec, DenseSpec, FlattenSpec, NetworkSpec, PoolSpec, conv_output_size, same_padding
from .errors import DimensionError, StateError, ValidationError
from .nn import activate, activation_backward, as_tensor
from .types import Activation, LossKind, Padding


def _batched(x) -> Tuple[np.ndarray, bool]:
    """Promote a single h x w x c sample to a batch of one."""
    x = as_tensor(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DimensionError(f"expected (h, w, c) or (n, h, w, c), got {x.shape}")
    return x, False


class ConvLayer:
    """
    2-D convolution (cross-correlation, as CNN libraries define it):
      kernels k_h x k_w x c_in x n_filters, bias n_filters, activation, stride, padding.
    Works on n x h x w x c batches through an im2col view of the (padded) input.
    """

    def __init__(
        self,
        kernels: np.ndarray,
        bias: np.ndarray,
        activation: Activation = Activation.RELU,
        stride: int = 1,
        padding: Padding = Padding.VALID,
    ) -> None:
        self.kernels = np.array(kernels, dtype=np.float64)
        if self.kernels.ndim != 4:
            raise DimensionError(f"kernels must be k_h x k_w x c_in x n_filters, got {self.kernels.shape}")
        self.bias = np.array(bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.kernels.shape[3]:
            raise DimensionError(f"bias length {self.bias.shape[0]} != filters {self.kernels.shape[3]}")
        self.activation = Activation(activation)
        self.stride = int(stride)
        self.padding = Padding(padding)
        if self.stride < 1:
            raise ValidationError(f"stride must be >= 1, got {stride}")
        self.grads: Dict[str, np.ndarray] = {}
        self._cache = None

    @staticmethod
    def init(spec: ConvSpec, rng: np.random.Generator) -> "ConvLayer":
        fan_in = spec.k_h * spec.k_w * spec.c_in
        fan_out = spec.k_h * spec.k_w * spec.n_filters
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        k = rng.uniform(-bound, bound, size=(spec.k_h, spec.k_w, spec.c_in, spec.n_filters))
        return ConvLayer(k, np.zeros(spec.n_filters), spec.activation, spec.stride, spec.padding)

    @property
    def spec(self) -> ConvSpec:
        k_h, k_w, c_in, n_f = self.kernels.shape
        return ConvSpec(k_h, k_w, c_in, n_f, self.activation, self.stride, self.padding)

    def params(self) -> Dict[str, np.ndarray]:
        return {"K": self.kernels, "b": self.bias}

    def _pad(self, x: np.ndarray) -> Tuple[np.ndarray, Tuple[int, int, int, int]]:
        k_h, k_w = self.kernels.shape[:2]
        if self.padding == Padding.VALID:
            return x, (0, 0, 0, 0)
        top, bottom = same_padding(x.shape[1], k_h, self.stride)
        left, right = same_padding(x.shape[2], k_w, self.stride)
        xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
        return xp, (top, bottom, left, right)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise DimensionError(f"conv expects n x h x w x c, got {x.shape}")
        k_h, k_w, c_in, n_f = self.kernels.shape
        if x.shape[3] != c_in:
            raise DimensionError(f"input has {x.shape[3]} channels, kernels expect {c_in} (input {x.shape}, kernels {self.kernels.shape})")
        xp, pads = self._pad(x)
        if xp.shape[1] < k_h or xp.shape[2] < k_w:
            raise DimensionError(f"kernel {(k_h, k_w)} larger than padded input {xp.shape[1:3]}")
        out_h = conv_output_size(x.shape[1], k_h, self.stride, self.padding)
        out_w = conv_output_size(x.shape[2], k_w, self.stride, self.padding)

        # windows: n x H' x W' x c x k_h x k_w
        win = sliding_window_view(xp, (k_h, k_w), axis=(1, 2))
        win = win[:, ::self.stride, ::self.stride][:, :out_h, :out_w]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(x.shape[0], out_h, out_w, k_h * k_w * c_in)
        z = cols @ self.kernels.reshape(-1, n_f) + self.bias
        a = activate(self.activation, z)
        self._cache = (xp.shape, pads, cols, z, a)
        return a

    def backward(self, grad_a: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("conv2d_backward called before conv2d_forward")
        xp_shape, pads, cols, z, a = self._cache
        if grad_a.shape != a.shape:
            raise DimensionError(f"upstream gradient {grad_a.shape} vs output {a.shape}")
        k_h, k_w, c_in, n_f = self.kernels.shape
        grad_z = activation_backward(self.activation, z, a, grad_a)
        n, out_h, out_w, _ = grad_z.shape

        flat_z = grad_z.reshape(-1, n_f)
        self.grads = {
            "K": (cols.reshape(-1, cols.shape[-1]).T @ flat_z).reshape(self.kernels.shape),
            "b": flat_z.sum(axis=0),
        }

        dcols = (grad_z @ self.kernels.reshape(-1, n_f).T).reshape(n, out_h, out_w, k_h, k_w, c_in)
        dxp = np.zeros(xp_shape)
        s = self.stride
        for u in range(k_h):
            for v in range(k_w):
                dxp[:, u:u + s * (out_h - 1) + 1:s, v:v + s * (out_w - 1) + 1:s, :] += dcols[:, :, :, u, v, :]
        top, bottom, left, right = pads
        return dxp[:, top:xp_shape[1] - bottom, left:xp_shape[2] - right, :]


class PoolLayer:
    """
    Max pooling over p_h x p_w windows. Backward routes the gradient to the
    argmax of each window only; ties go to the first position in row-major order.
    """

    def __init__(self, spec: PoolSpec) -> None:
        self.pool = spec
        self.grads: Dict[str, np.ndarray] = {}
        self._cache: Optional[Tuple[Tuple[int, ...], np.ndarray]] = None

    @property
    def spec(self) -> PoolSpec:
        return self.pool

    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise DimensionError(f"pool expects n x h x w x c, got {x.shape}")
        out_h, out_w, c = self.pool.output_shape(x.shape[1:])
        p_h, p_w, s = self.pool.p_h, self.pool.p_w, self.pool.stride
        win = sliding_window_view(x, (p_h, p_w), axis=(1, 2))[:, ::s, ::s][:, :out_h, :out_w]
        flat = win.reshape(x.shape[0], out_h, out_w, c, p_h * p_w)
        arg = np.argmax(flat, axis=-1)
        self._cache = (x.shape, arg)
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("pool backward called before forward")
        shape, arg = self._cache
        n, out_h, out_w, c = arg.shape
        s, p_w = self.pool.stride, self.pool.p_w
        nn_, oi, oj, cc = np.indices(arg.shape)
        rows = oi * s + arg // p_w
        cols = oj * s + arg % p_w
        dx = np.zeros(shape)
        np.add.at(dx, (nn_, rows, cols, cc), grad)
        return dx


def conv2d_forward(layer: ConvLayer, x) -> np.ndarray:
    xb, single = _batched(x)
    y = layer.forward(xb)
    return y[0] if single else y


def conv2d_backward(layer: ConvLayer, upstream_grad) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (input_grad, kernel_grads, bias_grads)."""
    if layer._cache is None:
        raise StateError("conv2d_backward called before conv2d_forward")
    g = np.asarray(upstream_grad, dtype=np.float64)
    single = g.ndim == 3
    dx = layer.backward(g[None] if single else g)
    return (dx[0] if single else dx), layer.grads["K"], layer.grads["b"]


def maxpool2d(layer: PoolLayer, x) -> np.ndarray:
    xb, single = _batched(x)
    y = layer.forward(xb)
    return y[0] if single else y


def build_oltc_cnn(
    n_mels: int,
    n_frames: int,
    n_classes: int,
    conv_activation: Activation = Activation.RELU,
) -> NetworkSpec:
    """
    Reference OLTC classifier on n_mels x n_frames x 1 spectrograms:
    conv 3x3x16 -> pool 2x2 -> conv 3x3x32 -> pool 2x2 -> flatten
    -> dense 128 (softplus) -> dense n_classes (softmax), cross-entropy.
    """
    if n_mels < 8 or n_frames < 8:
        raise DimensionError(f"input {n_mels}x{n_frames} too small for two pooling stages (need >= 8x8)")
    if n_classes < 2:
        raise ValidationError(f"n_classes must be >= 2, got {n_classes}")
    head = [
        ConvSpec(3, 3, 1, 16, conv_activation, 1, Padding.SAME),
        PoolSpec(2, 2, 2),
        ConvSpec(3, 3, 16, 32, conv_activation, 1, Padding.SAME),
        PoolSpec(2, 2, 2),
        FlattenSpec(),
    ]
    flat = NetworkSpec((n_mels, n_frames, 1), head).shapes()[-1][0]
    spec = NetworkSpec(
        input_shape=(n_mels, n_frames, 1),
        layers=head + [DenseSpec(flat, 128, Activation.SOFTPLUS), DenseSpec(128, n_classes, Activation.SOFTMAX)],
        loss=LossKind.CROSS_ENTROPY,
    )
    spec.validate()
    return spec
