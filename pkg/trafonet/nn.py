from __future__ import annotations
import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.special import expit, softmax as _softmax

from .catalog import DenseSpec, FlattenSpec, NetworkSpec
from .errors import DimensionError, DivergenceError, StateError, ValidationError
from .types import Activation, LossKind

log = logging.getLogger(__name__)

SOFTPLUS_CUTOFF = 30.0
PROB_FLOOR = 1e-12
GRAD_FLOOR = 1e-4


def as_tensor(x, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or Inf")
    return arr


# --------- Activations ---------

def softplus(s):
    """
    log(1 + exp(s)), overflow-safe: s + exp(-s) above the cutoff, exp(s) below -cutoff.
    Accepts a float or an array and returns the same kind.
    """
    arr = np.asarray(s, dtype=np.float64)
    mid = np.log1p(np.exp(np.clip(arr, -SOFTPLUS_CUTOFF, SOFTPLUS_CUTOFF)))
    hi = arr + np.exp(-np.abs(arr))
    lo = np.exp(np.minimum(arr, 0.0))
    out = np.where(arr > SOFTPLUS_CUTOFF, hi, np.where(arr < -SOFTPLUS_CUTOFF, lo, mid))
    if np.ndim(s) == 0:
        return float(out)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    return _softmax(np.asarray(z, dtype=np.float64), axis=-1)


def activate(act: Activation, z: np.ndarray) -> np.ndarray:
    if act == Activation.LINEAR:
        return z
    if act == Activation.SOFTPLUS:
        return softplus(z)
    if act == Activation.RELU:
        return np.maximum(z, 0.0)
    if act == Activation.SOFTMAX:
        return softmax(z)
    raise ValidationError(f"Unknown activation: {act}")


def activation_backward(act: Activation, z: np.ndarray, a: np.ndarray, grad_a: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the pre-activation z given the gradient w.r.t. a = act(z)."""
    if act == Activation.LINEAR:
        return grad_a
    if act == Activation.SOFTPLUS:
        return grad_a * expit(z)
    if act == Activation.RELU:
        return grad_a * (z > 0.0)
    if act == Activation.SOFTMAX:
        return a * (grad_a - np.sum(grad_a * a, axis=-1, keepdims=True))
    raise ValidationError(f"Unknown activation: {act}")


# --------- Losses ---------

def _rows(y: np.ndarray) -> int:
    return y.shape[0] if y.ndim > 0 else 1


def loss_mse(y, f) -> float:
    """(1/n) * sum of squared errors, n = number of rows."""
    y = np.asarray(y, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if y.shape != f.shape:
        raise DimensionError(f"mse shape mismatch: target {y.shape} vs prediction {f.shape}")
    return float(np.sum((y - f) ** 2) / _rows(y))


def check_onehot(y: np.ndarray) -> None:
    if y.ndim != 2:
        raise ValidationError(f"one-hot labels must be 2-D, got shape {y.shape}")
    ok = np.all((y == 0.0) | (y == 1.0), axis=1) & (np.sum(y, axis=1) == 1.0)
    if not np.all(ok):
        bad = int(np.flatnonzero(~ok)[0])
        raise ValidationError(f"label row {bad} is not one-hot: {y[bad].tolist()}")


def loss_cross_entropy(y_onehot, p) -> float:
    """Mean over samples of -sum_k y_k log p_k, probabilities clamped to [1e-12, 1]."""
    y = np.asarray(y_onehot, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise DimensionError(f"cross-entropy shape mismatch: labels {y.shape} vs probabilities {p.shape}")
    check_onehot(y)
    if not np.allclose(p.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
        raise ValidationError("probability rows must sum to 1")
    logp = np.log(np.clip(p, PROB_FLOOR, 1.0))
    return float(-np.sum(y * logp) / y.shape[0])


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# --------- Layers ---------

class DenseLayer:
    """
    Fully connected layer sigma(xW + b):
      weights c x c', bias c', activation.
    Forward caches x, z and a for the backward pass.
    """

    def __init__(self, weights: np.ndarray, bias: np.ndarray, activation: Activation = Activation.LINEAR) -> None:
        self.weights = np.array(weights, dtype=np.float64, ndmin=2)
        self.bias = np.array(bias, dtype=np.float64).reshape(-1)
        self.activation = Activation(activation)
        if self.bias.shape[0] != self.weights.shape[1]:
            raise DimensionError(f"bias length {self.bias.shape[0]} != weight columns {self.weights.shape[1]}")
        self.grads: Dict[str, np.ndarray] = {}
        self._cache: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None

    @staticmethod
    def init(spec: DenseSpec, rng: np.random.Generator) -> "DenseLayer":
        # Glorot uniform, zero bias
        bound = np.sqrt(6.0 / (spec.n_in + spec.n_out))
        w = rng.uniform(-bound, bound, size=(spec.n_in, spec.n_out))
        return DenseLayer(w, np.zeros(spec.n_out), spec.activation)

    @property
    def spec(self) -> DenseSpec:
        return DenseSpec(self.weights.shape[0], self.weights.shape[1], self.activation)

    def params(self) -> Dict[str, np.ndarray]:
        return {"W": self.weights, "b": self.bias}

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.weights.shape[0]:
            raise DimensionError(f"input {x.shape} does not match weights {self.weights.shape}")
        z = x @ self.weights + self.bias
        a = activate(self.activation, z)
        self._cache = (x, z, a)
        return a

    def backward(self, grad_a: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("backward called before forward")
        _, z, a = self._cache
        return self.backward_pre(activation_backward(self.activation, z, a, grad_a))

    def backward_pre(self, grad_z: np.ndarray) -> np.ndarray:
        """Backward pass starting from the gradient w.r.t. the pre-activation."""
        if self._cache is None:
            raise StateError("backward called before forward")
        x = self._cache[0]
        self.grads = {"W": x.T @ grad_z, "b": grad_z.sum(axis=0)}
        return grad_z @ self.weights.T


class FlattenLayer:
    def __init__(self) -> None:
        self.grads: Dict[str, np.ndarray] = {}
        self._shape: Optional[Tuple[int, ...]] = None

    @property
    def spec(self) -> FlattenSpec:
        return FlattenSpec()

    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._shape is None:
            raise StateError("backward called before forward")
        return grad.reshape(self._shape)


def fc_forward(layer: DenseLayer, x) -> np.ndarray:
    return layer.forward(as_tensor(x))


# --------- Network ---------

@dataclass
class GradientSet:
    """dL/dparam for every layer; parameterless layers hold an empty dict."""
    blocks: List[Dict[str, np.ndarray]]

    def items(self) -> Iterator[Tuple[int, str, np.ndarray]]:
        for k, block in enumerate(self.blocks):
            for name, g in block.items():
                yield k, name, g

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(g))) for _, _, g in self.items() if g.size), default=0.0)


class Network:
    """
    Parameter state of a NetworkSpec:
      - layers built from the spec (dense / conv / pool / flatten)
      - momentum buffers for sgd_step
      - cached output of the last forward pass
    """

    def __init__(self, spec: NetworkSpec, layers: List) -> None:
        self.spec = spec
        self.layers = layers
        self.velocity: List[Dict[str, np.ndarray]] = [dict() for _ in layers]
        self._output: Optional[np.ndarray] = None

    @staticmethod
    def from_spec(spec: NetworkSpec, seed: int = 0) -> "Network":
        from .conv import ConvLayer, PoolLayer

        spec.validate()
        rng = np.random.default_rng(seed)
        layers = []
        for layer_spec in spec.layers:
            if layer_spec.kind == "dense":
                layers.append(DenseLayer.init(layer_spec, rng))
            elif layer_spec.kind == "conv":
                layers.append(ConvLayer.init(layer_spec, rng))
            elif layer_spec.kind == "pool":
                layers.append(PoolLayer(layer_spec))
            else:
                layers.append(FlattenLayer())
        return Network(spec, layers)

    @property
    def loss_kind(self) -> LossKind:
        return self.spec.loss

    def params(self) -> List[Dict[str, np.ndarray]]:
        return [layer.params() for layer in self.layers]

    def n_params(self) -> int:
        return sum(p.size for block in self.params() for p in block.values())

    def copy(self) -> "Network":
        clone = copy.deepcopy(self)
        clone._output = None
        return clone

    def load_params(self, other: "Network") -> None:
        """Copy parameter values from a network of the same shape."""
        for k, (mine, theirs) in enumerate(zip(self.params(), other.params())):
            for name, arr in mine.items():
                if arr.shape != theirs[name].shape:
                    raise DimensionError(f"layer {k} {name}: {arr.shape} vs {theirs[name].shape}")
                arr[...] = theirs[name]

    def forward(self, x) -> np.ndarray:
        x = as_tensor(x)
        if x.shape[1:] != self.spec.input_shape:
            raise DimensionError(f"layer 0: input {x.shape} does not match {self.spec.input_shape}")
        for k, layer in enumerate(self.layers):
            try:
                x = layer.forward(x)
            except DimensionError as e:
                raise DimensionError(f"layer {k}: {e}") from e
        self._output = x
        return x

    def _collect(self) -> GradientSet:
        return GradientSet([dict(layer.grads) for layer in self.layers])

    def backward_output(self, grad_out: np.ndarray) -> GradientSet:
        """Backpropagate an arbitrary gradient w.r.t. the network output."""
        if self._output is None:
            raise StateError("network_backward called before network_forward")
        grad = np.asarray(grad_out, dtype=np.float64)
        if grad.shape != self._output.shape:
            raise DimensionError(f"upstream gradient {grad.shape} vs output {self._output.shape}")
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return self._collect()

    def backward_logits(self, grad_z: np.ndarray) -> GradientSet:
        """Backpropagate a gradient w.r.t. the final pre-activation (logits)."""
        if self._output is None:
            raise StateError("network_backward called before network_forward")
        grad = self.layers[-1].backward_pre(np.asarray(grad_z, dtype=np.float64))
        for layer in reversed(self.layers[:-1]):
            grad = layer.backward(grad)
        return self._collect()

    def _target(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1 and self._output.ndim == 2 and self._output.shape[1] == 1:
            y = y.reshape(-1, 1)
        if y.shape != self._output.shape:
            raise DimensionError(f"target {y.shape} vs output {self._output.shape}")
        return y

    def backward(self, y) -> GradientSet:
        if self._output is None:
            raise StateError("network_backward called before network_forward")
        y = self._target(y)
        n = y.shape[0]
        if self.loss_kind == LossKind.CROSS_ENTROPY:
            check_onehot(y)
            # softmax + CE collapses to (p - y) / n on the logits
            return self.backward_logits((self._output - y) / n)
        return self.backward_output(2.0 * (self._output - y) / n)

    def loss(self, x, y) -> float:
        f = self.forward(x)
        y = self._target(y)
        if self.loss_kind == LossKind.CROSS_ENTROPY:
            return loss_cross_entropy(y, f)
        return loss_mse(y, f)


def network_forward(net: Network, x) -> np.ndarray:
    return net.forward(x)


def network_backward(net: Network, y) -> GradientSet:
    return net.backward(y)


# --------- Optimization ---------

@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.0
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValidationError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


def sgd_step(net: Network, grads: GradientSet, cfg: SgdConfig) -> Network:
    """
    v <- momentum * v - lr * g; param <- param + v.
    All gradients are checked before any parameter moves.
    """
    params = net.params()
    if len(grads.blocks) != len(params):
        raise DimensionError(f"{len(grads.blocks)} gradient blocks for {len(params)} layers")
    for k, block in enumerate(params):
        for name, arr in block.items():
            g = grads.blocks[k].get(name)
            if g is None or g.shape != arr.shape:
                raise DimensionError(f"layer {k} {name}: gradient {None if g is None else g.shape} vs param {arr.shape}")
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in layer {k} ({name})")

    for k, block in enumerate(params):
        for name, arr in block.items():
            v = net.velocity[k].get(name)
            if v is None:
                v = net.velocity[k][name] = np.zeros_like(arr)
            v *= cfg.momentum
            v -= cfg.learning_rate * grads.blocks[k][name]
            arr += v
    return net


# --------- Gradient check ---------

@dataclass
class GradCheckEntry:
    layer: int
    param: str
    max_rel_error: float
    n_checked: int


@dataclass
class GradCheckReport:
    entries: List[GradCheckEntry] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def per_layer(self) -> Dict[int, float]:
        out: Dict[int, float] = {}
        for e in self.entries:
            out[e.layer] = max(out.get(e.layer, 0.0), e.max_rel_error)
        return out


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), GRAD_FLOOR)


def grad_check(
    net: Network,
    x,
    y,
    step: float = 1e-6,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare analytic gradients with central finite differences.
    max_entries samples that many entries per parameter block (seeded); None checks all.
    """
    if not 1e-8 <= step <= 1e-4:
        raise ValidationError(f"finite-difference step must be in [1e-8, 1e-4], got {step}")
    x = as_tensor(x)
    net.forward(x)
    analytic = net.backward(y)
    rng = np.random.default_rng(seed)

    report = GradCheckReport()
    for k, block in enumerate(net.params()):
        for name, arr in block.items():
            flat = arr.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            numeric = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                plus = net.loss(x, y)
                flat[i] = orig - step
                minus = net.loss(x, y)
                flat[i] = orig
                numeric[j] = (plus - minus) / (2.0 * step)
            a = analytic.blocks[k][name].reshape(-1)[idx]
            err = float(np.max(relative_error(a, numeric))) if idx.size else 0.0
            report.entries.append(GradCheckEntry(k, name, err, int(idx.size)))
    # leave the caches consistent with the unperturbed parameters
    net.forward(x)
    return report


# --------- Training helpers ---------

def predict(net: Network, x, batch_size: int = 256) -> np.ndarray:
    x = as_tensor(x)
    outs = [net.forward(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(outs, axis=0)


def accuracy(net: Network, x, labels) -> float:
    pred = np.argmax(predict(net, x), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def confusion_matrix(labels_true, labels_pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels_true), np.asarray(labels_pred)), 1)
    return cm


def fit(net: Network, x, y, cfg: SgdConfig, epochs: int) -> List[float]:
    """
    Mini-batch training with per-epoch shuffling from a generator seeded by cfg.seed.
    Returns the sample-weighted mean loss of every epoch.
    """
    x = as_tensor(x)
    y = np.asarray(y, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    history: List[float] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            total += net.loss(x[batch], y[batch]) * batch.size
            sgd_step(net, net.backward(y[batch]), cfg)
        history.append(total / n)
        if not np.isfinite(history[-1]):
            raise DivergenceError(f"loss became non-finite in epoch {epoch}")
        log.info("epoch %d/%d loss=%.6f", epoch + 1, epochs, history[-1])
    return history
