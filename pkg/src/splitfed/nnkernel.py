"""Float64 training kernel for small 1D CNNs.

Forward, backward, softmax cross-entropy and plain SGD over an explicit list
of layer descriptors. Tensors are numpy ``float64`` arrays laid out as
``(batch, channels, length)`` for sequence layers and ``(batch, features)``
after :class:`Flatten`.

Every function is pure: inputs are never mutated, so parameter sets can be
shared between threads without copying.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer it is fed to."""

    def __init__(self, layer_index: int, message: str):
        super().__init__(f"layer {layer_index}: {message}")
        self.layer_index = layer_index


def output_length(a_in: int, f: int, s: int, p: int = 0) -> int:
    """Length of a sliding-window output (pooling or convolution).

    >>> output_length(58, 2, 2)
    29
    >>> output_length(58, 2, 4)
    15
    """
    if f < 1 or s < 1 or p < 0 or a_in < 1:
        raise ValueError(f"invalid window parameters a_in={a_in} f={f} s={s} p={p}")
    if a_in + 2 * p < f:
        raise ValueError(f"window {f} larger than padded input {a_in + 2 * p}")
    return (a_in + 2 * p - f) // s + 1


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Conv1D:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0

    kind = "Conv1D"

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_size, self.stride) < 1 or self.padding < 0:
            raise ValueError(f"invalid Conv1D {self}")

    def output_shape(self, shape):
        c, n = shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c}")
        return (self.out_channels, output_length(n, self.kernel_size, self.stride, self.padding))

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_size)

    @property
    def fan_in(self):
        return self.in_channels * self.kernel_size


@dataclass(frozen=True)
class MaxPool1D:
    kernel_size: int
    stride: int

    kind = "MaxPool1D"

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1:
            raise ValueError(f"invalid MaxPool1D {self}")

    def output_shape(self, shape):
        c, n = shape
        return (c, output_length(n, self.kernel_size, self.stride))


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    kind = "Dense"

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise ValueError(f"invalid Dense {self}")

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ValueError(f"expected ({self.in_features},) input, got {shape}")
        return (self.out_features,)

    @property
    def weight_shape(self):
        return (self.out_features, self.in_features)

    @property
    def fan_in(self):
        return self.in_features


@dataclass(frozen=True)
class LeakyReLU:
    negative_slope: float = 0.01

    kind = "LeakyReLU"

    def __post_init__(self):
        if not 0.0 < self.negative_slope < 1.0:
            raise ValueError("negative_slope must lie in (0, 1)")

    def output_shape(self, shape):
        return shape


@dataclass(frozen=True)
class ReLU:
    kind = "ReLU"

    def output_shape(self, shape):
        return shape


@dataclass(frozen=True)
class Flatten:
    kind = "Flatten"

    def output_shape(self, shape):
        if len(shape) != 2:
            raise ValueError(f"Flatten expects (channels, length), got {shape}")
        return (shape[0] * shape[1],)


LayerSpec = Union[Conv1D, MaxPool1D, Dense, LeakyReLU, ReLU, Flatten]
TRAINABLE = (Conv1D, Dense)


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layers plus the per-sample input shape.

    ``input_shape`` is ``(channels, length)`` for a network starting with a
    sequence layer, or ``(features,)`` for a dense-only network.
    """

    layers: tuple
    input_shape: tuple
    num_classes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        shapes = self.shapes()  # raises on inconsistency
        if self.num_classes is not None and shapes[-1] != (self.num_classes,):
            raise ValueError(f"final output {shapes[-1]} does not match {self.num_classes} classes")

    def shapes(self) -> list:
        """Per-sample shapes: input of layer 0, ..., output of the last layer."""
        out = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                out.append(tuple(layer.output_shape(out[-1])))
            except ValueError as exc:
                raise ShapeError(i, str(exc)) from None
        return out

    @property
    def output_shape(self):
        return self.shapes()[-1]

    def trainable_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, TRAINABLE)]

    def num_params(self) -> int:
        return sum(
            int(np.prod(self.layers[i].weight_shape)) + self.layers[i].weight_shape[0]
            for i in self.trainable_indices()
        )


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ParamEntry:
    layer_index: int
    weight: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class ParameterSet:
    """Weights and biases of every trainable layer, ordered by layer index.

    Gradients use the same container (see :data:`GradientSet`).
    """

    entries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for e in self.entries:
            out.extend((e.weight, e.bias))
        return out

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def by_layer(self) -> dict[int, ParamEntry]:
        return {e.layer_index: e for e in self.entries}

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParameterSet":
        return ParameterSet(ParamEntry(e.layer_index, fn(e.weight), fn(e.bias)) for e in self.entries)

    def astype(self, dtype) -> "ParameterSet":
        return self.map(lambda a: np.asarray(a, dtype=dtype))

    def shift(self, offset: int) -> "ParameterSet":
        """Re-index entries by ``offset`` (used when splitting networks)."""
        return ParameterSet(ParamEntry(e.layer_index + offset, e.weight, e.bias) for e in self.entries)

    def same_structure(self, other: "ParameterSet") -> bool:
        if len(self.entries) != len(other.entries):
            return False
        return all(
            a.layer_index == b.layer_index and a.weight.shape == b.weight.shape and a.bias.shape == b.bias.shape
            for a, b in zip(self.entries, other.entries)
        )

    def bit_equal(self, other: "ParameterSet") -> bool:
        """Exact equality, including dtype and the sign of zeros."""
        if not self.same_structure(other):
            return False
        return all(
            x.dtype == y.dtype and x.tobytes() == y.tobytes() for x, y in zip(self.arrays(), other.arrays())
        )


GradientSet = ParameterSet


def check_params(spec: NetworkSpec, params: ParameterSet) -> None:
    """Validate that ``params`` has exactly one entry of the right shape per trainable layer."""
    want = spec.trainable_indices()
    got = [e.layer_index for e in params.entries]
    if got != want:
        raise ValueError(f"parameter entries for layers {got}, expected {want}")
    for e in params.entries:
        layer = spec.layers[e.layer_index]
        if e.weight.shape != layer.weight_shape or e.bias.shape != (layer.weight_shape[0],):
            raise ShapeError(e.layer_index, f"parameter shapes {e.weight.shape}/{e.bias.shape} do not fit {layer}")


def init_params(spec: NetworkSpec, seed: int | np.random.Generator) -> ParameterSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases, layer by layer."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    entries = []
    for i in spec.trainable_indices():
        layer = spec.layers[i]
        bound = 1.0 / np.sqrt(layer.fan_in)
        w = rng.uniform(-bound, bound, size=layer.weight_shape)
        b = rng.uniform(-bound, bound, size=(layer.weight_shape[0],))
        entries.append(ParamEntry(i, w, b))
    return ParameterSet(entries)


def zeros_like(params: ParameterSet) -> ParameterSet:
    return params.map(np.zeros_like)


# ---------------------------------------------------------------------------
# per-layer kernels


def _windows(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """(B, C, L) -> (B, C, L_out, k) strided view."""
    return sliding_window_view(x, k, axis=2)[:, :, ::s, :]


def _conv_cols(layer: Conv1D, x: np.ndarray) -> np.ndarray:
    p = layer.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p)))
    win = _windows(x, layer.kernel_size, layer.stride)  # B, Cin, Lout, K
    b, cin, lout, k = win.shape
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b * lout, cin * k)


def _conv_forward(layer: Conv1D, w, bias, x):
    b = x.shape[0]
    cols = _conv_cols(layer, x)
    lout = cols.shape[0] // b
    out = cols @ w.reshape(layer.out_channels, -1).T + bias
    return np.ascontiguousarray(out.reshape(b, lout, layer.out_channels).transpose(0, 2, 1))


def _conv_backward(layer: Conv1D, w, x, dout):
    b, _, lout = dout.shape
    cols = _conv_cols(layer, x)
    d2 = np.ascontiguousarray(dout.transpose(0, 2, 1)).reshape(b * lout, layer.out_channels)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(layer.out_channels, -1)).reshape(b, lout, layer.in_channels, layer.kernel_size)
    p, s = layer.padding, layer.stride
    dxp = np.zeros((b, layer.in_channels, x.shape[2] + 2 * p))
    span = s * (lout - 1) + 1
    for j in range(layer.kernel_size):
        dxp[:, :, j : j + span : s] += dcols[:, :, :, j].transpose(0, 2, 1)
    dx = dxp[:, :, p : p + x.shape[2]] if p else dxp
    return dw, db, np.ascontiguousarray(dx)


def _pool_argmax(layer: MaxPool1D, x):
    win = _windows(x, layer.kernel_size, layer.stride)
    return win, np.argmax(win, axis=-1)  # first index wins on ties


def _pool_forward(layer: MaxPool1D, x):
    win, idx = _pool_argmax(layer, x)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]


def _pool_backward(layer: MaxPool1D, x, dout):
    _, idx = _pool_argmax(layer, x)
    dx = np.zeros_like(x)
    lout = dout.shape[2]
    s = layer.stride
    span = s * (lout - 1) + 1
    for j in range(layer.kernel_size):
        dx[:, :, j : j + span : s] += np.where(idx == j, dout, 0.0)
    return dx


# ---------------------------------------------------------------------------
# network-level operations


def _check_input(spec: NetworkSpec, x: np.ndarray):
    if x.ndim != len(spec.input_shape) + 1 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(0, f"input shape {x.shape} does not match (batch, *{spec.input_shape})")


def forward(spec: NetworkSpec, params: ParameterSet, x: np.ndarray):
    """Run the network; return (per-layer inputs, output)."""
    x = np.asarray(x, dtype=DTYPE)
    _check_input(spec, x)
    activations = []
    out = _run_layers(spec, params, x, 0, activations)
    return activations, out


def _run_layers(spec: NetworkSpec, params: ParameterSet, x, start: int, activations=None):
    plist = params.by_layer()
    for i in range(start, len(spec.layers)):
        layer = spec.layers[i]
        if activations is not None:
            activations.append(x)
        if isinstance(layer, Conv1D):
            e = plist[i]
            x = _conv_forward(layer, e.weight, e.bias, x)
        elif isinstance(layer, MaxPool1D):
            x = _pool_forward(layer, x)
        elif isinstance(layer, Dense):
            e = plist[i]
            x = x @ e.weight.T + e.bias
        elif isinstance(layer, LeakyReLU):
            x = np.where(x > 0, x, layer.negative_slope * x)
        elif isinstance(layer, ReLU):
            x = np.where(x > 0, x, 0.0)
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
        else:
            raise TypeError(f"unknown layer {layer!r}")
    return x


def predict(spec: NetworkSpec, params: ParameterSet, x: np.ndarray) -> np.ndarray:
    return forward(spec, params, x)[1]


def backward(spec: NetworkSpec, params: ParameterSet, activations: Sequence[np.ndarray], dout: np.ndarray):
    """Backpropagate ``dout``; return (GradientSet, gradient w.r.t. the network input)."""
    if len(activations) != len(spec.layers):
        raise ValueError(f"{len(activations)} cached activations for {len(spec.layers)} layers")
    plist = params.by_layer()
    grads = {}
    d = np.asarray(dout, dtype=DTYPE)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, x = spec.layers[i], activations[i]
        if isinstance(layer, Conv1D):
            dw, db, d = _conv_backward(layer, plist[i].weight, x, d)
            grads[i] = ParamEntry(i, dw, db)
        elif isinstance(layer, MaxPool1D):
            d = _pool_backward(layer, x, d)
        elif isinstance(layer, Dense):
            w = plist[i].weight
            grads[i] = ParamEntry(i, d.T @ x, d.sum(axis=0))
            d = d @ w
        elif isinstance(layer, LeakyReLU):
            d = d * np.where(x > 0, 1.0, layer.negative_slope)
        elif isinstance(layer, ReLU):
            d = np.where(x > 0, d, 0.0)
        elif isinstance(layer, Flatten):
            d = d.reshape(x.shape)
    return ParameterSet(grads[i] for i in sorted(grads)), d


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels for a batch of {b}")
    if b and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label outside [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logsum - z[rows, labels]))
    d = softmax(logits)
    d[rows, labels] -= 1.0
    return loss, d / b


def sgd_step(params: ParameterSet, grads: GradientSet, eta: float) -> ParameterSet:
    """Return ``params - eta * grads`` as a new ParameterSet."""
    if not params.same_structure(grads):
        raise ValueError("parameter/gradient structure mismatch")
    return ParameterSet(
        ParamEntry(p.layer_index, p.weight - eta * g.weight, p.bias - eta * g.bias)
        for p, g in zip(params.entries, grads.entries)
    )


def loss_and_grads(spec: NetworkSpec, params: ParameterSet, x: np.ndarray, labels):
    acts, logits = forward(spec, params, x)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads, _ = backward(spec, params, acts, dlogits)
    return loss, grads


def train_step(spec: NetworkSpec, params: ParameterSet, x, labels, eta: float):
    """One SGD step of the whole network on one batch; returns (new params, loss)."""
    loss, grads = loss_and_grads(spec, params, x, labels)
    return sgd_step(params, grads, eta), loss


def gradient_check(spec: NetworkSpec, params: ParameterSet, batch, eps: float = 1e-5,
                   numeric_dtype=np.float64) -> float:
    """Max relative error between backprop and central differences over all parameters.

    ``batch`` is ``(x, labels)``. A network without parameters returns 0.
    """
    report = gradient_check_report(spec, params, batch, eps, numeric_dtype)
    return max((r.rel_error for r in report), default=0.0)


@dataclass(frozen=True)
class CheckedParam:
    layer_index: int
    name: str  # "weight" or "bias"
    flat_index: int
    analytic: float
    numeric: float
    rel_error: float


def _mean_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Batch-mean cross-entropy kept in the dtype of ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    return np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(labels)), labels])


def gradient_check_report(spec: NetworkSpec, params: ParameterSet, batch, eps: float = 1e-5,
                          numeric_dtype=np.float64) -> list[CheckedParam]:
    """Per-parameter comparison of backprop against central differences.

    Backprop always runs in float64. The finite differences are evaluated in
    ``numeric_dtype``; ``np.longdouble`` lowers their rounding floor, which in
    float64 is about ulp(loss) / eps and swamps gradients below ~1e-7.

    Only the touched unit of the perturbed layer and the layers after it are
    re-run; everything upstream comes from one cached forward pass.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, labels = batch
    labels = np.asarray(labels, dtype=np.int64)
    acts, logits = forward(spec, params, x)
    _, dlogits = softmax_cross_entropy(logits, labels)
    analytic, _ = backward(spec, params, acts, dlogits)

    work = params.map(lambda a: np.array(a, dtype=numeric_dtype))  # private copies perturbed in place
    xn = np.asarray(x, dtype=numeric_dtype)
    _check_input(spec, xn)
    cached: list = []
    final = _run_layers(spec, work, xn, 0, cached)
    outputs = cached[1:] + [final]  # output of every layer
    step = numeric_dtype(eps)
    report = []
    for entry, g in zip(work.entries, analytic.entries):
        i = entry.layer_index
        layer = spec.layers[i]
        cols = _conv_cols(layer, cached[i]) if isinstance(layer, Conv1D) else cached[i]
        per_unit = entry.weight[0].size

        def loss_at(unit):
            # a single weight or bias only moves one output unit (or channel) of its layer
            out = outputs[i].copy()
            col = cols @ entry.weight[unit].reshape(-1) + entry.bias[unit]
            if isinstance(layer, Conv1D):
                out[:, unit, :] = col.reshape(out.shape[0], -1)
            else:
                out[:, unit] = col
            if i + 1 < len(spec.layers):
                out = _run_layers(spec, work, out, i + 1)
            return _mean_cross_entropy(out, labels)

        for name, arr, garr in (("weight", entry.weight, g.weight), ("bias", entry.bias, g.bias)):
            flat, gflat = arr.reshape(-1), garr.reshape(-1)
            for j in range(flat.size):
                unit = j // per_unit if name == "weight" else j
                orig = flat[j]
                flat[j] = orig + step
                up = loss_at(unit)
                flat[j] = orig - step
                down = loss_at(unit)
                flat[j] = orig
                num = float((up - down) / (2 * step))
                a = float(gflat[j])
                err = abs(a - num) / max(abs(a), abs(num), 1e-12)
                report.append(CheckedParam(i, name, j, a, num, err))
    return report
