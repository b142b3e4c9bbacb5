"""Architecture catalog, network splitting and smashed-data traffic estimates.

The catalog holds the 4conv + 2dense ECG network, its pooling variants
No.1-No.8 (ids ``t2_no1`` ... ``t2_no8``), the cut-depth variants
``cut1``-``cut3`` and a small ``tiny`` network for quick runs.

Each conv1d is followed by a LeakyReLU and the first dense layer by a
ReLU, so a cut placed after a conv block transmits post-activation values.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .nnkernel import (
    Conv1D,
    Dense,
    Flatten,
    LeakyReLU,
    MaxPool1D,
    ReLU,
    NetworkSpec,
    ParameterSet,
    init_params,
)

ECG_INPUT = (1, 130)
ECG_CLASSES = 5
SC_INPUT = (1, 8000)
SC_CLASSES = 10
# output length of the second conv1d for a 1x130 input
REFERENCE_LENGTH = 58


@dataclass(frozen=True)
class SplitSpec:
    full: NetworkSpec
    cut_index: int

    def __post_init__(self):
        if not 1 <= self.cut_index < len(self.full.layers):
            raise ValueError(f"cut index {self.cut_index} outside [1, {len(self.full.layers) - 1}]")

    @property
    def client(self) -> NetworkSpec:
        return split_at(self.full, self.cut_index)[0]

    @property
    def server(self) -> NetworkSpec:
        return split_at(self.full, self.cut_index)[1]

    @property
    def cut_shape(self) -> tuple:
        """Per-sample shape of the smashed data."""
        return self.full.shapes()[self.cut_index]


@dataclass(frozen=True)
class ArchitectureVariant:
    id: str
    split: SplitSpec

    @property
    def full(self) -> NetworkSpec:
        return self.split.full


def split_at(spec: NetworkSpec, cut_index: int) -> tuple[NetworkSpec, NetworkSpec]:
    """Split into (layers[:cut], layers[cut:]); the server half takes the cut shape as input."""
    if not 1 <= cut_index < len(spec.layers):
        raise ValueError(f"cut index {cut_index} outside [1, {len(spec.layers) - 1}]")
    cut_shape = spec.shapes()[cut_index]
    client = NetworkSpec(spec.layers[:cut_index], spec.input_shape)
    server = NetworkSpec(spec.layers[cut_index:], cut_shape, spec.num_classes)
    return client, server


def split_params(params: ParameterSet, cut_index: int) -> tuple[ParameterSet, ParameterSet]:
    client = ParameterSet(e for e in params.entries if e.layer_index < cut_index)
    server = ParameterSet(e for e in params.entries if e.layer_index >= cut_index).shift(-cut_index)
    return client, server


def join_params(client: ParameterSet, server: ParameterSet, cut_index: int) -> ParameterSet:
    return ParameterSet(tuple(client.entries) + tuple(server.shift(cut_index).entries))


def init_split_params(split: SplitSpec, seed) -> tuple[ParameterSet, ParameterSet]:
    """Initialise the whole network once and hand back its two halves."""
    return split_params(init_params(split.full, seed), split.cut_index)


# ---------------------------------------------------------------------------
# catalog

_act = LeakyReLU


def _conv(cin, cout, k, p=0):
    return [Conv1D(cin, cout, k, 1, p), _act()]


def _head(features, hidden, classes):
    return [Flatten(), Dense(features, hidden), ReLU(), Dense(hidden, classes)]


def _stack(client_layers, server_layers, input_shape, classes, name):
    layers = client_layers + server_layers
    full = NetworkSpec(layers, input_shape, classes)
    return ArchitectureVariant(name, SplitSpec(full, len(client_layers)))


def _dense_in(layers, input_shape):
    """Flattened width entering the first Dense layer (built before the head exists)."""
    return NetworkSpec(layers, input_shape).output_shape


def _ecg_client(extra_pool=None):
    layers = _conv(1, 16, 7) + [MaxPool1D(2, 2)] + _conv(16, 16, 5)
    if extra_pool is not None:
        layers.append(MaxPool1D(*extra_pool))
    return layers


def _t2(row: int) -> ArchitectureVariant:
    # (client-side extra pool, server conv widths, server keeps its pool)
    rows = {
        1: (None, (16, 16), True),
        2: ((2, 2), (16, 16), False),
        3: ((2, 2), (32, 32), False),
        4: ((4, 2), (32, 32), False),
        5: ((6, 2), (32, 32), False),
        6: ((8, 2), (32, 32), False),
        7: ((2, 4), (32, 32), False),
        8: ((2, 4), (32, 64), False),
    }
    pool, (w1, w2), server_pool = rows[row]
    client = _ecg_client(pool)
    server = _conv(16, w1, 5) + _conv(w1, w2, 5) + ([MaxPool1D(2, 2)] if server_pool else [])
    body = client + server
    c, n = _dense_in(body, ECG_INPUT)
    return _stack(client, server + _head(c * n, 128, ECG_CLASSES), ECG_INPUT, ECG_CLASSES, f"t2_no{row}")


def _baseline(name, input_shape, classes, client_convs=2):
    convs = _conv(1, 16, 7) + [MaxPool1D(2, 2)] + _conv(16, 16, 5) + _conv(16, 16, 5) + _conv(16, 16, 5)
    # conv blocks end after layer 3 (conv+act+pool), 5, 7, 9
    cut = {1: 3, 2: 5, 3: 7}[client_convs]
    body = convs + [MaxPool1D(2, 2)]
    c, n = _dense_in(body, input_shape)
    layers = body + _head(c * n, 128, classes)
    return ArchitectureVariant(name, SplitSpec(NetworkSpec(layers, input_shape, classes), cut))


def _tiny() -> ArchitectureVariant:
    client = _conv(1, 4, 5) + [MaxPool1D(2, 2)]
    server = _conv(4, 4, 3)
    c, n = _dense_in(client + server, (1, 32))
    return _stack(client, server + _head(c * n, 16, ECG_CLASSES), (1, 32), ECG_CLASSES, "tiny")


_BUILDERS = {
    "baseline_t1_ecg": lambda: _baseline("baseline_t1_ecg", ECG_INPUT, ECG_CLASSES),
    "baseline_t1_sc": lambda: _baseline("baseline_t1_sc", SC_INPUT, SC_CLASSES),
    **{f"t2_no{i}": (lambda i=i: _t2(i)) for i in range(1, 9)},
    "cut1": lambda: _baseline("cut1", ECG_INPUT, ECG_CLASSES, 1),
    "cut2": lambda: _baseline("cut2", ECG_INPUT, ECG_CLASSES, 2),
    "cut3": lambda: _baseline("cut3", ECG_INPUT, ECG_CLASSES, 3),
    "tiny": _tiny,
}

VARIANT_IDS = tuple(_BUILDERS)


def build_variant(variant_id: str) -> ArchitectureVariant:
    try:
        return _BUILDERS[variant_id]()
    except KeyError:
        raise ValueError(f"unknown variant {variant_id!r}; known: {', '.join(VARIANT_IDS)}") from None


def dense_input(variant: ArchitectureVariant) -> tuple[int, int]:
    """(length, channels) of the tensor flattened into the first Dense layer."""
    spec = variant.full
    shapes = spec.shapes()
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Flatten):
            c, n = shapes[i]
            return n, c
    raise ValueError(f"{variant.id} has no Flatten layer")


def reduction_factor(variant: ArchitectureVariant) -> tuple[Fraction, float]:
    """Cut-layer length over the second-conv output length, exact and as a float."""
    spec = variant.full
    shapes = spec.shapes()
    convs = [i for i, layer in enumerate(spec.layers) if isinstance(layer, Conv1D)]
    if len(convs) < 2 or spec.input_shape != ECG_INPUT:
        raise ValueError(f"{variant.id} lacks the two-conv reference structure")
    ref_out = convs[1] + 1  # shape index after the second conv
    cut = variant.split.cut_index
    if cut <= convs[1]:
        raise ValueError(f"{variant.id}: cut precedes the second conv1d")
    a_in = shapes[ref_out][1]
    if len(shapes[cut]) != 2:
        raise ValueError(f"{variant.id}: cut tensor is not a sequence")
    factor = Fraction(shapes[cut][1], a_in)
    return factor, float(factor)


def estimate_comm_bytes(
    variant: ArchitectureVariant,
    num_samples: int,
    epochs: int,
    batch_size: int,
    element_bytes: int = 4,
    label_bytes: int = 4,
) -> int:
    """Predicted client traffic of split training, ignoring message framing.

    Per epoch: smashed data up plus its gradient down for every sample, one
    label per sample, and the client-side model sent down and back up once.
    ``batch_size`` only matters for framing, which this estimate leaves out.
    """
    if min(num_samples, epochs, batch_size, element_bytes, label_bytes) < 1:
        raise ValueError("all counts must be positive")
    per_sample = int(np.prod(variant.split.cut_shape))
    client_params = variant.split.client.num_params()
    smashed = 2 * per_sample * num_samples * element_bytes + num_samples * label_bytes
    sync = 2 * client_params * element_bytes
    return epochs * smashed + epochs * sync
