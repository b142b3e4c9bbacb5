"""Synthetic sequence datasets, CSV I/O and client partitioning laws."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """``x`` has shape (n, channels, length); ``y`` holds integer labels."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.x.ndim != 3 or self.y.shape != (self.x.shape[0],):
            raise DatasetError(f"bad dataset shapes x={self.x.shape} y={self.y.shape}")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


@dataclass(frozen=True)
class PartitionPlan:
    client_indices: tuple
    law: str
    params: tuple = ()

    def __post_init__(self):
        object.__setattr__(
            self, "client_indices", tuple(np.asarray(ix, dtype=np.int64) for ix in self.client_indices)
        )

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]

    def shards(self, dataset: Dataset) -> list[Dataset]:
        return [dataset.subset(ix) for ix in self.client_indices]

    def is_disjoint(self) -> bool:
        allix = np.concatenate(self.client_indices) if self.client_indices else np.array([])
        return len(np.unique(allix)) == len(allix)


# ---------------------------------------------------------------------------
# synthetic data


def synth_sequences(n_samples: int, num_classes: int, length: int, channels: int = 1, seed: int = 0) -> Dataset:
    """Noisy class-conditional sinusoids.

    Class ``c`` has its own frequency, phase and a gaussian bump position per
    channel; samples jitter the phase, amplitude and offset and add white noise.
    Fixed seed, fixed dataset.
    """
    if min(n_samples, num_classes, length, channels) < 1:
        raise ValueError("all sizes must be positive")
    rng = np.random.default_rng(seed)
    # class templates come from their own stream so they do not depend on n_samples
    trng = np.random.default_rng([seed, 0x5EED])
    freqs = 1.0 + 1.5 * np.arange(num_classes)[:, None] + trng.uniform(0, 0.5, (num_classes, channels))
    phases = trng.uniform(0, 2 * np.pi, (num_classes, channels))
    bumps = trng.uniform(0.15, 0.85, (num_classes, channels))
    t = np.arange(length) / length

    y = rng.integers(0, num_classes, n_samples)
    jitter = rng.normal(0, 0.6, (n_samples, channels, 1))
    amp = rng.uniform(0.8, 1.2, (n_samples, channels, 1))
    offset = rng.normal(0, 0.1, (n_samples, channels, 1))
    noise = rng.normal(0, 0.8, (n_samples, channels, length))

    f = freqs[y][..., None]
    ph = phases[y][..., None] + jitter
    centre = bumps[y][..., None]
    x = amp * np.sin(2 * np.pi * f * t + ph) + 0.8 * np.exp(-((t - centre) ** 2) / 0.005) + offset + noise
    return Dataset(x.astype(np.float64), y.astype(np.int64), num_classes)


def train_test(n_train: int, n_test: int, num_classes: int, length: int, channels: int = 1, seed: int = 0):
    """Draw one synthetic pool and cut it into train and test sets."""
    full = synth_sequences(n_train + n_test, num_classes, length, channels, seed)
    return full.subset(np.arange(n_train)), full.subset(np.arange(n_train, n_train + n_test))


# ---------------------------------------------------------------------------
# CSV


def load_csv(path) -> Dataset:
    """Rows of ``label,f1,f2,...`` without a header; one channel per sample."""
    labels, rows = [], []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise DatasetError(f"row {i}: need a label and at least one feature")
            try:
                label = int(row[0])
                feats = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DatasetError(f"row {i}: non-numeric field ({exc})") from None
            if label < 0:
                raise DatasetError(f"row {i}: negative label {label}")
            if width is None:
                width = len(feats)
            elif len(feats) != width:
                raise DatasetError(f"row {i}: {len(feats)} features, expected {width}")
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise DatasetError(f"{path}: empty dataset")
    y = np.asarray(labels, dtype=np.int64)
    x = np.asarray(rows, dtype=np.float64)[:, None, :]
    return Dataset(x, y, int(y.max()) + 1)


def save_csv(dataset: Dataset, path) -> None:
    """Inverse of :func:`load_csv` for single-channel data (values written with repr)."""
    if dataset.x.shape[1] != 1:
        raise DatasetError("CSV export supports single-channel datasets only")
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for label, seq in zip(dataset.y, dataset.x[:, 0, :]):
            w.writerow([int(label)] + [repr(float(v)) for v in seq])


# ---------------------------------------------------------------------------
# partitioning


def partition_iid(dataset: Dataset, k: int, seed: int = 0) -> PartitionPlan:
    n = len(dataset)
    if k < 1 or k > n:
        raise PartitionError(f"cannot split {n} samples among {k} clients")
    perm = np.random.default_rng(seed).permutation(n)
    return PartitionPlan(np.array_split(perm, k), "iid")


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    quotas = weights / weights.sum() * total
    base = np.floor(quotas).astype(np.int64)
    short = total - int(base.sum())
    order = np.argsort(-(quotas - base), kind="stable")
    base[order[:short]] += 1
    return base


def imbalanced_sizes(n: int, k: int, sigma: float, seed: int = 0, batch_size: int = 32) -> np.ndarray:
    """Shard sizes drawn from Normal(n/k, sigma*n/k), floored at max(1, batch_size).

    Every client first gets the floor; the rest is shared in proportion to how
    far each draw exceeds the floor, rounded by largest remainder.
    """
    if sigma <= 0:
        raise PartitionError("sigma must be positive")
    floor = max(1, batch_size)
    if k * floor > n:
        raise PartitionError(f"{k} clients x floor {floor} exceeds {n} samples")
    mean = n / k
    draws = np.random.default_rng(seed).normal(mean, sigma * mean, k)
    excess = np.clip(draws - floor, 0.0, None)
    if not excess.any():
        raise PartitionError(f"every normal draw fell to the floor {floor} (sigma={sigma}); reduce sigma or k")
    return floor + _largest_remainder(excess, n - k * floor)


def partition_imbalanced(dataset: Dataset, k: int, sigma: float, seed: int = 0, batch_size: int = 32) -> PartitionPlan:
    n = len(dataset)
    if k < 1 or k > n:
        raise PartitionError(f"cannot split {n} samples among {k} clients")
    sizes = imbalanced_sizes(n, k, sigma, seed, batch_size)
    perm = np.random.default_rng([seed, 1]).permutation(n)
    cuts = np.cumsum(sizes)[:-1]
    return PartitionPlan(np.split(perm, cuts), "imbalanced", (("sigma", sigma),))


def partition_noniid(dataset: Dataset, k: int, classes_per_client: int, seed: int = 0) -> PartitionPlan:
    """Each client holds exactly ``classes_per_client`` classes.

    Class slots are dealt round-robin from a shuffled class list; a class's
    samples are shuffled and split evenly among the clients holding it.
    """
    c = dataset.num_classes
    if k < 1:
        raise PartitionError("need at least one client")
    if not 1 <= classes_per_client <= c:
        raise PartitionError(f"classes_per_client must be in [1, {c}]")
    rng = np.random.default_rng(seed)
    order = rng.permutation(c)
    holders: dict[int, list[int]] = {}
    for client in range(k):
        for j in range(classes_per_client):
            holders.setdefault(int(order[(client * classes_per_client + j) % c]), []).append(client)

    shards: list[list[np.ndarray]] = [[] for _ in range(k)]
    for cls in sorted(holders):
        members = holders[cls]
        idx = np.flatnonzero(dataset.y == cls)
        if len(idx) < len(members):
            raise PartitionError(f"class {cls} has {len(idx)} samples for {len(members)} clients")
        idx = idx[rng.permutation(len(idx))]
        for client, part in zip(members, np.array_split(idx, len(members))):
            shards[client].append(part)
    return PartitionPlan(
        [np.sort(np.concatenate(parts)) for parts in shards],
        "noniid",
        (("classes_per_client", classes_per_client),),
    )
