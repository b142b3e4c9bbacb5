"""Test-set evaluation and per-round experiment logs."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .nnkernel import NetworkSpec, ParameterSet, predict

CSV_HEADER = ["round", "accuracy", "bytes_up", "bytes_down", "wall_millis"]


@dataclass(frozen=True)
class RoundRecord:
    round: int
    test_accuracy: float
    bytes_up: tuple  # cumulative, one per client
    bytes_down: tuple
    wall_millis: int = 0

    def __post_init__(self):
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise ValueError(f"accuracy {self.test_accuracy} outside [0, 1]")
        object.__setattr__(self, "bytes_up", tuple(int(b) for b in self.bytes_up))
        object.__setattr__(self, "bytes_down", tuple(int(b) for b in self.bytes_down))

    @property
    def total_up(self) -> int:
        return sum(self.bytes_up)

    @property
    def total_down(self) -> int:
        return sum(self.bytes_down)


@dataclass
class MetricsLog:
    fingerprint: str = ""
    records: list = field(default_factory=list)
    # final models of the run (protocol-specific), not written to CSV
    state: Any = None

    def append(self, record: RoundRecord) -> None:
        if self.records:
            prev = self.records[-1]
            if record.round <= prev.round:
                raise ValueError(f"round {record.round} does not follow {prev.round}")
            if any(a < b for a, b in zip(record.bytes_up + record.bytes_down, prev.bytes_up + prev.bytes_down)):
                raise ValueError("byte counters went backwards")
        self.records.append(record)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_accuracy if self.records else float("nan")

    @property
    def accuracies(self) -> list[float]:
        return [r.test_accuracy for r in self.records]

    def total_client_bytes(self) -> int:
        if not self.records:
            return 0
        return self.records[-1].total_up + self.records[-1].total_down


def evaluate(client_spec: NetworkSpec, client_params: ParameterSet, server_spec: NetworkSpec | None,
             server_params: ParameterSet | None, testset, chunk: int = 256) -> float:
    """Fraction of test samples whose argmax prediction is right.

    Pass ``server_spec=None`` to evaluate an unsplit network. Ties go to the
    lowest class index.
    """
    n = len(testset)
    if n == 0:
        raise ValueError("empty test set")
    correct = 0
    for start in range(0, n, chunk):
        x = testset.x[start : start + chunk]
        out = predict(client_spec, client_params, x)
        if server_spec is not None:
            out = predict(server_spec, server_params, out)
        correct += int(np.sum(np.argmax(out, axis=1) == testset.y[start : start + chunk]))
    return correct / n


def write_csv(log: MetricsLog, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in log.records:
            w.writerow([r.round, repr(float(r.test_accuracy)), r.total_up, r.total_down, r.wall_millis])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {
            "round": int(row["round"]),
            "accuracy": float(row["accuracy"]),
            "bytes_up": int(row["bytes_up"]),
            "bytes_down": int(row["bytes_down"]),
            "wall_millis": int(row["wall_millis"]),
        }
        for row in rows
    ]
