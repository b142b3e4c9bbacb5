"""Experiment configuration: flat ``key = value`` files, validation, and run assembly.

Example file::

    protocol = sflg
    groups = 0,1;2,3      # or a group count such as 2
    transport = socket:127.0.0.1:47000
    variant = t2_no7
    clients = 4
    partition = noniid
    classes_per_client = 2
    rounds = 50
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, fields

from .datagen import (
    PartitionError,
    load_csv,
    partition_iid,
    partition_imbalanced,
    partition_noniid,
    train_test,
)
from .protocols import PROTOCOLS, WIRE_DTYPES, GroupAssignment, RoundConfig
from .splitmodel import VARIANT_IDS, build_variant

PARTITIONS = ("iid", "imbalanced", "noniid")
TRANSPORTS = ("loopback", "socket")
ROLES = ("all", "server", "client")
ALIASES = {"E": "local_epochs", "K": "clients", "wire": "wire_precision"}


@dataclass
class ExperimentConfig:
    protocol: str = "fl"
    groups: str = ""
    variant: str = "t2_no1"
    dataset: str = "synthetic"
    train_csv: str = ""
    test_csv: str = ""
    n_train: int = 2000
    n_test: int = 1000
    num_classes: int = 5
    length: int = 130
    data_seed: int = 0
    partition: str = "iid"
    sigma: float = 1.0
    classes_per_client: int = 1
    clients: int = 5
    rounds: int = 100
    local_epochs: int = 1
    eta: float = 0.001
    batch_size: int = 32
    seed: int = 0
    transport: str = "loopback"
    host: str = "127.0.0.1"
    port: int = 47000
    role: str = "all"
    client_id: int = -1
    wire_precision: str = "f32"
    output: str = "metrics.csv"
    eval_every: int = 1
    patience: int = 0  # 0 disables early stopping
    record_time: bool = False


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def coerce(key: str, raw) -> object:
    """Convert a textual value to the type of field ``key``."""
    kind = FIELD_TYPES[key]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return raw


def canonical_key(key: str) -> str:
    key = key.strip()
    key = ALIASES.get(key, key).replace("-", "_")
    return ALIASES.get(key, key)


def parse_text(text: str) -> dict:
    """Parse a flat key/value document (``=`` or ``:`` separators, ``#``/``;`` comments)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    cp.read_string("[experiment]\n" + text)
    return {canonical_key(k): v for k, v in cp["experiment"].items()}


def load_config(path=None, overrides: dict | None = None) -> tuple[ExperimentConfig, list[str]]:
    """Build a config from an optional file plus overrides; returns (config, coercion problems)."""
    values: dict = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_text(fh.read()))
    values.update({canonical_key(k): v for k, v in (overrides or {}).items() if v is not None})
    problems, kwargs = [], {}
    for key, raw in values.items():
        if key not in FIELD_TYPES:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            kwargs[key] = coerce(key, raw)
        except ValueError:
            problems.append(f"{key}: cannot parse {raw!r} as {FIELD_TYPES[key]}")
    transport = kwargs.get("transport", "")
    if isinstance(transport, str) and transport.startswith("socket:"):
        # "socket:HOST:PORT" shorthand
        host, _, port = transport[len("socket:"):].rpartition(":")
        kwargs["transport"] = "socket"
        try:
            kwargs["port"] = int(port)
            kwargs["host"] = host or kwargs.get("host", ExperimentConfig.host)
        except ValueError:
            problems.append(f"transport: cannot parse address in {transport!r}")
    return ExperimentConfig(**kwargs), problems


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))


def parse_groups(spec: str, num_clients: int) -> GroupAssignment:
    """``"3"`` -> three contiguous groups; ``"0,1;2,3"`` -> explicit groups."""
    spec = spec.strip()
    if ";" not in spec and "," not in spec:
        return GroupAssignment.contiguous(num_clients, int(spec))
    return GroupAssignment(tuple(
        tuple(int(c) for c in part.split(",") if c.strip()) for part in spec.split(";") if part.strip()
    ))


def validate(cfg: ExperimentConfig) -> list[str]:
    """Every violated constraint, as human-readable strings; empty means valid."""
    out = []

    def choice(name, options):
        if getattr(cfg, name) not in options:
            out.append(f"{name}: {getattr(cfg, name)!r} not in {list(options)}")

    choice("protocol", PROTOCOLS)
    choice("partition", PARTITIONS)
    choice("transport", TRANSPORTS)
    choice("role", ROLES)
    choice("dataset", ("synthetic", "csv"))
    choice("wire_precision", tuple(WIRE_DTYPES))
    for name in ("rounds", "local_epochs", "batch_size", "clients", "eval_every", "num_classes", "length"):
        if getattr(cfg, name) < 1:
            out.append(f"{name}: must be >= 1, got {getattr(cfg, name)}")
    if not cfg.eta > 0:
        out.append(f"eta: must be > 0, got {cfg.eta}")
    if cfg.patience < 0:
        out.append("patience: must be >= 0")
    if not 0 <= cfg.port <= 65535:
        out.append(f"port: {cfg.port} outside [0, 65535]")
    if cfg.protocol == "sl" and cfg.local_epochs != 1:
        out.append("local_epochs: sl runs exactly one local epoch per round")

    variant = None
    if cfg.variant not in VARIANT_IDS:
        out.append(f"variant: unknown {cfg.variant!r}")
    else:
        variant = build_variant(cfg.variant)

    if cfg.dataset == "synthetic":
        if cfg.n_train < 1 or cfg.n_test < 1:
            out.append("n_train/n_test: must be >= 1")
        if cfg.clients > cfg.n_train:
            out.append(f"clients: {cfg.clients} clients for {cfg.n_train} samples")
        if variant is not None:
            if (1, cfg.length) != variant.full.input_shape:
                out.append(f"length: variant {cfg.variant} expects input {variant.full.input_shape}, "
                           f"got (1, {cfg.length})")
            if cfg.num_classes > variant.full.num_classes:
                out.append(f"num_classes: {cfg.num_classes} exceeds the {variant.full.num_classes} "
                           f"outputs of {cfg.variant}")
    elif cfg.dataset == "csv":
        for name in ("train_csv", "test_csv"):
            path = getattr(cfg, name)
            if not path:
                out.append(f"{name}: required when dataset = csv")
            elif not os.path.isfile(path):
                out.append(f"{name}: no such file {path!r}")

    if cfg.partition == "noniid" and not 1 <= cfg.classes_per_client <= cfg.num_classes:
        out.append(f"classes_per_client: {cfg.classes_per_client} not in [1, num_classes={cfg.num_classes}]")
    if cfg.partition == "imbalanced":
        if not cfg.sigma > 0:
            out.append(f"sigma: must be > 0, got {cfg.sigma}")
        if cfg.dataset == "synthetic" and cfg.clients * cfg.batch_size > cfg.n_train:
            out.append(f"clients: {cfg.clients} x batch_size {cfg.batch_size} exceeds n_train {cfg.n_train}")

    if cfg.protocol == "sflg":
        if not cfg.groups.strip():
            out.append("groups: required for sflg")
        else:
            try:
                out.extend(f"groups: {p}" for p in parse_groups(cfg.groups, cfg.clients).problems(cfg.clients))
            except ValueError as exc:
                out.append(f"groups: {exc}")

    if cfg.transport == "socket" and cfg.role == "client" and not 0 <= cfg.client_id < cfg.clients:
        out.append(f"client_id: {cfg.client_id} outside [0, {cfg.clients}) for role client")
    return out


def build(cfg: ExperimentConfig) -> tuple[RoundConfig, GroupAssignment | None]:
    """Materialise data, partition and protocol settings. Assumes ``validate`` passed."""
    variant = build_variant(cfg.variant)
    if cfg.dataset == "csv":
        train, test = load_csv(cfg.train_csv), load_csv(cfg.test_csv)
        classes = max(train.num_classes, test.num_classes)
        train = dataclasses.replace(train, num_classes=classes)
        test = dataclasses.replace(test, num_classes=classes)
    else:
        train, test = train_test(cfg.n_train, cfg.n_test, cfg.num_classes, cfg.length, 1, cfg.data_seed)

    if cfg.partition == "iid":
        plan = partition_iid(train, cfg.clients, cfg.seed)
    elif cfg.partition == "imbalanced":
        plan = partition_imbalanced(train, cfg.clients, cfg.sigma, cfg.seed, cfg.batch_size)
    else:
        plan = partition_noniid(train, cfg.clients, cfg.classes_per_client, cfg.seed)

    rc = RoundConfig(
        variant=variant, train=train, test=test, partition=plan,
        rounds=cfg.rounds, local_epochs=cfg.local_epochs, eta=cfg.eta, batch_size=cfg.batch_size,
        seed=cfg.seed, wire=cfg.wire_precision, eval_every=cfg.eval_every,
        patience=cfg.patience or None, record_time=cfg.record_time,
    )
    groups = parse_groups(cfg.groups, cfg.clients) if cfg.protocol == "sflg" else None
    return rc, groups


__all__ = [
    "ExperimentConfig", "PartitionError", "build", "dump_config", "load_config", "parse_groups",
    "parse_text", "validate",
]
