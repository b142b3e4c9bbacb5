"""FL (FedAvg), split learning and generalized splitfed learning.

Every protocol is written as a server role and a client role that only
talk through :mod:`splitfed.transport` endpoints, so the same code runs over
in-process loopback pipes (``run_fl``/``run_sl``/``run_sflg``) or TCP
sockets in separate processes (``serve_socket``/``client_socket``).

Group semantics for SFLG: groups run in parallel, each owning one copy of the
server-side model that is updated serially by its members in ascending
client id. One singleton group per client gives SFLV1, one group holding all
clients gives SFLV2.
"""
from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import transport as tp
from .datagen import Dataset, PartitionPlan
from .metrics import MetricsLog, RoundRecord, evaluate
from .nnkernel import (
    NetworkSpec,
    ParameterSet,
    backward,
    forward,
    init_params,
    sgd_step,
    softmax_cross_entropy,
    train_step,
)
from .splitmodel import ArchitectureVariant, init_split_params

log = logging.getLogger(__name__)

WIRE_DTYPES = {"f32": np.float32, "f64": np.float64}
PROTOCOLS = ("fl", "sl", "sflg")


class ProtocolError(RuntimeError):
    pass


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RoundConfig:
    variant: ArchitectureVariant
    train: Dataset
    test: Dataset
    partition: PartitionPlan
    rounds: int = 100
    local_epochs: int = 1
    eta: float = 0.001
    batch_size: int = 32
    seed: int = 0
    wire: str = "f32"
    eval_every: int = 1
    patience: int | None = None
    stop_accuracy: float | None = None
    record_time: bool = False

    @property
    def num_clients(self) -> int:
        return self.partition.num_clients

    @property
    def wire_dtype(self):
        return WIRE_DTYPES[self.wire]

    def shard(self, client_id: int) -> Dataset:
        return self.train.subset(self.partition.client_indices[client_id])

    def sizes(self) -> list[int]:
        return self.partition.sizes()

    def problems(self, protocol: str = "fl") -> list[str]:
        out = []
        if self.rounds < 1:
            out.append("rounds must be >= 1")
        if self.local_epochs < 1:
            out.append("local_epochs must be >= 1")
        if protocol == "sl" and self.local_epochs != 1:
            out.append("local_epochs must be 1 for sl")
        if not self.eta > 0:
            out.append("eta must be > 0")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.wire not in WIRE_DTYPES:
            out.append(f"wire must be one of {sorted(WIRE_DTYPES)}")
        if self.eval_every < 1:
            out.append("eval_every must be >= 1")
        if self.num_clients < 1:
            out.append("need at least one client")
        for k, n in enumerate(self.sizes()):
            if n == 0:
                out.append(f"client {k} has an empty shard")
        if self.partition.client_indices and not self.partition.is_disjoint():
            out.append("client shards overlap")
        if self.train.sample_shape != self.variant.full.input_shape:
            out.append(f"train samples {self.train.sample_shape} do not fit input {self.variant.full.input_shape}")
        if self.test.sample_shape != self.variant.full.input_shape:
            out.append(f"test samples {self.test.sample_shape} do not fit input {self.variant.full.input_shape}")
        if self.variant.full.num_classes is not None and self.train.num_classes > self.variant.full.num_classes:
            out.append(f"{self.train.num_classes} classes in data, network outputs {self.variant.full.num_classes}")
        return out

    def fingerprint(self, protocol: str, groups=None) -> str:
        desc = repr((
            protocol, self.variant.id, self.rounds, self.local_epochs, self.eta, self.batch_size, self.seed,
            self.wire, self.sizes(), self.partition.law, self.partition.params,
            None if groups is None else groups.groups,
        ))
        return hashlib.sha256(desc.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class GroupAssignment:
    """Disjoint client groups; normalised to ascending members, groups ordered by smallest member."""

    groups: tuple

    def __post_init__(self):
        groups = tuple(tuple(sorted(int(c) for c in g)) for g in self.groups)
        object.__setattr__(self, "groups", tuple(sorted(groups, key=lambda g: g[0] if g else -1)))

    @classmethod
    def contiguous(cls, num_clients: int, num_groups: int) -> "GroupAssignment":
        """``num_groups`` contiguous blocks of client ids, sizes differing by at most one."""
        if not 1 <= num_groups <= num_clients:
            raise ValueError(f"cannot form {num_groups} groups from {num_clients} clients")
        return cls(tuple(tuple(int(c) for c in b) for b in np.array_split(np.arange(num_clients), num_groups)))

    @classmethod
    def singletons(cls, num_clients: int) -> "GroupAssignment":
        return cls.contiguous(num_clients, num_clients)

    @classmethod
    def single(cls, num_clients: int) -> "GroupAssignment":
        return cls.contiguous(num_clients, 1)

    def problems(self, num_clients: int) -> list[str]:
        out, seen = [], {}
        for gi, g in enumerate(self.groups):
            if not g:
                out.append(f"group {gi} is empty")
            for c in g:
                if not 0 <= c < num_clients:
                    out.append(f"client {c} in group {gi} is outside [0, {num_clients})")
                elif c in seen:
                    out.append(f"client {c} appears in groups {seen[c]} and {gi}")
                else:
                    seen[c] = gi
        missing = sorted(set(range(num_clients)) - set(seen))
        if missing:
            out.append(f"clients {missing} belong to no group")
        return out

    def sample_counts(self, sizes: Sequence[int]) -> list[int]:
        return [sum(sizes[c] for c in g) for g in self.groups]


@dataclass
class TrainState:
    round: int = 0
    full_model: ParameterSet | None = None  # FL global model
    client_model: ParameterSet | None = None  # h_t
    server_model: ParameterSet | None = None  # w_t
    client_models: list = field(default_factory=list)  # h^k of the last round
    group_models: list = field(default_factory=list)  # w^g of the last round


# ---------------------------------------------------------------------------
# building blocks


def fedavg_aggregate(models: Sequence[ParameterSet], sample_counts: Sequence[int]) -> ParameterSet:
    """Sample-weighted mean, accumulated in list order."""
    if not models:
        raise ValueError("nothing to aggregate")
    if len(models) != len(sample_counts):
        raise ValueError("one sample count per model required")
    if any(c <= 0 for c in sample_counts):
        raise ValueError("sample counts must be positive")
    for m in models[1:]:
        if not m.same_structure(models[0]):
            raise ValueError("models differ in structure")
    total = float(sum(sample_counts))
    weights = [c / total for c in sample_counts]
    acc = [weights[0] * a for a in models[0].arrays()]
    for m, wt in zip(models[1:], weights[1:]):
        acc = [x + wt * a for x, a in zip(acc, m.arrays())]
    it = iter(acc)
    return models[0].map(lambda _: next(it))


def epoch_order(seed: int, client_id: int, round_index: int, epoch: int, n: int) -> np.ndarray:
    """Sample order of one local epoch; fixed by (seed, client, round, epoch)."""
    return np.random.default_rng([seed, client_id, round_index, epoch]).permutation(n)


def minibatches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def local_sgd(spec: NetworkSpec, params: ParameterSet, data: Dataset, *, epochs: int, eta: float,
              batch_size: int, seed: int, client_id: int, round_index: int) -> ParameterSet:
    """Mini-batch SGD of a whole network on one client's data."""
    for epoch in range(epochs):
        for idx in minibatches(epoch_order(seed, client_id, round_index, epoch, len(data)), batch_size):
            params, _ = train_step(spec, params, data.x[idx], data.y[idx], eta)
    return params


def _expect(msg, cls, context: str):
    if not isinstance(msg, cls):
        raise ProtocolError(f"{context}: expected {cls.__name__}, got {type(msg).__name__}")
    return msg


def client_pass(client_spec: NetworkSpec, h: ParameterSet, shard: Dataset, channel: tp.Endpoint, *,
                client_id: int, round_index: int, epochs: int, eta: float, batch_size: int, seed: int,
                wire_dtype=np.float32) -> ParameterSet:
    """Train the client-side model against a remote server-side model.

    Per batch: forward, send smashed data and labels, wait for the cut-layer
    gradient, backward, SGD. Ends by reporting completion and uploading h.
    """
    for epoch in range(epochs):
        order = epoch_order(seed, client_id, round_index, epoch, len(shard))
        for bi, idx in enumerate(minibatches(order, batch_size)):
            acts, a = forward(client_spec, h, shard.x[idx])
            channel.send(tp.Smashed(client_id, epoch, bi, a.astype(wire_dtype), shard.y[idx]))
            reply = _expect(channel.recv(), tp.SmashedGrad, f"client {client_id}")
            if (reply.client_id, reply.epoch, reply.batch_index) != (client_id, epoch, bi):
                raise ProtocolError(
                    f"client {client_id}: gradient for (client {reply.client_id}, epoch {reply.epoch}, "
                    f"batch {reply.batch_index}) while waiting for (epoch {epoch}, batch {bi})"
                )
            grads, _ = backward(client_spec, h, acts, reply.grad.astype(np.float64))
            h = sgd_step(h, grads, eta)
    channel.send(tp.Control(tp.ControlCode.CLIENT_DONE, round_index, client_id))
    channel.send(tp.ModelUp(h.astype(wire_dtype)))
    return h


def server_group_step(server_spec: NetworkSpec, w: ParameterSet, smashed: tp.Smashed, eta: float):
    """Forward/backward the server-side model on one smashed batch.

    Returns the updated model and the cut-layer gradient (float64).
    """
    a = np.asarray(smashed.activations, dtype=np.float64)
    acts, logits = forward(server_spec, w, a)
    _, dlogits = softmax_cross_entropy(logits, smashed.labels)
    grads, da = backward(server_spec, w, acts, dlogits)
    return sgd_step(w, grads, eta), tp.SmashedGrad(smashed.client_id, smashed.epoch, smashed.batch_index, da)


def serve_client(channel: tp.Endpoint, server_spec: NetworkSpec, w: ParameterSet, *, client_id: int,
                 eta: float, wire_dtype=np.float32) -> ParameterSet:
    """Answer one client's smashed batches until it reports completion."""
    while True:
        msg = channel.recv()
        if isinstance(msg, tp.Control) and msg.code == tp.ControlCode.CLIENT_DONE:
            return w
        msg = _expect(msg, tp.Smashed, f"server serving client {client_id}")
        if msg.client_id != client_id:
            raise ProtocolError(f"smashed data from client {msg.client_id} on client {client_id}'s channel")
        w, grad = server_group_step(server_spec, w, msg, eta)
        channel.send(tp.SmashedGrad(grad.client_id, grad.epoch, grad.batch_index, grad.grad.astype(wire_dtype)))


# ---------------------------------------------------------------------------
# roles


def client_hello(channel: tp.Endpoint, client_id: int) -> None:
    channel.send(tp.Control(tp.ControlCode.HELLO, 0, client_id))


def handshake(channels: Sequence[tp.Endpoint], num_clients: int) -> list[tp.Endpoint]:
    """Read each connection's HELLO and return the channels ordered by client id."""
    by_id = {}
    for ch in channels:
        msg = _expect(ch.recv(), tp.Control, "handshake")
        if msg.code != tp.ControlCode.HELLO:
            raise ProtocolError(f"handshake: expected HELLO, got control code {msg.code}")
        cid = int(msg.value)
        if not 0 <= cid < num_clients or cid in by_id:
            raise ProtocolError(f"handshake: unexpected client id {cid}")
        by_id[cid] = ch
    if len(by_id) != num_clients:
        raise ProtocolError(f"handshake: {len(by_id)} of {num_clients} clients connected")
    return [by_id[k] for k in range(num_clients)]


def fl_client(channel: tp.Endpoint, client_id: int, cfg: RoundConfig) -> None:
    shard = cfg.shard(client_id)
    spec = cfg.variant.full
    client_hello(channel, client_id)
    round_index = 0
    while True:
        msg = channel.recv()
        if isinstance(msg, tp.Control) and msg.code == tp.ControlCode.SHUTDOWN:
            return
        w = _expect(msg, tp.ModelDown, f"fl client {client_id}").params.astype(np.float64)
        w = local_sgd(spec, w, shard, epochs=cfg.local_epochs, eta=cfg.eta, batch_size=cfg.batch_size,
                      seed=cfg.seed, client_id=client_id, round_index=round_index)
        channel.send(tp.ModelUp(w.astype(cfg.wire_dtype)))
        round_index += 1


def split_client(channel: tp.Endpoint, client_id: int, cfg: RoundConfig) -> None:
    """Client role shared by SL and SFLG: one client pass per ModelDown."""
    shard = cfg.shard(client_id)
    spec = cfg.variant.split.client
    epochs = cfg.local_epochs
    client_hello(channel, client_id)
    round_index = 0
    while True:
        msg = channel.recv()
        if isinstance(msg, tp.Control) and msg.code == tp.ControlCode.SHUTDOWN:
            return
        h = _expect(msg, tp.ModelDown, f"client {client_id}").params.astype(np.float64)
        client_pass(spec, h, shard, channel, client_id=client_id, round_index=round_index, epochs=epochs,
                    eta=cfg.eta, batch_size=cfg.batch_size, seed=cfg.seed, wire_dtype=cfg.wire_dtype)
        round_index += 1


class _RoundLoop:
    """Evaluation, byte accounting and stopping rules shared by the server roles."""

    def __init__(self, cfg: RoundConfig, channels, fingerprint: str):
        self.cfg = cfg
        self.channels = channels
        self.log = MetricsLog(fingerprint)
        self.best = -1.0
        self.stale = 0
        self.start = time.perf_counter()

    def end_round(self, t: int, evaluate_fn: Callable[[], float]) -> bool:
        """Record round ``t`` (0-based); return True when training should stop."""
        cfg = self.cfg
        last = t == cfg.rounds - 1
        if (t + 1) % cfg.eval_every and not last:
            return False
        acc = evaluate_fn()
        wall = int((time.perf_counter() - self.start) * 1000) if cfg.record_time else 0
        self.log.append(RoundRecord(
            t + 1, acc,
            [ch.bytes_received for ch in self.channels],
            [ch.bytes_sent for ch in self.channels],
            wall,
        ))
        log.info("round %d accuracy %.4f", t + 1, acc)
        if cfg.stop_accuracy is not None and acc >= cfg.stop_accuracy:
            return True
        if acc > self.best:
            self.best, self.stale = acc, 0
        else:
            self.stale += 1
        return cfg.patience is not None and self.stale >= cfg.patience

    def shutdown(self):
        for ch in self.channels:
            ch.send(tp.Control(tp.ControlCode.SHUTDOWN))


def fl_server(cfg: RoundConfig, channels: Sequence[tp.Endpoint]) -> MetricsLog:
    channels = handshake(channels, cfg.num_clients)
    spec = cfg.variant.full
    sizes = cfg.sizes()
    loop = _RoundLoop(cfg, channels, cfg.fingerprint("fl"))
    w = init_params(spec, cfg.seed)
    state = TrainState(full_model=w)
    for t in range(cfg.rounds):
        down = tp.ModelDown(w.astype(cfg.wire_dtype))
        for ch in channels:
            ch.send(down)
        local = [
            _expect(ch.recv(), tp.ModelUp, f"fl server, client {k}").params.astype(np.float64)
            for k, ch in enumerate(channels)
        ]
        w = fedavg_aggregate(local, sizes)
        state = TrainState(t + 1, full_model=w, client_models=local)
        if loop.end_round(t, lambda: evaluate(spec, w, None, None, cfg.test)):
            break
    loop.shutdown()
    loop.log.state = state
    return loop.log


def sl_server(cfg: RoundConfig, channels: Sequence[tp.Endpoint]) -> MetricsLog:
    channels = handshake(channels, cfg.num_clients)
    split = cfg.variant.split
    cspec, sspec = split.client, split.server
    loop = _RoundLoop(cfg, channels, cfg.fingerprint("sl"))
    h, w = init_split_params(split, cfg.seed)
    state = TrainState(client_model=h, server_model=w)
    for t in range(cfg.rounds):
        for k, ch in enumerate(channels):
            ch.send(tp.ModelDown(h.astype(cfg.wire_dtype)))
            w = serve_client(ch, sspec, w, client_id=k, eta=cfg.eta, wire_dtype=cfg.wire_dtype)
            h = _expect(ch.recv(), tp.ModelUp, f"sl server, client {k}").params.astype(np.float64)
        state = TrainState(t + 1, client_model=h, server_model=w)
        if loop.end_round(t, lambda: evaluate(cspec, h, sspec, w, cfg.test)):
            break
    loop.shutdown()
    loop.log.state = state
    return loop.log


def sflg_server(cfg: RoundConfig, channels: Sequence[tp.Endpoint], groups: GroupAssignment) -> MetricsLog:
    """Main server and fed server of generalized splitfed learning."""
    problems = groups.problems(cfg.num_clients)
    if problems:
        raise ConfigError(problems)
    channels = handshake(channels, cfg.num_clients)
    split = cfg.variant.split
    cspec, sspec = split.client, split.server
    sizes = cfg.sizes()
    group_sizes = groups.sample_counts(sizes)
    loop = _RoundLoop(cfg, channels, cfg.fingerprint("sflg", groups))
    h, w = init_split_params(split, cfg.seed)
    state = TrainState(client_model=h, server_model=w)

    def run_group(members, w_start):
        wg = w_start
        for k in members:
            wg = serve_client(channels[k], sspec, wg, client_id=k, eta=cfg.eta, wire_dtype=cfg.wire_dtype)
        return wg

    with ThreadPoolExecutor(max_workers=len(groups.groups), thread_name_prefix="group") as pool:
        for t in range(cfg.rounds):
            down = tp.ModelDown(h.astype(cfg.wire_dtype))
            for ch in channels:
                ch.send(down)
            futures = [pool.submit(run_group, g, w) for g in groups.groups]
            wait(futures)
            group_models = [f.result() for f in futures]
            client_models = [
                _expect(ch.recv(), tp.ModelUp, f"fed server, client {k}").params.astype(np.float64)
                for k, ch in enumerate(channels)
            ]
            w = fedavg_aggregate(group_models, group_sizes)
            h = fedavg_aggregate(client_models, sizes)
            state = TrainState(t + 1, client_model=h, server_model=w,
                               client_models=client_models, group_models=group_models)
            if loop.end_round(t, lambda: evaluate(cspec, h, sspec, w, cfg.test)):
                break
    loop.shutdown()
    loop.log.state = state
    return loop.log


# ---------------------------------------------------------------------------
# drivers


def _roles(protocol: str, groups: GroupAssignment | None):
    if protocol == "fl":
        return fl_server, fl_client
    if protocol == "sl":
        return sl_server, split_client
    if protocol == "sflg":
        if groups is None:
            raise ConfigError(["sflg requires groups"])
        return (lambda cfg, chans: sflg_server(cfg, chans, groups)), split_client
    raise ConfigError([f"unknown protocol {protocol!r}"])


def _check(cfg: RoundConfig, protocol: str, groups: GroupAssignment | None):
    problems = cfg.problems(protocol)
    if protocol == "sflg" and groups is not None:
        problems += groups.problems(cfg.num_clients)
    if problems:
        raise ConfigError(problems)


def run_loopback(cfg: RoundConfig, protocol: str, groups: GroupAssignment | None = None) -> MetricsLog:
    """Run server and clients as threads joined by in-process pipes."""
    _check(cfg, protocol, groups)
    server_role, client_role = _roles(protocol, groups)
    k = cfg.num_clients
    pairs = [tp.loopback_pair("server", f"client{c}") for c in range(k)]

    def guarded(c):
        ch = pairs[c][1]
        try:
            client_role(ch, c, cfg)
        except BaseException:
            ch.close()
            raise

    server_side = [p[0] for p in pairs]
    with ThreadPoolExecutor(max_workers=k, thread_name_prefix="client") as pool:
        futures = [pool.submit(guarded, c) for c in range(k)]
        try:
            result = server_role(cfg, server_side)
        except BaseException as exc:
            for ch in server_side:
                ch.close()
            wait(futures)
            for c, f in enumerate(futures):
                err = f.exception()
                if err is not None and not isinstance(err, tp.PeerClosed):
                    raise ProtocolError(f"client {c} failed: {err}") from err
            raise exc
        for f in futures:
            f.result()
    return result


def run_fl(cfg: RoundConfig) -> MetricsLog:
    return run_loopback(cfg, "fl")


def run_sl(cfg: RoundConfig) -> MetricsLog:
    return run_loopback(cfg, "sl")


def run_sflg(cfg: RoundConfig, groups: GroupAssignment) -> MetricsLog:
    return run_loopback(cfg, "sflg", groups)


def run_centralized(cfg: RoundConfig, data: Dataset | None = None) -> MetricsLog:
    """Whole-network SGD on one dataset (default: all training data), one epoch per round.

    Batch order matches a single client with id 0, so a one-client FL or SL run
    reproduces it.
    """
    _check(cfg, "fl", None)
    data = cfg.train if data is None else data
    spec = cfg.variant.full
    w = init_params(spec, cfg.seed)
    loop = _RoundLoop(cfg, [], cfg.fingerprint("central"))
    for t in range(cfg.rounds):
        w = local_sgd(spec, w, data, epochs=cfg.local_epochs, eta=cfg.eta, batch_size=cfg.batch_size,
                      seed=cfg.seed, client_id=0, round_index=t)
        if loop.end_round(t, lambda: evaluate(spec, w, None, None, cfg.test)):
            break
    loop.log.state = TrainState(t + 1, full_model=w)
    return loop.log


# ---------------------------------------------------------------------------
# sockets


def serve_socket(cfg: RoundConfig, protocol: str, groups: GroupAssignment | None, host: str, port: int,
                 on_listen: Callable[[int], None] | None = None,
                 accept_timeout: float | None = None) -> MetricsLog:
    """Accept one connection per client, then run the server role over TCP."""
    _check(cfg, protocol, groups)
    server_role, _ = _roles(protocol, groups)
    srv = tp.listen(host, port)
    channels = []
    try:
        if on_listen is not None:
            on_listen(srv.getsockname()[1])
        for _ in range(cfg.num_clients):
            channels.append(tp.accept(srv, accept_timeout))
        return server_role(cfg, channels)
    finally:
        for ch in channels:
            ch.close()
        srv.close()


def client_socket(cfg: RoundConfig, protocol: str, client_id: int, host: str, port: int) -> None:
    _, client_role = _roles(protocol, GroupAssignment(((0,),)) if protocol == "sflg" else None)
    if not 0 <= client_id < cfg.num_clients:
        raise ConfigError([f"client id {client_id} outside [0, {cfg.num_clients})"])
    channel = tp.connect(host, port)
    try:
        client_role(channel, client_id, cfg)
    finally:
        channel.close()
