"""Shared builders and independent reference implementations for the tests."""
import numpy as np

from splitfed import transport as tp
from splitfed.datagen import partition_iid, train_test
from splitfed.nnkernel import (
    ParamEntry,
    ParameterSet,
    backward,
    forward,
    init_params,
    softmax_cross_entropy,
    sgd_step,
)
from splitfed.protocols import RoundConfig
from splitfed.splitmodel import build_variant, split_params


def make_cfg(variant="tiny", n_train=160, n_test=80, clients=4, rounds=2, wire="f64", seed=0,
             data_seed=0, batch_size=16, eta=0.05, local_epochs=1, plan=None, **extra):
    """Small synthetic RoundConfig whose data fits ``variant``."""
    v = build_variant(variant)
    _, length = v.full.input_shape
    train, test = train_test(n_train, n_test, 5, length, 1, data_seed)
    plan = plan or partition_iid(train, clients, seed)
    return RoundConfig(v, train, test, plan, rounds=rounds, local_epochs=local_epochs, eta=eta,
                       batch_size=batch_size, seed=seed, wire=wire, **extra)


# ---------------------------------------------------------------------------
# random messages


def random_params(gen, dtype):
    entries = []
    for i in range(int(gen.integers(0, 4))):
        shape = tuple(int(d) for d in gen.integers(1, 5, size=int(gen.integers(1, 4))))
        entries.append(ParamEntry(2 * i, gen.normal(size=shape).astype(dtype),
                                  gen.normal(size=shape[:1]).astype(dtype)))
    return ParameterSet(entries)


def random_tensor(gen, dtype):
    shape = tuple(int(d) for d in gen.integers(0, 6, size=int(gen.integers(0, 5))))
    return gen.normal(size=shape).astype(dtype)


def random_message(gen):
    dtype = np.float32 if gen.random() < 0.5 else np.float64
    kind = int(gen.integers(1, 8))
    u32 = lambda: int(gen.integers(0, 2**32))  # noqa: E731
    if kind == 1:
        return tp.ModelDown(random_params(gen, dtype))
    if kind == 2:
        return tp.ModelUp(random_params(gen, dtype))
    if kind == 3:
        b = int(gen.integers(0, 5))
        return tp.Smashed(u32(), u32(), u32(), gen.normal(size=(b, 3, 4)).astype(dtype),
                          gen.integers(0, 2**32, size=b))
    if kind == 4:
        return tp.SmashedGrad(u32(), u32(), u32(), random_tensor(gen, dtype))
    if kind == 5:
        return tp.EvalRequest(u32(), random_tensor(gen, dtype))
    if kind == 6:
        return tp.EvalReply(u32(), random_tensor(gen, dtype))
    return tp.Control(int(gen.integers(0, 256)), u32(), int(gen.integers(0, 2**63)) * 2 + int(gen.integers(0, 2)))


# ---------------------------------------------------------------------------
# reference splitfed training, written without the protocol machinery


def _weighted_mean(models, counts):
    total = float(sum(counts))
    acc = None
    for m, c in zip(models, counts):
        part = [(c / total) * a for a in m.arrays()]
        acc = part if acc is None else [x + y for x, y in zip(acc, part)]
    it = iter(acc)
    return models[0].map(lambda _: next(it))


def _client_epoch(cfg, k, t, h, w):
    """One client's pass over its shard against server model ``w``."""
    split = cfg.variant.split
    shard = cfg.shard(k)
    for e in range(cfg.local_epochs):
        order = np.random.default_rng([cfg.seed, k, t, e]).permutation(len(shard))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            cacts, a = forward(split.client, h, shard.x[idx])
            sacts, logits = forward(split.server, w, a)
            _, dlogits = softmax_cross_entropy(logits, shard.y[idx])
            sgrads, da = backward(split.server, w, sacts, dlogits)
            w = sgd_step(w, sgrads, cfg.eta)
            cgrads, _ = backward(split.client, h, cacts, da)
            h = sgd_step(h, cgrads, cfg.eta)
    return h, w


def _initial(cfg):
    split = cfg.variant.split
    return split_params(init_params(cfg.variant.full, cfg.seed), split.cut_index)


def sflv1_reference(cfg):
    """Every client trains against its own copy of the server model; both sides are averaged."""
    h, w = _initial(cfg)
    sizes = cfg.sizes()
    for t in range(cfg.rounds):
        pairs = [_client_epoch(cfg, k, t, h, w) for k in range(cfg.num_clients)]
        h = _weighted_mean([p[0] for p in pairs], sizes)
        w = _weighted_mean([p[1] for p in pairs], sizes)
    return h, w


def sflv2_reference(cfg):
    """Clients take turns updating one server model; client models are averaged."""
    h, w = _initial(cfg)
    sizes = cfg.sizes()
    for t in range(cfg.rounds):
        locals_ = []
        for k in range(cfg.num_clients):
            hk, w = _client_epoch(cfg, k, t, h, w)
            locals_.append(hk)
        h = _weighted_mean(locals_, sizes)
    return h, w
