"""Distributed SGD simulator with per-layer gradient compression.

Each round every client downloads the parameters, computes a minibatch
gradient, compresses each layer independently and uploads the ``TNQ1``
payloads.  The server decodes, forms the weighted average and applies a
momentum SGD step.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from . import codec
from .data import Dataset, Partition
from .errors import ConfigurationError, DegenerateModelError, DivergenceError, ProtocolError
from .laplace import LaplaceModel, estimate_gamma, optimal_alpha_tnq, optimal_alpha_tuq, optimal_grid_tnq
from .models import Model
from .quantizer import QuantConfig, QuantizationGrid, Scheme, levels_for_bits, uniform_grid

SCHEMES = ("tnq", "tuq", "nq", "uq", "dsgd")
FLOAT_BITS = 32
DIVERGENCE_LOSS = 1e6

STREAM_BATCH = 0
STREAM_QUANT = 1


@dataclass(frozen=True)
class TrainConfig:
    clients: int = 8
    batch: Optional[int] = 32  # None: full shard every round
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    rounds: int = 100
    scheme: str = "tnq"
    bits: int = 3
    weights: Optional[tuple] = None  # None: proportional to shard sizes
    seed: int = 0
    eval_every: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.clients < 1 or self.rounds < 1 or self.eval_every < 1 or self.threads < 1:
            raise ConfigurationError("clients, rounds, eval_every and threads must be >= 1")
        if self.batch is not None and self.batch < 1:
            raise ConfigurationError("batch must be >= 1")
        if not self.lr > 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("need lr > 0, momentum >= 0, weight_decay >= 0")
        if self.scheme != "dsgd":
            QuantConfig(Scheme.TNQ, self.bits, 1.0)  # validates bits
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if len(w) != self.clients or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ConfigurationError("weights need one nonnegative entry per client summing to 1")


@dataclass
class RoundState:
    params: list
    buffers: list
    t: int = 0
    aggregate: Optional[list] = None


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)  # one dict per evaluated round
    gammas: list = field(default_factory=list)  # (round, client, layer, gamma, alpha)
    layer_names: Sequence[str] = ()
    state: Optional[RoundState] = None

    COLUMNS = ("round", "loss", "grad_sq_norm", "test_acc", "bits_round", "bits_cum")

    @property
    def final(self) -> dict:
        return self.rows[-1]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.COLUMNS])

    def write_gamma_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("round", "client", "layer", "gamma", "alpha"))
            for t, i, j, gamma, alpha in self.gammas:
                w.writerow((t, i, self.layer_names[j], _fmt(gamma), _fmt(alpha)))


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def stream(seed: int, client: int, rnd: int, purpose: int) -> np.random.Generator:
    """Counter-based generator owned by one (client, round, purpose) triple."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(rnd, client, purpose))
    return np.random.Generator(np.random.Philox(ss))


@lru_cache(maxsize=4096)
def _unit_grid(nonuniform: bool, s: int, ratio: float) -> np.ndarray:
    if nonuniform:
        return optimal_grid_tnq(s, LaplaceModel(1.0), ratio).points
    return uniform_grid(ratio, s).points


def grid_for(scheme: Scheme, s: int, alpha: float, gamma: float) -> QuantizationGrid:
    """Grid the receiver rebuilds from a payload header.

    Both grid families scale linearly with gamma, so grids are cached at
    unit scale keyed by ``alpha / gamma``.
    """
    pts = _unit_grid(scheme.nonuniform, s, alpha / gamma) * gamma
    pts[0], pts[-1] = -alpha, alpha
    return QuantizationGrid(pts)


def threshold_for(scheme: Scheme, s: int, g: np.ndarray, model: LaplaceModel) -> float:
    if scheme is Scheme.TNQ:
        return optimal_alpha_tnq(s, model)
    if scheme is Scheme.TUQ:
        return optimal_alpha_tuq(s, model)
    return float(np.max(np.abs(g)))


def client_gradient(model: Model, params, shard: Dataset, batch: Optional[int], rng):
    if len(shard) == 0:
        raise ConfigurationError("client shard is empty")
    if batch is None:
        X, y = shard.features, shard.labels
    else:
        idx = rng.integers(0, len(shard), size=batch)
        X, y = shard.features[idx], shard.labels[idx]
    return model.loss_and_grad(params, X, y)[1]


def compress_layer(g, scheme, bits: int, rng) -> codec.EncodedGradient:
    scheme = Scheme.parse(scheme)
    flat = np.asarray(g, dtype=np.float64).ravel()
    try:
        lap = estimate_gamma(flat)
    except DegenerateModelError:
        return codec.zero_marker(flat.size, scheme, bits)
    s = levels_for_bits(bits)
    alpha = threshold_for(scheme, s, flat, lap)
    grid = grid_for(scheme, s, alpha, lap.scale)
    return codec.encode(flat, QuantConfig(scheme, bits, alpha), grid, rng, gamma=lap.scale)


def compress_per_layer(gradients, scheme, bits: int, rng):
    return [compress_layer(g, scheme, bits, rng) for g in gradients]


def decode_layer(e: codec.EncodedGradient) -> np.ndarray:
    if e.is_zero_marker:
        return codec.decode(e, None)
    return codec.decode(e, grid_for(e.scheme, e.levels, e.alpha, e.gamma))


def aggregate(encoded, weights, shapes):
    """Weighted sum of the clients' decoded layers; ``encoded[i][j]`` is client i, layer j."""
    if len(encoded) != len(weights):
        raise ProtocolError("one payload list per client required")
    bits = {e.bits for layers in encoded for e in layers}
    if len(bits) > 1:
        raise ProtocolError(f"clients used different bit budgets {sorted(bits)}")
    out = [np.zeros(shape) for shape in shapes]
    for w, layers in zip(weights, encoded):
        if len(layers) != len(shapes):
            raise ProtocolError("layer count mismatch")
        for j, (e, shape) in enumerate(zip(layers, shapes)):
            if e.d != int(np.prod(shape)):
                raise ProtocolError(f"layer {j}: payload has {e.d} coordinates, model has {int(np.prod(shape))}")
            out[j] += w * decode_layer(e).reshape(shape)
    return out


def server_update(state: RoundState, agg, config: TrainConfig) -> RoundState:
    m, wd, lr = config.momentum, config.weight_decay, config.lr
    params, buffers = [], []
    for theta, buf, g in zip(state.params, state.buffers, agg):
        buf = m * buf + (g + wd * theta)
        buffers.append(buf)
        params.append(theta - lr * buf)
    return RoundState(params, buffers, state.t + 1, agg)


def _objective(model, params, shards, weights):
    loss = 0.0
    grads = None
    for w, shard in zip(weights, shards):
        li, gi = model.loss_and_grad(params, shard.features, shard.labels)
        loss += w * li
        grads = [w * g for g in gi] if grads is None else [a + w * g for a, g in zip(grads, gi)]
    return loss, float(sum(np.sum(g * g) for g in grads))


def run(
    config: TrainConfig,
    model: Model,
    train: Dataset,
    part: Partition,
    test: Optional[Dataset] = None,
    init_params=None,
    callback: Optional[Callable[[int, RoundState], None]] = None,
) -> RunMetrics:
    """Execute ``config.rounds`` rounds of compressed distributed SGD.

    ``callback(t, state)`` sees the state before round ``t``'s update.
    """
    N = config.clients
    if len(part.shards) != N:
        raise ConfigurationError(f"partition has {len(part.shards)} shards for {N} clients")
    shards = [train.subset(s) for s in part.shards]
    if any(len(s) == 0 for s in shards):
        raise ConfigurationError("client shard is empty")
    weights = np.asarray(config.weights if config.weights is not None else part.weights, dtype=float)
    params = init_params if init_params is not None else model.init_params(stream(config.seed, N, 0, 2))
    params = [np.array(p, dtype=np.float64) for p in params]
    state = RoundState(params, [np.zeros_like(p) for p in params])
    shapes = [p.shape for p in params]
    compressed = config.scheme != "dsgd"
    scheme = Scheme.parse(config.scheme) if compressed else None
    metrics = RunMetrics(layer_names=model.names)
    evaluate_on = test if test is not None else train

    def record(t, bits_round, bits_cum):
        loss, gsq = _objective(model, state.params, shards, weights)
        if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise DivergenceError(f"training diverged at round {t}: loss={loss}", round=t, loss=loss)
        acc = model.accuracy(state.params, evaluate_on.features, evaluate_on.labels)
        metrics.rows.append(
            dict(round=t, loss=float(loss), grad_sq_norm=gsq, test_acc=acc, bits_round=bits_round, bits_cum=bits_cum)
        )

    def work(i, t):
        grads = client_gradient(model, state.params, shards[i], config.batch, stream(config.seed, i, t, STREAM_BATCH))
        if not compressed:
            return grads, None
        return None, compress_per_layer(grads, scheme, config.bits, stream(config.seed, i, t, STREAM_QUANT))

    record(0, 0, 0)
    bits_cum = 0
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for t in range(config.rounds):
            if callback is not None:
                callback(t, state)
            if pool is None:
                results = [work(i, t) for i in range(N)]
            else:
                results = list(pool.map(lambda i: work(i, t), range(N)))
            if compressed:
                payloads = [r[1] for r in results]
                for i, layers in enumerate(payloads):
                    for j, e in enumerate(layers):
                        metrics.gammas.append((t + 1, i, j, e.gamma, e.alpha))
                agg = aggregate(payloads, weights, shapes)
                bits_round = sum(e.nbits for e in payloads[0])
            else:
                agg = [np.zeros(s) for s in shapes]
                for w, (grads, _) in zip(weights, results):
                    for j, g in enumerate(grads):
                        agg[j] += w * g
                bits_round = FLOAT_BITS * sum(int(np.prod(s)) for s in shapes)
            bits_cum += bits_round * N
            state = server_update(state, agg, config)
            if (t + 1) % config.eval_every == 0 or t + 1 == config.rounds:
                record(t + 1, bits_round, bits_cum)
    finally:
        if pool is not None:
            pool.shutdown()
    metrics.state = state
    return metrics
