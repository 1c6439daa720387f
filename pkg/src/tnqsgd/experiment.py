"""Experiment configuration files and the glue that turns them into runs.

A config is a flat ``key = value`` text file; ``#`` starts a comment.  The
recognised keys and their defaults are listed in :data:`KEYS`.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import data, simtrain
from .errors import ConfigurationError, InvalidParameterError
from .models import Model, ModelSpec

KEYS = {
    # dataset
    "dataset": "synthetic",  # synthetic | separable | mnist
    "mnist_images": "",
    "mnist_labels": "",
    "max_samples": "0",  # 0: use every sample
    "test_fraction": "0.2",
    "synth_dim": "1000",
    "synth_samples": "2000",
    "synth_gamma": "1.0",
    "synth_signal": "0.0",
    "separable_samples": "400",
    # model
    "model": "",  # default: linear_regression for synthetic, logistic_regression otherwise
    "hidden": "",  # comma-separated hidden widths for mlp
    # partition
    "partition": "iid_equal",  # iid_equal | iid_sized
    "client_weights": "",  # comma-separated, iid_sized only
    # training, mirrors TrainConfig
    "clients": "8",
    "batch": "32",  # integer or "full"
    "lr": "0.01",
    "momentum": "0.9",
    "weight_decay": "0.0005",
    "rounds": "100",
    "scheme": "tnq",
    "bits": "3",
    "seed": "0",
    "eval_every": "1",
    "threads": "1",
}

# seed-derived streams outside the per-round ones used by simtrain
STREAM_DATA = 3
STREAM_PARTITION = 4


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    mnist_images: str
    mnist_labels: str
    max_samples: int
    test_fraction: float
    synth_dim: int
    synth_samples: int
    synth_gamma: float
    synth_signal: float
    separable_samples: int
    model: str
    hidden: tuple
    partition: str
    client_weights: tuple
    train: simtrain.TrainConfig

    def with_run(self, **changes) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, **changes))


def _int(key, v):
    try:
        return int(v)
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: expected an integer, got {v!r}") from None


def _float(key, v):
    try:
        x = float(v)
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: expected a number, got {v!r}") from None
    if not math.isfinite(x):
        raise ConfigurationError(f"config key {key!r}: value must be finite")
    return x


def _list(key, v, conv):
    return tuple(conv(key, x.strip()) for x in v.split(",") if x.strip())


def parse_config(text: str) -> ExperimentConfig:
    """Parse config text; unknown keys and malformed lines raise ConfigurationError."""
    values = dict(KEYS)
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigurationError(f"line {lineno}: duplicate config key {key!r}")
        seen.add(key)
        values[key] = value
    return _build(values)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def _build(v) -> ExperimentConfig:
    dataset = v["dataset"]
    if dataset not in ("synthetic", "separable", "mnist"):
        raise ConfigurationError(f"config key 'dataset': unknown dataset {dataset!r}")
    if dataset == "mnist" and not (v["mnist_images"] and v["mnist_labels"]):
        raise ConfigurationError("config key 'mnist_images': mnist needs mnist_images and mnist_labels")
    model = v["model"] or ("linear_regression" if dataset == "synthetic" else "logistic_regression")
    if (model == "linear_regression") != (dataset == "synthetic"):
        raise ConfigurationError(f"config key 'model': {model} does not fit dataset {dataset}")
    test_fraction = _float("test_fraction", v["test_fraction"])
    if not 0 <= test_fraction < 1:
        raise ConfigurationError("config key 'test_fraction': must lie in [0, 1)")
    batch = None if v["batch"] == "full" else _int("batch", v["batch"])
    try:
        train = simtrain.TrainConfig(
            clients=_int("clients", v["clients"]),
            batch=batch,
            lr=_float("lr", v["lr"]),
            momentum=_float("momentum", v["momentum"]),
            weight_decay=_float("weight_decay", v["weight_decay"]),
            rounds=_int("rounds", v["rounds"]),
            scheme=v["scheme"].lower(),
            bits=_int("bits", v["bits"]),
            seed=_int("seed", v["seed"]),
            eval_every=_int("eval_every", v["eval_every"]),
            threads=_int("threads", v["threads"]),
        )
    except InvalidParameterError as exc:  # bit-width validation
        raise ConfigurationError(f"config key 'bits': {exc}") from None
    cfg = ExperimentConfig(
        dataset=dataset,
        mnist_images=v["mnist_images"],
        mnist_labels=v["mnist_labels"],
        max_samples=_int("max_samples", v["max_samples"]),
        test_fraction=test_fraction,
        synth_dim=_int("synth_dim", v["synth_dim"]),
        synth_samples=_int("synth_samples", v["synth_samples"]),
        synth_gamma=_float("synth_gamma", v["synth_gamma"]),
        synth_signal=_float("synth_signal", v["synth_signal"]),
        separable_samples=_int("separable_samples", v["separable_samples"]),
        model=model,
        hidden=_list("hidden", v["hidden"], _int),
        partition=v["partition"],
        client_weights=_list("client_weights", v["client_weights"], _float),
        train=train,
    )
    if cfg.partition not in ("iid_equal", "iid_sized"):
        raise ConfigurationError(f"config key 'partition': unknown mode {cfg.partition!r}")
    if cfg.partition == "iid_sized" and len(cfg.client_weights) != train.clients:
        raise ConfigurationError("config key 'client_weights': need one weight per client")
    if model == "mlp" and not cfg.hidden:
        raise ConfigurationError("config key 'hidden': mlp needs at least one hidden width")
    return cfg


def thread_cap(requested: int) -> int:
    """Apply the ``TNQ_THREADS`` ceiling to a requested thread count."""
    env = os.environ.get("TNQ_THREADS", "").strip()
    if not env:
        return max(1, requested)
    try:
        cap = int(env)
    except ValueError:
        raise ConfigurationError(f"TNQ_THREADS must be a positive integer, got {env!r}") from None
    if cap < 1:
        raise ConfigurationError(f"TNQ_THREADS must be a positive integer, got {env!r}")
    return max(1, min(requested, cap))


@dataclass
class Problem:
    model: Model
    train: data.Dataset
    test: Optional[data.Dataset]
    partition: data.Partition


def _split(ds: data.Dataset, fraction: float, rng):
    if fraction == 0:
        return ds, None
    perm = rng.permutation(len(ds))
    n_test = int(round(fraction * len(ds)))
    if n_test == 0 or n_test == len(ds):
        raise ConfigurationError("config key 'test_fraction': leaves an empty train or test set")
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def build_problem(cfg: ExperimentConfig) -> Problem:
    """Load or generate data, split it and partition it across clients.

    Every random choice derives from the run seed, so one seed fixes the
    whole experiment.
    """
    t = cfg.train
    rng = simtrain.stream(t.seed, 0, 0, STREAM_DATA)
    if cfg.dataset == "synthetic":
        task = data.synth_laplace_task(cfg.synth_dim, cfg.synth_samples, cfg.synth_gamma, rng, cfg.synth_signal)
        train, test = task.dataset, None
        spec = ModelSpec("linear_regression", (1, cfg.synth_dim), bias=False)
    else:
        if cfg.dataset == "separable":
            full = data.separable_2d(cfg.separable_samples, rng)
        else:
            full = data.load_idx(cfg.mnist_images, cfg.mnist_labels)
        if cfg.max_samples and cfg.max_samples < len(full):
            full = full.subset(np.sort(rng.permutation(len(full))[: cfg.max_samples]))
        train, test = _split(full, cfg.test_fraction, rng)
        hidden = cfg.hidden if cfg.model == "mlp" else ()
        dims = (full.features.shape[1], *hidden, max(2, full.num_classes))
        spec = ModelSpec(cfg.model, dims)
    prng = simtrain.stream(t.seed, 0, 0, STREAM_PARTITION)
    weights = cfg.client_weights if cfg.partition == "iid_sized" else None
    part = data.partition(train, t.clients, cfg.partition, prng, weights)
    return Problem(Model(spec), train, test, part)


def run_experiment(cfg: ExperimentConfig, problem: Optional[Problem] = None) -> simtrain.RunMetrics:
    problem = problem or build_problem(cfg)
    run_cfg = replace(cfg.train, threads=thread_cap(cfg.train.threads))
    return simtrain.run(run_cfg, problem.model, problem.train, problem.partition, problem.test)


SWEEP_COLUMNS = ("row_type", "scheme", "bits", "seed", "loss", "grad_sq_norm", "test_acc", "bits_cum")


def sweep(cfg: ExperimentConfig, bits_list, schemes, seeds: int, threads: int = 1):
    """Final metrics for every (scheme, bits, seed) cell plus mean/std rows.

    Rows come back in (scheme, bits) order with the per-seed rows of a cell
    followed by its ``mean`` and ``std`` rows, whatever the completion order.
    The uncompressed baseline ignores ``bits``; it is trained once per seed
    and repeated under every bit budget.
    """
    if seeds < 1:
        raise ConfigurationError("need at least one seed")
    for s in schemes:
        if s not in simtrain.SCHEMES:
            raise ConfigurationError(f"unknown scheme {s!r}")
    seed_list = [cfg.train.seed + k for k in range(seeds)]
    jobs = {}
    for scheme in schemes:
        for b in bits_list:
            for seed in seed_list:
                key = (scheme, b if scheme != "dsgd" else None, seed)
                jobs.setdefault(key, cfg.with_run(scheme=scheme, bits=b, seed=seed, threads=1))
    # each seed's problem is built once, up front, so workers only read it
    problems = {seed: build_problem(cfg.with_run(seed=seed)) for seed in seed_list}

    def work(key):
        p = problems[key[2]]
        return key, simtrain.run(jobs[key].train, p.model, p.train, p.partition, p.test).final

    n_threads = thread_cap(threads)
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            results = dict(pool.map(work, list(jobs)))
    else:
        results = dict(work(k) for k in jobs)

    rows = []
    for scheme in schemes:
        for b in bits_list:
            cell = [results[(scheme, b if scheme != "dsgd" else None, seed)] for seed in seed_list]
            for seed, final in zip(seed_list, cell):
                rows.append(
                    dict(row_type="run", scheme=scheme, bits=b, seed=seed, **{c: final[c] for c in SWEEP_COLUMNS[4:]})
                )
            for kind, fn in (("mean", np.mean), ("std", np.std)):
                agg = {c: float(fn([f[c] for f in cell])) for c in SWEEP_COLUMNS[4:]}
                rows.append(dict(row_type=kind, scheme=scheme, bits=b, seed="", **agg))
    return rows

