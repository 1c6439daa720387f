"""Command-line front end: ``tnqsgd {analyze,quantize,inspect,train,sweep}``.

Exit codes: 0 success, 2 usage, 3 I/O or malformed input file,
4 numerical failure or divergence.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import analysis, codec, experiment, simtrain
from .errors import ConfigurationError, FormatError, NumericalError, TNQError
from .quantizer import Scheme

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

ANALYZE_COLUMNS = ("scheme", "b", "s", "alpha", "variance", "bias", "total", "normalized_total")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text):
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _bits_list(text):
    vals = _int_list(text)
    if any(not 1 <= b <= 32 for b in vals):
        raise argparse.ArgumentTypeError("bit budgets must lie in [1, 32]")
    return vals


def _schemes(text):
    vals = [x.strip().lower() for x in text.split(",") if x.strip()]
    bad = [x for x in vals if x not in simtrain.SCHEMES]
    if bad or not vals:
        raise argparse.ArgumentTypeError(f"schemes must come from {','.join(simtrain.SCHEMES)}")
    return vals


def _positive(conv):
    def parse(text):
        try:
            v = conv(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid number {text!r}") from None
        if not v > 0 or not np.isfinite(v):
            raise argparse.ArgumentTypeError(f"must be positive, got {text!r}")
        return v

    return parse


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_rows(rows, columns, out):
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])


def _emit(rows, columns, path):
    if path is None:
        _write_rows(rows, columns, sys.stdout)
    else:
        with open(path, "w", newline="", encoding="utf-8") as f:
            _write_rows(rows, columns, f)


def analyze_rows(gamma, dim, clients, bits_list):
    rows = []
    for e in analysis.scheme_table(gamma, dim, clients, bits_list):
        rows.append(
            dict(
                scheme=e.scheme.name.lower(),
                b=e.s.bit_length(),
                s=e.s,
                alpha=e.alpha,
                variance=e.breakdown.variance_term,
                bias=e.breakdown.bias_term,
                total=e.value,
                normalized_total=e.normalized,
            )
        )
    return rows


def cmd_analyze(args):
    _emit(analyze_rows(args.gamma, args.dim, args.clients, args.bits_list), ANALYZE_COLUMNS, args.out)


def _read_vector(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        g = np.load(path, allow_pickle=False)
    else:
        text = path.read_text(encoding="utf-8").replace(",", " ")
        try:
            g = np.array([float(x) for x in text.split()])
        except ValueError as exc:
            raise FormatError(f"{path}: not a list of numbers ({exc})") from None
    return np.asarray(g, dtype=np.float64).ravel()


def cmd_quantize(args):
    g = _read_vector(Path(args.input))
    rng = simtrain.stream(args.seed, 0, 0, simtrain.STREAM_QUANT)
    e = simtrain.compress_layer(g, args.scheme, args.bits, rng)
    codec.write_file(args.output, e)
    print(f"wrote {args.output}: d={e.d} scheme={e.scheme.name.lower()} bits={e.bits} bytes={len(e.to_bytes())}")


def cmd_inspect(args):
    e = codec.read_file(args.file)
    values = simtrain.decode_layer(e)
    idx = codec.decode_indices(e)
    fields = [
        ("magic", codec.MAGIC.decode()),
        ("version", codec.VERSION),
        ("scheme", e.scheme.name.lower()),
        ("bits", e.bits),
        ("levels", e.levels),
        ("alpha", e.alpha),
        ("gamma", e.gamma),
        ("d", e.d),
        ("zero_marker", int(e.is_zero_marker)),
        ("payload_bytes", len(e.payload)),
        ("total_bits", e.nbits),
        ("index_min", int(idx.min())),
        ("index_max", int(idx.max())),
        ("mean", float(values.mean())),
        ("std", float(values.std())),
        ("min", float(values.min())),
        ("max", float(values.max())),
    ]
    for k, v in fields:
        print(f"{k}={_fmt(v)}")
    if args.decode:
        with open(args.decode, "w", encoding="utf-8") as f:
            f.writelines(f"{repr(float(v))}\n" for v in values)


def cmd_train(args):
    cfg = experiment.load_config(args.config)
    metrics = experiment.run_experiment(cfg)
    metrics.write_csv(args.out)
    if args.gamma_out:
        metrics.write_gamma_csv(args.gamma_out)
    f = metrics.final
    print(
        f"scheme={cfg.train.scheme} rounds={f['round']} final_loss={_fmt(f['loss'])} "
        f"accuracy={_fmt(f['test_acc'])} uplink_bits={f['bits_cum']}"
    )


def cmd_sweep(args):
    cfg = experiment.load_config(args.config)
    rows = experiment.sweep(cfg, args.bits, args.schemes, args.seeds, threads=args.threads)
    _emit(rows, experiment.SWEEP_COLUMNS, args.out)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tnqsgd", description="Truncated non-uniform gradient quantization toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="scheme error table under the Laplace model")
    a.add_argument("--gamma", type=_positive(float), default=1.0, help="Laplace scale (default 1)")
    a.add_argument("--dim", type=_positive(int), default=1, help="gradient dimension d (default 1)")
    a.add_argument("--clients", type=_positive(int), default=1, help="number of clients N (default 1)")
    a.add_argument("--bits-list", type=_bits_list, default=[2, 3, 4], help="comma-separated bit widths (default 2,3,4)")
    a.add_argument("--out", help="CSV path (default stdout)")
    a.set_defaults(func=cmd_analyze)

    q = sub.add_parser("quantize", help="compress a vector file into a TNQ1 file")
    q.add_argument("input", help=".npy array or text file of numbers")
    q.add_argument("output", help="TNQ1 file to write")
    q.add_argument("--scheme", type=str.lower, choices=[s.name.lower() for s in Scheme], default="tnq")
    q.add_argument("--bits", type=int, choices=range(1, 33), metavar="{1..32}", default=3)
    q.add_argument("--seed", type=int, default=0, help="rounding seed (default 0)")
    q.set_defaults(func=cmd_quantize)

    i = sub.add_parser("inspect", help="print a TNQ1 file's header and decoded statistics")
    i.add_argument("file", help="TNQ1 file")
    i.add_argument("--decode", help="also write the decoded values, one per line")
    i.set_defaults(func=cmd_inspect)

    t = sub.add_parser("train", help="run the simulator from a config file")
    t.add_argument("--config", required=True, help="key=value config file")
    t.add_argument("--out", default="metrics.csv", help="per-round metrics CSV (default metrics.csv)")
    t.add_argument("--gamma-out", help="optional CSV of per-client, per-layer gamma estimates")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="bits x scheme x seed grid of final metrics")
    s.add_argument("--config", required=True, help="key=value config file")
    s.add_argument("--bits", type=_bits_list, default=[2, 3, 4], help="comma-separated bit widths (default 2,3,4)")
    s.add_argument("--schemes", type=_schemes, default=list(simtrain.SCHEMES), help="comma-separated schemes (default all five)")
    s.add_argument("--seeds", type=_positive(int), default=1, help="seeds per cell, starting at the config seed")
    s.add_argument("--threads", type=_positive(int), default=1, help="worker threads, capped by TNQ_THREADS")
    s.add_argument("--out", help="CSV path (default stdout)")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"tnqsgd: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"tnqsgd: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"tnqsgd: numerical error: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(f"tnqsgd: diagnostics: {exc.diagnostics}", file=sys.stderr)
        return EXIT_NUMERICAL
    except TNQError as exc:
        print(f"tnqsgd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
