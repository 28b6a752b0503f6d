"""Command-line entry point: ``rgmshift <subcommand> --config <path> [--seed-list ...] [--out <dir>]``.

Exit codes: 0 success, 2 configuration error, 3 pipeline failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

# BLAS pools are sized at import time, so the cap has to be in place before numpy loads.
_cap = os.environ.get("RGMSHIFT_THREADS")
if _cap and _cap.isdigit() and int(_cap) >= 1:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _cap)

from .. import io as rio  # noqa: E402
from .._validation import InvalidArgument, RgmShiftError  # noqa: E402
from . import pipelines as P  # noqa: E402

log = logging.getLogger("rgmshift")


def _tune_malloc():
    """Keep large numpy temporaries on the heap instead of fresh mmaps.

    The pairwise message tensors are allocated and freed every layer; with the
    glibc defaults each one costs page faults, roughly a third of the runtime.
    No-op where glibc is not available.
    """
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return
    M_TRIM_THRESHOLD, M_TOP_PAD, M_MMAP_THRESHOLD = -1, -2, -3
    libc.mallopt(M_MMAP_THRESHOLD, 1 << 30)
    libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)
    libc.mallopt(M_TOP_PAD, 64 << 20)

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE = 0, 2, 3

SUBCOMMANDS = {
    "gen": lambda c, s, o, w: P.run_gen(c, s, o),
    "train": P.run_train,
    "exp1": P.run_exp1,
    "exp2": P.run_exp2,
    "exp3a": P.run_exp3a,
    "exp3b": P.run_exp3b,
    "exp3c": P.run_exp3c,
    "sim-size": lambda c, s, o, w: P.run_sim(c, s, o, "size", w),
    "sim-shift": lambda c, s, o, w: P.run_sim(c, s, o, "shift", w),
    "bound": lambda c, s, o, w: P.run_bound(c, s, o),
    "bound-sweep": lambda c, s, o, w: P.run_bound_sweep(c, s, o),
    "selftest": lambda c, s, o, w: P.run_selftest(c, s, o),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="rgmshift", description="Random-graph-model domain adaptation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=name != "selftest", help="JSON config file")
        sp.add_argument("--seed-list", action="append", nargs="+", default=None,
                        help="seeds, comma or space separated; may repeat")
        sp.add_argument("--out", default=None, help="output directory (default: config 'out' or ./out)")
    return p


def parse_seeds(raw):
    """Flatten repeated, comma- or space-separated seed arguments."""
    seeds = []
    for group in raw:
        for tok in group:
            for part in tok.replace(",", " ").split():
                try:
                    v = int(part)
                except ValueError as exc:
                    raise P.ConfigError(f"seed {part!r} is not an integer") from exc
                if v < 0:
                    raise P.ConfigError("seeds must be >= 0")
                seeds.append(v)
    if not seeds:
        raise P.ConfigError("seed list is empty")
    return seeds


def main(argv=None):
    args = build_parser().parse_args(argv)
    _tune_malloc()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        workers = rio.thread_cap()
        cfg = P.load_config(args.config) if args.config else {}
        if args.seed_list:
            seeds = parse_seeds(args.seed_list)
        else:
            seeds = cfg.get("seeds", [0])
            if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
                raise P.ConfigError("config 'seeds' must be a non-empty list of nonnegative integers")
        out = args.out or cfg.get("out") or "out"
        try:
            os.makedirs(out, exist_ok=True)
        except OSError as exc:
            raise P.ConfigError(f"output directory not writable: {exc}") from exc
        result = SUBCOMMANDS[args.command](cfg, seeds, out, workers)
    except (P.ConfigError, InvalidArgument) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except P.PipelineFailure as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except (RgmShiftError, ValueError, ArithmeticError, OSError) as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    log.info("%s done: %s", args.command, result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
