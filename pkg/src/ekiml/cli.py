"""Command-line entry point.

Subcommands ``train-supervised``, ``train-ssl`` and ``train-online`` run a
JSON experiment config; ``report`` turns a metrics CSV into plots; ``fetch``
downloads the full MNIST files and verifies their checksums.  Exit status is
0 on success, 2 for invalid configs or arguments and 1 for run failures.
"""

import argparse
import json
import sys
import urllib.request
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .data import DataFormatError, file_checksum, verify_checksum
from .metrics import read_metrics_csv
from .report import emit_report
from .runner import run_experiment

__all__ = ["main", "build_parser", "MNIST_FILES"]

_COMMAND_TASK = {
    "train-supervised": "supervised",
    "train-ssl": "semi-supervised",
    "train-online": "online",
}

# Official MNIST archives with their published MD5 digests.
MNIST_MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist/"
MNIST_FILES = {
    "train-images-idx3-ubyte.gz": "md5:f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "md5:d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "md5:9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "md5:ec29112dd5afa0611ce80d1b7f02629c",
}


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=default, help="override the config seed")
    parser.add_argument("--out-dir", default=default, help="directory for metrics, summary and parameters")
    parser.add_argument("--threads", type=int, default=default, help="cap BLAS worker threads")


def build_parser():
    parser = argparse.ArgumentParser(prog="ekiml", description="Ensemble Kalman inversion experiments")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, task in _COMMAND_TASK.items():
        p = sub.add_parser(name, help=f"run {'an' if task[0] in 'aeiou' else 'a'} {task} experiment")
        _global_flags(p, suppress=True)
        p.add_argument("--plots", action="store_true", help="also write PNG plots (needs matplotlib)")
    p = sub.add_parser("report", help="tables and plots from a metrics CSV")
    _global_flags(p, suppress=True)
    p.add_argument("metrics", help="metrics CSV written by a training command")
    p.add_argument("--plots", action="store_true", help="write PNG plots instead of .dat files")
    p = sub.add_parser("fetch", help="download full MNIST and verify checksums")
    _global_flags(p, suppress=True)
    p.add_argument("--dest", required=True, help="target directory")
    p.add_argument("--mirror", default=MNIST_MIRROR, help="base URL of the MNIST files")
    return parser


def _limit_threads(n):
    if n is None:
        return None
    if n < 1:
        raise ConfigError("--threads must be positive")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _train(args):
    if not args.config:
        raise ConfigError(f"{args.command} needs --config")
    cfg = load_config(args.config)
    expected = _COMMAND_TASK[args.command]
    if cfg.task != expected:
        raise ConfigError(f"config task is {cfg.task!r}; {args.command} runs {expected!r}")
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg.seed = args.seed
    out = Path(args.out_dir or f"runs/{cfg.name}")
    if args.plots:
        cfg.output["plots"] = True

    def show(rec):
        print(
            f"step {rec.step:>6}  train {rec.metric} {rec.train_metric:.6g}  "
            f"test {rec.metric} {rec.test_metric:.6g}  J={rec.ensemble_size}  t={rec.wall_time:.1f}s",
            flush=True,
        )

    result = run_experiment(cfg, out_dir=out, on_record=show)
    emit_report(result.records, out, plots=cfg.output["plots"], prefix="report")
    np.save(out / "mean_params.npy", result.mean_params)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2) + "\n")
    for key, value in result.summary.items():
        print(f"{key}: {value}")
    return 0


def _report(args):
    records = read_metrics_csv(args.metrics)
    out = Path(args.out_dir or Path(args.metrics).parent)
    for path in emit_report(records, out, plots=args.plots, prefix=Path(args.metrics).stem):
        print(path)
    return 0


def _fetch(args):
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    for name, checksum in MNIST_FILES.items():
        target = dest / name
        if target.exists():
            try:
                verify_checksum(target, checksum)
                print(f"ok (cached) {target}")
                continue
            except DataFormatError:
                target.unlink()
        tmp = target.with_suffix(target.suffix + ".part")
        with urllib.request.urlopen(args.mirror.rstrip("/") + "/" + name, timeout=60) as resp:
            tmp.write_bytes(resp.read())
        try:
            verify_checksum(tmp, checksum)
        except DataFormatError:
            got = file_checksum(tmp, checksum.split(":")[0])
            tmp.unlink()
            raise DataFormatError("checksum-mismatch", f"{name}: expected {checksum}, got {got}") from None
        tmp.replace(target)
        print(f"ok {target}")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        limiter = _limit_threads(args.threads)
        try:
            if args.command in _COMMAND_TASK:
                return _train(args)
            if args.command == "report":
                return _report(args)
            return _fetch(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (ConfigError, FileNotFoundError, DataFormatError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
