"""Command-line entry point: ``python -m fsclab <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import checkpoint as ckpt_io
from .config import PATH_FIELDS, ConfigError, build, field_types, load_file
from .evaluation import WISE_FT_ALPHAS, evaluate_checkpoint, trajectory_csv, wise_ft_trajectory
from .hardneg import default_lexicon, generate_set
from .synth import Example, flatten_suites, group_suites, make_dataset, make_eval_suites, suite_keys
from .trainer import Divergence, train, write_metrics

log = logging.getLogger("fsclab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _thread_limit():
    n = os.environ.get("FSC_LAB_THREADS")
    if not n:
        return nullcontext()
    try:
        limit = int(n)
    except ValueError:
        raise ConfigError(f"FSC_LAB_THREADS must be an integer, got {n!r}") from None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl is not installed; FSC_LAB_THREADS is ignored")
        return nullcontext()
    return threadpool_limits(limits=limit)


# --------------------------------------------------------------------------
# atomic text outputs


def _write_text(path, text: str) -> None:
    ckpt_io.atomic_write_bytes(path, text.encode("utf-8"))


def _write_jsonl(path, records) -> None:
    _write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# subcommands


def _run_config(args):
    file_values = load_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k, None) for k in field_types()}
    return build(file_values, overrides)


def cmd_gen_data(args) -> None:
    cfg = _run_config(args)
    out = Path(cfg.out or ".")
    suites = make_eval_suites(cfg.n_eval, cfg.seed, cfg.G)
    data = make_dataset(cfg.n_train, cfg.seed, exclude=suite_keys(suites), grid=cfg.G)
    _write_jsonl(out / "train.jsonl", [e.to_json() for e in data])
    _write_jsonl(out / "eval.jsonl", flatten_suites(suites))
    log.info("wrote %d training scenes and %d eval items to %s", len(data), cfg.n_eval * 4, out)


def cmd_gen_negatives(args) -> None:
    if not args.in_path or not args.out:
        raise ConfigError("gen-negatives needs --in and --out")
    lexicon = default_lexicon()
    records = []
    with open(args.in_path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    for item_id, line in enumerate(lines):
        if not line.strip():
            continue
        text = json.loads(line)["caption"] if line.lstrip().startswith("{") else line
        hn = generate_set(text, lexicon, seed=args.seed or 0, item_id=item_id, step=0)
        records.append({"item_id": item_id, **hn.to_json()})
    _write_jsonl(args.out, records)


def cmd_train(args) -> None:
    cfg = _run_config(args)
    if not cfg.data or not cfg.out:
        raise ConfigError("train needs --data and --out (flag or config)")
    data = [Example.from_json(r) for r in _read_jsonl(cfg.data)]
    init = ckpt_io.load(cfg.init) if cfg.init else None
    if init is not None and init.metadata.get("encoder") != cfg.encoder_config().to_json():
        raise ConfigError("encoder settings differ from the --init checkpoint")
    record = {k: v for k, v in cfg.to_json().items() if k not in PATH_FIELDS}
    result = train(data, cfg.train_config(), cfg.encoder_config(), init=init, log_every=args.log_every, run_config=record)
    ckpt_io.save(result.checkpoint, cfg.out)
    metrics = cfg.metrics or str(Path(cfg.out).with_suffix(".metrics.csv"))
    tmp = Path(metrics).with_name(Path(metrics).name + ".part")
    write_metrics(tmp, result.metrics)
    os.replace(tmp, metrics)
    print(result.checkpoint.digest())


def _suites(path):
    return group_suites(_read_jsonl(path))


def cmd_eval(args) -> None:
    if not args.ckpt or not args.suite or not args.out:
        raise ConfigError("eval needs --ckpt, --suite and --out")
    report = evaluate_checkpoint(ckpt_io.load(args.ckpt), _suites(args.suite))
    _write_text(args.out, report.dumps() + "\n")
    _write_text(Path(args.out).with_suffix(".csv"), report.to_csv())


def cmd_merge(args) -> None:
    if not (args.pre and args.ft and args.out) or args.alpha is None:
        raise ConfigError("merge needs --pre, --ft, --alpha and --out")
    if not 0.0 <= args.alpha <= 1.0:
        raise ConfigError("--alpha must lie in [0, 1]")
    merged = ckpt_io.wise_ft_interpolate(ckpt_io.load(args.pre), ckpt_io.load(args.ft), args.alpha)
    ckpt_io.save(merged, args.out)


def cmd_plot_data(args) -> None:
    if not (args.pre and args.ft and args.suite and args.out):
        raise ConfigError("plot-data needs --pre, --ft, --suite and --out")
    rows = wise_ft_trajectory(ckpt_io.load(args.pre), ckpt_io.load(args.ft), _suites(args.suite), WISE_FT_ALPHAS)
    _write_text(args.out, trajectory_csv(rows))


# --------------------------------------------------------------------------
# parser


def _add_run_flags(p):
    p.add_argument("--config", metavar="PATH", help="flat JSON run config; flags override its values")
    for name, kind in field_types().items():
        if name in ("seed", "out"):
            continue
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind, default=None, metavar=kind.__name__.upper())


def _add_common(p):
    p.add_argument("--seed", type=int, default=None, metavar="N")
    p.add_argument("--out", metavar="PATH", default=None)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fsclab", description="Fine-grained contrastive training on synthetic shapes scenes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write train.jsonl and eval.jsonl into --out")
    _add_common(p)
    _add_run_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gen-negatives", help="hard-negative sets for captions, one JSON line each")
    _add_common(p)
    p.add_argument("--in", dest="in_path", metavar="PATH", help="captions: plain lines or JSONL with a caption field")
    p.set_defaults(func=cmd_gen_negatives)

    p = sub.add_parser("train", help="train or fine-tune; prints the checkpoint sha256")
    _add_common(p)
    _add_run_flags(p)
    p.add_argument("--log-every", type=int, default=0, metavar="N")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metric report as JSON plus a CSV row")
    _add_common(p)
    p.add_argument("--ckpt", metavar="PATH")
    p.add_argument("--suite", metavar="PATH")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("merge", help="weight-space interpolation of two checkpoints")
    _add_common(p)
    p.add_argument("--pre", metavar="PATH")
    p.add_argument("--ft", metavar="PATH")
    p.add_argument("--alpha", type=float, default=None)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("plot-data", help="alpha,Comp,ZS along the interpolation line as CSV")
    _add_common(p)
    p.add_argument("--pre", metavar="PATH")
    p.add_argument("--ft", metavar="PATH")
    p.add_argument("--suite", metavar="PATH")
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    command = "fsclab"
    try:
        args = parser.parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        with _thread_limit():
            args.func(args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except ConfigError as e:
        print(f"{command}: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, KeyError, Divergence, ckpt_io.CorruptFile) as e:
        print(f"{command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
