"""Command-line entry point: ``umasplit <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/model format error,
3 numerical failure (NaN loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as cfgfile
from .autodiff import FormatError
from .data import SynthConfig, generate_dataset, read_dataset, write_dataset
from .model import ModelConfig, UmaSplitModel, load_checkpoint
from .train import TrainConfig, evaluate, train
from .uma import dump_rows

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3
HELP_WIDTH = 100

log = logging.getLogger("umasplit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=32)


def _int_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}") from None
    return lo, hi


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat 'key = value' file; flags override it")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", type=Path, help="output file or directory")
    p.add_argument("--data", type=Path, help="UMAD dataset file")
    p.add_argument("--model", type=Path, help="checkpoint path (without suffix) or directory")
    p.add_argument("--workers", type=int, default=1, help="evaluation worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="umasplit", formatter_class=_formatter,
                     description="UMA-Split sequence transduction on synthetic data.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="write a synthetic UMAD dataset", formatter_class=_formatter)
    _shared(p)
    p.add_argument("--vocab", type=int, help="vocabulary size V")
    p.add_argument("--frames-per-token", type=_int_range, help="input frames per token, lo:hi")
    p.add_argument("--tokens", type=_int_range, help="tokens per utterance, lo:hi")
    p.add_argument("--pair-prob", type=float, help="probability a syllable carries two tokens")
    p.add_argument("--noise-std", type=float, help="Gaussian feature noise")
    p.add_argument("--count", type=int, help="number of utterances")

    p = sub.add_parser("train", help="train a model and write checkpoint + log",
                       formatter_class=_formatter)
    _shared(p)
    p.add_argument("--steps", type=int, help="optimisation steps")
    p.add_argument("--batch", type=int, help="utterances per batch")
    p.add_argument("--lr", type=float, help="base learning rate of the warmup schedule")
    p.add_argument("--warmup", type=int, help="warmup steps")
    p.add_argument("--no-split", action="store_true", help="disable the split module")
    p.add_argument("--no-self-conditioning", action="store_true",
                   help="plain intermediate CTC instead of self-conditioning")

    p = sub.add_parser("eval", help="token error rate and UMA statistics", formatter_class=_formatter)
    _shared(p)

    p = sub.add_parser("inspect-uma", help="per-frame UMA weight dump", formatter_class=_formatter)
    _shared(p)
    p.add_argument("--utt-index", default="0", help="utterance index or comma-separated list")

    p = sub.add_parser("stats", help="rate and split statistics as one row", formatter_class=_formatter)
    _shared(p)

    p = sub.add_parser("grad-check", help="finite-difference gradient suites",
                       formatter_class=_formatter)
    _shared(p)
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _config_values(args) -> dict[str, str]:
    return cfgfile.read_file(args.config) if args.config else {}


def _split_values(values: dict[str, str], *classes) -> list[dict[str, str]]:
    parts = []
    claimed = set()
    for cls in classes:
        names = {f.name for f in dataclasses.fields(cls)}
        parts.append({k: v for k, v in values.items() if k in names})
        claimed |= names
    unknown = set(values) - claimed
    if unknown:
        raise cfgfile.ConfigError(f"unknown config keys: {sorted(unknown)}")
    return parts


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"{args.command}: --{name.replace('_', '-')} is required")


def cmd_gen_data(args) -> int:
    _require(args, "out")
    values = _config_values(args)
    count = int(values.pop("count", 100))
    cfg = cfgfile.build(SynthConfig, values)
    overrides = {"vocab_size": args.vocab, "frames_per_token": args.frames_per_token,
                 "tokens_per_utt": args.tokens, "pair_prob": args.pair_prob,
                 "noise_std": args.noise_std, "seed": args.seed}
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if args.count is not None:
        count = args.count
    write_dataset(args.out, generate_dataset(cfg, count))
    print(f"wrote {count} utterances to {args.out}")
    return EXIT_OK


def _model_path(path: Path) -> Path:
    return path / "model" if path.is_dir() else path


def cmd_train(args) -> int:
    _require(args, "data", "out")
    values = _config_values(args)
    val_count = int(values.pop("val_count", 100))
    model_vals, train_vals = _split_values(values, ModelConfig, TrainConfig)
    samples = read_dataset(args.data)
    if len(samples) <= val_count:
        raise UsageError("dataset must be larger than val_count")
    model_vals.setdefault("feat_dim", str(samples[0].features.shape[1]))
    model_vals.setdefault("vocab_size", str(max(max(s.tokens) for s in samples)))
    mcfg = cfgfile.build(ModelConfig, model_vals)
    tcfg = cfgfile.build(TrainConfig, train_vals)
    tcfg = dataclasses.replace(tcfg, **{k: v for k, v in {
        "steps": args.steps, "batch": args.batch, "lr": args.lr, "warmup": args.warmup,
        "seed": args.seed}.items() if v is not None})
    m_over = {}
    if args.no_split:
        m_over["use_split"] = False
    if args.no_self_conditioning:
        m_over["use_self_conditioning"] = False
    if args.seed is not None:
        m_over["seed"] = args.seed
    mcfg = dataclasses.replace(mcfg, **m_over)
    args.out.mkdir(parents=True, exist_ok=True)
    result = train(UmaSplitModel(mcfg), samples[:-val_count], samples[-val_count:], tcfg,
                   log_path=args.out / "train.log", out_dir=args.out)
    skipped = sum(r.skipped for r in result.history)
    print(f"trained {tcfg.steps} steps; skipped {skipped} samples; checkpoint {args.out / 'model'}")
    if result.nan_steps:
        print(f"numerical failure: {result.nan_steps} steps with non-finite loss", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _load(args):
    _require(args, "data", "model")
    return load_checkpoint(_model_path(args.model)), read_dataset(args.data)


def _fmt_ratio(x) -> str:
    return "undefined" if x is None else f"{100 * x:.1f}%"


def cmd_eval(args) -> int:
    model, samples = _load(args)
    res = evaluate(model, samples, workers=args.workers)
    st = res.stats()
    lines = [
        f"utterances\t{len(samples)}",
        f"token_error_rate\t{res.token_error_rate:.4f}",
        f"incomputable_fraction\t{res.incomputable_fraction:.4f}",
        f"token_rate_tps\t{st.token_rate:.3f}",
        f"frame_rate_before_fps\t{st.frame_rate_before:.3f}",
        f"frame_rate_after_fps\t{st.frame_rate_after:.3f}",
        f"nonblank\t{_fmt_ratio(st.nonblank_ratio)}",
        f"two_nonblank\t{_fmt_ratio(st.two_nonblank_ratio)}",
    ]
    _emit(args, lines)
    return EXIT_OK


def cmd_inspect(args) -> int:
    model, samples = _load(args)
    try:
        indices = [int(v) for v in str(args.utt_index).split(",")]
    except ValueError:
        raise UsageError("--utt-index expects integers") from None
    lines = []
    frozen = model.frozen()
    for idx in indices:
        if not 0 <= idx < len(samples):
            raise UsageError(f"--utt-index {idx} out of range (0..{len(samples) - 1})")
        out = frozen.forward(samples[idx].features)
        lines.append(f"# utterance {idx} tokens {' '.join(map(str, samples[idx].tokens))}")
        lines.extend(dump_rows(out.alpha, out.segmentation))
    _emit(args, lines)
    return EXIT_OK


STATS_COLUMNS = ("token_rate_tps", "frame_rate_before_fps", "frame_rate_after_fps",
                 "nonblank", "two_nonblank", "params")


def cmd_stats(args) -> int:
    model, samples = _load(args)
    st = evaluate(model, samples, workers=args.workers).stats()
    row = (f"{st.token_rate:.2f}", f"{st.frame_rate_before:.2f}", f"{st.frame_rate_after:.2f}",
           _fmt_ratio(st.nonblank_ratio), _fmt_ratio(st.two_nonblank_ratio),
           str(model.num_params()))
    _emit(args, ["\t".join(STATS_COLUMNS), "\t".join(row)])
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import run_all, tolerance_for

    results = run_all(seed=args.seed or 0)
    failed = False
    lines = []
    for name, err in results.items():
        ok = err <= tolerance_for(name)
        failed |= not ok
        lines.append(f"{name}\t{err:.3e}\t{'ok' if ok else 'FAIL'}")
    _emit(args, lines)
    return EXIT_NUMERIC if failed else EXIT_OK


def _emit(args, lines) -> None:
    text = "\n".join(lines) + "\n"
    if args.out is not None:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "inspect-uma": cmd_inspect, "stats": cmd_stats, "grad-check": cmd_grad_check}


def run(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.workers is not None and args.workers < 1:
            raise UsageError("--workers must be >= 1")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except cfgfile.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, ValueError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
