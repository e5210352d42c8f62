"""Command-line interface: gen-data, train, eval, sinkhorn, ablate.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure. All output
files are plain text or the named-array container; every command is
deterministic given config+seed, with timestamps confined to '#' header
lines so reruns are byte-comparable below them.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import statistics
import sys
from dataclasses import replace
from datetime import datetime, timezone

import numpy as np

from . import ot
from .config import ConfigError, load_config
from .encoders import load_checkpoint, save_checkpoint
from .synthdata import SPLITS, gen_corpus, load_split, save_corpus
from .training import (MODES, evaluate, train, uses_adapter)


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this artifact reserves 2 for runtime."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_splits(run_cfg):
    return {s: load_split(run_cfg.corpus_dir, s, run_cfg.corpus.vocab_chars)
            for s in SPLITS}


def _manifest_sha256(corpus_dir) -> str:
    h = hashlib.sha256()
    for split in SPLITS:
        path = os.path.join(corpus_dir, split, "manifest.txt")
        with open(path, "rb") as f:
            h.update(f.read())
    return h.hexdigest()


def _config_overrides(args) -> dict:
    return {
        "seed": getattr(args, "seed_override", None),
        "alpha": getattr(args, "alpha", None),
        "lambda": getattr(args, "lambda_", None),
    }


def _write_metrics(path, history, run_cfg, mode) -> None:
    lines = [
        f"# otasr-metrics {_timestamp()} mode={mode} seed={run_cfg.hp.seed} "
        f"lambda={_fmt(run_cfg.hp.lam)} w={_fmt(run_cfg.hp.w)} "
        f"alpha={_fmt(run_cfg.hp.alpha)} s={_fmt(run_cfg.hp.s)} "
        f"backend={ot.backend()}\n",
        "# columns: epoch mode ctc align eot total dev_cer lr skipped\n",
    ]
    for rec in history:
        lines.append(
            f"{rec.epoch} {rec.mode} {_fmt(rec.loss.ctc)} {_fmt(rec.loss.align)} "
            f"{_fmt(rec.loss.eot)} {_fmt(rec.loss.total)} {_fmt(rec.dev_cer)} "
            f"{_fmt(rec.lr)} {rec.skipped}\n"
        )
    with open(path, "w") as f:
        f.writelines(lines)


def cmd_gen_data(args) -> int:
    run_cfg = load_config(args.config, _config_overrides(args))
    out_dir = args.out or run_cfg.corpus_dir
    splits = gen_corpus(run_cfg.corpus)
    save_corpus(out_dir, splits)
    for split in SPLITS:
        print(f"{split}: {len(splits[split])} utterances")
    print(f"corpus written to {out_dir}")
    return 0


def cmd_train(args) -> int:
    run_cfg = load_config(args.config, _config_overrides(args))
    splits = _load_splits(run_cfg)
    out_dir = args.out or f"run-{args.mode}-seed{run_cfg.hp.seed}"
    os.makedirs(out_dir, exist_ok=True)
    model, history = train(splits, run_cfg.encoder, run_cfg.hp, args.mode,
                           checkpoint_dir=out_dir)
    _write_metrics(os.path.join(out_dir, "metrics.txt"), history, run_cfg,
                   args.mode)
    final_path = os.path.join(out_dir, "checkpoint-final.arr")
    save_checkpoint(final_path, model, uses_adapter(args.mode), run_cfg.hp.s)
    final_dev = evaluate(model, splits["dev"], uses_adapter(args.mode))
    print(f"mode={args.mode} epochs={len(history)} "
          f"final_dev_cer={_fmt(final_dev)}")
    print(f"checkpoint: {final_path}")
    print(f"metrics: {os.path.join(out_dir, 'metrics.txt')}")
    return 0


def cmd_eval(args) -> int:
    run_cfg = load_config(args.config, _config_overrides(args))
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model, meta = load_checkpoint(args.checkpoint)
    if int(meta["vocab"]) != run_cfg.corpus.vocab_chars:
        raise ValueError(
            f"checkpoint vocabulary ({int(meta['vocab'])}) does not match "
            f"config vocab_chars ({run_cfg.corpus.vocab_chars})"
        )
    utts = load_split(run_cfg.corpus_dir, args.split, run_cfg.corpus.vocab_chars)

    sinkhorn_before = ot.SINKHORN_CALLS
    teacher_before = model.teacher_calls
    cer_value = evaluate(model, utts, bool(meta["use_adapter"]))
    sinkhorn_used = ot.SINKHORN_CALLS - sinkhorn_before
    teacher_used = model.teacher_calls - teacher_before
    if sinkhorn_used or teacher_used:
        raise RuntimeError(
            "inference purity violated: "
            f"{sinkhorn_used} transport solves, {teacher_used} teacher calls"
        )

    line = (f"split={args.split} utts={len(utts)} cer={_fmt(cer_value)} "
            f"sinkhorn_calls={sinkhorn_used} teacher_calls={teacher_used} "
            f"checkpoint={os.path.basename(args.checkpoint)}")
    out_path = args.out or os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)),
        f"eval-report-{args.split}.txt")
    with open(out_path, "w") as f:
        f.write(f"# otasr-eval {_timestamp()}\n")
        f.write(line + "\n")
    print(line)
    return 0


def _parse_cost_file(path) -> np.ndarray:
    rows = []
    width = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            try:
                row = [float(tok) for tok in stripped.split()]
            except ValueError:
                raise ConfigError(
                    f"{path}:{lineno}: cannot parse cost row {stripped!r}"
                ) from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ConfigError(
                    f"{path}:{lineno}: expected {width} entries, got {len(row)}"
                )
            rows.append(row)
    if not rows:
        raise ConfigError(f"{path}: no cost entries found")
    return np.array(rows)


def cmd_sinkhorn(args) -> int:
    cost = _parse_cost_file(args.cost)
    result = ot.sinkhorn(cost, args.alpha, max_iter=args.max_iter, tol=args.tol)
    print("gamma:")
    for row in result.coupling.gamma:
        print("  " + " ".join(_fmt(v) for v in row))
    print(f"transport_cost = {_fmt(result.transport_cost)}")
    print(f"entropy = {_fmt(result.entropy)}")
    print(f"eot_loss = {_fmt(result.eot_loss)}")
    print(f"iterations = {result.iterations_used} "
          f"converged = {str(result.converged).lower()}")
    return 0 if result.converged else 2


def run_ablation(run_cfg, splits, seeds):
    """Train every mode on every seed; returns per-mode median and detail CERs."""
    details = {mode: [] for mode in MODES}
    for seed in seeds:
        hp = replace(run_cfg.hp, seed=seed)
        for mode in MODES:
            model, _ = train(splits, run_cfg.encoder, hp, mode)
            dev = evaluate(model, splits["dev"], uses_adapter(mode))
            test = evaluate(model, splits["test"], uses_adapter(mode))
            details[mode].append((seed, dev, test))
    medians = {
        mode: (statistics.median(d for _, d, _ in rows),
               statistics.median(t for _, _, t in rows))
        for mode, rows in details.items()
    }
    return medians, details


def cmd_ablate(args) -> int:
    run_cfg = load_config(args.config, _config_overrides(args))
    splits = _load_splits(run_cfg)
    seeds = [run_cfg.hp.seed + i for i in range(run_cfg.ablate_num_seeds)]
    medians, details = run_ablation(run_cfg, splits, seeds)

    out_dir = args.out or "ablate-out"
    os.makedirs(out_dir, exist_ok=True)
    manifest_hash = _manifest_sha256(run_cfg.corpus_dir)
    header = (f"# otasr-ablate {_timestamp()} seeds={','.join(map(str, seeds))} "
              f"corpus={run_cfg.corpus_dir} manifest_sha256={manifest_hash}\n")
    table_lines = [header, "# columns: mode dev_cer test_cer\n"]
    for mode in MODES:
        dev, test = medians[mode]
        table_lines.append(f"{mode} {_fmt(dev)} {_fmt(test)}\n")
    report_path = os.path.join(out_dir, "ablate-report.txt")
    with open(report_path, "w") as f:
        f.writelines(table_lines)

    detail_lines = [header, "# columns: mode seed dev_cer test_cer\n"]
    for mode in MODES:
        for seed, dev, test in details[mode]:
            detail_lines.append(f"{mode} {seed} {_fmt(dev)} {_fmt(test)}\n")
    with open(os.path.join(out_dir, "ablate-details.txt"), "w") as f:
        f.writelines(detail_lines)

    for line in table_lines:
        print(line, end="")
    print(f"report: {report_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="otasr",
                     description="Optimal-transport cross-modal transfer for "
                                 "CTC sequence models, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def add_common(p):
        p.add_argument("--config", required=True, help="flat key=value file")
        p.add_argument("--seed-override", type=int, default=None,
                       dest="seed_override")
        p.add_argument("--alpha", type=float, default=None,
                       help="override the transport regularizer")
        p.add_argument("--lambda", type=float, default=None, dest="lambda_",
                       help="override the loss trade-off weight")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    add_common(p)
    p.add_argument("--out", default=None, help="corpus directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one mode")
    add_common(p)
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--out", default=None, help="run output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--out", default=None, help="report file path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sinkhorn", help="solve one transport instance")
    p.add_argument("--cost", required=True,
                   help="text file, one cost row per line")
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=1000, dest="max_iter")
    p.set_defaults(func=cmd_sinkhorn)

    p = sub.add_parser("ablate", help="run all four modes over shared seeds")
    add_common(p)
    p.add_argument("--out", default=None, help="report directory")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse --help (0) or usage error (1)
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 — runtime failures map to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
