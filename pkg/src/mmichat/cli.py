"""Command-line entry point: ``mmichat <command> [options]``.

Commands: prepare, train, decode, rerank, tune, eval, pipeline.
Exit status is 0 on success; failures print one line
``error: <category>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .config import ExperimentConfig, load_config
from .errors import ConfigError, InputError, MMIError
from .metrics import evaluate

log = logging.getLogger("mmichat")

EXIT_CODES = {
    "internal": 1, "input": 2, "config": 3, "missing-artifact": 4,
    "corpus": 5, "checkpoint": 6, "diverged": 7, "io": 8,
}


def _common(parser: argparse.ArgumentParser, top: bool) -> None:
    default = None if top else argparse.SUPPRESS
    parser.add_argument("--config", default=default, help="sectioned key = value config file")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--out-dir", default=default)
    parser.add_argument("--threads", type=int, default=default)
    parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=default,
                        help="fixed-order execution (forces one decoding thread)")
    parser.add_argument("--set", action="append", default=[] if top else argparse.SUPPRESS,
                        metavar="SECTION.KEY=VALUE", help="override a config setting")
    parser.add_argument("-v", "--verbose", action="store_true", default=False if top else argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmichat", description=__doc__.splitlines()[0])
    _common(parser, top=True)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _common(p, top=False)
        return p

    p = add("prepare", "build the vocabulary and encode corpora")
    for split in ("train", "valid", "dev", "test"):
        p.add_argument(f"--{split}", help=f"{split} pair file (TSV)")

    p = add("train", "train forward, backward and/or LM models")
    p.add_argument("--role", choices=("forward", "backward", "lm", "all"), default="all")

    p = add("decode", "write N-best lists for a held-out split")
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=("baseline", "greedy", "anti_lm"), default="baseline")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--gamma-g", type=int)
    p.add_argument("--gamma-len", type=float)
    p.add_argument("--beam-size", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--use-tuned", action="store_true", help="take weights from `tune --mode anti_lm`")
    p.add_argument("--output")

    p = add("rerank", "rerank N-best lists with the backward model")
    p.add_argument("--split", default="test")
    p.add_argument("--nbest", help="input N-best file (default: <split>.baseline.nbest)")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--gamma-len", type=float)
    p.add_argument("--use-tuned", action="store_true", help="take weights from `tune --mode bidi`")
    p.add_argument("--output")

    p = add("tune", "tune MMI weights for dev BLEU")
    p.add_argument("--mode", choices=("anti_lm", "bidi"), required=True)
    p.add_argument("--split", default="dev")
    p.add_argument("--nbest")
    p.add_argument("--method", choices=("grid", "mert"))

    p = add("eval", "BLEU and distinct-n reports")
    p.add_argument("--split", default="test")
    p.add_argument("--system", action="append", choices=P.SYSTEMS + ("greedy",))
    p.add_argument("--hyp", help="plain hypothesis file (one per line)")
    p.add_argument("--ref", action="append", help="reference file aligned by line; repeatable")
    p.add_argument("--output", help="report path prefix for --hyp mode")

    add("pipeline", "end-to-end run: prepare, train, decode, tune, rerank, eval")
    return parser


def resolve_config(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    if args.out_dir is not None:
        overrides.append(f"experiment.out_dir={args.out_dir}")
    if args.threads is not None:
        overrides.append(f"experiment.threads={args.threads}")
    if args.deterministic is not None:
        overrides.append(f"experiment.deterministic={args.deterministic}")
    cfg = load_config(args.config, overrides)
    return cfg


def cmd_prepare(cfg, layout, args):
    for split in ("train", "valid", "dev", "test"):
        val = getattr(args, split, None)
        if val:
            setattr(cfg.data, split, str(Path(val).resolve()))
    cfg.validate(check_paths=True)
    return P.prepare(cfg, layout)


def cmd_train(cfg, layout, args):
    cfg.validate()
    roles = P.ROLES if args.role == "all" else (args.role,)
    return P.train(cfg, layout, roles)


def cmd_decode(cfg, layout, args):
    if args.beam_size is not None:
        cfg.decode.beam_size = args.beam_size
    if args.max_len is not None:
        cfg.decode.max_len = args.max_len
    cfg.validate()
    weights = {}
    if args.use_tuned:
        weights = P.read_weights(P.require(layout.weights("anti_lm"), "tune --mode anti_lm"))
    for key, val in (("lambda", args.lam), ("gamma_g", args.gamma_g), ("gamma_len", args.gamma_len)):
        if val is not None:
            weights[key] = val
    probe = P.decode_config(cfg, args.mode, weights)
    problems = probe.validate()
    if problems:
        raise ConfigError(problems)
    return [P.decode(cfg, layout, args.split, args.mode, weights,
                     output=Path(args.output) if args.output else None)]


def cmd_rerank(cfg, layout, args):
    cfg.validate()
    weights = {}
    if args.use_tuned:
        weights = P.read_weights(P.require(layout.weights("bidi"), "tune --mode bidi"))
    if args.lam is not None:
        weights["lambda"] = args.lam
    if args.gamma_len is not None:
        weights["gamma_len"] = args.gamma_len
    return [P.rerank(cfg, layout, args.split, weights,
                     nbest_path=Path(args.nbest) if args.nbest else None,
                     output=Path(args.output) if args.output else None)]


def cmd_tune(cfg, layout, args):
    if args.method:
        cfg.tune.method = args.method
    cfg.validate()
    result, paths = P.tune(cfg, layout, args.mode, args.split,
                           Path(args.nbest) if args.nbest else None)
    print(" ".join(f"{k}={v}" for k, v in result.weights.items()) + f" dev_bleu={result.bleu:.6f}")
    return paths


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def cmd_eval(cfg, layout, args):
    cfg.validate()
    if args.hyp:
        if not args.ref:
            raise InputError("--hyp needs at least one --ref file")
        hyps = _read_lines(args.hyp)
        ref_sets = [_read_lines(r) for r in args.ref]
        for path, refs in zip(args.ref, ref_sets):
            if len(refs) != len(hyps):
                raise InputError(f"{path} has {len(refs)} lines, hypotheses have {len(hyps)}")
        refs = [list(group) for group in zip(*ref_sets)]
        report = evaluate(hyps, refs, smooth=cfg.eval.smooth,
                          distinct_denominator=cfg.eval.distinct_denominator)
        sys.stdout.write(report.to_text())
        prefix = Path(args.output) if args.output else Path(args.hyp)
        txt = prefix.with_name(prefix.name + ".report.txt")
        kv = prefix.with_name(prefix.name + ".report.kv")
        txt.write_text(report.to_text(), encoding="utf-8")
        kv.write_text(report.to_keyvalue(), encoding="utf-8")
        return [txt, kv]
    systems = args.system or [s for s in P.SYSTEMS if layout.nbest(args.split, s).is_file()]
    if not systems:
        raise InputError(f"no N-best files for split {args.split!r}; run decode first")
    results, written = [], []
    for system in systems:
        res, paths = P.evaluate_system(cfg, layout, args.split, system)
        results.append(res)
        written += paths
        sys.stdout.write(f"{system}: " + Path(paths[1]).read_text(encoding="utf-8").splitlines()[0] + "\n")
    if args.split == "test":
        written += P.write_comparison(layout, results)
    return written


def cmd_pipeline(cfg, layout, args):
    cfg.validate(check_paths=True)
    P.run_pipeline(cfg, layout)
    sys.stdout.write(layout.comparison("txt").read_text(encoding="utf-8"))
    return None


COMMANDS = {
    "prepare": cmd_prepare, "train": cmd_train, "decode": cmd_decode, "rerank": cmd_rerank,
    "tune": cmd_tune, "eval": cmd_eval, "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        layout = P.Layout(cfg.out_dir)
        with P.locked(cfg.out_dir):
            written = COMMANDS[args.command](cfg, layout, args)
            if written:
                P.write_manifest(cfg, layout, args.command, written)
    except MMIError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
