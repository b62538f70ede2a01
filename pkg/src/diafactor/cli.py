"""Command-line entry point: ``diafactor <stage> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("diafactor")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diafactor", description="Factorial diarization error attribution pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", help="reference RTTMs to conversation structures")
    p.add_argument("--refs", required=True, help="directory of reference RTTM files")
    p.add_argument("--role-map", help="TSV: recording_id, label, role (default: roles by first appearance)")
    p.add_argument("--tags", help="TSV: recording_id, k=v;... source tags")
    _common(p)

    p = sub.add_parser("pool", help="build per-speaker speech streams")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--audio", help="directory of mono WAVs (optional <stem>.rttm speech regions)")
    src.add_argument("--synth", help="YAML list of synthetic voice specs")
    p.add_argument("--tags", help="TSV: speaker_id, k=v;... speaker tags")
    _common(p)

    p = sub.add_parser("design", help="enumerate the factorial design")
    p.add_argument("--structures", required=True, help="directory of structure files")
    p.add_argument("--pool", required=True, help="pool directory")
    p.add_argument("--pairs", help="TSV: pair_id, member1, member2, tags (pairing: given)")
    p.add_argument("--pairing", choices=("given", "seeded-random"))
    p.add_argument("--pair-by", help="speaker tag recorded as pair composition, e.g. gender=mixed")
    _common(p)

    p = sub.add_parser("render", help="splice every version to WAV and reference RTTM")
    p.add_argument("--design", required=True, help="design directory")
    p.add_argument("--pool", required=True, help="pool directory")
    _common(p)

    p = sub.add_parser("diarize", help="run the toy diarizer on rendered conversations")
    p.add_argument("--rendered", required=True, help="render output directory")
    p.add_argument("--window", type=float, help="subsegment window in seconds")
    p.add_argument("--hop", type=float, help="subsegment hop in seconds")
    _common(p)

    p = sub.add_parser("score", help="score hypotheses against references")
    p.add_argument("--refs", required=True, help="directory of reference RTTMs")
    p.add_argument("--hyps", required=True, help="directory of hypothesis RTTMs")
    p.add_argument("--design", required=True, help="design directory")
    _common(p)

    p = sub.add_parser("analyze", help="attribution report from a scores file")
    p.add_argument("--scores", required=True, help="scores.tsv from the score stage")
    p.add_argument("--design", required=True, help="design directory")
    p.add_argument("--metric", choices=("der", "f1"))
    _common(p)

    p = sub.add_parser("demo", help="planted-effect experiment end to end")
    _common(p)
    return parser


def _overrides(args) -> dict:
    out: dict = {}
    if args.seed is not None:
        out["seed"] = args.seed
    design = {k: v for k, v in (("pairing", getattr(args, "pairing", None)),
                                ("pair_by", getattr(args, "pair_by", None))) if v is not None}
    if getattr(args, "pair_by", None) and "pairing" not in design:
        design["pairing"] = "seeded-random"
    if design:
        out["design"] = design
    diar = {k: v for k, v in (("window", getattr(args, "window", None)), ("hop", getattr(args, "hop", None)))
            if v is not None}
    if diar:
        if "hop" not in diar:
            diar["hop"] = diar["window"] / 2
        out["diarizer"] = diar
    if getattr(args, "metric", None):
        out["analysis"] = {"metric": args.metric}
    return out


def run(args, cfg: dict) -> pipeline.StageResult:
    cmd, w = args.command, args.workers
    if cmd == "extract":
        return pipeline.stage_extract(args.refs, args.out, cfg, args.role_map, args.tags)
    if cmd == "pool":
        return pipeline.stage_pool(args.out, cfg, args.audio, args.synth, args.tags)
    if cmd == "design":
        return pipeline.stage_design(args.structures, args.pool, args.out, cfg, args.pairs)
    if cmd == "render":
        return pipeline.stage_render(args.design, args.pool, args.out, cfg, w)
    if cmd == "diarize":
        return pipeline.stage_diarize(args.rendered, args.out, cfg, w)
    if cmd == "score":
        return pipeline.stage_score(args.refs, args.hyps, args.design, args.out, cfg, w)
    if cmd == "analyze":
        return pipeline.stage_analyze(args.scores, args.design, args.out, cfg)
    return pipeline.stage_demo(args.out, cfg, w)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
    )
    if args.workers < 1:
        print("diafactor: error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, _overrides(args))
        result = run(args, cfg)
    except ConfigError as exc:
        print(f"diafactor: config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (pipeline.InputError, OSError) as exc:
        print(f"diafactor: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except pipeline.VALIDATION_ERRORS as exc:
        print(f"diafactor: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    counts = " ".join(f"{k}={v}" for k, v in result.counts.items())
    print(f"{result.stage}: {counts} warnings={result.warnings} -> {result.out}")
    report = getattr(result, "report", None)
    if report is not None:
        print(report.summary(), end="")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
