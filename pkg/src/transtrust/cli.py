"""Command-line front end: ``transtrust run|verify|matrix|inspect``.

Exit status: 0 grant or completed (or every invariant holds), 1 deny, failed
run or broken invariant, 2 configuration or transcript format error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

from transtrust.config import ScenarioConfig, apply_variant, load_config
from transtrust.errors import ConfigError, TranscriptError
from transtrust.harness import EXIT_DENIED, EXIT_OK, EXIT_USAGE, matrix, matrix_text, run_and_report
from transtrust.invariants import parse_transcript, verify_transcript

DEFAULT_OUT = "out"


def _configure(args: argparse.Namespace) -> ScenarioConfig:
    config = load_config(args.config)
    for assignment in args.set or ():
        config = config.with_override(assignment)
    for name in args.variant or ():
        config = apply_variant(config, name)
    if args.privacy is not None:
        config = config.with_value("variants", "privacy", args.privacy, "--privacy")
    if args.seed is not None:
        config = config.with_value("scenario", "seed", str(args.seed), "--seed")
    if args.adversary:
        script = list(config.get("adversary", "script")) + list(args.adversary)
        config = config.with_value("adversary", "script", ",".join(script), "--adversary")
    return config


def _read_transcript(path: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise TranscriptError(f"cannot read transcript {path}: {exc.strerror or exc}") from exc
    return parse_transcript(text)


def cmd_run(args: argparse.Namespace) -> int:
    config = _configure(args)
    out = Path(args.out or os.environ.get("TRANSTRUST_OUT") or DEFAULT_OUT)
    _, report = run_and_report(config, out)
    sys.stdout.write(report.to_text())
    return report.exit_code


def cmd_verify(args: argparse.Namespace) -> int:
    transcript = _read_transcript(args.transcript)
    results = verify_transcript(transcript, args.suite)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_DENIED


def cmd_matrix(args: argparse.Namespace) -> int:
    config = _configure(args)
    sys.stdout.write(matrix_text(config, matrix(config)))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    t = _read_transcript(args.transcript)
    print(f"scenario: {t.scenario}")
    print(f"seed: {t.seed}")
    for role, name in sorted(t.roles.items()):
        print(f"role {role}: {name}")
    for action in t.adversary:
        print(f"adversary: {action}")
    print(f"envelopes: {len(t.entries)}")
    for status, count in sorted(Counter(e.status for e in t.entries).items()):
        print(f"  {status}: {count}")
    for kind, count in sorted(Counter(e.kind.value for e in t.entries).items()):
        print(f"  {kind}: {count}")
    for kind, body in t.notes:
        print(f"{kind}: {body}")
    return EXIT_OK


def _config_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", help="scenario configuration file")
    p.add_argument("--seed", type=int, help="override scenario.seed")
    p.add_argument("--adversary", action="append", metavar="ACTION:TARGET[:BYTE]",
                   help="append an adversary action (repeatable)")
    p.add_argument("--privacy", choices=("encrypted", "mac_only"), help="transposition privacy mode")
    p.add_argument("--variant", action="append", metavar="NAME", help="select a protocol variant (repeatable)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a configuration key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transtrust", description="Transitive-trust protocol simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log fabric activity to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a configured scenario and write its transcript and report")
    _config_options(run)
    run.add_argument("--out", help=f"output directory (default: $TRANSTRUST_OUT or ./{DEFAULT_OUT})")
    run.set_defaults(func=cmd_run)

    verify = sub.add_parser("verify", help="check a transcript against an invariant suite")
    verify.add_argument("transcript")
    verify.add_argument("--suite", default="all", help="all, ordering, tamper, clone, prepaid, bonding, "
                                                       "composition or determinism")
    verify.set_defaults(func=cmd_verify)

    mat = sub.add_parser("matrix", help="run the scenario across its variant combinations")
    _config_options(mat)
    mat.set_defaults(func=cmd_matrix)

    inspect = sub.add_parser("inspect", help="summarise a transcript")
    inspect.add_argument("transcript")
    inspect.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, TranscriptError) as exc:
        print(f"transtrust: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
