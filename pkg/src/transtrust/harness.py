"""Configured runs with their reports, and variant matrices."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from transtrust.config import ScenarioConfig
from transtrust.invariants import InvariantResult, parse_transcript, verify_transcript
from transtrust.scenarios import ScenarioResult, run_scenario

EXIT_OK = 0
EXIT_DENIED = 1
EXIT_USAGE = 2


@dataclass
class RunReport:
    scenario: str
    seed: int
    outcome: list[str]
    transcript_path: Optional[str]
    invariants: list[InvariantResult] = field(default_factory=list)
    success: bool = False

    @property
    def exit_code(self) -> int:
        ok = self.success and all(r.passed for r in self.invariants)
        return EXIT_OK if ok else EXIT_DENIED

    def to_text(self) -> str:
        lines = [f"scenario: {self.scenario}", f"seed: {self.seed}"]
        if self.transcript_path is not None:
            lines.append(f"transcript: {self.transcript_path}")
        lines += self.outcome
        lines += [f"invariant {r.line()}" for r in self.invariants]
        lines.append(f"exit: {self.exit_code}")
        return "\n".join(lines) + "\n"


def run_name(config: ScenarioConfig) -> str:
    """File stem for a run: scenario, seed and a digest of the full configuration."""
    tag = hashlib.sha256(config.to_text().encode()).hexdigest()[:8]
    return f"{config.scenario}-{config.seed}-{tag}"


def _success(result: ScenarioResult) -> bool:
    if result.outcome is not None:
        return result.outcome.completed and result.decision.granted
    return result.decision.granted


def run_and_report(config: ScenarioConfig, out_dir: Optional[Path] = None, *,
                   check: bool = True) -> tuple[ScenarioResult, RunReport]:
    """Run ``config``; when ``out_dir`` is given write ``<name>.transcript`` and ``<name>.report``."""
    result = run_scenario(config)
    text = result.transcript.to_text()
    invariants = verify_transcript(parse_transcript(text)) if check else []
    path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{run_name(config)}.transcript"
        path.write_text(text)
    report = RunReport(config.scenario, config.seed, result.outcome_lines(),
                       str(path) if path else None, invariants, _success(result))
    if out_dir is not None:
        (out_dir / f"{run_name(config)}.report").write_text(report.to_text())
    return result, report


# -- matrix -----------------------------------------------------------------

# scenario -> two axes of (section, key, values); the matrix is their cross product
_AXES = {
    "prepaid": [("variants", "restriction", ("acl", "shared_secret")),
                ("variants", "enrolment", ("independent", "principal_controlled"))],
    "bonding": [("variants", "subordination", ("forward", "local_grant")),
                ("bonding", "revoke_backing", ("false", "true"))],
    "pos": [("variants", "privacy", ("encrypted", "mac_only")),
            ("adversary", "script", ("", "tamper:WrappedTau:0"))],
}


@dataclass(frozen=True)
class MatrixRow:
    settings: tuple[tuple[str, str], ...]
    decision: str
    completed: Optional[bool]

    def cells(self) -> list[str]:
        cells = [value or "honest" for _, value in self.settings]
        cells.append(self.decision)
        if self.completed is not None:
            cells.append("true" if self.completed else "false")
        return cells


def matrix(config: ScenarioConfig) -> list[MatrixRow]:
    """Run every combination of the scenario's variant axes, sorted by setting."""
    (s1, k1, v1), (s2, k2, v2) = _AXES[config.scenario]
    rows = []
    for a in v1:
        for b in v2:
            varied = config.with_value(s1, k1, a, "matrix").with_value(s2, k2, b, "matrix")
            result = run_scenario(varied)
            completed = result.outcome.completed if result.outcome is not None else None
            rows.append(MatrixRow(((f"{s1}.{k1}", a), (f"{s2}.{k2}", b)), str(result.decision), completed))
    return sorted(rows, key=lambda r: r.settings)


def matrix_text(config: ScenarioConfig, rows: list[MatrixRow]) -> str:
    header = [key for key, _ in rows[0].settings] + ["result"]
    if rows[0].completed is not None:
        header.append("completed")
    table = [header] + [r.cells() for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = [f"matrix {config.scenario} seed {config.seed}"]
    for row in table:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"
