"""Transcript files and the invariant suites evaluated over them.

A transcript file is the text form of :class:`transtrust.channels.Transcript`:
``# seed``, ``# scenario``, ``# role.*`` and ``# config.*`` header lines,
``# adversary`` lines, one ``seq | from | to | kind | status | sha256`` line
per envelope, then ``# decision``, ``# prepaid``, ``# bonding``, ``# outcome``
and ``# result`` notes. The header carries the full configuration, so suites
that need a reference run can replay it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from transtrust.channels import KIND_BY_NAME, QUOTE_KINDS, STATUSES, Kind
from transtrust.config import ScenarioConfig, config_from_items
from transtrust.errors import ConfigError, TranscriptError

_DIGEST = re.compile(r"[0-9a-f]{64}")
_NOTE_KINDS = ("decision", "prepaid", "bonding", "outcome", "result")


@dataclass(frozen=True)
class Line:
    seq: int
    sender: str
    receiver: str
    kind: Kind
    status: str
    digest: str


@dataclass
class ParsedTranscript:
    seed: int
    scenario: str
    roles: dict[str, str]
    config_items: list[tuple[str, str]]
    adversary: list[str]
    entries: list[Line]
    notes: list[tuple[str, str]]
    text: str = field(default="", repr=False)

    def config(self) -> ScenarioConfig:
        items = [(k, "" if v == "-" else v) for k, v in self.config_items]
        return config_from_items(items, "<transcript header>")

    def note_fields(self, kind: str) -> list[dict[str, str]]:
        return [_fields(body) for k, body in self.notes if k == kind]

    def note(self, kind: str) -> Optional[dict[str, str]]:
        found = self.note_fields(kind)
        return found[-1] if found else None

    @property
    def result(self) -> Optional[str]:
        for kind, body in reversed(self.notes):
            if kind == "result":
                return body
        return None

    def role_of(self, name: str) -> Optional[str]:
        for role, holder in self.roles.items():
            if holder == name:
                return role
        return None


def _fields(body: str) -> dict[str, str]:
    out = {}
    for part in body.split():
        key, sep, value = part.partition("=")
        if not sep:
            raise TranscriptError(f"note field {part!r} is not key=value")
        out[key] = value
    return out


def parse_transcript(text: str) -> ParsedTranscript:
    lines = text.splitlines()
    if not lines or not any(line.strip() for line in lines):
        raise TranscriptError("empty transcript")
    first = lines[0].split()
    if len(first) != 3 or first[:2] != ["#", "seed"] or not first[2].isdigit():
        raise TranscriptError("line 1: expected '# seed N'")
    seed = int(first[2])
    scenario = None
    roles: dict[str, str] = {}
    items: list[tuple[str, str]] = []
    adversary: list[str] = []
    entries: list[Line] = []
    notes: list[tuple[str, str]] = []
    for number, raw in enumerate(lines[1:], 2):
        if not raw.strip():
            continue
        if raw.startswith("# "):
            key, _, value = raw[2:].partition(" ")
            if key in _NOTE_KINDS:
                notes.append((key, value))
                if key != "result":
                    _fields(value)
                continue
            if entries or notes:
                raise TranscriptError(f"line {number}: header line after the envelopes")
            if key == "scenario":
                scenario = value
            elif key.startswith("role."):
                roles[key[5:]] = value
            elif key.startswith("config."):
                items.append((key[7:], value))
            elif key == "adversary":
                adversary.append(value)
            else:
                raise TranscriptError(f"line {number}: unknown header {key!r}")
            continue
        if notes:
            raise TranscriptError(f"line {number}: envelope after the closing notes")
        entries.append(_parse_entry(raw, number))
    if scenario is None:
        raise TranscriptError("missing '# scenario' header")
    if not items:
        raise TranscriptError("missing '# config.*' header lines")
    parsed = ParsedTranscript(seed, scenario, roles, items, adversary, entries, notes, text)
    try:
        config = parsed.config()
    except ConfigError as exc:
        raise TranscriptError(f"header configuration: {exc}") from exc
    if config.scenario != scenario or config.seed != seed:
        raise TranscriptError("header configuration disagrees with the seed or scenario line")
    return parsed


def _parse_entry(raw: str, number: int) -> Line:
    parts = [p.strip() for p in raw.split("|")]
    if len(parts) != 6:
        raise TranscriptError(f"line {number}: expected 6 '|'-separated fields")
    seq, sender, receiver, kind, status, digest = parts
    if not seq.isdigit():
        raise TranscriptError(f"line {number}: sequence number {seq!r}")
    if kind not in KIND_BY_NAME:
        raise TranscriptError(f"line {number}: unknown kind {kind!r}")
    if status not in STATUSES:
        raise TranscriptError(f"line {number}: unknown status {status!r}")
    if not _DIGEST.fullmatch(digest):
        raise TranscriptError(f"line {number}: digest must be 64 lowercase hex digits")
    if not sender or not receiver:
        raise TranscriptError(f"line {number}: empty actor name")
    return Line(int(seq), sender, receiver, KIND_BY_NAME[kind], status, digest)


# -- results ----------------------------------------------------------------


@dataclass(frozen=True)
class InvariantResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        verdict = "pass" if self.passed else "fail"
        return f"{self.name}: {verdict}" + (f" ({self.detail})" if self.detail else "")


def _ok(name: str) -> InvariantResult:
    return InvariantResult(name, True)


def _fail(name: str, detail: str) -> InvariantResult:
    return InvariantResult(name, False, detail)


# -- ordering ---------------------------------------------------------------

K = Kind
Token = tuple[str, str, frozenset]


def _t(sender: str, receiver: str, *kinds: Kind) -> Token:
    return (sender, receiver, frozenset(kinds))


def _hello(i: str, r: str) -> list[Token]:
    return [_t(i, r, K.CHANNEL_HELLO), _t(r, i, K.CHANNEL_HELLO)]


def _attest(prover: str, verifier: str) -> list[Token]:
    return [_t(verifier, prover, K.CHANNEL_ATTEST), _t(prover, verifier, K.QUOTE_L1),
            _t(prover, verifier, K.QUOTE_L2)]


def _logon(device: str, principal: str) -> list[Token]:
    return [_t(principal, device, K.GAMMA_AUTH), _t(device, principal, K.GAMMA_AUTH)]


def _answer(sender: str, receiver: str) -> Token:
    return _t(sender, receiver, K.SERVICE_GRANT, K.SERVICE_DENY)


def pos_tracks(secondary_challenge: bool) -> tuple[list[Token], list[Token], list[Token]]:
    """Role-level message templates of channel setup, step A and step B."""
    setup = (_hello("a", "b") + _attest("a", "b") + _attest("b", "a") + [_t("a", "b", K.CHANNEL_ACCEPT)]
             + _hello("a", "A") + _logon("a", "A") + _attest("a", "A") + [_t("A", "a", K.CHANNEL_ACCEPT)])
    relay_up = lambda kind: [_t("b", "a", kind), _t("a", "A", kind), _t("A", "B", kind)]  # noqa: E731
    step_a = (relay_up(K.TAU_PRESENT)
              + [_t("B", "A", K.GAMMA_AUTH), _t("A", "a", K.GAMMA_AUTH), _t("a", "b", K.GAMMA_AUTH)]
              + relay_up(K.GAMMA_AUTH)
              + [_t("B", "A", K.AUTH_ACK), _t("A", "a", K.AUTH_ACK)])
    step_b = ([_t("a", "b", K.TAU_PRESENT)] + relay_up(K.WRAPPED_TAU) + [_t("B", "A", K.AUTH_REQUEST)]
              + (_logon("a", "A") if secondary_challenge else [])
              + [_t("A", "B", K.AUTH_ACK), _t("B", "A", K.WRAPPED_ACK), _t("A", "a", K.WRAPPED_ACK),
                 _t("a", "b", K.WRAPPED_ACK)])
    return setup, step_a, step_b


def prepaid_templates() -> list[list[Token]]:
    full = (_hello("D", "P") + _logon("D", "P") + [_t("P", "D", K.CHANNEL_ACCEPT), _t("D", "P", K.TAU_PRESENT)]
            + _attest("D", "P") + [_t("P", "D", K.CHANNEL_ATTEST), _t("D", "P", K.QUOTE_L3),
                                   _t("D", "P", K.SERVICE_REQUEST), _answer("P", "D")])
    claim = [_t("P", "D", K.CHANNEL_ATTEST), _t("D", "P", K.QUOTE_L3), _t("D", "P", K.SERVICE_REQUEST),
             _answer("P", "D")]
    return [full, claim]


def bonding_template(forward: bool, dedicated: bool) -> list[Token]:
    return (_hello("D", "P") + _logon("D", "P") + _attest("D", "P") + [_t("P", "D", K.CHANNEL_ACCEPT)]
            + [_t("D", "P", K.SIGMA_PRESENT), _t("P", "D", K.AUTH_ACK)]
            + _hello("S", "D") + _attest("S", "D") + _attest("D", "S") + [_t("S", "D", K.CHANNEL_ACCEPT)]
            + [_t("S", "D", K.SIGMA_PRESENT), _t("D", "S", K.SIGMA_PRESENT)]
            + ([_t("D", "S", K.CHANNEL_ATTEST), _t("S", "D", K.QUOTE_L3)] if dedicated else [])
            + [_t("S", "D", K.SERVICE_REQUEST)]
            + ([_t("D", "P", K.AUTH_REQUEST), _t("P", "D", K.AUTH_ACK)] if forward else [])
            + [_answer("D", "S")])


_ROLE_LETTERS = {
    "pos": {"A": "A", "a": "a", "B": "B", "b": "b"},
    "prepaid": {"principal": "P", "device": "D", "attacker": "D"},
    "bonding": {"principal": "P", "dominator": "D", "subordinate": "S"},
}


def _distinct(entries: Iterable[Line]) -> list[Line]:
    """Drop adversarial duplicate copies: later envelopes identical to an earlier one."""
    seen = set()
    out = []
    for e in entries:
        key = (e.sender, e.receiver, e.kind, e.digest)
        if key not in seen:
            seen.add(key)
            out.append(e)
    return out


def _fits(token: Token, sender: str, receiver: str, kind: Kind) -> bool:
    return token[0] == sender and token[1] == receiver and kind in token[2]


def _order_pos(t: ParsedTranscript, tokens: list[tuple[str, str, Kind]], config: ScenarioConfig) -> Optional[str]:
    setup, step_a, step_b = pos_tracks(config.get("variants", "secondary_challenge"))
    interleave = config.get("variants", "interleave")
    closing = _answer("b", "a")
    # b can answer as soon as its own channel with a is up
    answerable = next(i for i, tok in enumerate(setup) if K.CHANNEL_ACCEPT in tok[2]) + 1
    # Reachable (setup, step A, step B) progress after each envelope; a set, because
    # under interleaving one envelope kind can belong to either step.
    states = {(0, 0, 0)}
    closed = False
    for index, (s, r, k) in enumerate(tokens):
        if closed:
            return f"envelope {index + 1} ({k.value}) after the closing service answer"
        nxt = set()
        for i, a, b in states:
            if i < len(setup):
                if _fits(setup[i], s, r, k):
                    nxt.add((i + 1, a, b))
                continue
            if a < len(step_a) and _fits(step_a[a], s, r, k) and (interleave or b == 0):
                nxt.add((i, a + 1, b))
            if b < len(step_b) and _fits(step_b[b], s, r, k):
                nxt.add((i, a, b + 1))
        if not nxt:
            if _fits(closing, s, r, k) and any(i >= answerable for i, _, _ in states):
                closed = True
                final = states
                continue
            return f"envelope {index + 1} ({s}->{r} {k.value}) is out of order"
        states = nxt
    else:
        final = states
    outcome = t.note("outcome")
    if outcome and outcome.get("completed") == "true":
        if (len(setup), len(step_a), len(step_b)) not in final:
            return "run completed without the full step A and step B exchange"
        if not tokens or tokens[-1][2] is not K.SERVICE_GRANT:
            return "completed run does not end with the service grant"
        before = [x for x in tokens if x[2] is not K.SERVICE_GRANT]
        if not interleave and before[-1][2] is not K.WRAPPED_ACK:
            return "completed exchange does not end with the wrapped acknowledgement"
    return None


def _order_segments(tokens: list[tuple[str, str, Kind]], templates: list[list[Token]],
                    closers: list[Token]) -> Optional[str]:
    """Tokens must split into consecutive runs of the templates; a run may stop
    early, optionally closed by one of ``closers``."""
    current: Optional[list[Token]] = None
    pos = 0
    for index, (s, r, k) in enumerate(tokens):
        if current is not None and pos < len(current) and _fits(current[pos], s, r, k):
            pos += 1
            continue
        if current is not None and pos < len(current) and any(_fits(c, s, r, k) for c in closers):
            current = None
            continue
        for template in templates:
            if _fits(template[0], s, r, k):
                current, pos = template, 1
                break
        else:
            return f"envelope {index + 1} ({s}->{r} {k.value}) is out of order"
    return None


def check_ordering(t: ParsedTranscript) -> InvariantResult:
    name = "ordering"
    for expected, e in enumerate(t.entries, 1):
        if e.seq != expected:
            return _fail(name, f"sequence number {e.seq} where {expected} was expected")
    letters = _ROLE_LETTERS[t.scenario]
    tokens = []
    for e in _distinct(t.entries):
        s, r = letters.get(t.role_of(e.sender) or ""), letters.get(t.role_of(e.receiver) or "")
        if s is None or r is None:
            return _fail(name, f"envelope {e.seq} between actors without a role")
        tokens.append((s, r, e.kind))
    config = t.config()
    if t.scenario == "pos":
        problem = _order_pos(t, tokens, config)
    elif t.scenario == "prepaid":
        problem = _order_segments(tokens, prepaid_templates(), [_t("P", "D", K.SERVICE_DENY)])
    else:
        template = bonding_template(config.get("variants", "subordination") == "forward",
                                    config.get("bonding", "backing") == "dedicated")
        problem = _order_segments(tokens, [template], [_t("D", "S", K.SERVICE_DENY)])
    return _fail(name, problem) if problem else _ok(name)


# -- layering ---------------------------------------------------------------


def layering_violations(entries: Iterable[Line]) -> list[str]:
    """Accepted quotes must climb levels 1, 2, 3 within each channel.

    A channel is identified by its actor pair and starts at its ChannelHello.
    """
    reached: dict[tuple[str, str], int] = {}
    problems = []
    for e in entries:
        if e.kind is K.CHANNEL_HELLO:
            reached.pop((e.sender, e.receiver), None)
            reached.pop((e.receiver, e.sender), None)
            continue
        level = QUOTE_KINDS.get(e.kind)
        if level is None or e.status != "accepted":
            continue
        pair = (e.sender, e.receiver)
        if level > 1 and reached.get(pair, 0) < level - 1:
            problems.append(f"level-{level} quote at seq {e.seq} before an accepted level-{level - 1}")
        reached[pair] = max(reached.get(pair, 0), level)
    return problems


def check_layering(t: ParsedTranscript) -> InvariantResult:
    problems = layering_violations(t.entries)
    return _fail("layering", problems[0]) if problems else _ok("layering")


# -- scenario-specific ------------------------------------------------------


def check_clone_soundness(t: ParsedTranscript) -> InvariantResult:
    """One domain credential serial and one trust-credential key never share
    privileged access with a different partner."""
    name = "clone_soundness"
    by_key: dict[str, set[str]] = {}
    by_serial: dict[str, set[str]] = {}
    for d in t.note_fields("decision"):
        if d.get("verdict") != "grant" or d.get("privilege") != "privileged":
            continue
        key, serial = d.get("key", "-"), d.get("serial", "-")
        if key == "-" or serial == "-":
            continue
        by_key.setdefault(key, set()).add(serial)
        by_serial.setdefault(serial, set()).add(key)
    for key, serials in sorted(by_key.items()):
        if len(serials) > 1:
            return _fail(name, f"key {key} granted under serials {', '.join(sorted(serials))}")
    for serial, keys in sorted(by_serial.items()):
        if len(keys) > 1:
            return _fail(name, f"serial {serial} granted with keys {', '.join(sorted(keys))}")
    attacker = t.roles.get("attacker")
    if attacker and t.config().get("variants", "enrolment") == "principal_controlled":
        for d in t.note_fields("decision"):
            if d.get("subject") == attacker and d.get("verdict") == "grant":
                return _fail(name, f"cloned credential on {attacker} was granted")
    return _ok(name)


def check_prepaid_conservation(t: ParsedTranscript) -> InvariantResult:
    name = "prepaid_conservation"
    note = t.note("prepaid")
    if note is None:
        return _fail(name, "no prepaid note")
    try:
        initial, final, granted = int(note["initial"]), int(note["final"]), int(note["granted_units"])
    except (KeyError, ValueError):
        return _fail(name, "malformed prepaid note")
    if final != initial - granted:
        return _fail(name, f"final {final} != initial {initial} - granted {granted}")
    if final < 0:
        return _fail(name, f"negative total {final}")
    config = t.config()
    device = t.roles.get("device")
    grants = sum(1 for d in t.note_fields("decision") if d.get("subject") == device and d.get("verdict") == "grant")
    if granted != grants * config.get("prepaid", "purchase_units"):
        return _fail(name, f"{granted} units granted over {grants} grants")
    if config.get("prepaid", "rogue_extend") and granted:
        return _fail(name, "a phone with drifted integrity was able to spend")
    return _ok(name)


def check_bonding_containment(t: ParsedTranscript) -> InvariantResult:
    name = "bonding_containment"
    note = t.note("bonding")
    if note is None:
        return _fail(name, "no bonding note")
    outside = note.get("dominator_domain") != note.get("principal")
    granted = any(e.kind is K.SERVICE_GRANT and e.status == "accepted" for e in t.entries)
    if outside and (granted or (t.result or "").startswith("grant")):
        return _fail(name, f"service granted through a phone of {note.get('dominator_domain')}")
    return _ok(name)


def check_pos_composition(t: ParsedTranscript) -> InvariantResult:
    name = "pos_composition"
    outcome = t.note("outcome")
    if outcome is None:
        return _fail(name, "no outcome note")
    completed = outcome.get("completed") == "true"
    granted = any(e.kind is K.SERVICE_GRANT for e in t.entries)
    if completed != granted:
        return _fail(name, f"completed={str(completed).lower()} but ServiceGrant present={str(granted).lower()}")
    return _ok(name)


# -- replay-based -----------------------------------------------------------


def _replay(config: ScenarioConfig):
    from transtrust.scenarios import run_scenario

    return run_scenario(config)


def tamper_positions(transcript) -> list[int]:
    """Sequence numbers of every protected step-B envelope in a transcript."""
    return [e.seq for e in transcript.entries if e.kind in (K.WRAPPED_TAU, K.WRAPPED_ACK)]


def check_tamper_completeness(t: ParsedTranscript) -> InvariantResult:
    """Every single-byte tamper on a WrappedTau or WrappedAck fails the exchange."""
    name = "tamper_completeness"
    outcome = t.note("outcome")
    hit = [a for a in t.adversary if a.startswith("tamper:") and
           any(f"kind={k.value}" in a for k in (K.WRAPPED_TAU, K.WRAPPED_ACK))]
    if hit and outcome and outcome.get("completed") == "true":
        return _fail(name, f"completed despite {hit[0]}")
    honest = t.config().with_value("adversary", "script", "", "tamper replay")
    reference = _replay(honest)
    for seq in tamper_positions(reference.transcript):
        attacked = _replay(honest.with_value("adversary", "script", f"tamper:{seq}:0", "tamper replay"))
        if attacked.outcome is None or attacked.outcome.completed:
            return _fail(name, f"tamper at seq {seq} left the exchange completed")
    return _ok(name)


def check_determinism(t: ParsedTranscript) -> InvariantResult:
    name = "determinism"
    again = _replay(t.config()).transcript.to_text()
    if again != t.text:
        return _fail(name, "replaying the header configuration gives a different transcript")
    return _ok(name)


# -- suites -----------------------------------------------------------------

CHECKS: dict[str, Callable[[ParsedTranscript], InvariantResult]] = {
    "ordering": check_ordering,
    "layering": check_layering,
    "clone_soundness": check_clone_soundness,
    "prepaid_conservation": check_prepaid_conservation,
    "bonding_containment": check_bonding_containment,
    "pos_composition": check_pos_composition,
    "tamper_completeness": check_tamper_completeness,
    "determinism": check_determinism,
}

# The invariants registered for each scenario, in report order.
SCENARIO_CHECKS: dict[str, tuple[str, ...]] = {
    "pos": ("ordering", "layering", "pos_composition", "tamper_completeness", "determinism"),
    "prepaid": ("ordering", "layering", "clone_soundness", "prepaid_conservation", "determinism"),
    "bonding": ("ordering", "layering", "bonding_containment", "determinism"),
}

SUITES: dict[str, tuple[str, ...]] = {
    "ordering": ("ordering", "layering"),
    "tamper": ("tamper_completeness",),
    "clone": ("clone_soundness",),
    "prepaid": ("prepaid_conservation",),
    "bonding": ("bonding_containment",),
    "composition": ("pos_composition",),
    "determinism": ("determinism",),
}


def suite_checks(scenario: str, suite: str = "all") -> tuple[str, ...]:
    registered = SCENARIO_CHECKS[scenario]
    if suite == "all":
        return registered
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; known: all, {', '.join(sorted(SUITES))}")
    chosen = tuple(c for c in SUITES[suite] if c in registered)
    if not chosen:
        raise ConfigError(f"suite {suite!r} does not apply to the {scenario} scenario")
    return chosen


def verify_transcript(t: ParsedTranscript, suite: str = "all") -> list[InvariantResult]:
    return [CHECKS[name](t) for name in suite_checks(t.scenario, suite)]
