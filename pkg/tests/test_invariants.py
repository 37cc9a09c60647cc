import re

import pytest

from transtrust.channels import Kind
from transtrust.errors import ConfigError, TranscriptError
from transtrust.invariants import (
    Line,
    check_bonding_containment,
    check_clone_soundness,
    check_determinism,
    check_ordering,
    check_pos_composition,
    check_prepaid_conservation,
    layering_violations,
    parse_transcript,
    suite_checks,
    verify_transcript,
)
from transtrust.scenarios import run_scenario

from conftest import scenario


def transcript_of(name, *overrides):
    return run_scenario(scenario(name, *overrides)).transcript.to_text()


@pytest.fixture(scope="module")
def pos_text():
    return transcript_of("pos")


def body_lines(text):
    return [i for i, line in enumerate(text.splitlines()) if not line.startswith("#")]


def test_parse_round_trip(pos_text):
    t = parse_transcript(pos_text)
    assert (t.seed, t.scenario) == (42, "pos")
    assert t.roles == {"A": "mno", "a": "phone", "B": "owner", "b": "pos"}
    assert t.result == "grant/base"
    assert t.config().scenario == "pos"
    assert [e.seq for e in t.entries] == list(range(1, len(t.entries) + 1))


@pytest.mark.parametrize("mangle", [
    lambda s: "",
    lambda s: s.replace("# seed 42", "# seed forty-two"),
    lambda s: s.replace("| ChannelHello |", "| Hello |", 1),
    lambda s: s.replace("| accepted |", "| lost |", 1),
    lambda s: re.sub(r"\| [0-9a-f]{64}", "| xyz", s, count=1),
    lambda s: s.replace(" | ", " : ", 1),
    lambda s: s.replace("# scenario pos\n", ""),
    lambda s: s.replace("# scenario pos", "# scenario bonding"),
    lambda s: s + "# role.x y\n",
])
def test_malformed_transcripts_are_rejected(pos_text, mangle):
    with pytest.raises(TranscriptError):
        parse_transcript(mangle(pos_text))


@pytest.mark.parametrize("name", ["pos", "prepaid", "bonding"])
def test_honest_transcripts_pass_every_registered_invariant(name):
    results = verify_transcript(parse_transcript(transcript_of(name)))
    assert results and all(r.passed for r in results), [r.line() for r in results]


def test_swapped_steps_fail_ordering(pos_text):
    lines = pos_text.splitlines()
    t = parse_transcript(pos_text)
    first_wrapped = next(e.seq for e in t.entries if e.kind is Kind.WRAPPED_TAU)
    idx = body_lines(pos_text)
    # move the step-B pledge ahead of step A's first message
    i, j = idx[first_wrapped - 1], idx[17]
    lines[i], lines[j] = lines[j], lines[i]
    result = check_ordering(parse_transcript("\n".join(lines) + "\n"))
    assert not result.passed


def test_determinism_detects_an_edited_transcript(pos_text):
    edited = pos_text.replace("# result grant/base", "# result deny(policy)")
    assert check_determinism(parse_transcript(pos_text)).passed
    assert not check_determinism(parse_transcript(edited)).passed


def _line(seq, sender, receiver, kind, status="accepted"):
    return Line(seq, sender, receiver, kind, status, "0" * 64)


def test_layering_within_a_channel():
    good = [_line(1, "a", "A", Kind.CHANNEL_HELLO), _line(2, "a", "A", Kind.QUOTE_L1),
            _line(3, "a", "A", Kind.QUOTE_L2), _line(4, "a", "A", Kind.QUOTE_L3)]
    assert layering_violations(good) == []
    skipped = [good[0], good[1], good[3]]
    assert layering_violations(skipped)
    rejected_l2 = [good[0], good[1], _line(3, "a", "A", Kind.QUOTE_L2, "rejected"), good[3]]
    assert layering_violations(rejected_l2)
    fresh_channel = good[:3] + [_line(5, "A", "a", Kind.CHANNEL_HELLO), _line(6, "a", "A", Kind.QUOTE_L3)]
    assert layering_violations(fresh_channel)


def test_prepaid_conservation_catches_a_bad_note():
    text = transcript_of("prepaid")
    t = parse_transcript(text)
    assert check_prepaid_conservation(t).passed
    note = re.search(r"# prepaid .*", text).group(0)
    assert not check_prepaid_conservation(parse_transcript(text.replace(note, note.replace("final=4", "final=3"))))\
        .passed


def test_clone_soundness_flags_double_grants():
    text = transcript_of("prepaid", "adversary.script=clone:phone")
    assert check_clone_soundness(parse_transcript(text)).passed
    forged = text.replace("verdict=deny privilege=base reason=clone_detected",
                          "verdict=grant privilege=privileged reason=ok")
    assert not check_clone_soundness(parse_transcript(forged)).passed


def test_bonding_containment_flags_foreign_grant():
    text = transcript_of("bonding", "bonding.phone_network=other")
    assert check_bonding_containment(parse_transcript(text)).passed
    assert not check_bonding_containment(parse_transcript(text.replace("# result deny(policy)",
                                                                      "# result grant/base"))).passed


def test_pos_composition_needs_grant_iff_completed(pos_text):
    assert check_pos_composition(parse_transcript(pos_text)).passed
    edited = pos_text.replace("completed=true", "completed=false")
    assert not check_pos_composition(parse_transcript(edited)).passed


def test_tampered_run_still_satisfies_its_invariants():
    t = parse_transcript(transcript_of("pos", "adversary.script=tamper:WrappedTau:0"))
    assert all(r.passed for r in verify_transcript(t))


def test_suites():
    assert suite_checks("pos", "ordering") == ("ordering", "layering")
    with pytest.raises(ConfigError):
        suite_checks("pos", "prepaid")
    with pytest.raises(ConfigError):
        suite_checks("pos", "everything")
