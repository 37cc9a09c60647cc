"""Acceptance criteria, one test each, with their runtime limits."""

import random
import time
from contextlib import contextmanager

import pytest

from transtrust.channels import Kind, parse_script
from transtrust.credentials import INDEPENDENT, PRINCIPAL_CONTROLLED
from transtrust.harness import run_and_report
from transtrust.invariants import layering_violations, parse_transcript, tamper_positions
from transtrust.operations.restriction import run_restriction
from transtrust.operations.transposition import run_transposition
from transtrust.scenarios import (
    build_bonding,
    build_pos,
    build_prepaid,
    revoke_backing,
    run_scenario,
    scenario_bonding,
    scenario_prepaid,
    sealed_total,
)

from conftest import scenario
from test_operations import TRANSPOSITION_KINDS


@contextmanager
def within(seconds):
    start = time.perf_counter()
    yield
    elapsed = time.perf_counter() - start
    assert elapsed < seconds, f"took {elapsed:.2f}s, limit {seconds}s"


@pytest.mark.criterion(1, "transposition transcript shape")
def test_transposition_transcript_shape():
    with within(1.0):
        s = build_pos(42)
        outcome = run_transposition(s.world, s.mno, s.phone, s.owner, s.pos)
    assert outcome.completed
    assert s.world.transcript.kinds() == TRANSPOSITION_KINDS
    assert TRANSPOSITION_KINDS[-1] is Kind.WRAPPED_ACK


@pytest.mark.criterion(2, "tamper completeness")
def test_tamper_completeness():
    with within(10.0):
        honest = scenario("pos")
        positions = tamper_positions(run_scenario(honest).transcript)
        survivors = []
        for seq in positions:
            attacked = run_scenario(honest.with_override(f"adversary.script=tamper:{seq}:0"))
            if attacked.outcome.completed:
                survivors.append(seq)
    assert len(positions) == 6
    assert survivors == []


@pytest.mark.criterion(3, "clone resilience")
def test_clone_resilience():
    with within(1.0):
        s = build_prepaid(3, enrolment=PRINCIPAL_CONTROLLED, script=parse_script(["clone:phone"]))
        cloned = run_restriction(s.world, s.mno, s.attacker, s.attacker_gamma, s.attacker.tau)
        honest = run_restriction(s.world, s.mno, s.phone, None, s.phone.tau)
        orders = []
        for attacker_first in (False, True):
            s = build_prepaid(3, enrolment=INDEPENDENT, script=parse_script(["clone:phone"]))
            claimants = [(s.phone, None), (s.attacker, s.attacker_gamma)]
            if attacker_first:
                claimants.reverse()
            orders.append([run_restriction(s.world, s.mno, d, g, d.tau) for d, g in claimants])
    assert str(cloned) == "deny(clone_detected)"
    assert str(honest) == "grant/privileged"
    for decisions in orders:
        assert sum(d.granted for d in decisions) == 1
        assert [str(d) for d in decisions] == ["grant/privileged", "deny(clone_detected)"]


@pytest.mark.criterion(4, "privacy view")
def test_privacy_view():
    with within(1.0):
        views = {}
        for privacy in ("encrypted", "mac_only"):
            s = build_pos(42)
            outcome = run_transposition(s.world, s.mno, s.phone, s.owner, s.pos, privacy)
            assert outcome.completed
            views[privacy] = outcome.a_view_identities
    assert {"phone", "pos"}.isdisjoint(views["encrypted"])
    assert views["encrypted"] ^ views["mac_only"] == {"phone"}


def _corpus():
    """Transcripts of every scenario across variants, seeds and adversary scripts."""
    overrides = {
        "pos": [[f"variants.privacy={p}", f"variants.interleave={i}", f"variants.secondary_challenge={c}"]
                for p in ("encrypted", "mac_only") for i in ("false", "true") for c in ("false", "true")],
        "prepaid": [[f"variants.restriction={r}", f"variants.enrolment={e}", "prepaid.purchases=3"]
                    for r in ("acl", "shared_secret") for e in ("independent", "principal_controlled")]
        + [["adversary.script=clone:phone"], ["prepaid.rogue_extend=true"], ["prepaid.initial_total=0"]],
        "bonding": [[f"variants.subordination={v}", f"bonding.backing={b}", f"bonding.phone_network={n}"]
                    for v in ("forward", "local_grant") for b in ("tau", "dedicated") for n in ("same", "other")]
        + [["bonding.revoke_backing=true"], ["bonding.service=firmware_flash"]],
    }
    attacks = [""] + [f"{a}:{k}" for a in ("drop", "duplicate") for k in ("QuoteL1", "QuoteL2", "QuoteL3")] \
        + [f"tamper:{k}:3" for k in ("QuoteL1", "QuoteL2", "QuoteL3", "ChannelHello")]
    for name, variants in overrides.items():
        for extra in variants:
            for seed in (1, 42):
                for attack in attacks:
                    config = scenario(name, f"scenario.seed={seed}", f"adversary.script={attack}", *extra)
                    if attack and "clone" in " ".join(extra):
                        config = config.with_override(f"adversary.script=clone:phone,{attack}")
                    yield run_scenario(config).transcript.to_text()


@pytest.mark.criterion(5, "assertion layering")
def test_assertion_layering():
    checked = violations = quotes = 0
    for text in _corpus():
        t = parse_transcript(text)
        checked += 1
        quotes += sum(1 for e in t.entries if e.kind in (Kind.QUOTE_L2, Kind.QUOTE_L3) and e.status == "accepted")
        problems = layering_violations(t.entries)
        assert problems == [], f"{t.scenario} seed {t.seed} {t.adversary}: {problems}"
        violations += len(problems)
    assert checked > 500 and quotes > 500 and violations == 0


@pytest.mark.criterion(6, "prepaid conservation")
def test_prepaid_conservation():
    draw = random.Random(20240601)
    zero_attempts = drift_attempts = grants = 0
    with within(5.0):
        for seed in range(1000):
            initial = draw.randint(0, 6)
            s = build_prepaid(seed, initial_total=initial)
            drift_at = draw.randrange(6)
            granted = 0
            for i in range(draw.randint(1, 4)):
                units = draw.randint(1, 3)
                if i == drift_at:
                    s.world.rogue_extend(s.phone)
                before = sealed_total(s.phone).running_total
                decision, state = scenario_prepaid(s, units)
                if before == 0:
                    zero_attempts += 1
                    assert not decision.granted and state.running_total == 0
                if i >= drift_at:
                    drift_attempts += 1
                    assert not decision.granted and state.running_total == before
                if decision.granted:
                    grants += 1
                    granted += units
            assert sealed_total(s.phone).running_total == initial - granted
    assert zero_attempts > 100 and drift_attempts > 100 and grants > 500


@pytest.mark.criterion(7, "revocation")
def test_revocation():
    decisions = []
    with within(1.0):
        for backing in ("tau", "dedicated"):
            s = build_bonding(7, backing=backing)
            assert scenario_bonding(s, "photo_upload").granted
            revoke_backing(s)
            for variant in ("forward", "local_grant", "forward"):
                for service in ("photo_upload", "firmware_flash"):
                    decisions.append(scenario_bonding(s, service, variant))
    assert len(decisions) == 12
    assert {str(d) for d in decisions} == {"deny(revoked)"}


TRIPLES = [
    ("pos", 42, ""),
    ("pos", 7, "tamper:WrappedAck:1"),
    ("pos", 3, "drop:AuthAck"),
    ("prepaid", 42, ""),
    ("prepaid", 11, "clone:phone"),
    ("prepaid", 5, "duplicate:QuoteL3"),
    ("bonding", 42, ""),
    ("bonding", 9, "forge:SigmaPresent:4"),
]


@pytest.mark.criterion(8, "determinism")
def test_determinism(tmp_path):
    for name, seed, script in TRIPLES:
        config = scenario(name, f"scenario.seed={seed}", f"adversary.script={script}", "prepaid.purchases=2")
        outputs = []
        for run in ("first", "second"):
            out = tmp_path / run
            run_and_report(config, out)
            outputs.append({p.name: p.read_bytes().replace(str(out).encode(), b"") for p in out.iterdir()})
        assert outputs[0] == outputs[1], (name, seed, script)
        for p in tmp_path.iterdir():
            for f in p.iterdir():
                f.unlink()
