import pytest

from transtrust.channels import Kind, parse_script
from transtrust.credentials import INDEPENDENT, PRINCIPAL_CONTROLLED
from transtrust.operations.outcomes import AccessDecision, StepResult, TranspositionOutcome, reason_for
from transtrust.operations.restriction import run_restriction
from transtrust.operations.transposition import run_transposition
from transtrust.errors import ChannelRefused, KeyRevoked, Timeout
from transtrust.credentials import agent_id
from transtrust.scenarios import build_bonding, build_pos, build_prepaid, revoke_backing, scenario_bonding

K = Kind
TRANSPOSITION_KINDS = [
    # b <-> a, mutual attestation
    K.CHANNEL_HELLO, K.CHANNEL_HELLO,
    K.CHANNEL_ATTEST, K.QUOTE_L1, K.QUOTE_L2,
    K.CHANNEL_ATTEST, K.QUOTE_L1, K.QUOTE_L2,
    K.CHANNEL_ACCEPT,
    # a <-> A, with domain-credential log-on
    K.CHANNEL_HELLO, K.CHANNEL_HELLO, K.GAMMA_AUTH, K.GAMMA_AUTH,
    K.CHANNEL_ATTEST, K.QUOTE_L1, K.QUOTE_L2, K.CHANNEL_ACCEPT,
    # step A: tau_b relayed to B, B challenges b through the relays, acks flow back
    K.TAU_PRESENT, K.TAU_PRESENT, K.TAU_PRESENT,
    K.GAMMA_AUTH, K.GAMMA_AUTH, K.GAMMA_AUTH, K.GAMMA_AUTH, K.GAMMA_AUTH, K.GAMMA_AUTH,
    K.AUTH_ACK, K.AUTH_ACK,
    # step B: pledge X(tau_a) carried to B, A checks the association, Y(ack) returns to b
    K.TAU_PRESENT, K.WRAPPED_TAU, K.WRAPPED_TAU, K.WRAPPED_TAU,
    K.AUTH_REQUEST, K.AUTH_ACK,
    K.WRAPPED_ACK, K.WRAPPED_ACK, K.WRAPPED_ACK,
]


# -- outcome records --------------------------------------------------------


def test_access_decision_invariants():
    a = agent_id("phone", "mno")
    with pytest.raises(ValueError):
        AccessDecision(a, "deny", "privileged", "policy")
    with pytest.raises(ValueError):
        AccessDecision(a, "grant", "base", "policy")
    with pytest.raises(ValueError):
        AccessDecision(a, "deny", "base", "ok")
    with pytest.raises(ValueError):
        AccessDecision.deny(a, "bored")
    assert str(AccessDecision.grant(a, "privileged")) == "grant/privileged"
    assert str(AccessDecision.deny(a, "revoked")) == "deny(revoked)"


def test_outcome_completed_iff_both_steps_accepted():
    ok, bad = StepResult(True), StepResult(False, "timeout")
    assert TranspositionOutcome(ok, ok, frozenset()).completed
    assert not TranspositionOutcome(ok, bad, frozenset()).completed
    assert not TranspositionOutcome(bad, ok, frozenset()).completed


def test_reason_mapping():
    assert reason_for(Timeout("x")) == "timeout"
    assert reason_for(KeyRevoked("x")) == "revoked"
    assert reason_for(ChannelRefused("integrity_mismatch", "x")) == "integrity_mismatch"


# -- restriction ------------------------------------------------------------


def restriction(seed=1, **kw):
    return build_prepaid(seed, **kw)


@pytest.mark.parametrize("variant", ["acl", "shared_secret"])
def test_linked_tau_gets_privileged_access(variant):
    s = restriction()
    decision = run_restriction(s.world, s.mno, s.phone, None, s.phone.tau, variant)
    assert str(decision) == "grant/privileged"


def test_gamma_alone_gets_base_access():
    s = restriction()
    assert str(run_restriction(s.world, s.mno, s.phone)) == "grant/base"


def test_integrity_drift_is_denied():
    s = restriction()
    s.world.rogue_extend(s.phone)
    assert str(run_restriction(s.world, s.mno, s.phone, None, s.phone.tau)) == "deny(integrity_mismatch)"


def test_cloned_gamma_with_attacker_tau_is_detected():
    s = restriction(script=parse_script(["clone:phone"]))
    honest = run_restriction(s.world, s.mno, s.phone, None, s.phone.tau)
    cloned = run_restriction(s.world, s.mno, s.attacker, s.attacker_gamma, s.attacker.tau)
    assert (str(honest), str(cloned)) == ("grant/privileged", "deny(clone_detected)")


@pytest.mark.parametrize("attacker_first", [False, True])
def test_first_come_first_served_in_independent_mode(attacker_first):
    s = restriction(enrolment=INDEPENDENT, script=parse_script(["clone:phone"]))
    requests = [(s.phone, None), (s.attacker, s.attacker_gamma)]
    if attacker_first:
        requests.reverse()
    decisions = [str(run_restriction(s.world, s.mno, d, g, d.tau)) for d, g in requests]
    assert decisions == ["grant/privileged", "deny(clone_detected)"]


def test_removing_tau_never_turns_a_privileged_grant_into_a_deny():
    for seed in range(5):
        s = restriction(seed)
        assert run_restriction(s.world, s.mno, s.phone, None, s.phone.tau).granted
        s = restriction(seed)
        assert run_restriction(s.world, s.mno, s.phone).granted


@pytest.mark.parametrize("kind", ["GammaAuth", "QuoteL1", "QuoteL2", "TauPresent"])
def test_dropped_restriction_messages_deny(kind):
    s = restriction(script=parse_script([f"drop:{kind}"]))
    decision = run_restriction(s.world, s.mno, s.phone, None, s.phone.tau)
    assert not decision.granted


# -- subordination ----------------------------------------------------------


@pytest.mark.parametrize("backing", ["tau", "dedicated"])
@pytest.mark.parametrize("variant", ["forward", "local_grant"])
def test_bonded_camera_is_granted_its_service(backing, variant):
    s = build_bonding(1, backing=backing)
    assert str(scenario_bonding(s, "photo_upload", variant)) == "grant/base"


@pytest.mark.parametrize("variant", ["forward", "local_grant"])
def test_service_outside_sigma_is_policy_denied(variant):
    s = build_bonding(1)
    assert str(scenario_bonding(s, "firmware_flash", variant)) == "deny(policy)"


@pytest.mark.parametrize("backing", ["tau", "dedicated"])
def test_revoked_backing_key_denies(backing):
    s = build_bonding(1, backing=backing)
    revoke_backing(s)
    assert str(scenario_bonding(s, "photo_upload")) == "deny(revoked)"


def test_forward_grant_passes_through_the_principal():
    s = build_bonding(1)
    scenario_bonding(s, "photo_upload", "forward")
    kinds = [(e.kind, e.receiver.name) for e in s.world.transcript.entries]
    assert (K.AUTH_REQUEST, "mno") in kinds and (K.AUTH_ACK, "phone") in kinds


def test_dominator_from_another_domain_cannot_enable_access():
    s = build_bonding(1, phone_network="other")
    assert str(scenario_bonding(s, "photo_upload")) == "deny(policy)"


# -- transposition ----------------------------------------------------------


def transposition(privacy="encrypted", script=(), **kw):
    s = build_pos(42, script=parse_script(script))
    outcome = run_transposition(s.world, s.mno, s.phone, s.owner, s.pos, privacy, **kw)
    return s, outcome


def test_honest_transposition_message_sequence():
    s, outcome = transposition()
    assert outcome.completed
    assert s.world.transcript.kinds() == TRANSPOSITION_KINDS


def test_tampered_pledge_fails_step_b_only():
    s, outcome = transposition(script=["tamper:WrappedTau:0"])
    assert outcome.step_a.accepted
    assert str(outcome.step_b) == "failed(authentication_failure)"


def test_dropped_ack_times_out():
    s, outcome = transposition(script=["drop:WrappedAck"])
    assert str(outcome.step_b) == "failed(timeout)"


def test_failed_step_a_aborts_step_b():
    s, outcome = transposition(script=["tamper:AuthAck:0"])
    assert not outcome.step_a.accepted
    assert str(outcome.step_b) == "failed(aborted)"


def test_privacy_modes_differ_only_in_the_tau_subject():
    _, encrypted = transposition("encrypted")
    _, mac_only = transposition("mac_only")
    assert encrypted.completed and mac_only.completed
    assert {"phone", "pos"}.isdisjoint(encrypted.a_view_identities)
    assert mac_only.a_view_identities - encrypted.a_view_identities == {"phone"}


@pytest.mark.parametrize("secondary", [False, True])
def test_interleaved_steps_still_complete(secondary):
    _, outcome = transposition(interleave=True, secondary_challenge=secondary)
    assert outcome.completed


def test_unknown_privacy_mode_is_rejected():
    with pytest.raises(ValueError):
        transposition("rot13")
