import pytest
from hypothesis import given
from hypothesis import strategies as st

from transtrust.channels import Kind, parse_script
from transtrust.errors import ConfigError
from transtrust.scenarios import (
    PrepaidState,
    build_bonding,
    build_pos,
    build_prepaid,
    decrement,
    revoke_backing,
    run_scenario,
    scenario_bonding,
    scenario_pos,
    scenario_prepaid,
    sealed_total,
)

from conftest import scenario


# -- prepaid ----------------------------------------------------------------


def test_purchase_decrements_the_sealed_total():
    s = build_prepaid(1, initial_total=5)
    decision, state = scenario_prepaid(s, 1)
    assert str(decision) == "grant/privileged"
    assert state == PrepaidState(4)


def test_empty_total_is_denied_and_untouched():
    s = build_prepaid(1, initial_total=0)
    decision, state = scenario_prepaid(s, 1)
    assert str(decision) == "deny(policy)"
    assert state.running_total == 0


def test_tampered_software_is_denied_and_untouched():
    s = build_prepaid(1, initial_total=5)
    s.world.rogue_extend(s.phone)
    decision, state = scenario_prepaid(s, 1)
    assert str(decision) == "deny(integrity_mismatch)"
    assert state.running_total == 5


def test_later_purchases_reuse_the_session():
    s = build_prepaid(1, initial_total=3)
    first, _ = scenario_prepaid(s, 1)
    before = len(s.world.transcript.entries)
    second, state = scenario_prepaid(s, 1)
    kinds = [e.kind for e in s.world.transcript.entries[before:]]
    assert first.granted and second.granted and state.running_total == 1
    assert Kind.CHANNEL_HELLO not in kinds and Kind.QUOTE_L3 in kinds


def test_drift_after_attachment_is_caught_by_the_next_claim():
    s = build_prepaid(1, initial_total=3)
    scenario_prepaid(s, 1)
    s.world.rogue_extend(s.phone)
    decision, state = scenario_prepaid(s, 1)
    assert not decision.granted and state.running_total == 2


def test_overspend_is_denied_then_an_affordable_purchase_succeeds():
    s = build_prepaid(1, initial_total=2)
    assert str(scenario_prepaid(s, 3)[0]) == "deny(policy)"
    decision, state = scenario_prepaid(s, 2)
    assert decision.granted and state.running_total == 0


def test_decrement_refuses_to_go_negative():
    s = build_prepaid(1, initial_total=1)
    with pytest.raises(Exception):
        decrement(s.phone, 2)
    assert sealed_total(s.phone).running_total == 1
    with pytest.raises(ValueError):
        PrepaidState(-1)


def test_cloned_phone_cannot_spend():
    s = build_prepaid(1, initial_total=5, script=parse_script(["clone:phone"]))
    decision, _ = scenario_prepaid(s, 1, s.attacker, s.attacker_gamma)
    assert str(decision) == "deny(clone_detected)"
    assert sealed_total(s.attacker).running_total == 5


def test_clone_of_unknown_agent_is_a_config_error():
    with pytest.raises(ConfigError):
        build_prepaid(1, script=parse_script(["clone:nobody"]))


@given(
    seed=st.integers(0, 2**16),
    initial=st.integers(0, 6),
    purchases=st.lists(st.integers(1, 3), min_size=1, max_size=4),
    drift_at=st.one_of(st.none(), st.integers(0, 3)),
)
def test_prepaid_conservation(seed, initial, purchases, drift_at):
    s = build_prepaid(seed, initial_total=initial)
    granted = 0
    for i, units in enumerate(purchases):
        if i == drift_at:
            s.world.rogue_extend(s.phone)
        before = sealed_total(s.phone).running_total
        decision, state = scenario_prepaid(s, units)
        if decision.granted:
            granted += units
            assert state.running_total == before - units
        else:
            assert state.running_total == before
        if drift_at is not None and i >= drift_at:
            assert not decision.granted
    assert sealed_total(s.phone).running_total == initial - granted


# -- bonding ----------------------------------------------------------------


def test_bonded_camera_through_same_network_phone():
    assert scenario_bonding(build_bonding(1), "photo_upload").granted


def test_bonded_camera_through_other_network_phone():
    assert str(scenario_bonding(build_bonding(1, phone_network="other"), "photo_upload")) == "deny(policy)"


def test_revocation_is_permanent():
    s = build_bonding(1)
    revoke_backing(s)
    for service in ("photo_upload", "photo_upload", "firmware_flash"):
        assert str(scenario_bonding(s, service)) == "deny(revoked)"


# -- pos --------------------------------------------------------------------


def pos(script=()):
    s = build_pos(42, script=parse_script(script))
    outcome, decision = scenario_pos(s, 3)
    return s.world.transcript.kinds(), outcome, decision


def test_honest_purchase_ends_with_service_grant():
    kinds, outcome, decision = pos()
    assert outcome.completed and decision.granted
    assert kinds[-2:] == [Kind.WRAPPED_ACK, Kind.SERVICE_GRANT]


@pytest.mark.parametrize("script", [["tamper:WrappedTau:0"], ["drop:AuthAck"]])
def test_failed_purchase_ends_with_service_deny(script):
    kinds, outcome, decision = pos(script)
    assert not outcome.completed and not decision.granted
    assert kinds[-1] == Kind.SERVICE_DENY and Kind.SERVICE_GRANT not in kinds


def test_step_a_ack_drop_is_a_timeout():
    _, outcome, decision = pos(["drop:AuthAck"])
    assert str(decision) == "deny(timeout)"


# -- configured runs --------------------------------------------------------


@pytest.mark.parametrize("name", ["prepaid", "bonding", "pos"])
def test_default_configured_runs_succeed(name):
    result = run_scenario(scenario(name))
    assert result.success
    text = result.transcript.to_text()
    assert f"# scenario {name}\n" in text and text.rstrip().endswith(f"# result {result.decision}")


def test_prepaid_run_records_conservation_note():
    result = run_scenario(scenario("prepaid", "prepaid.initial_total=2", "prepaid.purchases=3"))
    assert [str(d) for _, d in result.attempts] == ["grant/privileged", "grant/privileged", "deny(policy)"]
    assert "# prepaid initial=2 final=0 granted_units=2" in result.transcript.to_text()


def test_clone_is_prepaid_only():
    with pytest.raises(ConfigError):
        run_scenario(scenario("pos", "adversary.script=clone:phone"))


def test_actor_names_are_configurable():
    result = run_scenario(scenario("pos", "actors.phone=alice", "actors.pos=till"))
    assert "| alice | till |" in result.transcript.to_text()
