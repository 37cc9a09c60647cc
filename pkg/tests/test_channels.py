import pytest
from hypothesis import given
from hypothesis import strategies as st

from transtrust.channels import (
    ACCEPTED,
    DROPPED,
    REJECTED,
    Kind,
    Send,
    parse_action,
    parse_script,
    run_flows,
)
from transtrust.errors import ChannelRefused, ConfigError, Timeout, TransTrustError
from transtrust.handshake import channel_flow, establish_attested_channel
from transtrust.world import World


def build(script=(), seed=3):
    world = World(seed, parse_script(script))
    mno = world.add_principal("mno")
    phone = world.add_device("phone", "mno", "phone")
    return world, mno, phone


def test_mutual_channel_records_level_two_evidence_both_ways():
    world, mno, phone = build()
    other = world.add_device("pos", "mno", "pos")
    session = establish_attested_channel(world, phone, other, mutual=True)
    assert session.established
    assert session.evidence(phone.id) == 2 and session.evidence(other.id) == 2


def test_one_way_channel_attests_only_the_initiator():
    world, mno, phone = build()
    session = establish_attested_channel(world, phone, mno, mutual=False)
    assert session.evidence(phone.id) == 2 and session.evidence(mno.id) == 0
    assert world.transcript.kinds() == [
        Kind.CHANNEL_HELLO, Kind.CHANNEL_HELLO, Kind.CHANNEL_ATTEST, Kind.QUOTE_L1, Kind.QUOTE_L2,
        Kind.CHANNEL_ACCEPT,
    ]


def test_rogue_software_is_refused():
    world, mno, phone = build()
    world.rogue_extend(phone)
    with pytest.raises(ChannelRefused):
        establish_attested_channel(world, phone, mno, mutual=False)


@pytest.mark.parametrize("kind", ["ChannelHello", "QuoteL1", "QuoteL2", "ChannelAccept"])
def test_tampering_with_any_handshake_message_prevents_the_channel(kind):
    world, mno, phone = build([f"tamper:{kind}:0"])
    with pytest.raises(TransTrustError):
        establish_attested_channel(world, phone, mno, mutual=False)


def test_duplicate_sealed_envelope_is_rejected_as_replay():
    world, mno, phone = build(["duplicate:QuoteL2"])
    establish_attested_channel(world, phone, mno, mutual=False)
    copies = [e for e in world.transcript.entries if e.kind == Kind.QUOTE_L2]
    assert [e.status for e in copies] == [ACCEPTED, REJECTED]
    assert copies[1].reason == "ReplayDetected"


def test_drop_times_out():
    world, mno, phone = build(["drop:QuoteL1"])
    with pytest.raises(Timeout):
        establish_attested_channel(world, phone, mno, mutual=False)
    assert world.transcript.entries[3].status == DROPPED


def test_step_budget_bounds_a_run():
    world, mno, phone = build()
    world.fabric.step_budget = 2
    world.fabric.start_run()
    results = run_flows(world.fabric, {"setup": channel_flow(world, phone, mno)})
    assert isinstance(results["setup"], Timeout)
    assert world.fabric.steps == 2


def test_sealed_payloads_round_trip_and_are_direction_bound():
    world, mno, phone = build()
    session = establish_attested_channel(world, phone, mno, mutual=False)
    wire = session.seal(phone.id, Kind.SERVICE_REQUEST, b"hello")
    assert session.open(phone.id, Kind.SERVICE_REQUEST, wire) == b"hello"
    wire = session.seal(phone.id, Kind.SERVICE_REQUEST, b"again")
    with pytest.raises(Exception):
        session.open(phone.id, Kind.SERVICE_GRANT, wire)


def test_transcript_lines_have_six_fields():
    world, mno, phone = build()
    establish_attested_channel(world, phone, mno, mutual=False)
    text = world.transcript.to_text()
    assert text.startswith("# seed 3\n")
    body = [line for line in text.splitlines() if not line.startswith("#")]
    assert all(len(line.split(" | ")) == 6 for line in body)
    assert body[0].startswith("1 | phone | mno | ChannelHello | accepted | ")


def test_unsealed_send_is_delivered_in_clear():
    world, mno, phone = build()

    def flow():
        d = yield Send(None, phone.id, mno.id, Kind.SERVICE_REQUEST, b"plain")
        return d.payload

    assert run_flows(world.fabric, {"x": flow()}) == {"x": b"plain"}


@pytest.mark.parametrize("text", ["", "smash:QuoteL1", "drop:NoSuchKind", "drop:AuthAck:0",
                                  "tamper:QuoteL1:x", "clone:", "tamper:1:2:3"])
def test_malformed_actions_are_config_errors(text):
    with pytest.raises(ConfigError):
        parse_action(text)


@given(st.sampled_from(["tamper", "forge"]), st.sampled_from([k.value for k in Kind]), st.integers(0, 999))
def test_action_text_round_trips(action, kind, index):
    text = f"{action}:{kind}:{index}"
    assert str(parse_action(text)) == text
    assert str(parse_action(f"drop:{kind}")) == f"drop:{kind}"
