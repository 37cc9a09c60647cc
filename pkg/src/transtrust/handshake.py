"""Attested secure-channel establishment over the fabric.

Message order for a channel from initiator I to responder R::

    ChannelHello I->R, ChannelHello R->I            (DH shares, in clear)
    GammaAuth R->I, GammaAuth I->R                  (optional domain-credential log-on)
    ChannelAttest R->I, QuoteL1 I->R, QuoteL2 I->R  (I attests to R)
    ChannelAttest I->R, QuoteL1 R->I, QuoteL2 R->I  (only when mutual)
    ChannelAccept from the last verifier
"""

from __future__ import annotations

from typing import TYPE_CHECKING

from transtrust import crypto_prims as cp
from transtrust import tpm_sim
from transtrust.channels import Delivery, Kind, Send, Session, run_one
from transtrust.credentials import gamma_response
from transtrust.encoding import decode_fields, encode_fields, pack, require, to_int
from transtrust.errors import (
    AttestationError,
    ChannelRefused,
    CodecError,
    DerivationError,
    KeyRevoked,
    OrderingViolation,
)

if TYPE_CHECKING:
    from transtrust.world import Device, Node, Principal, World


def fields_of(d: Delivery, *names: str) -> dict[str, bytes]:
    """Decode a delivered payload, rejecting the envelope if it is malformed."""
    try:
        fields = decode_fields(d.payload)
        require(fields, *names)
    except CodecError as exc:
        d.reject("malformed")
        raise ChannelRefused("malformed", str(exc)) from exc
    return fields


def quote_nonce(challenge: bytes, binding: bytes, label: bytes) -> bytes:
    """Quote nonce bound to the verifier's challenge and to the channel it travels on."""
    return cp.hash(pack(challenge, binding, label))[: cp.NONCE_SIZE]


def refuse(d: Delivery, exc: Exception) -> ChannelRefused:
    reason = getattr(exc, "reason", type(exc).__name__)
    d.reject(reason)
    return ChannelRefused(reason, str(exc))


def hello_flow(world: World, initiator: Node, responder: Node):
    i_secret, i_public = cp.dh_keygen(world.rng)
    d = yield Send(None, initiator.id, responder.id, Kind.CHANNEL_HELLO, encode_fields({"dh": i_public}))
    i_seen_by_r = fields_of(d, "dh")["dh"]
    r_secret, r_public = cp.dh_keygen(world.rng)
    d2 = yield Send(None, responder.id, initiator.id, Kind.CHANNEL_HELLO, encode_fields({"dh": r_public}))
    r_seen_by_i = fields_of(d2, "dh")["dh"]

    i_ctx = pack(i_public, r_seen_by_i, initiator.name.encode(), responder.name.encode())
    r_ctx = pack(i_seen_by_r, r_public, initiator.name.encode(), responder.name.encode())
    try:
        r_key = cp.dh_derive(r_secret, i_seen_by_r, "transport", r_ctx)
    except DerivationError:
        d.reject("dh_failure")
        raise
    try:
        i_key = cp.dh_derive(i_secret, r_seen_by_i, "transport", i_ctx)
    except DerivationError:
        d2.reject("dh_failure")
        raise
    sid = world.fabric.new_session_id(initiator.id, responder.id)
    return Session(
        sid,
        (initiator.id, responder.id),
        {initiator.id: i_key, responder.id: r_key},
        {initiator.id: cp.hash(i_ctx), responder.id: cp.hash(r_ctx)},
    )


def logon_flow(world: World, session: Session, device: Device, principal: Principal, gamma=None):
    """Domain-credential challenge-response from ``device`` to ``principal``.

    ``gamma`` overrides the credential the device presents (an attacker's clone).
    """
    challenge = world.rng.nonce()
    d = yield Send(session, principal.id, device.id, Kind.GAMMA_AUTH, encode_fields({"challenge": challenge}))
    seen = fields_of(d, "challenge")["challenge"]
    gamma = gamma or device.gamma
    serial = gamma.serial if gamma else 0
    response = gamma_response(gamma, seen) if gamma else b""
    d = yield Send(session, device.id, principal.id, Kind.GAMMA_AUTH,
                   encode_fields({"serial": serial, "response": response}))
    f = fields_of(d, "serial", "response")
    serial = to_int(f["serial"])
    if not principal.registry.check_gamma_response(serial, challenge, f["response"]):
        d.reject("gamma_rejected")
        raise ChannelRefused("gamma_rejected", f"{device.name} failed domain-credential authentication")
    session.gamma_serials[device.id] = serial
    principal.logons[device.id] = session
    return serial


def attest_flow(world: World, session: Session, prover: Device, verifier: Node):
    """Level-1 then level-2 attestation of ``prover`` toward ``verifier``."""
    c1, c2 = world.rng.nonce(), world.rng.nonce()
    d = yield Send(session, verifier.id, prover.id, Kind.CHANNEL_ATTEST, encode_fields({"c1": c1, "c2": c2}))
    challenges = fields_of(d, "c1", "c2")
    p_bind = session.bindings[prover.id]
    v_bind = session.bindings[verifier.id]

    q1 = tpm_sim.ek_prove_liveness(prover.tpm, quote_nonce(challenges["c1"], p_bind, b"L1"))
    d = yield Send(session, prover.id, verifier.id, Kind.QUOTE_L1, encode_fields({
        "quote": q1.encode(),
        "ek": prover.tpm.endorsement.public,
        "ek_cert": prover.tpm.endorsement_cert,
        "manufacturer": prover.tpm.manufacturer,
    }))
    f = fields_of(d, "quote", "ek", "ek_cert", "manufacturer")
    try:
        verifier.verifier.verify_liveness(
            tpm_sim.AttestationQuote.decode(f["quote"]),
            quote_nonce(c1, v_bind, b"L1"),
            f["ek"], f["ek_cert"], f["manufacturer"].decode(),
        )
    except (AttestationError, CodecError) as exc:
        raise refuse(d, exc) from exc
    session.record_evidence(prover.id, tpm_sim.LIVENESS)

    try:
        q2 = tpm_sim.quote_system_state(
            prover.tpm, quote_nonce(challenges["c2"], p_bind, b"L2"), prover.selection, prover.aik
        )
    except KeyRevoked as exc:
        raise ChannelRefused("revoked", str(exc)) from exc
    d = yield Send(session, prover.id, verifier.id, Kind.QUOTE_L2, encode_fields({
        "quote": q2.encode(),
        "aik": prover.aik.public,
        "aik_cert": prover.aik.certificate,
        "issuer": prover.aik.issuer,
    }))
    f = fields_of(d, "quote", "aik", "aik_cert", "issuer")
    try:
        verifier.verifier.verify_system_state(
            tpm_sim.AttestationQuote.decode(f["quote"]),
            quote_nonce(c2, v_bind, b"L2"),
            f["aik"], f["aik_cert"], f["issuer"].decode(),
            world.references(verifier, prover),
        )
    except (AttestationError, CodecError) as exc:
        raise refuse(d, exc) from exc
    session.record_evidence(prover.id, tpm_sim.SYSTEM_STATE)
    session.attested_keys[prover.id] = cp.hash(f["aik"])
    session.attested_publics[prover.id] = (f["aik"], f["aik_cert"], f["issuer"].decode())


def credential_flow(
    world: World,
    session: Session,
    prover: Device,
    verifier: Node,
    credential_bytes: bytes,
    expected_digests,
    extra: dict | None = None,
):
    """Level-3 attestation of ``credential_bytes`` by ``prover``.

    ``expected_digests`` maps the credential digests the verifier is prepared
    to accept to a label (or is a function of the received fields returning
    such a map); the label of the matching digest is returned with the
    fields. The level-2 quote must already have been accepted in ``session``.
    """
    c3 = world.rng.nonce()
    d = yield Send(session, verifier.id, prover.id, Kind.CHANNEL_ATTEST, encode_fields({"c3": c3}))
    seen = fields_of(d, "c3")["c3"]
    try:
        q3 = tpm_sim.attest_credential(
            prover.tpm, credential_bytes, quote_nonce(seen, session.bindings[prover.id], b"L3"), prover.aik,
            session_level=session.evidence(prover.id), pcr_selection=prover.selection,
        )
    except KeyRevoked as exc:
        raise ChannelRefused("revoked", str(exc)) from exc
    body = {"quote": q3.encode()}
    body.update(extra or {})
    d = yield Send(session, prover.id, verifier.id, Kind.QUOTE_L3, encode_fields(body))
    f = fields_of(d, "quote")
    aik_public, aik_cert, issuer = session.attested_publics[prover.id]
    try:
        quote = tpm_sim.AttestationQuote.decode(f["quote"])
        accepted = expected_digests(f) if callable(expected_digests) else expected_digests
        label = accepted.get(quote.credential_digest)
        verifier.verifier.verify_credential(
            quote,
            quote_nonce(c3, session.bindings[verifier.id], b"L3"),
            aik_public, aik_cert, issuer,
            world.references(verifier, prover),
            quote.credential_digest if label is not None else b"",
            session.evidence(prover.id),
        )
    except (AttestationError, CodecError, OrderingViolation) as exc:
        raise refuse(d, exc) from exc
    session.record_evidence(prover.id, tpm_sim.CREDENTIAL)
    return label, f


def channel_flow(
    world: World,
    initiator: Node,
    responder: Node,
    *,
    mutual: bool = False,
    logon: bool = False,
    attest: bool = True,
    gamma=None,
):
    """Establish a session; raises :class:`ChannelRefused` on any rejected step."""
    session = yield from hello_flow(world, initiator, responder)
    if logon:
        yield from logon_flow(world, session, initiator, responder, gamma)
    if attest:
        yield from attest_flow(world, session, initiator, responder)
        if mutual:
            yield from attest_flow(world, session, responder, initiator)
    last, other = (initiator, responder) if (attest and mutual) else (responder, initiator)
    evidence = encode_fields({e.name: session.evidence(e) for e in session.endpoints})
    yield Send(session, last.id, other.id, Kind.CHANNEL_ACCEPT, evidence)
    session.established = True
    return session


def establish_attested_channel(
    world: World,
    initiator: Node,
    responder: Node,
    mutual: bool,
    *,
    logon: bool = False,
) -> Session:
    """Run a stand-alone channel establishment and return the session."""
    world.fabric.start_run()
    return run_one(world.fabric, channel_flow(world, initiator, responder, mutual=mutual, logon=logon), "setup")
