"""Transposition: a POS b authenticates to its owner B through a phone a and the phone's MNO A.

Roles: ``a`` phone of MNO ``A``; ``b`` POS of owner ``B``. Preconditions are a
mutually attested channel a<->b (a initiates) and an attested channel a->A
with domain log-on. A and B talk over a standing backbone link.

Step A, trust of a and A in b::

    TauPresent   b->a, a->A, A->B      (b's trust credential; a and A forward it without the subject)
    GammaAuth    B->A, A->a, a->b      (B's challenge for b's domain credential)
    GammaAuth    b->a, a->A, A->B      (response and level 1-3 quotes, sealed under a key only b and B share)
    AuthAck      B->A, A->a            (B vouches for b; A passes it on)

Step B, trust of b and B in a::

    TauPresent   a->b                  (a's trust credential)
    WrappedTau   b->a, a->A, A->B      (a's credential protected under X, keyed by signed DH between b and B)
    AuthRequest  B->A                  (B asks A about a)
    AuthAck      A->B                  (A associates and re-authenticates a)
    WrappedAck   B->A, A->a, a->b      (the verdict protected under Y)

Intermediaries relay WrappedTau and WrappedAck opaquely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from transtrust import crypto_prims as cp
from transtrust import tpm_sim
from transtrust.channels import Envelope, Kind, Send, Session, run_flows
from transtrust.credentials import TauPresentation, gamma_response
from transtrust.encoding import decode_fields, encode_fields, pack, require, to_str
from transtrust.errors import (
    AttestationError,
    AuthenticationFailure,
    ChannelRefused,
    CodecError,
    OrderingViolation,
    TransTrustError,
)
from transtrust.handshake import channel_flow, fields_of, quote_nonce
from transtrust.operations.outcomes import ACCEPTED_STEP, StepResult, TranspositionOutcome, failed, reason_for
from transtrust.world import Device, Principal, World

ENCRYPTED = "encrypted"
MAC_ONLY = "mac_only"
PRIVACY_MODES = (ENCRYPTED, MAC_ONLY)

SETUP_PHASE = "setup"
STEP_A_PHASE = "step_a"
STEP_B_PHASE = "step_b"

# X, Y and every tunnel key protect exactly one message, so a fixed nonce never repeats under a key.
_SINGLE_USE_NONCE = bytes(cp.NONCE_SIZE)


class StepFailure(TransTrustError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(detail or reason)
        self.reason = reason


@dataclass
class Parties:
    A: Principal
    a: Device
    B: Principal
    b: Device
    s_ab: Session = None
    s_aA: Session = None
    s_AB: Session = None

    def toward_B(self):
        """Hops from b to B."""
        return [(self.s_ab, self.b, self.a), (self.s_aA, self.a, self.A), (self.s_AB, self.A, self.B)]

    def toward_b(self):
        """Hops from B to b."""
        return [(s, r, f) for s, f, r in reversed(self.toward_B())]


def _relay(hops, kind: Kind, payload: bytes):
    """Send ``payload`` hop by hop; each hop forwards what it received, untouched."""
    d = None
    for session, sender, receiver in hops:
        d = yield Send(session, sender.id, receiver.id, kind, payload)
        payload = d.payload
    return d


def _decode_tau(d) -> TauPresentation:
    try:
        return TauPresentation.decode(fields_of(d, "tau")["tau"])
    except CodecError as exc:
        d.reject("malformed")
        raise ChannelRefused("malformed", str(exc)) from exc


def protect(key: cp.SharedSecret, privacy: str, data: bytes) -> bytes:
    """Protect ``data`` end to end: sealed (``encrypted``) or in clear under a MAC (``mac_only``)."""
    if privacy == ENCRYPTED:
        return encode_fields({"mode": ENCRYPTED, "body": cp.aead_seal(key, _SINGLE_USE_NONCE, b"wrapped", data)})
    return encode_fields({"mode": MAC_ONLY, "body": data, "tag": cp.mac(key, data)})


def unprotect(key: cp.SharedSecret, privacy: str, blob: bytes) -> bytes:
    try:
        f = decode_fields(blob)
        mode, body = require(f, "mode", "body")
    except CodecError as exc:
        raise AuthenticationFailure(f"malformed protected blob: {exc}") from exc
    if to_str(mode) != privacy:
        raise AuthenticationFailure("protection mode differs from the agreed one")
    if privacy == ENCRYPTED:
        return cp.aead_open(key, _SINGLE_USE_NONCE, b"wrapped", body)
    if not cp.mac_verify(key, body, f.get("tag", b"")):
        raise AuthenticationFailure("MAC over relayed payload does not verify")
    return body


def wrap_keys(dh_secret, peer_public: bytes, eph_public: bytes, static_public: bytes, principal: str):
    context = pack(eph_public, static_public, principal.encode())
    return (
        cp.dh_derive(dh_secret, peer_public, "X", context),
        cp.dh_derive(dh_secret, peer_public, "Y", context),
    )


# -- setup ------------------------------------------------------------------


def setup_flow(world: World, p: Parties):
    p.s_ab = yield from channel_flow(world, p.a, p.b, mutual=True)
    p.s_aA = yield from channel_flow(world, p.a, p.A, logon=True)
    p.s_AB = world.backbone(p.A, p.B)
    return p


# -- step A -----------------------------------------------------------------


def _tunnel_key(gamma_secret: bytes, challenge: bytes) -> bytes:
    return cp.hkdf(gamma_secret, "transport", pack(b"gamma-tunnel", challenge))


def _tunnel_bundle(world: World, b: Device, challenge: bytes) -> bytes:
    """b's answer to B: domain-credential response plus quotes at levels 1, 2 and 3."""
    tpm = b.tpm
    q1 = tpm_sim.ek_prove_liveness(tpm, quote_nonce(challenge, b"gamma-tunnel", b"L1"))
    q2 = tpm_sim.quote_system_state(tpm, quote_nonce(challenge, b"gamma-tunnel", b"L2"), b.selection, b.aik)
    q3 = tpm_sim.attest_credential(
        tpm, b.gamma.encode(), quote_nonce(challenge, b"gamma-tunnel", b"L3"), b.aik,
        session_level=tpm_sim.SYSTEM_STATE, pcr_selection=b.selection,
    )
    inner = encode_fields({
        "response": gamma_response(b.gamma, challenge),
        "q1": q1.encode(), "ek": tpm.endorsement.public, "ek_cert": tpm.endorsement_cert,
        "manufacturer": tpm.manufacturer,
        "q2": q2.encode(), "aik": b.aik.public, "aik_cert": b.aik.certificate, "issuer": b.aik.issuer,
        "q3": q3.encode(),
    })
    return cp.aead_seal(_tunnel_key(b.gamma.secret, challenge), _SINGLE_USE_NONCE, b"gamma-tunnel", inner)


def _check_tunnel(world: World, B: Principal, b_node: Device, serial: int, key_id: bytes,
                  challenge: bytes, tunnel: bytes) -> str:
    """B's verification of the tunnelled bundle; returns a decision reason."""
    gamma = B.registry.gamma_index.get(serial)
    if gamma is None:
        return "no_association"
    try:
        inner = cp.aead_open(_tunnel_key(gamma.secret, challenge), _SINGLE_USE_NONCE, b"gamma-tunnel", tunnel)
        f = decode_fields(inner)
        response, q1, ek, ek_cert, manufacturer, q2, aik, aik_cert, issuer, q3 = require(
            f, "response", "q1", "ek", "ek_cert", "manufacturer", "q2", "aik", "aik_cert", "issuer", "q3"
        )
        if not B.registry.check_gamma_response(serial, challenge, response):
            return "policy"
        if cp.hash(aik) != key_id:
            return "policy"
        v = B.verifier
        v.verify_liveness(tpm_sim.AttestationQuote.decode(q1), quote_nonce(challenge, b"gamma-tunnel", b"L1"),
                          ek, ek_cert, to_str(manufacturer))
        references = world.references(B, b_node)
        v.verify_system_state(tpm_sim.AttestationQuote.decode(q2), quote_nonce(challenge, b"gamma-tunnel", b"L2"),
                              aik, aik_cert, to_str(issuer), references)
        v.verify_credential(tpm_sim.AttestationQuote.decode(q3), quote_nonce(challenge, b"gamma-tunnel", b"L3"),
                            aik, aik_cert, to_str(issuer), references, cp.hash(gamma.encode()),
                            tpm_sim.SYSTEM_STATE)
    except (AuthenticationFailure, CodecError, AttestationError, OrderingViolation) as exc:
        return reason_for(exc)
    return "ok"


def _ack_statement(label: bytes, verdict: str, reason: str, ref: bytes, key_id: bytes) -> bytes:
    return pack(label, verdict.encode(), reason.encode(), ref, key_id)


def step_a_flow(world: World, p: Parties):
    A, a, B, b = p.A, p.a, p.B, p.b
    d = yield Send(p.s_ab, b.id, a.id, Kind.TAU_PRESENT, encode_fields({"tau": b.tau.encode()}))
    tau_b = _decode_tau(d)
    if tau_b.tpm_key_id != p.s_ab.attested_keys.get(b.id):
        d.reject("unattested_credential")
        raise StepFailure("policy", "b's trust credential is not bound to its attested key")
    d = yield Send(p.s_aA, a.id, A.id, Kind.TAU_PRESENT,
                   encode_fields({"tau": tau_b.encode(include_subject=False), "principal": tau_b.issuer}))
    f = fields_of(d, "tau", "principal")
    if to_str(f["principal"]) != B.name:
        d.reject("unknown_principal")
        raise StepFailure("policy", "no backbone to the credential's issuer")
    d = yield Send(p.s_AB, A.id, B.id, Kind.TAU_PRESENT, encode_fields({"tau": f["tau"]}))
    at_B = _decode_tau(d)

    known = B.registry.resolve_tau(at_B)
    serial = B.registry.associate(at_B) if known is not None else None
    challenge = world.rng.nonce()
    if serial is None:
        verdict, reason = "deny", "no_association"
    else:
        d = yield from _relay(p.toward_b(), Kind.GAMMA_AUTH, encode_fields({"challenge": challenge}))
        seen = fields_of(d, "challenge")["challenge"]
        d = yield from _relay(p.toward_B(), Kind.GAMMA_AUTH,
                              encode_fields({"tunnel": _tunnel_bundle(world, b, seen)}))
        tunnel = fields_of(d, "tunnel")["tunnel"]
        reason = _check_tunnel(world, B, world.node(known.subject), serial, at_B.tpm_key_id, challenge, tunnel)
        verdict = "grant" if reason == "ok" else "deny"

    statement = _ack_statement(b"step-a-ack", verdict, reason, challenge, at_B.tpm_key_id)
    d = yield Send(p.s_AB, B.id, A.id, Kind.AUTH_ACK, encode_fields({
        "verdict": verdict, "reason": reason, "ref": challenge, "key_id": at_B.tpm_key_id,
        "sig": B.authority.certify(statement),
    }))
    f = fields_of(d, "verdict", "reason", "ref", "key_id", "sig")
    statement = _ack_statement(b"step-a-ack", to_str(f["verdict"]), to_str(f["reason"]), f["ref"], f["key_id"])
    if f["key_id"] != tau_b.tpm_key_id or not cp.verify(B.authority.public, statement, f["sig"]):
        d.reject("signature_invalid")
        raise StepFailure("authentication_failure", "B's acknowledgement does not verify")
    d = yield Send(p.s_aA, A.id, a.id, Kind.AUTH_ACK, encode_fields({"verdict": f["verdict"], "reason": f["reason"]}))
    f = fields_of(d, "verdict", "reason")
    if to_str(f["verdict"]) != "grant":
        return failed(to_str(f["reason"]))
    return ACCEPTED_STEP


# -- step B -----------------------------------------------------------------


def _secondary_authentication(world: World, p: Parties, subject, serial: int, key_id: bytes, fresh: bool):
    """A re-authenticates a by its domain credential before vouching for it to B."""
    A, a = p.A, p.a
    logon = A.logons.get(subject)
    if logon is None:
        return False
    if not fresh:
        return logon.gamma_serials.get(subject) == serial and logon.attested_keys.get(subject) == key_id
    challenge = world.rng.nonce()
    d = yield Send(logon, A.id, a.id, Kind.GAMMA_AUTH, encode_fields({"challenge": challenge}))
    seen = fields_of(d, "challenge")["challenge"]
    d = yield Send(logon, a.id, A.id, Kind.GAMMA_AUTH,
                   encode_fields({"serial": a.gamma.serial, "response": gamma_response(a.gamma, seen)}))
    f = fields_of(d, "serial", "response")
    return A.registry.check_gamma_response(serial, challenge, f["response"]) and logon.attested_keys.get(subject) == key_id


def step_b_flow(world: World, p: Parties, privacy: str, secondary_challenge: bool = False):
    A, a, B, b = p.A, p.a, p.B, p.b
    d = yield Send(p.s_ab, a.id, b.id, Kind.TAU_PRESENT, encode_fields({"tau": a.tau.encode()}))
    tau_a = _decode_tau(d)
    if tau_a.tpm_key_id != p.s_ab.attested_keys.get(a.id):
        d.reject("unattested_credential")
        raise StepFailure("policy", "a's trust credential is not bound to its attested key")

    # b: one-pass signed DH against B's static key; X protects a's credential, Y the answer.
    eph_secret, eph_public = cp.dh_keygen(world.rng)
    x_b, y_b = wrap_keys(eph_secret, B.dh_public, eph_public, B.dh_public, B.name)
    protected = protect(x_b, privacy, tau_a.encode())
    signed = pack(b"wrapped-tau", eph_public, B.name.encode(), protected)
    d = yield from _relay(p.toward_B(), Kind.WRAPPED_TAU, encode_fields({
        "eph": eph_public, "signer": b.aik.key_id, "sig": cp.sign(b.aik.keypair.secret, signed),
        "protected": protected,
    }))

    # B: authenticate b's signature, derive X and Y, open a's credential.
    try:
        f = decode_fields(d.payload)
        eph, signer, sig, blob = require(f, "eph", "signer", "sig", "protected")
    except CodecError as exc:
        d.reject("malformed")
        raise StepFailure("authentication_failure", str(exc)) from exc
    signer_tau = B.registry.taus.get(signer)
    if signer_tau is None or not cp.verify(signer_tau.public_key, pack(b"wrapped-tau", eph, B.name.encode(), blob), sig):
        d.reject("signature_invalid")
        raise StepFailure("authentication_failure", "wrapped credential is not signed by a known POS key")
    try:
        x_B, y_B = wrap_keys(B.dh_secret, eph, eph, B.dh_public, B.name)
        presented = TauPresentation.decode(unprotect(x_B, privacy, blob))
    except TransTrustError as exc:
        d.reject("authentication_failure")
        raise StepFailure("authentication_failure", str(exc)) from exc

    request = world.next_request_id()
    d = yield Send(p.s_AB, B.id, A.id, Kind.AUTH_REQUEST,
                   encode_fields({"tau": presented.encode(include_subject=False), "request": request}))
    f = fields_of(d, "tau", "request")
    at_A = TauPresentation.decode(f["tau"])
    known = A.registry.resolve_tau(at_A)
    serial = A.registry.associate(at_A) if known is not None else None
    if serial is None:
        verdict, reason = "deny", "no_association"
    else:
        ok = yield from _secondary_authentication(world, p, known.subject, serial, at_A.tpm_key_id,
                                                  secondary_challenge)
        verdict, reason = ("grant", "ok") if ok else ("deny", "policy")
    statement = _ack_statement(b"step-b-ack", verdict, reason, f["request"], at_A.tpm_key_id)
    d = yield Send(p.s_AB, A.id, B.id, Kind.AUTH_ACK, encode_fields({
        "verdict": verdict, "reason": reason, "ref": f["request"], "key_id": at_A.tpm_key_id,
        "sig": A.authority.certify(statement),
    }))
    f = fields_of(d, "verdict", "reason", "ref", "key_id", "sig")
    statement = _ack_statement(b"step-b-ack", to_str(f["verdict"]), to_str(f["reason"]), f["ref"], f["key_id"])
    if f["ref"] != request or not cp.verify(A.authority.public, statement, f["sig"]):
        d.reject("signature_invalid")
        raise StepFailure("authentication_failure", "A's acknowledgement does not verify")

    answer = encode_fields({"verdict": f["verdict"], "reason": f["reason"], "key_id": f["key_id"]})
    d = yield from _relay(p.toward_b(), Kind.WRAPPED_ACK, encode_fields({"protected": protect(y_B, privacy, answer)}))
    try:
        g = decode_fields(unprotect(y_b, privacy, fields_of(d, "protected")["protected"]))
        verdict, reason, key_id = require(g, "verdict", "reason", "key_id")
    except (AuthenticationFailure, CodecError) as exc:
        d.reject("authentication_failure")
        raise StepFailure("authentication_failure", str(exc)) from exc
    if key_id != tau_a.tpm_key_id:
        raise StepFailure("policy", "acknowledgement is about another credential")
    if to_str(verdict) != "grant":
        return failed(to_str(reason))
    return ACCEPTED_STEP


# -- driver -----------------------------------------------------------------


def _guarded(flow):
    """Turn any exception ending a step into a failed :class:`StepResult`."""
    try:
        return (yield from flow)
    except StepFailure as exc:
        return failed(exc.reason)
    except TransTrustError as exc:
        return failed(reason_for(exc))


def _as_step(result) -> StepResult:
    if isinstance(result, StepResult):
        return result
    if isinstance(result, BaseException):
        return failed(reason_for(result))
    return failed("policy")


def _scan_subjects(data: bytes, names: set[str], depth: int = 0) -> None:
    try:
        fields = decode_fields(data)
    except CodecError:
        return
    for key, value in fields.items():
        if key == "subject":
            try:
                names.add(to_str(value))
            except CodecError:
                pass
        elif depth < 4:
            _scan_subjects(value, names, depth + 1)


def identities_visible_to(entries: Iterable[Envelope], actor, phases=(STEP_A_PHASE, STEP_B_PHASE)) -> frozenset[str]:
    """Agent names appearing in plaintext fields of step envelopes ``actor`` sends or receives."""
    names: set[str] = set()
    for env in entries:
        if env.phase in phases and actor in (env.sender, env.receiver) and env.plaintext is not None:
            _scan_subjects(env.plaintext, names)
    return frozenset(names)


def transpose(
    world: World,
    p: Parties,
    privacy: str = ENCRYPTED,
    *,
    interleave: bool = False,
    secondary_challenge: bool = False,
) -> TranspositionOutcome:
    """Set up the channels in ``p`` and run both steps; ``p`` keeps the sessions afterwards."""
    if privacy not in PRIVACY_MODES:
        raise ValueError(f"unknown privacy mode {privacy!r}")
    fabric = world.fabric
    first = len(world.transcript.entries)

    fabric.start_run()
    setup = run_flows(fabric, {SETUP_PHASE: setup_flow(world, p)})[SETUP_PHASE]
    if isinstance(setup, BaseException):
        reason = reason_for(setup)
        step_a = step_b = failed(reason)
    elif interleave:
        fabric.start_run()
        results = run_flows(fabric, {
            STEP_A_PHASE: _guarded(step_a_flow(world, p)),
            STEP_B_PHASE: _guarded(step_b_flow(world, p, privacy, secondary_challenge)),
        })
        step_a, step_b = _as_step(results[STEP_A_PHASE]), _as_step(results[STEP_B_PHASE])
    else:
        fabric.start_run()
        step_a = _as_step(run_flows(fabric, {STEP_A_PHASE: _guarded(step_a_flow(world, p))})[STEP_A_PHASE])
        if step_a.accepted:
            fabric.start_run()
            step_b = _as_step(run_flows(fabric, {
                STEP_B_PHASE: _guarded(step_b_flow(world, p, privacy, secondary_challenge)),
            })[STEP_B_PHASE])
        else:
            step_b = failed("aborted")
    view = identities_visible_to(world.transcript.entries[first:], p.A.id)
    return TranspositionOutcome(step_a, step_b, view)


def run_transposition(
    world: World,
    A: Principal,
    a: Device,
    B: Principal,
    b: Device,
    privacy: str = ENCRYPTED,
    *,
    interleave: bool = False,
    secondary_challenge: bool = False,
) -> TranspositionOutcome:
    return transpose(world, Parties(A, a, B, b), privacy, interleave=interleave,
                     secondary_challenge=secondary_challenge)
