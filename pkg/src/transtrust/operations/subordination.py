"""Subordination: a dominating agent opens its principal's domain to a device without direct access.

Message order (principal P, dominator D, subordinate S)::

    channel D->P with domain log-on and attestation            (8 envelopes)
    SigmaPresent D->P, AuthAck P->D                            (P confirms D may dominate)
    mutually attested channel S->D                             (9 envelopes)
    SigmaPresent S->D, SigmaPresent D->S
    ChannelAttest D->S, QuoteL3 S->D                           (dedicated-credential backing only)
    ServiceRequest S->D
    AuthRequest D->P, AuthAck P->D                             (forward variant only)
    ServiceGrant | ServiceDeny D->S
"""

from __future__ import annotations

from transtrust import crypto_prims as cp
from transtrust import tpm_sim
from transtrust.channels import Kind, Send, run_flows
from transtrust.credentials import (
    DEDICATED_GAMMA_SLOT,
    DOMINATOR,
    SUBORDINATE,
    GammaBacking,
    SubordinationCredential,
    TauBacking,
)
from transtrust.encoding import encode_fields, to_str
from transtrust.errors import ChannelRefused, CodecError, PolicyMismatch, SlotEmpty, TransTrustError
from transtrust.handshake import channel_flow, credential_flow, fields_of
from transtrust.operations.outcomes import BASE, AccessDecision, reason_for
from transtrust.world import Device, Principal, World

FORWARD = "forward"
LOCAL_GRANT = "local_grant"
VARIANTS = (FORWARD, LOCAL_GRANT)


class _Denied(TransTrustError):
    """Internal: an in-band refusal with a decision reason."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(detail or reason)
        self.reason = reason


def _sigma_of(d, issuer_public: bytes | None) -> SubordinationCredential:
    raw = fields_of(d, "sigma")["sigma"]
    if not raw:
        d.reject("missing_credential")
        raise _Denied("policy", "no subordination credential presented")
    try:
        sigma = SubordinationCredential.decode(raw)
    except CodecError as exc:
        d.reject("malformed")
        raise ChannelRefused("malformed", str(exc)) from exc
    if issuer_public is None or not sigma.verify(issuer_public):
        d.reject("signature_invalid")
        raise _Denied("policy", "subordination credential does not verify")
    return sigma


def _verdict(d) -> tuple[str, str]:
    f = fields_of(d, "verdict", "reason")
    return to_str(f["verdict"]), to_str(f["reason"])


def _ack(session, sender, receiver, verdict: str, reason: str):
    body = encode_fields({"verdict": verdict, "reason": reason})
    return (yield Send(session, sender.id, receiver.id, Kind.AUTH_ACK, body))


def _authorise_at_principal(world: World, principal: Principal, sigma: SubordinationCredential,
                            service: str, attested_key: bytes | None) -> str:
    """The principal's decision on a forwarded request; returns a decision reason."""
    if sigma.scope != SUBORDINATE or sigma.issuer != principal.name:
        return "policy"
    if not sigma.verify(principal.authority.public):
        return "policy"
    backing = sigma.backing
    key = backing.tpm_key_id if isinstance(backing, TauBacking) else backing.attestation_key_id
    if key in world.revoked:
        return "revoked"
    if key != attested_key:
        return "policy"
    if isinstance(backing, GammaBacking):
        stored = principal.registry.gamma_index.get(backing.serial)
        if stored is None or stored.agent != sigma.holder or cp.hash(stored.encode()) != backing.credential_digest:
            return "policy"
    if service not in sigma.granted_services:
        return "policy"
    return "ok"


def _subordination(world, principal, dominator, subordinate, service, variant, state):
    # Dominator logs on to its principal and proves it holds a dominator credential.
    upstream = yield from channel_flow(world, dominator, principal, logon=True)
    d = yield Send(upstream, dominator.id, principal.id, Kind.SIGMA_PRESENT,
                   encode_fields({"sigma": dominator.sigma.encode() if dominator.sigma else b""}))
    sigma_d = _sigma_of(d, principal.authority.public)
    ok = (
        sigma_d.scope == DOMINATOR
        and sigma_d.holder == dominator.id
        and isinstance(sigma_d.backing, TauBacking)
        and sigma_d.backing.tpm_key_id == upstream.attested_keys.get(dominator.id)
    )
    d = yield from _ack(upstream, principal, dominator, "grant" if ok else "deny", "ok" if ok else "policy")
    verdict, reason = _verdict(d)
    if verdict != "grant":
        raise _Denied(reason, "principal refused the dominator credential")

    # Mutually attested local channel; the subordinate initiates.
    local = yield from channel_flow(world, subordinate, dominator, mutual=True)
    state["local"] = local
    d = yield Send(local, subordinate.id, dominator.id, Kind.SIGMA_PRESENT,
                   encode_fields({"sigma": subordinate.sigma.encode() if subordinate.sigma else b""}))
    sigma_s = _sigma_of(d, dominator.verifier.trusted_issuers.get(dominator.id.domain))
    bonding = subordinate.sigma.issuer if subordinate.sigma else None
    d = yield Send(local, dominator.id, subordinate.id, Kind.SIGMA_PRESENT,
                   encode_fields({"sigma": dominator.sigma.encode() if dominator.sigma else b""}))
    seen = _sigma_of(d, subordinate.verifier.trusted_issuers.get(bonding))
    if seen.scope != DOMINATOR or seen.holder != dominator.id or seen.issuer != bonding:
        raise _Denied("policy", "dominator is not bonded to the subordinate's principal")
    if sigma_s.scope != SUBORDINATE or sigma_s.holder != subordinate.id:
        raise _Denied("policy", "not a subordinate credential for this device")

    backing = sigma_s.backing
    if isinstance(backing, TauBacking):
        if backing.tpm_key_id != local.attested_keys.get(subordinate.id):
            raise _Denied("policy", "trust-credential backing does not match the attested key")
    else:
        if backing.attestation_key_id != local.attested_keys.get(subordinate.id):
            raise _Denied("policy", "dedicated credential is bound to another attestation key")
        try:
            dedicated = tpm_sim.unseal(subordinate.tpm, DEDICATED_GAMMA_SLOT)
        except (SlotEmpty, PolicyMismatch):
            dedicated = b""
        yield from credential_flow(world, local, subordinate, dominator, dedicated,
                                   {backing.credential_digest: "dedicated"})

    d = yield Send(local, subordinate.id, dominator.id, Kind.SERVICE_REQUEST, encode_fields({"service": service}))
    requested = to_str(fields_of(d, "service")["service"])

    if variant == FORWARD:
        d = yield Send(upstream, dominator.id, principal.id, Kind.AUTH_REQUEST, encode_fields({
            "sigma": sigma_s.encode(),
            "service": requested,
            "attested_key": local.attested_keys[subordinate.id],
        }))
        f = fields_of(d, "sigma", "service", "attested_key")
        try:
            forwarded = SubordinationCredential.decode(f["sigma"])
        except CodecError as exc:
            d.reject("malformed")
            raise ChannelRefused("malformed", str(exc)) from exc
        reason = _authorise_at_principal(world, principal, forwarded, to_str(f["service"]), f["attested_key"])
        d = yield from _ack(upstream, principal, dominator, "grant" if reason == "ok" else "deny", reason)
        verdict, reason = _verdict(d)
    else:
        reason = "ok" if requested in sigma_s.granted_services else "policy"
    decision = AccessDecision.grant(subordinate.id, BASE) if reason == "ok" else AccessDecision.deny(subordinate.id, reason)
    yield from _reply(local, dominator, subordinate, decision)
    return decision


def _reply(session, dominator: Device, subordinate: Device, decision: AccessDecision):
    kind = Kind.SERVICE_GRANT if decision.granted else Kind.SERVICE_DENY
    body = encode_fields({"verdict": decision.verdict, "reason": decision.reason})
    yield Send(session, dominator.id, subordinate.id, kind, body)


def subordination_flow(world, principal, dominator, subordinate, service, variant=FORWARD):
    if variant not in VARIANTS:
        raise ValueError(f"unknown subordination variant {variant!r}")
    state = {"local": None}
    try:
        decision = yield from _subordination(world, principal, dominator, subordinate, service, variant, state)
    except TransTrustError as exc:
        reason = exc.reason if isinstance(exc, _Denied) else reason_for(exc)
        decision = AccessDecision.deny(subordinate.id, reason)
        local = state["local"]
        if local is not None and local.established and isinstance(exc, (_Denied, ChannelRefused)):
            try:
                yield from _reply(local, dominator, subordinate, decision)
            except TransTrustError:
                pass
    world.record_decision(decision, None, subordinate.aik.key_id)
    return decision


def run_subordination(
    world: World,
    principal: Principal,
    dominator: Device,
    subordinate: Device,
    service: str,
    variant: str = FORWARD,
) -> AccessDecision:
    world.fabric.start_run()
    flow = subordination_flow(world, principal, dominator, subordinate, service, variant)
    result = run_flows(world.fabric, {"subordination": flow})["subordination"]
    if isinstance(result, BaseException):
        return AccessDecision.deny(subordinate.id, reason_for(result))
    return result
