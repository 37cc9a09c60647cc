"""Restriction: a privileged subgroup of a principal's agents, recognised by trust credentials.

Message order (device D, principal P)::

    ChannelHello x2, GammaAuth P->D, GammaAuth D->P, ChannelAccept P->D
    TauPresent D->P, ChannelAttest P->D, QuoteL1 D->P, QuoteL2 D->P   (only with a trust credential)
    ChannelAttest P->D, QuoteL3 D->P                                (only with an attested claim)
    ServiceRequest D->P, ServiceGrant | ServiceDeny P->D

After a privileged grant, further claims reuse the session (:func:`claim_flow`)::

    ChannelAttest P->D, QuoteL3 D->P, ServiceRequest D->P, ServiceGrant | ServiceDeny P->D
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from transtrust import crypto_prims as cp
from transtrust import tpm_sim
from transtrust.channels import Kind, Send, run_flows
from transtrust.credentials import (
    GROUP_SECRET_SLOT,
    DomainCredential,
    TauPresentation,
    TrustCredential,
    verify_tau,
)
from transtrust.encoding import encode_fields, pack
from transtrust.errors import ChannelRefused, CodecError, PolicyMismatch, SlotEmpty, TransTrustError
from transtrust.handshake import attest_flow, channel_flow, credential_flow, fields_of
from transtrust.operations.outcomes import BASE, PRIVILEGED, AccessDecision, reason_for
from transtrust.world import Device, Principal, World

ACL = "acl"
SHARED_SECRET = "shared_secret"
VARIANTS = (ACL, SHARED_SECRET)


@dataclass(frozen=True)
class Claim:
    """A statement produced by the device's trusted software and vouched for by a level-3 quote.

    ``check`` runs at the principal on the received bytes; ``on_grant`` runs on
    the device once it has received the grant.
    """

    data: bytes
    check: Callable[[bytes], bool]
    on_grant: Optional[Callable[[], None]] = None


def group_proof(secret: bytes, binding: bytes) -> bytes:
    return cp.mac(secret, pack(b"group-proof", binding))


def _respond(session, principal: Principal, device: Device, decision: AccessDecision):
    kind = Kind.SERVICE_GRANT if decision.granted else Kind.SERVICE_DENY
    body = encode_fields({"verdict": decision.verdict, "privilege": decision.privilege, "reason": decision.reason})
    return (yield Send(session, principal.id, device.id, kind, body))


def _decide(world: World, principal: Principal, session, device: Device, presented: TauPresentation,
            serial: int, variant: str, proof: bytes) -> AccessDecision:
    registry = principal.registry
    deny = lambda reason: AccessDecision.deny(device.id, reason)  # noqa: E731
    known = registry.resolve_tau(presented)
    if known is None or session.attested_keys.get(device.id) != presented.tpm_key_id:
        return deny("policy")
    issuer_public = principal.verifier.trusted_issuers.get(known.issuer)
    if issuer_public is None or not verify_tau(presented, known.subject.name, issuer_public):
        return deny("policy")
    if variant == ACL:
        if presented.tpm_key_id not in registry.acl:
            return deny("policy")
    else:
        group = registry.shared_group_secret
        if group is None or not cp.mac_verify(group.key, pack(b"group-proof", session.bindings[principal.id]), proof):
            return deny("policy")
    linked = registry.associate(presented)
    if linked is not None:
        if linked != serial:
            return deny("clone_detected")
    elif not registry.first_come_first_served(serial, presented.tpm_key_id):
        return deny("clone_detected")
    return AccessDecision.grant(device.id, PRIVILEGED)


def _restriction(world, principal, device, gamma, tau, variant, service, claim, state):
    session = yield from channel_flow(world, device, principal, logon=True, attest=False, gamma=gamma)
    state["session"] = session
    serial = session.gamma_serials[device.id]

    if tau is None:
        d = yield Send(session, device.id, principal.id, Kind.SERVICE_REQUEST, encode_fields({"service": service}))
        fields_of(d, "service")
        decision = AccessDecision.grant(device.id, BASE)
        yield from _respond(session, principal, device, decision)
        world.record_decision(decision, serial, None)
        return decision

    d = yield Send(session, device.id, principal.id, Kind.TAU_PRESENT, encode_fields({"tau": tau.encode()}))
    try:
        presented = TauPresentation.decode(fields_of(d, "tau")["tau"])
    except CodecError as exc:
        d.reject("malformed")
        raise ChannelRefused("malformed", str(exc)) from exc
    yield from attest_flow(world, session, device, principal)

    claim_ok = True
    if claim is not None:
        _, fields = yield from credential_flow(
            world, session, device, principal, claim.data,
            lambda f: {cp.hash(f.get("claim", b"")): "claim"}, extra={"claim": claim.data},
        )
        claim_ok = claim.check(fields["claim"])

    proof = b""
    if variant == SHARED_SECRET:
        try:
            secret = tpm_sim.unseal(device.tpm, GROUP_SECRET_SLOT)
            proof = group_proof(secret, session.bindings[device.id])
        except (SlotEmpty, PolicyMismatch):
            proof = b""
    d = yield Send(session, device.id, principal.id, Kind.SERVICE_REQUEST,
                   encode_fields({"service": service, "group_proof": proof}))
    f = fields_of(d, "service", "group_proof")

    decision = _decide(world, principal, session, device, presented, serial, variant, f["group_proof"])
    # Membership stands on its own; an unmet claim only withholds this particular service.
    state["member"] = decision.granted
    if decision.granted and not claim_ok:
        decision = AccessDecision.deny(device.id, "policy")
    # Recorded once delivered: an answer lost on the way decides nothing.
    yield from _respond(session, principal, device, decision)
    world.record_decision(decision, serial, presented.tpm_key_id)
    if decision.granted and claim is not None and claim.on_grant is not None:
        claim.on_grant()
    return decision


def restriction_flow(
    world: World,
    principal: Principal,
    device: Device,
    gamma: Optional[DomainCredential] = None,
    tau: Optional[TrustCredential] = None,
    variant: str = ACL,
    *,
    service: str = "network",
    claim: Optional[Claim] = None,
    state: Optional[dict] = None,
):
    """``state["session"]`` is set to the restriction session once it exists, and
    ``state["member"]`` to whether the agent was recognised as privileged."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown restriction variant {variant!r}")
    state = {} if state is None else state
    state["session"] = None
    state["member"] = False
    try:
        return (yield from _restriction(world, principal, device, gamma, tau, variant, service, claim, state))
    except TransTrustError as exc:
        decision = AccessDecision.deny(device.id, reason_for(exc))
        state["member"] = False
        session = state["session"]
        world.record_decision(decision, session.gamma_serials.get(device.id) if session else None, None)
        # An in-band refusal leaves the channel intact, so the principal can still say why.
        if session is not None and session.established and isinstance(exc, ChannelRefused) and exc.reason != "malformed":
            try:
                yield from _respond(session, principal, device, decision)
            except TransTrustError:
                pass
        return decision


def run_restriction(
    world: World,
    principal: Principal,
    agent: Device,
    gamma: Optional[DomainCredential] = None,
    tau: Optional[TrustCredential] = None,
    variant: str = ACL,
    *,
    service: str = "network",
    claim: Optional[Claim] = None,
    state: Optional[dict] = None,
) -> AccessDecision:
    """One restriction request by ``agent`` presenting ``gamma`` (default: its own) and ``tau``."""
    world.fabric.start_run()
    flow = restriction_flow(world, principal, agent, gamma, tau, variant, service=service, claim=claim, state=state)
    result = run_flows(world.fabric, {"restriction": flow})["restriction"]
    if isinstance(result, BaseException):
        return AccessDecision.deny(agent.id, reason_for(result))
    return result


def claim_flow(world: World, principal: Principal, device: Device, session, claim: Claim, *, service: str = "network"):
    """A further attested claim over a session that already earned a privileged grant.

    The level-3 quote re-proves platform integrity, so drift since the grant is caught here.
    """
    try:
        _, fields = yield from credential_flow(
            world, session, device, principal, claim.data,
            lambda f: {cp.hash(f.get("claim", b"")): "claim"}, extra={"claim": claim.data},
        )
        d = yield Send(session, device.id, principal.id, Kind.SERVICE_REQUEST, encode_fields({"service": service}))
        fields_of(d, "service")
    except TransTrustError as exc:
        decision = AccessDecision.deny(device.id, reason_for(exc))
        world.record_decision(decision, session.gamma_serials.get(device.id), session.attested_keys.get(device.id))
        if isinstance(exc, ChannelRefused) and exc.reason != "malformed":
            try:
                yield from _respond(session, principal, device, decision)
            except TransTrustError:
                pass
        return decision
    if claim.check(fields["claim"]):
        decision = AccessDecision.grant(device.id, PRIVILEGED)
    else:
        decision = AccessDecision.deny(device.id, "policy")
    try:
        yield from _respond(session, principal, device, decision)
    except TransTrustError as exc:
        decision = AccessDecision.deny(device.id, reason_for(exc))
    world.record_decision(decision, session.gamma_serials.get(device.id), session.attested_keys.get(device.id))
    if decision.granted and claim.on_grant is not None:
        claim.on_grant()
    return decision


def run_claim(world: World, principal: Principal, device: Device, session, claim: Claim, *,
              service: str = "network") -> AccessDecision:
    world.fabric.start_run()
    result = run_flows(world.fabric, {"claim": claim_flow(world, principal, device, session, claim, service=service)})
    result = result["claim"]
    if isinstance(result, BaseException):
        return AccessDecision.deny(device.id, reason_for(result))
    return result
