"""A simulated world: the seeded RNG, the fabric, principals and TPM devices.

Everything random in a run is drawn from the world's single :class:`SeededRng`
in a fixed order, which is what makes transcripts reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from transtrust import crypto_prims as cp
from transtrust import tpm_sim
from transtrust.channels import DEFAULT_STEP_BUDGET, AdversaryAction, Fabric, Session
from transtrust.credentials import (
    DomainCredential,
    DomainRegistry,
    SubordinationCredential,
    TrustCredential,
    ActorId,
    agent_id,
    principal_id,
)
from transtrust.encoding import pack
from transtrust.errors import TransTrustError

MANUFACTURER = "tpm-vendor"

# Boot chain per device class: (pcr index, component) in boot order.
DEVICE_SOFTWARE: dict[str, tuple[tuple[int, str], ...]] = {
    "phone": ((0, "phone-boot-rom 1.4"), (1, "phone-os 11.2"), (2, "trusted-wallet 2.1")),
    "pos": ((0, "pos-boot-rom 3.0"), (1, "pos-firmware 7.7"), (2, "vending-app 1.9")),
    "camera": ((0, "camera-boot 2.2"), (1, "camera-firmware 5.0"), (2, "bonding-agent 1.1")),
}
ROGUE_COMPONENT = "rogue-patch 0.1"


def measurement(component: str) -> bytes:
    return cp.hash(component.encode())


@dataclass
class Principal:
    id: ActorId
    authority: tpm_sim.Authority
    dh_secret: object = field(repr=False)
    dh_public: bytes
    registry: DomainRegistry = field(repr=False)
    verifier: tpm_sim.QuoteVerifier = field(repr=False)
    logons: dict[ActorId, Session] = field(default_factory=dict, repr=False)

    @property
    def name(self) -> str:
        return self.id.name


@dataclass
class Device:
    id: ActorId
    device_class: str
    tpm: tpm_sim.TpmState = field(repr=False)
    aik: tpm_sim.AttestationKey = field(repr=False)
    verifier: tpm_sim.QuoteVerifier = field(repr=False)
    gamma: Optional[DomainCredential] = None
    tau: Optional[TrustCredential] = None
    sigma: Optional[SubordinationCredential] = None
    selection: tuple[int, ...] = tpm_sim.DEFAULT_SELECTION

    @property
    def name(self) -> str:
        return self.id.name


Node = Union[Principal, Device]


class World:
    def __init__(self, seed: int = 42, script: Iterable[AdversaryAction] = (), step_budget: int = DEFAULT_STEP_BUDGET):
        self.seed = seed
        self.rng = cp.SeededRng(seed)
        self.script = tuple(script)
        self.fabric = Fabric(seed, self.script, step_budget)
        self.manufacturer = tpm_sim.create_authority(MANUFACTURER, self.rng)
        self.principals: dict[str, Principal] = {}
        self.devices: dict[str, Device] = {}
        self.golden: dict[str, bytes] = {}
        self.revoked: set[bytes] = set()
        # (subject name, gamma serial, tpm key id or None, verdict, privilege, reason)
        self.decisions: list[tuple] = []
        self._backbones: dict[frozenset, Session] = {}
        self._request_count = 0

    @property
    def transcript(self):
        return self.fabric.transcript

    def next_request_id(self) -> bytes:
        self._request_count += 1
        return self._request_count.to_bytes(8, "big")

    def _trusted_issuers(self) -> dict[str, bytes]:
        issuers = {MANUFACTURER: self.manufacturer.public}
        issuers.update({p.name: p.authority.public for p in self.principals.values()})
        return issuers

    def _verifier(self) -> tpm_sim.QuoteVerifier:
        return tpm_sim.QuoteVerifier(self._trusted_issuers(), self.revoked)

    def add_principal(self, name: str) -> Principal:
        if name in self.principals or name in self.devices:
            raise TransTrustError(f"actor name {name!r} already in use")
        pid = principal_id(name)
        authority = tpm_sim.create_authority(name, self.rng)
        dh_secret, dh_public = cp.dh_keygen(self.rng)
        registry = DomainRegistry(pid, authority, self.rng)
        principal = Principal(pid, authority, dh_secret, dh_public, registry, self._verifier())
        self.principals[name] = principal
        for node in list(self.principals.values()) + list(self.devices.values()):
            node.verifier.trusted_issuers[name] = authority.public
        return principal

    def add_device(self, name: str, domain: str, device_class: str) -> Device:
        if name in self.principals or name in self.devices:
            raise TransTrustError(f"actor name {name!r} already in use")
        if device_class not in DEVICE_SOFTWARE:
            raise TransTrustError(f"unknown device class {device_class!r}")
        tpm = tpm_sim.tpm_create(self.rng, self.manufacturer)
        for index, component in DEVICE_SOFTWARE[device_class]:
            tpm_sim.pcr_extend(tpm, index, measurement(component))
        self.golden.setdefault(device_class, tpm_sim.pcr_digest(tpm.pcr_bank))
        aik = tpm_sim.create_attestation_key(tpm, self.rng, self.manufacturer)
        device = Device(agent_id(name, domain), device_class, tpm, aik, self._verifier())
        self.devices[name] = device
        return device

    def node(self, actor: ActorId | str) -> Node:
        name = actor if isinstance(actor, str) else actor.name
        if name in self.principals:
            return self.principals[name]
        return self.devices[name]

    def references(self, verifier: Node, subject: Node) -> set[bytes]:
        """Known-good PCR digests ``verifier`` accepts for ``subject``.

        A principal uses the value it recorded when enrolling the subject;
        everyone else falls back to the published known-good catalogue.
        """
        if isinstance(verifier, Principal):
            recorded = verifier.registry.reference_pcrs.get(subject.id)
            if recorded is not None:
                return {recorded}
        return set(self.golden.values())

    def rogue_extend(self, device: Device, index: int = 2) -> bytes:
        return tpm_sim.pcr_extend(device.tpm, index, measurement(ROGUE_COMPONENT))

    def revoke(self, device: Device, key_id: bytes) -> None:
        tpm_sim.revoke_key(device.tpm, key_id)
        self.revoked.add(key_id)

    def backbone(self, a: Principal, b: Principal) -> Session:
        """Standing principal-to-principal link, keyed from both static DH keys."""
        pair = frozenset((a.name, b.name))
        if pair not in self._backbones:
            first, second = sorted((a, b), key=lambda p: p.name)
            context = pack(first.dh_public, second.dh_public)
            keys = {
                first.id: cp.dh_derive(first.dh_secret, second.dh_public, "transport", context),
                second.id: cp.dh_derive(second.dh_secret, first.dh_public, "transport", context),
            }
            sid = f"backbone:{first.name}-{second.name}"
            session = Session(sid, (first.id, second.id), keys)
            session.established = True
            self._backbones[pair] = session
        return self._backbones[pair]

    def record_decision(self, decision, serial: Optional[int], tpm_key_id: Optional[bytes]) -> None:
        self.decisions.append(
            (decision.subject.name, serial, tpm_key_id, decision.verdict, decision.privilege, decision.reason)
        )

    def check_pcr_replay(self) -> bool:
        return all(
            tpm_sim.replay_measurements(d.tpm.measurement_log) == d.tpm.pcr_bank for d in self.devices.values()
        )
