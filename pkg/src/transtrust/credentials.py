"""Domain, trust and subordination credentials and the principal-side registry."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from transtrust import crypto_prims as cp
from transtrust import tpm_sim
from transtrust.encoding import decode_fields, encode_fields, pack, require, to_int, to_str, unpack
from transtrust.errors import CodecError, CredentialError

PRINCIPAL = "principal"
AGENT = "agent"

PRINCIPAL_CONTROLLED = "principal_controlled"
INDEPENDENT = "independent"
ENROLMENT_MODES = (PRINCIPAL_CONTROLLED, INDEPENDENT)

DOMINATOR = "dominator"
SUBORDINATE = "subordinate"

GROUP_SECRET_SLOT = "group_secret"
DEDICATED_GAMMA_SLOT = "dedicated_gamma"


@dataclass(frozen=True, order=True)
class ActorId:
    kind: str
    name: str
    domain: Optional[str] = None

    def __post_init__(self):
        if self.kind not in (PRINCIPAL, AGENT):
            raise ValueError(f"unknown actor kind {self.kind!r}")
        if self.kind == PRINCIPAL and self.domain is not None:
            raise ValueError("principals have no domain")
        if self.kind == AGENT and not self.domain:
            raise ValueError("agents need an owning principal")
        # identities key most of the fabric's dictionaries
        object.__setattr__(self, "_hash", hash((self.kind, self.name, self.domain)))

    def __hash__(self):
        return self._hash

    def __str__(self):
        return self.name


def principal_id(name: str) -> ActorId:
    return ActorId(PRINCIPAL, name)


def agent_id(name: str, domain: str) -> ActorId:
    return ActorId(AGENT, name, domain)


# -- domain credentials -----------------------------------------------------


@dataclass(frozen=True)
class DomainCredential:
    agent: ActorId
    principal: ActorId
    secret: bytes = field(repr=False)
    serial: int

    def encode(self) -> bytes:
        """Byte image of the credential as stored on the device (level-3 quotes hash this)."""
        return pack(b"GAMMA", self.agent.name.encode(), self.principal.name.encode(),
                    self.serial.to_bytes(8, "big"), self.secret)

    @classmethod
    def decode(cls, data: bytes, domain_of_agent: str | None = None) -> DomainCredential:
        try:
            tag, agent, principal, serial, secret = unpack(data)
        except ValueError as exc:
            raise CodecError(f"malformed domain credential: {exc}") from exc
        if tag != b"GAMMA":
            raise CodecError("not a domain credential")
        p = to_str(principal)
        return cls(agent_id(to_str(agent), domain_of_agent or p), principal_id(p), secret, to_int(serial))


def clone_credential(gamma: DomainCredential) -> DomainCredential:
    """Adversarial copy: same secret and serial, installed on a different device."""
    return dataclasses.replace(gamma)


def gamma_response(gamma: DomainCredential, challenge: bytes) -> bytes:
    return cp.mac(gamma.secret, pack(b"gamma-auth", challenge, gamma.serial.to_bytes(8, "big")))


# -- trust credentials ------------------------------------------------------


def tau_statement(tpm_key_id: bytes, subject: str) -> bytes:
    return pack(b"TAU", tpm_key_id, subject.encode())


@dataclass(frozen=True)
class TrustCredential:
    tpm_key_id: bytes
    subject: ActorId
    issuer_cert: bytes
    enrolment_mode: str
    issuer: str
    public_key: bytes

    def encode(self, include_subject: bool = True) -> bytes:
        """Wire form. Without the subject the credential is a pseudonymous handle that
        only a registry holding the association can resolve back to an agent."""
        fields = {
            "key_id": self.tpm_key_id,
            "public": self.public_key,
            "issuer": self.issuer,
            "mode": self.enrolment_mode,
            "cert": self.issuer_cert,
        }
        if include_subject:
            fields["subject"] = self.subject.name
            fields["subject_domain"] = self.subject.domain or ""
        return encode_fields(fields)


@dataclass(frozen=True)
class TauPresentation:
    """A trust credential as received off the wire; ``subject`` may be withheld."""

    tpm_key_id: bytes
    public_key: bytes
    issuer: str
    enrolment_mode: str
    issuer_cert: bytes
    subject: Optional[ActorId] = None

    @classmethod
    def decode(cls, data: bytes) -> TauPresentation:
        f = decode_fields(data)
        key_id, public, issuer, mode, cert = require(f, "key_id", "public", "issuer", "mode", "cert")
        subject = None
        if "subject" in f:
            subject = agent_id(to_str(f["subject"]), to_str(f.get("subject_domain", b"")) or "?")
        if cp.hash(public) != key_id:
            raise CodecError("trust credential key id does not match its public key")
        return cls(key_id, public, to_str(issuer), to_str(mode), cert, subject)

    def encode(self, include_subject: bool = True) -> bytes:
        fields = {
            "key_id": self.tpm_key_id,
            "public": self.public_key,
            "issuer": self.issuer,
            "mode": self.enrolment_mode,
            "cert": self.issuer_cert,
        }
        if include_subject and self.subject is not None:
            fields["subject"] = self.subject.name
            fields["subject_domain"] = self.subject.domain or ""
        return encode_fields(fields)


def verify_tau(presented: TauPresentation | TrustCredential, subject: str, issuer_public: bytes) -> bool:
    return cp.verify(issuer_public, tau_statement(presented.tpm_key_id, subject), presented.issuer_cert)


# -- subordination credentials ----------------------------------------------


@dataclass(frozen=True)
class TauBacking:
    tpm_key_id: bytes

    def encode(self) -> bytes:
        return pack(b"tau", self.tpm_key_id)


@dataclass(frozen=True)
class GammaBacking:
    serial: int
    credential_digest: bytes
    attestation_key_id: bytes

    def encode(self) -> bytes:
        return pack(b"gamma", self.serial.to_bytes(8, "big"), self.credential_digest, self.attestation_key_id)


Backing = Union[TauBacking, GammaBacking]


def _decode_backing(data: bytes) -> Backing:
    parts = unpack(data)
    if parts and parts[0] == b"tau" and len(parts) == 2:
        return TauBacking(parts[1])
    if parts and parts[0] == b"gamma" and len(parts) == 4:
        return GammaBacking(to_int(parts[1]), parts[2], parts[3])
    raise CodecError("malformed subordination backing")


@dataclass(frozen=True)
class SubordinationCredential:
    holder: ActorId
    scope: str
    granted_services: frozenset[str]
    backing: Backing
    issuer: str
    signature: bytes = b""

    def statement(self) -> bytes:
        return pack(
            b"SIGMA",
            self.holder.name.encode(),
            (self.holder.domain or "").encode(),
            self.scope.encode(),
            ",".join(sorted(self.granted_services)).encode(),
            self.backing.encode(),
            self.issuer.encode(),
        )

    def encode(self) -> bytes:
        return encode_fields({"statement": self.statement(), "signature": self.signature})

    @classmethod
    def decode(cls, data: bytes) -> SubordinationCredential:
        statement, signature = require(decode_fields(data), "statement", "signature")
        try:
            tag, holder, domain, scope, services, backing, issuer = unpack(statement)
        except ValueError as exc:
            raise CodecError(f"malformed subordination credential: {exc}") from exc
        if tag != b"SIGMA":
            raise CodecError("not a subordination credential")
        names = to_str(services)
        return cls(
            agent_id(to_str(holder), to_str(domain)),
            to_str(scope),
            frozenset(names.split(",")) if names else frozenset(),
            _decode_backing(backing),
            to_str(issuer),
            signature,
        )

    def verify(self, issuer_public: bytes) -> bool:
        return cp.verify(issuer_public, self.statement(), self.signature)


# -- registry ---------------------------------------------------------------


@dataclass
class DomainRegistry:
    """A principal's view of its authentication domain.

    ``seen_serials`` maps a domain-credential serial to the first trust-credential
    key that claimed it; entries are never overwritten.
    """

    owner: ActorId
    authority: tpm_sim.Authority
    rng: cp.SeededRng = field(repr=False)
    gamma_index: dict[int, DomainCredential] = field(default_factory=dict)
    tau_to_gamma: dict[bytes, int] = field(default_factory=dict)
    taus: dict[bytes, TrustCredential] = field(default_factory=dict)
    reference_pcrs: dict[ActorId, bytes] = field(default_factory=dict)
    acl: set[bytes] = field(default_factory=set)
    seen_serials: dict[int, bytes] = field(default_factory=dict)
    shared_group_secret: Optional[cp.SharedSecret] = None
    sigmas: list[SubordinationCredential] = field(default_factory=list)
    _clock: int = 0
    _gamma_tick: dict[int, int] = field(default_factory=dict)
    _tau_tick: dict[bytes, int] = field(default_factory=dict)

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def _require_member(self, agent: ActorId) -> None:
        if agent.kind != AGENT or agent.domain != self.owner.name:
            raise CredentialError(f"{agent.name} is not an agent of {self.owner.name}'s domain")

    def gamma_of(self, agent: ActorId) -> Optional[DomainCredential]:
        for gamma in self.gamma_index.values():
            if gamma.agent == agent:
                return gamma
        return None

    def issue_domain_credential(self, agent: ActorId) -> DomainCredential:
        self._require_member(agent)
        if self.gamma_of(agent) is not None:
            raise CredentialError(f"{agent.name} already holds a domain credential")
        serial = len(self.gamma_index) + 1
        gamma = DomainCredential(agent, self.owner, self.rng.bytes(cp.KEY_SIZE), serial)
        self.gamma_index[serial] = gamma
        self._gamma_tick[serial] = self._tick()
        return gamma

    def enroll_trust_credential(
        self,
        tpm: tpm_sim.TpmState,
        agent: ActorId,
        mode: str,
        aik: tpm_sim.AttestationKey,
        *,
        neutral_authority: Optional[tpm_sim.Authority] = None,
        selection: Iterable[int] = tpm_sim.DEFAULT_SELECTION,
    ) -> TrustCredential:
        if mode not in ENROLMENT_MODES:
            raise CredentialError(f"unknown enrolment mode {mode!r}")
        if aik.key_id not in tpm.attestation_keys:
            raise CredentialError("attestation key does not belong to this TPM")
        self._require_member(agent)
        if mode == PRINCIPAL_CONTROLLED:
            gamma = self.gamma_of(agent)
            if gamma is None:
                raise CredentialError("principal-controlled enrolment needs a prior domain credential")
            certifier = self.authority
        else:
            if neutral_authority is None:
                raise CredentialError("independent enrolment needs a neutral certifying authority")
            certifier = neutral_authority
        tau = TrustCredential(
            tpm_key_id=aik.key_id,
            subject=agent,
            issuer_cert=certifier.certify(tau_statement(aik.key_id, agent.name)),
            enrolment_mode=mode,
            issuer=certifier.name,
            public_key=aik.public,
        )
        self.taus[aik.key_id] = tau
        self.acl.add(aik.key_id)
        self._tau_tick[aik.key_id] = self._tick()
        if mode == PRINCIPAL_CONTROLLED:
            self.tau_to_gamma[aik.key_id] = gamma.serial
            self.reference_pcrs[agent] = tpm_sim.pcr_digest(tpm.pcr_bank, selection)
        return tau

    def distribute_group_secret(self, tpm: tpm_sim.TpmState, selection: Iterable[int] = tpm_sim.DEFAULT_SELECTION) -> None:
        """Seal the restriction group secret into a device, bound to its current PCRs."""
        if self.shared_group_secret is None:
            self.shared_group_secret = cp.SharedSecret(self.rng.bytes(cp.KEY_SIZE), "group")
        tpm_sim.seal(tpm, GROUP_SECRET_SLOT, tpm_sim.current_policy(tpm, selection), self.shared_group_secret.key)

    def check_gamma_response(self, serial: int, challenge: bytes, response: bytes) -> bool:
        gamma = self.gamma_index.get(serial)
        if gamma is None:
            return False
        return cp.mac_verify(gamma.secret, pack(b"gamma-auth", challenge, serial.to_bytes(8, "big")), response)

    def authenticate_generic(self, presented: DomainCredential, challenge: bytes) -> bool:
        return self.check_gamma_response(presented.serial, challenge, gamma_response(presented, challenge))

    def associate(self, tau: TrustCredential | TauPresentation) -> Optional[int]:
        serial = self.tau_to_gamma.get(tau.tpm_key_id)
        if serial is None:
            return None
        known = self.taus.get(tau.tpm_key_id)
        if known is None or known.issuer_cert != tau.issuer_cert:
            return None
        return serial

    def resolve_tau(self, presented: TauPresentation) -> Optional[TrustCredential]:
        """Map a (possibly pseudonymous) presentation to the enrolled credential."""
        known = self.taus.get(presented.tpm_key_id)
        if known is None or known.issuer_cert != presented.issuer_cert:
            return None
        if presented.subject is not None and presented.subject.name != known.subject.name:
            return None
        if known.issuer == self.authority.name and not verify_tau(presented, known.subject.name, self.authority.public):
            return None
        return known

    def first_come_first_served(self, serial: int, tpm_key_id: bytes) -> bool:
        """Bind ``serial`` to the first trust credential that claims it."""
        bound = self.seen_serials.setdefault(serial, tpm_key_id)
        return bound == tpm_key_id

    def issue_subordination_credential(
        self,
        holder: ActorId,
        scope: str,
        services: Iterable[str],
        backing: Backing,
    ) -> SubordinationCredential:
        if scope not in (DOMINATOR, SUBORDINATE):
            raise CredentialError(f"unknown scope {scope!r}")
        if scope == DOMINATOR:
            self._require_member(holder)
            if self.gamma_of(holder) is None:
                raise CredentialError("a dominator needs a domain credential")
        unsigned = SubordinationCredential(holder, scope, frozenset(services), backing, self.authority.name)
        sigma = dataclasses.replace(unsigned, signature=self.authority.certify(unsigned.statement()))
        self.sigmas.append(sigma)
        return sigma

    def issue_dedicated_credential(
        self,
        tpm: tpm_sim.TpmState,
        holder: ActorId,
        aik: tpm_sim.AttestationKey,
        services: Iterable[str],
        selection: Iterable[int] = tpm_sim.DEFAULT_SELECTION,
    ) -> tuple[DomainCredential, SubordinationCredential]:
        """Issue a dedicated domain credential for subordination and seal it into the
        subordinated device; return it with the subordinate credential it backs."""
        gamma = self.issue_domain_credential(holder)
        tpm_sim.seal(tpm, DEDICATED_GAMMA_SLOT, tpm_sim.current_policy(tpm, selection), gamma.encode())
        self.reference_pcrs[holder] = tpm_sim.pcr_digest(tpm.pcr_bank, selection)
        backing = GammaBacking(gamma.serial, cp.hash(gamma.encode()), aik.key_id)
        return gamma, self.issue_subordination_credential(holder, SUBORDINATE, services, backing)

    def issued_before(self, serial: int, tpm_key_id: bytes) -> bool:
        return self._gamma_tick.get(serial, 1 << 62) < self._tau_tick.get(tpm_key_id, -1)

    def dump(self) -> list[str]:
        """Line-oriented, secret-free dump with a stable field order."""
        lines = [f"registry owner={self.owner.name} authority={self.authority.name}"]
        for serial in sorted(self.gamma_index):
            g = self.gamma_index[serial]
            lines.append(f"gamma serial={serial} agent={g.agent.name} principal={g.principal.name}")
        for key_id in sorted(self.taus):
            t = self.taus[key_id]
            linked = self.tau_to_gamma.get(key_id)
            lines.append(
                f"tau key={key_id.hex()[:16]} subject={t.subject.name} mode={t.enrolment_mode} "
                f"issuer={t.issuer} serial={linked if linked is not None else '-'}"
            )
        for key_id in sorted(self.acl):
            lines.append(f"acl key={key_id.hex()[:16]}")
        for actor in sorted(self.reference_pcrs):
            lines.append(f"reference agent={actor.name} digest={self.reference_pcrs[actor].hex()[:16]}")
        for serial in sorted(self.seen_serials):
            lines.append(f"seen serial={serial} key={self.seen_serials[serial].hex()[:16]}")
        for sigma in self.sigmas:
            lines.append(
                f"sigma holder={sigma.holder.name} scope={sigma.scope} "
                f"services={','.join(sorted(sigma.granted_services)) or '-'} backing={type(sigma.backing).__name__}"
            )
        lines.append(f"group_secret={'present' if self.shared_group_secret else 'absent'}")
        return lines
