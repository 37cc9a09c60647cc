"""Message fabric, secure sessions, transcripts and the scripted adversary.

Protocol engines are written as generator functions. Each ``yield Send(...)``
hands one message to the fabric and suspends the engine; the scheduler in
:func:`run_flows` resumes it with a :class:`Delivery` once the fabric has
delivered that envelope, or throws the delivery error into it. The fabric
delivers exactly one envelope per step from a single global FIFO queue, so a
run is fully determined by the seed, the scenario and the adversary script.
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Generator, Iterable, Optional

from transtrust import crypto_prims as cp
from transtrust.credentials import ActorId
from transtrust.encoding import pack
from transtrust.errors import (
    AuthenticationFailure,
    ChannelError,
    ConfigError,
    ReplayDetected,
    Timeout,
    TransTrustError,
)

logger = logging.getLogger(__name__)

DEFAULT_STEP_BUDGET = 64


class Kind(str, enum.Enum):
    CHANNEL_HELLO = "ChannelHello"
    CHANNEL_ATTEST = "ChannelAttest"
    CHANNEL_ACCEPT = "ChannelAccept"
    GAMMA_AUTH = "GammaAuth"
    QUOTE_L1 = "QuoteL1"
    QUOTE_L2 = "QuoteL2"
    QUOTE_L3 = "QuoteL3"
    TAU_PRESENT = "TauPresent"
    SIGMA_PRESENT = "SigmaPresent"
    WRAPPED_TAU = "WrappedTau"
    AUTH_REQUEST = "AuthRequest"
    AUTH_ACK = "AuthAck"
    WRAPPED_ACK = "WrappedAck"
    SERVICE_REQUEST = "ServiceRequest"
    SERVICE_GRANT = "ServiceGrant"
    SERVICE_DENY = "ServiceDeny"

    def __str__(self):
        return self.value


QUOTE_KINDS = {Kind.QUOTE_L1: 1, Kind.QUOTE_L2: 2, Kind.QUOTE_L3: 3}

PENDING = "pending"
ACCEPTED = "accepted"
REJECTED = "rejected"
DROPPED = "dropped"
STATUSES = (ACCEPTED, REJECTED, DROPPED)


@dataclass
class Envelope:
    seq: int
    sender: ActorId
    receiver: ActorId
    session_id: Optional[str]
    kind: Kind
    payload: bytes
    status: str = PENDING
    reason: str = ""
    phase: str = ""
    # What the receiving actor (or, for undelivered envelopes, the sender) saw in clear.
    plaintext: Optional[bytes] = field(default=None, repr=False)
    error: Optional[Exception] = field(default=None, repr=False, compare=False)

    def digest(self) -> str:
        return cp.hash(self.payload).hex()

    def line(self) -> str:
        status = ACCEPTED if self.status == PENDING else self.status
        return f"{self.seq} | {self.sender.name} | {self.receiver.name} | {self.kind.value} | {status} | {self.digest()}"


# -- sessions ---------------------------------------------------------------


class Session:
    """A secure channel between two actors.

    Each endpoint derives its transport key from the DH shares it actually
    received, so a manipulated handshake leaves the two ends with different
    keys and every later envelope fails authentication.
    """

    def __init__(self, session_id: str, endpoints: tuple[ActorId, ActorId], keys: dict[ActorId, cp.SharedSecret],
                 bindings: Optional[dict[ActorId, bytes]] = None):
        self.session_id = session_id
        self.endpoints = endpoints
        self._keys = keys
        self.bindings = bindings or {e: b"" for e in endpoints}
        self.attestation_evidence: dict[ActorId, int] = {e: 0 for e in endpoints}
        self.attested_keys: dict[ActorId, bytes] = {}
        # endpoint -> (attestation key public, certificate, issuer) from its accepted level-2 quote
        self.attested_publics: dict[ActorId, tuple[bytes, bytes, str]] = {}
        self.gamma_serials: dict[ActorId, int] = {}
        self.established = False
        self._send_counter = {e: 0 for e in endpoints}
        self._recv_expected = {e: 0 for e in endpoints}
        self._guard = cp.NonceGuard()
        self._aad_cache: dict[tuple[Kind, ActorId], bytes] = {}

    @property
    def transport_key(self) -> cp.SharedSecret:
        return self._keys[self.endpoints[0]]

    def peer(self, actor: ActorId) -> ActorId:
        a, b = self.endpoints
        if actor == a:
            return b
        if actor == b:
            return a
        raise ChannelError(f"{actor.name} is not an endpoint of {self.session_id}")

    def _direction(self, sender: ActorId) -> int:
        return self.endpoints.index(sender)

    def _aad(self, kind: Kind, sender: ActorId, receiver: ActorId) -> bytes:
        key = (kind, sender)
        aad = self._aad_cache.get(key)
        if aad is None:
            aad = pack(self.session_id.encode(), kind.value.encode(), sender.name.encode(), receiver.name.encode())
            self._aad_cache[key] = aad
        return aad

    def seal(self, sender: ActorId, kind: Kind, plaintext: bytes) -> bytes:
        receiver = self.peer(sender)
        counter = self._send_counter[sender]
        self._send_counter[sender] = counter + 1
        nonce = cp.counter_nonce(self._direction(sender), counter)
        body = self._guard.seal(self._keys[sender], nonce, self._aad(kind, sender, receiver), plaintext)
        return counter.to_bytes(8, "big") + body

    def open(self, sender: ActorId, kind: Kind, wire: bytes) -> bytes:
        receiver = self.peer(sender)
        if len(wire) < 8 + cp.TAG_SIZE:
            raise AuthenticationFailure("truncated sealed payload")
        counter = int.from_bytes(wire[:8], "big")
        expected = self._recv_expected[sender]
        aad = self._aad(kind, sender, receiver)
        if counter != expected:
            # Authentic under its own (stale) counter: a replay. Otherwise the counter was mangled.
            if counter < expected:
                try:
                    cp.aead_open(self._keys[receiver], cp.counter_nonce(self._direction(sender), counter), aad, wire[8:])
                except AuthenticationFailure:
                    pass
                else:
                    raise ReplayDetected(f"nonce counter {counter} where {expected} was expected")
            raise AuthenticationFailure(f"nonce counter {counter} does not authenticate")
        nonce = cp.counter_nonce(self._direction(sender), counter)
        plaintext = cp.aead_open(self._keys[receiver], nonce, aad, wire[8:])
        self._recv_expected[sender] = expected + 1
        return plaintext

    def record_evidence(self, endpoint: ActorId, level: int) -> None:
        if level > self.attestation_evidence[endpoint]:
            self.attestation_evidence[endpoint] = level

    def evidence(self, endpoint: ActorId) -> int:
        return self.attestation_evidence[endpoint]


# -- adversary --------------------------------------------------------------

ACTIONS = ("tamper", "drop", "duplicate", "forge", "clone")
KIND_BY_NAME = {k.value: k for k in Kind}


@dataclass(frozen=True)
class AdversaryAction:
    """One scripted interference.

    ``tamper`` flips a byte of the envelope as it travels on the wire,
    ``forge`` flips a byte of the payload before the sending relay protects
    it for transport (a dishonest mediator), ``drop`` and ``duplicate`` act
    on delivery, and ``clone`` copies an agent's domain credential onto an
    attacker device before the run.
    """

    action: str
    kind: Optional[Kind] = None
    seq: Optional[int] = None
    byte_index: int = 0
    agent: Optional[str] = None

    def matches(self, env: Envelope) -> bool:
        if self.seq is not None:
            return env.seq == self.seq
        return self.kind is not None and env.kind == self.kind

    def __str__(self):
        if self.action == "clone":
            return f"clone:{self.agent}"
        target = str(self.seq) if self.seq is not None else self.kind.value
        if self.action in ("tamper", "forge"):
            return f"{self.action}:{target}:{self.byte_index}"
        return f"{self.action}:{target}"


def parse_action(text: str) -> AdversaryAction:
    """Parse ``action:target[:byte_index]``; target is a kind name or a sequence number."""
    parts = [p.strip() for p in text.strip().split(":")]
    action = parts[0]
    if action not in ACTIONS:
        raise ConfigError(f"unknown adversary action {action!r} in {text!r}")
    if action == "clone":
        if len(parts) != 2 or not parts[1]:
            raise ConfigError(f"clone needs an agent name: {text!r}")
        return AdversaryAction("clone", agent=parts[1])
    if len(parts) < 2 or len(parts) > 3:
        raise ConfigError(f"malformed adversary action {text!r}")
    target = parts[1]
    kind = seq = None
    if target.isdigit():
        seq = int(target)
    elif target in KIND_BY_NAME:
        kind = KIND_BY_NAME[target]
    else:
        raise ConfigError(f"unknown message kind {target!r} in {text!r}")
    index = 0
    if len(parts) == 3:
        if action not in ("tamper", "forge") or not parts[2].isdigit():
            raise ConfigError(f"byte index only applies to tamper/forge: {text!r}")
        index = int(parts[2])
    return AdversaryAction(action, kind=kind, seq=seq, byte_index=index)


def parse_script(items: Iterable[str]) -> tuple[AdversaryAction, ...]:
    return tuple(parse_action(i) for i in items if i.strip())


def _flip(data: bytes, index: int) -> bytes:
    if not data:
        return data
    i = index % len(data)
    return data[:i] + bytes([data[i] ^ 0x01]) + data[i + 1 :]


# -- transcript -------------------------------------------------------------


@dataclass
class Transcript:
    seed: int
    entries: list[Envelope] = field(default_factory=list)
    header: dict[str, str] = field(default_factory=dict)
    adversary_log: list[str] = field(default_factory=list)
    # Trailing "# ..." lines: decisions and outcomes recorded after the run.
    notes: list[str] = field(default_factory=list)

    def kinds(self) -> list[Kind]:
        return [e.kind for e in self.entries]

    def to_text(self) -> str:
        lines = [f"# seed {self.seed}"]
        lines += [f"# {k} {v}" for k, v in self.header.items()]
        lines += [f"# adversary {a}" for a in self.adversary_log]
        lines += [e.line() for e in self.entries]
        lines += [f"# {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


# -- fabric -----------------------------------------------------------------


@dataclass
class Send:
    session: Optional[Session]
    sender: ActorId
    receiver: ActorId
    kind: Kind
    payload: bytes


@dataclass
class Delivery:
    envelope: Envelope

    @property
    def payload(self) -> bytes:
        return self.envelope.plaintext

    def reject(self, reason: str) -> None:
        self.envelope.status = REJECTED
        self.envelope.reason = reason


class Fabric:
    """Synchronous round-based scheduler with one delivery per step."""

    def __init__(self, seed: int, script: Iterable[AdversaryAction] = (), step_budget: int = DEFAULT_STEP_BUDGET):
        self.transcript = Transcript(seed)
        self.script = [a for a in script if a.action != "clone"]
        self._fired: set[int] = set()
        self.step_budget = step_budget
        self.steps = 0
        self._queue: deque[Envelope] = deque()
        self._sessions: dict[str, Session] = {}
        self._session_count = 0

    def new_session_id(self, a: ActorId, b: ActorId) -> str:
        self._session_count += 1
        return f"s{self._session_count}:{a.name}-{b.name}"

    def start_run(self) -> None:
        self.steps = 0

    @property
    def exhausted(self) -> bool:
        return self.steps >= self.step_budget

    def _next_seq(self) -> int:
        return len(self.transcript.entries) + 1

    def _take(self, env: Envelope, actions: Iterable[str]) -> Optional[AdversaryAction]:
        if len(self._fired) == len(self.script):
            return None
        for i, act in enumerate(self.script):
            if i not in self._fired and act.action in actions and act.matches(env):
                self._fired.add(i)
                self.transcript.adversary_log.append(f"{act} applied to seq={env.seq} kind={env.kind.value}")
                logger.debug("adversary %s on seq %d", act, env.seq)
                return act
        return None

    def post(self, send: Send, phase: str = "") -> Envelope:
        env = Envelope(
            seq=self._next_seq(),
            sender=send.sender,
            receiver=send.receiver,
            session_id=send.session.session_id if send.session else None,
            kind=send.kind,
            payload=b"",
            phase=phase,
        )
        plaintext = send.payload
        forged = self._take(env, ("forge",))
        if forged is not None:
            plaintext = _flip(plaintext, forged.byte_index)
        env.plaintext = plaintext
        if send.session is not None:
            self._sessions[send.session.session_id] = send.session
            env.payload = send.session.seal(send.sender, send.kind, plaintext)
        else:
            env.payload = plaintext
        self.transcript.entries.append(env)
        self._queue.append(env)
        return env

    def deliver(self) -> Optional[Envelope]:
        """Deliver the head of the queue; return it, or None if the queue is empty."""
        if not self._queue:
            return None
        env = self._queue.popleft()
        self.steps += 1
        if self._take(env, ("drop",)) is not None:
            env.status = DROPPED
            env.reason = "dropped by adversary"
            return env
        if self._take(env, ("duplicate",)) is not None:
            copy = Envelope(self._next_seq(), env.sender, env.receiver, env.session_id, env.kind,
                            env.payload, phase=env.phase)
            self.transcript.entries.append(copy)
            self._queue.append(copy)
        tampered = self._take(env, ("tamper",))
        if tampered is not None:
            env.payload = _flip(env.payload, tampered.byte_index)
        if env.session_id is None:
            env.plaintext = env.payload
            env.status = ACCEPTED
            return env
        session = self._sessions[env.session_id]
        try:
            env.plaintext = session.open(env.sender, env.kind, env.payload)
        except (AuthenticationFailure, ReplayDetected) as exc:
            env.status = REJECTED
            env.reason = type(exc).__name__
            env.plaintext = None
            env.error = exc
            return env
        env.status = ACCEPTED
        return env

    def flush(self, reason: str = "run ended") -> None:
        while self._queue:
            env = self._queue.popleft()
            env.status = DROPPED
            env.reason = reason


Flow = Generator[Send, Delivery, object]


def run_flows(fabric: Fabric, flows: dict[str, Flow]) -> dict[str, object]:
    """Drive protocol engines to completion over the fabric.

    Returns each flow's return value, or the exception that ended it. When
    the queue runs dry while engines still wait, or the step budget is spent,
    :class:`Timeout` is thrown into every waiting engine.
    """
    results: dict[str, object] = {}
    waiting: dict[int, tuple[str, Flow]] = {}

    def advance(name: str, gen: Flow, value=None, exc: Optional[BaseException] = None):
        try:
            send = gen.throw(exc) if exc is not None else gen.send(value)
        except StopIteration as stop:
            results[name] = stop.value
            return
        except TransTrustError as err:
            results[name] = err
            return
        env = fabric.post(send, phase=name)
        waiting[env.seq] = (name, gen)

    for name, gen in flows.items():
        advance(name, gen)

    while waiting:
        if fabric.exhausted:
            for seq in sorted(waiting):
                name, gen = waiting.pop(seq)
                advance(name, gen, exc=Timeout("step budget exhausted"))
            fabric.flush("step budget exhausted")
            continue
        env = fabric.deliver()
        if env is None:
            for seq in sorted(waiting):
                name, gen = waiting.pop(seq)
                advance(name, gen, exc=Timeout("no reply before the fabric went idle"))
            continue
        if env.status == DROPPED or env.seq not in waiting:
            continue
        name, gen = waiting.pop(env.seq)
        if env.status == ACCEPTED:
            advance(name, gen, Delivery(env))
        else:
            advance(name, gen, exc=env.error or AuthenticationFailure(env.reason))
    fabric.flush()
    return results


def run_one(fabric: Fabric, flow: Flow, name: str = "run"):
    """Run a single engine; re-raise the exception that ended it, if any."""
    result = run_flows(fabric, {name: flow})[name]
    if isinstance(result, BaseException):
        raise result
    return result
