"""End-to-end scenarios: prepaid phone, bonded accessory, and POS purchase."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from transtrust import tpm_sim
from transtrust.channels import Kind, Send, run_flows
from transtrust.config import ScenarioConfig
from transtrust.credentials import (
    DOMINATOR,
    INDEPENDENT,
    PRINCIPAL_CONTROLLED,
    SUBORDINATE,
    TauBacking,
    clone_credential,
)
from transtrust.encoding import decode_fields, encode_fields, require, to_int
from transtrust.errors import CodecError, ConfigError, CredentialError, PolicyMismatch, SlotEmpty
from transtrust.operations.outcomes import BASE, REASONS, AccessDecision, TranspositionOutcome
from transtrust.operations.restriction import Claim, run_claim, run_restriction
from transtrust.operations.subordination import run_subordination
from transtrust.operations.transposition import Parties, transpose
from transtrust.world import Device, Principal, World

PREPAID_SLOT = "prepaid_total"


def enrol(world: World, principal: Principal, device: Device, mode: str = PRINCIPAL_CONTROLLED) -> None:
    """Issue a domain credential, enrol a trust credential and hand out the group secret."""
    registry = principal.registry
    device.gamma = registry.issue_domain_credential(device.id)
    device.tau = registry.enroll_trust_credential(
        device.tpm, device.id, mode, device.aik, neutral_authority=world.manufacturer, selection=device.selection
    )
    registry.distribute_group_secret(device.tpm, device.selection)


# -- prepaid ----------------------------------------------------------------


@dataclass(frozen=True)
class PrepaidState:
    running_total: int

    def __post_init__(self):
        if self.running_total < 0:
            raise ValueError("running total cannot be negative")


def _total_bytes(total: int) -> bytes:
    return total.to_bytes(8, "big")


def install_prepaid(device: Device, initial_total: int) -> None:
    tpm_sim.seal(device.tpm, PREPAID_SLOT, tpm_sim.current_policy(device.tpm, device.selection),
                 _total_bytes(initial_total))


def sealed_total(device: Device) -> PrepaidState:
    """Read the sealed running total without the policy check (inspection only)."""
    return PrepaidState(to_int(device.tpm.sealed_slots[PREPAID_SLOT].payload))


def decrement(device: Device, units: int) -> PrepaidState:
    """The trusted decrement path: unseal, decrement, reseal under the same policy."""
    total = to_int(tpm_sim.unseal(device.tpm, PREPAID_SLOT))
    if units > total:
        raise CredentialError(f"cannot spend {units} units from a total of {total}")
    tpm_sim.reseal(device.tpm, PREPAID_SLOT, _total_bytes(total - units))
    return PrepaidState(total - units)


def _claim_is_sufficient(raw: bytes, units: int) -> bool:
    try:
        total, claimed = require(decode_fields(raw), "total", "units")
    except CodecError:
        return False
    total, claimed = to_int(total), to_int(claimed)
    return claimed == units and total > 0 and total >= units


def prepaid_claim(device: Device, units: int) -> Claim:
    """The phone's trusted software states its running total for a purchase of ``units``."""
    try:
        total = to_int(tpm_sim.unseal(device.tpm, PREPAID_SLOT))
    except (SlotEmpty, PolicyMismatch):
        total = 0
    data = encode_fields({"kind": "prepaid", "total": total, "units": units})
    return Claim(data, lambda raw: _claim_is_sufficient(raw, units), lambda: decrement(device, units))


@dataclass
class PrepaidWorld:
    world: World
    mno: Principal
    phone: Device
    variant: str = "acl"
    attacker: Optional[Device] = None
    attacker_gamma: object = None
    # device name -> session of its last privileged grant; purchases continue over it
    attachments: dict = field(default_factory=dict)


def build_prepaid(
    seed: int = 42,
    *,
    initial_total: int = 5,
    variant: str = "acl",
    enrolment: str = PRINCIPAL_CONTROLLED,
    script=(),
    step_budget: int = 64,
    names: Optional[dict[str, str]] = None,
) -> PrepaidWorld:
    names = names or {}
    world = World(seed, script, step_budget)
    mno = world.add_principal(names.get("mno", "mno"))
    phone = world.add_device(names.get("phone", "phone"), mno.name, "phone")
    enrol(world, mno, phone, enrolment)
    install_prepaid(phone, initial_total)
    setup = PrepaidWorld(world, mno, phone, variant)
    cloned = [a.agent for a in script if a.action == "clone"]
    if cloned:
        if cloned[0] != phone.name:
            raise ConfigError(f"cannot clone {cloned[0]!r}: no such agent in this scenario")
        attacker = world.add_device(names.get("attacker", "mallory"), mno.name, "phone")
        enrol(world, mno, attacker, enrolment)
        install_prepaid(attacker, initial_total)
        setup.attacker = attacker
        setup.attacker_gamma = clone_credential(phone.gamma)
        world.transcript.adversary_log.append(f"clone:{phone.name} installed on {attacker.name}")
    return setup


def scenario_prepaid(setup: PrepaidWorld, purchase_units: int, device: Optional[Device] = None,
                     gamma=None) -> tuple[AccessDecision, PrepaidState]:
    """One purchase. The first one runs the full restriction flow; once the
    phone is recognised, later ones send a fresh attested claim over the same
    session until a deny other than an unaffordable purchase ends it."""
    device = device or setup.phone
    claim = prepaid_claim(device, purchase_units)
    session = setup.attachments.pop(device.name, None)
    if session is not None:
        decision = run_claim(setup.world, setup.mno, device, session, claim, service="prepaid")
        keep = decision.granted or decision.reason == "policy"
    else:
        state: dict = {}
        decision = run_restriction(setup.world, setup.mno, device, gamma, device.tau, setup.variant,
                                   service="prepaid", claim=claim, state=state)
        session, keep = state["session"], state["member"]
    if keep:
        setup.attachments[device.name] = session
    return decision, sealed_total(device)


# -- bonding ----------------------------------------------------------------


@dataclass
class BondingWorld:
    world: World
    mno: Principal
    rival: Principal
    phone: Device
    camera: Device


def build_bonding(
    seed: int = 42,
    *,
    granted_services=("photo_upload",),
    backing: str = "tau",
    phone_network: str = "same",
    script=(),
    step_budget: int = 64,
    names: Optional[dict[str, str]] = None,
) -> BondingWorld:
    names = names or {}
    world = World(seed, script, step_budget)
    mno = world.add_principal(names.get("mno", "mno"))
    rival = world.add_principal(names.get("rival", "rival"))
    home = mno if phone_network == "same" else rival
    phone = world.add_device(names.get("phone", "phone"), home.name, "phone")
    enrol(world, home, phone)
    phone.sigma = home.registry.issue_subordination_credential(phone.id, DOMINATOR, (), TauBacking(phone.aik.key_id))
    camera = world.add_device(names.get("camera", "camera"), mno.name, "camera")
    if backing == "tau":
        camera.tau = mno.registry.enroll_trust_credential(
            camera.tpm, camera.id, INDEPENDENT, camera.aik, neutral_authority=world.manufacturer
        )
        camera.sigma = mno.registry.issue_subordination_credential(
            camera.id, SUBORDINATE, granted_services, TauBacking(camera.aik.key_id)
        )
    else:
        _, camera.sigma = mno.registry.issue_dedicated_credential(camera.tpm, camera.id, camera.aik, granted_services)
    return BondingWorld(world, mno, rival, phone, camera)


def revoke_backing(setup: BondingWorld) -> None:
    setup.world.revoke(setup.camera, setup.camera.aik.key_id)


def scenario_bonding(setup: BondingWorld, service: str, variant: str = "forward") -> AccessDecision:
    return run_subordination(setup.world, setup.mno, setup.phone, setup.camera, service, variant)


# -- POS --------------------------------------------------------------------


@dataclass
class PosWorld:
    world: World
    mno: Principal
    owner: Principal
    phone: Device
    pos: Device
    parties: Parties = None


def build_pos(
    seed: int = 42,
    *,
    enrolment: str = PRINCIPAL_CONTROLLED,
    script=(),
    step_budget: int = 64,
    names: Optional[dict[str, str]] = None,
) -> PosWorld:
    names = names or {}
    world = World(seed, script, step_budget)
    mno = world.add_principal(names.get("mno", "mno"))
    owner = world.add_principal(names.get("owner", "owner"))
    phone = world.add_device(names.get("phone", "phone"), mno.name, "phone")
    pos = world.add_device(names.get("pos", "pos"), owner.name, "pos")
    enrol(world, mno, phone, enrolment)
    enrol(world, owner, pos, enrolment)
    return PosWorld(world, mno, owner, phone, pos, Parties(mno, phone, owner, pos))


def _pos_reason(outcome: TranspositionOutcome) -> str:
    step = outcome.step_a if not outcome.step_a.accepted else outcome.step_b
    return step.reason if step.reason in REASONS else "policy"


def scenario_pos(setup: PosWorld, item_price_units: int, privacy: str = "encrypted", *,
                 interleave: bool = False, secondary_challenge: bool = False):
    world, p = setup.world, setup.parties
    outcome = transpose(world, p, privacy, interleave=interleave, secondary_challenge=secondary_challenge)
    if outcome.completed:
        decision = AccessDecision.grant(p.a.id, BASE)
    else:
        decision = AccessDecision.deny(p.a.id, _pos_reason(outcome))
    if p.s_ab is not None:
        kind = Kind.SERVICE_GRANT if outcome.completed else Kind.SERVICE_DENY

        def goods():
            yield Send(p.s_ab, p.b.id, p.a.id, kind, encode_fields({
                "item_price": item_price_units, "verdict": decision.verdict, "reason": decision.reason,
            }))

        world.fabric.start_run()
        run_flows(world.fabric, {"service": goods()})
    world.record_decision(decision, None, p.a.tau.tpm_key_id if p.a.tau else None)
    return outcome, decision


# -- configured runs --------------------------------------------------------


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    world: World
    decision: AccessDecision
    attempts: list[tuple[str, AccessDecision]] = field(default_factory=list)
    outcome: Optional[TranspositionOutcome] = None
    initial_total: Optional[int] = None
    final_total: Optional[int] = None
    granted_units: int = 0
    # extra "# ..." lines describing the run's setup, written before the result
    notes: list[str] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.decision.granted

    @property
    def transcript(self):
        return self.world.transcript

    def outcome_lines(self) -> list[str]:
        lines = [f"decision: {self.decision}"]
        for label, decision in self.attempts:
            lines.append(f"attempt {label}: {decision}")
        if self.outcome is not None:
            lines += self.outcome.record().splitlines()
        if self.initial_total is not None:
            lines.append(f"prepaid_total: {self.initial_total} -> {self.final_total}")
        return lines


def _names(config: ScenarioConfig) -> dict[str, str]:
    return dict(config.values["actors"])


def _header(world: World, config: ScenarioConfig, roles: dict[str, str]) -> None:
    header = world.transcript.header
    header["scenario"] = config.scenario
    for role, name in roles.items():
        header[f"role.{role}"] = name
    for key, value in config.items():
        header[f"config.{key}"] = value or "-"


def _notes(result: ScenarioResult) -> None:
    notes = result.world.transcript.notes
    for subject, serial, key, verdict, privilege, reason in result.world.decisions:
        notes.append(
            f"decision subject={subject} serial={serial if serial is not None else '-'} "
            f"key={key.hex()[:16] if key else '-'} verdict={verdict} privilege={privilege} reason={reason}"
        )
    if result.initial_total is not None:
        notes.append(f"prepaid initial={result.initial_total} final={result.final_total} "
                     f"granted_units={result.granted_units}")
    notes.extend(result.notes)
    if result.outcome is not None:
        o = result.outcome
        notes.append(f"outcome completed={str(o.completed).lower()} step_a={o.step_a} step_b={o.step_b}")
    notes.append(f"result {result.decision}")


def _run_prepaid(config: ScenarioConfig) -> ScenarioResult:
    get = config.get
    units = get("prepaid", "purchase_units")
    setup = build_prepaid(
        config.seed,
        initial_total=get("prepaid", "initial_total"),
        variant=get("variants", "restriction"),
        enrolment=get("variants", "enrolment"),
        script=config.script,
        step_budget=get("scenario", "step_budget"),
        names=_names(config),
    )
    roles = {"principal": setup.mno.name, "device": setup.phone.name}
    if setup.attacker is not None:
        roles["attacker"] = setup.attacker.name
    _header(setup.world, config, roles)
    if get("prepaid", "rogue_extend"):
        setup.world.rogue_extend(setup.phone)
    initial = sealed_total(setup.phone).running_total
    attempts = []
    granted = 0
    for i in range(get("prepaid", "purchases")):
        decision, _ = scenario_prepaid(setup, units)
        attempts.append((f"{i + 1} {setup.phone.name}", decision))
        granted += units if decision.granted else 0
    if setup.attacker is not None:
        decision, _ = scenario_prepaid(setup, units, setup.attacker, setup.attacker_gamma)
        attempts.append((f"{len(attempts) + 1} {setup.attacker.name}", decision))
    final = sealed_total(setup.phone).running_total
    last = attempts[-1][1] if attempts else AccessDecision.deny(setup.phone.id, "policy")
    return ScenarioResult(config, setup.world, last, attempts, None, initial, final, granted)


def _run_bonding(config: ScenarioConfig) -> ScenarioResult:
    get = config.get
    setup = build_bonding(
        config.seed,
        granted_services=get("bonding", "granted_services"),
        backing=get("bonding", "backing"),
        phone_network=get("bonding", "phone_network"),
        script=config.script,
        step_budget=get("scenario", "step_budget"),
        names=_names(config),
    )
    _header(setup.world, config, {
        "principal": setup.mno.name, "dominator": setup.phone.name, "subordinate": setup.camera.name,
    })
    if get("bonding", "revoke_backing"):
        revoke_backing(setup)
    decision = scenario_bonding(setup, get("bonding", "service"), get("variants", "subordination"))
    note = f"bonding principal={setup.mno.name} dominator_domain={setup.phone.id.domain}"
    return ScenarioResult(config, setup.world, decision, [(setup.camera.name, decision)], notes=[note])


def _run_pos(config: ScenarioConfig) -> ScenarioResult:
    get = config.get
    setup = build_pos(
        config.seed,
        enrolment=get("variants", "enrolment"),
        script=config.script,
        step_budget=get("scenario", "step_budget"),
        names=_names(config),
    )
    _header(setup.world, config, {
        "A": setup.mno.name, "a": setup.phone.name, "B": setup.owner.name, "b": setup.pos.name,
    })
    outcome, decision = scenario_pos(
        setup, get("pos", "item_price_units"), get("variants", "privacy"),
        interleave=get("variants", "interleave"), secondary_challenge=get("variants", "secondary_challenge"),
    )
    return ScenarioResult(config, setup.world, decision, [], outcome)


RUNNERS = {"prepaid": _run_prepaid, "bonding": _run_bonding, "pos": _run_pos}


def run_scenario(config: ScenarioConfig) -> ScenarioResult:
    """Run the configured scenario from a fresh world; identical configs give identical transcripts."""
    if config.scenario != "prepaid" and any(a.action == "clone" for a in config.script):
        raise ConfigError("credential cloning applies to the prepaid scenario only")
    result = RUNNERS[config.scenario](config)
    _notes(result)
    return result
