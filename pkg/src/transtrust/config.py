"""Scenario configuration files.

A configuration is an INI-style text file with fixed sections and keys::

    [scenario]
    name = pos
    seed = 42

    [variants]
    privacy = mac_only

Every key has a default, so an almost empty file is valid; unknown sections
or keys are errors. Overrides use ``section.key=value``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from transtrust.channels import DEFAULT_STEP_BUDGET, AdversaryAction, parse_script
from transtrust.errors import ConfigError

SCENARIOS = ("prepaid", "bonding", "pos")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(value: str) -> str:
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return value

    return parse


def _int(minimum: int = 0) -> Callable[[str], int]:
    def parse(value: str) -> int:
        number = int(value)
        if number < minimum:
            raise ValueError(f"must be at least {minimum}")
        return number

    return parse


def _bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _name(value: str) -> str:
    if not value or any(c in value for c in " |#,"):
        raise ValueError("actor names must be non-empty and free of spaces, '|', '#', ','")
    return value


def _names(value: str) -> tuple[str, ...]:
    return tuple(sorted({v.strip() for v in value.split(",") if v.strip()}))


def _script(value: str) -> tuple[str, ...]:
    items = tuple(v.strip() for v in value.replace("\n", ",").split(",") if v.strip())
    parse_script(items)
    return items


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable, object]]] = {
    "scenario": {
        "name": (_choice(*SCENARIOS), "pos"),
        "seed": (_int(0), 42),
        "step_budget": (_int(1), DEFAULT_STEP_BUDGET),
    },
    "actors": {
        "mno": (_name, "mno"),
        "phone": (_name, "phone"),
        "owner": (_name, "owner"),
        "pos": (_name, "pos"),
        "camera": (_name, "camera"),
        "rival": (_name, "rival"),
        "attacker": (_name, "mallory"),
    },
    "variants": {
        "restriction": (_choice("acl", "shared_secret"), "acl"),
        "enrolment": (_choice("principal_controlled", "independent"), "principal_controlled"),
        "subordination": (_choice("forward", "local_grant"), "forward"),
        "privacy": (_choice("encrypted", "mac_only"), "encrypted"),
        "interleave": (_bool, False),
        "secondary_challenge": (_bool, False),
    },
    "adversary": {
        "script": (_script, ()),
    },
    "prepaid": {
        "initial_total": (_int(0), 5),
        "purchase_units": (_int(1), 1),
        "purchases": (_int(1), 1),
        "rogue_extend": (_bool, False),
    },
    "bonding": {
        "service": (_name, "photo_upload"),
        "granted_services": (_names, ("photo_upload",)),
        "backing": (_choice("tau", "dedicated"), "tau"),
        "phone_network": (_choice("same", "other"), "same"),
        "revoke_backing": (_bool, False),
    },
    "pos": {
        "item_price_units": (_int(0), 2),
    },
}


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


@dataclass(frozen=True)
class ScenarioConfig:
    """Resolved configuration: every key of every section has a value."""

    values: dict[str, dict[str, object]] = field(default_factory=lambda: {
        section: {key: default for key, (_, default) in keys.items()} for section, keys in SCHEMA.items()
    })
    source: str = "<defaults>"

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def scenario(self) -> str:
        return self.get("scenario", "name")

    @property
    def seed(self) -> int:
        return self.get("scenario", "seed")

    @property
    def script(self) -> tuple[AdversaryAction, ...]:
        return parse_script(self.get("adversary", "script"))

    def items(self) -> list[tuple[str, str]]:
        """Every ``section.key`` with its rendered value, in schema order."""
        return [
            (f"{section}.{key}", _render(self.values[section][key]))
            for section, keys in SCHEMA.items()
            for key in keys
        ]

    def with_value(self, section: str, key: str, raw: str, where: str = "override") -> ScenarioConfig:
        values = {s: dict(v) for s, v in self.values.items()}
        values[section][key] = _parse_value(section, key, raw, where)
        return dataclasses.replace(self, values=values)

    def with_override(self, assignment: str) -> ScenarioConfig:
        """Apply ``section.key=value``."""
        if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
            raise ConfigError(f"override {assignment!r} must look like section.key=value")
        target, raw = assignment.split("=", 1)
        section, key = target.strip().split(".", 1)
        _check_known(section, key, f"override {assignment!r}")
        return self.with_value(section, key, raw.strip(), f"override {assignment!r}")

    def to_text(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            lines += [f"{key} = {_render(self.values[section][key])}" for key in keys]
            lines.append("")
        return "\n".join(lines)


def _check_known(section: str, key: Optional[str], where: str) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}] at {where}")
    if key is not None and key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}] at {where}")


def _parse_value(section: str, key: str, raw: str, where: str):
    parser, _ = SCHEMA[section][key]
    try:
        return parser(raw)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"bad value {raw!r} for {section}.{key} at {where}: {exc}") from exc


def _locate(lines: list[str], section: str, key: str | None) -> int:
    """1-based line number of ``key`` in ``section`` (or of the section header)."""
    current = None
    for number, line in enumerate(lines, 1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if key is None and current == section:
                return number
            continue
        if key is not None and current == section and stripped.split("=", 1)[0].split(":", 1)[0].strip() == key:
            return number
    return 0


def parse_config(text: str, source: str = "<string>") -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    lines = text.splitlines()
    config = ScenarioConfig(source=source)
    for section in parser.sections():
        _check_known(section, None, f"{source}:{_locate(lines, section, None)}")
        for key, raw in parser.items(section):
            where = f"{source}:{_locate(lines, section, key)}"
            _check_known(section, key, where)
            config = config.with_value(section, key, raw.strip(), where)
    return config


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc.strerror or exc}") from exc
    return parse_config(text, str(path))


def config_from_items(items: list[tuple[str, str]], source: str = "<transcript>") -> ScenarioConfig:
    """Rebuild a configuration from :meth:`ScenarioConfig.items` output."""
    config = ScenarioConfig(source=source)
    for target, raw in items:
        section, _, key = target.partition(".")
        _check_known(section, key, source)
        config = config.with_value(section, key, raw, source)
    return config


# Values accepted by ``--variant``, mapped to the key they set.
VARIANT_VALUES: dict[str, tuple[str, str, str]] = {
    "acl": ("variants", "restriction", "acl"),
    "shared_secret": ("variants", "restriction", "shared_secret"),
    "principal_controlled": ("variants", "enrolment", "principal_controlled"),
    "independent": ("variants", "enrolment", "independent"),
    "forward": ("variants", "subordination", "forward"),
    "local_grant": ("variants", "subordination", "local_grant"),
    "encrypted": ("variants", "privacy", "encrypted"),
    "mac_only": ("variants", "privacy", "mac_only"),
    "interleave": ("variants", "interleave", "true"),
    "secondary_challenge": ("variants", "secondary_challenge", "true"),
}


def apply_variant(config: ScenarioConfig, name: str) -> ScenarioConfig:
    try:
        section, key, raw = VARIANT_VALUES[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; known: {', '.join(sorted(VARIANT_VALUES))}") from None
    return config.with_value(section, key, raw, f"--variant {name}")
