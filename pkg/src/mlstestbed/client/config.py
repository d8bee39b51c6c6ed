"""Client configuration files.

The format is TOML with the sections ``[cgka]``, ``[paradigm]``,
``[http_server]``, ``[mqtt]`` and ``[meta]``. The two url sections are
optional and ignored by the simulator.
"""

from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


class MissingKey(ConfigError):
    pass


class BadValue(ConfigError):
    pass


class UnknownKey(ConfigError):
    pass


DS_KINDS = ("mqtt", "gossipsub")
POLICIES = ("First", "Last", "Random")
PARADIGMS = ("commit", "propose")
SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ClientConfig:
    ds: str = "mqtt"
    groups: tuple[str, ...] = ("group_1",)
    external_join: bool = True
    join_chance: float = 0.01
    issue_update_chance: float = 0.2
    message_chance: float = 0.3
    scale: bool = False
    auth_policy: str = "Random"
    message_length_min: int = 500
    message_length_max: int = 2000
    sleep_millis_min: int = 20000
    sleep_millis_max: int = 60000
    paradigm: str = "propose"
    proposals_per_commit: int = 4
    invite_chance: float = 0.6
    remove_chance: float = 0.1
    update_chance: float = 0.3
    replicas: int = 10
    http_url: str | None = None
    mqtt_url: str | None = None

    def __post_init__(self):
        validate(self)

    def with_overrides(self, **changes) -> "ClientConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


# (section, key) -> (field, kind)
_SCHEMA = {
    ("cgka", "ds"): ("ds", "str"),
    ("cgka", "groups"): ("groups", "groups"),
    ("cgka", "external_join"): ("external_join", "bool"),
    ("cgka", "join_chance"): ("join_chance", "prob"),
    ("cgka", "issue_update_chance"): ("issue_update_chance", "prob"),
    ("cgka", "message_chance"): ("message_chance", "prob"),
    ("cgka", "scale"): ("scale", "bool"),
    ("cgka", "auth_policy"): ("auth_policy", "str"),
    ("cgka", "message_length_min"): ("message_length_min", "count"),
    ("cgka", "message_length_max"): ("message_length_max", "count"),
    ("cgka", "sleep_millis_min"): ("sleep_millis_min", "count"),
    ("cgka", "sleep_millis_max"): ("sleep_millis_max", "count"),
    ("paradigm", "paradigm"): ("paradigm", "str"),
    ("paradigm", "proposals_per_commit"): ("proposals_per_commit", "count"),
    ("paradigm", "invite_chance"): ("invite_chance", "prob"),
    ("paradigm", "remove_chance"): ("remove_chance", "prob"),
    ("paradigm", "update_chance"): ("update_chance", "prob"),
    ("meta", "replicas"): ("replicas", "count"),
}
_OPTIONAL = {("http_server", "url"): "http_url", ("mqtt", "url"): "mqtt_url"}
SECTIONS = ("cgka", "paradigm", "http_server", "mqtt", "meta")


def _convert(section: str, key: str, kind: str, value):
    where = f"[{section}] {key}"
    if kind == "bool":
        if not isinstance(value, bool):
            raise BadValue(f"{where} must be true or false")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise BadValue(f"{where} must be a string")
        return value
    if kind == "groups":
        if not isinstance(value, list) or not value or not all(isinstance(g, str) for g in value):
            raise BadValue(f"{where} must be a non-empty list of strings")
        return tuple(value)
    if kind == "count":
        if isinstance(value, bool) or not isinstance(value, int):
            raise BadValue(f"{where} must be an integer")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise BadValue(f"{where} must be a number")
    return float(value)


def validate(cfg: ClientConfig) -> None:
    if cfg.ds not in DS_KINDS:
        raise BadValue(f"ds must be one of {DS_KINDS}, got {cfg.ds!r}")
    if cfg.auth_policy not in POLICIES:
        raise BadValue(f"auth_policy must be one of {POLICIES}, got {cfg.auth_policy!r}")
    if cfg.paradigm not in PARADIGMS:
        raise BadValue(f"paradigm must be one of {PARADIGMS}, got {cfg.paradigm!r}")
    if not cfg.groups or len(set(cfg.groups)) != len(cfg.groups):
        raise BadValue("groups must be non-empty and distinct")
    for g in cfg.groups:
        if not g or any(c.isspace() or c == "/" for c in g):
            raise BadValue(f"group id {g!r} may not be empty or contain spaces or '/'")
    for name in ("join_chance", "issue_update_chance", "message_chance",
                 "invite_chance", "remove_chance", "update_chance"):
        p = getattr(cfg, name)
        if not (0.0 <= p <= 1.0) or math.isnan(p):
            raise BadValue(f"{name} must lie in [0, 1], got {p}")
    total = cfg.invite_chance + cfg.remove_chance + cfg.update_chance
    if abs(total - 1.0) > SUM_TOLERANCE:
        raise BadValue(f"invite_chance + remove_chance + update_chance must be 1, got {total}")
    for lo, hi in (("message_length_min", "message_length_max"), ("sleep_millis_min", "sleep_millis_max")):
        a, b = getattr(cfg, lo), getattr(cfg, hi)
        if a < 0 or b < a:
            raise BadValue(f"need 0 <= {lo} <= {hi}, got {a} and {b}")
    if cfg.proposals_per_commit < 1:
        raise BadValue("proposals_per_commit must be at least 1")
    if cfg.replicas < 1:
        raise BadValue("replicas must be at least 1")


def parse_config(text: str) -> ClientConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise BadValue(f"not valid TOML: {exc}") from exc
    for section, body in doc.items():
        if section not in SECTIONS:
            raise UnknownKey(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise BadValue(f"{section} must be a section")
        for key in body:
            if (section, key) not in _SCHEMA and (section, key) not in _OPTIONAL:
                raise UnknownKey(f"unknown key [{section}] {key}")
    fields = {}
    for (section, key), (name, kind) in _SCHEMA.items():
        if key not in doc.get(section, {}):
            raise MissingKey(f"missing [{section}] {key}")
        fields[name] = _convert(section, key, kind, doc[section][key])
    for (section, key), name in _OPTIONAL.items():
        if key in doc.get(section, {}):
            fields[name] = _convert(section, key, "str", doc[section][key])
    return ClientConfig(**fields)


def load_config(path) -> ClientConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def format_config(cfg: ClientConfig) -> str:
    """Render ``cfg`` back into the file format (parse_config inverts it)."""
    values = asdict(cfg)
    lines = []
    for section in SECTIONS:
        entries = [(key, values[name]) for (s, key), (name, _) in _SCHEMA.items() if s == section]
        entries += [(key, values[name]) for (s, key), name in _OPTIONAL.items()
                    if s == section and values[name] is not None]
        if entries:
            lines.append(f"[{section}]")
            lines += [f"{k} = {_toml_value(v)}" for k, v in entries]
            lines.append("")
    return "\n".join(lines)


FIG4_EXAMPLE = """\
[cgka]
ds = "mqtt"
groups = ["group_1", "group_2"]
external_join = true
join_chance = 0.01
issue_update_chance = 0.2
message_chance = 0.3
scale = false
auth_policy = "Random"
message_length_min = 500
message_length_max = 2000
sleep_millis_min = 20000
sleep_millis_max = 60000

[paradigm]
paradigm = "propose"
proposals_per_commit = 4
invite_chance = 0.6
remove_chance = 0.1
update_chance = 0.3

[http_server]
url = "http://<ip>:<port>"

[mqtt]
url = "tcp://<ip>:<port>"

[meta]
replicas = 10
"""
