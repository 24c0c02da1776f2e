"""Scenario files: TOML in, validated :class:`SimulationConfig` out.

A scenario is the simulation config plus optional ``[output]`` and ``[sweep]``
tables.  Actor arrays accept either explicit ``id`` entries or groups written
as ``id_prefix`` + ``count``, which expand to zero-padded ids.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .actors import BuilderProfile, BuilderStrategy, RelayProfile, UserCohort, ValidatorProfile
from .engine import OpportunityParams, SimulationConfig
from .mechanisms import BURN_AUCTION, EPBS, EPBS_SMOOTHING, MECHANISMS, MEV_BOOST, MEV_BURN
from .rewards import DutyWeights, RewardParams
from .units import fraction_out, to_fraction

FORMATS = ("json", "csv", "both")


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = f" (line {line})" if line else ""
        super().__init__(f"{message}{where}")


# kind: int | float | frac | bool | str | optint
TOP = {
    "slots": ("int", None),
    "seed": ("int", None),
    "mechanism": ("str", None),
    "committee_size": ("int", 8),
    "ticks_per_slot": ("int", 12),
    "committee_deadline_tick": ("optint", None),
    "payload_deadline_tick": ("int", 9),
    "ptc_boost": ("frac", Fraction(2, 5)),
    "kickback_fraction": ("frac", Fraction(9, 10)),
    "reputation_step": ("frac", Fraction(1, 10)),
    "relay_fallback": ("str", "local"),
    "proposer_miss_rate": ("float", 0.0),
    "burn_enforced": ("bool", True),
}
REQUIRED_TOP = ("slots", "seed", "mechanism")
TABLES = {
    "rewards": {"base_reward_factor": ("int", 64), "base_rewards_per_epoch": ("int", 4)},
    "duty_weights": {
        "source": ("int", 22),
        "target": ("int", 41),
        "head": ("int", 22),
        "sync": ("int", 3),
        "proposer": ("int", 12),
    },
    "opportunity": {
        "location": ("float", 50_000_000.0),
        "scale": ("float", 1.0),
        "spike_probability": ("float", 0.01),
        "spike_multiplier": ("float", 20.0),
        "flagged_fraction": ("frac", Fraction(1, 20)),
        "exclusive_fraction": ("frac", Fraction(1, 10)),
        "priority_fee_location": ("float", 20_000_000.0),
        "priority_fee_scale": ("float", 0.5),
    },
    "output": {"dir": ("str", "out"), "format": ("str", "both")},
    "sweep": {"seeds": ("list", None), "count": ("optint", None)},
}
ACTORS = {
    "validators": {
        "effective_balance": ("int", None),
        "mev_capability": ("frac", Fraction(0)),
        "uses_outsourcing": ("bool", True),
    },
    "builders": {
        "stake": ("int", 0),
        "reserve": ("int", 0),
        "extraction_efficiency": ("frac", Fraction(1)),
        "exclusive_orderflow_share": ("frac", Fraction(0)),
        "censors": ("bool", False),
        "strategy": ("table", None),
    },
    "relays": {
        "honest": ("bool", True),
        "theft_threshold": ("int", 0),
        "reputation": ("frac", Fraction(1)),
        "tripped": ("bool", False),
    },
    "cohorts": {"uses_mev_share": ("bool", False), "kickback_balance": ("int", 0)},
}
STRATEGY = {
    "bid_margin": ("frac", Fraction(1, 10)),
    "overbid_from_reserve": ("bool", False),
    "reveal_honestly": ("bool", True),
    "collude_after_deadline": ("bool", False),
    "exit_loss_threshold": ("optint", None),
    "tip_share": ("frac", Fraction(1, 10)),
    "bid_tick": ("int", 1),
    "reveal_tick": ("int", 4),
}
ACTOR_TYPES = {
    "validators": ValidatorProfile,
    "builders": BuilderProfile,
    "relays": RelayProfile,
    "cohorts": UserCohort,
}
BUILDER_MECHANISMS = (MEV_BOOST, EPBS, EPBS_SMOOTHING, BURN_AUCTION, MEV_BURN)


@dataclass
class Scenario:
    config: SimulationConfig
    output_dir: str = "out"
    format: str = "both"
    seeds: list[int] = field(default_factory=list)


class _Reader:
    """Key lookups that report the source line of offending keys."""

    def __init__(self, text: str = ""):
        self.lines = text.splitlines()

    def line_of(self, key: str) -> Optional[int]:
        pat = re.compile(rf'^\s*(\[\[?\s*)?"?{re.escape(key)}"?\s*(=|\]|\.)')
        for no, line in enumerate(self.lines, start=1):
            if pat.match(line):
                return no
        return None

    def fail(self, message: str, key: str) -> ConfigError:
        return ConfigError(message, key, self.line_of(key.rsplit(".", 1)[-1]))

    def value(self, kind: str, raw: Any, key: str) -> Any:
        ok = {
            "int": isinstance(raw, int) and not isinstance(raw, bool),
            "optint": isinstance(raw, int) and not isinstance(raw, bool),
            "float": isinstance(raw, (int, float)) and not isinstance(raw, bool),
            "frac": isinstance(raw, (int, float, str)) and not isinstance(raw, bool),
            "bool": isinstance(raw, bool),
            "str": isinstance(raw, str),
            "list": isinstance(raw, list),
            "table": isinstance(raw, dict),
        }[kind]
        if not ok:
            raise self.fail(f"key '{key}' has the wrong type (expected {kind})", key)
        if kind == "frac":
            try:
                return to_fraction(raw)
            except (ValueError, ZeroDivisionError):
                raise self.fail(f"key '{key}' is not a valid fraction", key) from None
        if kind == "float":
            return float(raw)
        return raw

    def table(self, data: dict, schema: dict, where: str, required: tuple = ()) -> dict:
        if not isinstance(data, dict):
            raise self.fail(f"'{where}' must be a table", where)
        for key in data:
            if key not in schema:
                raise self.fail(f"unknown key '{_join(where, key)}'", key)
        for key in required:
            if key not in data:
                raise self.fail(f"missing required key '{_join(where, key)}'", where or key)
        out = {}
        for key, (kind, default) in schema.items():
            if key in data:
                out[key] = self.value(kind, data[key], _join(where, key))
            else:
                out[key] = default
        return out


def _join(where: str, key: str) -> str:
    return f"{where}.{key}" if where else key


def _expand(reader: _Reader, entries: Any, kind: str) -> list:
    if not isinstance(entries, list):
        raise reader.fail(f"'{kind}' must be an array of tables", kind)
    schema = dict(ACTORS[kind], id=("str", None), id_prefix=("str", None), count=("optint", None))
    if kind == "validators":
        required = ("effective_balance",)
    else:
        required = ()
    actors = []
    for i, raw in enumerate(entries):
        where = f"{kind}[{i}]"
        fields = reader.table(raw, schema, where, required)
        ident, prefix, count = fields.pop("id"), fields.pop("id_prefix"), fields.pop("count")
        if (ident is None) == (prefix is None):
            raise reader.fail(f"{where} needs exactly one of 'id' or 'id_prefix'", kind)
        if prefix is not None and (count is None or count < 1):
            raise reader.fail(f"{where}.count must be >= 1 with id_prefix", "count")
        if ident is not None and count is not None:
            raise reader.fail(f"{where}: 'count' only goes with 'id_prefix'", "count")
        if kind == "builders":
            strat = reader.table(fields.pop("strategy") or {}, STRATEGY, f"{where}.strategy")
        ids = [ident] if ident is not None else [f"{prefix}{j:0{len(str(count - 1))}d}" for j in range(count)]
        for actor_id in ids:
            try:
                if kind == "builders":
                    actors.append(BuilderProfile(id=actor_id, strategy=BuilderStrategy(**strat), **fields))
                else:
                    actors.append(ACTOR_TYPES[kind](id=actor_id, **fields))
            except ValueError as exc:
                raise reader.fail(f"{where}: {exc}", kind) from None
    return actors


def parse_scenario_dict(data: dict, text: str = "") -> Scenario:
    reader = _Reader(text)
    top_schema = dict(TOP)
    allowed = set(top_schema) | set(TABLES) | set(ACTORS)
    for key in data:
        if key not in allowed:
            raise reader.fail(f"unknown key '{key}'", key)
    for key in REQUIRED_TOP + ("validators",):
        if key not in data:
            raise ConfigError(f"missing required key '{key}'", key)
    top = reader.table({k: v for k, v in data.items() if k in TOP}, TOP, "")
    tables = {name: reader.table(data.get(name, {}), schema, name) for name, schema in TABLES.items()}
    actors = {kind: _expand(reader, data.get(kind, []), kind) for kind in ACTORS}

    mech = top["mechanism"]
    if mech not in MECHANISMS:
        raise reader.fail(f"unknown mechanism '{mech}' (expected one of {', '.join(MECHANISMS)})", "mechanism")
    if mech == MEV_BURN and top["committee_deadline_tick"] is None:
        raise ConfigError("mechanism 'mev-burn' requires key 'committee_deadline_tick'", "committee_deadline_tick",
                          reader.line_of("mechanism"))
    if mech == MEV_BOOST and not actors["relays"]:
        raise ConfigError("mechanism 'mev-boost' requires at least one entry in 'relays'", "relays",
                          reader.line_of("mechanism"))
    if mech in BUILDER_MECHANISMS and not actors["builders"]:
        raise ConfigError(f"mechanism '{mech}' requires at least one entry in 'builders'", "builders",
                          reader.line_of("mechanism"))
    if not actors["validators"]:
        raise ConfigError("at least one validator is required", "validators")

    try:
        config = SimulationConfig(
            validators=actors["validators"],
            builders=actors["builders"],
            relays=actors["relays"],
            cohorts=actors["cohorts"],
            reward_params=RewardParams(**tables["rewards"]),
            duty_weights=DutyWeights(**tables["duty_weights"]),
            opportunity=OpportunityParams(**tables["opportunity"]),
            **top,
        )
    except ValueError as exc:
        key = _guess_key(str(exc))
        raise ConfigError(str(exc), key, reader.line_of(key) if key else None) from None

    output, sweep = tables["output"], tables["sweep"]
    if output["format"] not in FORMATS:
        raise reader.fail(f"output.format must be one of {', '.join(FORMATS)}", "format")
    seeds: list[int] = []
    if sweep["seeds"] is not None:
        if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in sweep["seeds"]):
            raise reader.fail("sweep.seeds must be non-negative integers", "seeds")
        seeds = sorted(sweep["seeds"])
    elif sweep["count"] is not None:
        seeds = list(range(config.seed, config.seed + sweep["count"]))
    return Scenario(config, output["dir"], output["format"], seeds)


def _guess_key(message: str) -> Optional[str]:
    if "duty weights" in message:
        return "duty_weights"
    for key in (*TOP, *TABLES["opportunity"], *TABLES["rewards"]):
        if key in message:
            return key
    return None


def load_scenario(path) -> Scenario:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    return parse_scenario_dict(data, text)


def parse_config(path) -> SimulationConfig:
    return load_scenario(path).config


def config_from_dict(data: dict) -> SimulationConfig:
    return parse_scenario_dict(data).config


def _out(value):
    if isinstance(value, Fraction):
        return fraction_out(value)
    return value


def config_to_dict(config: SimulationConfig) -> dict:
    """Resolved config with every default filled in; reparses to an equal config."""
    out: dict[str, Any] = {}
    for key in TOP:
        value = getattr(config, key)
        if value is not None:
            out[key] = _out(value)
    out["rewards"] = {k: getattr(config.reward_params, k) for k in TABLES["rewards"]}
    out["duty_weights"] = {k: getattr(config.duty_weights, k) for k in TABLES["duty_weights"]}
    out["opportunity"] = {k: _out(getattr(config.opportunity, k)) for k in TABLES["opportunity"]}
    for kind, schema in ACTORS.items():
        rows = []
        for actor in getattr(config, kind):
            row: dict[str, Any] = {"id": actor.id}
            for key in schema:
                if key == "strategy":
                    row["strategy"] = {
                        k: _out(getattr(actor.strategy, k))
                        for k in STRATEGY
                        if getattr(actor.strategy, k) is not None
                    }
                else:
                    row[key] = _out(getattr(actor, key))
            rows.append(row)
        out[kind] = rows
    return out
