"""Equity, concentration, burn and censorship statistics.

Internals are exact rationals; values are rounded to six decimals only when a
report is serialized.
"""

from __future__ import annotations

from collections import Counter
from fractions import Fraction
from typing import Mapping, Optional, Sequence

from .forkchoice import SlotOutcome
from .rewards import ConservationReport, Ledger, conservation_check
from .units import Gwei

DECIMALS = 6


def gini(values: Sequence[Gwei]) -> Fraction:
    """Gini coefficient by the sorted-rank formula

    G = 2 * sum(i * x_i) / (n * sum(x)) - (n + 1) / n, with i = 1..n ascending.
    """
    xs = sorted(values)
    n = len(xs)
    if n == 0:
        raise ValueError("gini of an empty list")
    if xs[0] < 0:
        raise ValueError("gini needs non-negative values")
    total = sum(xs)
    if total == 0:
        raise ValueError("gini is undefined when every value is zero")
    ranked = sum(i * x for i, x in enumerate(xs, start=1))
    return Fraction(2 * ranked, n * total) - Fraction(n + 1, n)


def hhi(win_values: Mapping[str, Gwei]) -> Fraction:
    total = sum(win_values.values())
    if total <= 0:
        raise ValueError("hhi needs a positive total")
    return sum((Fraction(v, total) ** 2 for v in win_values.values()), Fraction(0))


def variance(values: Sequence[Gwei]) -> Fraction:
    """Population variance."""
    n = len(values)
    if n == 0:
        raise ValueError("variance of an empty list")
    mean = Fraction(sum(values), n)
    return sum((x - mean) ** 2 for x in values) / n


def to_decimal(value: Optional[Fraction]) -> Optional[float]:
    return None if value is None else round(float(value), DECIMALS)


class SimulationReport:
    """Metrics of one run.  The conservation replay runs on first access."""

    def __init__(self, run, **values):
        self.run = run
        self.config = run.config
        self.ledger: Ledger = run.ledger
        self.table = run.table
        self.validator_rewards: dict[str, Gwei] = values["validator_rewards"]
        self.builder_profit: dict[str, Gwei] = values["builder_profit"]
        self.builder_wins: dict[str, int] = values["builder_wins"]
        self.builder_win_value: dict[str, Gwei] = values["builder_win_value"]
        self.relays: dict[str, dict] = values["relays"]
        self.gini: Optional[Fraction] = values["gini"]
        self.hhi: Optional[Fraction] = values["hhi"]
        self.reward_variance: Fraction = values["reward_variance"]
        self.burned_total: Gwei = values["burned_total"]
        self.kickback_total: Gwei = values["kickback_total"]
        self.protocol_issued_total: Gwei = values["protocol_issued_total"]
        self.attestation_issued_total: Gwei = values["attestation_issued_total"]
        self.user_extracted_total: Gwei = values["user_extracted_total"]
        self.proposer_income_total: Gwei = values["proposer_income_total"]
        self.outcome_counts: dict[str, int] = values["outcome_counts"]
        self.censorship_rate: Fraction = values["censorship_rate"]
        self._conservation: Optional[ConservationReport] = None

    @property
    def conservation(self) -> ConservationReport:
        if self._conservation is None:
            self._conservation = conservation_check(self.ledger, self.run.records)
        return self._conservation

    def __getstate__(self):
        # settle the conservation replay before the run is dropped
        state = dict(self.__dict__, _conservation=self.conservation)
        state["run"] = None
        return state

    @property
    def attestation_share(self) -> Optional[Fraction]:
        if not self.protocol_issued_total:
            return None
        return Fraction(self.attestation_issued_total, self.protocol_issued_total)

    def to_dict(self) -> dict:
        from .config import config_to_dict

        cons = self.conservation
        return {
            "config": config_to_dict(self.config),
            "metrics": {
                "gini": to_decimal(self.gini),
                "hhi": to_decimal(self.hhi),
                "reward_variance": to_decimal(self.reward_variance),
                "burned_total": self.burned_total,
                "kickback_total": self.kickback_total,
                "protocol_issued_total": self.protocol_issued_total,
                "attestation_issued_total": self.attestation_issued_total,
                "attestation_share": to_decimal(self.attestation_share),
                "user_extracted_total": self.user_extracted_total,
                "proposer_income_total": self.proposer_income_total,
                "outcome_counts": dict(self.outcome_counts),
                "censorship_rate": to_decimal(self.censorship_rate),
            },
            "validators": dict(self.validator_rewards),
            "builders": {
                b: {
                    "profit": self.builder_profit[b],
                    "wins": self.builder_wins.get(b, 0),
                    "win_value": self.builder_win_value.get(b, 0),
                }
                for b in self.builder_profit
            },
            "relays": self.relays,
            "conservation": {
                "ok": cons.ok,
                "residual": cons.residual,
                "identity_gap": cons.identity_gap,
                "first_offending_slot": cons.first_offending_slot,
            },
            "trace": "trace.csv",
        }


def build_report(run) -> SimulationReport:
    """Assemble the report for a finished :class:`~pbs_arena.engine.SimulationRun`."""
    ledger = run.ledger
    table = run.table
    rewards = {v.id: ledger.balance(v.id) for v in run.validators}
    builder_ids = [b.id for b in run.builders]

    wins: Counter = Counter()
    win_value: Counter = Counter()
    for b, value in zip(table.win_builder, table.win_value):
        if b is not None:
            wins[b] += 1
            win_value[b] += value
    outcomes = {o.value: 0 for o in SlotOutcome}
    for o, count in Counter(table.outcome).items():
        outcomes[o.value] = count
    flagged_available = sum(table.flagged_available)
    flagged_excluded = sum(table.flagged_excluded)

    values = list(rewards.values())
    positive = [v for v in values if v]
    return SimulationReport(
        run,
        validator_rewards=rewards,
        builder_profit={b: ledger.balance(b) for b in builder_ids},
        builder_wins={b: wins[b] for b in builder_ids},
        builder_win_value={b: win_value[b] for b in builder_ids},
        relays={
            r.id: {"tripped": r.tripped, "reputation": to_decimal(r.reputation), "balance": ledger.balance(r.id)}
            for r in run.relays
        },
        gini=gini(values) if positive and min(values) >= 0 else None,
        hhi=hhi(win_value) if sum(win_value.values()) > 0 else None,
        reward_variance=variance(values),
        burned_total=ledger.burned_total,
        kickback_total=ledger.user_kickback_total,
        protocol_issued_total=ledger.protocol_issued_total,
        attestation_issued_total=sum(table.attestation_issued),
        user_extracted_total=ledger.user_extracted_total,
        proposer_income_total=sum(table.proposer_income),
        outcome_counts=outcomes,
        censorship_rate=Fraction(flagged_excluded, flagged_available) if flagged_available else Fraction(0),
    )
