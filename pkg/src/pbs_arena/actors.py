"""Participants of the block-production market and their strategy knobs.

Profiles are plain dataclasses.  The few mutable fields (relay reputation and
trip state, builder exit) are owned by a single simulation run; the engine
copies every profile before a run starts so configs can be reused.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

from .units import Gwei, mul_floor, to_fraction, unit_fraction

DEFAULT_REPUTATION_STEP = Fraction(1, 10)


@dataclass(frozen=True)
class MevOpportunitySet:
    """Value available in one slot, in Gwei.

    ``flagged_value`` is the part of ``common_value`` a censoring builder
    refuses to touch; ``exclusive_value`` is private orderflow that builders
    see only in proportion to their ``exclusive_orderflow_share``.
    """

    common_value: Gwei = 0
    exclusive_value: Gwei = 0
    flagged_value: Gwei = 0
    priority_fees: Gwei = 0

    def __post_init__(self) -> None:
        if min(self.common_value, self.exclusive_value, self.flagged_value, self.priority_fees) < 0:
            raise ValueError("opportunity values must be non-negative")
        if self.flagged_value > self.common_value:
            raise ValueError("flagged_value cannot exceed common_value")


@dataclass
class ValidatorProfile:
    id: str
    effective_balance: Gwei
    mev_capability: Fraction = Fraction(0)
    uses_outsourcing: bool = True

    def __post_init__(self) -> None:
        if self.effective_balance <= 0:
            raise ValueError(f"validator {self.id}: effective_balance must be > 0")
        self.mev_capability = unit_fraction(self.mev_capability, "mev_capability")


@dataclass
class BuilderStrategy:
    """How a builder turns extracted value into bids.

    ``tip_share`` is the part of the bid routed to the proposer as a tip when
    the mechanism also asks for a burn (burn auction, MEV burn); the rest is
    burned.  ``bid_tick`` and ``reveal_tick`` are the builder's fixed timing
    inside a slot.
    """

    bid_margin: Fraction = Fraction(1, 10)
    overbid_from_reserve: bool = False
    reveal_honestly: bool = True
    collude_after_deadline: bool = False
    exit_loss_threshold: Optional[Gwei] = None
    tip_share: Fraction = Fraction(1, 10)
    bid_tick: int = 1
    reveal_tick: int = 4

    def __post_init__(self) -> None:
        self.bid_margin = unit_fraction(self.bid_margin, "bid_margin")
        self.tip_share = unit_fraction(self.tip_share, "tip_share")
        if self.exit_loss_threshold is not None and self.exit_loss_threshold < 0:
            raise ValueError("exit_loss_threshold must be >= 0")
        if self.bid_tick < 0 or self.reveal_tick < 0:
            raise ValueError("ticks must be >= 0")


@dataclass
class BuilderProfile:
    id: str
    stake: Gwei = 0
    reserve: Gwei = 0
    extraction_efficiency: Fraction = Fraction(1)
    exclusive_orderflow_share: Fraction = Fraction(0)
    censors: bool = False
    strategy: BuilderStrategy = field(default_factory=BuilderStrategy)
    exited: bool = False

    def __post_init__(self) -> None:
        if self.stake < 0 or self.reserve < 0:
            raise ValueError(f"builder {self.id}: stake and reserve must be >= 0")
        self.extraction_efficiency = unit_fraction(self.extraction_efficiency, "extraction_efficiency")
        self.exclusive_orderflow_share = unit_fraction(
            self.exclusive_orderflow_share, "exclusive_orderflow_share"
        )

    @property
    def credit_limit(self) -> Gwei:
        """How far below zero the builder's ledger balance may go."""
        return self.stake + self.reserve


@dataclass
class RelayProfile:
    id: str
    honest: bool = True
    theft_threshold: Gwei = 0
    reputation: Fraction = Fraction(1)
    tripped: bool = False

    def __post_init__(self) -> None:
        self.reputation = unit_fraction(self.reputation, "reputation")
        if self.theft_threshold < 0:
            raise ValueError("theft_threshold must be >= 0")


@dataclass
class UserCohort:
    id: str
    uses_mev_share: bool = False
    kickback_balance: Gwei = 0

    def __post_init__(self) -> None:
        if self.kickback_balance < 0:
            raise ValueError("kickback_balance must be >= 0")


class RelayEvent(enum.Enum):
    FRAUD = "fraud"
    DELIVERY = "delivery"


def builder_extracted_value(builder: BuilderProfile, opportunities: MevOpportunitySet) -> Gwei:
    """Value the builder can pull out of the slot, floored to whole Gwei."""
    common = opportunities.common_value
    if builder.censors:
        common -= opportunities.flagged_value
    share = builder.exclusive_orderflow_share
    eff = builder.extraction_efficiency
    visible = common * share.denominator + share.numerator * opportunities.exclusive_value
    return eff.numerator * visible // (eff.denominator * share.denominator)


def builder_private_value(builder: BuilderProfile, opportunities: MevOpportunitySet) -> Gwei:
    """Part of :func:`builder_extracted_value` that comes from private orderflow."""
    eff = builder.extraction_efficiency
    share = builder.exclusive_orderflow_share
    return mul_floor(opportunities.exclusive_value, eff * share)


def update_relay_reputation(
    relay: RelayProfile, event: RelayEvent, step: Fraction = DEFAULT_REPUTATION_STEP
) -> RelayProfile:
    """Return the relay after a circuit-breaker or delivery event."""
    if event is RelayEvent.FRAUD:
        if relay.tripped:
            raise ValueError(f"relay {relay.id} is already tripped")
        return replace(relay, reputation=Fraction(0), tripped=True)
    return replace(relay, reputation=min(Fraction(1), relay.reputation + to_fraction(step)))
