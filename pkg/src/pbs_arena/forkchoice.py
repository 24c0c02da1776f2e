"""Slot outcome classification and payload-timeliness weight boosts.

Fork choice is reduced to comparing one candidate block against its parent.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

from .units import mul_floor, to_fraction

DEFAULT_PTC_BOOST = Fraction(2, 5)


class SlotOutcome(str, enum.Enum):
    FULL = "Full"
    SKIPPED = "Skipped"
    EMPTY = "Empty"


@dataclass(frozen=True)
class PtcVerdict:
    timely_and_honest: bool
    committee_weight: int
    boost_fraction: Fraction = DEFAULT_PTC_BOOST

    def __post_init__(self) -> None:
        frac = to_fraction(self.boost_fraction)
        if not 0 < frac < 1:
            raise ValueError("boost_fraction must lie strictly between 0 and 1")
        object.__setattr__(self, "boost_fraction", frac)
        if self.committee_weight < 0:
            raise ValueError("committee_weight must be >= 0")

    @property
    def boost(self) -> int:
        return mul_floor(self.committee_weight, self.boost_fraction)

    @property
    def label(self) -> str:
        return "timely" if self.timely_and_honest else "withheld"


@dataclass(frozen=True)
class WeightedBlock:
    base_weight: int
    boosted_weight: int


def classify_slot(proposer_committed: bool, payload_revealed: bool) -> SlotOutcome:
    if not proposer_committed:
        return SlotOutcome.SKIPPED
    return SlotOutcome.FULL if payload_revealed else SlotOutcome.EMPTY


def apply_ptc_boost(base_weight: int, verdict: PtcVerdict) -> int:
    """Candidate weight after the committee vote.

    A withheld or late payload hands the boost to the parent, which is the
    same as subtracting it from the candidate.
    """
    if base_weight < 0:
        raise ValueError("base_weight must be >= 0")
    if verdict.timely_and_honest:
        return base_weight + verdict.boost
    return base_weight - verdict.boost


def weigh(base_weight: int, verdict: PtcVerdict) -> WeightedBlock:
    return WeightedBlock(base_weight, apply_ptc_boost(base_weight, verdict))


def becomes_head(candidate: WeightedBlock, parent_weight: int) -> bool:
    return candidate.boosted_weight > parent_weight
