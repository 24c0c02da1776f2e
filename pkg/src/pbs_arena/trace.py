"""Columnar per-slot trace shared by both engines."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Sequence

from .forkchoice import SlotOutcome


@dataclass
class SlotTable:
    """One list per column; index i describes slot i."""

    mechanism: str
    proposer: list[str]
    winner: list[Optional[str]]
    outcome: list[SlotOutcome]
    proposer_income: list[int]
    builder_profit: list[int]
    burned: list[int]
    kickbacks: list[int]
    floor: list[Optional[int]]
    ptc: list[Optional[str]]
    attestation_issued: list[int]
    flagged_available: list[int]
    flagged_excluded: list[int]
    # builder that won the block (None for local builds, thefts and skips)
    win_builder: list[Optional[str]]
    win_value: list[int]

    def __len__(self) -> int:
        return len(self.proposer)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SlotTable):
            return NotImplemented
        return all(getattr(self, f.name) == getattr(other, f.name) for f in fields(self))

    @classmethod
    def from_records(cls, mechanism: str, records: Sequence, builder_ids) -> SlotTable:
        builders = set(builder_ids)
        win_builder = []
        win_value = []
        for r in records:
            if r.winner in builders and r.stolen_by is None:
                win_builder.append(r.winner)
                win_value.append(next(b.extracted_value for b in r.bids if b.builder == r.winner))
            else:
                win_builder.append(None)
                win_value.append(0)
        return cls(
            mechanism=mechanism,
            proposer=[r.proposer for r in records],
            winner=[r.winner for r in records],
            outcome=[r.outcome for r in records],
            proposer_income=[r.proposer_income for r in records],
            builder_profit=[r.builder_profit for r in records],
            burned=[r.burned for r in records],
            kickbacks=[r.kickback_total for r in records],
            floor=[r.floor for r in records],
            ptc=[r.ptc.label if r.ptc is not None else None for r in records],
            attestation_issued=[r.attestation_issued for r in records],
            flagged_available=[r.flagged_available for r in records],
            flagged_excluded=[r.flagged_excluded for r in records],
            win_builder=win_builder,
            win_value=win_value,
        )
