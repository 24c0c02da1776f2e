"""Protocol issuance and the Gwei ledger.

The ledger is double entry.  Value enters from two sources (protocol issuance
and value extracted from users) and leaves into two sinks (the burn and user
kickbacks); everything else is actor-to-actor payments.  Each movement is
journaled with its slot so :func:`conservation_check` can replay the slot
records against what the ledger actually did.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from math import isqrt
from typing import Iterable, Optional

from .units import Gwei

PROTOCOL = "<protocol>"
USERS = "<users>"
BURN = "<burn>"
KICKBACK = "<kickback>"


@dataclass(frozen=True)
class RewardParams:
    base_reward_factor: int = 64
    base_rewards_per_epoch: int = 4

    def __post_init__(self) -> None:
        if self.base_reward_factor <= 0 or self.base_rewards_per_epoch <= 0:
            raise ValueError("reward parameters must be positive")


@dataclass(frozen=True)
class DutyWeights:
    """Percent of the base reward paid for each duty."""

    source: int = 22
    target: int = 41
    head: int = 22
    sync: int = 3
    proposer: int = 12

    def __post_init__(self) -> None:
        parts = (self.source, self.target, self.head, self.sync, self.proposer)
        if any(p < 0 for p in parts):
            raise ValueError("duty weights must be non-negative")
        if sum(parts) != 100:
            raise ValueError(f"duty weights must sum to 100, got {sum(parts)}")


@dataclass(frozen=True)
class DutyRewards:
    source: Gwei
    target: Gwei
    head: Gwei
    sync: Gwei
    proposer: Gwei

    @property
    def attestation(self) -> Gwei:
        return self.source + self.target + self.head

    @property
    def total(self) -> Gwei:
        return self.attestation + self.sync + self.proposer


def base_reward(effective_balance: Gwei, total_active_balance: Gwei, params: RewardParams) -> Gwei:
    if total_active_balance <= 0:
        raise ValueError("total_active_balance must be positive")
    if effective_balance <= 0:
        raise ValueError("effective_balance must be positive")
    return (effective_balance * params.base_reward_factor) // (
        params.base_rewards_per_epoch * isqrt(total_active_balance)
    )


def duty_split(base: Gwei, weights: DutyWeights = DutyWeights()) -> DutyRewards:
    """Split ``base`` by duty; the flooring remainder goes to the proposer."""
    source = base * weights.source // 100
    target = base * weights.target // 100
    head = base * weights.head // 100
    sync = base * weights.sync // 100
    proposer = base - source - target - head - sync
    return DutyRewards(source, target, head, sync, proposer)


class SettlementError(Exception):
    """An actor was asked to pay beyond its credit limit."""

    def __init__(self, actor: str, amount: Gwei, balance: Gwei, limit: Gwei, slot: Optional[int] = None):
        self.actor = actor
        self.amount = amount
        self.balance = balance
        self.limit = limit
        self.slot = slot
        where = f" in slot {slot}" if slot is not None else ""
        super().__init__(
            f"{actor} cannot pay {amount} Gwei{where}: balance {balance}, may go down to -{limit}"
        )


class Ledger:
    """Integer Gwei balances plus burn and kickback sinks."""

    def __init__(self, journal: bool = True) -> None:
        # without a journal the ledger only keeps balances and totals
        self.journaling = journal
        self.balances: dict[str, Gwei] = {}
        self.limits: dict[str, Gwei] = {}
        self.burned_total: Gwei = 0
        self.user_kickback_total: Gwei = 0
        self.protocol_issued_total: Gwei = 0
        self.user_extracted_total: Gwei = 0
        self.kickbacks: dict[str, Gwei] = {}
        self.journal: list[tuple[Optional[int], str, str, Gwei]] = []
        self.slot: Optional[int] = None

    def open_account(self, actor: str, credit_limit: Gwei = 0) -> None:
        self.balances.setdefault(actor, 0)
        self.limits[actor] = credit_limit

    def balance(self, actor: str) -> Gwei:
        return self.balances.get(actor, 0)

    def headroom(self, actor: str) -> Gwei:
        """What ``actor`` can still pay out before hitting its limit."""
        return self.balances.get(actor, 0) + self.limits.get(actor, 0)

    def _debit(self, actor: str, amount: Gwei) -> None:
        if amount < 0:
            raise ValueError("amounts must be non-negative")
        bal = self.balances.get(actor, 0)
        limit = self.limits.get(actor, 0)
        if bal - amount < -limit:
            raise SettlementError(actor, amount, bal, limit, self.slot)
        self.balances[actor] = bal - amount

    def _credit(self, actor: str, amount: Gwei) -> None:
        if amount < 0:
            raise ValueError("amounts must be non-negative")
        self.balances[actor] = self.balances.get(actor, 0) + amount

    def issue(self, to: str, amount: Gwei) -> Ledger:
        self._credit(to, amount)
        self.protocol_issued_total += amount
        if self.journaling:
            self.journal.append((self.slot, PROTOCOL, to, amount))
        return self

    def extract(self, to: str, amount: Gwei) -> Ledger:
        """Credit value taken from users (MEV or priority fees) to ``to``."""
        self._credit(to, amount)
        self.user_extracted_total += amount
        if self.journaling:
            self.journal.append((self.slot, USERS, to, amount))
        return self

    def apply_payment(self, src: str, dst: str, amount: Gwei) -> Ledger:
        self._debit(src, amount)
        self._credit(dst, amount)
        if self.journaling:
            self.journal.append((self.slot, src, dst, amount))
        return self

    def apply_burn(self, src: str, amount: Gwei) -> Ledger:
        self._debit(src, amount)
        self.burned_total += amount
        if self.journaling:
            self.journal.append((self.slot, src, BURN, amount))
        return self

    def apply_kickback(self, src: str, cohort: str, amount: Gwei) -> Ledger:
        self._debit(src, amount)
        self.user_kickback_total += amount
        self.kickbacks[cohort] = self.kickbacks.get(cohort, 0) + amount
        if self.journaling:
            self.journal.append((self.slot, src, KICKBACK + cohort, amount))
        return self


def record_movements(record) -> list[tuple[str, str, Gwei]]:
    """Every (src, dst, amount) a slot record implies, in settlement order."""
    moves: list[tuple[str, str, Gwei]] = []
    moves.extend((PROTOCOL, to, amt) for to, amt in record.issuance)
    moves.extend((USERS, to, amt) for to, amt in record.extractions)
    moves.extend(record.payments)
    moves.extend((src, BURN, amt) for src, amt in record.burns)
    payer = record.winner
    moves.extend((payer, KICKBACK + cohort, amt) for cohort, amt in record.kickbacks)
    return moves


def apply_record(ledger: Ledger, record) -> Ledger:
    ledger.slot = record.slot_number
    try:
        for src, dst, amt in record_movements(record):
            if src == PROTOCOL:
                ledger.issue(dst, amt)
            elif src == USERS:
                ledger.extract(dst, amt)
            elif dst == BURN:
                ledger.apply_burn(src, amt)
            elif dst.startswith(KICKBACK):
                ledger.apply_kickback(src, dst[len(KICKBACK):], amt)
            else:
                ledger.apply_payment(src, dst, amt)
    finally:
        ledger.slot = None
    return ledger


@dataclass
class ConservationReport:
    """Outcome of replaying slot records against a ledger.

    ``identity_gap`` is (issued + extracted) - (balances + burned + kickbacks)
    with sources read from the records and sinks from the ledger.
    ``residual`` is the total absolute mismatch: the identity gap plus every
    per-account disagreement between record replay and ledger.
    """

    residual: Gwei = 0
    identity_gap: Gwei = 0
    account_residuals: dict[str, Gwei] = field(default_factory=dict)
    first_offending_slot: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.residual == 0


def _net(moves: Iterable[tuple[str, str, Gwei]]) -> dict[str, Gwei]:
    net: Counter = Counter()
    for src, dst, amt in moves:
        net[src] -= amt
        net[dst] += amt
    return {k: v for k, v in net.items() if v}


def conservation_check(ledger: Ledger, records: Iterable) -> ConservationReport:
    records = list(records)
    by_slot: dict[Optional[int], list] = {}
    for slot, src, dst, amt in ledger.journal:
        by_slot.setdefault(slot, []).append((src, dst, amt))

    replayed: Counter = Counter()
    first_bad: Optional[int] = None
    seen = set()
    for rec in records:
        moves = record_movements(rec)
        net = _net(moves)
        replayed.update(net)
        seen.add(rec.slot_number)
        if first_bad is None and ledger.journaling:
            actual = _net(by_slot.get(rec.slot_number, ()))
            if net != actual:
                first_bad = rec.slot_number
    if first_bad is None:
        stray = sorted(s for s in by_slot if s not in seen and s is not None)
        if stray:
            first_bad = stray[0]

    sources = -(replayed[PROTOCOL] + replayed[USERS])
    sinks = sum(ledger.balances.values()) + ledger.burned_total + ledger.user_kickback_total
    gap = sources - sinks
    internal = (
        ledger.protocol_issued_total + ledger.user_extracted_total - sinks
    )

    actual_state: Counter = Counter(ledger.balances)
    actual_state[BURN] = ledger.burned_total
    for cohort, amt in ledger.kickbacks.items():
        actual_state[KICKBACK + cohort] = amt
    accounts = (set(actual_state) | set(replayed)) - {PROTOCOL, USERS}
    diffs = {a: replayed[a] - actual_state[a] for a in sorted(accounts) if replayed[a] != actual_state[a]}

    residual = abs(gap) + abs(internal) + sum(abs(d) for d in diffs.values())
    if residual and first_bad is None and records:
        first_bad = records[0].slot_number
    return ConservationReport(
        residual=residual, identity_gap=gap, account_residuals=diffs, first_offending_slot=first_bad
    )
