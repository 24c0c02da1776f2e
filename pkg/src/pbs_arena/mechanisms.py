"""Per-slot auction and settlement rules.

Each ``run_*`` function consumes a :class:`SlotContext` plus the actor
profiles and returns a :class:`SlotRecord` listing every Gwei movement the
slot implies.  Nothing here touches the ledger; the engine applies records.
The only side effect is relay reputation in :func:`run_mev_boost`, which
updates the relay list in place.

Tie-breaks between equal bids always favour the lexicographically smaller
builder id.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Optional, Sequence

from .actors import (
    DEFAULT_REPUTATION_STEP,
    BuilderProfile,
    MevOpportunitySet,
    RelayEvent,
    RelayProfile,
    UserCohort,
    ValidatorProfile,
    builder_extracted_value,
    builder_private_value,
    update_relay_reputation,
)
from .forkchoice import DEFAULT_PTC_BOOST, PtcVerdict, SlotOutcome, apply_ptc_boost
from .rewards import SettlementError
from .units import Gwei, mul_floor

LOCAL = "local"
MEV_BOOST = "mev-boost"
EPBS = "epbs"
EPBS_SMOOTHING = "epbs-smoothing"
BURN_AUCTION = "burn-auction"
MEV_BURN = "mev-burn"
MECHANISMS = (LOCAL, MEV_BOOST, EPBS, EPBS_SMOOTHING, BURN_AUCTION, MEV_BURN)

MEV_SHARE_KICKBACK = Fraction(9, 10)


class BidCoverageError(SettlementError):
    """A winning builder's stake and reserve cannot back its bid."""


@dataclass(frozen=True)
class SlotContext:
    slot_number: int
    proposer: str
    opportunities: MevOpportunitySet
    ticks_per_slot: int = 12
    committee: tuple[str, ...] = ()
    proposer_present: bool = True
    attester_rewards: tuple[tuple[str, Gwei], ...] = ()
    proposer_reward: Gwei = 0
    attestation_reward: Gwei = 0
    committee_weight: int = 0
    # builder id -> Gwei it can still pay out; missing ids use stake + reserve
    funds: Mapping[str, Gwei] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.ticks_per_slot < 2:
            raise ValueError("ticks_per_slot must be >= 2")


@dataclass(frozen=True)
class MechanismSettings:
    payload_deadline_tick: int = 9
    ptc_boost: Fraction = DEFAULT_PTC_BOOST
    kickback_fraction: Fraction = MEV_SHARE_KICKBACK
    reputation_step: Fraction = DEFAULT_REPUTATION_STEP
    relay_fallback: str = "local"
    cohorts: tuple[UserCohort, ...] = ()


DEFAULT_SETTINGS = MechanismSettings()


@dataclass(frozen=True, slots=True)
class Bid:
    builder: str
    payment_to_proposer: Gwei = 0
    burn_commitment: Gwei = 0
    base_fee: Gwei = 0
    tip: Gwei = 0
    arrival_tick: int = 0
    extracted_value: Gwei = 0

    @property
    def outlay(self) -> Gwei:
        """Everything the builder owes if selected."""
        return self.payment_to_proposer + self.burn_commitment + self.base_fee


@dataclass
class SlotRecord:
    slot_number: int
    mechanism: str
    proposer: str
    outcome: SlotOutcome
    bids: list[Bid] = field(default_factory=list)
    winner: Optional[str] = None
    payments: list[tuple[str, str, Gwei]] = field(default_factory=list)
    burns: list[tuple[str, Gwei]] = field(default_factory=list)
    kickbacks: list[tuple[str, Gwei]] = field(default_factory=list)
    ptc: Optional[PtcVerdict] = None
    issuance: list[tuple[str, Gwei]] = field(default_factory=list)
    extractions: list[tuple[str, Gwei]] = field(default_factory=list)
    attestation_issued: Gwei = 0
    floor: Optional[Gwei] = None
    flagged_available: Gwei = 0
    flagged_excluded: Gwei = 0
    relay_forwards: dict[str, int] = field(default_factory=dict)
    stolen_by: Optional[str] = None
    became_head: Optional[bool] = None

    @property
    def proposer_income(self) -> Gwei:
        """Non-protocol income of the proposer in this slot."""
        p = self.proposer
        return sum(a for _, to, a in self.payments if to == p) + sum(
            a for to, a in self.extractions if to == p
        )

    @property
    def builder_profit(self) -> Gwei:
        """Net result of the winning builder (0 when no builder won)."""
        w = self.winner
        if w is None or w == self.proposer or self.stolen_by is not None:
            return 0
        return (
            sum(a for to, a in self.extractions if to == w)
            - sum(a for src, _, a in self.payments if src == w)
            - sum(a for src, a in self.burns if src == w)
            - sum(a for _, a in self.kickbacks)
        )

    @property
    def burned(self) -> Gwei:
        return sum(a for _, a in self.burns)

    @property
    def kickback_total(self) -> Gwei:
        return sum(a for _, a in self.kickbacks)


# -- helpers -----------------------------------------------------------------


def _record(ctx: SlotContext, mechanism: str, outcome: SlotOutcome, **kw) -> SlotRecord:
    issuance = list(ctx.attester_rewards)
    if outcome is not SlotOutcome.SKIPPED and ctx.proposer_reward:
        issuance.append((ctx.proposer, ctx.proposer_reward))
    return SlotRecord(
        slot_number=ctx.slot_number,
        mechanism=mechanism,
        proposer=ctx.proposer,
        outcome=outcome,
        issuance=issuance,
        attestation_issued=ctx.attestation_reward,
        **kw,
    )


def skipped_record(ctx: SlotContext, mechanism: str, bids: Sequence[Bid] = (), **kw) -> SlotRecord:
    return _record(ctx, mechanism, SlotOutcome.SKIPPED, bids=list(bids), **kw)


def _funds(ctx: SlotContext, builder: BuilderProfile) -> Gwei:
    return ctx.funds.get(builder.id, builder.credit_limit)


def _active(builders: Sequence[BuilderProfile]) -> list[BuilderProfile]:
    return sorted((b for b in builders if not b.exited), key=lambda b: b.id)


def _block_value(builder: BuilderProfile, opps: MevOpportunitySet) -> Gwei:
    return builder_extracted_value(builder, opps) + opps.priority_fees


def _after_margin(value: Gwei, margin: Fraction) -> Gwei:
    """floor(value * (1 - margin))"""
    den = margin.denominator
    return value * (den - margin.numerator) // den


def _cap(builder: BuilderProfile, value: Gwei, ctx: SlotContext) -> Gwei:
    """Largest outlay the builder is willing to commit to."""
    funds = _funds(ctx, builder)
    if builder.strategy.reveal_honestly:
        return value + funds
    return funds


def _outbid(bids: list[Bid], by: dict[str, BuilderProfile], caps: dict[str, Gwei], key: str) -> list[Bid]:
    """Raise each reserve-backed builder's ranked amount just above the best rival."""
    out = list(bids)
    for i, bid in enumerate(out):
        if not by[bid.builder].strategy.overbid_from_reserve:
            continue
        rival = max((getattr(o, key) for o in out if o.builder != bid.builder), default=None)
        if rival is None:
            continue
        current = getattr(bid, key)
        lift = min(rival + 1 - current, caps[bid.builder] - bid.outlay)
        if lift > 0:
            changes = {key: current + lift}
            if key == "tip":
                changes["payment_to_proposer"] = bid.payment_to_proposer + lift
            out[i] = replace(bid, **changes)
    return out


def _best(bids: Sequence[Bid], key: str) -> Bid:
    return min(bids, key=lambda b: (-getattr(b, key), b.builder))


def _censorship(opps: MevOpportunitySet, builder: Optional[BuilderProfile]) -> dict:
    excluded = opps.flagged_value if builder is not None and builder.censors else 0
    return {"flagged_available": opps.flagged_value, "flagged_excluded": excluded}


def _revealed(builder: BuilderProfile, settings: MechanismSettings) -> bool:
    s = builder.strategy
    return s.reveal_honestly and s.reveal_tick <= settings.payload_deadline_tick


def _verdict(ctx: SlotContext, revealed: bool, settings: MechanismSettings) -> tuple[PtcVerdict, bool]:
    verdict = PtcVerdict(revealed, ctx.committee_weight, settings.ptc_boost)
    # candidate vs. parent, both without prior attestation weight
    return verdict, apply_ptc_boost(0, verdict) > 0


def _check_cover(builder: BuilderProfile, outlay: Gwei, income: Gwei, ctx: SlotContext) -> None:
    funds = _funds(ctx, builder)
    if outlay > income + funds:
        raise BidCoverageError(builder.id, outlay, funds - builder.credit_limit, builder.credit_limit, ctx.slot_number)


# -- mechanisms ----------------------------------------------------------------


def run_local_build(
    ctx: SlotContext, proposer_profile: ValidatorProfile, mechanism: str = LOCAL
) -> SlotRecord:
    if not ctx.proposer_present:
        return skipped_record(ctx, mechanism)
    opps = ctx.opportunities
    income = mul_floor(opps.common_value, proposer_profile.mev_capability) + opps.priority_fees
    extractions = [(ctx.proposer, income)] if income else []
    return _record(
        ctx,
        mechanism,
        SlotOutcome.FULL,
        winner=ctx.proposer,
        extractions=extractions,
        **_censorship(opps, None),
    )


def mev_share_split(
    extracted_from_private_flow: Gwei, kickback_fraction: Fraction = MEV_SHARE_KICKBACK
) -> tuple[Gwei, Gwei]:
    """(user kickback, builder retained) for value taken from private orderflow."""
    if extracted_from_private_flow < 0:
        raise ValueError("amount must be non-negative")
    kickback = mul_floor(extracted_from_private_flow, kickback_fraction)
    return kickback, extracted_from_private_flow - kickback


def _split_kickback(total: Gwei, cohorts: Sequence[UserCohort]) -> list[tuple[str, Gwei]]:
    n = len(cohorts)
    share, rem = divmod(total, n)
    out = []
    for i, c in enumerate(cohorts):
        amt = share + (rem if i == 0 else 0)
        if amt:
            out.append((c.id, amt))
    return out


def run_mev_boost(
    ctx: SlotContext,
    builders: Sequence[BuilderProfile],
    relays: list[RelayProfile],
    settings: MechanismSettings = DEFAULT_SETTINGS,
    proposer_profile: Optional[ValidatorProfile] = None,
) -> SlotRecord:
    """Relay-mediated auction.

    Every active builder submits to every untripped relay; each relay forwards
    what it receives.  A dishonest relay whose best forwarded block is worth at
    least its theft threshold steals that block and is tripped (``relays`` is
    updated in place).
    """
    if not ctx.proposer_present:
        return skipped_record(ctx, MEV_BOOST)
    open_relays = sorted((r for r in relays if not r.tripped), key=lambda r: r.id)
    if not open_relays:
        if settings.relay_fallback == "local" and proposer_profile is not None:
            return run_local_build(ctx, proposer_profile, MEV_BOOST)
        return skipped_record(ctx, MEV_BOOST)

    opps = ctx.opportunities
    share_cohorts = [c for c in settings.cohorts if c.uses_mev_share]
    active = _active(builders)
    by = {b.id: b for b in active}
    bids: list[Bid] = []
    caps: dict[str, Gwei] = {}
    kick_due: dict[str, Gwei] = {}
    for b in active:
        value = _block_value(b, opps)
        kick = mev_share_split(builder_private_value(b, opps), settings.kickback_fraction)[0] if share_cohorts else 0
        kick_due[b.id] = kick
        net = value - kick
        pay = _after_margin(net, b.strategy.bid_margin)
        caps[b.id] = _cap(b, net, ctx)
        bids.append(Bid(b.id, payment_to_proposer=pay, arrival_tick=b.strategy.bid_tick, extracted_value=value))
    bids = _outbid(bids, by, caps, "payment_to_proposer")
    forwards = {r.id: len(bids) for r in open_relays}
    if not bids:
        return skipped_record(ctx, MEV_BOOST, relay_forwards=forwards)

    best = _best(bids, "payment_to_proposer")
    builder = by[best.builder]
    for r in open_relays:
        if not r.honest and best.extracted_value >= r.theft_threshold:
            idx = relays.index(r)
            relays[idx] = update_relay_reputation(r, RelayEvent.FRAUD, settings.reputation_step)
            return _record(
                ctx,
                MEV_BOOST,
                SlotOutcome.FULL,
                bids=bids,
                winner=r.id,
                extractions=[(r.id, best.extracted_value)] if best.extracted_value else [],
                relay_forwards=forwards,
                stolen_by=r.id,
                **_censorship(opps, builder),
            )

    _check_cover(builder, best.outlay, best.extracted_value - kick_due[best.builder], ctx)
    delivering = open_relays[0]
    relays[relays.index(delivering)] = update_relay_reputation(
        delivering, RelayEvent.DELIVERY, settings.reputation_step
    )
    extractions = [(builder.id, best.extracted_value)] if best.extracted_value else []
    payments = [(builder.id, ctx.proposer, best.payment_to_proposer)] if best.payment_to_proposer else []
    kickbacks = _split_kickback(kick_due[builder.id], share_cohorts) if share_cohorts else []
    return _record(
        ctx,
        MEV_BOOST,
        SlotOutcome.FULL,
        bids=bids,
        winner=builder.id,
        extractions=extractions,
        payments=payments,
        kickbacks=kickbacks,
        relay_forwards=forwards,
        **_censorship(opps, builder),
    )


def _header_bids(ctx: SlotContext, builders: Sequence[BuilderProfile]) -> tuple[list[Bid], dict[str, BuilderProfile]]:
    active = _active(builders)
    by = {b.id: b for b in active}
    bids = []
    caps = {}
    for b in active:
        value = _block_value(b, ctx.opportunities)
        pay = _after_margin(value, b.strategy.bid_margin)
        caps[b.id] = _cap(b, value, ctx)
        bids.append(Bid(b.id, payment_to_proposer=pay, arrival_tick=b.strategy.bid_tick, extracted_value=value))
    return _outbid(bids, by, caps, "payment_to_proposer"), by


def _epbs_slot(
    ctx: SlotContext, builders: Sequence[BuilderProfile], settings: MechanismSettings, mechanism: str
) -> SlotRecord:
    if not ctx.proposer_present:
        return skipped_record(ctx, mechanism)
    bids, by = _header_bids(ctx, builders)
    if not bids:
        return skipped_record(ctx, mechanism, bids)
    best = _best(bids, "payment_to_proposer")
    builder = by[best.builder]
    revealed = _revealed(builder, settings)
    value = best.extracted_value if revealed else 0
    _check_cover(builder, best.outlay, value, ctx)
    verdict, head = _verdict(ctx, revealed, settings)
    pay = best.payment_to_proposer
    if mechanism == EPBS_SMOOTHING:
        payouts, remainder = smoothing_distribute(pay, ctx.committee)
        payments = [(builder.id, member, amt) for member, amt in payouts if amt]
        burns = [(builder.id, remainder)] if remainder else []
    else:
        payments = [(builder.id, ctx.proposer, pay)]
        burns = []
    return _record(
        ctx,
        mechanism,
        SlotOutcome.FULL if revealed else SlotOutcome.EMPTY,
        bids=bids,
        winner=builder.id,
        extractions=[(builder.id, value)] if value else [],
        payments=payments,
        burns=burns,
        ptc=verdict,
        became_head=head,
        **(_censorship(ctx.opportunities, builder) if revealed else {}),
    )


def run_epbs(
    ctx: SlotContext, builders: Sequence[BuilderProfile], settings: MechanismSettings = DEFAULT_SETTINGS
) -> SlotRecord:
    """Header auction with unconditional proposer payment.

    The proposer is paid once it commits to a header, whether or not the
    builder reveals the payload; an unrevealed payload makes the slot Empty.
    """
    return _epbs_slot(ctx, builders, settings, EPBS)


def smoothing_distribute(total: Gwei, committee: Sequence[str]) -> tuple[list[tuple[str, Gwei]], Gwei]:
    n = len(committee)
    if n == 0:
        raise ValueError("committee must be nonempty")
    share, remainder = divmod(total, n)
    return [(member, share) for member in committee], remainder


def run_epbs_smoothing(
    ctx: SlotContext, builders: Sequence[BuilderProfile], settings: MechanismSettings = DEFAULT_SETTINGS
) -> SlotRecord:
    """As :func:`run_epbs`, but the winning payment goes to the slot committee
    in equal shares; the indivisible remainder is burned."""
    if not ctx.committee:
        raise ValueError("smoothing needs a nonempty committee")
    return _epbs_slot(ctx, builders, settings, EPBS_SMOOTHING)


def run_burn_auction(
    ctx: SlotContext,
    builders: Sequence[BuilderProfile],
    enforced: bool = True,
    settings: MechanismSettings = DEFAULT_SETTINGS,
) -> SlotRecord:
    """Builders compete on burn commitments.

    Enforced: highest burn wins and side tips are dropped.  Unenforced: the
    proposer takes the highest tip, however little it burns.
    """
    if not ctx.proposer_present:
        return skipped_record(ctx, BURN_AUCTION)
    active = _active(builders)
    by = {b.id: b for b in active}
    bids = []
    caps = {}
    for b in active:
        value = _block_value(b, ctx.opportunities)
        total = _after_margin(value, b.strategy.bid_margin)
        tip = mul_floor(total, b.strategy.tip_share)
        burn = total - tip
        if enforced:
            tip = 0
        caps[b.id] = _cap(b, value, ctx)
        bids.append(
            Bid(
                b.id,
                payment_to_proposer=tip,
                burn_commitment=burn,
                tip=tip,
                arrival_tick=b.strategy.bid_tick,
                extracted_value=value,
            )
        )
    key = "burn_commitment" if enforced else "tip"
    bids = _outbid(bids, by, caps, key)
    if not bids:
        return skipped_record(ctx, BURN_AUCTION)
    best = _best(bids, key)
    builder = by[best.builder]
    _check_cover(builder, best.outlay, best.extracted_value, ctx)
    return _record(
        ctx,
        BURN_AUCTION,
        SlotOutcome.FULL,
        bids=bids,
        winner=builder.id,
        extractions=[(builder.id, best.extracted_value)] if best.extracted_value else [],
        payments=[(builder.id, ctx.proposer, best.tip)] if best.tip else [],
        burns=[(builder.id, best.burn_commitment)] if best.burn_commitment else [],
        **_censorship(ctx.opportunities, builder),
    )


def mev_burn_floor(bids: Sequence[Bid], committee_deadline_tick: int) -> Gwei:
    """Highest base fee the committee saw by its deadline."""
    return max((b.base_fee for b in bids if b.arrival_tick <= committee_deadline_tick), default=0)


def mev_burn_select(
    bids: Sequence[Bid], committee_deadline_tick: int, ticks_per_slot: int
) -> tuple[Gwei, Optional[Bid]]:
    """(floor, winner) under the committee floor rule; winner is None if nothing is eligible."""
    floor = mev_burn_floor(bids, committee_deadline_tick)
    eligible = [b for b in bids if b.base_fee >= floor and b.arrival_tick < ticks_per_slot]
    if not eligible:
        return floor, None
    return floor, _best(eligible, "tip")


def run_mev_burn(
    ctx: SlotContext,
    builders: Sequence[BuilderProfile],
    committee_deadline_tick: int,
    settings: MechanismSettings = DEFAULT_SETTINGS,
) -> SlotRecord:
    """Base-fee burn with a committee-observed floor.

    Colluding builders wait until after the committee deadline and bid a zero
    base fee with everything in the tip.
    """
    ticks = ctx.ticks_per_slot
    if not 0 <= committee_deadline_tick < ticks:
        raise ValueError("committee_deadline_tick must lie inside the slot")
    if not ctx.proposer_present:
        return skipped_record(ctx, MEV_BURN)
    active = _active(builders)
    by = {b.id: b for b in active}
    bids = []
    caps = {}
    for b in active:
        s = b.strategy
        value = _block_value(b, ctx.opportunities)
        total = _after_margin(value, s.bid_margin)
        if s.collude_after_deadline:
            tick = committee_deadline_tick + 1
            if tick >= ticks:
                continue
            base, tip = 0, total
        else:
            tick = s.bid_tick
            tip = mul_floor(total, s.tip_share)
            base = total - tip
        caps[b.id] = _cap(b, value, ctx)
        bids.append(
            Bid(b.id, payment_to_proposer=tip, base_fee=base, tip=tip, arrival_tick=tick, extracted_value=value)
        )

    floor, best = mev_burn_select(bids, committee_deadline_tick, ticks)
    if any(by[b.builder].strategy.overbid_from_reserve for b in bids):
        # only tips are raised, so the floor and the eligible set do not move
        eligible = [b for b in bids if b.base_fee >= floor and b.arrival_tick < ticks]
        lifted = {b.builder: b for b in _outbid(eligible, by, caps, "tip")}
        bids = [lifted.get(b.builder, b) for b in bids]
        floor, best = mev_burn_select(bids, committee_deadline_tick, ticks)
    if best is None:
        return skipped_record(ctx, MEV_BURN, bids, floor=floor)

    builder = by[best.builder]
    revealed = _revealed(builder, settings)
    value = best.extracted_value if revealed else 0
    _check_cover(builder, best.outlay, value, ctx)
    verdict, head = _verdict(ctx, revealed, settings)
    return _record(
        ctx,
        MEV_BURN,
        SlotOutcome.FULL if revealed else SlotOutcome.EMPTY,
        bids=bids,
        winner=builder.id,
        extractions=[(builder.id, value)] if value else [],
        # kept even at zero so an Empty slot always shows the proposer payment
        payments=[(builder.id, ctx.proposer, best.tip)],
        burns=[(builder.id, best.base_fee)] if best.base_fee else [],
        floor=floor,
        ptc=verdict,
        became_head=head,
        **(_censorship(ctx.opportunities, builder) if revealed else {}),
    )
