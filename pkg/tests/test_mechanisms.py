from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbs_arena.actors import BuilderProfile, BuilderStrategy, MevOpportunitySet, RelayProfile, UserCohort, ValidatorProfile
from pbs_arena.forkchoice import SlotOutcome
from pbs_arena.mechanisms import (
    BidCoverageError,
    Bid,
    MechanismSettings,
    SlotContext,
    mev_burn_floor,
    mev_burn_select,
    mev_share_split,
    run_burn_auction,
    run_epbs,
    run_epbs_smoothing,
    run_local_build,
    run_mev_boost,
    run_mev_burn,
    smoothing_distribute,
)
from pbs_arena.rewards import Ledger, apply_record, conservation_check

COMMITTEE = tuple(f"c{i}" for i in range(8))
FLAT = BuilderStrategy(bid_margin=0)


def ctx(common=0, exclusive=0, flagged=0, fees=0, present=True, **kw):
    kw.setdefault("committee", COMMITTEE)
    return SlotContext(
        slot_number=kw.pop("slot", 0),
        proposer="p",
        opportunities=MevOpportunitySet(common, exclusive, flagged, fees),
        proposer_present=present,
        **kw,
    )


def builder(name, eff=1, stake=10**6, **strategy):
    return BuilderProfile(name, stake=stake, extraction_efficiency=eff, strategy=BuilderStrategy(**{"bid_margin": 0, **strategy}))


def settles(record, builders=(), relays=(), cohorts=()):
    """Apply one record to a fresh ledger and check it conserves."""
    led = Ledger()
    for a in ("p", *COMMITTEE):
        led.open_account(a)
    for b in builders:
        led.open_account(b.id, b.credit_limit)
    for r in relays:
        led.open_account(r.id)
    apply_record(led, record)
    assert conservation_check(led, [record]).ok
    return led


# local


@pytest.mark.parametrize("capability,pool,income", [(0, 1000, 0), (1, 500, 500), (0.3, 1000, 300)])
def test_local_build_income(capability, pool, income):
    rec = run_local_build(ctx(pool, proposer_reward=12), ValidatorProfile("p", 32, mev_capability=capability))
    assert rec.outcome is SlotOutcome.FULL
    assert rec.proposer_income == income
    led = settles(rec)
    assert led.balance("p") == income + 12


def test_local_build_absent_proposer_skips():
    rec = run_local_build(ctx(1000, present=False, proposer_reward=12), ValidatorProfile("p", 32, mev_capability=1))
    assert rec.outcome is SlotOutcome.SKIPPED
    assert rec.issuance == [] and rec.extractions == []


# mev-boost


def test_mev_boost_highest_bid_wins():
    builders = [builder("a", eff=Fraction(100, 1000)), builder("b", eff=Fraction(150, 1000))]
    relays = [RelayProfile("r")]
    rec = run_mev_boost(ctx(1000), builders, relays)
    assert rec.winner == "b"
    assert rec.payments == [("b", "p", 150)]
    assert rec.proposer_income == 150
    settles(rec, builders, relays)


def test_mev_boost_tie_goes_to_lower_id():
    builders = [builder("zed"), builder("amy")]
    rec = run_mev_boost(ctx(150), builders, [RelayProfile("r")])
    assert rec.winner == "amy"


def test_mev_boost_theft():
    builders = [builder("b")]
    relays = [RelayProfile("r", honest=False, theft_threshold=1000)]
    rec = run_mev_boost(ctx(1200), builders, relays)
    assert rec.winner == "r" and rec.stolen_by == "r"
    assert rec.extractions == [("r", 1200)]
    assert rec.proposer_income == 0
    assert relays[0].tripped and relays[0].reputation == 0
    led = settles(rec, builders, relays)
    assert led.balance("r") == 1200 and led.balance("b") == 0


def test_mev_boost_below_threshold_is_delivered():
    relays = [RelayProfile("r", honest=False, theft_threshold=1000, reputation=0.5)]
    rec = run_mev_boost(ctx(999), [builder("b")], relays)
    assert rec.stolen_by is None and rec.proposer_income == 999
    assert relays[0].reputation == Fraction(3, 5)


def test_tripped_relay_forwards_nothing():
    relays = [RelayProfile("honest"), RelayProfile("thief", tripped=True, reputation=0)]
    rec = run_mev_boost(ctx(100), [builder("a"), builder("b")], relays)
    assert rec.relay_forwards == {"honest": 2}


def test_mev_boost_no_relays_falls_back():
    v = ValidatorProfile("p", 32, mev_capability=1)
    rec = run_mev_boost(ctx(100), [builder("b")], [RelayProfile("r", tripped=True)], MechanismSettings(), v)
    assert rec.winner == "p" and rec.proposer_income == 100
    skip = run_mev_boost(ctx(100), [builder("b")], [], MechanismSettings(relay_fallback="skip"), v)
    assert skip.outcome is SlotOutcome.SKIPPED


@pytest.mark.parametrize("amount,split", [(100, (90, 10)), (0, (0, 0)), (101, (90, 11))])
def test_mev_share_split(amount, split):
    assert mev_share_split(amount) == split


def test_mev_boost_kickbacks():
    b = BuilderProfile("b", stake=10**6, exclusive_orderflow_share=1, strategy=FLAT)
    cohorts = (UserCohort("u1", True), UserCohort("u2", True), UserCohort("u3", False))
    rec = run_mev_boost(ctx(1000, exclusive=101), [b], [RelayProfile("r")], MechanismSettings(cohorts=cohorts))
    # private flow 101 -> kickback 90, split 45/45; the builder bids the rest
    assert rec.kickbacks == [("u1", 45), ("u2", 45)]
    assert rec.payments == [("b", "p", 1101 - 90)]
    assert rec.builder_profit == 0
    led = settles(rec, [b])
    assert led.kickbacks == {"u1": 45, "u2": 45}


@given(st.integers(0, 10**15), st.fractions(0, 1, max_denominator=10**6))
def test_mev_share_split_conserves(amount, frac):
    kick, kept = mev_share_split(amount, frac)
    assert kick + kept == amount and kick >= 0 and kept >= 0


# epbs


def test_epbs_honest():
    b = builder("b", bid_margin=Fraction(1, 10))
    rec = run_epbs(ctx(1000, committee_weight=1000), [b])
    assert rec.outcome is SlotOutcome.FULL
    assert rec.payments == [("b", "p", 900)]
    assert rec.builder_profit == 100
    assert rec.ptc.label == "timely" and rec.became_head
    settles(rec, [b])


def test_epbs_withholding_builder_still_pays():
    b = builder("b", reveal_honestly=False)
    rec = run_epbs(ctx(1000, committee_weight=1000), [b])
    assert rec.outcome is SlotOutcome.EMPTY
    assert rec.payments == [("b", "p", 1000)]
    assert rec.extractions == []
    assert rec.builder_profit == -1000
    assert rec.ptc.label == "withheld" and not rec.became_head
    led = settles(rec, [b])
    assert led.balance("b") == -1000


def test_epbs_late_reveal_is_empty():
    b = builder("b", reveal_tick=10)
    assert run_epbs(ctx(1000), [b]).outcome is SlotOutcome.EMPTY


def test_epbs_skipped_has_no_payments():
    rec = run_epbs(ctx(1000, present=False), [builder("b")])
    assert rec.outcome is SlotOutcome.SKIPPED
    assert rec.payments == [] and rec.burns == [] and rec.kickbacks == []


def test_epbs_withholding_beyond_cover():
    b = BuilderProfile("b", stake=10, strategy=BuilderStrategy(bid_margin=0, reveal_honestly=False))
    with pytest.raises(BidCoverageError):
        run_epbs(ctx(1000), [b])


@pytest.mark.parametrize("total,share,rem", [(1000, 125, 0), (0, 0, 0), (1001, 125, 1)])
def test_smoothing_distribute(total, share, rem):
    payouts, remainder = smoothing_distribute(total, COMMITTEE)
    assert payouts == [(c, share) for c in COMMITTEE]
    assert remainder == rem


def test_smoothing_requires_committee():
    with pytest.raises(ValueError):
        smoothing_distribute(10, [])


def test_epbs_smoothing_pays_committee():
    b = builder("b")
    rec = run_epbs_smoothing(ctx(1001), [b])
    assert rec.payments == [("b", c, 125) for c in COMMITTEE]
    assert rec.burns == [("b", 1)]
    assert rec.proposer_income == 0
    led = settles(rec, [b])
    assert led.burned_total == 1 and led.balance("c3") == 125


def test_epbs_smoothing_zero_payment():
    rec = run_epbs_smoothing(ctx(0), [builder("b")])
    assert rec.payments == [] and rec.burns == []


# burn auction


def burner(name, value, burn, tip):
    """A builder whose bid works out to exactly (burn, tip) on a pool of ``value``."""
    total = burn + tip
    return BuilderProfile(
        name,
        stake=10**6,
        extraction_efficiency=Fraction(value, 100),
        strategy=BuilderStrategy(bid_margin=1 - Fraction(total, value), tip_share=Fraction(tip, total)),
    )


def test_burn_enforced_highest_burn():
    builders = [burner("a", 10, 3, 0), burner("b", 10, 7, 0), burner("c", 10, 5, 0)]
    rec = run_burn_auction(ctx(100), builders)
    assert rec.winner == "b" and rec.burned == 7
    assert rec.proposer_income == 0
    assert rec.builder_profit == 10 - 7
    settles(rec, builders)


def test_burn_unenforced_tip_wins():
    builders = [burner("a", 10, 7, 1), burner("b", 10, 0, 6)]
    rec = run_burn_auction(ctx(100), builders, enforced=False)
    assert rec.winner == "b" and rec.burned == 0
    assert rec.proposer_income == 6
    settles(rec, builders)


def test_burn_enforced_drops_tips():
    rec = run_burn_auction(ctx(100), [burner("a", 10, 7, 1)])
    assert rec.payments == [] and rec.burned == 7


@given(st.lists(st.tuples(st.integers(1, 10**6), st.fractions(0, 1, max_denominator=100)), min_size=1, max_size=6))
def test_burn_enforced_winner_has_max_burn(specs):
    builders = [
        BuilderProfile(f"b{i}", stake=10**9, extraction_efficiency=Fraction(v, 10**6), strategy=BuilderStrategy(tip_share=t))
        for i, (v, t) in enumerate(specs)
    ]
    rec = run_burn_auction(ctx(10**6), builders)
    win = next(b for b in rec.bids if b.builder == rec.winner)
    assert all(b.burn_commitment <= win.burn_commitment for b in rec.bids)
    settles(rec, builders)


# mev-burn


def test_floor_excludes_late_low_base():
    bids = [Bid("a", base_fee=5, tip=1, arrival_tick=2), Bid("b", base_fee=3, tip=4, arrival_tick=3)]
    floor, win = mev_burn_select(bids, 6, 12)
    assert floor == 5 and win.builder == "a"


def test_floor_both_eligible():
    bids = [Bid("a", base_fee=5, tip=1, arrival_tick=2), Bid("b", base_fee=5, tip=2, arrival_tick=8)]
    floor, win = mev_burn_select(bids, 6, 12)
    assert floor == 5 and win.builder == "b"


def test_all_colluders_floor_zero():
    builders = [builder(n, eff=Fraction(e, 10), collude_after_deadline=True) for n, e in (("a", 5), ("b", 9))]
    rec = run_mev_burn(ctx(1000), builders, committee_deadline_tick=6)
    assert rec.floor == 0
    assert rec.winner == "b" and rec.burned == 0
    assert rec.payments == [("b", "p", 900)]
    settles(rec, builders)


def test_mev_burn_honest_slot_burns_base():
    b = builder("b", tip_share=Fraction(1, 10))
    rec = run_mev_burn(ctx(1000), [b], committee_deadline_tick=6)
    assert rec.floor == 900 and rec.burned == 900 and rec.proposer_income == 100
    settles(rec, [b])


def test_mev_burn_withheld_zero_tip_still_shows_payment():
    b = builder("b", tip_share=0, reveal_honestly=False)
    rec = run_mev_burn(ctx(1000), [b], committee_deadline_tick=6)
    assert rec.outcome is SlotOutcome.EMPTY
    assert rec.payments == [("b", "p", 0)] and rec.extractions == []
    assert rec.builder_profit == -1000
    settles(rec, [b])


def test_mev_burn_deadline_must_fit():
    with pytest.raises(ValueError):
        run_mev_burn(ctx(10), [builder("b")], committee_deadline_tick=12)


bid_sets = st.lists(
    st.builds(
        Bid,
        builder=st.text("abcdef", min_size=1, max_size=3),
        base_fee=st.integers(0, 1000),
        tip=st.integers(0, 1000),
        arrival_tick=st.integers(0, 11),
    ),
    max_size=8,
    unique_by=lambda b: b.builder,
)


@settings(max_examples=300)
@given(bid_sets, st.integers(0, 11))
def test_mev_burn_selection_rule(bids, deadline):
    floor, win = mev_burn_select(bids, deadline, 12)
    assert floor == max((b.base_fee for b in bids if b.arrival_tick <= deadline), default=0)
    eligible = [b for b in bids if b.base_fee >= floor]
    if win is None:
        assert not eligible
        return
    assert win.base_fee >= floor
    assert all(b.tip <= win.tip for b in eligible)
    tied = sorted(b.builder for b in eligible if b.tip == win.tip)
    assert win.builder == tied[0]
    assert mev_burn_floor(bids, deadline) == floor


# shared invariants over random slots


mechanisms = st.sampled_from(["mev-boost", "epbs", "epbs-smoothing", "burn-auction", "mev-burn"])
strategies = st.builds(
    BuilderStrategy,
    bid_margin=st.fractions(0, 1, max_denominator=50),
    reveal_honestly=st.booleans(),
    collude_after_deadline=st.booleans(),
    tip_share=st.fractions(0, 1, max_denominator=50),
    bid_tick=st.integers(0, 11),
    reveal_tick=st.integers(0, 11),
)
builder_lists = st.lists(
    st.builds(
        BuilderProfile,
        id=st.sampled_from(["b0", "b1", "b2", "b3"]),
        stake=st.just(10**12),
        extraction_efficiency=st.fractions(0, 1, max_denominator=50),
        exclusive_orderflow_share=st.fractions(0, 1, max_denominator=50),
        censors=st.booleans(),
        strategy=strategies,
    ),
    max_size=4,
    unique_by=lambda b: b.id,
)


@settings(max_examples=200, deadline=None)
@given(mechanisms, builder_lists, st.integers(0, 10**9), st.booleans(), st.integers(0, 10**6))
def test_any_slot_settles(mech, builders, common, present, fees):
    c = ctx(common, exclusive=common // 10, flagged=common // 20, fees=fees, present=present, committee_weight=256)
    cohorts = (UserCohort("u", True),)
    relays = [RelayProfile("r")]
    if mech == "mev-boost":
        rec = run_mev_boost(c, builders, relays, MechanismSettings(cohorts=cohorts))
    elif mech == "epbs":
        rec = run_epbs(c, builders)
    elif mech == "epbs-smoothing":
        rec = run_epbs_smoothing(c, builders)
    elif mech == "burn-auction":
        rec = run_burn_auction(c, builders)
    else:
        rec = run_mev_burn(c, builders, committee_deadline_tick=6)
    if rec.outcome is SlotOutcome.SKIPPED:
        assert rec.payments == [] and rec.burns == [] and rec.kickbacks == []
    if mech == "epbs":
        assert bool(rec.payments) == (rec.outcome is not SlotOutcome.SKIPPED)
    if rec.outcome is SlotOutcome.EMPTY:
        assert rec.extractions == [] and rec.payments
    settles(rec, builders, relays)
