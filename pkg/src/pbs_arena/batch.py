"""Vectorized engine for scenarios whose slots do not depend on each other.

When no builder overbids from its reserve, no builder can exit and no relay
can steal, a slot's outcome is a pure function of that slot's random draws.
Every slot is then computed at once with numpy, and the ledger is built from
per-account sums instead of replaying movements one by one.  Results match
the sequential engine exactly; :class:`SlotRecord` objects are produced only
when someone asks for them.
"""

from __future__ import annotations

import copy
from functools import partial
from dataclasses import replace
from fractions import Fraction
from typing import Optional

import numpy as np

from .forkchoice import SlotOutcome
from .mechanisms import BURN_AUCTION, EPBS, EPBS_SMOOTHING, LOCAL, MEV_BOOST, MEV_BURN
from .trace import SlotTable

# beyond this the int64 sums could overflow; such runs go to the sequential engine
_SAFE = 2**62

FULL, SKIPPED, EMPTY = SlotOutcome.FULL, SlotOutcome.SKIPPED, SlotOutcome.EMPTY
_OUTCOMES = (FULL, SKIPPED, EMPTY)


def batch_supported(config) -> bool:
    for b in config.builders:
        if b.strategy.overbid_from_reserve or b.strategy.exit_loss_threshold is not None:
            return False
    if config.mechanism == MEV_BOOST and any(not r.honest and not r.tripped for r in config.relays):
        return False
    return True


def _muldiv(values: np.ndarray, num: int, den: int = 1) -> Optional[np.ndarray]:
    """Exact floor(values * num / den), or None if int64 is not wide enough."""
    top = int(values.max()) if values.size else 0
    if top * num < _SAFE:
        return values * num // den
    # exact Python ints for awkward fractions, back to int64 when the result fits
    out = values.astype(object) * num // den
    if top * num // den >= _SAFE:
        return None
    return out.astype(np.int64)


def _frac(values, frac: Fraction):
    return None if values is None else _muldiv(values, frac.numerator, frac.denominator)


class _Unsupported(Exception):
    pass


def _need(x):
    if x is None:
        raise _Unsupported
    return x


def _extracted(builder, opps) -> np.ndarray:
    common = opps["common"] - opps["flagged"] if builder.censors else opps["common"]
    share = builder.exclusive_orderflow_share
    eff = builder.extraction_efficiency
    visible = _need(_muldiv(common, share.denominator)) + _need(_muldiv(opps["exclusive"], share.numerator))
    return _need(_muldiv(visible, eff.numerator, eff.denominator * share.denominator))


def execute_batch(config, inputs):
    """Run ``config`` on the prepared ``inputs``; None when the sequential engine must be used."""
    try:
        return _execute(config, inputs)
    except _Unsupported:
        return None


def _execute(config, inputs):
    from .engine import SimulationRun, open_ledger

    n = config.slots
    mech = config.mechanism
    settings = config.settings()
    validators = copy.deepcopy(config.validators)
    builders = copy.deepcopy(list(config.builders))
    relays = copy.deepcopy(list(config.relays))
    opps = inputs.opportunities
    common, flagged, fees = opps["common"], opps["flagged"], opps["fees"]
    if int(common.max()) + int(fees.max()) >= _SAFE // max(n, 1):
        raise _Unsupported

    proposers = inputs.proposers
    present = inputs.present
    committees = inputs.committees
    k = committees.shape[1]
    outsourcing = np.array([v.uses_outsourcing for v in validators])[proposers]
    capability = [v.mev_capability for v in validators]

    # which slots run an auction, which are built locally, which are skipped
    open_relays = sorted((r for r in relays if not r.tripped), key=lambda r: r.id)
    if mech == LOCAL:
        auction = np.zeros(n, dtype=bool)
        local = present.copy()
    else:
        eligible = present & outsourcing
        if mech == MEV_BOOST and not open_relays:
            auction = np.zeros(n, dtype=bool)
            local = present & ~outsourcing if settings.relay_fallback == "skip" else present.copy()
        else:
            auction = eligible
            local = present & ~outsourcing

    outcome = np.full(n, 1, dtype=np.int8)  # index into _OUTCOMES
    outcome[local] = 0

    # local builds
    local_income = np.zeros(n, dtype=np.int64)
    for cap in set(capability):
        mask = local & np.array([c == cap for c in capability])[proposers]
        if mask.any():
            local_income[mask] = _need(_frac(common[mask], cap)) + fees[mask]

    active = sorted((b for b in builders if not b.exited), key=lambda b: b.id)
    if mech == MEV_BURN:
        deadline = config.committee_deadline_tick
        active = [b for b in active if not (b.strategy.collude_after_deadline and deadline + 1 >= config.ticks_per_slot)]
    nb = len(active)

    pay = np.zeros(n, dtype=np.int64)  # builder to proposer
    burn = np.zeros(n, dtype=np.int64)
    kick = np.zeros(n, dtype=np.int64)
    realized = np.zeros(n, dtype=np.int64)  # what the winning builder extracts
    win_value = np.zeros(n, dtype=np.int64)
    winner = np.full(n, -1, dtype=np.int64)
    revealed = np.ones(n, dtype=bool)
    floor = None
    share_cohorts = [c for c in settings.cohorts if c.uses_mev_share]

    if nb and auction.any():
        values = np.stack([_extracted(b, opps) + fees for b in active])
        margin = [1 - b.strategy.bid_margin for b in active]
        totals = np.stack([_need(_frac(values[i], margin[i])) for i in range(nb)])
        kicks = np.zeros_like(values)
        if mech in (EPBS, EPBS_SMOOTHING, MEV_BOOST):
            if mech == MEV_BOOST and share_cohorts:
                for i, b in enumerate(active):
                    private = _need(_frac(opps["exclusive"], b.extraction_efficiency * b.exclusive_orderflow_share))
                    kicks[i] = _need(_frac(private, settings.kickback_fraction))
                totals = np.stack([_need(_frac(values[i] - kicks[i], margin[i])) for i in range(nb)])
            tips = totals
            bases = np.zeros_like(totals)
            ranked = totals
        else:
            tips = np.stack([_need(_frac(totals[i], active[i].strategy.tip_share)) for i in range(nb)])
            bases = totals - tips
            if mech == BURN_AUCTION:
                if config.burn_enforced:
                    tips = np.zeros_like(totals)
                ranked = bases if config.burn_enforced else tips
            else:
                colluders = np.array([b.strategy.collude_after_deadline for b in active])
                tips = np.where(colluders[:, None], totals, tips)
                bases = np.where(colluders[:, None], 0, bases)
                ticks = np.array([deadline + 1 if c else b.strategy.bid_tick for b, c in zip(active, colluders)])
                seen = ticks <= deadline
                floor = bases[seen].max(axis=0) if seen.any() else np.zeros(n, dtype=np.int64)
                ok = (bases >= floor) & (ticks < config.ticks_per_slot)[:, None]
                ranked = np.where(ok, tips, -1)

        # builders are sorted by id, so argmax keeps the smallest id on ties
        best = np.argmax(ranked, axis=0)
        cols = np.arange(n)
        won = auction & (ranked[best, cols] >= 0)
        winner[won] = best[won]
        wb = best[won]
        wc = cols[won]
        win_value[won] = values[wb, wc]
        pay[won] = tips[wb, wc]
        burn[won] = bases[wb, wc]
        if mech in (EPBS, EPBS_SMOOTHING, MEV_BURN):
            reveals = np.array(
                [b.strategy.reveal_honestly and b.strategy.reveal_tick <= settings.payload_deadline_tick for b in active]
            )
            revealed[won] = reveals[wb]
        realized[won] = np.where(revealed[won], values[wb, wc], 0)
        if mech == MEV_BOOST and share_cohorts:
            kick[won] = kicks[wb, wc]
        outcome[won] = np.where(revealed[won], 0, 2)
    elif mech == MEV_BURN:
        floor = np.zeros(n, dtype=np.int64)

    won = winner >= 0
    smoothing = mech == EPBS_SMOOTHING
    if smoothing:
        share, remainder = np.divmod(pay, k)
        to_proposer = np.zeros(n, dtype=np.int64)
        burned = burn + np.where(won, remainder, 0)
    else:
        to_proposer = pay
        burned = burn

    # builder balances, checked against each credit limit in slot order
    delta = realized - pay - burn - kick
    index = {b.id: i for i, b in enumerate(builders)}
    builder_delta = np.zeros((len(builders), n), dtype=np.int64)
    for i, b in enumerate(active):
        mask = winner == i
        builder_delta[index[b.id], mask] = delta[mask]
    running = np.cumsum(builder_delta, axis=1)
    for j, b in enumerate(builders):
        if n and int(running[j].min()) < -b.credit_limit:
            raise _Unsupported  # the sequential engine raises the proper error

    # validator balances
    nv = len(validators)
    not_skipped = outcome != 1
    attest = np.bincount(committees.ravel(), minlength=nv).astype(np.int64) * inputs.attester_pay
    val = attest.copy()
    proposer_reward = inputs.proposer_reward
    np.add.at(val, proposers[not_skipped], proposer_reward[not_skipped])
    np.add.at(val, proposers[local], local_income[local])
    np.add.at(val, proposers[won], to_proposer[won])
    if smoothing:
        np.add.at(val, committees[won].ravel(), np.repeat(share[won], k))

    ledger = open_ledger(validators, builders, relays, journal=False)
    for v, bal in zip(validators, val.tolist()):
        ledger.balances[v.id] = bal
    for b, bal in zip(builders, (running[:, -1] if n else np.zeros(len(builders), dtype=np.int64)).tolist()):
        ledger.balances[b.id] = bal
    ledger.protocol_issued_total = int(attest.sum() + proposer_reward[not_skipped].sum())
    ledger.user_extracted_total = int(local_income[local].sum() + realized.sum())
    ledger.burned_total = int(burned.sum())
    ledger.user_kickback_total = int(kick.sum())
    if share_cohorts and ledger.user_kickback_total:
        part, rem = np.divmod(kick, len(share_cohorts))
        for i, c in enumerate(share_cohorts):
            amt = int(part.sum()) + (int(rem.sum()) if i == 0 else 0)
            if amt:
                ledger.kickbacks[c.id] = amt

    if mech == MEV_BOOST and open_relays:
        delivered = int(won.sum())
        first = open_relays[0]
        relays[relays.index(first)] = replace(
            first, reputation=min(Fraction(1), first.reputation + delivered * settings.reputation_step)
        )

    # trace columns
    vids = [v.id for v in validators]
    bids_ids = [b.id for b in active]
    prop_idx = proposers.tolist()
    win_l = winner.tolist()
    local_l = local.tolist()
    proposer_col = [vids[p] for p in prop_idx]
    winner_col = [
        bids_ids[w] if w >= 0 else (proposer_col[i] if local_l[i] else None) for i, w in enumerate(win_l)
    ]
    if smoothing:
        in_committee = (committees == proposers[:, None]).any(axis=1)
        income = np.where(won & in_committee, share, 0) + np.where(local, local_income, 0)
    else:
        income = np.where(won, to_proposer, 0) + np.where(local, local_income, 0)
    censors = np.array([b.censors for b in active] or [False])
    shows_flags = local | (won & revealed)
    flagged_available = np.where(shows_flags, flagged, 0)
    excluded = np.where(won & revealed & censors[np.maximum(winner, 0)], flagged, 0)
    if floor is not None:
        has_floor = (auction & present).tolist()
        floor_l = floor.tolist()
        floor_col = [floor_l[i] if has_floor[i] else None for i in range(n)]
    else:
        floor_col = [None] * n
    ptc_slots = won & (mech in (EPBS, EPBS_SMOOTHING, MEV_BURN))
    ptc_l = ptc_slots.tolist()
    rev_l = revealed.tolist()
    table = SlotTable(
        mechanism=mech,
        proposer=proposer_col,
        winner=winner_col,
        outcome=[_OUTCOMES[o] for o in outcome.tolist()],
        proposer_income=income.tolist(),
        builder_profit=np.where(won, delta, 0).tolist(),
        burned=np.where(won, burned, 0).tolist(),
        kickbacks=kick.tolist(),
        floor=floor_col,
        ptc=[("timely" if rev_l[i] else "withheld") if ptc_l[i] else None for i in range(n)],
        attestation_issued=inputs.attestation_reward.tolist(),
        flagged_available=flagged_available.tolist(),
        flagged_excluded=excluded.tolist(),
        win_builder=[bids_ids[w] if w >= 0 else None for w in win_l],
        win_value=np.where(won, win_value, 0).tolist(),
    )

    before = running - builder_delta
    return SimulationRun(
        config, table, ledger, validators, builders, relays, materialize=partial(_materialize, config, inputs, before)
    )


def _materialize(config, inputs, before):
    """Replay the per-slot mechanisms, feeding them the headroom the vectorized
    balances imply."""
    from .engine import SlotDriver

    driver = SlotDriver(
        config,
        inputs,
        copy.deepcopy(config.validators),
        copy.deepcopy(list(config.builders)),
        copy.deepcopy(list(config.relays)),
    )
    ids = [b.id for b in config.builders]
    limits = [b.credit_limit for b in config.builders]
    before = before.tolist()
    out = []
    for slot in range(config.slots):
        funds = {bid: before[j][slot] + limits[j] for j, bid in enumerate(ids)}
        out.append(driver.record(slot, funds))
    return out
