"""Deterministic slot loop.

Randomness comes from independent numpy streams, one per purpose, all derived
from the run seed.  Everything random about a run (proposers, opportunities,
committees, proposer liveness) is drawn up front, so the mechanism under test
never changes what the other streams produce.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .actors import BuilderProfile, MevOpportunitySet, RelayProfile, UserCohort, ValidatorProfile
from .forkchoice import DEFAULT_PTC_BOOST
from .mechanisms import (
    BURN_AUCTION,
    EPBS,
    EPBS_SMOOTHING,
    LOCAL,
    MECHANISMS,
    MEV_BOOST,
    MEV_BURN,
    MEV_SHARE_KICKBACK,
    MechanismSettings,
    SlotContext,
    SlotRecord,
    run_burn_auction,
    run_epbs,
    run_epbs_smoothing,
    run_local_build,
    run_mev_boost,
    run_mev_burn,
)
from .trace import SlotTable
from .rewards import DutyWeights, Ledger, RewardParams, SettlementError, apply_record, base_reward, duty_split
from .units import Gwei, to_fraction, unit_fraction

GWEI_PER_ETH = 10**9


class Stream(enum.IntEnum):
    PROPOSER = 0
    OPPORTUNITY = 1
    COMMITTEE = 2
    LIVENESS = 3


def stream_rng(seed: int, stream: Stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(stream),)))


@dataclass(frozen=True)
class OpportunityParams:
    """Log-normal common value with a multiplicative spike mixture.

    ``common = round(location * exp(scale * Z) * (spike_multiplier if spike))``
    """

    location: float = 50_000_000.0
    scale: float = 1.0
    spike_probability: float = 0.01
    spike_multiplier: float = 20.0
    flagged_fraction: Fraction = Fraction(1, 20)
    exclusive_fraction: Fraction = Fraction(1, 10)
    priority_fee_location: float = 20_000_000.0
    priority_fee_scale: float = 0.5

    def __post_init__(self) -> None:
        if self.location < 0 or self.scale < 0 or self.priority_fee_location < 0 or self.priority_fee_scale < 0:
            raise ValueError("opportunity location and scale must be >= 0")
        if not 0 <= self.spike_probability <= 1:
            raise ValueError("spike_probability must lie in [0, 1]")
        if self.spike_multiplier < 1:
            raise ValueError("spike_multiplier must be >= 1")
        object.__setattr__(self, "flagged_fraction", unit_fraction(self.flagged_fraction, "flagged_fraction"))
        object.__setattr__(self, "exclusive_fraction", to_fraction(self.exclusive_fraction))
        if self.exclusive_fraction < 0:
            raise ValueError("exclusive_fraction must be >= 0")

    @property
    def analytic_mean(self) -> float:
        """Mean of the common value before rounding."""
        spike = 1 + self.spike_probability * (self.spike_multiplier - 1)
        return self.location * math.exp(self.scale**2 / 2) * spike


@dataclass
class SimulationConfig:
    slots: int
    seed: int
    mechanism: str
    validators: tuple[ValidatorProfile, ...]
    builders: tuple[BuilderProfile, ...] = ()
    relays: tuple[RelayProfile, ...] = ()
    cohorts: tuple[UserCohort, ...] = ()
    reward_params: RewardParams = field(default_factory=RewardParams)
    duty_weights: DutyWeights = field(default_factory=DutyWeights)
    opportunity: OpportunityParams = field(default_factory=OpportunityParams)
    committee_size: int = 8
    ticks_per_slot: int = 12
    committee_deadline_tick: Optional[int] = None
    payload_deadline_tick: int = 9
    ptc_boost: Fraction = DEFAULT_PTC_BOOST
    kickback_fraction: Fraction = MEV_SHARE_KICKBACK
    reputation_step: Fraction = Fraction(1, 10)
    relay_fallback: str = "local"
    proposer_miss_rate: float = 0.0
    burn_enforced: bool = True

    def __post_init__(self) -> None:
        self.validators = tuple(self.validators)
        self.builders = tuple(self.builders)
        self.relays = tuple(self.relays)
        self.cohorts = tuple(self.cohorts)
        self.ptc_boost = to_fraction(self.ptc_boost)
        self.kickback_fraction = unit_fraction(self.kickback_fraction, "kickback_fraction")
        self.reputation_step = unit_fraction(self.reputation_step, "reputation_step")
        self.validate()

    def validate(self) -> None:
        if self.slots < 1:
            raise ValueError("slots must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if not self.validators:
            raise ValueError("at least one validator is required")
        if self.committee_size < 1:
            raise ValueError("committee_size must be >= 1")
        if self.ticks_per_slot < 2:
            raise ValueError("ticks_per_slot must be >= 2")
        if self.mechanism == MEV_BURN:
            if self.committee_deadline_tick is None:
                raise ValueError("mev-burn needs committee_deadline_tick")
            if not 0 <= self.committee_deadline_tick < self.ticks_per_slot:
                raise ValueError("committee_deadline_tick must be < ticks_per_slot")
        if not 0 < self.ptc_boost < 1:
            raise ValueError("ptc_boost must lie strictly between 0 and 1")
        if self.relay_fallback not in ("local", "skip"):
            raise ValueError("relay_fallback must be 'local' or 'skip'")
        if not 0 <= self.proposer_miss_rate <= 1:
            raise ValueError("proposer_miss_rate must lie in [0, 1]")
        ids = [a.id for a in (*self.validators, *self.builders, *self.relays, *self.cohorts)]
        dupes = sorted({i for i in ids if ids.count(i) > 1}) if len(set(ids)) != len(ids) else []
        if dupes:
            raise ValueError(f"duplicate actor ids: {', '.join(dupes)}")

    @property
    def total_active_balance(self) -> Gwei:
        return sum(v.effective_balance for v in self.validators)

    def settings(self) -> MechanismSettings:
        return MechanismSettings(
            payload_deadline_tick=self.payload_deadline_tick,
            ptc_boost=self.ptc_boost,
            kickback_fraction=self.kickback_fraction,
            reputation_step=self.reputation_step,
            relay_fallback=self.relay_fallback,
            cohorts=self.cohorts,
        )


# -- random draws ----------------------------------------------------------------


def _cumulative(validators: Sequence[ValidatorProfile]) -> np.ndarray:
    if not validators:
        raise ValueError("validators must be nonempty")
    return np.cumsum(np.array([v.effective_balance for v in validators], dtype=np.int64))


def select_proposers(rng: np.random.Generator, validators: Sequence[ValidatorProfile], n: int) -> np.ndarray:
    """Indices of ``n`` proposers, each drawn with probability proportional to
    effective balance (an exact integer draw over the cumulative balance)."""
    cum = _cumulative(validators)
    draws = rng.integers(0, int(cum[-1]), size=n)
    return np.searchsorted(cum, draws, side="right")


def select_proposer(rng: np.random.Generator, validators: Sequence[ValidatorProfile]) -> str:
    return validators[int(select_proposers(rng, validators, 1)[0])].id


def floor_mul_array(values: np.ndarray, frac: Fraction) -> np.ndarray:
    """Elementwise floor(frac * values), exact; falls back to Python ints on overflow."""
    num, den = frac.numerator, frac.denominator
    values = np.asarray(values)
    if values.size == 0:
        return values.astype(np.int64)
    if values.dtype != object and int(values.max()) * num < 2**62:
        return values.astype(np.int64) * num // den
    return np.array([int(v) * num // den for v in values.tolist()], dtype=object)


def draw_opportunity_arrays(rng: np.random.Generator, params: OpportunityParams, n: int) -> dict[str, np.ndarray]:
    z = rng.standard_normal(n)
    u = rng.random(n)
    z_fee = rng.standard_normal(n)
    spike = np.where(u < params.spike_probability, params.spike_multiplier, 1.0)
    common = np.rint(params.location * np.exp(params.scale * z) * spike).astype(np.int64)
    fees = np.rint(params.priority_fee_location * np.exp(params.priority_fee_scale * z_fee)).astype(np.int64)
    return {
        "common": common,
        "exclusive": floor_mul_array(common, params.exclusive_fraction),
        "flagged": floor_mul_array(common, params.flagged_fraction),
        "fees": fees,
    }


def generate_opportunity_batch(
    rng: np.random.Generator, params: OpportunityParams, n: int
) -> list[MevOpportunitySet]:
    arrays = draw_opportunity_arrays(rng, params, n)
    return [
        MevOpportunitySet(c, x, f, fee)
        for c, x, f, fee in zip(*(arrays[k].tolist() for k in ("common", "exclusive", "flagged", "fees")))
    ]


def generate_opportunities(rng: np.random.Generator, params: OpportunityParams) -> MevOpportunitySet:
    return generate_opportunity_batch(rng, params, 1)[0]


def sample_committees(rng: np.random.Generator, n_validators: int, size: int, n: int) -> np.ndarray:
    """``n`` committees of ``size`` distinct validator indices, sorted per row."""
    size = min(size, n_validators)
    out = np.empty((n, size), dtype=np.int64)
    chunk = max(1, 2**20 // n_validators)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        keys = rng.random((stop - start, n_validators))
        if size < n_validators:
            picked = np.argpartition(keys, size - 1, axis=1)[:, :size]
        else:
            picked = np.broadcast_to(np.arange(n_validators), keys.shape)
        out[start:stop] = np.sort(picked, axis=1)
    return out


# -- the run -----------------------------------------------------------------------


@dataclass
class SlotInputs:
    """Every random draw of a run plus the issuance tables derived from them."""

    proposers: np.ndarray
    present: np.ndarray
    committees: np.ndarray
    opportunities: dict[str, np.ndarray]
    attester_pay: np.ndarray
    attest_part: np.ndarray
    proposer_part: np.ndarray
    weight: np.ndarray

    @property
    def attestation_reward(self) -> np.ndarray:
        return self.attest_part[self.committees].sum(axis=1)

    @property
    def proposer_reward(self) -> np.ndarray:
        return self.proposer_part[self.committees].sum(axis=1)

    @property
    def committee_weight(self) -> np.ndarray:
        return self.weight[self.committees].sum(axis=1)


def prepare(config: SimulationConfig) -> SlotInputs:
    n = config.slots
    seed = config.seed
    validators = config.validators
    total_active = config.total_active_balance
    attester_pay, attest_part, proposer_part = [], [], []
    for v in validators:
        duties = duty_split(base_reward(v.effective_balance, total_active, config.reward_params), config.duty_weights)
        # sync has no committee of its own here; it rides along with attesting
        attester_pay.append(duties.attestation + duties.sync)
        attest_part.append(duties.attestation)
        proposer_part.append(duties.proposer)
    return SlotInputs(
        proposers=select_proposers(stream_rng(seed, Stream.PROPOSER), validators, n),
        present=stream_rng(seed, Stream.LIVENESS).random(n) >= config.proposer_miss_rate,
        committees=sample_committees(stream_rng(seed, Stream.COMMITTEE), len(validators), config.committee_size, n),
        opportunities=draw_opportunity_arrays(stream_rng(seed, Stream.OPPORTUNITY), config.opportunity, n),
        attester_pay=np.array(attester_pay, dtype=np.int64),
        attest_part=np.array(attest_part, dtype=np.int64),
        proposer_part=np.array(proposer_part, dtype=np.int64),
        weight=np.array([v.effective_balance // GWEI_PER_ETH for v in validators], dtype=np.int64),
    )


class SimulationRun:
    """Output of one run: trace table, ledger and final actor states.

    ``records`` holds full :class:`SlotRecord` objects.  The sequential engine
    keeps them as it goes; the batch engine builds them on first access.
    """

    def __init__(self, config, table, ledger, validators, builders, relays, records=None, materialize=None):
        self.config = config
        self.table: SlotTable = table
        self.ledger: Ledger = ledger
        self.validators = validators
        self.builders = builders
        self.relays = relays
        self.engine = "sequential" if records is not None else "batch"
        self._records = records
        self._materialize = materialize

    @property
    def records(self) -> list[SlotRecord]:
        if self._records is None:
            self._records = self._materialize()
        return self._records


class SlotDriver:
    """Builds each slot's context and dispatches it to the configured mechanism."""

    def __init__(self, config: SimulationConfig, inputs: SlotInputs, validators, builders, relays):
        self.config = config
        self.settings = config.settings()
        self.validators = validators
        self.builders = builders
        self.relays = relays
        opps = inputs.opportunities
        self.opportunities = [
            MevOpportunitySet(c, x, f, fee)
            for c, x, f, fee in zip(*(opps[k].tolist() for k in ("common", "exclusive", "flagged", "fees")))
        ]
        self.ids = [v.id for v in validators]
        self.proposers = inputs.proposers.tolist()
        self.present = inputs.present.tolist()
        self.committees = inputs.committees.tolist()
        self.attester_pay = inputs.attester_pay.tolist()
        self.proposer_reward = inputs.proposer_reward.tolist()
        self.attestation_reward = inputs.attestation_reward.tolist()
        self.committee_weight = inputs.committee_weight.tolist()

    def record(self, slot: int, funds: dict[str, Gwei]) -> SlotRecord:
        config = self.config
        ids, pay = self.ids, self.attester_pay
        members = self.committees[slot]
        proposer = self.validators[self.proposers[slot]]
        ctx = SlotContext(
            slot_number=slot,
            proposer=proposer.id,
            opportunities=self.opportunities[slot],
            ticks_per_slot=config.ticks_per_slot,
            committee=tuple(ids[m] for m in members),
            proposer_present=self.present[slot],
            attester_rewards=tuple((ids[m], pay[m]) for m in members if pay[m]),
            proposer_reward=self.proposer_reward[slot],
            attestation_reward=self.attestation_reward[slot],
            committee_weight=self.committee_weight[slot],
            funds=funds,
        )
        mechanism = config.mechanism
        if mechanism == LOCAL or not proposer.uses_outsourcing:
            return run_local_build(ctx, proposer, mechanism)
        if mechanism == MEV_BOOST:
            return run_mev_boost(ctx, self.builders, self.relays, self.settings, proposer)
        if mechanism == EPBS:
            return run_epbs(ctx, self.builders, self.settings)
        if mechanism == EPBS_SMOOTHING:
            return run_epbs_smoothing(ctx, self.builders, self.settings)
        if mechanism == BURN_AUCTION:
            return run_burn_auction(ctx, self.builders, config.burn_enforced, self.settings)
        return run_mev_burn(ctx, self.builders, config.committee_deadline_tick, self.settings)


def open_ledger(validators, builders, relays, journal: bool = True) -> Ledger:
    ledger = Ledger(journal=journal)
    for v in validators:
        ledger.open_account(v.id)
    for b in builders:
        ledger.open_account(b.id, b.credit_limit)
    for r in relays:
        ledger.open_account(r.id)
    return ledger


def execute_sequential(config: SimulationConfig, inputs: Optional[SlotInputs] = None) -> SimulationRun:
    """Reference engine: one mechanism call per slot, settled through the ledger."""
    config.validate()
    inputs = inputs or prepare(config)
    validators = copy.deepcopy(config.validators)
    builders = copy.deepcopy(list(config.builders))
    relays = copy.deepcopy(list(config.relays))
    driver = SlotDriver(config, inputs, validators, builders, relays)
    ledger = open_ledger(validators, builders, relays)

    exit_watch = [b for b in builders if b.strategy.exit_loss_threshold is not None]
    records: list[SlotRecord] = []
    for slot in range(config.slots):
        record = driver.record(slot, {b.id: ledger.headroom(b.id) for b in builders})
        try:
            apply_record(ledger, record)
        except SettlementError as exc:
            exc.slot = slot
            raise
        records.append(record)
        for b in exit_watch:
            if not b.exited and -ledger.balance(b.id) > b.strategy.exit_loss_threshold:
                b.exited = True

    table = SlotTable.from_records(config.mechanism, records, [b.id for b in builders])
    return SimulationRun(config, table, ledger, validators, builders, relays, records=records)


def execute(config: SimulationConfig, engine: str = "auto") -> SimulationRun:
    """Run ``config``.

    ``engine="auto"`` uses the vectorized batch engine whenever the scenario
    has no path-dependent behaviour (see :func:`pbs_arena.batch.batch_supported`)
    and the sequential engine otherwise.  Both give identical results.
    """
    from .batch import batch_supported, execute_batch

    if engine not in ("auto", "batch", "sequential"):
        raise ValueError(f"unknown engine {engine!r}")
    config.validate()
    inputs = prepare(config)
    if engine != "sequential" and batch_supported(config):
        run = execute_batch(config, inputs)
        if run is not None:
            return run
    elif engine == "batch":
        raise ValueError("scenario has path-dependent behaviour; batch engine unavailable")
    return execute_sequential(config, inputs)


def run_simulation(config: SimulationConfig, engine: str = "auto"):
    """Run one simulation and return its :class:`~pbs_arena.metrics.SimulationReport`."""
    from .metrics import build_report

    return build_report(execute(config, engine))


def with_seed(config: SimulationConfig, seed: int) -> SimulationConfig:
    clone = copy.copy(config)
    clone.seed = seed
    clone.validate()
    return clone


def _run_seed(args):
    config, seed = args
    return run_simulation(with_seed(config, seed))


def run_sweep(config: SimulationConfig, seeds: Sequence[int], jobs: int = 1) -> list:
    """Reports for every seed, in ascending seed order."""
    seeds = sorted(seeds)
    if jobs <= 1:
        return [_run_seed((config, s)) for s in seeds]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_seed, [(config, s) for s in seeds]))
