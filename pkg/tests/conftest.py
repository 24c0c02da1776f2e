from fractions import Fraction

import pytest

from pbs_arena.actors import BuilderProfile, BuilderStrategy, RelayProfile, UserCohort, ValidatorProfile
from pbs_arena.engine import SimulationConfig

ETH = 10**9


def validators(n, balance=32 * ETH, **kw):
    return [ValidatorProfile(f"v{i:03d}", balance, **kw) for i in range(n)]


def mixed_config(mechanism, seed=7, slots=2000, **kw):
    """A busy scenario touching most code paths: censoring, withholding,
    colluding and exclusive-flow builders, non-outsourcing proposers, MEV-share
    cohorts and missed proposals."""
    vals = [
        ValidatorProfile(f"v{i:03d}", 32 * ETH, mev_capability=Fraction(1, 2), uses_outsourcing=i % 7 != 0)
        for i in range(50)
    ]
    builders = [
        BuilderProfile(
            f"b{i}",
            stake=1000 * ETH,
            reserve=100 * ETH,
            extraction_efficiency=Fraction(9, 10) + Fraction(i, 100),
            exclusive_orderflow_share=Fraction(i, 5),
            censors=i == 1,
            strategy=BuilderStrategy(
                collude_after_deadline=i == 2,
                reveal_honestly=i != 3,
                bid_margin=Fraction(1, 10 + i),
                tip_share=Fraction(i, 7),
            ),
        )
        for i in range(5)
    ]
    kw.setdefault("proposer_miss_rate", 0.05)
    return SimulationConfig(
        slots=slots,
        seed=seed,
        mechanism=mechanism,
        validators=vals,
        builders=builders,
        relays=[RelayProfile("r0"), RelayProfile("r1")],
        cohorts=[UserCohort("u0", True), UserCohort("u1", True), UserCohort("u2", False)],
        committee_deadline_tick=6,
        **kw,
    )


@pytest.fixture
def make_mixed():
    return mixed_config


# -- acceptance summary --------------------------------------------------------

CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and not report.failed):
        return
    number, title = mark.args
    entry = CRITERIA.setdefault(number, {"title": title, "ok": True, "notes": []})
    entry["ok"] &= report.passed
    entry["notes"].extend(getattr(item, "acceptance_notes", []))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        entry = CRITERIA[number]
        status = "PASS" if entry["ok"] else "FAIL"
        notes = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {number:>2} {status}  {entry['title']}" + (f"  ({notes})" if notes else ""))


@pytest.fixture
def note(request):
    """Attach a short measurement to the acceptance summary line."""
    request.node.acceptance_notes = []
    return request.node.acceptance_notes.append
