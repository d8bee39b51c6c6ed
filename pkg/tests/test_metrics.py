import math
import random
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlstestbed.harness import run
from mlstestbed.metrics import (
    ACTIONS,
    BadArity,
    BadLine,
    DegenerateSeries,
    LogRecord,
    OrphanProcess,
    UnknownMetric,
    aggregate,
    aggregate_runs,
    auc,
    compute_latency,
    export_csv,
    export_labeled_csv,
    export_plotdata,
    fit,
    fit_both,
    octave,
    parse_line,
    read_csv,
    read_plotdata,
    update_cost_samples,
)
from mlstestbed.metrics.log import SIZELESS
from mlstestbed.sim import NS_PER_MS

from scenarios import growth_scenario

INVITE_LINE = "group_1 8 User_0d4341e0c0f4 Invite User_b3f20ed42c2a 1065 1739176120380282661 5885"
PROCESS_LINE = "group_1 8 User_d13041578e84 Process User_0d4341e0c0f4 1739176120384444036 8599"


def rec(action, ts, actor="A", counterpart="-", size=None, cost=0, group="g", n=8):
    if size is None and action not in SIZELESS:
        size = 100
    return LogRecord(group, n, actor, action, counterpart, size, ts, cost)


# -- log grammar --------------------------------------------------------------------

def test_parse_invite_line():
    r = parse_line(INVITE_LINE)
    assert (r.group, r.group_size, r.actor, r.action) == ("group_1", 8, "User_0d4341e0c0f4", "Invite")
    assert r.counterpart == "User_b3f20ed42c2a"
    assert r.size_bytes == 1065 and r.cost_us == 5885 and r.timestamp_ns == 1739176120380282661
    assert r.format() == INVITE_LINE


def test_parse_process_line():
    r = parse_line(PROCESS_LINE)
    assert r.action == "Process" and r.size_bytes is None
    assert r.counterpart == "User_0d4341e0c0f4" and r.cost_us == 8599
    assert r.format() == PROCESS_LINE


@pytest.mark.parametrize("line", [
    "group_1 8 User_0d4341e0c0f4",
    "group_1 8 User_0d4341e0c0f4 Invite User_b3f20ed42c2a 1739176120380282661 5885",
    "group_1 8 User_d13041578e84 Process User_0d4341e0c0f4 12 1739176120384444036 8599",
    "group_1 eight U Invite V 1065 1 2",
    "group_1 8 U Dance V 1065 1 2",
    "group_1 0 U Invite V 1065 1 2",
    "group_1 8 U Invite V 1065 1 -2",
])
def test_bad_lines(line):
    with pytest.raises(BadLine):
        parse_line(line)


def test_bad_line_carries_line_number():
    with pytest.raises(BadLine) as info:
        parse_line("a b c", line_number=7)
    assert info.value.line_number == 7


token = st.text(alphabet="abcdefghijklmnopqrstuvwxyz_0123456789", min_size=1, max_size=12)


@st.composite
def records(draw):
    action = draw(st.sampled_from(ACTIONS))
    size = None if action in SIZELESS else draw(st.integers(0, 10**6))
    return LogRecord(draw(token), draw(st.integers(1, 10**4)), draw(token), action,
                     draw(st.one_of(st.just("-"), token)), size, draw(st.integers(0, 2**63)),
                     draw(st.integers(0, 10**9)))


@settings(max_examples=300)
@given(records())
def test_property_parse_format_identity(r):
    assert parse_line(r.format()) == r


def random_record(rng: random.Random) -> LogRecord:
    action = rng.choice(ACTIONS)
    size = None if action in SIZELESS else rng.randint(0, 10**6)
    name = f"User_{rng.getrandbits(48):012x}"
    return LogRecord(f"group_{rng.randint(1, 9)}", rng.randint(1, 4096), name, action,
                     rng.choice(["-", f"User_{rng.getrandbits(48):012x}"]), size,
                     rng.randint(0, 2**62), rng.randint(0, 10**8))


def log_round_trip_failures(n: int = 10_000, seed: int = 0) -> int:
    rng = random.Random(seed)
    return sum(parse_line(r.format()) != r for r in (random_record(rng) for _ in range(n)))


def test_round_trip_ten_thousand_records():
    assert log_round_trip_failures() == 0


# -- latency ------------------------------------------------------------------------

def test_latency_mean_and_max():
    log = [rec("Update", 100, actor="C")] + [rec("Process", t, actor=f"M{t}", counterpart="C")
                                            for t in (110, 120, 130)]
    (s,) = compute_latency(log)
    assert s.mean_latency_ns == 20 and s.max_latency_ns == 30
    assert not s.flagged and s.latencies_ns == [10, 20, 30]


def test_latency_without_processors_is_flagged():
    (s,) = compute_latency([rec("Update", 100, actor="C", n=1)])
    assert s.flagged and s.mean_latency_ns is None and s.max_latency_ns is None


def test_latency_pairs_with_latest_commit_of_committer():
    log = [rec("Update", 100, actor="C"), rec("Process", 105, actor="M", counterpart="C"),
           rec("Update", 200, actor="C"), rec("Process", 230, actor="M", counterpart="C")]
    a, b = compute_latency(log)
    assert a.latencies_ns == [5] and b.latencies_ns == [30]


def test_orphan_process_warns():
    with pytest.warns(OrphanProcess):
        assert compute_latency([rec("Process", 5, actor="M", counterpart="nobody")]) == []


@pytest.fixture(scope="module")
def broker_run_eight():
    """Eight members on constant 5 ms links, then updates at full size."""
    result = run(growth_scenario(8, seed=3, latency="constant:5", duration_ms=60_000,
                                 invite_chance=0.5, update_chance=0.5))
    assert result.group_sizes() == {"group_1": 8}
    return result


def test_broker_latency_is_one_link(broker_run_eight):
    full = [s for s in compute_latency(broker_run_eight.records)
            if s.commit.group_size == 8 and not s.flagged]
    assert full, "no commits at size 8"
    for s in full:
        # the invitee of an Invite joins through its Welcome instead
        assert len(s.processes) == (6 if s.commit.action == "Invite" else 7)
        assert abs(s.max_latency_ns - 5 * NS_PER_MS) <= 1
        assert s.max_latency_ns >= s.mean_latency_ns >= 0


latency_logs = st.lists(st.tuples(st.sampled_from(["g1", "g2"]), st.integers(0, 50), st.booleans()),
                        min_size=1, max_size=30)


@settings(max_examples=100)
@given(latency_logs, st.randoms(use_true_random=False))
def test_property_latency_ignores_other_groups_interleaving(events, rnd):
    log = []
    for i, (g, dt, is_commit) in enumerate(events):
        ts = i * 100 + dt
        if is_commit:
            log.append(rec("Update", ts, actor="C", group=g))
        else:
            log.append(rec("Process", ts, actor=f"M{i}", counterpart="C", group=g))
    shuffled = list(log)
    rnd.shuffle(shuffled)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OrphanProcess)
        assert compute_latency(shuffled) == compute_latency(log)


# -- auc ----------------------------------------------------------------------------

def test_auc_examples():
    assert auc(1000, [100, 100, 100, 100], 4) == 350
    assert auc(1065, [], 1) == 1065
    with pytest.raises(BadArity):
        auc(1000, [100], 4)
    with pytest.raises(BadArity):
        auc(1000, [], 0)


@given(st.integers(0, 10**6), st.lists(st.integers(0, 10**6), min_size=1, max_size=8))
def test_property_auc_doubles(cc, cp):
    n = len(cp)
    assert auc(2 * cc, [2 * c for c in cp], n) == 2 * auc(cc, cp, n)


def test_update_cost_samples_attribute_window_proposals():
    log = [rec("Propose", 10, actor="A", cost=100), rec("Propose", 20, actor="B", cost=300),
           rec("Update", 30, actor="B", cost=1000),
           rec("Update", 40, actor="A", cost=50)]
    first, second = update_cost_samples(log)
    assert (first.cc, first.cp, first.n, first.auc) == (1000, (100, 300), 2, 700)
    assert (second.cp, second.n, second.auc) == ((), 1, 50)


def test_update_cost_processing_uses_mean_process_cost():
    log = [rec("Propose", 10, actor="A"), rec("ProcessProposal", 12, actor="B", counterpart="A", cost=40),
           rec("Update", 20, actor="A", cost=999),
           rec("Process", 25, actor="B", counterpart="A", cost=200),
           rec("Process", 26, actor="C", counterpart="A", cost=400)]
    (s,) = update_cost_samples(log, "processing")
    assert s.cc == 300 and s.cp == (40,) and s.auc == 340


# -- aggregation -----------------------------------------------------------------------

def test_aggregate_mean_per_size():
    log = [rec("Invite", 1, cost=4000), rec("Invite", 2, cost=6000)]
    assert aggregate(log, "invite_cost") == [(8, 5000)]


def test_aggregate_omits_absent_sizes():
    log = [rec("Invite", 1, n=8, cost=1), rec("Invite", 2, n=16, cost=2)]
    series = aggregate(log, "generation")
    assert [x for x, _ in series] == [8, 16]


def test_aggregate_runs_averages_run_means():
    runs = [[rec("Update", 1, cost=c)] for c in (100, 200, 600)]
    assert aggregate_runs(runs, "update_cost") == [(8, 300)]


def test_octave_buckets():
    assert [octave(s) for s in (1, 2, 3, 8, 15, 16, 100)] == [1, 2, 2, 8, 8, 16, 64]
    log = [rec("Update", 1, n=9, cost=10), rec("Update", 2, n=15, cost=30)]
    assert aggregate(log, "update_cost", bucket="octave") == [(8, 20)]


def test_unknown_metric():
    with pytest.raises(UnknownMetric):
        aggregate([], "happiness")


def test_commit_plus_welcome():
    log = [rec("Invite", 1, actor="A", counterpart="B", cost=100),
           rec("Welcome", 5, actor="B", counterpart="A", cost=250)]
    assert aggregate(log, "commit_welcome_cost") == [(8, 350)]


# -- regression ---------------------------------------------------------------------

def test_fit_exact_line():
    f = fit([(x, 2 * x + 1) for x in (1, 2, 3, 4, 5)], "linear")
    assert f.slope == pytest.approx(2) and f.intercept == pytest.approx(1) and f.r_squared == pytest.approx(1)
    assert f.predict(10) == pytest.approx(21)


def test_fit_log_curve():
    # Oracle: over x = 2^k the linear fit of y = 3 ln x is the fit of y against 2^k
    # with y = 3k ln 2, whose R² is corr(2^k, k)^2 = 27/31 for k = 1..5.
    pts = [(x, 3 * math.log(x)) for x in (2, 4, 8, 16, 32)]
    fits = fit_both(pts)
    assert fits["logarithmic"].r_squared == pytest.approx(1)
    assert fits["logarithmic"].slope == pytest.approx(3)
    assert fits["linear"].r_squared == pytest.approx(27 / 31, abs=1e-12)


def test_fit_degenerate():
    with pytest.raises(DegenerateSeries):
        fit([(1, 1), (2, 2)])
    with pytest.raises(DegenerateSeries):
        fit([(3, 1), (3, 2), (3, 5)])
    with pytest.raises(DegenerateSeries):
        fit([(0, 1), (1, 2), (2, 5)], "logarithmic")


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(1, 1000), st.floats(-1e3, 1e3)), min_size=3, max_size=20,
                unique_by=lambda p: p[0]),
       st.floats(0.01, 100))
def test_property_r_squared_scale_invariant(pts, k):
    base = fit(pts)
    scaled = fit([(x, k * y) for x, y in pts])
    assert scaled.r_squared == pytest.approx(base.r_squared, abs=1e-7)


# -- export -------------------------------------------------------------------------

def test_export_three_points(tmp_path):
    series = [(8, 1.5), (16, 2.0), (32, 4.25)]
    p = export_csv(series, tmp_path / "m.csv", "generation")
    assert len(p.read_text().splitlines()) == 4
    assert read_csv(p) == ("generation", series)


def test_export_empty_series_is_header_only(tmp_path):
    p = export_csv([], tmp_path / "m.csv", "generation")
    assert p.read_text() == "group_size,generation\n"


def test_plotdata_round_trip(tmp_path):
    series = [(8, 1.5), (16, 2.0), (32, 1e-7)]
    assert read_plotdata(export_plotdata(series, tmp_path / "m.dat")) == series


def test_labeled_csv_uses_shared_sizes(tmp_path):
    p = export_labeled_csv({"a": [(8, 1.0), (16, 2.0)], "b": [(16, 3.0), (32, 4.0)]}, tmp_path / "c.csv", "x")
    assert p.read_text().splitlines() == ["group_size,x[a],x[b]", "16,2.0,3.0"]


def test_export_unwritable_path(tmp_path):
    from mlstestbed.metrics import IoError
    with pytest.raises(IoError):
        export_csv([(1, 1.0)], tmp_path / "missing" / "m.csv", "x")
