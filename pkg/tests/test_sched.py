"""Scheduler: feasibility predicate, pipeline simulation, closed-form jitter."""

from fractions import Fraction

import pytest

from streamjam.sched import (
    DEFAULT_K_GRID,
    DEFAULT_T_F_GRID,
    LatencyProfile,
    SchedError,
    feasible,
    simulate,
    sweep_feasibility,
    sweep_to_csv,
    trace_to_csv,
    underrun_rate_closed_form,
)
from streamjam.streams import StreamSpec


def quiet(tau_sys=Fraction(1, 10), **kw):
    kw.setdefault("jitter", "none")
    return LatencyProfile(tau_sys=tau_sys, **kw)


class TestProfile:
    def test_validation(self):
        with pytest.raises(SchedError):
            LatencyProfile(tau_sys=-0.1)
        with pytest.raises(SchedError):
            LatencyProfile(tau_sys=0.1, tau_jitter=-1)
        with pytest.raises(SchedError):
            LatencyProfile(tau_sys=0.1, b=-2)
        with pytest.raises(SchedError):
            LatencyProfile(tau_sys=0.1, alpha=-0.5)
        with pytest.raises(SchedError):
            LatencyProfile(tau_sys=0.1, jitter="pink")
        with pytest.raises(SchedError):
            LatencyProfile(tau_sys=float("nan"))
        with pytest.raises(SchedError):
            LatencyProfile(tau_sys=True)

    def test_t_gen_exact_linear(self):
        p = quiet(a=Fraction(1, 50), b=Fraction(1, 2), alpha=1.0)
        assert p.t_gen(10) == Fraction(1, 50) + Fraction(1, 2) * Fraction(10, 50)
        assert p.t_gen(1) == Fraction(1, 50) + Fraction(1, 100)

    def test_t_gen_alpha_zero_is_constant(self):
        p = quiet(a=Fraction(1, 25), b=Fraction(3), alpha=0.0)
        assert p.t_gen(1) == p.t_gen(500) == Fraction(1, 25) + 3

    def test_t_gen_fractional_alpha_pins_double(self):
        p = quiet(a=0, b=Fraction(2), alpha=0.5)
        want = 2 * Fraction(float(Fraction(8, 50)) ** 0.5)
        assert p.t_gen(8) == want

    def test_t_gen_rejects_bad_k(self):
        with pytest.raises(SchedError):
            quiet().t_gen(0)

    def test_jitter_width_defaults_to_budget(self):
        p = LatencyProfile(tau_sys=0.1, tau_jitter=Fraction(1, 4))
        assert p.jitter_width == Fraction(1, 4)
        q = LatencyProfile(tau_sys=0.1, tau_jitter=Fraction(1, 4), jitter_width=Fraction(1, 8))
        assert q.jitter_width == Fraction(1, 8)


class TestFeasible:
    def test_margins_worked_example(self):
        # lead 1 s against tau_sys 0.5 + jitter budget 0.2 leaves 0.3 s;
        # t_gen = 0.5 * k leaves half the chunk duration of slack
        spec = StreamSpec(t_f=-50, k=10)
        prof = LatencyProfile(tau_sys=Fraction(1, 2), tau_jitter=Fraction(1, 5),
                              b=Fraction(1, 2), jitter="none")
        rep = feasible(spec, prof)
        assert rep.feasible
        assert rep.latency_margin == Fraction(3, 10)
        assert rep.throughput_margin == Fraction(1, 2) * Fraction(10, 50)
        assert rep.lead == 1

    def test_lookahead_is_infeasible_live(self):
        rep = feasible(StreamSpec(t_f=10, k=5), quiet())
        assert not rep.feasible and rep.latency_margin < 0

    def test_throughput_violation(self):
        rep = feasible(StreamSpec(t_f=-50, k=5), quiet(b=Fraction(2)))
        assert not rep.feasible and rep.throughput_margin < 0 and rep.latency_margin > 0

    def test_zero_latencies_accept_all_nonpositive_t_f(self):
        prof = LatencyProfile(tau_sys=0, tau_jitter=0, jitter="none")
        for t_f in (-50, -1, 0):
            assert feasible(StreamSpec(t_f=t_f, k=1), prof).feasible
        assert not feasible(StreamSpec(t_f=1, k=1), prof).feasible


class TestSimulate:
    def test_zero_jitter_matches_feasible_on_grid(self):
        prof = quiet(tau_sys=Fraction(1, 10), a=Fraction(1, 100), b=Fraction(1, 5))
        for t_f in (-25, -20, -15, -10, -5, -4, -3, -2, -1, 0, 3, 7):
            for k in range(1, 11):
                spec = StreamSpec(t_f=t_f, k=k)
                trace = simulate(spec, prof, n_chunks=150)
                assert (trace.underruns == 0) == feasible(spec, prof).feasible, (t_f, k)

    def test_event_algebra(self):
        spec = StreamSpec(t_f=-10, k=4)
        prof = quiet(a=Fraction(1, 100))
        tr = simulate(spec, prof, n_chunks=20)
        t_gen = prof.t_gen(4)
        for j, e in enumerate(tr.events):
            assert e.request == Fraction(4 * j - 10, 50)
            assert e.deadline == Fraction(4 * j, 50)
            assert e.done == e.start + t_gen
            assert e.slack == e.deadline - e.delivered
        for prev, cur in zip(tr.events, tr.events[1:]):
            assert cur.request > prev.request
            assert cur.deadline > prev.deadline
            assert cur.start >= prev.start
            assert cur.done >= prev.done

    def test_throughput_violation_underruns_after_fill(self):
        # t_gen = 2k: starts drift late by k/10 per chunk, overrunning the
        # 1 s lead minus tau_sys after ten chunks
        spec = StreamSpec(t_f=-50, k=5)
        prof = quiet(tau_sys=Fraction(1, 100), b=Fraction(2))
        tr = simulate(spec, prof, n_chunks=100)
        flags = [e.underrun for e in tr.events]
        assert not any(flags[:10])
        assert all(flags[10:])

    def test_boundary_cell_zero_slack(self):
        # t_gen = k exactly and lead = tau_sys: feasible with zero margins,
        # slack identically zero, so any positive jitter underruns
        spec = StreamSpec(t_f=-20, k=10)
        base = dict(tau_sys=Fraction(2, 5), tau_jitter=0, b=Fraction(1))
        rep = feasible(spec, LatencyProfile(jitter="none", **base))
        assert rep.feasible and rep.latency_margin == 0 and rep.throughput_margin == 0
        tr = simulate(spec, LatencyProfile(jitter="none", **base), n_chunks=50)
        assert tr.underruns == 0
        assert all(e.slack == 0 for e in tr.events)
        jit = LatencyProfile(jitter="uniform", jitter_width=Fraction(1, 1000), **base)
        assert simulate(spec, jit, n_chunks=50).underruns == 50

    def test_uniform_jitter_matches_closed_form(self):
        # margin 0.2 s against width 0.4 s: half the draws exceed it
        spec = StreamSpec(t_f=-25, k=1)
        prof = LatencyProfile(tau_sys=Fraction(3, 10), jitter="uniform",
                              jitter_width=Fraction(2, 5))
        assert underrun_rate_closed_form(spec, prof) == 0.5
        tr = simulate(spec, prof, n_chunks=100_000, seed=7)
        assert abs(tr.underrun_rate - 0.5) < 0.01

    def test_closed_form_clamps(self):
        wide = LatencyProfile(tau_sys=Fraction(3, 10), jitter="uniform",
                              jitter_width=Fraction(1, 10))
        assert underrun_rate_closed_form(StreamSpec(t_f=-25, k=1), wide) == 0.0
        assert underrun_rate_closed_form(StreamSpec(t_f=-5, k=1), wide) == 1.0
        assert underrun_rate_closed_form(StreamSpec(t_f=-50, k=1), quiet(b=2)) == 1.0

    def test_determinism_and_seed_sensitivity(self):
        spec = StreamSpec(t_f=-25, k=2)
        prof = LatencyProfile(tau_sys=Fraction(1, 10), jitter="uniform",
                              jitter_width=Fraction(1, 5))
        a = simulate(spec, prof, n_chunks=200, seed=3)
        b = simulate(spec, prof, n_chunks=200, seed=3)
        assert a.events == b.events
        c = simulate(spec, prof, n_chunks=200, seed=4)
        assert a.events != c.events

    def test_summary_and_update_rate(self):
        tr = simulate(StreamSpec(t_f=-25, k=5), quiet(), n_chunks=30)
        s = tr.summary()
        assert s["chunks"] == 30 and s["underruns"] == 0
        assert s["update_rate_hz"] == 10.0
        assert tr.max_lateness == 0
        late = simulate(StreamSpec(t_f=0, k=5), quiet(tau_sys=Fraction(1, 2)), n_chunks=3)
        assert late.max_lateness == Fraction(1, 2)

    def test_rejects_bad_n_chunks(self):
        with pytest.raises(SchedError):
            simulate(StreamSpec(t_f=0, k=1), quiet(), n_chunks=0)


class TestSweep:
    def test_default_grid_size(self):
        cells = sweep_feasibility(quiet())
        assert len(cells) == len(DEFAULT_T_F_GRID) * len(DEFAULT_K_GRID) == 55

    def test_lead_monotone_at_fixed_k(self):
        # walking t_f from positive to negative never flips feasible -> infeasible
        cells = sweep_feasibility(quiet(tau_sys=Fraction(3, 10)))
        by_k = {}
        for c in cells:
            by_k.setdefault(c["k_seconds"], []).append((-c["t_f_seconds"], c["feasible"]))
        for rows in by_k.values():
            rows.sort()
            flags = [f for _, f in rows]
            assert flags == sorted(flags)

    def test_throughput_monotone_for_sublinear_alpha(self):
        prof = quiet(a=Fraction(1, 20), b=Fraction(2), alpha=0.5)
        flags = [feasible(StreamSpec(t_f=-500, k=k), prof).throughput_margin >= 0
                 for k in range(1, 501)]
        first = flags.index(True)
        assert all(flags[first:])

    def test_csv_outputs(self, tmp_path):
        cells = sweep_feasibility(quiet(), t_f_grid_seconds=(-0.2, 0.0), k_grid_seconds=(0.04, 0.1))
        path = tmp_path / "sweep.csv"
        sweep_to_csv(cells, path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 5
        assert lines[0].startswith("t_f_seconds,k_seconds,t_f_frames,k_frames,feasible")
        tr = simulate(StreamSpec(t_f=-10, k=2), quiet(), n_chunks=4)
        tpath = tmp_path / "trace.csv"
        trace_to_csv(tr, tpath)
        tlines = tpath.read_text().strip().splitlines()
        assert len(tlines) == 5
        assert tlines[0] == "chunk,request,start,done,delivered,deadline,slack,underrun"
