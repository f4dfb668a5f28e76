import numpy as np
import pytest

from qsmooth import classical, qmath, smoothing
from qsmooth.dynamics import ModelParams, build_step_operators, filter_trajectory
from qsmooth.qmath import ZeroTraceError, dag, mm, trace_of
from qsmooth.smoothing import (
    petz_fuchs,
    petz_fuchs_recursive,
    petz_fuchs_series,
    retrofilter,
    smooth_trajectory,
    swv_state,
    symmetrized_product,
)


def params(**kw):
    base = dict(omega=5.0, nbar=0.5, dt=1e-3, t_final=7.5, seed=0)
    base.update(kw)
    return ModelParams(**base)


def random_state(rng, full_rank=True):
    g = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    rho = mm(g, dag(g))
    if full_rank:
        rho += 0.05 * np.eye(2)
    return rho / trace_of(rho).real


def random_effect(rng):
    g = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    e = mm(g, dag(g)) + 0.05 * np.eye(2)
    return e / np.linalg.norm(e, 2)


class TestRetrofilter:
    def test_final_effect_is_identity(self):
        p = params(t_final=0.2)
        fr = filter_trajectory(p)
        eff = retrofilter(fr.record, p)
        assert np.allclose(eff.effects[-1], np.eye(2))
        assert eff.log_scale[-1] == 0.0

    @pytest.mark.parametrize("unraveling", ["jump", "homodyne_x", "homodyne_y"])
    def test_pairing_constant(self, unraveling):
        p = params(unraveling=unraveling, t_final=2.0, seed=7)
        res = smooth_trajectory(p)
        lp = res.log_pairing
        assert (lp.max() - lp.min()) / abs(lp.mean()) < 1e-8

    def test_effects_stay_psd(self):
        p = params(t_final=1.0, seed=3)
        fr = filter_trajectory(p)
        eff = retrofilter(fr.record, p)
        assert qmath.min_eigenvalue_stack(eff.effects).min() >= -1e-10

    def test_rescaling_bookkeeping(self):
        p = params(t_final=3.0, seed=1)
        fr = filter_trajectory(p)
        eff = retrofilter(fr.record, p, rescale_every=500)
        raw = retrofilter(fr.record, p, rescale_every=10 ** 9)
        i = 100  # deep enough that several rescalings happened
        assert eff.log_scale[i] != 0.0
        assert np.allclose(eff.effect_unnormalized(i), raw.effects[i], rtol=1e-9)

    def test_dark_record_commutes_and_smoothing_is_trivial(self):
        p = params(omega=0.0, nbar=0.0, t_final=0.3)
        ops = build_step_operators(p)
        res = smooth_trajectory(p)
        assert res.record.n_detections == 0
        for eff in res.effects:
            comm = mm(eff, ops.m0) - mm(ops.m0, eff)
            assert np.max(np.abs(comm)) < 1e-12
        assert np.max(np.abs(res.smoothed - res.filtered)) < 1e-12


class TestPetzFuchs:
    def test_identity_effect_returns_filtered(self):
        rng = np.random.default_rng(0)
        rho = random_state(rng)
        assert np.max(np.abs(petz_fuchs(rho, np.eye(2)) - rho)) < 1e-12

    def test_pure_filtered_state_unchanged(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            v = rng.normal(size=2) + 1j * rng.normal(size=2)
            v /= np.linalg.norm(v)
            rho = np.outer(v, v.conj())
            out = petz_fuchs(rho, random_effect(rng))
            assert np.max(np.abs(out - rho)) < 1e-10

    def test_diagonal_reduces_to_classical_product(self):
        probs = np.array([0.3, 0.7])
        vals = np.array([0.9, 0.2])
        out = petz_fuchs(np.diag(probs).astype(complex), np.diag(vals).astype(complex))
        expected = classical.cl_smooth_bayes(probs, vals)
        expected = expected / expected.sum()
        assert np.max(np.abs(out - np.diag(expected))) < 1e-12

    def test_zero_overlap_raises(self):
        with pytest.raises(ZeroTraceError):
            petz_fuchs(np.diag([1.0, 0.0]).astype(complex),
                       np.diag([0.0, 1.0]).astype(complex))

    def test_output_is_normalized_psd(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            out = petz_fuchs(random_state(rng, full_rank=False), random_effect(rng))
            assert trace_of(out).real == pytest.approx(1.0, abs=1e-12)
            assert qmath.min_eigenvalue(out) >= -1e-10

    def test_series_matches_pointwise(self):
        p = params(t_final=0.3, seed=5)
        res = smooth_trajectory(p)
        for i in (0, 57, p.n_steps):
            single = petz_fuchs(res.filtered[i], res.effects[i])
            assert np.max(np.abs(single - res.smoothed[i])) < 1e-12


class TestRecursion:
    def test_single_step_equals_closed_form(self):
        p = params(dt=1e-2, t_final=1e-2, seed=2)
        fr = filter_trajectory(p)
        eff = retrofilter(fr.record, p)
        closed = petz_fuchs_series(fr.states, eff.effects)
        rec = petz_fuchs_recursive(fr.states, fr.record, p)
        assert np.max(np.abs(closed - rec)) < 1e-12

    @pytest.mark.parametrize("unraveling", ["jump", "homodyne_x"])
    def test_ten_step_record(self, unraveling):
        p = params(unraveling=unraveling, dt=1e-2, t_final=0.1, seed=8)
        fr = filter_trajectory(p)
        eff = retrofilter(fr.record, p)
        closed = petz_fuchs_series(fr.states, eff.effects)
        rec = petz_fuchs_recursive(fr.states, fr.record, p)
        assert np.max(np.abs(closed - rec)) < 1e-8

    def test_pure_reversible_segment(self):
        # nbar = 0 keeps every filtered state pure; smoothing cannot
        # improve on it, so the recursion returns the forward states.
        p = params(nbar=0.0, t_final=0.5, seed=4)
        fr = filter_trajectory(p)
        rec = petz_fuchs_recursive(fr.states, fr.record, p)
        assert np.max(np.abs(rec - fr.states)) < 1e-9

    def test_full_length_record(self):
        # the full default horizon, including effect rescalings
        p = params(t_final=7.5, seed=12)
        fr = filter_trajectory(p)
        eff = retrofilter(fr.record, p)
        closed = petz_fuchs_series(fr.states, eff.effects)
        rec = petz_fuchs_recursive(fr.states, fr.record, p)
        assert np.max(np.abs(closed - rec)) < 1e-8


class TestSwv:
    def test_commuting_inputs_match_petz_fuchs(self):
        rho = np.diag([0.6, 0.4]).astype(complex)
        e = np.diag([0.8, 0.1]).astype(complex)
        assert np.max(np.abs(swv_state(rho, e).state - petz_fuchs(rho, e))) < 1e-12

    def test_identity_effect(self):
        rng = np.random.default_rng(3)
        rho = random_state(rng)
        out = swv_state(rho, np.eye(2))
        assert np.max(np.abs(out.state - rho)) < 1e-12

    def test_double_commutator_identity(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            rho = random_state(rng)
            e = random_effect(rng)
            pf = petz_fuchs(rho, e)
            swv = swv_state(rho, e).state
            root = qmath.hermitian_sqrt(rho)
            comm = mm(e, root) - mm(root, e)
            dc = mm(comm, root) - mm(root, comm)
            tr = trace_of(mm(rho, e)).real
            assert np.max(np.abs(pf - (swv - dc / (2.0 * tr)))) < 1e-10

    def test_unit_trace_and_reported_eigenvalue(self):
        rng = np.random.default_rng(5)
        out = swv_state(random_state(rng), random_effect(rng))
        assert trace_of(out.state).real == pytest.approx(1.0, abs=1e-12)
        assert out.min_eigenvalue == pytest.approx(
            qmath.min_eigenvalue(out.state), abs=1e-12)


class TestSymmetrizedProduct:
    def test_half_is_petz_fuchs(self):
        rng = np.random.default_rng(6)
        rho, e = random_state(rng), random_effect(rng)
        out = symmetrized_product(rho, e, 0.5)
        assert np.max(np.abs(out - petz_fuchs(rho, e))) < 1e-12

    def test_one_is_swv(self):
        rng = np.random.default_rng(7)
        rho, e = random_state(rng), random_effect(rng)
        out = symmetrized_product(rho, e, 1.0)
        assert np.max(np.abs(out - swv_state(rho, e).state)) < 1e-12

    def test_commuting_inputs_alpha_independent(self):
        rho = np.diag([0.25, 0.75]).astype(complex)
        e = np.diag([0.4, 0.9]).astype(complex)
        outs = [symmetrized_product(rho, e, a) for a in (0.5, 0.7, 1.0)]
        for out in outs[1:]:
            assert np.max(np.abs(out - outs[0])) < 1e-12

    def test_rejects_alpha_outside_range(self):
        rng = np.random.default_rng(8)
        with pytest.raises(ValueError):
            symmetrized_product(random_state(rng), random_effect(rng), 0.3)


class TestSmoothTrajectory:
    def test_final_smoothed_equals_filtered(self):
        res = smooth_trajectory(params(t_final=0.5, seed=6))
        assert np.max(np.abs(res.smoothed[-1] - res.filtered[-1])) < 1e-12

    def test_every_smoothed_state_physical(self):
        for unraveling in ("jump", "homodyne_x", "homodyne_y"):
            res = smooth_trajectory(params(unraveling=unraveling, t_final=1.0, seed=10))
            assert qmath.min_eigenvalue_stack(res.smoothed).min() >= -1e-10
            traces = np.einsum("tii->t", res.smoothed).real
            assert np.max(np.abs(traces - 1.0)) < 1e-12

    def test_purity_series_consistent(self):
        res = smooth_trajectory(params(t_final=0.3, seed=2))
        assert res.purity_filtered[0] == pytest.approx(1.0)
        i = 150
        assert res.purity_smoothed[i] == pytest.approx(
            qmath.purity(res.smoothed[i]), abs=1e-12)


class TestLongHorizon:
    def test_twenty_gamma_inverse_record_stays_stable(self):
        # 20000 steps: several effect rescalings, no under/overflow, the
        # pairing stays constant and every state stays physical.
        p = params(t_final=20.0, seed=3)
        res = smooth_trajectory(p)
        lp = res.log_pairing
        assert np.all(np.isfinite(res.effects.ravel()))
        assert (lp.max() - lp.min()) / abs(lp.mean()) < 1e-8
        assert qmath.min_eigenvalue_stack(res.smoothed).min() >= -1e-10


class TestThreeLevelSupport:
    def test_estimators_work_beyond_qubits(self):
        # the operator algebra is dimension agnostic even though only the
        # qubit model is wired to a sampler
        rng = np.random.default_rng(8)
        g = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        rho = mm(g, dag(g))
        rho /= trace_of(rho).real
        g = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        eff = mm(g, dag(g))
        out = petz_fuchs(rho, eff)
        assert out.shape == (3, 3)
        assert trace_of(out).real == pytest.approx(1.0, abs=1e-12)
        assert qmath.min_eigenvalue(out) >= -1e-10
        sym = symmetrized_product(rho, eff, 0.7)
        assert trace_of(sym).real == pytest.approx(1.0, abs=1e-10)


class TestNonUnitEfficiency:
    def test_smoothing_stays_consistent_below_unit_eta(self):
        # eta < 1 routes part of the emission into the unmeasured Kraus
        # list; filtering and smoothing must stay physical and paired.
        for unraveling in ("jump", "homodyne_x"):
            p = params(unraveling=unraveling, eta=0.6, t_final=1.0, seed=17)
            res = smooth_trajectory(p)
            lp = res.log_pairing
            assert (lp.max() - lp.min()) / abs(lp.mean()) < 1e-8
            assert qmath.min_eigenvalue_stack(res.smoothed).min() >= -1e-10
            assert np.max(np.abs(res.smoothed[-1] - res.filtered[-1])) < 1e-12

    def test_lower_eta_recovers_less_purity(self):
        gains = {}
        for eta in (1.0, 0.3):
            p = params(eta=eta, t_final=1.5, seed=23)
            from qsmooth.ensemble import EnsembleSpec, run_ensemble
            res = run_ensemble(EnsembleSpec(params=p, n_traj=200,
                                            steady_window=(0.75, 1.5)))
            gains[eta] = res.purity_gain_mean
        assert gains[1.0] > gains[0.3] > 0.0


class TestCriterion2MonteCarloHomodyne:
    def test_future_average_recovers_filtered(self):
        # Continuous outcomes cannot be enumerated; sample futures from the
        # actual record distribution and average the smoothed states.
        p = params(unraveling="homodyne_x", dt=1e-2, t_final=0.3, seed=13)
        past_steps = 10
        n_fut = 400
        ops = build_step_operators(p)
        fr = filter_trajectory(p.replace(t_final=past_steps * p.dt))
        rho_f = fr.states[-1]

        from qsmooth.dynamics import filter_batch
        p_fut = p.replace(t_final=(p.n_steps - past_steps) * p.dt,
                          rho0=rho_f, seed=555)
        outcomes, _, _, _ = filter_batch(p_fut, ops, range(n_fut))
        # effect pullback per sampled future, reusing the recorded outcomes
        acc = np.zeros((2, 2), dtype=complex)
        for i in range(n_fut):
            rec = smoothing.MeasurementRecord(
                unraveling=p.unraveling, dt=p.dt, outcomes=outcomes[i])
            eff = retrofilter(rec, p_fut, ops=ops)
            acc += petz_fuchs(rho_f, eff.effects[0])
        mean = acc / n_fut
        tol = 4.0 / np.sqrt(n_fut)
        assert np.max(np.abs(mean - rho_f)) < tol
