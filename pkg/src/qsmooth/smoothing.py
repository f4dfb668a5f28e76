"""Backward effect propagation and the smoothed-state estimators.

The retrofiltered effect starts from the identity at the final time and is
pulled back through the adjoints of the same per-step conditional maps
that generated the filtered trajectory. The central estimator is the
closed form

    rho_S(t)  =  sqrt(rho_F(t)) E_R(t) sqrt(rho_F(t)) / Tr[...],

which is also available as a backward recursion through the Petz recovery
map of each step (the two agree on the support of the filtered state).
Alongside it live the smoothed weak-valued state, the symmetrized-product
family interpolating between the two, and a two-observer estimator that
mixes "true" states conditioned on a second, unobserved record.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import channels, qmath
from .dynamics import (
    MeasurementRecord,
    ModelParams,
    StepOperators,
    build_step_operators,
    filter_trajectory,
    trajectory_stream,
)
from .qmath import ZeroTraceError, dag, mm, trace_of

RESCALE_EVERY = 1000  # steps between effect trace rescalings


class DegenerateWeightsError(RuntimeError):
    """Importance weights collapsed onto fewer than two samples."""


@dataclass(eq=False)
class EffectSeries:
    """Retrofiltered effects on the grid, trace-rescaled for stability.

    effects[i] * exp(log_scale[i]) is the raw pulled-back effect; the
    rescaling cancels in every normalized smoothed state.
    """

    effects: np.ndarray
    log_scale: np.ndarray

    def effect_unnormalized(self, i):
        return np.exp(self.log_scale[i]) * self.effects[i]


def _adjoint_step(ops: StepOperators, outcome, effect):
    """One backward step E(t) = F_y^dag[E(t+dt)]."""
    m = ops.measurement_op(outcome)
    inner = mm(dag(m), mm(mm(dag(ops.u), mm(effect, ops.u)), m))
    out = np.zeros_like(inner)
    for kk in ops.k:
        out += mm(dag(kk), mm(inner, kk))
    return out


def _adjoint_step_batch(ops: StepOperators, outcomes_col, effects):
    """Backward step for a batch of effects with per-trajectory outcomes."""
    if ops.unraveling == "jump":
        m = np.where(outcomes_col[:, None, None] >= 0.5,
                     ops.m1[None, :, :], ops.m0[None, :, :])
    else:
        m = ops._hom_base[None, :, :] \
            + outcomes_col[:, None, None] * ops._hom_lin[None, :, :]
    inner = np.einsum("ji,njk,kl->nil", np.conj(ops.u), effects, ops.u)
    inner = np.einsum("nji,njk,nkl->nil", np.conj(m), inner, m)
    out = np.zeros_like(inner)
    for kk in ops.k:
        out += np.einsum("ji,njk,kl->nil", np.conj(kk), inner, kk)
    return out


def retrofilter(record: MeasurementRecord, p: ModelParams,
                ops: StepOperators | None = None,
                rescale_every=RESCALE_EVERY) -> EffectSeries:
    """Retrofiltered effects along a record, E(T) = identity.

    The effect trace is folded into a separately accumulated log scale
    every `rescale_every` steps so that records of any length stay inside
    floating-point range.
    """
    ops = build_step_operators(p) if ops is None else ops
    n = len(record)
    d = ops.dim
    effects = np.empty((n + 1, d, d), dtype=complex)
    log_scale = np.zeros(n + 1)
    effects[n] = np.eye(d)
    e = effects[n]
    logs = 0.0
    for s in range(n - 1, -1, -1):
        e = _adjoint_step(ops, record.outcomes[s], e)
        if (n - s) % rescale_every == 0:
            tr = trace_of(e).real / d
            e = e / tr
            logs += np.log(tr)
        effects[s] = e
        log_scale[s] = logs
    return EffectSeries(effects=effects, log_scale=log_scale)


# -- smoothed-state estimators ----------------------------------------------

def petz_fuchs(filtered, effect):
    """Normalized sqrt(rho_F) E sqrt(rho_F); PSD by construction.

    Accepts the filtered state at any scale. Raises ZeroTraceError when
    the effect assigns (near-)zero likelihood to the state.
    """
    rho = np.asarray(filtered, dtype=complex)
    tr = trace_of(rho).real
    if tr <= 1e-300:
        raise ZeroTraceError("filtered state has (near-)zero trace")
    root = qmath.hermitian_sqrt(rho / tr)
    out = mm(root, mm(np.asarray(effect, dtype=complex), root))
    w = trace_of(out).real
    if w <= 1e-300:
        raise ZeroTraceError("record is inconsistent with the filtered state")
    return out / w


def petz_fuchs_series(filtered_states, effects):
    """Closed-form smoothed states over a whole grid, shape (T, d, d)."""
    states = np.asarray(filtered_states, dtype=complex)
    tr = np.einsum("tii->t", states).real
    roots = qmath.sqrt_psd_stack(states / tr[:, None, None])
    out = np.einsum("tij,tjk,tkl->til", roots, np.asarray(effects, dtype=complex), roots)
    w = np.einsum("tii->t", out).real
    if np.any(w <= 1e-300):
        idx = int(np.argmax(w <= 1e-300))
        raise ZeroTraceError(
            f"record is inconsistent with the filtered state at time index {idx}")
    return out / w[:, None, None]


def petz_fuchs_recursive(filtered_states, record: MeasurementRecord,
                         p: ModelParams, ops: StepOperators | None = None):
    """Smoothed states by the backward Petz-recovery recursion.

    Each step recovers the next smoothed state through the one-step
    conditional map with the stored filtered state as reference prior; the
    forward series is never re-simulated. Agrees with `petz_fuchs_series`
    on the support of the filtered state.
    """
    ops = build_step_operators(p) if ops is None else ops
    states = np.asarray(filtered_states, dtype=complex)
    n = len(record)
    out = np.empty_like(states)
    last = states[n] / trace_of(states[n]).real
    out[n] = last
    for s in range(n - 1, -1, -1):
        fmap = ops.conditional_map(record.outcomes[s])
        rec = channels.petz_recover(fmap, states[s], last)
        tr = trace_of(rec).real
        if tr <= 1e-300:
            raise ZeroTraceError(f"recovery produced zero weight at step {s}")
        last = rec / tr
        out[s] = last
    return out


@dataclass(eq=False)
class SwvOutcome:
    state: np.ndarray
    min_eigenvalue: float


def swv_state(filtered, effect):
    """Smoothed weak-valued state (rho E + E rho) / (2 Tr[rho E]).

    Hermitian and unit trace but not guaranteed PSD; the smallest
    eigenvalue is reported alongside so callers can see when it fails.
    """
    rho = np.asarray(filtered, dtype=complex)
    e = np.asarray(effect, dtype=complex)
    tr = trace_of(mm(rho, e)).real
    if tr <= 1e-300:
        raise ZeroTraceError("Tr[rho E] vanishes")
    state = (mm(rho, e) + mm(e, rho)) / (2.0 * tr)
    return SwvOutcome(state=state, min_eigenvalue=qmath.min_eigenvalue(state))


def symmetrized_product(filtered, effect, alpha):
    """(rho^a E rho^(1-a) + rho^(1-a) E rho^a) / (2 Tr[rho E]), a in [1/2, 1].

    alpha = 1/2 reproduces the Petz-Fuchs state, alpha = 1 the smoothed
    weak-valued state. Fractional powers are taken on the support.
    """
    if not (0.5 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [1/2, 1], got {alpha}")
    rho = np.asarray(filtered, dtype=complex)
    t = trace_of(rho).real
    if t <= 1e-300:
        raise ZeroTraceError("filtered state has (near-)zero trace")
    rho = rho / t
    e = np.asarray(effect, dtype=complex)
    tr = trace_of(mm(rho, e)).real
    if tr <= 1e-300:
        raise ZeroTraceError("Tr[rho E] vanishes")
    pa = qmath.frac_power(rho, alpha)
    pb = qmath.frac_power(rho, 1.0 - alpha)
    out = (mm(pa, mm(e, pb)) + mm(pb, mm(e, pa))) / (2.0 * tr)
    return out


def swv_purity_series(filtered_states, effects):
    """Purity and minimum eigenvalue of the SWV state over a grid."""
    rho = np.asarray(filtered_states, dtype=complex)
    e = np.asarray(effects, dtype=complex)
    re = np.einsum("tij,tjk->tik", rho, e)
    tr = np.einsum("tii->t", re).real
    swv = (re + np.conj(np.swapaxes(re, -1, -2))) / (2.0 * tr[:, None, None])
    pur = np.einsum("tij,tji->t", swv, swv).real
    return pur, qmath.min_eigenvalue_stack(swv)


# -- one-record driver --------------------------------------------------------

@dataclass(eq=False)
class SmoothingResult:
    """Forward filtering plus backward smoothing along one record."""

    params: ModelParams
    record: MeasurementRecord
    times: np.ndarray
    filtered: np.ndarray
    log_weight: np.ndarray
    effects: np.ndarray
    effect_log_scale: np.ndarray
    smoothed: np.ndarray
    purity_filtered: np.ndarray
    purity_smoothed: np.ndarray

    @property
    def log_likelihood(self):
        """Log weight of the whole record under the model."""
        return float(self.log_weight[-1])

    @property
    def log_pairing(self):
        """log Tr[E_R(t) rho_F(t)] with all scale bookkeeping restored.

        Constant along the record up to round-off.
        """
        tr = np.einsum("tij,tji->t", self.effects, self.filtered).real
        return np.log(tr) + self.log_weight + self.effect_log_scale


def smooth_trajectory(p: ModelParams, traj_index=0,
                      ops: StepOperators | None = None) -> SmoothingResult:
    """Generate a record, filter it, and smooth it in one call."""
    ops = build_step_operators(p) if ops is None else ops
    fr = filter_trajectory(p, traj_index, ops=ops)
    eff = retrofilter(fr.record, p, ops=ops)
    smoothed = petz_fuchs_series(fr.states, eff.effects)
    pur_f = np.einsum("tij,tji->t", fr.states, fr.states).real
    pur_s = np.einsum("tij,tji->t", smoothed, smoothed).real
    return SmoothingResult(
        params=p, record=fr.record, times=fr.times, filtered=fr.states,
        log_weight=fr.log_weight, effects=eff.effects,
        effect_log_scale=eff.log_scale, smoothed=smoothed,
        purity_filtered=pur_f, purity_smoothed=pur_s)


# -- two-observer (true state) estimators ------------------------------------

@dataclass(frozen=True, eq=False)
class _BobOps:
    """Measurement operators for the second observer on the a-channel."""

    unraveling: str
    b0: np.ndarray
    b1: np.ndarray
    quad: Optional[np.ndarray]
    hom_base: Optional[np.ndarray]
    hom_lin: Optional[np.ndarray]
    dt: float


def _bob_operators(p: ModelParams, bob_unraveling, bob_phi=None) -> _BobOps:
    if bob_unraveling not in ("jump", "homodyne_x", "homodyne_y"):
        raise ValueError(f"unknown unraveling {bob_unraveling!r}")
    a = np.sqrt(p.gamma * p.nbar) * qmath.SIGMA_PLUS
    ata = mm(dag(a), a)
    eye = np.eye(2, dtype=complex)
    b0 = qmath.hermitian_sqrt(eye - ata * p.dt)
    b1 = np.sqrt(p.dt) * a
    if bob_unraveling == "jump":
        return _BobOps("jump", b0, b1, None, None, None, p.dt)
    phi = bob_phi
    if phi is None:
        phi = 0.0 if bob_unraveling == "homodyne_x" else np.pi / 2
    ph = np.exp(1j * phi)
    quad = a * ph + dag(a) * np.conj(ph)
    y2 = ata * p.dt
    hom_base = eye - 0.5 * y2 + 0.125 * mm(y2, y2)
    hom_lin = a * ph * p.dt
    return _BobOps(bob_unraveling, b0, b1, quad, hom_base, hom_lin, p.dt)


def _alice_ops_for_true_state(p: ModelParams):
    """Step operators plus the residual dissipation channel for eta < 1.

    The second observer takes over the absorption channel; any undetected
    part of the emission channel stays unmeasured and is returned as its
    own Kraus pair (empty tuple at unit efficiency).
    """
    ops = build_step_operators(p)
    if p.eta >= 1.0:
        return ops, ()
    k2 = ops.k[2]  # already sqrt(dt)-scaled undetected emission
    r0 = qmath.hermitian_sqrt(np.eye(ops.dim, dtype=complex) - mm(dag(k2), k2))
    return ops, (r0, k2)


@dataclass(eq=False)
class GwResult:
    """Two-observer smoothing output.

    `gw` is the mixture of true states weighted by the posterior over the
    unobserved record; `gw_pf` applies the closed-form smoothing to each
    true state before mixing. `ess` is sum(w)/max(w) per grid point.
    """

    times: np.ndarray
    gw: np.ndarray
    gw_pf: np.ndarray
    ess: np.ndarray
    n_bob: int


def _combine_true_states(true_states, log_v, effects):
    """Self-normalized mixtures of true states against the effects.

    true_states: (N, T, d, d) normalized; log_v: (N, T) log importance
    weights; effects: (T, d, d). Returns (gw, gw_pf, ess).
    """
    n_t = true_states.shape[1]
    d = true_states.shape[-1]
    gw = np.empty((n_t, d, d), dtype=complex)
    gw_pf = np.empty((n_t, d, d), dtype=complex)
    ess = np.empty(n_t)
    for t in range(n_t):
        rho = true_states[:, t]
        lv = log_v[:, t]
        v = np.exp(lv - np.max(lv))
        ev = np.einsum("nij,nji->n", np.broadcast_to(effects[t], rho.shape), rho).real
        w = v * ev
        wsum = w.sum()
        if wsum <= 0 or w.max() <= 0:
            raise DegenerateWeightsError(f"all weights vanished at index {t}")
        ess[t] = wsum / w.max()
        gw[t] = np.einsum("n,nij->ij", w, rho) / wsum
        roots = qmath.sqrt_psd_stack(rho)
        sand = np.einsum("nij,jk,nkl->nil", roots, effects[t], roots)
        pf = np.einsum("n,nij->ij", v, sand)
        gw_pf[t] = pf / trace_of(pf).real
    return gw, gw_pf, ess


def gw_smooth(record: MeasurementRecord, p: ModelParams, bob_unraveling,
              n_bob, seed, bob_phi=None) -> GwResult:
    """Monte-Carlo two-observer smoothing along a fixed observed record.

    Propagates `n_bob` true-state trajectories with the observed outcome
    clamped to the record and the unobserved outcome sampled from its
    conditional distribution; trajectory i carries the accumulated
    likelihood of the observed record along its path as an importance
    weight. Deterministic given `seed`. Raises DegenerateWeightsError if
    the effective sample size drops below 2.
    """
    if len(record) != p.n_steps:
        raise ValueError(
            f"record has {len(record)} steps but the grid has {p.n_steps}")
    ops, residual = _alice_ops_for_true_state(p)
    bob = _bob_operators(p, bob_unraveling, bob_phi)
    eff = retrofilter(record, p, ops=ops)
    n = len(record)
    d = p.dim

    rho = np.broadcast_to(p.rho0, (n_bob, d, d)).copy()
    log_v = np.zeros((n_bob, n + 1))
    true_states = np.empty((n_bob, n + 1, d, d), dtype=complex)
    true_states[:, 0] = rho

    if bob.unraveling == "jump":
        noise = np.empty((n_bob, n))
        for i in range(n_bob):
            noise[i] = trajectory_stream(seed, i, domain=1).random(n)
    else:
        noise = np.empty((n_bob, n))
        for i in range(n_bob):
            noise[i] = trajectory_stream(seed, i, domain=1).normal(
                0.0, np.sqrt(p.dt), size=n)

    from .dynamics import _sandwich_batch, _sandwich_const

    for s in range(n):
        if residual:
            acc = np.zeros_like(rho)
            for r in residual:
                acc += _sandwich_const(r, rho)
            rho = acc
        m_alice = ops.measurement_op(record.outcomes[s])
        if bob.unraveling == "jump":
            r0 = _sandwich_const(mm(m_alice, bob.b0), rho)
            r1 = _sandwich_const(mm(m_alice, bob.b1), rho)
            t0 = np.einsum("nii->n", r0).real
            t1 = np.einsum("nii->n", r1).real
            tot = t0 + t1
            pz = t1 / tot
            click = noise[:, s] < pz
            rho_m = np.where(click[:, None, None], r1, r0)
            # Sampling z from its actual conditional leaves the summed
            # observed-outcome likelihood t0 + t1 as the weight increment.
            log_v[:, s + 1] = log_v[:, s] + np.log(tot)
        else:
            mean = np.einsum("ij,nji->n", bob.quad, rho).real \
                / np.einsum("nii->n", rho).real
            z = mean + noise[:, s] / p.dt      # unobserved current
            zeta = z * p.dt                    # its increment
            bm = bob.hom_base[None, :, :] + z[:, None, None] * bob.hom_lin[None, :, :]
            mb = np.einsum("ij,njk->nik", m_alice, bm)
            rho_m = _sandwich_batch(mb, rho)
            tr_m = np.einsum("nii->n", rho_m).real
            # density ratio between the zero-mean ostensible Gaussian and
            # the shifted sampler of the increment zeta
            log_q_ratio = -zeta * mean + 0.5 * mean * mean * p.dt
            log_v[:, s + 1] = log_v[:, s] + np.log(tr_m) + log_q_ratio
        rho_u = _sandwich_const(ops.u, rho_m)
        tr_u = np.einsum("nii->n", rho_u).real
        rho = rho_u / tr_u[:, None, None]
        true_states[:, s + 1] = rho

    gw, gw_pf, ess = _combine_true_states(true_states, log_v, eff.effects)
    if np.min(ess) < 2.0:
        raise DegenerateWeightsError(
            f"effective sample size {np.min(ess):.2f} < 2 "
            f"at t index {int(np.argmin(ess))}")
    return GwResult(times=p.times, gw=gw, gw_pf=gw_pf, ess=ess, n_bob=n_bob)


def gw_enumerate(record: MeasurementRecord, p: ModelParams,
                 bob_unraveling="jump"):
    """Exact two-observer smoothing by enumerating every unobserved record.

    Exponential in the record length; intended for short horizons. Returns
    (GwResult, alice_filtered) where alice_filtered is the sum of
    unnormalized true states (it must reproduce the filtered state).
    """
    if bob_unraveling != "jump":
        raise ValueError("enumeration requires the photon-counting unraveling")
    if len(record) != p.n_steps:
        raise ValueError(
            f"record has {len(record)} steps but the grid has {p.n_steps}")
    ops, residual = _alice_ops_for_true_state(p)
    if residual:
        raise ValueError("enumeration requires eta = 1")
    bob = _bob_operators(p, "jump")
    eff = retrofilter(record, p, ops=ops)
    n = len(record)
    d = p.dim

    # branch states carry their joint likelihood in the trace
    branches = [np.asarray(p.rho0, dtype=complex)]
    per_time = [np.array([p.rho0])]
    for s in range(n):
        m_alice = ops.measurement_op(record.outcomes[s])
        nxt = []
        for rho in branches:
            for b in (bob.b0, bob.b1):
                op = mm(ops.u, mm(m_alice, b))
                nxt.append(mm(op, mm(rho, dag(op))))
        branches = nxt
        per_time.append(np.array(branches))

    n_t = n + 1
    gw = np.empty((n_t, d, d), dtype=complex)
    gw_pf = np.empty((n_t, d, d), dtype=complex)
    filtered = np.empty((n_t, d, d), dtype=complex)
    for t in range(n_t):
        rhos = per_time[t]
        traces = np.einsum("nii->n", rhos).real
        filtered[t] = rhos.sum(axis=0)
        norm = rhos / traces[:, None, None]
        ev = np.einsum("nij,nji->n", np.broadcast_to(eff.effects[t], norm.shape), norm).real
        w = traces * ev
        gw[t] = np.einsum("n,nij->ij", w, norm) / w.sum()
        roots = qmath.sqrt_psd_stack(norm)
        sand = np.einsum("nij,jk,nkl->nil", roots, eff.effects[t], roots)
        pf = np.einsum("n,nij->ij", traces, sand)
        gw_pf[t] = pf / trace_of(pf).real
    ess = np.full(n_t, np.nan)
    return GwResult(times=p.times, gw=gw, gw_pf=gw_pf, ess=ess,
                    n_bob=2 ** n), filtered
