"""Seeded Monte-Carlo ensembles over measurement records.

Trajectories run in vectorized lockstep in fixed-size chunks, each one
driven only by its own stream derived from (master_seed, index), and all
reductions happen in fixed index order. Statistics are therefore
bit-identical from run to run and independent of how the work is batched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import channels, qmath, smoothing
from .dynamics import ModelParams, build_step_operators, filter_batch, filter_trajectory
from .qmath import trace_of

ALL_OUTPUTS = (
    "avg_purity_filtered",
    "avg_purity_smoothed",
    "mean_bloch_filtered",
    "mean_bloch_smoothed",
    "unconditional_baseline",
)

_CHUNK = 512


@dataclass(frozen=True, eq=False)
class EnsembleSpec:
    """What to run and what to report."""

    params: ModelParams
    n_traj: int
    master_seed: Optional[int] = None
    outputs: tuple = ALL_OUTPUTS
    steady_window: tuple = (4.0, None)

    def __post_init__(self):
        if self.n_traj < 1:
            raise ValueError("n_traj must be at least 1")
        unknown = set(self.outputs) - set(ALL_OUTPUTS)
        if unknown:
            raise ValueError(f"unknown outputs requested: {sorted(unknown)}")
        if self.master_seed is None:
            object.__setattr__(self, "master_seed", self.params.seed)


@dataclass(eq=False)
class EnsembleResult:
    """Per-time ensemble statistics with standard errors.

    Standard errors are NaN when n_traj == 1. The steady-window fields
    summarize the per-trajectory time-averaged purity gain of smoothing
    over filtering inside `window`, which makes the gain estimate paired
    (one number per trajectory) and its standard error meaningful.
    """

    times: np.ndarray
    n_traj: int
    avg_purity_filtered: np.ndarray
    se_purity_filtered: np.ndarray
    avg_purity_smoothed: np.ndarray
    se_purity_smoothed: np.ndarray
    mean_bloch_filtered: np.ndarray
    mean_bloch_smoothed: np.ndarray
    uncond_bloch: np.ndarray
    uncond_purity: np.ndarray
    window: tuple
    purity_gain_mean: float
    purity_gain_se: float
    relative_improvement: float
    min_smoothed_eigenvalue: float
    max_smoothed_trace_defect: float

    @property
    def window_avg_purity_filtered(self):
        return self._window_mean(self.avg_purity_filtered)

    @property
    def window_avg_purity_smoothed(self):
        return self._window_mean(self.avg_purity_smoothed)

    def _window_mean(self, series):
        lo, hi = self.window
        sel = (self.times >= lo) & (self.times <= hi)
        return float(np.mean(series[sel]))


def _bloch_series(states):
    """Bloch components of a stack of qubit states, shape (..., 3)."""
    out = np.empty(states.shape[:-2] + (3,))
    out[..., 0] = 2.0 * states[..., 1, 0].real
    out[..., 1] = 2.0 * states[..., 1, 0].imag
    out[..., 2] = (states[..., 0, 0] - states[..., 1, 1]).real
    return out


def run_ensemble(spec: EnsembleSpec) -> EnsembleResult:
    """Monte-Carlo ensemble of filtered and smoothed trajectories.

    Deterministic given the spec: trajectory i always consumes stream
    (master_seed, i) and chunks are reduced in index order.
    """
    p = spec.params
    if p.dim != 2:
        raise ValueError("ensemble statistics assume a qubit model")
    ops = build_step_operators(p)
    n = p.n_steps
    times = p.times
    n_traj = spec.n_traj

    lo = spec.steady_window[0]
    hi = spec.steady_window[1] if spec.steady_window[1] is not None else p.t_final
    win = (times >= lo) & (times <= hi)

    pf_sum = np.zeros(n + 1)
    pf_sq = np.zeros(n + 1)
    ps_sum = np.zeros(n + 1)
    ps_sq = np.zeros(n + 1)
    bf_sum = np.zeros((n + 1, 3))
    bs_sum = np.zeros((n + 1, 3))
    gain_sum = 0.0
    gain_sq = 0.0
    min_eig = np.inf
    max_tr_defect = 0.0

    for start in range(0, n_traj, _CHUNK):
        idx = range(start, min(start + _CHUNK, n_traj))
        outcomes, _, states, _ = filter_batch(p, ops, idx, spec.master_seed)
        nb = states.shape[0]

        pur_f = np.einsum("ntij,ntji->nt", states, states).real
        pf_sum += pur_f.sum(axis=0)
        pf_sq += (pur_f ** 2).sum(axis=0)
        bf_sum += _bloch_series(states).sum(axis=0)

        # backward pass fused with per-time smoothed statistics
        pur_s = np.empty((nb, n + 1))
        effect = np.broadcast_to(np.eye(p.dim, dtype=complex), states[:, 0].shape).copy()
        for s in range(n, -1, -1):
            roots = qmath.sqrt_psd_stack(states[:, s])
            sm = np.einsum("nij,njk,nkl->nil", roots, effect, roots)
            tr = np.einsum("nii->n", sm).real
            sm /= tr[:, None, None]
            pur_s[:, s] = np.einsum("nij,nji->n", sm, sm).real
            bs_sum[s] += _bloch_series(sm).sum(axis=0)
            ps_sum[s] += pur_s[:, s].sum()
            ps_sq[s] += (pur_s[:, s] ** 2).sum()
            me = qmath.min_eigenvalue_stack(sm).min()
            min_eig = min(min_eig, float(me))
            max_tr_defect = max(
                max_tr_defect,
                float(np.max(np.abs(np.einsum("nii->n", sm).real - 1.0))))
            if s > 0:
                effect = smoothing._adjoint_step_batch(ops, outcomes[:, s - 1], effect)
                if (n - s + 1) % smoothing.RESCALE_EVERY == 0:
                    effect /= (np.einsum("nii->n", effect).real / p.dim)[:, None, None]

        if np.any(win):
            gains = (pur_s[:, win] - pur_f[:, win]).mean(axis=1)
            gain_sum += gains.sum()
            gain_sq += (gains ** 2).sum()

    def _mean_se(total, total_sq):
        mean = total / n_traj
        if n_traj < 2:
            return mean, np.full_like(np.asarray(mean, dtype=float), np.nan)
        var = (total_sq / n_traj - mean ** 2) * n_traj / (n_traj - 1)
        return mean, np.sqrt(np.maximum(var, 0.0) / n_traj)

    pf_mean, pf_se = _mean_se(pf_sum, pf_sq)
    ps_mean, ps_se = _mean_se(ps_sum, ps_sq)
    if np.any(win):
        g_mean, g_se = _mean_se(np.asarray(gain_sum), np.asarray(gain_sq))
        rel = float(g_mean) / float(np.mean(pf_mean[win]))
    else:
        g_mean = g_se = rel = np.nan

    from .dynamics import unconditional_series
    uncond = unconditional_series(p)
    uncond_purity = np.einsum("tij,tji->t", uncond, uncond).real

    return EnsembleResult(
        times=times, n_traj=n_traj,
        avg_purity_filtered=pf_mean, se_purity_filtered=pf_se,
        avg_purity_smoothed=ps_mean, se_purity_smoothed=ps_se,
        mean_bloch_filtered=bf_sum / n_traj,
        mean_bloch_smoothed=bs_sum / n_traj,
        uncond_bloch=_bloch_series(uncond), uncond_purity=uncond_purity,
        window=(lo, hi),
        purity_gain_mean=float(g_mean), purity_gain_se=float(g_se),
        relative_improvement=rel,
        min_smoothed_eigenvalue=float(min_eig),
        max_smoothed_trace_defect=float(max_tr_defect))


def criterion2_enumerate(p: ModelParams, past_steps, future_steps,
                         effect_scale=1.0, traj_index=0):
    """Defect of averaging smoothed states over every enumerated future.

    Runs `past_steps` of a seeded photon-counting record, enumerates all
    2**future_steps continuations, and returns the max entrywise defect of
    sum_f p(f | past) rho_S(t) against the filtered state at t. The
    terminal effect is `effect_scale` times the identity; the defect is
    invariant under that scale.
    """
    if p.unraveling != "jump":
        raise ValueError("future enumeration is defined for the jump unraveling")
    if future_steps < 0 or future_steps > 16:
        raise ValueError("future_steps must lie in [0, 16]")
    ops = build_step_operators(p)
    past = p.replace(t_final=max(past_steps, 1) * p.dt)
    fr = filter_trajectory(past, traj_index, ops=build_step_operators(past))
    rho_f = fr.states[past_steps] if past_steps > 0 else np.asarray(p.rho0)

    maps = {y: ops.conditional_map(y) for y in (0, 1)}
    eye = np.eye(p.dim, dtype=complex)
    acc = np.zeros((p.dim, p.dim), dtype=complex)
    for bits in np.ndindex(*([2] * future_steps)):
        rho = rho_f
        for y in bits:
            rho = channels.apply(maps[y], rho)
        w = trace_of(rho).real  # p(future | past); the futures sum to 1
        if w <= 0.0:
            continue
        effect = effect_scale * eye
        for y in reversed(bits):
            effect = channels.adjoint_apply(maps[y], effect)
        acc += w * smoothing.petz_fuchs(rho_f, effect)
    return float(np.max(np.abs(acc - rho_f)))
