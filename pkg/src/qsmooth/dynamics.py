"""Driven thermal qubit: discretized step operators, record generation,
unconditional evolution, and forward filtering.

One time step of the conditional evolution applies, in order, the
dissipation Kraus pair for the unmeasured channel, the measurement
operator for the realized outcome, and the drive unitary:

    rho ->  U M_y ( sum_l K_l rho K_l^dag ) M_y^dag U^dag .

No-event operators are exact operator square roots, M_0 = sqrt(1 - c^dag c dt)
and K_0 = sqrt(1 - a^dag a dt), so each outcome set is complete to machine
precision and conditional step probabilities are exact for the discrete
model. Records are generated from the actual outcome distribution (for
photon counting this just renormalizes the state each step; for homodyne
the Gaussian ostensible noise dW is shifted by the quadrature mean and
retained in the record).

The filtering engine is vectorized over a batch of trajectories; a single
trajectory is the batch of size one. All per-trajectory randomness comes
from an independent stream derived from (master seed, trajectory index).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import qmath
from .channels import CPMap
from .qmath import GROUND, SIGMA_MINUS, SIGMA_PLUS, SIGMA_Y, dag, mm, trace_of

UNRAVELINGS = ("jump", "homodyne_x", "homodyne_y")


class InvalidParamsError(ValueError):
    """Model parameters fail validation."""


def _validated_rho0(rho0, dim=2):
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.shape != (dim, dim):
        raise InvalidParamsError(f"rho0 must be {dim}x{dim}, got {rho0.shape}")
    if np.max(np.abs(rho0 - dag(rho0))) > 1e-12:
        raise InvalidParamsError("rho0 must be Hermitian")
    if qmath.min_eigenvalue(rho0) < -qmath.PSD_CLAMP_TOL:
        raise InvalidParamsError("rho0 must be positive semidefinite")
    tr = trace_of(rho0).real
    if abs(tr - 1.0) > 1e-9:
        raise InvalidParamsError(f"rho0 trace {tr} is not 1")
    out = rho0 / tr
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Physical and numerical configuration of the monitored qubit.

    Rates are in units of gamma, times in units of 1/gamma. `phi` is the
    homodyne phase; when left unset it resolves to 0 for homodyne_x and
    pi/2 for homodyne_y. `eta` is the detection efficiency of the
    monitored emission channel.
    """

    omega: float
    nbar: float
    unraveling: str = "jump"
    gamma: float = 1.0
    phi: Optional[float] = None
    dt: float = 1e-3
    t_final: float = 7.5
    rho0: Optional[np.ndarray] = None
    eta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.unraveling not in UNRAVELINGS:
            raise InvalidParamsError(
                f"unraveling must be one of {UNRAVELINGS}, got {self.unraveling!r}")
        if not (self.gamma > 0):
            raise InvalidParamsError("gamma must be positive")
        if self.nbar < 0:
            raise InvalidParamsError("nbar must be nonnegative")
        if not (0.0 <= self.eta <= 1.0):
            raise InvalidParamsError("eta must lie in [0, 1]")
        if not (self.dt > 0):
            raise InvalidParamsError("dt must be positive")
        if self.t_final < self.dt:
            raise InvalidParamsError("t_final must be at least dt")
        # Exact square roots of 1 - L^dag L dt require the arguments PSD.
        rate_meas = self.eta * self.gamma * (self.nbar + 1.0)
        rate_unmeas = self.gamma * self.nbar + (1.0 - self.eta) * self.gamma * (self.nbar + 1.0)
        if max(rate_meas, rate_unmeas) * self.dt >= 1.0:
            raise InvalidParamsError(
                "dt too large: gamma*(nbar+1)*dt must stay below 1")
        if self.phi is None:
            phi = {"homodyne_x": 0.0, "homodyne_y": np.pi / 2}.get(self.unraveling)
            object.__setattr__(self, "phi", phi)
        rho0 = GROUND if self.rho0 is None else self.rho0
        object.__setattr__(self, "rho0", _validated_rho0(rho0))

    @property
    def dim(self):
        return self.rho0.shape[0]

    @property
    def n_steps(self):
        return int(round(self.t_final / self.dt))

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def is_homodyne(self):
        return self.unraveling != "jump"

    def replace(self, **kw):
        """Copy with the given fields replaced."""
        current = dict(
            omega=self.omega, nbar=self.nbar, unraveling=self.unraveling,
            gamma=self.gamma, phi=self.phi, dt=self.dt, t_final=self.t_final,
            rho0=self.rho0, eta=self.eta, seed=self.seed)
        if "unraveling" in kw and "phi" not in kw:
            current["phi"] = None
        current.update(kw)
        return ModelParams(**current)


def _expm_hermitian(h, scale):
    """exp(1j * scale * H) for Hermitian H via eigendecomposition."""
    w, v = np.linalg.eigh(h)
    return (v * np.exp(1j * scale * w)) @ dag(v)


@dataclass(frozen=True, eq=False)
class StepOperators:
    """Discretized one-step operators for one unraveling choice.

    `c` is the monitored (detected) collapse operator, `a` the unmeasured
    absorption operator; `k` holds the dissipation Kraus list for every
    unmeasured channel, with k[0] the exact no-event square root.
    """

    u: np.ndarray
    k: tuple
    c: np.ndarray
    a: np.ndarray
    dt: float
    unraveling: str
    phi: Optional[float] = None
    # derived operators, filled in __post_init__
    ctc: np.ndarray = field(init=False)
    m0: np.ndarray = field(init=False)
    m1: np.ndarray = field(init=False)
    xquad: Optional[np.ndarray] = field(init=False)
    _hom_base: Optional[np.ndarray] = field(init=False)
    _hom_lin: Optional[np.ndarray] = field(init=False)

    def __post_init__(self):
        ctc = mm(dag(self.c), self.c)
        object.__setattr__(self, "ctc", ctc)
        eye = np.eye(self.dim, dtype=complex)
        object.__setattr__(self, "m1", np.sqrt(self.dt) * self.c)
        object.__setattr__(self, "m0", qmath.hermitian_sqrt(eye - ctc * self.dt))
        if self.unraveling == "jump":
            object.__setattr__(self, "xquad", None)
            object.__setattr__(self, "_hom_base", None)
            object.__setattr__(self, "_hom_lin", None)
        else:
            ph = np.exp(1j * self.phi)
            object.__setattr__(self, "xquad", self.c * ph + dag(self.c) * np.conj(ph))
            y2 = ctc * self.dt
            object.__setattr__(self, "_hom_base", eye - 0.5 * y2 + 0.125 * mm(y2, y2))
            object.__setattr__(self, "_hom_lin", self.c * ph * self.dt)

    @property
    def dim(self):
        return self.u.shape[0]

    @classmethod
    def from_operators(cls, h, c, unmeasured, dt, unraveling, phi=None):
        """Build step operators from a Hamiltonian and collapse operators.

        `unmeasured` is the list of Lindblad operators whose dissipation is
        not resolved by the detector; they become the event Kraus
        operators, with the exact no-event root completing the set.
        """
        h = np.asarray(h, dtype=complex)
        d = h.shape[0]
        eye = np.eye(d, dtype=complex)
        u = _expm_hermitian(h, -dt)
        total = np.zeros((d, d), dtype=complex)
        events = []
        for L in unmeasured:
            L = np.asarray(L, dtype=complex)
            total += mm(dag(L), L)
            events.append(np.sqrt(dt) * L)
        k0 = qmath.hermitian_sqrt(eye - total * dt)
        a = unmeasured[0] if unmeasured else np.zeros((d, d), dtype=complex)
        return cls(u=u, k=(k0, *events), c=np.asarray(c, dtype=complex),
                   a=np.asarray(a, dtype=complex), dt=dt,
                   unraveling=unraveling, phi=phi)

    # -- measurement operators -------------------------------------------

    def jump_measurement_ops(self, p_ost=None):
        """(M_0, M_1) for photon counting.

        With p_ost given, returns the operators referenced to that
        ostensible click probability, M_1 = sqrt(dt / p_ost) c and
        M_0 = sqrt((1 - c^dag c dt) / (1 - p_ost)); both are scalar
        rescalings of the physical pair returned when p_ost is None.
        """
        if p_ost is None:
            return self.m0, self.m1
        if not (0.0 < p_ost < 1.0):
            raise ValueError(f"ostensible probability must be in (0, 1), got {p_ost}")
        return self.m0 / np.sqrt(1.0 - p_ost), self.m1 / np.sqrt(p_ost)

    def homodyne_measurement_op(self, y):
        """M_y = 1 + c e^{i phi} y dt - c^dag c dt / 2 + (c^dag c dt)^2 / 8."""
        return self._hom_base + y * self._hom_lin

    def measurement_op(self, outcome):
        """Physical measurement operator for one recorded outcome."""
        if self.unraveling == "jump":
            return self.m1 if outcome >= 0.5 else self.m0
        return self.homodyne_measurement_op(float(outcome))

    # -- channels ---------------------------------------------------------

    def conditional_map(self, outcome):
        """The one-step conditional CP map F_y as a Kraus list."""
        m = self.measurement_op(outcome)
        um = mm(self.u, m)
        return CPMap(tuple(mm(um, kk) for kk in self.k))

    def dissipation_map(self):
        return CPMap(self.k)

    def unconditional_map(self):
        """Outcome-summed channel; exactly trace preserving."""
        ops = []
        for m in (self.m0, self.m1):
            um = mm(self.u, m)
            ops.extend(mm(um, kk) for kk in self.k)
        return CPMap(tuple(ops))


def build_step_operators(p: ModelParams) -> StepOperators:
    """Step operators for the driven thermal qubit.

    H = omega sigma_y / 2, monitored channel sqrt(eta gamma (nbar+1)) sigma-,
    unmeasured channels sqrt(gamma nbar) sigma+ plus, for eta < 1, the
    undetected part sqrt((1-eta) gamma (nbar+1)) sigma-.
    """
    h = 0.5 * p.omega * SIGMA_Y
    c_full = np.sqrt(p.gamma * (p.nbar + 1.0)) * SIGMA_MINUS
    c = np.sqrt(p.eta) * c_full
    a = np.sqrt(p.gamma * p.nbar) * SIGMA_PLUS
    unmeasured = [a]
    if p.eta < 1.0:
        unmeasured.append(np.sqrt(1.0 - p.eta) * c_full)
    ops = StepOperators.from_operators(
        h, c, unmeasured, p.dt, p.unraveling, phi=p.phi)
    return ops


# -- unconditional evolution ----------------------------------------------

def unconditional_step(p: ModelParams, rho, ops: StepOperators | None = None):
    """One step of the outcome-summed channel; trace is preserved."""
    ops = build_step_operators(p) if ops is None else ops
    from . import channels
    return channels.apply(ops.unconditional_map(), rho)


def unconditional_series(p: ModelParams):
    """Unconditional evolution on the full grid, shape (n+1, d, d)."""
    ops = build_step_operators(p)
    emap = ops.unconditional_map()
    from . import channels
    out = np.empty((p.n_steps + 1, p.dim, p.dim), dtype=complex)
    out[0] = p.rho0
    for s in range(p.n_steps):
        out[s + 1] = channels.apply(emap, out[s])
    return out


# -- records and filtering --------------------------------------------------

@dataclass(frozen=True, eq=False)
class MeasurementRecord:
    """Time-ordered outcomes of one monitored run.

    For photon counting `outcomes` holds the click bits (0.0 / 1.0); for
    homodyne it holds the measured currents y_t, and `ostensible_noise`
    keeps the Gaussian increments dW used to generate them so a run can be
    reproduced exactly.
    """

    unraveling: str
    dt: float
    outcomes: np.ndarray
    ostensible_noise: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.outcomes)

    @property
    def n_detections(self):
        if self.unraveling != "jump":
            raise ValueError("detection count is defined for jump records only")
        return int(np.sum(self.outcomes >= 0.5))


@dataclass(eq=False)
class StepOutcome:
    value: float
    dw: Optional[float] = None


@dataclass(eq=False)
class FilterResult:
    """Forward filtering output along one record.

    `states` are the normalized filtered states on the grid; `log_weight`
    accumulates the per-step outcome likelihoods, so exp(log_weight[i]) *
    states[i] is the unnormalized filtered state (for photon counting its
    trace is the probability of the record so far).
    """

    params: ModelParams
    record: MeasurementRecord
    states: np.ndarray
    log_weight: np.ndarray

    @property
    def times(self):
        return self.params.times

    def state_unnormalized(self, i):
        return np.exp(self.log_weight[i]) * self.states[i]

    @property
    def states_unnormalized(self):
        return np.exp(self.log_weight)[:, None, None] * self.states


def trajectory_stream(master_seed, index, domain=0):
    """Independent generator for trajectory `index` under `master_seed`.

    `domain` separates unrelated stream families (inner samplers must not
    collide with the trajectory streams of the same master seed).
    """
    ss = np.random.SeedSequence(entropy=int(master_seed),
                                spawn_key=(int(domain), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def sample_step(p: ModelParams, rho_norm, rng, ops: StepOperators | None = None):
    """Draw one measurement outcome from the actual distribution.

    Returns (StepOutcome, rng). For photon counting the click probability
    is dt Tr[c^dag c K(rho)] / Tr[K(rho)]; for homodyne the current is the
    quadrature mean of K(rho) plus dW/dt with dW ~ Normal(0, dt), and dW is
    reported alongside.
    """
    ops = build_step_operators(p) if ops is None else ops
    from . import channels
    rho_k = channels.apply(ops.dissipation_map(), np.asarray(rho_norm, dtype=complex))
    trk = trace_of(rho_k).real
    if p.unraveling == "jump":
        p1 = p.dt * trace_of(mm(ops.ctc, rho_k)).real / trk
        click = float(rng.random() < p1)
        return StepOutcome(click, None), rng
    mean = trace_of(mm(ops.xquad, rho_k)).real / trk
    dw = rng.normal(0.0, np.sqrt(p.dt))
    return StepOutcome(mean + dw / p.dt, dw), rng


def _sandwich_const(op, rho):
    """op @ rho @ op^dag with a constant operator over a batch of states."""
    return np.einsum("ij,njk,lk->nil", op, rho, np.conj(op))


def _sandwich_batch(ops_batch, rho):
    """op_n @ rho_n @ op_n^dag with per-trajectory operators."""
    return np.einsum("nij,njk,nlk->nil", ops_batch, rho, np.conj(ops_batch))


def _trace_with(op, rho):
    """Re Tr[op @ rho_n] for a constant operator."""
    return np.einsum("ij,nji->n", op, rho).real


def filter_batch(p: ModelParams, ops: StepOperators, traj_indices,
                 master_seed=None):
    """Filter a batch of trajectories in lockstep.

    Returns (outcomes (N, n), noise (N, n) or None, states (N, n+1, d, d),
    log_weight (N, n+1)). Trajectory i consumes only the stream derived
    from (master_seed, traj_indices[i]), so results do not depend on how
    trajectories are grouped into batches.
    """
    master_seed = p.seed if master_seed is None else master_seed
    n = p.n_steps
    d = p.dim
    idx = list(traj_indices)
    nb = len(idx)
    if p.is_homodyne:
        noise = np.empty((nb, n))
        for row, i in enumerate(idx):
            noise[row] = trajectory_stream(master_seed, i).normal(
                0.0, np.sqrt(p.dt), size=n)
    else:
        noise = np.empty((nb, n))
        for row, i in enumerate(idx):
            noise[row] = trajectory_stream(master_seed, i).random(n)

    states = np.empty((nb, n + 1, d, d), dtype=complex)
    log_weight = np.zeros((nb, n + 1))
    outcomes = np.empty((nb, n))
    rho = np.broadcast_to(p.rho0, (nb, d, d)).copy()
    states[:, 0] = rho

    for s in range(n):
        rho_k = _sandwich_const(ops.k[0], rho)
        for kk in ops.k[1:]:
            rho_k += _sandwich_const(kk, rho)
        trk = np.einsum("nii->n", rho_k).real
        if p.is_homodyne:
            mean = _trace_with(ops.xquad, rho_k) / trk
            y = mean + noise[:, s] / p.dt
            outcomes[:, s] = y
            m = ops._hom_base[None, :, :] + y[:, None, None] * ops._hom_lin[None, :, :]
            rho_m = _sandwich_batch(m, rho_k)
        else:
            p1 = p.dt * _trace_with(ops.ctc, rho_k) / trk
            click = noise[:, s] < p1
            outcomes[:, s] = click
            m = np.where(click[:, None, None], ops.m1[None, :, :], ops.m0[None, :, :])
            rho_m = _sandwich_batch(m, rho_k)
        rho_u = _sandwich_const(ops.u, rho_m)
        w = np.einsum("nii->n", rho_u).real
        log_weight[:, s + 1] = log_weight[:, s] + np.log(w)
        rho = rho_u / w[:, None, None]
        states[:, s + 1] = rho
    return outcomes, (noise if p.is_homodyne else None), states, log_weight


def filter_trajectory(p: ModelParams, traj_index=0,
                      ops: StepOperators | None = None) -> FilterResult:
    """Filtered quantum trajectory for one seeded record.

    Deterministic given (p.seed, traj_index); the stored series includes
    the filtered state at every grid point.
    """
    ops = build_step_operators(p) if ops is None else ops
    outcomes, noise, states, logw = filter_batch(p, ops, [traj_index])
    record = MeasurementRecord(
        unraveling=p.unraveling, dt=p.dt, outcomes=outcomes[0],
        ostensible_noise=None if noise is None else noise[0])
    return FilterResult(params=p, record=record, states=states[0],
                        log_weight=logw[0])
