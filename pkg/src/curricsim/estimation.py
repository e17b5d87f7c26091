"""Online latent-skill estimation from (cursor, joints) observations.

A bootstrap particle filter tracks the learner's hidden weight-estimate
state through gameplay observations; extended and unscented Kalman
filters are provided as baselines, plus the Monte-Carlo consistency
benchmark that compares the three on single-trial skill estimation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import engine
from .engine import BatchState, CURSOR_DIM, JOINT_DIM, SYNERGY_DIM
from .model import (GameConfig, LearnerState, ModelParams, SynergySystem,
                    TrialRecord, initial_state)

log = logging.getLogger(__name__)

STATE_DIM = LearnerState.DIM           # 70
OBS_DIM = CURSOR_DIM + JOINT_DIM       # observe (x, q)
_W_SLICE = slice(CURSOR_DIM, CURSOR_DIM + 8)
_Q_SLICE = slice(STATE_DIM - JOINT_DIM, STATE_DIM)

COV_EIGENVALUE_FLOOR = 1e-12


@dataclass(frozen=True)
class FilterConfig:
    """Particle / Gaussian filter tuning knobs."""

    n_particles: int = 500
    likelihood_std_x: float = 0.05     # grid units
    likelihood_std_q: float = 0.02     # joint units
    resample_ess_fraction: float = 0.5
    init_w_spread: float = 0.2         # of ||W_true||_F / sqrt(8), per entry
    roughen_w: float = 0.1             # post-resample W jitter, of cloud std
    ukf_alpha: float = 0.1
    ukf_beta: float = 2.0
    ukf_kappa: float = 0.0

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        for name in ("likelihood_std_x", "likelihood_std_q", "init_w_spread"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.resample_ess_fraction <= 1):
            raise ValueError("resample_ess_fraction must lie in (0, 1]")


@dataclass
class ParticleEnsemble:
    """Weighted set of learner-state hypotheses."""

    states: BatchState
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.states.size

    def validate(self) -> None:
        if self.n < 2:
            raise ValueError("ensemble needs at least two particles")
        if np.any(self.weights < 0):
            raise ValueError("negative particle weight")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to one")

    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.states.copy(), self.weights.copy())


def init_ensemble(system: SynergySystem, anchor: LearnerState,
                  cfg: FilterConfig, rng: np.random.Generator) -> ParticleEnsemble:
    """Particle cloud anchored at a known protocol state.

    The cursor, joints, velocities, and filtered increments copy the
    anchor (they are observed or pinned by the protocol at session start);
    the weight-estimate block gets an independent zero-mean Gaussian cloud
    whose scale is truth-agnostic up to the magnitude of the true map.
    """
    n = cfg.n_particles
    states = anchor.to_batch(n)
    w_scale = np.linalg.norm(system.W_true) / np.sqrt(8.0)
    states.W += cfg.init_w_spread * w_scale \
        * rng.standard_normal((n, CURSOR_DIM, SYNERGY_DIM))
    return ParticleEnsemble(states=states, weights=np.full(n, 1.0 / n))


def log_likelihood(states: BatchState, obs_x: np.ndarray, obs_q: np.ndarray,
                   cfg: FilterConfig) -> np.ndarray:
    """Diagonal-Gaussian observation log-density per particle (un-normalized)."""
    dx = states.x - obs_x
    dq = states.q - obs_q
    return -0.5 * ((dx ** 2).sum(axis=1) / cfg.likelihood_std_x ** 2
                   + (dq ** 2).sum(axis=1) / cfg.likelihood_std_q ** 2)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Systematic (low-variance) resampling; returns particle indices."""
    n = len(weights)
    positions = (np.arange(n) + rng.uniform()) / n
    return np.searchsorted(np.cumsum(weights), positions).clip(max=n - 1)


def _pf_step_inplace(ensemble: ParticleEnsemble, observation, target,
                     system: SynergySystem, params: ModelParams,
                     cfg: FilterConfig, rng: np.random.Generator,
                     dt: float) -> None:
    obs_x = np.asarray(observation[0], dtype=float)
    obs_q = np.asarray(observation[1], dtype=float)

    noise = rng.standard_normal((ensemble.n, engine.NOISE_BLOCK))
    engine.em_step(ensemble.states, np.asarray(target, dtype=float),
                   system.Phi, system.C, system.W_true, params.gamma,
                   params.eta, params.mu, params.k_p, params.a,
                   params.sigma_u, params.sigma_q, dt, noise)

    logw = np.log(ensemble.weights, out=np.full(ensemble.n, -np.inf),
                  where=ensemble.weights > 0)
    logw += log_likelihood(ensemble.states, obs_x, obs_q, cfg)
    shift = logw.max()
    if not np.isfinite(shift):
        log.warning("particle weights underflowed; resetting to uniform")
        ensemble.weights[:] = 1.0 / ensemble.n
    else:
        w = np.exp(logw - shift)
        total = w.sum()
        if total <= 0 or not np.isfinite(total):
            log.warning("particle weights underflowed; resetting to uniform")
            ensemble.weights[:] = 1.0 / ensemble.n
        else:
            ensemble.weights[:] = w / total

    if ensemble.ess() < cfg.resample_ess_fraction * ensemble.n:
        idx = systematic_resample(ensemble.weights, rng)
        ensemble.states = ensemble.states.take(idx)
        ensemble.weights[:] = 1.0 / ensemble.n
        if cfg.roughen_w > 0:
            spread = ensemble.states.W.std(axis=0)        # (2, 4)
            ensemble.states.W += cfg.roughen_w * spread \
                * rng.standard_normal(ensemble.states.W.shape)


def pf_step(ensemble: ParticleEnsemble, observation, target,
            system: SynergySystem, params: ModelParams, cfg: FilterConfig,
            rng: np.random.Generator, dt: float = 0.01) -> ParticleEnsemble:
    """One particle-filter assimilation step.

    Propagates each particle one observation interval with process noise,
    reweights by the Gaussian observation likelihood, renormalizes, and
    systematically resamples when the effective sample size drops below
    the configured fraction.  Returns a new ensemble.
    """
    ensemble.validate()
    out = ensemble.copy()
    _pf_step_inplace(out, observation, target, system, params, cfg, rng, dt)
    return out


def pf_estimate(ensemble: ParticleEnsemble,
                system: SynergySystem | None = None):
    """Weighted-mean weight estimate, and the forward map when a system
    is supplied."""
    w_mean = np.einsum("b,bij->ij", ensemble.weights, ensemble.states.W)
    if system is None:
        return w_mean
    return w_mean, w_mean @ system.Phi


def replay_trial(ensemble: ParticleEnsemble, record: TrialRecord,
                 system: SynergySystem, params: ModelParams,
                 cfg: FilterConfig, rng: np.random.Generator,
                 dt: float) -> ParticleEnsemble:
    """Assimilate every sample of a recorded trial (in place).

    The record's first sample repeats the previous trial's end state and
    is skipped; each subsequent sample triggers one filter step.
    """
    target = np.asarray(record.target_to, dtype=float)
    for k in range(1, len(record.t)):
        _pf_step_inplace(ensemble, (record.x[k], record.q[k]), target,
                         system, params, cfg, rng, dt)
    return ensemble


# --- Gaussian baselines -------------------------------------------------

@dataclass
class GaussianBelief:
    mean: np.ndarray   # (STATE_DIM,)
    cov: np.ndarray    # (STATE_DIM, STATE_DIM)

    def copy(self) -> "GaussianBelief":
        return GaussianBelief(self.mean.copy(), self.cov.copy())


def batch_from_vectors(vecs: np.ndarray) -> BatchState:
    """Unpack (M, STATE_DIM) flattened states into batch arrays."""
    vecs = np.atleast_2d(vecs)
    i = CURSOR_DIM
    x = vecs[:, :i]
    W = vecs[:, i:i + 8].reshape(-1, CURSOR_DIM, SYNERGY_DIM)
    dq = vecs[:, i + 8:i + 8 + JOINT_DIM]
    u = vecs[:, i + 8 + JOINT_DIM:i + 8 + 2 * JOINT_DIM]
    q = vecs[:, i + 8 + 2 * JOINT_DIM:]
    return BatchState(x.copy(), W.copy(), dq.copy(), u.copy(), q.copy())


def vectors_from_batch(batch: BatchState) -> np.ndarray:
    return np.concatenate([
        batch.x, batch.W.reshape(-1, 8), batch.dq, batch.u, batch.q], axis=1)


def hml_transition(target, system: SynergySystem, params: ModelParams,
                   dt: float):
    """Deterministic one-step Euler map on flattened states (batchable)."""
    target = np.asarray(target, dtype=float)

    def f(vecs: np.ndarray) -> np.ndarray:
        batch = batch_from_vectors(vecs)
        engine.em_step(batch, target, system.Phi, system.C, system.W_true,
                       params.gamma, params.eta, params.mu, params.k_p,
                       params.a, 0.0, 0.0, dt, noise=None)
        out = vectors_from_batch(batch)
        return out if np.ndim(vecs) == 2 else out[0]

    return f


def observation_matrix() -> np.ndarray:
    """Linear selection of (x, q) from the flattened state."""
    H = np.zeros((OBS_DIM, STATE_DIM))
    H[0:CURSOR_DIM, 0:CURSOR_DIM] = np.eye(CURSOR_DIM)
    H[CURSOR_DIM:, _Q_SLICE] = np.eye(JOINT_DIM)
    return H


def process_noise_cov(params: ModelParams, dt: float) -> np.ndarray:
    """Discrete process-noise covariance of the Euler-Maruyama step."""
    diag = np.full(STATE_DIM, COV_EIGENVALUE_FLOOR)
    i = CURSOR_DIM + 8
    diag[i:i + JOINT_DIM] = max(params.sigma_q ** 2 * dt, COV_EIGENVALUE_FLOOR)
    diag[i + JOINT_DIM:i + 2 * JOINT_DIM] = \
        max(params.sigma_u ** 2 * dt, COV_EIGENVALUE_FLOOR)
    return np.diag(diag)


def repair_covariance(cov: np.ndarray,
                      floor: float = COV_EIGENVALUE_FLOOR) -> np.ndarray:
    """Symmetrize and floor the spectrum when positive semidefiniteness
    slips (logged)."""
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() < 0:
        log.warning("covariance lost PSD (min eig %.3e); flooring", evals.min())
        evals = np.clip(evals, floor, None)
        cov = (evecs * evals) @ evecs.T
    return cov


def kalman_update(mean, cov, H, R, y):
    """Standard linear measurement update (Joseph-stabilized)."""
    S = H @ cov @ H.T + R
    K = np.linalg.solve(S.T, (cov @ H.T).T).T
    mean = mean + K @ (y - H @ mean)
    ikh = np.eye(len(mean)) - K @ H
    cov = ikh @ cov @ ikh.T + K @ R @ K.T
    return mean, cov


def fd_jacobian(f, z: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference Jacobian of a batchable map."""
    n = len(z)
    steps = np.eye(n) * eps
    plus = f(z[None, :] + steps)
    minus = f(z[None, :] - steps)
    return (plus - minus).T / (2 * eps)


def ekf_step(belief: GaussianBelief, f, H, Q, R, y) -> GaussianBelief:
    """Extended Kalman filter step with finite-difference linearization."""
    F = fd_jacobian(f, belief.mean)
    mean = f(belief.mean)
    cov = F @ belief.cov @ F.T + Q
    cov = repair_covariance(cov)
    mean, cov = kalman_update(mean, cov, H, R, y)
    return GaussianBelief(mean, repair_covariance(cov))


def sigma_points(mean: np.ndarray, cov: np.ndarray, alpha: float,
                 beta: float, kappa: float):
    """Scaled sigma points with mean/covariance weights (2n+1 points)."""
    n = len(mean)
    lam = alpha ** 2 * (n + kappa) - n
    scale = n + lam
    try:
        root = np.linalg.cholesky(scale * cov)
    except np.linalg.LinAlgError:
        root = np.linalg.cholesky(scale * repair_covariance(
            cov, floor=10 * COV_EIGENVALUE_FLOOR))
    pts = np.vstack([mean, mean + root.T, mean - root.T])
    wm = np.full(2 * n + 1, 0.5 / scale)
    wc = wm.copy()
    wm[0] = lam / scale
    wc[0] = lam / scale + (1 - alpha ** 2 + beta)
    return pts, wm, wc


def ukf_step(belief: GaussianBelief, f, H, Q, R, y, alpha, beta, kappa
             ) -> GaussianBelief:
    """Unscented filter step; the measurement is linear so the update is
    an exact Kalman update on the unscented-propagated moments."""
    pts, wm, wc = sigma_points(belief.mean, belief.cov, alpha, beta, kappa)
    prop = f(pts)
    mean = wm @ prop
    dev = prop - mean
    cov = (dev.T * wc) @ dev + Q
    cov = repair_covariance(cov)
    mean, cov = kalman_update(mean, cov, H, R, y)
    return GaussianBelief(mean, repair_covariance(cov))


def gaussian_filter_step(kind: str, belief: GaussianBelief, observation,
                         target, system: SynergySystem, params: ModelParams,
                         cfg: FilterConfig, dt: float = 0.01
                         ) -> GaussianBelief:
    """One EKF or UKF assimilation step on the learner state."""
    f = hml_transition(target, system, params, dt)
    H = observation_matrix()
    Q = process_noise_cov(params, dt)
    R = np.diag(np.concatenate([
        np.full(CURSOR_DIM, cfg.likelihood_std_x ** 2),
        np.full(JOINT_DIM, cfg.likelihood_std_q ** 2)]))
    y = np.concatenate([np.asarray(observation[0], dtype=float),
                        np.asarray(observation[1], dtype=float)])
    if kind == "ekf":
        return ekf_step(belief, f, H, Q, R, y)
    if kind == "ukf":
        return ukf_step(belief, f, H, Q, R, y,
                        cfg.ukf_alpha, cfg.ukf_beta, cfg.ukf_kappa)
    raise ValueError(f"unknown filter kind {kind!r}")


# --- consistency benchmark ----------------------------------------------

def _perturbation_scales(system: SynergySystem) -> dict:
    w_scale = np.linalg.norm(system.W_true) / np.sqrt(8.0)
    return {"x": 0.5, "W": w_scale, "dq": 0.1, "u": 0.5, "q": 1.0}


def perturb_state(state: LearnerState, scale: float,
                  scales: dict, rng: np.random.Generator) -> LearnerState:
    out = state.copy()
    out.x += scale * scales["x"] * rng.standard_normal(CURSOR_DIM)
    out.W_hat += scale * scales["W"] * rng.standard_normal((CURSOR_DIM,
                                                            SYNERGY_DIM))
    out.delta_q += scale * scales["dq"] * rng.standard_normal(JOINT_DIM)
    out.u += scale * scales["u"] * rng.standard_normal(JOINT_DIM)
    out.q += scale * scales["q"] * rng.standard_normal(JOINT_DIM)
    return out


def _prior_cov(scale: float, scales: dict) -> np.ndarray:
    diag = np.empty(STATE_DIM)
    i = 0
    for name, width in (("x", CURSOR_DIM), ("W", 8), ("dq", JOINT_DIM),
                        ("u", JOINT_DIM), ("q", JOINT_DIM)):
        diag[i:i + width] = max((scale * scales[name]) ** 2,
                                COV_EIGENVALUE_FLOOR)
        i += width
    return np.diag(diag)


def filter_consistency_bench(system: SynergySystem, params: ModelParams,
                             n_mc: int = 100, perturb_scale: float = 0.1,
                             rng: np.random.Generator | None = None,
                             game: GameConfig | None = None,
                             cfg: FilterConfig | None = None,
                             target=None) -> dict:
    """Single-trial skill-estimation errors over Monte-Carlo repeats.

    Each repeat perturbs the initial learner state, simulates one game
    trial of that ground-truth learner, feeds the observations to the
    particle, extended, and unscented filters (all initialized at the
    unperturbed nominal state with a prior matched to the perturbation),
    and records each filter's final weight-estimate error.  A diverging
    filter scores +inf rather than aborting the benchmark.
    """
    from .model import integrate_trial  # local to avoid cycle at import time

    rng = np.random.default_rng() if rng is None else rng
    game = game or GameConfig()
    cfg = cfg or FilterConfig()
    target = np.asarray(game.targets[0] if target is None else target,
                        dtype=float)
    scales = _perturbation_scales(system)
    nominal = initial_state(system, rng)

    errors = {"pf": np.empty(n_mc), "ekf": np.empty(n_mc),
              "ukf": np.empty(n_mc)}
    for m in range(n_mc):
        truth0 = perturb_state(nominal, perturb_scale, scales, rng)
        end, record = integrate_trial(truth0, target, system, params, game,
                                      rng, record_joints=True)
        w_final = end.W_hat

        # particle filter
        try:
            pf_cfg = replace(cfg, init_w_spread=max(perturb_scale, 1e-6))
            cloud = init_ensemble(system, nominal, pf_cfg, rng)
            cloud.states.x[:] = record.x[0]
            cloud.states.q[:] = record.q[0]
            replay_trial(cloud, record, system, params, pf_cfg, rng, game.dt)
            w_pf = pf_estimate(cloud)
            errors["pf"][m] = np.linalg.norm(w_pf - w_final)
        except (engine.TrialDiverged, np.linalg.LinAlgError,
                FloatingPointError):
            errors["pf"][m] = np.inf

        # Gaussian filters
        prior = GaussianBelief(nominal.to_vector(),
                               _prior_cov(perturb_scale, scales))
        for kind in ("ekf", "ukf"):
            belief = prior.copy()
            try:
                for k in range(1, len(record.t)):
                    belief = gaussian_filter_step(
                        kind, belief, (record.x[k], record.q[k]), target,
                        system, params, cfg, game.dt)
                w_est = belief.mean[_W_SLICE].reshape(CURSOR_DIM, SYNERGY_DIM)
                err = np.linalg.norm(w_est - w_final)
                errors[kind][m] = err if np.isfinite(err) else np.inf
            except (np.linalg.LinAlgError, FloatingPointError,
                    engine.TrialDiverged):
                errors[kind][m] = np.inf
    return errors
