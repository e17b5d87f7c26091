"""Learner model, synthetic calibration, and single-trial simulation.

The simulated learner controls a 2-D cursor through 20 joint angles via a
linear forward map C = W_true @ Phi built from a synthetic calibration
session: postures are drawn from a random covariance with a decaying
spectrum, the second and third principal components (scaled by the square
roots of their eigenvalues) become the rows of C, and the grid unit is set
so the 5x5 game window spans one standard deviation of the calibration
cursor spread.

Learner dynamics (drifts; xi_q, xi_u are white noise):

    x'  = C u
    dq' = -a dq + u + xi_q
    W'  = -gamma (W - W_true) (Phi dq)(Phi dq)^T
    u'  = -eta ((Phi^T W^T W Phi + mu I) u - k_p Phi^T W^T (target - x)) + xi_u
    q'  = u
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from . import engine
from .engine import (BatchState, CURSOR_DIM, JOINT_DIM, SYNERGY_DIM,
                     TrialDiverged)

GRID_SIDE = 5.0
TARGETS = ((0.5, 4.5), (2.5, 0.5), (2.5, 2.5), (4.5, 4.5))
WINDOW_CENTER = (GRID_SIDE / 2.0, GRID_SIDE / 2.0)

# Synthetic calibration spectrum: eigenvalues decay geometrically.  The
# absolute scale fixes the forward-map row norms (through the grid-unit
# rule) and with them the reach speed of a trained learner; see
# synthesize_system.
SPECTRUM_SCALE = 4.2
SPECTRUM_DECAY = 0.72
EIGENVALUE_GAP_MIN = 1e-12

# Naive learner: the initial weight estimate is a faint, slightly perturbed
# image of the truth so the initial forward-modeling error sits near 1
# without being an exactly singular zero matrix.
INIT_W_FRACTION = 0.1
INIT_W_JITTER = 0.05


class DegenerateCalibration(ValueError):
    """Synthetic calibration produced an unusable principal spectrum."""


@dataclass(frozen=True)
class ModelParams:
    """Learner dynamics parameters.

    gamma : forward learning rate
    eta   : inverse learning rate
    mu    : optimality parameter
    k_p   : control intensity
    sigma_u : exploratory noise intensity (joint velocity channel)
    sigma_q : perceptual noise intensity (filtered increment channel)
    a     : perceptual recency parameter
    """

    gamma: float
    eta: float
    mu: float
    k_p: float
    sigma_u: float
    sigma_q: float
    a: float = 10.0

    def __post_init__(self):
        for name in ("gamma", "eta", "mu", "k_p", "sigma_u", "sigma_q", "a"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.a <= 0:
            raise ValueError("a must be positive")
        if self.mu <= 0:
            raise ValueError("mu must be positive")

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "eta": self.eta, "mu": self.mu,
                "k_p": self.k_p, "sigma_u": self.sigma_u,
                "sigma_q": self.sigma_q, "a": self.a}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(**{k: float(d[k]) for k in
                      ("gamma", "eta", "mu", "k_p", "sigma_u", "sigma_q", "a")})

    def replace(self, **kw) -> "ModelParams":
        return replace(self, **kw)


def published_params() -> ModelParams:
    """The fitted mean-model parameter set shipped with the package."""
    with resources.files("curricsim.data").joinpath("published_params.json").open() as f:
        return ModelParams.from_dict(json.load(f)["params"])


def desk_params() -> ModelParams:
    """Published values recalibrated to the synthetic rig.

    The synthetic calibration and the original glove recordings use
    different raw joint-data scales; the forward learning rate soaks up
    that squared-units mismatch, so the desk preset rescales gamma (only)
    by the factor recorded in the data file.  All other values are the
    published ones.
    """
    with resources.files("curricsim.data").joinpath("desk_params.json").open() as f:
        return ModelParams.from_dict(json.load(f)["params"])


@dataclass(frozen=True)
class GameConfig:
    """Geometry and timing of the target capture game."""

    targets: tuple = TARGETS
    target_half_width: float = 0.5
    capture_variance_threshold: float = 0.0025
    capture_window: int = 15
    sample_rate: float = 100.0
    trial_cutoff: float = 2.0          # reaching-error / penalty cutoff
    trial_max_duration: float = 10.0   # abandon an uncaptured trial

    def __post_init__(self):
        if self.capture_window < 1:
            raise ValueError("capture_window must be >= 1")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        for t in self.targets:
            if not (0 <= t[0] <= GRID_SIDE and 0 <= t[1] <= GRID_SIDE):
                raise ValueError(f"target {t} outside the game window")

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def max_steps(self) -> int:
        return max(1, int(round(self.trial_max_duration * self.sample_rate)))


@dataclass
class SynergySystem:
    """Synergy basis, true weights, forward map, and game geometry."""

    Phi: np.ndarray          # (4, 20), orthonormal rows
    W_true: np.ndarray       # (2, 4)
    C: np.ndarray            # (2, 20), grid units per joint unit
    unit_scale: float        # grid units per raw cursor-projection unit
    grid_side: float = GRID_SIDE
    eigenvalues: np.ndarray | None = None   # sample spectrum, descending

    def validate(self, tol: float = 1e-9) -> None:
        gram = self.Phi @ self.Phi.T
        if not np.allclose(gram, np.eye(SYNERGY_DIM), atol=tol):
            raise ValueError("synergy basis is not orthonormal")
        if np.linalg.norm(self.C - self.W_true @ self.Phi) > tol:
            raise ValueError("C does not factor as W_true @ Phi")
        if np.linalg.matrix_rank(self.C, tol=1e-10) != CURSOR_DIM:
            raise ValueError("forward map is rank deficient")

    def to_dict(self) -> dict:
        return {
            "Phi": self.Phi.tolist(),
            "W_true": self.W_true.tolist(),
            "C": self.C.tolist(),
            "unit_scale": self.unit_scale,
            "grid_side": self.grid_side,
            "eigenvalues": None if self.eigenvalues is None
                           else self.eigenvalues.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynergySystem":
        sys = cls(
            Phi=np.asarray(d["Phi"], dtype=float),
            W_true=np.asarray(d["W_true"], dtype=float),
            C=np.asarray(d["C"], dtype=float),
            unit_scale=float(d["unit_scale"]),
            grid_side=float(d.get("grid_side", GRID_SIDE)),
            eigenvalues=None if d.get("eigenvalues") is None
                        else np.asarray(d["eigenvalues"], dtype=float),
        )
        sys.validate()
        return sys


@dataclass
class LearnerState:
    """Concatenated learner state (x, W_hat, delta_q, u, q)."""

    x: np.ndarray        # (2,)
    W_hat: np.ndarray    # (2, 4)
    delta_q: np.ndarray  # (20,)
    u: np.ndarray        # (20,)
    q: np.ndarray        # (20,)

    def copy(self) -> "LearnerState":
        return LearnerState(self.x.copy(), self.W_hat.copy(),
                            self.delta_q.copy(), self.u.copy(), self.q.copy())

    def validate(self) -> None:
        for name in ("x", "W_hat", "delta_q", "u", "q"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")

    # Flat layout used by the Gaussian filters: [x, W(row-major), dq, u, q].
    DIM = CURSOR_DIM + CURSOR_DIM * SYNERGY_DIM + 3 * JOINT_DIM

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.W_hat.ravel(),
                               self.delta_q, self.u, self.q])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "LearnerState":
        vec = np.asarray(vec, dtype=float)
        i = CURSOR_DIM
        x = vec[:i].copy()
        W = vec[i:i + 8].reshape(CURSOR_DIM, SYNERGY_DIM).copy()
        i += 8
        dq = vec[i:i + JOINT_DIM].copy()
        i += JOINT_DIM
        u = vec[i:i + JOINT_DIM].copy()
        i += JOINT_DIM
        q = vec[i:i + JOINT_DIM].copy()
        return cls(x, W, dq, u, q)

    def to_batch(self, n: int = 1) -> BatchState:
        return BatchState.tile(self.x, self.W_hat, self.delta_q,
                               self.u, self.q, n)

    @classmethod
    def from_batch(cls, batch: BatchState, member: int = 0) -> "LearnerState":
        return cls(batch.x[member].copy(), batch.W[member].copy(),
                   batch.dq[member].copy(), batch.u[member].copy(),
                   batch.q[member].copy())


@dataclass
class TrialRecord:
    """Time series of one game trial at the game sample rate."""

    target_from: tuple | None
    target_to: tuple
    t: np.ndarray        # (K,)
    x: np.ndarray        # (K, 2)
    q: np.ndarray        # (K, 20)
    captured: bool
    duration: float

    @property
    def n_steps(self) -> int:
        return len(self.t) - 1

    def validate(self, dt: float) -> None:
        steps = np.diff(self.t)
        if len(steps) and not np.allclose(steps, dt, rtol=0, atol=1e-9):
            raise ValueError("samples not uniformly spaced at the sample rate")
        if abs(self.duration - (self.t[-1] - self.t[0])) > 1e-9:
            raise ValueError("duration inconsistent with sample span")


def synthesize_system(seed: int, n_postures: int = 240) -> SynergySystem:
    """Build a synthetic calibration and the derived synergy system.

    Draws n_postures joint configurations from a random covariance with a
    geometrically decaying spectrum, runs PCA on the centered data, takes
    the four leading modes as the synergy basis, and forms the forward map
    from principal components two and three scaled by the square roots of
    their eigenvalues.  The grid unit is chosen so the game window spans
    one standard deviation of the calibration cursor projections.
    """
    if n_postures < JOINT_DIM + 1:
        raise ValueError("need more calibration postures than joint dimensions")
    rng = np.random.default_rng(seed)

    lam = SPECTRUM_SCALE * SPECTRUM_DECAY ** np.arange(JOINT_DIM)
    basis, _ = np.linalg.qr(rng.standard_normal((JOINT_DIM, JOINT_DIM)))
    postures = rng.standard_normal((n_postures, JOINT_DIM)) \
        @ (basis * np.sqrt(lam)).T

    centered = postures - postures.mean(axis=0)
    cov = centered.T @ centered / (n_postures - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]

    gaps = np.diff(evals[:SYNERGY_DIM + 1])
    if np.any(-gaps < EIGENVALUE_GAP_MIN):
        raise DegenerateCalibration(
            f"leading eigenvalue gaps {(-gaps).tolist()} fall below "
            f"{EIGENVALUE_GAP_MIN}; calibration spectrum is degenerate")

    modes = evecs[:, :SYNERGY_DIM].T          # (4, 20)
    # Deterministic sign convention: largest-magnitude entry positive.
    for row in modes:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0

    # Rows of the raw map are PCs 2 and 3 scaled by sqrt(eigenvalue); the
    # cursor-projection std along row i is then eigenvalue_i, and the
    # half-window (grid_side / 2) is pinned to the larger one.
    raw_rows = np.vstack([np.sqrt(evals[1]) * modes[1],
                          np.sqrt(evals[2]) * modes[2]])
    unit_scale = (GRID_SIDE / 2.0) / evals[1]
    C = unit_scale * raw_rows
    W_true = C @ modes.T

    system = SynergySystem(Phi=modes, W_true=W_true, C=C,
                           unit_scale=unit_scale, eigenvalues=evals)
    system.validate()
    return system


W_ENTRIES = CURSOR_DIM * SYNERGY_DIM


def initial_state(system: SynergySystem, rng: np.random.Generator) -> LearnerState:
    """Naive learner at the window center with a faint weight estimate."""
    w_scale = np.linalg.norm(system.W_true) / np.sqrt(W_ENTRIES)
    W0 = INIT_W_FRACTION * system.W_true \
        + INIT_W_JITTER * w_scale * rng.standard_normal((CURSOR_DIM, SYNERGY_DIM))
    return LearnerState(
        x=np.array(WINDOW_CENTER, dtype=float),
        W_hat=W0,
        delta_q=np.zeros(JOINT_DIM),
        u=np.zeros(JOINT_DIM),
        q=np.zeros(JOINT_DIM),
    )


def drift_rhs(state: LearnerState, target, system: SynergySystem,
              params: ModelParams) -> LearnerState:
    """Deterministic state derivative, same shape as the state."""
    state.validate()
    batch = state.to_batch(1)
    dx, dW, ddq, du = engine.drift(
        batch, np.asarray(target, dtype=float), system.Phi, system.C,
        system.W_true, params.gamma, params.eta, params.mu, params.k_p,
        params.a)
    # dq/dt of the joint angles is the current velocity.
    return LearnerState(x=dx[0], W_hat=dW[0], delta_q=ddq[0],
                        u=du[0], q=batch.u[0].copy())


def integrate_trial(init: LearnerState, target, system: SynergySystem,
                    params: ModelParams, game: GameConfig,
                    rng: np.random.Generator, *, record_joints: bool = True,
                    n_steps: int | None = None,
                    check_capture: bool = True) -> tuple[LearnerState, TrialRecord]:
    """Euler-Maruyama simulation of one trial at the game sample rate.

    Ends at capture or at trial_max_duration; ``n_steps`` forces an exact
    step count with capture checking off (used when replaying reference
    trial durations).  Returns the end state and the recorded series.
    """
    init.validate()
    batch = init.to_batch(1)
    max_steps = game.max_steps if n_steps is None else int(n_steps)
    if n_steps is not None:
        check_capture = False
    try:
        res = engine.run_trial_batch(
            batch, np.asarray(target, dtype=float), system.Phi, system.C,
            system.W_true, params.gamma, params.eta, params.mu, params.k_p,
            params.a, params.sigma_u, params.sigma_q, game.dt, rng,
            max_steps, game.capture_window, game.target_half_width,
            game.capture_variance_threshold, check_capture=check_capture,
            keep_x=True, keep_q=record_joints)
    except TrialDiverged as exc:
        raise TrialDiverged(
            f"trial toward {tuple(np.asarray(target))} diverged under "
            f"params {params.to_dict()}") from exc

    k = int(res.n_steps[0])
    t = np.arange(k + 1) * game.dt
    x = res.x_hist[:k + 1, 0, :]
    q = res.q_hist[:k + 1, 0, :] if record_joints else np.zeros((k + 1, JOINT_DIM))
    record = TrialRecord(
        target_from=None,
        target_to=tuple(np.asarray(target, dtype=float)),
        t=t, x=x, q=q,
        captured=bool(res.captured[0]),
        duration=float(t[-1] - t[0]),
    )
    return LearnerState.from_batch(res.state), record


def capture_check(window: np.ndarray, target, game: GameConfig) -> bool:
    """Capture rule on the last capture_window cursor samples.

    True iff every sample sits inside the target square and the per-axis
    sample variance of the window is below the stability threshold.
    """
    window = np.asarray(window, dtype=float)
    if window.shape != (game.capture_window, CURSOR_DIM):
        raise ValueError(
            f"window must have shape ({game.capture_window}, {CURSOR_DIM})")
    rel = window - np.asarray(target, dtype=float)
    return bool(engine.window_capture_mask(
        rel[None, :, :], game.target_half_width,
        game.capture_variance_threshold)[0])


def trial_transition(state: LearnerState, next_target, system: SynergySystem,
                     params: ModelParams, game: GameConfig,
                     rng: np.random.Generator,
                     **kw) -> tuple[LearnerState, TrialRecord]:
    """One trial-to-trial transition: the end state of trial j starts j+1."""
    return integrate_trial(state, next_target, system, params, game, rng, **kw)


def forward_map_estimate(W_hat: np.ndarray, system: SynergySystem) -> np.ndarray:
    """Implicit forward-map estimate W_hat @ Phi."""
    return np.asarray(W_hat) @ system.Phi
