"""Vectorized Euler-Maruyama core for the synergy-driven capture game.

Everything that advances learner dynamics in this package funnels through
this module: single game trials, planner rollouts, particle clouds, and
whole fitted-parameter populations.  State is kept as a struct-of-arrays
over a leading batch axis so all of those reuse one stepper, and model
parameters may be scalars or per-member arrays (the fitting code batches a
full population with distinct parameters through one call).

The stepper is plain numpy; at the batch sizes used here (tens to a few
hundred members) each step costs a handful of small matmuls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CURSOR_DIM = 2
SYNERGY_DIM = 4
JOINT_DIM = 20

NOISE_BLOCK = 2 * JOINT_DIM  # per-step Gaussian draws: (xi_q, xi_u)


@dataclass
class BatchState:
    """Learner state arrays with a leading batch axis.

    x  : (B, 2)   cursor position, grid units
    W  : (B, 2, 4) implicit synergy-weight estimate
    dq : (B, 20)  filtered joint increments
    u  : (B, 20)  joint velocities
    q  : (B, 20)  joint angles (relative to the mean calibration posture)
    """

    x: np.ndarray
    W: np.ndarray
    dq: np.ndarray
    u: np.ndarray
    q: np.ndarray

    @property
    def size(self) -> int:
        return self.x.shape[0]

    def copy(self) -> "BatchState":
        return BatchState(self.x.copy(), self.W.copy(), self.dq.copy(),
                          self.u.copy(), self.q.copy())

    def take(self, idx) -> "BatchState":
        """Gather members (used by resampling and tree expansion)."""
        return BatchState(self.x[idx], self.W[idx], self.dq[idx],
                          self.u[idx], self.q[idx])

    @staticmethod
    def tile(x, W, dq, u, q, n: int) -> "BatchState":
        """Replicate one member n times."""
        return BatchState(
            np.tile(np.asarray(x, dtype=float), (n, 1)),
            np.tile(np.asarray(W, dtype=float), (n, 1, 1)),
            np.tile(np.asarray(dq, dtype=float), (n, 1)),
            np.tile(np.asarray(u, dtype=float), (n, 1)),
            np.tile(np.asarray(q, dtype=float), (n, 1)),
        )

    @staticmethod
    def concatenate(states: "list[BatchState]") -> "BatchState":
        return BatchState(
            np.concatenate([s.x for s in states]),
            np.concatenate([s.W for s in states]),
            np.concatenate([s.dq for s in states]),
            np.concatenate([s.u for s in states]),
            np.concatenate([s.q for s in states]),
        )


def _as_col(value, batch: int) -> np.ndarray:
    """Broadcast a scalar or (B,) parameter to a (B, 1) column."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full((batch, 1), float(arr))
    return arr.reshape(batch, 1)


def _has_noise(sigma_u, sigma_q) -> bool:
    return bool(np.any(np.asarray(sigma_u) > 0) or np.any(np.asarray(sigma_q) > 0))


def drift(state: BatchState, target, Phi: np.ndarray, C: np.ndarray,
          W_true: np.ndarray, gamma, eta, mu, k_p, a):
    """Deterministic part of the learner dynamics.

    Returns (dx, dW, ddq, du); the joint angles themselves drift with u.
    ``target`` is (2,) or (B, 2); parameters are scalars or (B,) arrays.
    """
    b = state.size
    gamma_c = _as_col(gamma, b)
    eta_c = _as_col(eta, b)
    mu_c = _as_col(mu, b)
    k_p_c = _as_col(k_p, b)
    a_c = _as_col(a, b)

    # Synergy coordinates of the filtered increments and velocities.
    s = state.dq @ Phi.T                                   # (B, 4)
    v = state.u @ Phi.T                                    # (B, 4)

    w_err = state.W - W_true                               # (B, 2, 4)
    ws = np.einsum("bij,bj->bi", w_err, s)                 # (B, 2)
    dW = -gamma_c[:, :, None] * ws[:, :, None] * s[:, None, :]

    wv = np.einsum("bij,bj->bi", state.W, v)               # (B, 2)
    back = np.einsum("bij,bi->bj", state.W, wv)            # (B, 4)
    err = np.atleast_2d(target) - state.x                  # (B, 2)
    drive = np.einsum("bij,bi->bj", state.W, err)          # (B, 4)
    du = -eta_c * (back @ Phi + mu_c * state.u - k_p_c * (drive @ Phi))

    dx = state.u @ C.T                                     # (B, 2)
    ddq = -a_c * state.dq + state.u
    return dx, dW, ddq, du


def em_step(state: BatchState, target, Phi, C, W_true,
            gamma, eta, mu, k_p, a, sigma_u, sigma_q, dt: float,
            noise: np.ndarray | None = None,
            mask: np.ndarray | None = None) -> None:
    """One Euler-Maruyama step, in place.

    ``noise`` holds (B, 40) standard normals split as (xi_q, xi_u); pass
    None for the deterministic flow.  ``mask`` (B,) freezes finished
    members when given.  The cursor and the joint angles integrate the same
    pre-update velocities, so x - x0 = C (q - q0) holds exactly along the
    whole sample path.
    """
    dx, dW, ddq, du = drift(state, target, Phi, C, W_true,
                            gamma, eta, mu, k_p, a)
    b = state.size
    if noise is not None:
        sdt = np.sqrt(dt)
        dq_noise = _as_col(sigma_q, b) * sdt * noise[:, :JOINT_DIM]
        u_noise = _as_col(sigma_u, b) * sdt * noise[:, JOINT_DIM:]
    if mask is None:
        state.x += dt * dx
        state.W += dt * dW
        state.q += dt * state.u
        state.dq += dt * ddq
        state.u += dt * du
        if noise is not None:
            state.dq += dq_noise
            state.u += u_noise
    else:
        m = mask.astype(float)[:, None]
        state.x += m * (dt * dx)
        state.W += m[:, :, None] * (dt * dW)
        state.q += m * (dt * state.u)
        state.dq += m * (dt * ddq)
        state.u += m * (dt * du)
        if noise is not None:
            state.dq += m * dq_noise
            state.u += m * u_noise


def window_capture_mask(rel_window: np.ndarray, half_width: float,
                        variance_threshold: float) -> np.ndarray:
    """Capture test on target-relative cursor windows.

    rel_window: (B, K, 2) last K cursor samples minus the target center.
    True where every sample is inside the target square (Chebyshev distance
    <= half_width) and the per-axis sample variance (ddof=1) stays below
    the threshold on both axes.
    """
    inside = np.all(np.abs(rel_window) <= half_width, axis=(1, 2))
    var = np.var(rel_window, axis=1, ddof=1)                # (B, 2)
    quiet = np.all(var < variance_threshold, axis=1)
    return inside & quiet


class TrialDiverged(RuntimeError):
    """State norm blew past the divergence guard during integration."""


@dataclass
class TrialBatchResult:
    state: BatchState            # end-of-trial state (in place)
    captured: np.ndarray         # (B,) bool
    n_steps: np.ndarray          # (B,) steps taken by each member
    x_hist: np.ndarray | None    # (T+1, B, 2) including the initial sample
    q_hist: np.ndarray | None    # (T+1, B, 20)


def run_trial_batch(state: BatchState, target, Phi, C, W_true,
                    gamma, eta, mu, k_p, a, sigma_u, sigma_q,
                    dt: float, rng: np.random.Generator | None,
                    max_steps, capture_window: int, half_width: float,
                    variance_threshold: float, check_capture: bool = True,
                    keep_x: bool = True, keep_q: bool = False,
                    divergence_limit: float = 1e6) -> TrialBatchResult:
    """Simulate one trial for every batch member, in place.

    Members stop individually at capture or at their own ``max_steps``
    (scalar or (B,) array); the batch runs until all are done.  Histories
    include the initial sample; rows after a member finishes repeat its
    frozen state.  Raises TrialDiverged when any member crosses the
    divergence guard.
    """
    b = state.size
    target = np.asarray(target, dtype=float)
    if target.ndim == 1:
        target = np.broadcast_to(target, (b, CURSOR_DIM))
    max_steps_arr = np.broadcast_to(np.asarray(max_steps, dtype=int), (b,))
    hard_cap = int(max_steps_arr.max())

    active = np.ones(b, dtype=bool)
    captured = np.zeros(b, dtype=bool)
    n_steps = np.zeros(b, dtype=int)

    # Rolling capture window, target-relative; slot 0 starts as the initial
    # sample and the first check happens once capture_window samples exist.
    window = np.empty((b, capture_window, CURSOR_DIM))
    window[:] = (state.x - target)[:, None, :]
    filled = 1
    ptr = 1 % capture_window

    x_hist = [state.x.copy()] if keep_x else None
    q_hist = [state.q.copy()] if keep_q else None

    noisy = rng is not None and _has_noise(sigma_u, sigma_q)
    step = 0
    while active.any() and step < hard_cap:
        noise = rng.standard_normal((b, NOISE_BLOCK)) if noisy else None
        em_step(state, target, Phi, C, W_true, gamma, eta, mu, k_p, a,
                sigma_u, sigma_q, dt, noise, mask=active)
        step += 1
        n_steps[active] = step

        if keep_x:
            x_hist.append(state.x.copy())
        if keep_q:
            q_hist.append(state.q.copy())

        if not (np.all(np.isfinite(state.u)) and np.all(np.isfinite(state.x))):
            raise TrialDiverged("non-finite state during trial integration")
        if max(np.abs(state.u).max(), np.abs(state.x).max()) > divergence_limit:
            raise TrialDiverged("state norm exceeded divergence guard")

        window[:, ptr, :] = state.x - target
        ptr = (ptr + 1) % capture_window
        filled = min(filled + 1, capture_window)

        if check_capture and filled >= capture_window:
            newly = window_capture_mask(window, half_width,
                                        variance_threshold) & active
            captured |= newly
            active &= ~newly
        active &= step < max_steps_arr

    return TrialBatchResult(
        state=state,
        captured=captured,
        n_steps=n_steps,
        x_hist=np.stack(x_hist) if keep_x else None,
        q_hist=np.stack(q_hist) if keep_q else None,
    )
