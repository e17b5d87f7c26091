"""Task-performance and learning metrics over trial records.

Reaching error (RE) is the cursor-to-target distance at the end of the
movement or a fixed cutoff after movement start, whichever comes first.
Straightness of trajectory (SoT) is the maximum deviation of the cursor
path from the start-end chord, as a fraction of the chord length.
Trajectory error (TE) is the norm discrepancy between two cursor paths.
Forward modeling error (FME) is the relative Frobenius error of a
forward-map estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Movement onset: first sample whose cursor speed exceeds this for three
# consecutive samples.
MOVEMENT_SPEED_THRESHOLD = 0.05
MOVEMENT_SPEED_SUSTAIN = 3


@dataclass(frozen=True)
class TrialMetrics:
    re: float
    sot: float
    te: float | None = None


def movement_start_index(x: np.ndarray, dt: float) -> int | None:
    """Index of movement onset, or None for a trace that never moves.

    Speed at sample i is the backward difference |x_i - x_{i-1}| / dt; the
    onset is the first i where the speed stays above the threshold for
    MOVEMENT_SPEED_SUSTAIN consecutive samples.
    """
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return None
    speed = np.linalg.norm(np.diff(x, axis=0), axis=1) / dt   # speed[i] at sample i+1
    fast = speed > MOVEMENT_SPEED_THRESHOLD
    run = 0
    for i, f in enumerate(fast):
        run = run + 1 if f else 0
        if run >= MOVEMENT_SPEED_SUSTAIN:
            return i + 1 - (MOVEMENT_SPEED_SUSTAIN - 1)
    return None


def reaching_error(record, target, cutoff: float = 2.0) -> float:
    """Distance to the target at min(end of movement, onset + cutoff)."""
    x = np.asarray(record.x, dtype=float)
    t = np.asarray(record.t, dtype=float)
    if len(x) == 0:
        raise ValueError("empty trial record")
    target = np.asarray(target, dtype=float)
    dt = t[1] - t[0] if len(t) > 1 else 1.0
    onset = movement_start_index(x, dt)
    if onset is None:
        idx = len(x) - 1
    else:
        t_eval = min(t[-1], t[onset] + cutoff)
        idx = int(np.searchsorted(t, t_eval + 1e-12) - 1)
        idx = max(0, min(idx, len(x) - 1))
    return float(np.linalg.norm(x[idx] - target))


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to the segment a-b (clamped projection)."""
    ab = b - a
    denom = float(ab @ ab)
    tproj = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    feet = a + tproj[:, None] * ab
    return np.linalg.norm(points - feet, axis=1)


def straightness(record) -> float:
    """Max deviation from the start-end chord over the chord length."""
    x = np.asarray(record.x, dtype=float)
    if len(x) < 2:
        raise ValueError("need at least two samples")
    a, b = x[0], x[-1]
    chord = float(np.linalg.norm(b - a))
    if chord <= 1e-9:
        raise ValueError("start and end coincide; trajectory undefined")
    return float(_segment_distances(x, a, b).max() / chord)


def resample_path(path: np.ndarray, n: int) -> np.ndarray:
    """Linear resampling of a cursor path onto n uniformly spaced samples."""
    path = np.asarray(path, dtype=float)
    if len(path) == n:
        return path
    src = np.linspace(0.0, 1.0, len(path))
    dst = np.linspace(0.0, 1.0, n)
    return np.column_stack([np.interp(dst, src, path[:, k])
                            for k in range(path.shape[1])])


def trajectory_error(model_traj, data_traj) -> float:
    """Euclidean norm of the stacked pointwise trajectory differences.

    Unequal lengths are reconciled by linearly resampling the shorter
    trajectory onto the longer one's sample count.
    """
    a = np.asarray(model_traj, dtype=float)
    b = np.asarray(data_traj, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty trajectory")
    n = max(len(a), len(b))
    a = resample_path(a, n)
    b = resample_path(b, n)
    return float(np.linalg.norm((a - b).ravel()))


def forward_modeling_error(C: np.ndarray, C_hat: np.ndarray) -> float:
    """Relative Frobenius error of a forward-map estimate."""
    C = np.asarray(C, dtype=float)
    C_hat = np.asarray(C_hat, dtype=float)
    if C.shape != C_hat.shape:
        raise ValueError("shape mismatch")
    denom = np.linalg.norm(C)
    if denom == 0:
        raise ValueError("reference map is zero")
    return float(np.linalg.norm(C - C_hat) / denom)


def trial_metrics(record, target, cutoff: float = 2.0,
                  reference_traj=None) -> TrialMetrics:
    te = None if reference_traj is None \
        else trajectory_error(record.x, reference_traj)
    return TrialMetrics(re=reaching_error(record, target, cutoff),
                        sot=straightness(record), te=te)
