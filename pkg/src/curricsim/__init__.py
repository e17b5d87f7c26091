"""Simulation and optimization toolkit for model-based curriculum design
in a synergy-driven target capture game."""

from .model import (DegenerateCalibration, GameConfig, LearnerState,
                    ModelParams, SynergySystem, TrialRecord, capture_check,
                    desk_params, drift_rhs, initial_state, integrate_trial,
                    published_params, synthesize_system, trial_transition)

__version__ = "0.1.0"

__all__ = [
    "DegenerateCalibration", "GameConfig", "LearnerState", "ModelParams",
    "SynergySystem", "TrialRecord", "capture_check", "desk_params",
    "drift_rhs", "initial_state", "integrate_trial", "published_params",
    "synthesize_system", "trial_transition", "__version__",
]
