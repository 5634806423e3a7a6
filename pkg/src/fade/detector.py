"""Composite shift signal: KL of feature moments times the change in diagonal Fisher."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .divergence import BatchStats, delta_scs
from .errors import ConfigError, DataError
from .fisher import DiagonalFim, fim_distance

SEVERITIES = ("none", "mild", "moderate", "severe")


class DetectorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    gamma: float = Field(default=0.0, ge=0)
    severity_edges: tuple[float, float] = (0.1, 1.0)
    calibration: Literal["fixed", "quantile"] = "quantile"
    quantile_q: float = Field(default=0.95, gt=0, lt=1)
    warmup: int = Field(default=10, ge=1)
    estimator: Literal["gaussian", "histogram"] = "gaussian"

    @field_validator("severity_edges")
    @classmethod
    def _increasing(cls, v):
        if not v[0] < v[1]:
            raise ValueError("severity edges must be strictly increasing")
        return v


@dataclass(frozen=True)
class ShiftSignal:
    t: int
    kl: float
    fim_dist: float
    tau: float
    fired: bool
    severity: str
    gamma_in_effect: Optional[float] = None

    def to_json(self):
        return {
            "t": self.t, "kl": self.kl, "fim_dist": self.fim_dist, "tau": self.tau,
            "fired": self.fired, "severity": self.severity,
            "gamma_in_effect": self.gamma_in_effect,
        }


def grade_severity(kl, edges=(0.1, 1.0)):
    """Map a KL value to a severity grade; ``none`` only for exactly zero KL."""
    e1, e2 = edges
    if kl == 0:
        return "none"
    if kl < e1:
        return "mild"
    if kl < e2:
        return "moderate"
    return "severe"


def calibrate_gamma(tau_history, q, warmup=1):
    """Linear-interpolation ``q``-quantile of the first ``warmup`` tau values."""
    if not 0.0 < q < 1.0:
        raise ConfigError("quantile_q", f"must lie in the open interval (0, 1), got {q}")
    history = list(tau_history)
    if len(history) < warmup:
        raise DataError(f"calibration needs {warmup} warmup tau values, got {len(history)}")
    window = history[:warmup] if warmup > 0 else history
    return float(np.quantile(np.asarray(window, dtype=np.float64), q, method="linear"))


def compute_signal(prev_stats: BatchStats, curr_stats: BatchStats, I_prev: DiagonalFim,
                   I_curr: DiagonalFim, cfg: DetectorConfig, t: int,
                   gamma: Optional[float] = None) -> ShiftSignal:
    """Signal for batch ``t`` given the previous batch's artifacts.

    ``gamma=None`` means no threshold is in effect yet (warmup), so the
    signal never fires.
    """
    if t < 1:
        raise DataError("a shift signal needs a previous batch (t >= 1)")
    kl = delta_scs(prev_stats, curr_stats, cfg.estimator)
    dist = fim_distance(I_curr, I_prev)
    tau = kl * dist
    fired = gamma is not None and tau > gamma
    return ShiftSignal(t, kl, dist, tau, fired, grade_severity(kl, cfg.severity_edges), gamma)


@dataclass
class DetectorState:
    """Per-run tau history and the threshold currently in effect."""

    tau_history: list = field(default_factory=list)
    gamma: Optional[float] = None

    def copy(self):
        return DetectorState(list(self.tau_history), self.gamma)


def threshold_for(cfg: DetectorConfig, state: DetectorState):
    if cfg.calibration == "fixed":
        return cfg.gamma
    return state.gamma


def observe(cfg: DetectorConfig, state: DetectorState, prev_stats, curr_stats, I_prev, I_curr, t):
    """Compute the signal for ``t`` and return it with the advanced detector state."""
    sig = compute_signal(prev_stats, curr_stats, I_prev, I_curr, cfg, t, threshold_for(cfg, state))
    new = state.copy()
    new.tau_history.append(sig.tau)
    if cfg.calibration == "quantile" and new.gamma is None and len(new.tau_history) >= cfg.warmup:
        new.gamma = calibrate_gamma(new.tau_history, cfg.quantile_q, cfg.warmup)
    return sig, new


def in_warmup(cfg: DetectorConfig, state: DetectorState):
    return threshold_for(cfg, state) is None
