from __future__ import annotations
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import StateError, ValidationError

log = logging.getLogger(__name__)

PHASE_SHIFTS_DEG = (0.0, -120.0, 120.0)
SUM_TOL = 1e-9
TIE_TOL = 1e-12


@dataclass(frozen=True)
class RemanentFlux:
    """Per-unit remanent flux of the three limbs; sums to zero."""
    phi: Tuple[float, float, float]
    limit: float = 0.9

    def __post_init__(self) -> None:
        phi = tuple(float(p) for p in self.phi)
        if len(phi) != 3:
            raise ValidationError(f"remanent flux needs 3 phases, got {len(phi)}")
        object.__setattr__(self, "phi", phi)
        if abs(sum(phi)) > SUM_TOL:
            raise ValidationError(f"phase fluxes must sum to zero, got {phi} (sum {sum(phi):.3g})")
        if any(abs(p) > self.limit for p in phi):
            raise ValidationError(f"|phi| must be <= {self.limit}, got {phi}")

    def as_array(self) -> np.ndarray:
        return np.array(self.phi, dtype=np.float64)

    def rotated(self) -> "RemanentFlux":
        """(phi1, phi2, phi3) -> (phi2, phi3, phi1)."""
        p1, p2, p3 = self.phi
        return RemanentFlux((p2, p3, p1), self.limit)


@dataclass(frozen=True)
class CoreModel:
    """
    Two-slope saturation: below lambda_sat the core draws lambda / L_mag,
    above it the excess flux sees only the air-core inductance L_air.
    """
    lambda_sat: float = 1.15
    l_mag: float = 500.0
    l_air: float = 0.3

    def __post_init__(self) -> None:
        if not self.lambda_sat > 1.0:
            raise ValidationError(f"lambda_sat must be > 1, got {self.lambda_sat}")
        if not self.l_mag > self.l_air > 0.0:
            raise ValidationError(f"need L_mag > L_air > 0, got L_mag={self.l_mag}, L_air={self.l_air}")

    def current(self, peak_flux: np.ndarray) -> np.ndarray:
        peak_flux = np.asarray(peak_flux, dtype=np.float64)
        return np.where(
            peak_flux <= self.lambda_sat,
            peak_flux / self.l_mag,
            self.lambda_sat / self.l_mag + (peak_flux - self.lambda_sat) / self.l_air,
        )


def sample_remanence(seed: int, flux_max: float = 0.8, limit: float = 0.9) -> RemanentFlux:
    """phi1, phi2 ~ U(-flux_max, flux_max), phi3 = -(phi1 + phi2), resampled until |phi3| <= limit."""
    rng = np.random.default_rng(seed)
    while True:
        p1, p2 = rng.uniform(-flux_max, flux_max, size=2)
        p3 = -(p1 + p2)
        if abs(p3) <= limit:
            return RemanentFlux((float(p1), float(p2), float(p3)), limit)


def dc_offsets(flux: RemanentFlux, theta_deg) -> np.ndarray:
    """Flux offsets phi_p + cos(theta + delta_p); shape (..., 3)."""
    theta = np.mod(np.asarray(theta_deg, dtype=np.float64), 360.0)
    angles = np.deg2rad(theta[..., None] + np.array(PHASE_SHIFTS_DEG))
    return flux.as_array() + np.cos(angles)


def peak_inrush(flux: RemanentFlux, theta_deg, core: CoreModel = CoreModel()):
    """
    Worst phase current over the first cycle. Angles outside [0, 360) wrap modulo 360.
    Scalar angle -> float; array of angles -> array.
    """
    peak_flux = np.abs(dc_offsets(flux, theta_deg)) + 1.0
    i_max = core.current(peak_flux).max(axis=-1)
    if np.ndim(theta_deg) == 0:
        return float(i_max)
    return i_max


def reward(i_max: float) -> float:
    """-i_max above rated current (1 pu), 1 - i_max otherwise."""
    if i_max < 0:
        raise ValidationError(f"peak current cannot be negative, got {i_max}")
    if i_max > 1.0:
        return -float(i_max)
    return 1.0 - float(i_max)


def oracle_best_angle(flux: RemanentFlux, core: CoreModel = CoreModel(), grid_deg: float = 0.5) -> Tuple[float, float]:
    """
    Exhaustive sweep over theta = k * grid_deg in [0, 360); the smallest minimizing
    angle wins ties.
    """
    if not 0.0 < grid_deg <= 5.0:
        raise ValidationError(f"grid_deg must be in (0, 5], got {grid_deg}")
    n = int(np.ceil(360.0 / grid_deg - 1e-9))
    angles = np.arange(n) * grid_deg
    currents = peak_inrush(flux, angles, core)
    best = int(np.flatnonzero(currents <= currents.min() + TIE_TOL)[0])
    return float(angles[best]), float(currents[best])


@dataclass
class EnvConfig:
    flux_max: float = 0.8
    flux_limit: float = 0.9
    action_bins: int = 72
    gamma: float = 0.99  # one-step episodes: kept for the MDP tuple, unused in targets
    seed: int = 0


@dataclass
class Transition:
    state: RemanentFlux
    angle_deg: float
    reward: float
    i_max: float
    action: Optional[int] = None
    done: bool = True
    next_state: Optional[RemanentFlux] = None


@dataclass
class EnergizeEnv:
    """
    One-step energization episodes: reset() samples a remanent flux, step(angle)
    closes the breaker and returns the transition.
    """
    core: CoreModel = field(default_factory=CoreModel)
    config: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self) -> None:
        self._rng = np.random.default_rng(self.config.seed)
        self._state: Optional[RemanentFlux] = None

    @property
    def n_bins(self) -> int:
        return self.config.action_bins

    @property
    def state(self) -> Optional[RemanentFlux]:
        return self._state

    def reseed(self, seed: int) -> None:
        self._rng = np.random.default_rng(seed)
        self._state = None

    def reset(self, seed: Optional[int] = None, flux: Optional[RemanentFlux] = None) -> RemanentFlux:
        if flux is None:
            if seed is None:
                seed = int(self._rng.integers(0, 2 ** 63))
            flux = sample_remanence(seed, self.config.flux_max, self.config.flux_limit)
        self._state = flux
        return flux

    def step(self, angle_deg: float, action: Optional[int] = None) -> Transition:
        if self._state is None:
            raise StateError("step() called without reset() (episodes are one step long)")
        state, self._state = self._state, None
        i_max = peak_inrush(state, angle_deg, self.core)
        return Transition(
            state=state,
            angle_deg=float(np.mod(angle_deg, 360.0)),
            reward=reward(i_max),
            i_max=i_max,
            action=action,
            done=True,
            next_state=state,
        )


def env_reset(env: EnergizeEnv, seed: Optional[int] = None) -> RemanentFlux:
    return env.reset(seed)


def env_step(env: EnergizeEnv, angle_deg: float) -> Transition:
    return env.step(angle_deg)
