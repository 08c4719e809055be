"""Monin-Obukhov similarity profiles of wind, temperature, k, and epsilon.

The surface layer state is parameterized by the inverse Obukhov length
(1/Lmo, negative = unstable, positive = stable) and the roughness length z0.
Universal functions: Dyer/Hogstrom forms on the unstable branch
(phi_m = (1 - 19.3 z/L)^(-1/4), phi_h = (1 - 11.6 z/L)^(-1/2) with their
standard integrated psi counterparts) and linear forms phi = 1 + 5 z/L on
the stable branch. Both branches vanish smoothly at neutrality.

The friction velocity is calibrated so the wind speed at the 80 m reference
height is exactly 6 m/s. Turbulence closure:
    k(z)   = u*^2 / sqrt(c_mu) * phi_e^(2/3)
    eps(z) = u*^3 / (kappa z)  * phi_e
with phi_e = phi_m - z/L (equal to 1 in neutral conditions, where k is
constant with height).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KAPPA = 0.41
C_MU = 0.09
V_REF = 6.0
Z_REF = 80.0
THETA_REF = 293.15
GRAVITY = 9.81

INV_LMO_RANGE = (-0.20, 0.10)
Z0_RANGE = (0.05, 1.0)

N_LEVELS = 64
LEVEL_MIN = 1.0
LEVEL_MAX = 400.0


@dataclass(frozen=True)
class StabilityParams:
    inv_lmo: float  # 1/m
    z0: float  # m

    def validate(self) -> "StabilityParams":
        if not INV_LMO_RANGE[0] <= self.inv_lmo <= INV_LMO_RANGE[1]:
            raise ValueError(f"inv_lmo {self.inv_lmo} outside {INV_LMO_RANGE}")
        if not Z0_RANGE[0] <= self.z0 <= Z0_RANGE[1]:
            raise ValueError(f"z0 {self.z0} outside {Z0_RANGE}")
        return self


@dataclass
class MeteorologicalProfile:
    levels: np.ndarray  # (64,) heights in m
    v: np.ndarray  # (64,) horizontal wind speed, m/s
    theta: np.ndarray  # (64,) potential temperature, K
    k: np.ndarray  # (64,) turbulent kinetic energy, m^2/s^2
    eps: np.ndarray  # (64,) dissipation rate, m^3/s^2


def profile_levels() -> np.ndarray:
    """64 geometrically spaced heights from 1 m to 400 m."""
    return np.geomspace(LEVEL_MIN, LEVEL_MAX, N_LEVELS)


def psi_m(zeta):
    """Integrated momentum stability function (0 at neutrality)."""
    zeta = np.asarray(zeta, dtype=np.float64)
    out = np.zeros_like(zeta)
    stable = zeta > 0
    out = np.where(stable, -5.0 * zeta, out)
    unstable = zeta < 0
    if np.any(unstable):
        x = (1.0 - 19.3 * np.where(unstable, zeta, 0.0)) ** 0.25
        val = (
            np.log((1.0 + x) ** 2 * (1.0 + x**2) / 8.0)
            - 2.0 * np.arctan(x)
            + math.pi / 2.0
        )
        out = np.where(unstable, val, out)
    return out


def psi_h(zeta):
    """Integrated heat stability function (0 at neutrality)."""
    zeta = np.asarray(zeta, dtype=np.float64)
    out = np.zeros_like(zeta)
    out = np.where(zeta > 0, -5.0 * zeta, out)
    unstable = zeta < 0
    if np.any(unstable):
        y = np.sqrt(1.0 - 11.6 * np.where(unstable, zeta, 0.0))
        out = np.where(unstable, 2.0 * np.log((1.0 + y) / 2.0), out)
    return out


def phi_m(zeta):
    zeta = np.asarray(zeta, dtype=np.float64)
    out = np.ones_like(zeta)
    out = np.where(zeta > 0, 1.0 + 5.0 * zeta, out)
    unstable = zeta < 0
    if np.any(unstable):
        val = (1.0 - 19.3 * np.where(unstable, zeta, 0.0)) ** -0.25
        out = np.where(unstable, val, out)
    return out


def friction_velocity(params: StabilityParams) -> float:
    """u* such that u(Z_REF) == V_REF exactly."""
    il, z0 = params.inv_lmo, params.z0
    denom = (
        math.log(Z_REF / z0)
        - float(psi_m(Z_REF * il))
        + float(psi_m(z0 * il))
    )
    return KAPPA * V_REF / denom


def background_state(params: StabilityParams, z) -> tuple:
    """(u, theta, k, eps) at heights z (vectorized, z clamped to >= z0)."""
    il, z0 = params.inv_lmo, params.z0
    z = np.maximum(np.asarray(z, dtype=np.float64), z0)
    u_star = friction_velocity(params)
    zeta = z * il
    zeta0 = z0 * il

    u = (u_star / KAPPA) * (np.log(z / z0) - psi_m(zeta) + psi_m(zeta0))
    theta_star = u_star**2 * THETA_REF * il / (KAPPA * GRAVITY)
    theta = THETA_REF + (theta_star / KAPPA) * (
        np.log(z / z0) - psi_h(zeta) + psi_h(zeta0)
    )
    phi_e = phi_m(zeta) - zeta
    k = u_star**2 / math.sqrt(C_MU) * phi_e ** (2.0 / 3.0)
    eps = u_star**3 / (KAPPA * z) * phi_e
    return u, theta, k, eps


def compute_profiles(params: StabilityParams) -> MeteorologicalProfile:
    """64-level vertical profiles for validated stability parameters."""
    params.validate()
    levels = profile_levels()
    u, theta, k, eps = background_state(params, levels)
    return MeteorologicalProfile(levels=levels, v=u, theta=theta, k=k, eps=eps)


def flatten_profiles(profile: MeteorologicalProfile) -> np.ndarray:
    """Concatenate v, theta, k, eps into one length-256 vector."""
    return np.concatenate([profile.v, profile.theta, profile.k, profile.eps])


def unflatten_profiles(vec: np.ndarray) -> MeteorologicalProfile:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (4 * N_LEVELS,):
        raise ValueError(f"expected shape ({4 * N_LEVELS},), got {vec.shape}")
    return MeteorologicalProfile(
        levels=profile_levels(),
        v=vec[:N_LEVELS].copy(),
        theta=vec[N_LEVELS : 2 * N_LEVELS].copy(),
        k=vec[2 * N_LEVELS : 3 * N_LEVELS].copy(),
        eps=vec[3 * N_LEVELS :].copy(),
    )
