"""Remote-entanglement rates over fibre, with and without telecom conversion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

GEOMETRY_FACTOR = {"midpoint": 2.0, "endpoint": 1.0}


class NoCrossoverError(ValueError):
    """Conversion is better (or worse) at every separation."""


@dataclass(frozen=True)
class LinkParams:
    alpha_visible_db_per_km: float = 8.0
    alpha_telecom_db_per_km: float = 0.2
    qe_visible: float = 0.80
    qe_telecom: float = 0.41
    eta_conversion: float = 0.17
    p_photon_per_pulse: float = 7.1e-4
    protocol_exponent: int = 2
    geometry: str = "midpoint"
    attempt_rate_hz: float = 1.0

    def __post_init__(self):
        if self.alpha_visible_db_per_km <= 0 or self.alpha_telecom_db_per_km <= 0:
            raise ValueError("attenuations must be positive")
        for name in ("qe_visible", "qe_telecom", "eta_conversion", "p_photon_per_pulse"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.protocol_exponent not in (1, 2):
            raise ValueError("protocol_exponent must be 1 or 2")
        if self.geometry not in GEOMETRY_FACTOR:
            raise ValueError(f"geometry must be one of {sorted(GEOMETRY_FACTOR)}")
        if self.attempt_rate_hz <= 0:
            raise ValueError("attempt_rate_hz must be positive")

    @property
    def geometry_factor(self) -> float:
        return GEOMETRY_FACTOR[self.geometry]


def arm_transmission(length_km, alpha_db_per_km: float):
    L = np.asarray(length_km, dtype=float)
    if np.any(L < 0):
        raise ValueError("length must be non-negative")
    out = 10.0 ** (-alpha_db_per_km * L / 10.0)
    return float(out) if out.ndim == 0 else out


def entanglement_success(separation_km, converted: bool, lp: LinkParams):
    """Success probability per attempt: the per-photon detection probability to the protocol exponent."""
    arm = np.asarray(separation_km, dtype=float) / lp.geometry_factor
    if converted:
        q = lp.p_photon_per_pulse * lp.eta_conversion * lp.qe_telecom * arm_transmission(arm, lp.alpha_telecom_db_per_km)
    else:
        q = lp.p_photon_per_pulse * lp.qe_visible * arm_transmission(arm, lp.alpha_visible_db_per_km)
    return q ** lp.protocol_exponent


def entanglement_rate(separation_km, converted: bool, lp: LinkParams):
    return lp.attempt_rate_hz * entanglement_success(separation_km, converted, lp)


def crossover_closed_form(lp: LinkParams) -> float:
    """Separation where both schemes succeed equally: the log-ratio is linear in distance."""
    d_alpha = lp.alpha_telecom_db_per_km - lp.alpha_visible_db_per_km
    if d_alpha == 0:
        raise NoCrossoverError("equal attenuations: the rate ratio never changes with distance")
    gain = lp.eta_conversion * lp.qe_telecom / lp.qe_visible
    if gain <= 0:
        raise NoCrossoverError("converted link never detects a photon")
    d = lp.geometry_factor * 10.0 * math.log10(gain) / d_alpha
    if d < 0:
        raise NoCrossoverError("conversion is worse at every separation" if d_alpha > 0
                               else "conversion is better at every separation")
    return d


def _log_ratio(d: float, lp: LinkParams) -> float:
    # log10(converted / unconverted) per photon; exact in log space, no underflow at long range
    arm = d / lp.geometry_factor
    return (math.log10(lp.eta_conversion * lp.qe_telecom / lp.qe_visible)
            + (lp.alpha_visible_db_per_km - lp.alpha_telecom_db_per_km) * arm / 10.0)


def crossover_distance(lp: LinkParams, tol_km: float = 1e-9) -> float:
    """Break-even separation by bracketing root search on the log rate ratio.

    Raises :class:`NoCrossoverError` when the sign of the ratio never changes.
    """
    if lp.alpha_telecom_db_per_km == lp.alpha_visible_db_per_km:
        raise NoCrossoverError("equal attenuations: the rate ratio never changes with distance")
    if lp.eta_conversion * lp.qe_telecom == 0 or lp.qe_visible == 0:
        raise NoCrossoverError("one of the links never detects a photon")
    f0 = _log_ratio(0.0, lp)
    if f0 == 0:
        return 0.0
    slope = (lp.alpha_visible_db_per_km - lp.alpha_telecom_db_per_km) / (10.0 * lp.geometry_factor)
    if f0 * slope > 0:
        raise NoCrossoverError("conversion is better at every separation" if f0 > 0
                               else "conversion is worse at every separation")
    hi = 1.0
    while _log_ratio(hi, lp) * f0 > 0:
        hi *= 2.0
    return brentq(_log_ratio, 0.0, hi, args=(lp,), xtol=tol_km, rtol=4 * np.finfo(float).eps)


def rate_sweep(lp: LinkParams, max_km: float, step_km: float) -> np.ndarray:
    """Rows ``(separation_km, rate_unconverted, rate_converted)``."""
    d = np.arange(0.0, max_km + 0.5 * step_km, step_km)
    return np.column_stack([d, entanglement_rate(d, False, lp), entanglement_rate(d, True, lp)])
