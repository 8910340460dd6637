"""Windowed detection probabilities, efficiency and noise fits, SNR."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fitting import DegenerateDataError, FitResult, weighted_fit
from .histogram import Histogram


@dataclass(frozen=True)
class WindowSpec:
    signal_start_ns: float = 0.0
    signal_width_ns: float = 20.0
    noise_offset_ns: float = 100.0

    def __post_init__(self):
        if self.signal_width_ns <= 0:
            raise ValueError("window width must be positive")
        if abs(self.noise_offset_ns) < self.signal_width_ns:
            raise ValueError("signal and noise windows overlap")

    @property
    def signal_ps(self) -> tuple[int, int]:
        a = round(self.signal_start_ns * 1000)
        return a, a + round(self.signal_width_ns * 1000)

    @property
    def noise_ps(self) -> tuple[int, int]:
        a = round((self.signal_start_ns + self.noise_offset_ns) * 1000)
        return a, a + round(self.signal_width_ns * 1000)


@dataclass(frozen=True)
class RateResult:
    p_signal: float
    p_signal_err: float
    p_noise: float
    p_noise_err: float
    signal_counts: int
    noise_counts: int
    n_excitations: int

    @property
    def negative(self) -> bool:
        return self.p_signal < 0

    @property
    def snr(self) -> float:
        return self.p_signal / self.p_noise if self.p_noise > 0 else math.inf

    def to_dict(self) -> dict:
        return {"p_signal": self.p_signal, "p_signal_err": self.p_signal_err,
                "p_noise": self.p_noise, "p_noise_err": self.p_noise_err,
                "signal_counts": self.signal_counts, "noise_counts": self.noise_counts,
                "n_excitations": self.n_excitations, "snr": self.snr,
                "negative_signal": self.negative}


def windowed_rates(h: Histogram, w: WindowSpec) -> RateResult:
    """Background-subtracted signal and noise probabilities per excitation.

    Errors are Poisson with ``sqrt(max(N, 1))`` so empty windows still carry
    a usable weight downstream.
    """
    S = h.counts_between(*w.signal_ps)
    N = h.counts_between(*w.noise_ps)
    n = h.n_excitations
    return RateResult((S - N) / n, math.sqrt(max(S + N, 1)) / n, N / n, math.sqrt(max(N, 1)) / n, S, N, n)


def _sin2_model(L_m):
    def model(P, p_max, K):
        return p_max * np.sin(np.sqrt(K * P) * L_m) ** 2

    def jac(P, p_max, K):
        arg = np.sqrt(K * P) * L_m
        s2 = np.sin(arg) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            dK = np.where(P > 0, p_max * np.sin(2 * arg) * L_m * np.sqrt(P) / (2 * np.sqrt(K)), 0.0)
        return np.column_stack([s2, dK])

    return model, jac


def fit_efficiency_curve(P_W, p_signal, err, L_m: float) -> FitResult:
    """Fit ``p_max sin^2(sqrt(K P) L)`` to signal probabilities versus pump power.

    Needs at least 4 points with data on both sides of the largest point.
    """
    P = np.asarray(P_W, dtype=float)
    y = np.asarray(p_signal, dtype=float)
    e = np.asarray(err, dtype=float)
    if P.size < 4:
        raise DegenerateDataError("need at least 4 pump powers")
    imax = int(np.argmax(y))
    if not (np.any(P < P[imax]) and np.any(P > P[imax])) or P[imax] <= 0:
        raise DegenerateDataError("insufficient span: points must bracket the efficiency maximum")
    K0 = (math.pi / (2 * L_m)) ** 2 / P[imax]
    model, jac = _sin2_model(L_m)
    return weighted_fit(model, P, y, e, (max(y[imax], 1e-12), K0), ("p_max", "K"), jac)


def fit_noise_line(P_W, p_noise, err, reweight: bool = True) -> FitResult:
    """Weighted straight line ``dark_offset + slope_per_100mW * P / 0.1 W``.

    With ``reweight`` the Poisson variances are re-estimated from the fitted
    line (variance proportional to the expected count) for a few passes,
    which removes the downward bias of data-derived weights on small counts.
    """
    x = np.asarray(P_W, dtype=float) / 0.1
    y = np.asarray(p_noise, dtype=float)
    e0 = np.asarray(err, dtype=float)
    if x.size < 3:
        raise DegenerateDataError("need at least 3 points")
    if np.ptp(x) == 0:
        raise DegenerateDataError("degenerate abscissae")
    if np.any(~(e0 > 0)):
        raise DegenerateDataError("uncertainties must be positive")
    X = np.column_stack([np.ones_like(x), x])
    e = e0
    passes = 4 if reweight else 1
    for i in range(passes):
        A = X / e[:, None]
        b = y / e
        coef, *_ = np.linalg.lstsq(A, b, rcond=None)
        if i == passes - 1:
            break
        m = X @ coef
        ok = (y > 0) & (m > 0)
        e = np.where(ok, e0 * np.sqrt(np.where(ok, m, 1.0) / np.where(ok, y, 1.0)), e0)
    cov = np.linalg.inv(A.T @ A)
    r = A @ coef - b
    names = ("dark_offset", "slope_per_100mW")
    err_ = np.sqrt(np.diag(cov))
    return FitResult(dict(zip(names, map(float, coef))), dict(zip(names, map(float, err_))),
                     cov, float(r @ r) / max(x.size - 2, 1), int(x.size))


def window_capture_ratio(window_ns: float, ref_window_ns: float, tau_ns: float) -> float:
    """Fraction of an exponential decay captured in ``window_ns`` relative to ``ref_window_ns``."""
    return -math.expm1(-window_ns / tau_ns) / -math.expm1(-ref_window_ns / tau_ns)


def snr_curve(eff_fit: FitResult, noise_fit: FitResult, P_grid, L_m: float,
              window_ns: float | None = None, ref_window_ns: float = 20.0,
              tau_ns: float | None = None) -> np.ndarray:
    """``(P, SNR)`` rows from the efficiency and noise fits.

    With ``window_ns`` the signal is rescaled by the captured decay
    fraction (needs ``tau_ns``) and the noise in proportion to the window.
    """
    P = np.asarray(P_grid, dtype=float)
    sig = eff_fit["p_max"] * np.sin(np.sqrt(eff_fit["K"] * P) * L_m) ** 2
    noise = noise_fit["dark_offset"] + noise_fit["slope_per_100mW"] * P / 0.1
    if window_ns is not None:
        if tau_ns is None:
            raise ValueError("rescaling to another window needs the lifetime")
        sig = sig * window_capture_ratio(window_ns, ref_window_ns, tau_ns)
        noise = noise * (window_ns / ref_window_ns)
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = np.where(noise > 0, sig / noise, np.inf)
    return np.column_stack([P, snr])


def expected_g2_zero(snr: float) -> float:
    """Coincidence floor of single photons mixed with Poissonian noise at signal-to-noise ``snr``."""
    if snr < 0:
        raise ValueError("snr must be non-negative")
    if math.isinf(snr):
        return 0.0
    f = snr / (snr + 1.0)
    return 1.0 - f * f
