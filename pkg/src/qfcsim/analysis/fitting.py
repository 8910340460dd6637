"""Weighted least-squares fits: the shared engine and the exponential-decay model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import least_squares

from .histogram import Histogram

MAX_ITER = 200
XTOL = 1e-8


class FitError(RuntimeError):
    """The optimiser did not converge within the iteration bound."""


class DegenerateDataError(ValueError):
    """Input cannot constrain the model (too few points, all zeros, ...)."""


@dataclass(frozen=True, eq=False)
class FitResult:
    params: dict[str, float]
    std_errors: dict[str, float]
    covariance: np.ndarray
    chi2_per_dof: float
    n_points: int
    n_evaluations: int = 0

    def __getitem__(self, name: str) -> float:
        return self.params[name]

    def to_dict(self) -> dict:
        return {"params": dict(self.params), "std_errors": dict(self.std_errors),
                "covariance": self.covariance.tolist(), "chi2_per_dof": self.chi2_per_dof,
                "n_points": self.n_points}


def weighted_fit(model: Callable, x: np.ndarray, y: np.ndarray, sigma: np.ndarray,
                 p0: Sequence[float], names: Sequence[str], jac: Callable | None = None) -> FitResult:
    """Minimise ``sum(((y - model(x, *p)) / sigma)**2)`` with Levenberg-Marquardt.

    Converged means a relative parameter step below ``XTOL``; the evaluation
    budget corresponds to ``MAX_ITER`` iterations.  Without an analytic
    Jacobian a forward-difference one is used.  Standard errors come from
    ``(J^T J)^-1`` of the whitened problem at the optimum.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~np.isfinite(y)) or np.any(~(sigma > 0)):
        raise DegenerateDataError("data must be finite with positive uncertainties")
    n, k = y.size, len(p0)
    if n < k:
        raise DegenerateDataError(f"{n} points cannot constrain {k} parameters")

    def resid(p):
        return (model(x, *p) - y) / sigma

    wjac = "2-point" if jac is None else (lambda p: jac(x, *p) / sigma[:, None])
    res = least_squares(resid, np.asarray(p0, dtype=float), jac=wjac, method="lm", x_scale="jac",
                        xtol=XTOL, ftol=1e-15, gtol=1e-15, max_nfev=MAX_ITER * (k + 1))
    if res.status <= 0 or not np.all(np.isfinite(res.x)):
        raise FitError(f"no convergence after {res.nfev} evaluations: {res.message}")
    J = res.jac
    try:
        cov = np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError as exc:
        raise DegenerateDataError("singular Jacobian at the optimum") from exc
    chi2 = float(res.fun @ res.fun)
    err = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return FitResult(dict(zip(names, map(float, res.x))), dict(zip(names, map(float, err))),
                     cov, chi2 / max(n - k, 1), n, int(res.nfev))


def poisson_sigma(counts: np.ndarray) -> np.ndarray:
    # max(count, 1): zero bins keep a finite weight
    return np.sqrt(np.maximum(counts, 1.0))


def _exp_model(t, A, tau, B):
    return A * np.exp(-t / tau) + B


def _exp_jac(t, A, tau, B):
    e = np.exp(-t / tau)
    return np.column_stack([e, A * e * t / tau ** 2, np.ones_like(t)])


def fit_exp_decay(h: Histogram, fit_range_ns: tuple[float, float]) -> FitResult:
    """Fit ``A exp(-t/tau) + B`` to the bins lying wholly inside ``fit_range_ns``.

    ``t`` is measured from the start of the fit range, so ``A`` is the
    signal per bin there.  Weights are Poisson with ``max(count, 1)``.
    """
    lo, hi = (int(round(v * 1000)) for v in fit_range_ns)
    starts = h.bin_starts_ps
    sel = (starts >= lo) & (starts + h.bin_width_ps <= hi)
    y = h.bins[sel].astype(float)
    if np.count_nonzero(y) < 10:
        raise DegenerateDataError("fewer than 10 non-empty bins in the fit range")
    t = (starts[sel] + 0.5 * h.bin_width_ps - lo) * 1e-3
    tail = y[int(0.8 * y.size):]
    B0 = float(tail.mean())
    head = np.clip(y - B0, 0.0, None)
    A0 = max(float(head[:3].mean()), 1.0)
    tau0 = float(np.clip((head * t).sum() / max(head.sum(), 1.0), 0.05 * t[-1], t[-1]))
    return weighted_fit(_exp_model, t, y, poisson_sigma(y), (A0, tau0, B0), ("A", "tau_ns", "B"), _exp_jac)
