"""One-histogram analysis bundle shared by the CLI and the acceptance runs."""

from __future__ import annotations

from .fitting import DegenerateDataError, fit_exp_decay
from .histogram import Histogram, arrival_offset_ns
from .rates import WindowSpec, windowed_rates


def analyze_histogram(h: Histogram, arrival_ns: float, window: WindowSpec, fit_start_ns: float,
                      fit_stop_ns: float, fit_bin_width_ps: int) -> dict:
    """Lifetime fit, windowed rates and arrival offset of one channel.

    The lifetime is fitted on bins of ``fit_bin_width_ps`` over
    ``arrival + [fit_start, fit_stop)``.  Returns a JSON-ready dict; a fit
    that cannot be constrained is flagged instead of raised, non-convergence
    propagates.
    """
    flags = []
    n_tags = h.total
    if n_tags == 0:
        flags.append("empty")
    rates = windowed_rates(h, window)
    if rates.negative:
        flags.append("negative_signal")
    out = {"channel": h.channel, "n_tags": n_tags, "n_excitations": h.n_excitations,
           "underflow": h.underflow, "overflow": h.overflow, "rates": rates.to_dict(),
           "window": {"signal_start_ns": window.signal_start_ns, "signal_width_ns": window.signal_width_ns,
                      "noise_offset_ns": window.noise_offset_ns},
           "arrival_offset_ns": arrival_offset_ns(h), "lifetime_fit": None}
    factor = max(1, fit_bin_width_ps // h.bin_width_ps)
    try:
        fit = fit_exp_decay(h.rebin(factor), (arrival_ns + fit_start_ns, arrival_ns + fit_stop_ns))
        out["lifetime_fit"] = fit.to_dict()
    except DegenerateDataError as exc:
        flags.append(f"lifetime_fit_skipped: {exc}")
    out["flags"] = flags
    return out
