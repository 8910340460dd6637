"""Frequency-conversion chain and detector response.

Stages act on time-tag records:

* :func:`convert_stream` thins photons by the total conversion efficiency
  and shifts survivors by the telecom path delay.
* :func:`detect` applies quantum efficiency, Gaussian timing jitter, dark
  counts, pump-induced noise and (optionally) dead time.

Per-photon randomness is keyed on the photon itself (stage seed, input
timestamp, rank among equal timestamps), and Poisson backgrounds are drawn
per fixed ``NOISE_SLICE_PS`` slice of absolute time, so any partition of a
run into time chunks reproduces the same events.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy import special

from .rng import derive_seed, philox_block, stream_next, stream_reset, uniforms_at
from .timetag import (CH_TELECOM_A, MARK_DARK, MARK_NOISE, RECORD_DTYPE, TimeTagStream,
                      frozen, merge_records)

NOISE_SLICE_PS = 1 << 36  # ~68.7 ms


@dataclass(frozen=True)
class DfgParams:
    eta_max: float = 1.0
    K_per_W_m2: float = 9.61e3
    L_m: float = 0.048
    pump_power_W: float = 0.1

    def __post_init__(self):
        if not (self.K_per_W_m2 > 0 and self.L_m > 0):
            raise ValueError("K and L must be positive")
        if not 0.0 <= self.eta_max <= 1.0:
            raise ValueError("eta_max must lie in [0, 1]")
        if self.pump_power_W < 0:
            raise ValueError("pump power must be non-negative")

    @property
    def optimal_power_W(self) -> float:
        """Pump power of the first conversion maximum, ``(pi / 2L)**2 / K``."""
        return (math.pi / (2 * self.L_m)) ** 2 / self.K_per_W_m2


@dataclass(frozen=True)
class LossBudget:
    internal_conversion: float = 0.65
    in_coupling: float = 0.90
    fiber_coupling: float = 0.85
    waveguide_out: float = 0.90
    fbg_transmission: float = 0.41

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def product(self) -> float:
        return (self.in_coupling * self.internal_conversion * self.fiber_coupling
                * self.waveguide_out * self.fbg_transmission)


@dataclass(frozen=True)
class NoiseParams:
    dark_rate_cps: float = 190.0
    pump_noise_per_100mW: float = 0.31e-5
    window_ns: float = 20.0

    def __post_init__(self):
        if self.dark_rate_cps < 0 or self.pump_noise_per_100mW < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.window_ns <= 0:
            raise ValueError("window_ns must be positive")

    @classmethod
    def sspd(cls) -> "NoiseParams":
        return cls()

    @classmethod
    def apd(cls) -> "NoiseParams":
        return cls(dark_rate_cps=10.0, pump_noise_per_100mW=0.0)

    def pump_noise_rate_cps(self, pump_W: float) -> float:
        """Pump-induced noise as a continuous rate (the per-window figure spread over time)."""
        return self.pump_noise_per_100mW * (pump_W / 0.1) / (self.window_ns * 1e-9)


@dataclass(frozen=True)
class DetectorParams:
    qe: float = 0.41
    jitter_ps_sigma: float = 70.0 / 2.355
    dead_time_ns: float = 0.0
    path_delay_ns: float = 90.0

    def __post_init__(self):
        if not 0.0 <= self.qe <= 1.0:
            raise ValueError("qe must lie in [0, 1]")
        if self.jitter_ps_sigma < 0 or self.dead_time_ns < 0:
            raise ValueError("jitter and dead time must be non-negative")

    @classmethod
    def sspd(cls) -> "DetectorParams":
        return cls()

    @classmethod
    def apd(cls) -> "DetectorParams":
        # APD timing is not characterised; use the sync-chain jitter bound
        return cls(qe=0.80, jitter_ps_sigma=80.0 / 2.355, path_delay_ns=0.0)


def dfg_transfer(P_W, d: DfgParams):
    """Conversion multiplier ``eta_max * sin^2(sqrt(K P) L)``; 1 at the optimum for eta_max = 1."""
    P = np.asarray(P_W, dtype=float)
    if np.any(P < 0):
        raise ValueError("pump power must be non-negative")
    out = d.eta_max * np.sin(np.sqrt(d.K_per_W_m2 * P) * d.L_m) ** 2
    return float(out) if out.ndim == 0 else out


def total_efficiency(P_W, d: DfgParams, lb: LossBudget):
    """End-to-end photon conversion probability, detector QE excluded."""
    return lb.product * dfg_transfer(P_W, d)


def noise_prob_per_window(P_W: float, n: NoiseParams, window_ns: float) -> float:
    """Detected noise counts per excitation in a window: dark counts plus pump-induced noise."""
    if window_ns <= 0:
        raise ValueError("window_ns must be positive")
    return n.dark_rate_cps * window_ns * 1e-9 + n.pump_noise_per_100mW * (P_W / 0.1) * (window_ns / n.window_ns)


def tie_ranks(timestamps: np.ndarray) -> np.ndarray:
    """Rank of each element among equal neighbours of a sorted array."""
    n = timestamps.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.uint64)
    idx = np.arange(n, dtype=np.int64)
    first = np.empty(n, dtype=bool)
    first[0] = True
    first[1:] = timestamps[1:] != timestamps[:-1]
    starts = np.maximum.accumulate(np.where(first, idx, 0))
    return (idx - starts).astype(np.uint64)


def event_uniforms(stage_key: int, timestamps: np.ndarray, n_draws: int) -> np.ndarray:
    """``(len, n_draws)`` uniforms keyed on each event's timestamp and tie rank."""
    ts = np.ascontiguousarray(timestamps, dtype=np.uint64)
    ranks = tie_ranks(ts)
    ids = np.repeat(ts, n_draws)
    pos = (np.repeat(ranks, n_draws) * np.uint64(n_draws)
           + np.tile(np.arange(n_draws, dtype=np.uint64), ts.shape[0]))
    return uniforms_at(stage_key, ids, pos).reshape(ts.shape[0], n_draws)


def gaussian_from_uniform(u):
    return special.ndtri(np.clip(u, 1e-16, 1.0 - 1e-16))


def convert_stream(stream: TimeTagStream, P_W: float, d: DfgParams, lb: LossBudget, seed: int,
                   delay_ns: float = 90.0, channel: int = CH_TELECOM_A) -> TimeTagStream:
    """Thin photons by the conversion efficiency and move survivors to the telecom path."""
    eta = total_efficiency(P_W, d, lb)
    rec = stream.records
    u = event_uniforms(derive_seed(seed, "conversion"), rec["timestamp_ps"], 1)[:, 0]
    out = rec[u < eta].copy()
    out["timestamp_ps"] += np.uint64(int(round(delay_ns * 1000)))
    out["channel"] = channel
    return stream.with_records(frozen(out))


@nb.njit(inline="always")
def _stream_seek(st, j):
    st[2] = j
    m = j % np.uint64(4)
    if m != 0:
        w0, w1, w2, w3 = philox_block(j // np.uint64(4) + np.uint64(1), st[0], st[1])
        st[3] = w0
        st[4] = w1
        st[5] = w2
        st[6] = w3


@nb.njit(inline="always")
def _poisson_small(st, lam):
    u = stream_next(st)
    k = 0
    p = np.exp(-lam)
    c = p
    while u >= c:
        k += 1
        p *= lam / k
        c += p
        if p < 1e-300 and k > lam:
            break
    return k


@nb.njit(cache=True, nogil=True)
def _poisson_slices(key, i_lo, i_hi, slice_ps, lam, t_lo, t_hi):
    st = np.zeros(7, dtype=np.uint64)
    nsl = i_hi - i_lo
    counts = np.zeros(nsl, dtype=np.int64)
    pieces = max(1, int(np.ceil(lam / 500.0)))
    piece_lam = lam / pieces
    for s in range(nsl):
        stream_reset(st, key, np.uint64(i_lo + s))
        c = 0
        for _ in range(pieces):
            c += _poisson_small(st, piece_lam)
        counts[s] = c
    total = counts.sum()
    out = np.empty(total, dtype=np.int64)
    pos = 0
    for s in range(nsl):
        c = counts[s]
        if c == 0:
            continue
        stream_reset(st, key, np.uint64(i_lo + s))
        _stream_seek(st, np.uint64(pieces))
        base = (i_lo + s) * slice_ps
        for i in range(c):
            out[pos + i] = base + np.int64(stream_next(st) * slice_ps)
        out[pos:pos + c].sort()
        pos += c
    keep = (out >= t_lo) & (out < t_hi)
    return out[keep]


def poisson_events(key: int, rate_cps: float, t_lo_ps: int, t_hi_ps: int) -> np.ndarray:
    """Homogeneous Poisson arrival times (ps, sorted) in ``[t_lo, t_hi)``."""
    if rate_cps <= 0 or t_hi_ps <= t_lo_ps:
        return np.empty(0, dtype=np.int64)
    lam = rate_cps * NOISE_SLICE_PS * 1e-12
    i_lo = t_lo_ps // NOISE_SLICE_PS
    i_hi = -(-t_hi_ps // NOISE_SLICE_PS)
    return _poisson_slices(np.uint64(key), i_lo, i_hi, NOISE_SLICE_PS, lam, t_lo_ps, t_hi_ps)


@nb.njit(cache=True)
def dead_time_mask(ts, dead_ps, last_accepted):
    keep = np.empty(ts.shape[0], dtype=np.bool_)
    last = last_accepted
    for i in range(ts.shape[0]):
        if ts[i] - last < dead_ps:
            keep[i] = False
        else:
            keep[i] = True
            last = ts[i]
    return keep, last


def apply_dead_time(records: np.ndarray, dead_time_ns: float, last_accepted: dict | None = None):
    """Drop events within the dead time of the previous accepted event on the same channel.

    Returns ``(records, last accepted time per channel)`` so chunked runs can carry state.
    """
    last = dict(last_accepted or {})
    if dead_time_ns <= 0 or records.shape[0] == 0:
        return records, last
    dead = int(round(dead_time_ns * 1000))
    keep = np.ones(records.shape[0], dtype=bool)
    ts = records["timestamp_ps"].astype(np.int64)
    for ch in np.unique(records["channel"]):
        sel = np.flatnonzero(records["channel"] == ch)
        m, lst = dead_time_mask(ts[sel], dead, last.get(int(ch), -(1 << 62)))
        keep[sel] = m
        last[int(ch)] = int(lst)
    return records[keep], last


def detector_response(times_ps: np.ndarray, markers: np.ndarray, channel: int, det: DetectorParams,
                      noise: NoiseParams, t_lo_ps: int, t_hi_ps: int, seed: int, pump_W: float = 0.0,
                      noise_share: float = 1.0, apply_qe: bool = True) -> np.ndarray:
    """Detected records on ``channel`` for photons arriving at ``times_ps``.

    Photons are thinned by the QE (unless already folded in upstream) and
    jittered; dark counts and the ``noise_share`` of pump-induced noise are
    added over ``[t_lo, t_hi)``.  Dead time is left to the caller.
    """
    ts = np.asarray(times_ps, dtype=np.int64)
    mk = np.asarray(markers, dtype=np.uint8)
    if ts.shape[0]:
        u = event_uniforms(derive_seed(seed, "detect", channel), ts.astype(np.uint64), 2)
        if apply_qe:
            keep = u[:, 0] < det.qe
            ts, mk, u = ts[keep], mk[keep], u[keep]
        if det.jitter_ps_sigma > 0:
            ts = ts + np.rint(det.jitter_ps_sigma * gaussian_from_uniform(u[:, 1])).astype(np.int64)
            np.maximum(ts, 0, out=ts)
    order = np.argsort(ts, kind="stable")
    sig = np.zeros(ts.shape[0], dtype=RECORD_DTYPE)
    sig["timestamp_ps"] = ts[order]
    sig["channel"] = channel
    sig["marker"] = mk[order]
    dark_t = poisson_events(derive_seed(seed, "dark", channel), noise.dark_rate_cps, t_lo_ps, t_hi_ps)
    dark = np.zeros(dark_t.shape[0], dtype=RECORD_DTYPE)
    dark["timestamp_ps"] = dark_t
    dark["channel"] = channel
    dark["marker"] = MARK_DARK
    pump_t = poisson_events(derive_seed(seed, "pump-noise", channel),
                            noise.pump_noise_rate_cps(pump_W) * noise_share, t_lo_ps, t_hi_ps)
    pump = np.zeros(pump_t.shape[0], dtype=RECORD_DTYPE)
    pump["timestamp_ps"] = pump_t
    pump["channel"] = channel
    pump["marker"] = MARK_NOISE
    return merge_records(merge_records(sig, dark), pump)


def detect(stream: TimeTagStream, det: DetectorParams, n: NoiseParams, duration_ps: int, seed: int,
           pump_W: float = 0.0, channel: int | None = None, noise_share: float = 1.0,
           t_start_ps: int = 0) -> TimeTagStream:
    """Detector model over ``[t_start, t_start + duration)``: QE, jitter, dark counts, pump noise, dead time."""
    rec = stream.records
    if channel is None:
        channel = int(rec["channel"][0]) if len(rec) else CH_TELECOM_A
    out = detector_response(rec["timestamp_ps"], rec["marker"], channel, det, n, t_start_ps,
                            t_start_ps + duration_ps, seed, pump_W, noise_share)
    out, _ = apply_dead_time(out, det.dead_time_ns)
    return stream.with_records(frozen(np.ascontiguousarray(out)))
