"""Independent reference implementations shared by unit and acceptance tests."""

import math

import numpy as np

from qfcsim.chain import DetectorParams, DfgParams, LossBudget, NoiseParams, total_efficiency
from qfcsim.emitter import EmitterParams
from qfcsim.pipeline import run_stream, telecom_arm
from qfcsim.schedule import SequenceSchedule, build_schedule
from qfcsim.timetag import MARK_DARK, MARK_SIGNAL, TimeTagStream, frozen, make_records

S = SequenceSchedule(15, 200, 5000, 250, 100_000, 60)


def tags(rng, n, channel, s=S):
    pulses = build_schedule(s).astype(np.int64)
    near = pulses[rng.integers(0, pulses.size, n * 3 // 4)] + rng.integers(-5_000, 40_000, n * 3 // 4)
    anywhere = rng.integers(0, s.end_ps, n - near.size)
    ts = np.sort(np.clip(np.concatenate([near, anywhere]), 0, None)).astype(np.uint64)
    return TimeTagStream(frozen(make_records(ts, channel)), s.spacing_ps)


def brute_force(a, b, s, start_ps, width_ps, max_k):
    pulses = build_schedule(s).astype(np.int64)
    n = s.pulses_per_sequence

    def pulse_of(ts):
        ts = ts.astype(np.int64)
        rel = ts[:, None] - (pulses[None, :] + start_ps)
        hit = (rel >= 0) & (rel < width_ps)
        idx = np.where(hit.any(axis=1), hit.argmax(axis=1), -1)
        return idx[idx >= 0]

    pa, pb = pulse_of(a.timestamps), pulse_of(b.timestamps)
    raw = np.zeros(2 * max_k + 1, np.int64)
    for lo in range(0, pa.size, 2000):
        ia = pa[lo:lo + 2000, None]
        d = pb[None, :] - ia
        same = (pb[None, :] // n) == (ia // n)
        ok = same & (np.abs(d) <= max_k)
        raw += np.bincount((d[ok] + max_k).ravel(), minlength=2 * max_k + 1)
    return raw


def e2e_counts(seed, nseq=1_000_000):
    s = SequenceSchedule(1, 200, 5000, 250, 100_000, nseq)
    p = EmitterParams()
    det, noise = DetectorParams(), NoiseParams(dark_rate_cps=190.0, pump_noise_per_100mW=0.0)
    d = DfgParams()
    eta = total_efficiency(d.optimal_power_W, d, LossBudget())
    arm = telecom_arm(det, noise, 1, eta, 0.0)
    st = run_stream(s, p, seed, [arm])
    n_sig = int((st.markers == MARK_SIGNAL).sum())
    n_dark = int((st.markers == MARK_DARK).sum())
    q = p.emission_probability * eta * det.qe
    dark_mean = 190.0 * s.end_ps * 1e-12
    return n_sig, nseq * q, math.sqrt(nseq * q * (1 - q)), n_dark, dark_mean


