"""Pulsed Hanbury-Brown-Twiss coincidence histograms.

Peak ``k`` counts tag pairs (a, b) inside their pulse windows whose pulse
indices differ by ``k`` within the same excitation sequence.  The expected
accidental count for peak ``k`` is

    sum_i S_A[i] * S_B[i + k] / N_seq

where ``S[i]`` are windowed singles at pulse position ``i`` of a sequence, so
the ``n - |k|`` pairs available per sequence are respected.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numba as nb
import numpy as np

from ..schedule import SequenceSchedule, locate
from ..timetag import CH_SYNC, TimeTagStream


@dataclass(frozen=True, eq=False)
class G2Result:
    ks: np.ndarray
    peak_delays_ns: np.ndarray
    g2_values: np.ndarray
    g2_errors: np.ndarray
    raw_coincidences: np.ndarray
    accidental_normalization: np.ndarray
    singles_a: int
    singles_b: int
    n_sequences: int

    def at(self, k: int) -> tuple[float, float]:
        i = int(np.flatnonzero(self.ks == k)[0])
        return float(self.g2_values[i]), float(self.g2_errors[i])

    def to_dict(self) -> dict:
        return {"k": self.ks.tolist(), "delay_ns": self.peak_delays_ns.tolist(),
                "g2": self.g2_values.tolist(), "g2_err": self.g2_errors.tolist(),
                "raw": self.raw_coincidences.tolist(),
                "accidentals": self.accidental_normalization.tolist(),
                "singles_a": self.singles_a, "singles_b": self.singles_b,
                "n_sequences": self.n_sequences}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "delay_ns", "g2", "g2_err", "raw", "accidentals"])
            for row in zip(self.ks.tolist(), self.peak_delays_ns.tolist(), self.g2_values.tolist(),
                           self.g2_errors.tolist(), self.raw_coincidences.tolist(),
                           self.accidental_normalization.tolist()):
                w.writerow(row)


@nb.njit(cache=True, nogil=True)
def _windowed_pulses(ts, chans, channels, scs, widths):
    """Pulse index of each tag inside its window, for up to two channels in one pass.

    ``scs[c]`` is the schedule shifted to channel ``c``'s window start.
    """
    m = channels.shape[0]
    out = np.empty((m, ts.shape[0]), dtype=np.int64)
    cnt = np.zeros(m, dtype=np.int64)
    n = scs[0, 2]
    spacing = scs[0, 1]
    # per-channel cursor: window-start time and pulse index of the current pulse
    lo = np.full(m, np.int64(1) << 62)
    idx = np.full(m, np.int64(-1))
    for i in range(ts.shape[0]):
        c = chans[i]
        a = -1
        for q in range(m):
            if channels[q] == c:
                a = q
        if a < 0:
            continue
        t = np.int64(ts[i])
        r = t - lo[a]
        if r < 0 or r >= spacing:
            if spacing <= r < 2 * spacing and idx[a] % n != n - 1:
                lo[a] += spacing
                idx[a] += 1
                r -= spacing
            else:
                j, r = locate(t, scs[a])
                if j < 0:
                    continue
                lo[a] = t - r
                idx[a] = j
        if r < widths[a]:
            out[a, cnt[a]] = idx[a]
            cnt[a] += 1
    return out, cnt


@nb.njit(cache=True, nogil=True)
def _coincidences(pa, pb, n, max_k, raw, singles_a, singles_b):
    j0 = 0
    nbt = pb.shape[0]
    for i in range(pa.shape[0]):
        p = pa[i]
        s0 = (p // n) * n
        singles_a[p - s0] += 1
        lo = max(p - max_k, s0)
        hi = min(p + max_k, s0 + n - 1)
        while j0 < nbt and pb[j0] < lo:
            j0 += 1
        j = j0
        while j < nbt and pb[j] <= hi:
            raw[pb[j] - p + max_k] += 1
            j += 1
    s0 = np.int64(-1)
    for j in range(nbt):
        q = pb[j]
        if s0 < 0 or q >= s0 + n or q < s0:
            s0 = (q // n) * n
        singles_b[q - s0] += 1


def _shifted(schedule: SequenceSchedule, start_ns: float) -> np.ndarray:
    sc = schedule.as_ints()
    sc[0] += round(start_ns * 1000)
    return sc


def windowed_pulse_indices_pair(records: np.ndarray, channels: tuple[int, int], schedule: SequenceSchedule,
                                window_starts_ns: tuple[float, float], window_ns: float):
    """Windowed pulse indices of two channels of one record array, in a single pass."""
    if channels[0] == channels[1]:
        raise ValueError("channels must differ")
    scs = np.stack([_shifted(schedule, w) for w in window_starts_ns])
    w = round(window_ns * 1000)
    out, cnt = _windowed_pulses(records["timestamp_ps"], records["channel"],
                                np.asarray(channels, dtype=np.int64), scs, np.array([w, w], dtype=np.int64))
    return out[0, :cnt[0]].copy(), out[1, :cnt[1]].copy()


def windowed_pulse_indices(records: np.ndarray, channel: int, schedule: SequenceSchedule,
                           window_start_ns: float, window_ns: float) -> np.ndarray:
    """Global pulse index of every tag on ``channel`` inside its pulse window (sorted)."""
    out, cnt = _windowed_pulses(records["timestamp_ps"], records["channel"], np.array([channel], np.int64),
                                _shifted(schedule, window_start_ns)[None, :],
                                np.array([round(window_ns * 1000)], np.int64))
    return out[0, :cnt[0]].copy()


def sequence_index(schedule: SequenceSchedule, t_ps: int) -> int:
    """Sequence holding the last pulse at or before ``t_ps`` (-1 before the first pulse)."""
    idx, _ = locate(np.int64(t_ps), schedule.as_ints())
    return -1 if idx < 0 else int(idx) // schedule.pulses_per_sequence


class G2Accumulator:
    """Coincidence counts accumulated over chunks of a run.

    ``add`` and ``add_pulses`` need chunks that hold whole excitation
    sequences.  ``feed`` accepts arbitrary time-ordered chunks: pulses of
    sequences not yet known to be complete are carried to the next call.
    """

    def __init__(self, schedule: SequenceSchedule, window_ns: float = 25.0, max_k: int = 5,
                 window_start_a_ns: float = 0.0, window_start_b_ns: float | None = None):
        if window_ns <= 0:
            raise ValueError("window must be positive")
        if window_ns * 1000 > schedule.spacing_ps:
            raise ValueError("coincidence window exceeds the pulse spacing")
        self.schedule = schedule
        self.window_ns = window_ns
        self.max_k = max_k
        self.start_a = window_start_a_ns
        self.start_b = window_start_a_ns if window_start_b_ns is None else window_start_b_ns
        n = schedule.pulses_per_sequence
        self.raw = np.zeros(2 * max_k + 1, dtype=np.int64)
        self.singles_a = np.zeros(n, dtype=np.int64)
        self.singles_b = np.zeros(n, dtype=np.int64)
        self._carry_a = np.empty(0, dtype=np.int64)
        self._carry_b = np.empty(0, dtype=np.int64)

    def feed(self, pa: np.ndarray, pb: np.ndarray, complete_seq: int) -> None:
        """Add windowed pulse indices; sequences below ``complete_seq`` are final on both arms."""
        pa = np.concatenate([self._carry_a, pa])
        pb = np.concatenate([self._carry_b, pb])
        edge = complete_seq * self.schedule.pulses_per_sequence
        ia = int(np.searchsorted(pa, edge))
        ib = int(np.searchsorted(pb, edge))
        self.add_pulses(pa[:ia], pb[:ib])
        self._carry_a, self._carry_b = pa[ia:], pb[ib:]

    def flush(self) -> None:
        self.add_pulses(self._carry_a, self._carry_b)
        self._carry_a = self._carry_a[:0]
        self._carry_b = self._carry_b[:0]

    def add_pulses(self, pa: np.ndarray, pb: np.ndarray) -> None:
        _coincidences(pa, pb, self.schedule.pulses_per_sequence, self.max_k, self.raw,
                      self.singles_a, self.singles_b)

    def add(self, rec_a: np.ndarray, ch_a: int, rec_b: np.ndarray, ch_b: int) -> None:
        if rec_a is rec_b and ch_a != ch_b:
            pa, pb = windowed_pulse_indices_pair(rec_a, (ch_a, ch_b), self.schedule,
                                                 (self.start_a, self.start_b), self.window_ns)
        else:
            pa = windowed_pulse_indices(rec_a, ch_a, self.schedule, self.start_a, self.window_ns)
            pb = windowed_pulse_indices(rec_b, ch_b, self.schedule, self.start_b, self.window_ns)
        self.add_pulses(pa, pb)

    def result(self) -> G2Result:
        self.flush()
        n = self.schedule.pulses_per_sequence
        nseq = max(self.schedule.n_repetitions, 1)
        K = self.max_k
        ks = np.arange(-K, K + 1)
        SA = self.singles_a.astype(float)
        SB = self.singles_b.astype(float)
        exp = np.zeros(ks.size)
        var_exp = np.zeros(ks.size)
        for m, k in enumerate(ks):
            i = np.arange(max(0, -k), min(n, n - k))
            if i.size == 0:
                continue
            a, b = SA[i], SB[i + k]
            exp[m] = (a * b).sum() / nseq
            var_exp[m] = (b * b * a + a * a * b).sum() / nseq ** 2
        raw = self.raw.astype(float)
        with np.errstate(divide="ignore", invalid="ignore"):
            g2 = np.where(exp > 0, raw / exp, np.nan)
            err = np.where(exp > 0, np.sqrt(np.maximum(raw, 1) / exp ** 2 + raw ** 2 * var_exp / exp ** 4),
                           np.nan)
        return G2Result(ks, ks * self.schedule.spacing_ps * 1e-3, g2, err, self.raw.copy(), exp,
                        int(self.singles_a.sum()), int(self.singles_b.sum()), nseq)


def g2_histogram(chA: TimeTagStream, chB: TimeTagStream, schedule: SequenceSchedule,
                 window_ns: float = 25.0, max_k: int = 5, window_start_ns: float = 0.0,
                 channel_a: int | None = None, channel_b: int | None = None) -> G2Result:
    """Normalised coincidence peaks ``g2(k)`` for ``k = -max_k .. max_k``."""
    ca = _only_channel(chA) if channel_a is None else channel_a
    cb = _only_channel(chB) if channel_b is None else channel_b
    if ca == cb:
        raise ValueError("both arms are the same channel; same-channel autocorrelation is unsupported")
    acc = G2Accumulator(schedule, window_ns, max_k, window_start_ns)
    acc.add(chA.records, ca, chB.records, cb)
    if acc.singles_a.sum() == 0 or acc.singles_b.sum() == 0:
        raise ValueError("a channel has no tags inside the coincidence windows")
    return acc.result()


def _only_channel(s: TimeTagStream) -> int:
    chans = np.unique(s.channels[s.channels != CH_SYNC])
    if chans.size == 0:
        raise ValueError("empty channel")
    if chans.size > 1:
        raise ValueError(f"stream holds channels {chans.tolist()}; pass the channel explicitly")
    return int(chans[0])
