"""Sync-locked histogramming of time tags."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numba as nb
import numpy as np

from ..schedule import SequenceSchedule, locate
from ..timetag import CH_SYNC, TimeTagStream


@dataclass(frozen=True, eq=False)
class Histogram:
    bin_width_ps: int
    bins: np.ndarray
    t0_ps: int
    n_excitations: int
    channel: int  # -1: all non-sync channels
    underflow: int = 0
    overflow: int = 0

    def __post_init__(self):
        if self.bin_width_ps <= 0:
            raise ValueError("bin width must be positive")
        if self.n_excitations < 1:
            raise ValueError("n_excitations must be >= 1")
        if np.any(self.bins < 0):
            raise ValueError("counts must be non-negative")

    @property
    def n_bins(self) -> int:
        return self.bins.shape[0]

    @property
    def bin_starts_ps(self) -> np.ndarray:
        return self.t0_ps + self.bin_width_ps * np.arange(self.n_bins, dtype=np.int64)

    @property
    def centers_ns(self) -> np.ndarray:
        return (self.bin_starts_ps + 0.5 * self.bin_width_ps) * 1e-3

    @property
    def stop_ps(self) -> int:
        return self.t0_ps + self.bin_width_ps * self.n_bins

    @property
    def total(self) -> int:
        return int(self.bins.sum()) + self.underflow + self.overflow

    def counts_between(self, start_ps: int, stop_ps: int) -> int:
        """Counts in ``[start, stop)``; both edges must fall on bin edges inside the histogram."""
        if start_ps < self.t0_ps or stop_ps > self.stop_ps or stop_ps < start_ps:
            raise ValueError(f"window [{start_ps}, {stop_ps}) ps outside histogram span "
                             f"[{self.t0_ps}, {self.stop_ps}) ps")
        i0, r0 = divmod(start_ps - self.t0_ps, self.bin_width_ps)
        i1, r1 = divmod(stop_ps - self.t0_ps, self.bin_width_ps)
        if r0 or r1:
            raise ValueError("window edges must fall on bin edges")
        return int(self.bins[i0:i1].sum())

    def rebin(self, factor: int) -> "Histogram":
        """Merge ``factor`` adjacent bins; a trailing partial group goes to overflow."""
        if factor < 1:
            raise ValueError("rebin factor must be >= 1")
        n = self.n_bins // factor
        head = self.bins[:n * factor].reshape(n, factor).sum(axis=1)
        return Histogram(self.bin_width_ps * factor, head, self.t0_ps, self.n_excitations, self.channel,
                         self.underflow, self.overflow + int(self.bins[n * factor:].sum()))

    def __add__(self, other: "Histogram") -> "Histogram":
        """Combine histograms of independent runs with identical binning."""
        if (self.bin_width_ps, self.t0_ps, self.n_bins, self.channel) != \
                (other.bin_width_ps, other.t0_ps, other.n_bins, other.channel):
            raise ValueError("histograms have different binning or channel")
        return Histogram(self.bin_width_ps, self.bins + other.bins, self.t0_ps,
                         self.n_excitations + other.n_excitations, self.channel,
                         self.underflow + other.underflow, self.overflow + other.overflow)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_start_ps", "count"])
            w.writerows(zip(self.bin_starts_ps.tolist(), self.bins.tolist()))


@nb.njit(cache=True, nogil=True)
def _fold(ts, chans, channel, sc, bw, counts):
    """Accumulate tags into ``counts``; returns (underflow, overflow, skipped)."""
    nb_ = counts.shape[0]
    spacing = sc[1]
    n = sc[2]
    span = nb_ * bw
    under = 0
    over = 0
    skipped = 0
    # cursor on the current pulse for sorted input: [cur_lo, cur_hi) folds onto it
    cur_lo = np.int64(1)
    cur_hi = np.int64(0)
    cur_k = np.int64(0)
    for i in range(ts.shape[0]):
        c = chans[i]
        if (channel >= 0 and c != channel) or c == CH_SYNC:
            skipped += 1
            continue
        t = np.int64(ts[i])
        if not (cur_lo <= t < cur_hi):
            if cur_hi <= t < cur_hi + spacing and cur_k + 1 < n and cur_hi == cur_lo + spacing:
                # next pulse of the same sequence
                cur_lo = cur_hi
                cur_k += 1
            else:
                idx, r = locate(t, sc)
                if idx < 0:
                    under += 1
                    continue
                cur_lo = t - r
                cur_k = idx % n
            cur_hi = cur_lo + (span if cur_k == n - 1 else spacing)
            if t >= cur_hi:
                over += 1
                continue
        r = t - cur_lo
        if r < span:
            counts[r // bw] += 1
        else:
            over += 1
    return under, over, skipped


class HistogramBuilder:
    """Incremental histogram over time-ordered chunks of one run.

    ``t0_ps`` is the pulse-relative left edge: a tag at ``t`` is folded onto
    the nearest pulse ``p`` with ``p + t0 <= t``.
    """

    def __init__(self, schedule: SequenceSchedule, bin_width_ps: int, t0_ps: int, stop_ps: int,
                 channel: int | None = None):
        span = stop_ps - t0_ps
        if bin_width_ps <= 0 or span <= 0:
            raise ValueError("need positive bin width and range")
        if span % bin_width_ps:
            raise ValueError("bin width must divide the histogram range")
        if span > schedule.spacing_ps and schedule.pulses_per_sequence > 1:
            raise ValueError("histogram range exceeds the pulse spacing")
        self.schedule = schedule
        self.bin_width_ps = int(bin_width_ps)
        self.t0_ps = int(t0_ps)
        self.channel = -1 if channel is None else int(channel)
        self._sc = schedule.as_ints()
        self._sc[0] += self.t0_ps
        self.counts = np.zeros(span // bin_width_ps, dtype=np.int64)
        self.underflow = 0
        self.overflow = 0
        self.n_tags = 0

    def add_records(self, records: np.ndarray) -> None:
        self.add(records["timestamp_ps"], records["channel"])

    def add(self, timestamps: np.ndarray, channels: np.ndarray) -> None:
        u, o, s = _fold(timestamps, channels, self.channel, self._sc, self.bin_width_ps, self.counts)
        self.underflow += u
        self.overflow += o
        self.n_tags += timestamps.shape[0] - s

    def result(self) -> Histogram:
        return Histogram(self.bin_width_ps, self.counts.copy(), self.t0_ps,
                         max(self.schedule.n_pulses, 1), self.channel,
                         self.underflow, self.overflow)


def build_histogram(stream: TimeTagStream, schedule: SequenceSchedule, bin_width_ps: int,
                    range_ps: tuple[int, int], channel: int | None = None) -> Histogram:
    """Fold every tag onto its nearest preceding pulse and bin the offset.

    ``range_ps = (t0, stop)`` is pulse-relative.  Tags before the first
    pulse (plus ``t0``) land in ``underflow``; tags past ``stop`` (including
    those in re-initialisation gaps) land in ``overflow``, so
    ``total == number of tags`` on the selected channel.  Sync records are
    never counted.
    """
    hb = HistogramBuilder(schedule, bin_width_ps, range_ps[0], range_ps[1], channel)
    hb.add_records(stream.records)
    return hb.result()


def arrival_offset_ns(h: Histogram) -> float:
    """Pulse-relative photon arrival time: half-maximum crossing of the rising edge.

    Uses a 3-bin running mean to suppress shot noise; returns NaN for an
    empty histogram.
    """
    if h.bins.sum() == 0:
        return float("nan")
    y = np.convolve(h.bins.astype(float), np.ones(3) / 3.0, mode="same")
    base = np.median(y)
    peak = int(np.argmax(y))
    half = base + 0.5 * (y[peak] - base)
    below = np.flatnonzero(y[:peak + 1] < half)
    if below.size == 0:
        return float(h.bin_starts_ps[0] * 1e-3)
    i = below[-1]
    frac = (half - y[i]) / (y[i + 1] - y[i])
    return float((h.bin_starts_ps[i] + (0.5 + frac) * h.bin_width_ps) * 1e-3)
