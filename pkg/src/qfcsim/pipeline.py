"""Chunked end-to-end runs: emitter -> losses -> detector arms -> time tags.

Downstream Bernoulli losses (conversion, beam splitter, QE) are folded into
the emitter's candidate probability, which is distributionally identical to
thinning the emitted stream stage by stage.  Output is a time-ordered
sequence of record chunks that is independent of the chunk size and of the
number of threads.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .chain import DetectorParams, NoiseParams, dead_time_mask, detector_response
from .emitter import SEQ_BLOCK, EmitterParams, emit_photons
from .schedule import SequenceSchedule
from .timetag import MARK_SIGNAL, RECORD_DTYPE, TimeTagStream, TimeTagWriter, frozen, merge_records

DEFAULT_CHUNK_SEQUENCES = 256 * SEQ_BLOCK


@dataclass(frozen=True)
class Arm:
    """One detector fed by the emitter.

    ``keep`` is the probability that an emitted photon reaches this detector
    and clicks (all losses, beam-splitter share and QE).
    """

    channel: int
    keep: float
    det: DetectorParams
    noise: NoiseParams
    delay_ps: int = 0
    pump_W: float = 0.0
    noise_share: float = 1.0


def iter_detected(s: SequenceSchedule, p: EmitterParams, seed: int, arms: Sequence[Arm],
                  threads: int = 1, chunk_sequences: int = DEFAULT_CHUNK_SEQUENCES) -> Iterator[np.ndarray]:
    """Yield time-ordered detected-record chunks of a whole run."""
    if chunk_sequences % SEQ_BLOCK or chunk_sequences <= 0:
        raise ValueError(f"chunk_sequences must be a positive multiple of {SEQ_BLOCK}")
    if len({a.channel for a in arms}) != len(arms):
        raise ValueError("arms must use distinct channels")
    keep = [a.keep for a in arms]
    nseq = s.n_repetitions
    spill = np.empty(0, dtype=RECORD_DTYPE)
    dead_state: dict = {}
    t_lo = 0
    lo = 0
    while True:
        hi = min(lo + chunk_sequences, nseq)
        last = hi >= nseq
        t_hi = s.end_ps if last else s.sequence_start_ps(hi)
        ph = emit_photons(s, p, seed, keep, (lo, hi), threads)
        out = spill
        for r, arm in enumerate(arms):
            t = ph.times_ps[ph.route == r] + arm.delay_ps
            rec = detector_response(t, np.full(t.shape[0], MARK_SIGNAL, np.uint8), arm.channel, arm.det,
                                    arm.noise, t_lo, t_hi, seed, arm.pump_W, arm.noise_share, apply_qe=False)
            out = merge_records(out, rec)
        if not last:
            cut = int(np.searchsorted(out["timestamp_ps"], np.uint64(t_hi)))
            out, spill = out[:cut], out[cut:]
        if any(a.det.dead_time_ns > 0 for a in arms):
            out = _dead_time_per_arm(out, arms, dead_state)
        yield out
        if last:
            return
        lo, t_lo = hi, t_hi


def _dead_time_per_arm(rec: np.ndarray, arms: Sequence[Arm], state: dict) -> np.ndarray:
    keep = np.ones(rec.shape[0], dtype=bool)
    ts = rec["timestamp_ps"].astype(np.int64)
    for a in arms:
        if a.det.dead_time_ns <= 0:
            continue
        sel = np.flatnonzero(rec["channel"] == a.channel)
        m, state[a.channel] = dead_time_mask(ts[sel], round(a.det.dead_time_ns * 1000),
                                              state.get(a.channel, -(1 << 62)))
        keep[sel] = m
    return rec[keep]


def run_stream(s: SequenceSchedule, p: EmitterParams, seed: int, arms: Sequence[Arm],
               threads: int = 1, chunk_sequences: int = DEFAULT_CHUNK_SEQUENCES) -> TimeTagStream:
    """Whole run in memory."""
    parts = list(iter_detected(s, p, seed, arms, threads, chunk_sequences))
    rec = np.concatenate(parts) if parts else np.empty(0, dtype=RECORD_DTYPE)
    return TimeTagStream(frozen(rec), s.spacing_ps)


def write_run(path: str | os.PathLike, chunks: Iterator[np.ndarray], sync_period_ps: int,
              channel_map: dict | None = None) -> int:
    """Stream chunks into a QTAG file atomically; no partial file survives an error."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            w = TimeTagWriter(fh, sync_period_ps, channel_map=channel_map)
            for c in chunks:
                w.append(c)
            n = w.close()
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return n


def visible_arm(det: DetectorParams, noise: NoiseParams, channel: int, share: float = 1.0) -> Arm:
    return Arm(channel, det.qe * share, det, noise, round(det.path_delay_ns * 1000))


def telecom_arm(det: DetectorParams, noise: NoiseParams, channel: int, eta: float, pump_W: float,
                share: float = 1.0) -> Arm:
    return Arm(channel, eta * det.qe * share, det, noise, round(det.path_delay_ns * 1000), pump_W, share)


def with_repetitions(s: SequenceSchedule, n: int) -> SequenceSchedule:
    return replace(s, n_repetitions=n)
