"""Pulsed single-photon emitter with metastable shelving (blinking).

Each pi-pulse of a bright emitter yields a photon with a fixed probability.
The photon leaves at ``pulse + jitter + Exp(lifetime)``, where ``jitter`` is a
Gaussian of the excitation-pulse width truncated at +-3 sigma.  Between
pulses a two-state Markov chain moves bright -> dark with ``shelve_prob`` and
dark -> bright with ``1 / dark_mean_pulses``.  Every sequence starts bright
(optical re-initialisation).  Pulse order within a sequence: the current
state decides emission, then the state steps.

Two implementations share these semantics:

* :func:`simulate_emission_reference` walks every pulse with one
  :class:`~qfcsim.rng.RngHandle` per sequence.  Slow; used as a test oracle.
* :func:`emit_photons` jumps geometrically between candidate pulses inside
  fixed blocks of ``SEQ_BLOCK`` sequences, one substream per block, so its
  cost scales with the number of photons rather than pulses.  Downstream
  Bernoulli losses can be folded into the candidate probability, which is
  how hour-long HBT runs stay cheap.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numba as nb
import numpy as np
from scipy import integrate, special

from .rng import RngHandle, derive_seed, stream_next, stream_reset
from .schedule import SequenceSchedule, build_schedule
from .timetag import CH_VISIBLE, MARK_SIGNAL, RECORD_DTYPE, TimeTagStream, frozen

FWHM_TO_SIGMA = 1.0 / 2.355
JITTER_TRUNC = 3.0
SEQ_BLOCK = 4096
_BIG = 1 << 62


class EmitterState(enum.Enum):
    BRIGHT = "bright"
    DARK = "dark"


@dataclass(frozen=True)
class EmitterParams:
    """Emitter model.

    ``p_photon_per_pulse`` is the mean photon number per pi-pulse counted in
    the ``photon_window_ns`` window that opens at the pulse, the way a
    time-gated measurement reports it.  The per-pulse emission probability is
    that number divided by the window's captured fraction of the
    jitter-convolved decay.  With ``photon_window_ns=None`` it is used as the
    raw emission probability.
    """

    lifetime_ns: float = 12.9
    p_photon_per_pulse: float = 7.1e-4
    pulse_fwhm_ns: float = 2.0
    shelve_prob: float = 0.02
    dark_mean_pulses: float = 5.0
    photon_window_ns: float | None = 20.0

    def __post_init__(self):
        if not self.lifetime_ns > 0:
            raise ValueError("lifetime_ns must be > 0")
        for name in ("p_photon_per_pulse", "shelve_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.pulse_fwhm_ns < 0 or self.dark_mean_pulses < 0:
            raise ValueError("pulse_fwhm_ns and dark_mean_pulses must be >= 0")
        if self.photon_window_ns is not None and self.photon_window_ns <= 0:
            raise ValueError("photon_window_ns must be positive or None")
        if self.emission_probability > 1.0:
            raise ValueError("p_photon_per_pulse exceeds what the reference window can hold")

    @property
    def jitter_sigma_ns(self) -> float:
        return self.pulse_fwhm_ns * FWHM_TO_SIGMA

    @property
    def recover_prob(self) -> float:
        if self.dark_mean_pulses <= 1.0:
            return 1.0
        return 1.0 / self.dark_mean_pulses

    @property
    def bright_fraction(self) -> float:
        """Stationary bright probability ``1 / (1 + s * m)`` of the shelving chain."""
        if self.shelve_prob == 0:
            return 1.0
        return self.recover_prob / (self.recover_prob + self.shelve_prob)

    @property
    def emission_probability(self) -> float:
        if self.photon_window_ns is None:
            return self.p_photon_per_pulse
        f = capture_fraction(0.0, self.photon_window_ns, self.lifetime_ns, self.jitter_sigma_ns)
        return self.p_photon_per_pulse / f


@lru_cache(maxsize=256)
def capture_fraction(start_ns: float, width_ns: float, lifetime_ns: float, jitter_sigma_ns: float) -> float:
    """Probability that ``jitter + Exp(lifetime)`` lands in ``[start, start + width)``."""

    def exp_cdf(x):
        return -math.expm1(-x / lifetime_ns) if x > 0 else 0.0

    def inside(j):
        return exp_cdf(start_ns + width_ns - j) - exp_cdf(start_ns - j)

    if jitter_sigma_ns == 0:
        return inside(0.0)
    a = JITTER_TRUNC * jitter_sigma_ns
    norm = special.ndtr(JITTER_TRUNC) - special.ndtr(-JITTER_TRUNC)

    def integrand(j):
        return math.exp(-0.5 * (j / jitter_sigma_ns) ** 2) / (jitter_sigma_ns * math.sqrt(2 * math.pi)) * inside(j)

    val, _ = integrate.quad(integrand, -a, a, points=[start_ns, start_ns + width_ns], limit=200,
                            epsabs=1e-13, epsrel=1e-11)
    return val / norm


def delay_cdf(t_ns, lifetime_ns: float, jitter_sigma_ns: float):
    """CDF of the emission delay ``jitter + Exp(lifetime)`` (vectorised over ``t_ns``)."""
    t = np.atleast_1d(np.asarray(t_ns, dtype=float))
    if jitter_sigma_ns == 0:
        return np.where(t > 0, -np.expm1(-np.maximum(t, 0) / lifetime_ns), 0.0)
    return np.array([capture_fraction(-JITTER_TRUNC * jitter_sigma_ns - 1.0,
                                      x + JITTER_TRUNC * jitter_sigma_ns + 1.0,
                                      lifetime_ns, jitter_sigma_ns) for x in t])


def _jitter_ns(u, sigma_ns):
    u = np.asarray(u, dtype=float)
    if sigma_ns == 0:
        return np.zeros_like(u)
    lo = special.ndtr(-JITTER_TRUNC)
    hi = special.ndtr(JITTER_TRUNC)
    return sigma_ns * special.ndtri(lo + u * (hi - lo))


def _delay_ns(u, lifetime_ns):
    return -lifetime_ns * np.log1p(-np.asarray(u, dtype=float))


def sample_emission(pulse_t_ps: int, p: EmitterParams, rng: RngHandle) -> int | None:
    """Photon timestamp for one pulse on a bright emitter, or ``None``.

    Draw order: emission decision, decay delay, excitation jitter.
    """
    if rng.uniform() >= p.emission_probability:
        return None
    delay = _delay_ns(rng.uniform(), p.lifetime_ns)
    jitter = float(_jitter_ns(rng.uniform(), p.jitter_sigma_ns))
    return max(0, pulse_t_ps + int(round((delay + jitter) * 1000.0)))


def step_shelving(state: EmitterState, p: EmitterParams, rng: RngHandle) -> EmitterState:
    u = rng.uniform()
    if state is EmitterState.BRIGHT:
        return EmitterState.DARK if u < p.shelve_prob else EmitterState.BRIGHT
    return EmitterState.BRIGHT if u < p.recover_prob else EmitterState.DARK


def simulate_emission_reference(s: SequenceSchedule, p: EmitterParams, seed: int,
                                channel: int = CH_VISIBLE) -> TimeTagStream:
    """Pulse-by-pulse emission, one substream per sequence index."""
    key = derive_seed(seed, "emission-reference")
    pulses = build_schedule(s)
    times = []
    n = s.pulses_per_sequence
    for j in range(s.n_repetitions):
        rng = RngHandle(key, j)
        state = EmitterState.BRIGHT
        for k in range(n):
            if state is EmitterState.BRIGHT:
                t = sample_emission(int(pulses[j * n + k]), p, rng)
                if t is not None:
                    times.append(t)
            state = step_shelving(state, p, rng)
    rec = np.zeros(len(times), dtype=RECORD_DTYPE)
    rec["timestamp_ps"] = np.sort(np.array(times, dtype=np.uint64))
    rec["channel"] = channel
    rec["marker"] = MARK_SIGNAL
    return TimeTagStream(frozen(rec), s.spacing_ps)


@nb.njit(inline="always")
def _dwell(st, prob):
    # run length (>= 1 pulse) of a state left with per-pulse probability ``prob``
    if prob <= 0.0:
        return _BIG
    if prob >= 1.0:
        return 1
    g = np.log1p(-stream_next(st)) / np.log1p(-prob)
    if g >= _BIG:
        return _BIG
    return 1 + np.int64(g)


@nb.njit(cache=True, nogil=True)
def _emit_kernel(k0, blk_lo, blk_hi, n_seq, n_pulses, q, s_prob, r_prob, route_cum,
                 out_idx, out_route, out_u):
    st = np.zeros(7, dtype=np.uint64)
    cap = out_idx.shape[0]
    count = 0
    log_q = np.log1p(-q) if q < 1.0 else 0.0
    for b in range(blk_lo, blk_hi):
        seq0 = b * SEQ_BLOCK
        nseq_b = min(SEQ_BLOCK, n_seq - seq0)
        if nseq_b <= 0:
            break
        total = nseq_b * n_pulses
        stream_reset(st, k0, np.uint64(b))
        pos = -1
        cur_seq = -1
        bright = True
        seg_end = 0
        while True:
            if q >= 1.0:
                pos += 1
            else:
                g = np.log1p(-stream_next(st)) / log_q
                if pos + 1 + g >= total:
                    break
                pos += 1 + np.int64(g)
            if pos >= total:
                break
            seq = pos // n_pulses
            k = pos - seq * n_pulses
            if seq != cur_seq:
                cur_seq = seq
                bright = True
                seg_end = _dwell(st, s_prob)
            while k >= seg_end:
                bright = not bright
                seg_end += _dwell(st, s_prob if bright else r_prob)
            if bright:
                if count >= cap:
                    return -1
                out_idx[count] = (seq0 + seq) * n_pulses + k
                ur = stream_next(st)
                c = 0
                while c < route_cum.shape[0] - 1 and ur >= route_cum[c]:
                    c += 1
                out_route[count] = c
                out_u[count, 0] = stream_next(st)
                out_u[count, 1] = stream_next(st)
                count += 1
    return count


@dataclass
class EmittedPhotons:
    """Raw output of the sparse kernel, sorted by emission time."""

    pulse_index: np.ndarray
    route: np.ndarray
    times_ps: np.ndarray

    def __len__(self):
        return self.pulse_index.shape[0]


def _run_blocks(key, blk_lo, blk_hi, s, q, p, route_cum):
    n_seq_span = max(0, min(s.n_repetitions, blk_hi * SEQ_BLOCK) - blk_lo * SEQ_BLOCK)
    mean = q * n_seq_span * s.pulses_per_sequence
    cap = int(mean + 12 * math.sqrt(mean) + 1024)
    while True:
        idx = np.empty(cap, dtype=np.int64)
        route = np.empty(cap, dtype=np.uint8)
        u = np.empty((cap, 2), dtype=np.float64)
        n = _emit_kernel(np.uint64(key), blk_lo, blk_hi, s.n_repetitions, s.pulses_per_sequence,
                         q, p.shelve_prob, p.recover_prob, route_cum, idx, route, u)
        if n >= 0:
            return idx[:n], route[:n], u[:n]
        cap *= 2


def emit_photons(s: SequenceSchedule, p: EmitterParams, seed: int, keep=(1.0,),
                 seq_range: tuple[int, int] | None = None, threads: int = 1,
                 label: str = "emission") -> EmittedPhotons:
    """Photons that are emitted and survive the downstream losses in ``keep``.

    ``keep[c]`` is the probability that an emitted photon ends up on route
    ``c`` (e.g. the two arms of a beam splitter after all losses); the
    remainder is lost.  ``seq_range`` must start on a ``SEQ_BLOCK`` boundary;
    any block-aligned partition of the sequences reproduces the full run.
    """
    keep = np.asarray(keep, dtype=float)
    if np.any(keep < 0) or keep.sum() > 1.0 + 1e-12:
        raise ValueError("keep probabilities must be non-negative and sum to <= 1")
    lo, hi = (0, s.n_repetitions) if seq_range is None else seq_range
    if lo % SEQ_BLOCK:
        raise ValueError(f"seq_range must start on a multiple of {SEQ_BLOCK}")
    hi = min(hi, s.n_repetitions)
    q = p.emission_probability * float(keep.sum())
    empty = EmittedPhotons(np.empty(0, np.int64), np.empty(0, np.uint8), np.empty(0, np.int64))
    if hi <= lo or q <= 0:
        return empty
    route_cum = np.cumsum(keep) / keep.sum()
    key = derive_seed(seed, label)
    blk_lo, blk_hi = lo // SEQ_BLOCK, -(-hi // SEQ_BLOCK)
    if hi < s.n_repetitions and hi % SEQ_BLOCK:
        raise ValueError(f"seq_range must end on a multiple of {SEQ_BLOCK} or at the last sequence")
    nblk = blk_hi - blk_lo
    threads = max(1, min(threads, nblk))
    edges = [blk_lo + (nblk * i) // threads for i in range(threads + 1)]
    parts = [(edges[i], edges[i + 1]) for i in range(threads)]
    if threads == 1:
        results = [_run_blocks(key, blk_lo, blk_hi, s, q, p, route_cum)]
    else:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(lambda be: _run_blocks(key, be[0], be[1], s, q, p, route_cum), parts))
    idx = np.concatenate([r[0] for r in results])
    route = np.concatenate([r[1] for r in results])
    u = np.concatenate([r[2] for r in results])
    offs = _delay_ns(u[:, 0], p.lifetime_ns) + _jitter_ns(u[:, 1], p.jitter_sigma_ns)
    times = s.pulse_times(idx) + np.rint(offs * 1000.0).astype(np.int64)
    np.maximum(times, 0, out=times)
    order = np.argsort(times, kind="stable")
    return EmittedPhotons(idx[order], route[order], times[order])


def simulate_emission(s: SequenceSchedule, p: EmitterParams, seed: int, threads: int = 1,
                      channel: int = CH_VISIBLE) -> TimeTagStream:
    """Emitted photons of a whole run as a stream on ``channel`` (truth = signal)."""
    ph = emit_photons(s, p, seed, threads=threads)
    rec = np.zeros(len(ph), dtype=RECORD_DTYPE)
    rec["timestamp_ps"] = ph.times_ps.astype(np.uint64)
    rec["channel"] = channel
    rec["marker"] = MARK_SIGNAL
    return TimeTagStream(frozen(rec), s.spacing_ps)

