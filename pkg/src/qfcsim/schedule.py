"""Excitation pulse schedule: sequences of pi-pulses, re-init gaps, CR-check gaps.

Pulse ``k`` of sequence ``j`` fires at::

    start + j * (n * spacing + reinit_gap) + (j // per_cr) * cr_gap + k * spacing

i.e. a re-initialisation gap follows every sequence and a charge/resonance
check gap additionally follows every ``per_cr``-th sequence.  All arithmetic
is integer picoseconds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

U64_MAX = (1 << 64) - 1
# simulator arithmetic runs in signed 64-bit picoseconds
I64_MAX = (1 << 63) - 1


def ns_to_ps(x: float) -> int:
    return int(round(x * 1000.0))


@dataclass(frozen=True)
class SequenceSchedule:
    pulses_per_sequence: int = 15
    pulse_spacing_ns: float = 200.0
    reinit_gap_ns: float = 5000.0
    sequences_per_cr_block: int = 250
    cr_gap_ns: float = 100_000.0
    n_repetitions: int = 1
    start_ns: float = 0.0

    def __post_init__(self):
        if self.pulses_per_sequence < 1 or self.sequences_per_cr_block < 1:
            raise ValueError("pulses_per_sequence and sequences_per_cr_block must be >= 1")
        if self.n_repetitions < 0:
            raise ValueError("n_repetitions must be >= 0")
        if self.spacing_ps <= 0:
            raise ValueError("pulse_spacing_ns must be positive")
        if self.reinit_gap_ns < 0 or self.cr_gap_ns < 0 or self.start_ns < 0:
            raise ValueError("gaps and start time must be non-negative")

    @property
    def spacing_ps(self) -> int:
        return ns_to_ps(self.pulse_spacing_ns)

    @property
    def start_ps(self) -> int:
        return ns_to_ps(self.start_ns)

    @property
    def sequence_period_ps(self) -> int:
        return self.pulses_per_sequence * self.spacing_ps + ns_to_ps(self.reinit_gap_ns)

    @property
    def cr_gap_ps(self) -> int:
        return ns_to_ps(self.cr_gap_ns)

    @property
    def block_period_ps(self) -> int:
        return self.sequences_per_cr_block * self.sequence_period_ps + self.cr_gap_ps

    @property
    def n_pulses(self) -> int:
        return self.n_repetitions * self.pulses_per_sequence

    def sequence_start_ps(self, j: int) -> int:
        return (self.start_ps + j * self.sequence_period_ps
                + (j // self.sequences_per_cr_block) * self.cr_gap_ps)

    @property
    def end_ps(self) -> int:
        """End of the run: after the last sequence's trailing gaps."""
        n = self.n_repetitions
        return self.start_ps + n * self.sequence_period_ps + (n // self.sequences_per_cr_block) * self.cr_gap_ps

    def as_ints(self) -> np.ndarray:
        """Packed integer form consumed by the numba kernels."""
        if self.end_ps > I64_MAX:
            raise OverflowError("schedule exceeds the signed 64-bit picosecond range")
        return np.array([self.start_ps, self.spacing_ps, self.pulses_per_sequence,
                         self.sequence_period_ps, self.sequences_per_cr_block,
                         self.block_period_ps, self.n_repetitions], dtype=np.int64)

    def pulse_times(self, pulse_index) -> np.ndarray:
        """Timestamps (ps, int64) of global pulse indices."""
        idx = np.asarray(pulse_index, dtype=np.int64)
        j, k = np.divmod(idx, self.pulses_per_sequence)
        return (self.start_ps + j * self.sequence_period_ps
                + (j // self.sequences_per_cr_block) * self.cr_gap_ps + k * self.spacing_ps)


def build_schedule(s: SequenceSchedule) -> np.ndarray:
    """All pulse timestamps (ps) in order, as uint64."""
    if s.n_repetitions and s.end_ps > U64_MAX:
        raise OverflowError("schedule exceeds the u64 picosecond range")
    if s.end_ps > I64_MAX:
        # enumerate with Python ints to stay exact past 2**63
        return np.array([s.sequence_start_ps(j) + k * s.spacing_ps
                         for j in range(s.n_repetitions)
                         for k in range(s.pulses_per_sequence)], dtype=np.uint64)
    return s.pulse_times(np.arange(s.n_pulses, dtype=np.int64)).astype(np.uint64)


# indices into SequenceSchedule.as_ints()
S_START, S_SPACING, S_N, S_SEQP, S_PERCR, S_BLOCKP, S_NSEQ = range(7)


@nb.njit(inline="always")
def locate(t, sc):
    """Nearest pulse at or before ``t``: returns ``(global index, offset ps)``.

    Index -1 means ``t`` precedes the first pulse.  Times after the last
    pulse fold onto it with an arbitrarily large offset.
    """
    start = sc[0]
    if t < start or sc[6] == 0:
        return -1, 0
    spacing = sc[1]
    n = sc[2]
    seqp = sc[3]
    percr = sc[4]
    blockp = sc[5]
    tau = t - start
    blk = tau // blockp
    r = tau - blk * blockp
    jin = r // seqp
    if jin >= percr:
        jin = percr - 1
    r -= jin * seqp
    k = r // spacing
    if k >= n:
        k = n - 1
    r -= k * spacing
    j = blk * percr + jin
    if j >= sc[6]:
        j = sc[6] - 1
        k = n - 1
        last = j * seqp + (j // percr) * (blockp - percr * seqp) + k * spacing
        r = tau - last
    return j * n + k, r
