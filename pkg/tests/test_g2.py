import numpy as np
import pytest

from qfcsim.analysis.g2 import G2Accumulator, g2_histogram
from qfcsim.schedule import SequenceSchedule, build_schedule
from qfcsim.timetag import TimeTagStream, frozen, make_records

from oracles import S, brute_force, tags


@pytest.mark.parametrize("seed,start_ns,window_ns", [(0, 0.0, 25.0), (1, -2.5, 25.0), (2, 10.0, 60.0)])
def test_raw_equals_brute_force(seed, start_ns, window_ns):
    rng = np.random.default_rng(seed)
    a, b = tags(rng, 10_000, 1), tags(rng, 10_000, 2)
    r = g2_histogram(a, b, S, window_ns, 5, start_ns)
    want = brute_force(a, b, S, round(start_ns * 1000), round(window_ns * 1000), 5)
    np.testing.assert_array_equal(r.raw_coincidences, want)
    assert r.raw_coincidences.sum() > 1000


def test_independent_poisson_streams_give_one():
    rng = np.random.default_rng(7)
    s = SequenceSchedule(15, 200, 5000, 250, 100_000, 20_000)
    pulses = build_schedule(s).astype(np.int64)

    def arm(ch):
        hit = pulses[rng.random(pulses.size) < 0.05]
        ts = hit + rng.integers(0, 20_000, hit.size)
        return TimeTagStream(frozen(make_records(np.sort(ts).astype(np.uint64), ch)), s.spacing_ps)

    r = g2_histogram(arm(1), arm(2), s)
    pulls = (r.g2_values - 1) / r.g2_errors
    assert np.all(np.abs(pulls) < 4)
    assert abs(pulls.mean()) < 4 / np.sqrt(pulls.size)


def test_accidentals_respect_sequence_structure():
    # every pulse of every sequence has exactly one tag on each arm
    s = SequenceSchedule(15, 200, 5000, 250, 0, 100)
    p = build_schedule(s)
    a = TimeTagStream(make_records(p + np.uint64(1000), 1), s.spacing_ps)
    b = TimeTagStream(make_records(p + np.uint64(2000), 2), s.spacing_ps)
    r = g2_histogram(a, b, s)
    np.testing.assert_allclose(r.accidental_normalization, [(15 - abs(k)) * 100 for k in range(-5, 6)])
    np.testing.assert_array_equal(r.raw_coincidences, r.accidental_normalization)
    np.testing.assert_allclose(r.g2_values, 1.0)
    assert r.at(0)[0] == pytest.approx(1.0)


def test_chunked_accumulation_matches_whole():
    rng = np.random.default_rng(3)
    a, b = tags(rng, 8000, 1), tags(rng, 8000, 2)
    whole = g2_histogram(a, b, S)
    acc = G2Accumulator(S, 25.0, 5)
    # chunk edges on sequence boundaries
    edges = [S.sequence_start_ps(j) for j in (0, 17, 33, 60)] + [S.end_ps + 1]
    for lo, hi in zip(edges, edges[1:]):
        ra = a.records[(a.timestamps >= lo) & (a.timestamps < hi)]
        rb = b.records[(b.timestamps >= lo) & (b.timestamps < hi)]
        acc.add(ra, 1, rb, 2)
    part = acc.result()
    np.testing.assert_array_equal(part.raw_coincidences, whole.raw_coincidences)
    np.testing.assert_allclose(part.g2_values, whole.g2_values)


def test_errors():
    rng = np.random.default_rng(0)
    a = tags(rng, 100, 1)
    with pytest.raises(ValueError):
        g2_histogram(a, a, S)
    empty = TimeTagStream(make_records([]), S.spacing_ps)
    with pytest.raises(ValueError):
        g2_histogram(a, empty, S)
    with pytest.raises(ValueError):
        g2_histogram(a, tags(rng, 100, 2), S, window_ns=250.0)


def test_values_non_negative_and_csv(tmp_path):
    rng = np.random.default_rng(5)
    r = g2_histogram(tags(rng, 3000, 1), tags(rng, 3000, 2), S)
    assert np.all(r.g2_values >= 0) and np.all(r.g2_errors > 0)
    r.write_csv(tmp_path / "g2.csv")
    lines = (tmp_path / "g2.csv").read_text().splitlines()
    assert lines[0] == "k,delay_ns,g2,g2_err,raw,accidentals" and len(lines) == 12
    assert r.to_dict()["delay_ns"][6] == 200.0


def test_feed_with_arbitrary_chunks_matches_whole():
    from qfcsim.analysis.g2 import sequence_index, windowed_pulse_indices
    rng = np.random.default_rng(11)
    a, b = tags(rng, 8000, 1), tags(rng, 8000, 2)
    whole = g2_histogram(a, b, S)
    merged = np.concatenate([a.records, b.records])
    merged = merged[np.argsort(merged["timestamp_ps"], kind="stable")]
    acc = G2Accumulator(S, 25.0, 5)
    for part in np.array_split(merged, 37):
        pa = windowed_pulse_indices(part, 1, S, 0.0, 25.0)
        pb = windowed_pulse_indices(part, 2, S, 0.0, 25.0)
        acc.feed(pa, pb, sequence_index(S, int(part["timestamp_ps"][-1])))
    r = acc.result()
    np.testing.assert_array_equal(r.raw_coincidences, whole.raw_coincidences)
    assert (r.singles_a, r.singles_b) == (whole.singles_a, whole.singles_b)


def test_single_pass_pair_matches_separate_passes():
    from qfcsim.analysis.g2 import windowed_pulse_indices, windowed_pulse_indices_pair
    rng = np.random.default_rng(12)
    a, b = tags(rng, 6000, 1), tags(rng, 6000, 2)
    merged = np.concatenate([a.records, b.records])
    merged = merged[np.argsort(merged["timestamp_ps"], kind="stable")]
    pa, pb = windowed_pulse_indices_pair(merged, (1, 2), S, (-2.5, 7.0), 25.0)
    np.testing.assert_array_equal(pa, windowed_pulse_indices(merged, 1, S, -2.5, 25.0))
    np.testing.assert_array_equal(pb, windowed_pulse_indices(merged, 2, S, 7.0, 25.0))
    acc = G2Accumulator(S, 25.0, 5, -2.5, 7.0)
    acc.add(merged, 1, merged, 2)
    want = brute_force(a, b, S, -2500, 25_000, 5)
    # brute force uses one window start; compare against the pair with equal starts
    acc2 = G2Accumulator(S, 25.0, 5, -2.5)
    acc2.add(merged, 1, merged, 2)
    np.testing.assert_array_equal(acc2.result().raw_coincidences, want)
    assert acc.result().raw_coincidences.sum() > 0
