"""Time-tag event model and the QTAG binary/CSV formats.

Binary layout (little-endian)::

    header  "QTAG" | u16 version=1 | u16 header_len | u64 sync_period_ps
            | u64 origin_ps | u32 record_count (0xFFFFFFFF = streamed)
            [ channel-map extension, see below ]
    record  u64 timestamp_ps | u8 channel | u8 marker | u16 reserved

The fixed header is 28 bytes.  Any bytes up to ``header_len`` form an
optional channel-map extension: u16 entry count, then per entry u8 channel,
u8 name length, UTF-8 name.  Readers skip unknown trailing header bytes.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, Mapping

import numpy as np

MAGIC = b"QTAG"
VERSION = 1
STREAMED = 0xFFFFFFFF
FIXED_HEADER = struct.Struct("<4sHHQQI")
FIXED_HEADER_LEN = FIXED_HEADER.size  # 28

RECORD_DTYPE = np.dtype(
    [("timestamp_ps", "<u8"), ("channel", "u1"), ("marker", "u1"), ("reserved", "<u2")]
)
assert RECORD_DTYPE.itemsize == 12

CH_VISIBLE = 0
CH_TELECOM_A = 1
CH_TELECOM_B = 2
CH_VISIBLE_B = 3
CH_SYNC = 255

MARK_SIGNAL = 0x01
MARK_NOISE = 0x02
MARK_DARK = 0x04

DEFAULT_CHANNEL_MAP = {
    CH_VISIBLE: "visible",
    CH_TELECOM_A: "telecom_a",
    CH_TELECOM_B: "telecom_b",
    CH_VISIBLE_B: "visible_b",
    CH_SYNC: "sync",
}


class TimeTagFormatError(ValueError):
    """Base class for malformed QTAG data."""


class BadMagicError(TimeTagFormatError):
    pass


class UnsupportedVersionError(TimeTagFormatError):
    pass


class TruncatedRecordError(TimeTagFormatError):
    def __init__(self, offset: int, message: str | None = None):
        self.offset = offset
        super().__init__(message or f"truncated record at byte offset {offset}")


class OrderingError(TimeTagFormatError):
    def __init__(self, index: int, message: str | None = None):
        self.index = index
        super().__init__(message or f"timestamps decrease at record {index}")


class HeaderMismatchError(ValueError):
    pass


def frozen(records: np.ndarray) -> np.ndarray:
    """Mark an array the caller owns as read-only so a stream can adopt it without copying."""
    records.flags.writeable = False
    return records


def empty_records(n: int = 0) -> np.ndarray:
    return np.zeros(n, dtype=RECORD_DTYPE)


def make_records(timestamps, channel=0, marker=0) -> np.ndarray:
    ts = np.asarray(timestamps, dtype=np.uint64)
    rec = np.zeros(ts.shape[0], dtype=RECORD_DTYPE)
    rec["timestamp_ps"] = ts
    rec["channel"] = channel
    rec["marker"] = marker
    return rec


def first_disorder(timestamps: np.ndarray) -> int:
    """Index of the first record earlier than its predecessor, or -1."""
    if timestamps.shape[0] < 2:
        return -1
    bad = np.flatnonzero(timestamps[1:] < timestamps[:-1])
    return int(bad[0]) + 1 if bad.size else -1


@dataclass(frozen=True, eq=False)
class TimeTagStream:
    """Immutable, time-ordered sequence of tags plus header metadata."""

    records: np.ndarray
    sync_period_ps: int
    origin_ps: int = 0
    channel_map: Mapping[int, str] = field(default_factory=lambda: dict(DEFAULT_CHANNEL_MAP))

    def __post_init__(self):
        if self.sync_period_ps <= 0:
            raise ValueError("sync_period_ps must be positive")
        rec = np.asarray(self.records)
        if rec.dtype != RECORD_DTYPE:
            rec = rec.astype(RECORD_DTYPE)
        rec = np.ascontiguousarray(rec)
        bad = first_disorder(rec["timestamp_ps"])
        if bad >= 0:
            raise OrderingError(bad)
        if rec.flags.writeable:
            # callers that hand over ownership freeze the array first to skip this copy
            rec = rec.copy()
            rec.flags.writeable = False
        object.__setattr__(self, "records", rec)
        object.__setattr__(self, "channel_map", dict(self.channel_map))

    def __len__(self) -> int:
        return self.records.shape[0]

    @property
    def timestamps(self) -> np.ndarray:
        return self.records["timestamp_ps"]

    @property
    def channels(self) -> np.ndarray:
        return self.records["channel"]

    @property
    def markers(self) -> np.ndarray:
        return self.records["marker"]

    def same_header(self, other: "TimeTagStream") -> bool:
        return self.sync_period_ps == other.sync_period_ps and self.origin_ps == other.origin_ps

    def with_records(self, records: np.ndarray) -> "TimeTagStream":
        return TimeTagStream(records, self.sync_period_ps, self.origin_ps, self.channel_map)

    def select_channel(self, channel: int) -> "TimeTagStream":
        return self.with_records(frozen(self.records[self.records["channel"] == channel]))

    def without_markers(self) -> "TimeTagStream":
        rec = self.records.copy()
        rec["marker"] = 0
        return self.with_records(rec)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TimeTagStream):
            return NotImplemented
        return (
            self.same_header(other)
            and self.records.shape == other.records.shape
            and self.records.tobytes() == other.records.tobytes()
        )

    def __repr__(self) -> str:
        return (f"TimeTagStream({len(self)} records, sync_period_ps={self.sync_period_ps}, "
                f"origin_ps={self.origin_ps})")


def _channel_map_bytes(channel_map: Mapping[int, str]) -> bytes:
    out = bytearray(struct.pack("<H", len(channel_map)))
    for ch, name in sorted(channel_map.items()):
        raw = name.encode()[:255]
        out += struct.pack("<BB", ch, len(raw)) + raw
    return bytes(out)


def _parse_channel_map(blob: bytes) -> dict[int, str]:
    if len(blob) < 2:
        return {}
    (n,) = struct.unpack_from("<H", blob, 0)
    pos = 2
    out = {}
    for _ in range(n):
        if pos + 2 > len(blob):
            break
        ch, ln = struct.unpack_from("<BB", blob, pos)
        pos += 2
        out[ch] = blob[pos:pos + ln].decode(errors="replace")
        pos += ln
    return out


def encode_header(sync_period_ps: int, origin_ps: int, record_count: int | None,
                  channel_map: Mapping[int, str] | None = None) -> bytes:
    ext = _channel_map_bytes(channel_map) if channel_map else b""
    count = STREAMED if record_count is None or record_count >= STREAMED else record_count
    return FIXED_HEADER.pack(MAGIC, VERSION, FIXED_HEADER_LEN + len(ext),
                             sync_period_ps, origin_ps, count) + ext


@dataclass
class QtagHeader:
    version: int
    header_len: int
    sync_period_ps: int
    origin_ps: int
    record_count: int | None
    channel_map: dict[int, str]


def read_header(source: BinaryIO) -> QtagHeader:
    raw = source.read(FIXED_HEADER_LEN)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < FIXED_HEADER_LEN:
        raise TruncatedRecordError(len(raw), f"truncated header at byte offset {len(raw)}")
    magic, version, header_len, sync, origin, count = FIXED_HEADER.unpack(raw)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported QTAG version {version}")
    if header_len < FIXED_HEADER_LEN:
        raise TimeTagFormatError(f"header_len {header_len} shorter than fixed header")
    ext = source.read(header_len - FIXED_HEADER_LEN)
    if len(ext) < header_len - FIXED_HEADER_LEN:
        raise TruncatedRecordError(FIXED_HEADER_LEN + len(ext), "truncated header extension")
    return QtagHeader(version, header_len, sync, origin,
                      None if count == STREAMED else count, _parse_channel_map(ext))


def write_timetags(stream: TimeTagStream, sink: BinaryIO, chunk_records: int = 1 << 22) -> int:
    """Serialise ``stream`` to a binary sink; returns the number of records."""
    if first_disorder(stream.timestamps) >= 0:
        raise OrderingError(first_disorder(stream.timestamps))
    n = len(stream)
    sink.write(encode_header(stream.sync_period_ps, stream.origin_ps, n, stream.channel_map))
    rec = stream.records
    for lo in range(0, n, chunk_records):
        sink.write(rec[lo:lo + chunk_records].tobytes())
    return n


class TimeTagWriter:
    """Incremental QTAG writer for streams too large to hold in memory.

    Appended chunks must continue the time order.  On a seekable sink the
    record count is patched on close, otherwise the header says "streamed".
    """

    def __init__(self, sink: BinaryIO, sync_period_ps: int, origin_ps: int = 0,
                 channel_map: Mapping[int, str] | None = None):
        if sync_period_ps <= 0:
            raise ValueError("sync_period_ps must be positive")
        self.sink = sink
        self.count = 0
        self._last = None
        self._header_pos = sink.tell() if sink.seekable() else None
        sink.write(encode_header(sync_period_ps, origin_ps, None,
                                 channel_map if channel_map is not None else DEFAULT_CHANNEL_MAP))

    def append(self, records: np.ndarray) -> None:
        ts = records["timestamp_ps"]
        if ts.shape[0] == 0:
            return
        bad = first_disorder(ts)
        if bad >= 0:
            raise OrderingError(self.count + bad)
        if self._last is not None and ts[0] < self._last:
            raise OrderingError(self.count)
        self.sink.write(np.ascontiguousarray(records, dtype=RECORD_DTYPE).tobytes())
        self.count += ts.shape[0]
        self._last = ts[-1]

    def close(self) -> int:
        if self._header_pos is not None and self.count < STREAMED:
            end = self.sink.tell()
            self.sink.seek(self._header_pos + FIXED_HEADER_LEN - 4)
            self.sink.write(struct.pack("<I", self.count))
            self.sink.seek(end)
        return self.count

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def iter_timetag_chunks(source: BinaryIO, chunk_records: int = 1 << 22,
                        header: QtagHeader | None = None) -> Iterator[np.ndarray]:
    """Yield validated record chunks after the header has been consumed."""
    if header is None:
        header = read_header(source)
    offset = header.header_len
    remaining = header.record_count
    last = None
    index = 0
    while remaining is None or remaining > 0:
        want = chunk_records if remaining is None else min(chunk_records, remaining)
        raw = source.read(want * RECORD_DTYPE.itemsize)
        nfull, tail = divmod(len(raw), RECORD_DTYPE.itemsize)
        if tail or (remaining is not None and nfull < want):
            raise TruncatedRecordError(offset + nfull * RECORD_DTYPE.itemsize)
        if nfull == 0:
            break
        rec = np.frombuffer(raw, dtype=RECORD_DTYPE)
        ts = rec["timestamp_ps"]
        bad = first_disorder(ts)
        if bad >= 0:
            raise OrderingError(index + bad)
        if last is not None and ts[0] < last:
            raise OrderingError(index)
        last = ts[-1]
        yield rec
        index += nfull
        offset += len(raw)
        if remaining is not None:
            remaining -= nfull
    if header.record_count is not None and source.read(1):
        raise TimeTagFormatError(f"trailing bytes after {header.record_count} records")


def read_timetags(source: BinaryIO | bytes) -> TimeTagStream:
    """Parse a QTAG byte source into a validated stream."""
    if isinstance(source, (bytes, bytearray, memoryview)):
        source = io.BytesIO(source)
    header = read_header(source)
    chunks = list(iter_timetag_chunks(source, header=header))
    rec = frozen(np.concatenate(chunks)) if chunks else empty_records()
    return TimeTagStream(rec, header.sync_period_ps, header.origin_ps,
                         header.channel_map or DEFAULT_CHANNEL_MAP)


def save_timetags(stream: TimeTagStream, path: str | os.PathLike) -> int:
    with open(path, "wb") as fh:
        return write_timetags(stream, fh)


def load_timetags(path: str | os.PathLike) -> TimeTagStream:
    with open(path, "rb") as fh:
        return read_timetags(fh)


def write_csv(stream: TimeTagStream, sink) -> int:
    """CSV twin: ``timestamp_ps,channel,marker`` with a header row."""
    sink.write("timestamp_ps,channel,marker\n")
    rec = stream.records
    for lo in range(0, len(rec), 1 << 20):
        part = rec[lo:lo + (1 << 20)]
        lines = [f"{t},{c},{m}\n" for t, c, m in
                 zip(part["timestamp_ps"].tolist(), part["channel"].tolist(), part["marker"].tolist())]
        sink.write("".join(lines))
    return len(rec)


def read_csv(source, sync_period_ps: int, origin_ps: int = 0) -> TimeTagStream:
    header = source.readline().strip()
    if header.replace(" ", "") != "timestamp_ps,channel,marker":
        raise TimeTagFormatError(f"unexpected CSV header {header!r}")
    ts, ch, mk = [], [], []
    for lineno, line in enumerate(source, start=2):
        line = line.strip()
        if not line:
            continue
        try:
            t, c, m = line.split(",")
            ts.append(int(t))
            ch.append(int(c))
            mk.append(int(m))
        except ValueError as exc:
            raise TimeTagFormatError(f"line {lineno}: {exc}") from None
    rec = empty_records(len(ts))
    rec["timestamp_ps"] = np.array(ts, dtype=np.uint64)
    rec["channel"] = ch
    rec["marker"] = mk
    return TimeTagStream(rec, sync_period_ps, origin_ps)


def merge_records(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stable sorted union of two ordered record arrays; ``a`` wins ties."""
    if b.shape[0] == 0:
        return a.copy()
    if a.shape[0] == 0:
        return b.copy()
    ta = a["timestamp_ps"]
    tb = b["timestamp_ps"]
    out = np.empty(a.shape[0] + b.shape[0], dtype=RECORD_DTYPE)
    pos_a = np.arange(a.shape[0]) + np.searchsorted(tb, ta, side="left")
    pos_b = np.arange(b.shape[0]) + np.searchsorted(ta, tb, side="right")
    out[pos_a] = a
    out[pos_b] = b
    return out


def merge_streams(a: TimeTagStream, b: TimeTagStream) -> TimeTagStream:
    """Sorted union of two streams sharing sync period and origin."""
    if not a.same_header(b):
        raise HeaderMismatchError(
            f"cannot merge streams with headers ({a.sync_period_ps}, {a.origin_ps}) "
            f"and ({b.sync_period_ps}, {b.origin_ps})")
    cmap = dict(b.channel_map)
    cmap.update(a.channel_map)
    return TimeTagStream(frozen(merge_records(a.records, b.records)), a.sync_period_ps, a.origin_ps, cmap)


def open_qtag(path: str | os.PathLike, chunk_records: int = 1 << 22):
    """Open a file and return ``(header, chunk iterator)``; the iterator closes the file."""
    fh = open(Path(path), "rb")
    try:
        header = read_header(fh)
    except Exception:
        fh.close()
        raise

    def gen():
        with fh:
            yield from iter_timetag_chunks(fh, chunk_records, header)

    return header, gen()
