"""Historical reading store, bounded live window, diary, export.

Layout on disk: one append-only segment file per (site, day) under
<root>/segments/<site>/<day>.seg, each record framed as

    u32 length | u32 crc32(payload) | payload (reading JSON, utf-8)

A segment is copied into <root>/mirror/ when its day rotates out and on
close. On open, segments are replayed to rebuild the in-memory index;
a torn tail (partial last record) is truncated and replay continues.

In memory each series (site, endpoint, object, instance, resource)
keeps parallel float columns, which makes million-reading scenarios
cheap, plus a per-series device-time high-water mark used for
at-least-once dedup: a reading at or below the mark is reported as a
duplicate and not stored twice.
"""

from __future__ import annotations

import bisect
import csv
import heapq
import json
import logging
import math
import os
import shutil
import struct
import threading
from array import array
from collections import deque
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

DAY_SECONDS = 86400
LIVE_WINDOW_CAPACITY = 3600
FLUSH_EVERY = 256
_FRAME = struct.Struct("<II")

SeriesKey = tuple[str, str, int, int, int]    # site, endpoint, object, instance, resource


class DatastoreError(Exception):
    pass


class BadRange(DatastoreError):
    pass


class BadCsv(DatastoreError):
    def __init__(self, line: int, reason: str) -> None:
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


@dataclass
class DiaryEntry:
    site: str
    slot_start: float
    activity_code: int
    location: str
    who: str


class _Series:
    __slots__ = ("key", "unit", "pseudonym", "device_time", "server_time",
                 "value", "raw_values", "high_water")

    def __init__(self, key: SeriesKey, unit: str, pseudonym: str) -> None:
        self.key = key
        self.unit = unit
        self.pseudonym = pseudonym
        self.device_time = array("d")
        self.server_time = array("d")
        self.value = array("d")
        self.raw_values: dict[int, object] = {}    # index -> non-numeric value
        self.high_water = -math.inf

    def reading_at(self, i: int) -> dict:
        site, endpoint, obj, inst, res = self.key
        value = self.raw_values.get(i)
        if value is None:
            value = self.value[i]
        return {
            "pseudonym": self.pseudonym,
            "endpoint": endpoint,
            "object": obj,
            "instance": inst,
            "resource": res,
            "value": value,
            "unit": self.unit,
            "device_time": self.device_time[i],
            "server_time": self.server_time[i],
            "site": site,
        }


class _SegmentWriter:
    def __init__(self, path: str) -> None:
        self.path = path
        os.makedirs(os.path.dirname(path), exist_ok=True)
        self.fh = open(path, "ab")
        self.unflushed = 0

    def write(self, payload: bytes) -> None:
        self.fh.write(_FRAME.pack(len(payload), _crc(payload)))
        self.fh.write(payload)
        self.unflushed += 1
        if self.unflushed >= FLUSH_EVERY:
            self.flush()

    def flush(self) -> None:
        self.fh.flush()
        self.unflushed = 0

    def close(self) -> None:
        self.flush()
        self.fh.close()


def _crc(payload: bytes) -> int:
    import zlib
    return zlib.crc32(payload) & 0xFFFFFFFF


def _read_segment(path: str, truncate_torn: bool = True):
    """Yield payload bytes from a segment; truncate a torn tail in place."""
    good = 0
    with open(path, "rb") as fh:
        while True:
            header = fh.read(_FRAME.size)
            if len(header) < _FRAME.size:
                break
            length, crc = _FRAME.unpack(header)
            payload = fh.read(length)
            if len(payload) < length or _crc(payload) != crc:
                log.warning("segment %s: torn record at offset %d", path, good)
                break
            good += _FRAME.size + length
            yield payload
    if truncate_torn and good < os.path.getsize(path):
        with open(path, "r+b") as fh:
            fh.truncate(good)


class Datastore:
    """Append/query store. One writer, many readers."""

    def __init__(self, root: str | None = None,
                 live_capacity: int = LIVE_WINDOW_CAPACITY) -> None:
        self.root = root
        self.live_capacity = live_capacity
        self._lock = threading.RLock()
        self._series: dict[SeriesKey, _Series] = {}
        self._live: dict[tuple[str, int], deque] = {}
        self._writers: dict[tuple[str, int], _SegmentWriter] = {}
        self._diary: dict[str, list[DiaryEntry]] = {}
        self.stats = {"appended": 0, "duplicates": 0, "replayed": 0,
                      "torn_records": 0}
        if root is not None:
            os.makedirs(os.path.join(root, "segments"), exist_ok=True)
            os.makedirs(os.path.join(root, "mirror"), exist_ok=True)
            self._replay()

    # ------------------------------------------------------------------
    # ingest

    def append(self, reading: dict, raw: bytes | None = None) -> bool:
        """Store one reading. Returns False (and stores nothing) when the
        series high-water mark marks it as an at-least-once duplicate."""
        key: SeriesKey = (reading.get("site", ""), reading["endpoint"],
                          int(reading["object"]), int(reading["instance"]),
                          int(reading["resource"]))
        device_time = float(reading["device_time"])
        with self._lock:
            series = self._series.get(key)
            if series is None:
                series = _Series(key, reading.get("unit", ""),
                                 reading.get("pseudonym", ""))
                self._series[key] = series
            if device_time <= series.high_water:
                self.stats["duplicates"] += 1
                return False
            self._store(series, reading, device_time)
            if self.root is not None:
                self._persist(key[0], reading, raw)
            self.stats["appended"] += 1
        return True

    def _store(self, series: _Series, reading: dict, device_time: float) -> None:
        value = reading["value"]
        index = len(series.device_time)
        if isinstance(value, bool):
            series.value.append(1.0 if value else 0.0)
        elif isinstance(value, (int, float)):
            series.value.append(float(value))
        else:
            series.value.append(math.nan)
            series.raw_values[index] = value
        series.device_time.append(device_time)
        series.server_time.append(float(reading.get("server_time", device_time)))
        series.high_water = device_time
        live_key = (reading["endpoint"], int(reading["object"]))
        window = self._live.get(live_key)
        if window is None:
            window = deque(maxlen=self.live_capacity)
            self._live[live_key] = window
        window.append(reading)

    def _persist(self, site: str, reading: dict, raw: bytes | None) -> None:
        day = int(float(reading.get("server_time", reading["device_time"])) // DAY_SECONDS)
        wkey = (site or "_", day)
        writer = self._writers.get(wkey)
        if writer is None:
            self._rotate(site or "_", day)
            writer = _SegmentWriter(self._segment_path(site or "_", day))
            self._writers[wkey] = writer
        writer.write(raw if raw is not None
                     else json.dumps(reading, separators=(",", ":")).encode())

    def _segment_path(self, site: str, day: int) -> str:
        return os.path.join(self.root, "segments", site, f"{day:05d}.seg")

    def _rotate(self, site: str, new_day: int) -> None:
        """Close and mirror any older open segment for this site."""
        for (s, day), writer in list(self._writers.items()):
            if s == site and day < new_day:
                writer.close()
                self._mirror(s, day)
                del self._writers[(s, day)]

    def _mirror(self, site: str, day: int) -> None:
        src = self._segment_path(site, day)
        dst = os.path.join(self.root, "mirror", site, f"{day:05d}.seg")
        os.makedirs(os.path.dirname(dst), exist_ok=True)
        try:
            shutil.copy2(src, dst)
        except OSError as exc:
            log.warning("mirror copy failed for %s: %s", src, exc)

    def flush(self) -> None:
        with self._lock:
            for writer in self._writers.values():
                writer.flush()

    def close(self) -> None:
        with self._lock:
            for (site, day), writer in list(self._writers.items()):
                writer.close()
                self._mirror(site, day)
            self._writers.clear()

    def _replay(self) -> None:
        seg_root = os.path.join(self.root, "segments")
        for site in sorted(os.listdir(seg_root)):
            site_dir = os.path.join(seg_root, site)
            if not os.path.isdir(site_dir):
                continue
            for name in sorted(os.listdir(site_dir)):
                if not name.endswith(".seg"):
                    continue
                for payload in _read_segment(os.path.join(site_dir, name)):
                    try:
                        reading = json.loads(payload.decode("utf-8"))
                    except ValueError:
                        self.stats["torn_records"] += 1
                        continue
                    key: SeriesKey = (reading.get("site", ""), reading["endpoint"],
                                      int(reading["object"]), int(reading["instance"]),
                                      int(reading["resource"]))
                    series = self._series.get(key)
                    if series is None:
                        series = _Series(key, reading.get("unit", ""),
                                         reading.get("pseudonym", ""))
                        self._series[key] = series
                    device_time = float(reading["device_time"])
                    if device_time <= series.high_water:
                        continue
                    self._store(series, reading, device_time)
                    self.stats["replayed"] += 1

    # ------------------------------------------------------------------
    # queries

    def _select(self, site: str | None, endpoint: str | None,
                object_id: int | None) -> list[_Series]:
        return [s for key, s in self._series.items()
                if (site is None or key[0] == site)
                and (endpoint is None or key[1] == endpoint)
                and (object_id is None or key[2] == object_id)]

    def count(self, site: str | None = None, endpoint: str | None = None,
              object_id: int | None = None, t0: float = -math.inf,
              t1: float = math.inf) -> int:
        if t0 > t1:
            raise BadRange(f"t0 {t0} > t1 {t1}")
        total = 0
        with self._lock:
            for series in self._select(site, endpoint, object_id):
                lo = bisect.bisect_left(series.device_time, t0)
                hi = bisect.bisect_left(series.device_time, t1)
                total += hi - lo
        return total

    def query(self, site: str | None = None, endpoint: str | None = None,
              object_id: int | None = None, t0: float = -math.inf,
              t1: float = math.inf, limit: int | None = None,
              downsample: bool = False) -> list[dict]:
        """Readings in [t0, t1), nondecreasing device_time. With
        downsample=True, `limit` buckets of mean/min/max instead."""
        if t0 > t1:
            raise BadRange(f"t0 {t0} > t1 {t1}")
        if downsample:
            if limit is None or limit <= 0 or not math.isfinite(t1 - t0):
                raise BadRange("downsample needs a finite range and positive limit")
            return self._downsample(site, endpoint, object_id, t0, t1, limit)
        with self._lock:
            slices = []
            for series in self._select(site, endpoint, object_id):
                lo = bisect.bisect_left(series.device_time, t0)
                hi = bisect.bisect_left(series.device_time, t1)
                if lo < hi:
                    slices.append((series.reading_at(i) for i in range(lo, hi)))
            merged = heapq.merge(*slices, key=lambda r: r["device_time"])
            if limit is not None:
                out = []
                for reading in merged:
                    out.append(reading)
                    if len(out) >= limit:
                        break
                return out
            return list(merged)

    def _downsample(self, site, endpoint, object_id, t0, t1, buckets: int) -> list[dict]:
        width = (t1 - t0) / buckets
        sums = [0.0] * buckets
        counts = [0] * buckets
        mins = [math.inf] * buckets
        maxs = [-math.inf] * buckets
        with self._lock:
            for series in self._select(site, endpoint, object_id):
                lo = bisect.bisect_left(series.device_time, t0)
                hi = bisect.bisect_left(series.device_time, t1)
                for i in range(lo, hi):
                    value = series.value[i]
                    if math.isnan(value):
                        continue
                    b = min(int((series.device_time[i] - t0) / width), buckets - 1)
                    sums[b] += value
                    counts[b] += 1
                    if value < mins[b]:
                        mins[b] = value
                    if value > maxs[b]:
                        maxs[b] = value
        out = []
        for b in range(buckets):
            if counts[b] == 0:
                continue
            out.append({
                "t": t0 + b * width,
                "value": sums[b] / counts[b],
                "min": mins[b],
                "max": maxs[b],
                "count": counts[b],
            })
        return out

    def live(self, endpoint: str, object_id: int) -> list[dict]:
        with self._lock:
            window = self._live.get((endpoint, object_id))
            return list(window) if window else []

    def series_keys(self) -> list[SeriesKey]:
        with self._lock:
            return sorted(self._series)

    def total(self) -> int:
        with self._lock:
            return sum(len(s.device_time) for s in self._series.values())

    # ------------------------------------------------------------------
    # diary

    def import_diary(self, site: str, fh, base_time: float = 0.0) -> int:
        """Read diary CSV (slot_start, activity_code, location, who); slots
        must align to 10 minutes. slot_start is unix seconds or HH:MM
        relative to base_time."""
        reader = csv.reader(fh)
        entries: list[DiaryEntry] = []
        for line_no, row in enumerate(reader, start=1):
            if not row or (line_no == 1 and row[0].strip().lower() == "slot_start"):
                continue
            if len(row) < 4:
                raise BadCsv(line_no, f"expected 4 columns, got {len(row)}")
            slot_text = row[0].strip()
            try:
                if ":" in slot_text:
                    hours, _, minutes = slot_text.partition(":")
                    slot = base_time + int(hours) * 3600 + int(minutes) * 60
                else:
                    slot = float(slot_text)
            except ValueError:
                raise BadCsv(line_no, f"bad slot_start {slot_text!r}") from None
            if slot % 600 != 0:
                raise BadCsv(line_no, f"slot {slot_text!r} not aligned to 10 minutes")
            try:
                code = int(row[1])
            except ValueError:
                raise BadCsv(line_no, f"bad activity_code {row[1]!r}") from None
            entries.append(DiaryEntry(site=site, slot_start=slot, activity_code=code,
                                      location=row[2].strip(), who=row[3].strip()))
        with self._lock:
            bucket = self._diary.setdefault(site, [])
            bucket.extend(entries)
            bucket.sort(key=lambda e: e.slot_start)
        return len(entries)

    def diary_overlay(self, site: str, t0: float, t1: float) -> list[DiaryEntry]:
        """Entries whose 10-minute slot intersects [t0, t1)."""
        if t0 > t1:
            raise BadRange(f"t0 {t0} > t1 {t1}")
        with self._lock:
            return [e for e in self._diary.get(site, [])
                    if e.slot_start < t1 and e.slot_start + 600 > t0]

    # ------------------------------------------------------------------
    # export and retention

    EXPORT_HEADER = ["pseudonym", "endpoint", "object", "instance", "resource",
                     "value", "unit", "device_time", "server_time"]

    def export_csv(self, fh, **query_args) -> int:
        """Write query results as CSV; returns the row count."""
        writer = csv.writer(fh)
        writer.writerow(self.EXPORT_HEADER)
        rows = 0
        for reading in self.query(**query_args):
            writer.writerow([reading[col] for col in self.EXPORT_HEADER])
            rows += 1
        return rows

    def delete_older_than(self, cutoff: float) -> int:
        """Drop whole segment days ending before the cutoff and trim the
        in-memory series. Returns removed reading count."""
        removed = 0
        with self._lock:
            if self.root is not None:
                cutoff_day = int(cutoff // DAY_SECONDS)
                seg_root = os.path.join(self.root, "segments")
                for site in os.listdir(seg_root):
                    site_dir = os.path.join(seg_root, site)
                    if not os.path.isdir(site_dir):
                        continue
                    for name in list(os.listdir(site_dir)):
                        if name.endswith(".seg") and int(name[:-4]) < cutoff_day:
                            if (site, int(name[:-4])) in self._writers:
                                continue
                            os.remove(os.path.join(site_dir, name))
            for series in self._series.values():
                cut = bisect.bisect_left(series.device_time, cutoff)
                if cut:
                    removed += cut
                    series.device_time = series.device_time[cut:]
                    series.server_time = series.server_time[cut:]
                    series.value = series.value[cut:]
                    series.raw_values = {i - cut: v for i, v in series.raw_values.items()
                                         if i >= cut}
        return removed
