"""Check-in log parsing, history building, and train/eval sample generation.

Input formats
-------------
native-tsv      user \t poi \t lat \t lon \t unix_seconds
foursquare-tsv  user \t venue \t category_id \t category_name \t lat \t lon
                \t tz_offset_minutes \t utc_time ("Tue Apr 03 18:00:06 +0000 2012")

For the foursquare format the stored timestamp is the UTC instant shifted by
the per-record timezone offset (local wall-clock seconds), so per-user
ordering follows the user's local day.

Sample generation walks each user's chronological visit sequence: every
prefix yields one positive (next visit) and one negative with the same
context, the negative target drawn uniformly from POIs the user never
visited. The draw is seeded by (seed, user_index, prefix_length), so shards
produce identical output regardless of worker layout. Each user's final
prefix pair is held out; the held-out samples are shuffled once and split in
half into test and validation.
"""

from __future__ import annotations

import calendar
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (ColumnCountMismatch, CoordinateOutOfRange, DataError,
                     EmptyCorpus, InvalidFraction, NoNegativeCandidates,
                     ParseThresholdExceeded, TimestampUnparsable)

MAX_SEQ_LEN_DEFAULT = 100
PARSE_ERROR_THRESHOLD = 0.01

VALID_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)

_MONTHS = {"Jan": 1, "Feb": 2, "Mar": 3, "Apr": 4, "May": 5, "Jun": 6,
           "Jul": 7, "Aug": 8, "Sep": 9, "Oct": 10, "Nov": 11, "Dec": 12}


@dataclass(frozen=True)
class CheckInRecord:
    user_id: str
    poi_id: str
    lat: float
    lon: float
    timestamp: int


@dataclass
class ParseReport:
    records: list[CheckInRecord]
    bad_lines: list[tuple[int, str, str]] = field(default_factory=list)

    @property
    def num_bad(self) -> int:
        return len(self.bad_lines)


@dataclass
class UserHistory:
    user_index: int
    visits: list[tuple[int, int]]  # (poi_index, timestamp), time-sorted


@dataclass
class HistoryBuild:
    histories: list[UserHistory]
    poi_table: list[tuple[float, float]]  # poi_index -> (lat, lon)
    user_ids: list[str]                   # user_index -> original id
    poi_ids: list[str]                    # poi_index -> original id
    dropped_single_visit: int = 0
    coordinate_conflicts: int = 0


@dataclass(frozen=True)
class Sample:
    user_index: int
    context: tuple[int, ...]
    target: int
    label: int


@dataclass
class DatasetSplit:
    train: list[Sample]
    validation: list[Sample]
    test: list[Sample]
    poi_table: list[tuple[float, float]]
    num_users: int
    num_pois: int


def _parse_foursquare_time(offset_minutes: str, utc_text: str) -> int:
    """'Tue Apr 03 18:00:06 +0000 2012' + offset minutes -> unix seconds."""
    parts = utc_text.split()
    if len(parts) != 6:
        raise TimestampUnparsable(utc_text)
    _, mon, day, clock, zone, year = parts
    if mon not in _MONTHS:
        raise TimestampUnparsable(utc_text)
    try:
        hh, mm, ss = (int(x) for x in clock.split(":"))
        epoch = calendar.timegm(
            (int(year), _MONTHS[mon], int(day), hh, mm, ss, 0, 0, 0))
        zone_min = int(zone[1:3]) * 60 + int(zone[3:5])
        if zone[0] == "-":
            zone_min = -zone_min
        elif zone[0] != "+":
            raise ValueError(zone)
        off = int(offset_minutes)
    except (ValueError, IndexError) as exc:
        raise TimestampUnparsable(utc_text) from exc
    return epoch - zone_min * 60 + off * 60


def _parse_native_line(cols: list[str]) -> CheckInRecord:
    if len(cols) != 5:
        raise ColumnCountMismatch(f"expected 5 columns, got {len(cols)}")
    user, poi, lat_s, lon_s, ts_s = cols
    try:
        lat, lon = float(lat_s), float(lon_s)
    except ValueError as exc:
        raise CoordinateOutOfRange(f"{lat_s},{lon_s}") from exc
    _check_coords(lat, lon)
    try:
        ts = int(ts_s)
    except ValueError as exc:
        raise TimestampUnparsable(ts_s) from exc
    if ts < 0:
        raise TimestampUnparsable(f"negative timestamp {ts}")
    return CheckInRecord(user, poi, lat, lon, ts)


def _parse_foursquare_line(cols: list[str]) -> CheckInRecord:
    if len(cols) != 8:
        raise ColumnCountMismatch(f"expected 8 columns, got {len(cols)}")
    user, venue, _cat_id, _cat_name, lat_s, lon_s, off_s, utc_s = cols
    try:
        lat, lon = float(lat_s), float(lon_s)
    except ValueError as exc:
        raise CoordinateOutOfRange(f"{lat_s},{lon_s}") from exc
    _check_coords(lat, lon)
    ts = _parse_foursquare_time(off_s, utc_s)
    if ts < 0:
        raise TimestampUnparsable(f"negative timestamp {ts}")
    return CheckInRecord(user, venue, lat, lon, ts)


def _check_coords(lat: float, lon: float) -> None:
    if not (math.isfinite(lat) and -90.0 <= lat <= 90.0):
        raise CoordinateOutOfRange(f"lat {lat}")
    if not (math.isfinite(lon) and -180.0 <= lon <= 180.0):
        raise CoordinateOutOfRange(f"lon {lon}")


_PARSERS = {"native-tsv": _parse_native_line,
            "foursquare-tsv": _parse_foursquare_line}


def parse_checkins(stream: Iterable[str], fmt: str = "native-tsv") -> ParseReport:
    """Parse check-in lines; malformed lines are collected, not dropped silently.

    Raises ParseThresholdExceeded when more than 1% of non-empty lines fail.
    """
    try:
        parser = _PARSERS[fmt]
    except KeyError:
        raise DataError(f"unknown format {fmt!r}") from None

    report = ParseReport(records=[])
    total = 0
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line:
            continue
        total += 1
        try:
            report.records.append(parser(line.split("\t")))
        except (ColumnCountMismatch, CoordinateOutOfRange, TimestampUnparsable) as exc:
            report.bad_lines.append((lineno, type(exc).__name__, str(exc)))
    if total and report.num_bad / total > PARSE_ERROR_THRESHOLD:
        raise ParseThresholdExceeded(
            f"{report.num_bad}/{total} malformed lines exceeds "
            f"{PARSE_ERROR_THRESHOLD:.0%} threshold")
    return report


def build_histories(records: list[CheckInRecord]) -> HistoryBuild:
    """Assign dense user/POI indices and per-user time-sorted visit lists.

    Indices follow first appearance in file order. Ties in timestamp keep
    file order (stable sort). A POI keeps the coordinates of its first
    record; later disagreements are only counted. Users left with fewer than
    two visits are dropped.
    """
    if not records:
        raise EmptyCorpus("no check-in records")

    user_index: dict[str, int] = {}
    poi_index: dict[str, int] = {}
    user_ids: list[str] = []
    poi_ids: list[str] = []
    poi_table: list[tuple[float, float]] = []
    conflicts = 0
    per_user: dict[int, list[tuple[int, int]]] = {}

    for rec in records:
        u = user_index.get(rec.user_id)
        if u is None:
            u = user_index[rec.user_id] = len(user_ids)
            user_ids.append(rec.user_id)
            per_user[u] = []
        p = poi_index.get(rec.poi_id)
        if p is None:
            p = poi_index[rec.poi_id] = len(poi_ids)
            poi_ids.append(rec.poi_id)
            poi_table.append((rec.lat, rec.lon))
        elif poi_table[p] != (rec.lat, rec.lon):
            conflicts += 1
        per_user[u].append((p, rec.timestamp))

    histories: list[UserHistory] = []
    dropped = 0
    for u in range(len(user_ids)):
        visits = sorted(per_user[u], key=lambda v: v[1])  # stable: ties keep file order
        if len(visits) < 2:
            dropped += 1
            continue
        histories.append(UserHistory(user_index=u, visits=visits))

    return HistoryBuild(histories, poi_table, user_ids, poi_ids,
                        dropped_single_visit=dropped,
                        coordinate_conflicts=conflicts)


def draw_negative(visited_sorted: np.ndarray, num_pois: int,
                  rng_seed: int, user_index: int, t: int) -> int:
    """Uniform draw from the POIs absent from visited_sorted.

    Deterministic in (rng_seed, user_index, t) alone, so generation can be
    sharded by user without changing output.
    """
    free = num_pois - len(visited_sorted)
    if free <= 0:
        raise NoNegativeCandidates(f"user {user_index} visited all POIs")
    rng = np.random.default_rng([rng_seed, user_index, t])
    k = int(rng.integers(free))
    # k-th POI when the visited ones are skipped
    for v in visited_sorted:
        if v <= k:
            k += 1
        else:
            break
    return k


def generate_samples(histories: list[UserHistory],
                     poi_table: list[tuple[float, float]],
                     rng_seed: int,
                     max_seq_len: int = MAX_SEQ_LEN_DEFAULT) -> DatasetSplit:
    """Expand histories into positive/negative samples and split them.

    For each prefix position t >= 1: positive (first t visits -> visit t+1)
    plus one negative with the same context. The final pair of every user is
    held out; held-out samples are shuffled with rng_seed and the first half
    becomes the test set, the second half validation.
    """
    num_pois = len(poi_table)
    num_users = max((h.user_index for h in histories), default=-1) + 1
    train: list[Sample] = []
    evaluation: list[Sample] = []

    for hist in histories:
        if len(hist.visits) < 2:
            raise DataError(f"history of user {hist.user_index} too short")
        pois = [p for p, _ in hist.visits]
        visited_sorted = np.unique(np.array(pois, dtype=np.int64))
        last_t = len(pois) - 1
        for t in range(1, len(pois)):
            context = tuple(pois[max(0, t - max_seq_len):t])
            positive = Sample(hist.user_index, context, pois[t], 1)
            neg_target = draw_negative(visited_sorted, num_pois,
                                       rng_seed, hist.user_index, t)
            negative = Sample(hist.user_index, context, neg_target, 0)
            bucket = evaluation if t == last_t else train
            bucket.append(positive)
            bucket.append(negative)

    perm = np.random.default_rng([rng_seed]).permutation(len(evaluation))
    shuffled = [evaluation[i] for i in perm]
    half = len(shuffled) // 2
    return DatasetSplit(train=train,
                        test=shuffled[:half],
                        validation=shuffled[half:],
                        poi_table=list(poi_table),
                        num_users=num_users,
                        num_pois=num_pois)


def train_fraction_slice(split: DatasetSplit, fraction: float,
                         rng_seed: int) -> DatasetSplit:
    """Keep ceil(fraction * n_u) training samples per user; eval sets untouched."""
    if not any(abs(fraction - f) < 1e-12 for f in VALID_FRACTIONS):
        raise InvalidFraction(f"fraction must be one of {VALID_FRACTIONS}, "
                              f"got {fraction}")
    if fraction == 1.0:
        kept = list(split.train)
    else:
        by_user: dict[int, list[int]] = {}
        for idx, s in enumerate(split.train):
            by_user.setdefault(s.user_index, []).append(idx)
        keep_idx: list[int] = []
        for user, idxs in by_user.items():
            n_keep = math.ceil(fraction * len(idxs))
            rng = np.random.default_rng([rng_seed, user])
            chosen = rng.permutation(len(idxs))[:n_keep]
            keep_idx.extend(idxs[i] for i in chosen)
        keep_idx.sort()
        kept = [split.train[i] for i in keep_idx]
    return DatasetSplit(train=kept,
                        validation=split.validation,
                        test=split.test,
                        poi_table=split.poi_table,
                        num_users=split.num_users,
                        num_pois=split.num_pois)


# ---------------------------------------------------------------------------
# dataset bundle I/O
# ---------------------------------------------------------------------------

_SPLIT_FILES = {"train": "samples.train",
                "validation": "samples.valid",
                "test": "samples.test"}


def _write_samples(path: Path, samples: list[Sample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"u": s.user_index, "c": list(s.context),
                                 "t": s.target, "y": s.label},
                                separators=(",", ":")))
            fh.write("\n")


def _read_samples(path: Path) -> list[Sample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            samples.append(Sample(d["u"], tuple(d["c"]), d["t"], d["y"]))
    return samples


def save_bundle(split: DatasetSplit, out_dir, meta: dict | None = None) -> None:
    """Write samples.{train,valid,test}, pois.tsv and meta.json into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for attr, fname in _SPLIT_FILES.items():
        _write_samples(out / fname, getattr(split, attr))
    with open(out / "pois.tsv", "w", encoding="utf-8") as fh:
        for idx, (lat, lon) in enumerate(split.poi_table):
            fh.write(f"{idx}\t{lat!r}\t{lon!r}\n")
    info = {"num_users": split.num_users,
            "num_pois": split.num_pois,
            "num_train": len(split.train),
            "num_validation": len(split.validation),
            "num_test": len(split.test)}
    if meta:
        info.update(meta)
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_bundle(bundle_dir) -> tuple[DatasetSplit, dict]:
    bundle = Path(bundle_dir)
    with open(bundle / "meta.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    poi_table: list[tuple[float, float]] = []
    with open(bundle / "pois.tsv", "r", encoding="utf-8") as fh:
        for line in fh:
            idx_s, lat_s, lon_s = line.rstrip("\n").split("\t")
            if int(idx_s) != len(poi_table):
                raise DataError(f"pois.tsv indices not contiguous at {idx_s}")
            poi_table.append((float(lat_s), float(lon_s)))
    if len(poi_table) != meta["num_pois"]:
        raise DataError("pois.tsv row count disagrees with meta.json")
    parts = {attr: _read_samples(bundle / fname)
             for attr, fname in _SPLIT_FILES.items()}
    split = DatasetSplit(train=parts["train"],
                         validation=parts["validation"],
                         test=parts["test"],
                         poi_table=poi_table,
                         num_users=meta["num_users"],
                         num_pois=meta["num_pois"])
    return split, meta
