"""Streaming ingest of FIRMS VIIRS active-fire CSV files.

Records are parsed one row at a time so a year of global detections can be
filtered in constant memory. Both header vocabularies seen in the wild are
accepted: ``brightness``/``bright_t31`` and the VIIRS product names
``bright_ti4``/``bright_ti5``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, Sequence

from oginfra.errors import ConfigError, ConsistencyError, IngestIOError, SchemaError

logger = logging.getLogger(__name__)


class Confidence(str, Enum):
    LOW = "low"
    NOMINAL = "nominal"
    HIGH = "high"

    @property
    def code(self) -> str:
        return self.value[0]


class Satellite(str, Enum):
    SUOMI_NPP = "SuomiNPP"
    NOAA20 = "NOAA20"

    @property
    def code(self) -> str:
        return "N" if self is Satellite.SUOMI_NPP else "1"


class DayNight(str, Enum):
    DAY = "day"
    NIGHT = "night"


_CONFIDENCE_CODES = {"l": Confidence.LOW, "n": Confidence.NOMINAL, "h": Confidence.HIGH}

_SATELLITE_CODES = {
    "n": Satellite.SUOMI_NPP,
    "suomi-npp": Satellite.SUOMI_NPP,
    "suominpp": Satellite.SUOMI_NPP,
    "1": Satellite.NOAA20,
    "j1": Satellite.NOAA20,
    "noaa-20": Satellite.NOAA20,
    "noaa20": Satellite.NOAA20,
}

_DAYNIGHT_CODES = {"d": DayNight.DAY, "n": DayNight.NIGHT}

# canonical field -> accepted header names, first is the name we write
COLUMN_ALIASES: dict[str, tuple[str, ...]] = {
    "latitude": ("latitude",),
    "longitude": ("longitude",),
    "brightness": ("brightness", "bright_ti4"),
    "bright_t31": ("bright_t31", "bright_ti5"),
    "confidence": ("confidence",),
    "acq_date": ("acq_date",),
    "acq_time": ("acq_time",),
    "satellite": ("satellite",),
    "frp": ("frp",),
    "daynight": ("daynight",),
}

REQUIRED_FIELDS = (
    "latitude",
    "longitude",
    "brightness",
    "bright_t31",
    "confidence",
    "acq_date",
    "acq_time",
    "satellite",
)
OPTIONAL_FIELDS = ("frp", "daynight")
OUTPUT_COLUMNS = REQUIRED_FIELDS + OPTIONAL_FIELDS

CONSTRAINTS = ("brightness", "bright_t31", "confidence", "region")


@dataclass(frozen=True, slots=True)
class HotspotRecord:
    """One VIIRS active-fire detection.

    ``acq_time`` is minutes after midnight UTC; the CSV form is zero-padded HHMM.
    """

    latitude: float
    longitude: float
    brightness: float
    bright_t31: float
    confidence: Confidence
    acq_date: date
    acq_time: int
    satellite: Satellite
    frp: float | None = None
    daynight: DayNight | None = None

    def __post_init__(self) -> None:
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude out of range: {self.longitude}")
        if not (self.brightness > 0 and math.isfinite(self.brightness)):
            raise ValueError(f"brightness must be a positive Kelvin value: {self.brightness}")
        if not (self.bright_t31 > 0 and math.isfinite(self.bright_t31)):
            raise ValueError(f"bright_t31 must be a positive Kelvin value: {self.bright_t31}")
        if not 0 <= self.acq_time < 24 * 60:
            raise ValueError(f"acq_time out of range: {self.acq_time}")

    @property
    def hhmm(self) -> str:
        return f"{self.acq_time // 60:02d}{self.acq_time % 60:02d}"


@dataclass(frozen=True, slots=True)
class BoundingBox:
    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float

    def __post_init__(self) -> None:
        if not (self.min_lon < self.max_lon and self.min_lat < self.max_lat):
            raise ConfigError(f"region must have min < max on both axes: {self}")

    def contains(self, lon: float, lat: float) -> bool:
        return self.min_lon <= lon <= self.max_lon and self.min_lat <= lat <= self.max_lat


@dataclass(frozen=True)
class FilterCriteria:
    min_brightness: float = 300.0
    min_bright_t31: float = 270.0
    accepted_confidence: frozenset[Confidence] = frozenset({Confidence.NOMINAL, Confidence.HIGH})
    region: BoundingBox | None = None

    def __post_init__(self) -> None:
        if not self.accepted_confidence:
            raise ConfigError("accepted_confidence must not be empty")
        object.__setattr__(self, "accepted_confidence", frozenset(Confidence(c) for c in self.accepted_confidence))

    def failed_constraints(self, record: HotspotRecord) -> list[str]:
        failed = []
        if not record.brightness >= self.min_brightness:
            failed.append("brightness")
        if not record.bright_t31 >= self.min_bright_t31:
            failed.append("bright_t31")
        if record.confidence not in self.accepted_confidence:
            failed.append("confidence")
        if self.region is not None and not self.region.contains(record.longitude, record.latitude):
            failed.append("region")
        return failed


@dataclass
class FilterStats:
    rows_read: int = 0
    rows_parsed: int = 0
    rows_rejected_parse: int = 0
    rows_passed: int = 0
    rows_failed_each_constraint: Counter = field(default_factory=lambda: Counter({c: 0 for c in CONSTRAINTS}))
    per_satellite: Counter = field(default_factory=Counter)

    def merge(self, other: FilterStats) -> FilterStats:
        """Return the sum of two stats blocks. Merging is associative and commutative."""
        return FilterStats(
            rows_read=self.rows_read + other.rows_read,
            rows_parsed=self.rows_parsed + other.rows_parsed,
            rows_rejected_parse=self.rows_rejected_parse + other.rows_rejected_parse,
            rows_passed=self.rows_passed + other.rows_passed,
            rows_failed_each_constraint=self.rows_failed_each_constraint + other.rows_failed_each_constraint,
            per_satellite=self.per_satellite + other.per_satellite,
        )

    __add__ = merge

    def to_dict(self) -> dict:
        return {
            "rows_read": self.rows_read,
            "rows_parsed": self.rows_parsed,
            "rows_rejected_parse": self.rows_rejected_parse,
            "rows_passed": self.rows_passed,
            "rows_failed_each_constraint": {c: self.rows_failed_each_constraint.get(c, 0) for c in CONSTRAINTS},
            "per_satellite": {s.value: self.per_satellite.get(s, 0) for s in Satellite},
        }


def parse_confidence(token: str) -> Confidence:
    try:
        return _CONFIDENCE_CODES[token.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown confidence token {token!r}") from None


def parse_satellite(token: str) -> Satellite:
    try:
        return _SATELLITE_CODES[token.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown satellite code {token!r}") from None


def parse_acq_time(token: str) -> int:
    token = token.strip()
    if not token.isdigit() or len(token) > 4:
        raise ValueError(f"acq_time must be HHMM digits: {token!r}")
    hhmm = int(token)
    hours, minutes = divmod(hhmm, 100)
    if hours > 23 or minutes > 59:
        raise ValueError(f"acq_time out of range: {token!r}")
    return hours * 60 + minutes


def _float(token: str) -> float:
    value = float(token)
    if not math.isfinite(value):
        raise ValueError(f"non-finite value {token!r}")
    return value


def _resolve_columns(header: Sequence[str], schema_hint: Mapping[str, str] | None) -> dict[str, int]:
    normalized = [h.strip().lower() for h in header]
    index: dict[str, int] = {}
    for name, aliases in COLUMN_ALIASES.items():
        candidates = aliases
        if schema_hint and name in schema_hint:
            candidates = (schema_hint[name].strip().lower(),)
        for alias in candidates:
            if alias in normalized:
                index[name] = normalized.index(alias)
                break
    missing = [f for f in REQUIRED_FIELDS if f not in index]
    if missing:
        raise SchemaError(f"CSV header is missing required columns {missing}; got {list(header)}")
    return index


def _build_record(row: Sequence[str], cols: Mapping[str, int]) -> HotspotRecord:
    frp = None
    if "frp" in cols and row[cols["frp"]].strip():
        frp = _float(row[cols["frp"]])
    daynight = None
    if "daynight" in cols and row[cols["daynight"]].strip():
        daynight = _DAYNIGHT_CODES[row[cols["daynight"]].strip().lower()]
    return HotspotRecord(
        latitude=_float(row[cols["latitude"]]),
        longitude=_float(row[cols["longitude"]]),
        brightness=_float(row[cols["brightness"]]),
        bright_t31=_float(row[cols["bright_t31"]]),
        confidence=parse_confidence(row[cols["confidence"]]),
        acq_date=date.fromisoformat(row[cols["acq_date"]].strip()),
        acq_time=parse_acq_time(row[cols["acq_time"]]),
        satellite=parse_satellite(row[cols["satellite"]]),
        frp=frp,
        daynight=daynight,
    )


def _as_text(source: IO) -> IO[str]:
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8-sig", newline="")


def parse_stream(source: IO, schema_hint: Mapping[str, str] | None = None) -> tuple[Iterator[HotspotRecord], FilterStats]:
    """Parse a FIRMS CSV stream lazily.

    The header is read immediately, so a bad schema raises here. The returned
    stats object is updated as the iterator is consumed; malformed rows are
    counted in ``rows_rejected_parse`` and skipped.
    """
    reader = csv.reader(_as_text(source))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("CSV stream is empty; expected a header row") from None
    cols = _resolve_columns(header, schema_hint)
    width = max(cols.values()) + 1
    stats = FilterStats()

    def records() -> Iterator[HotspotRecord]:
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            stats.rows_read += 1
            try:
                if len(row) < width:
                    raise ValueError(f"expected at least {width} fields, got {len(row)}")
                record = _build_record(row, cols)
            except (ValueError, KeyError) as exc:
                stats.rows_rejected_parse += 1
                logger.debug("rejecting row %d: %s", lineno, exc)
                continue
            stats.rows_parsed += 1
            yield record

    return records(), stats


def apply_filter(record: HotspotRecord, criteria: FilterCriteria) -> bool:
    """True iff the record meets every threshold (inclusive) and lies in the region."""
    return (
        record.brightness >= criteria.min_brightness
        and record.bright_t31 >= criteria.min_bright_t31
        and record.confidence in criteria.accepted_confidence
        and (criteria.region is None or criteria.region.contains(record.longitude, record.latitude))
    )


def filter_stream(
    source: IO, criteria: FilterCriteria, schema_hint: Mapping[str, str] | None = None
) -> tuple[Iterator[HotspotRecord], FilterStats]:
    records, stats = parse_stream(source, schema_hint)

    def passed() -> Iterator[HotspotRecord]:
        for record in records:
            failed = criteria.failed_constraints(record)
            if failed:
                stats.rows_failed_each_constraint.update(failed)
                continue
            stats.rows_passed += 1
            stats.per_satellite[record.satellite] += 1
            yield record

    return passed(), stats


def filter_file(
    path: str | Path, criteria: FilterCriteria, schema_hint: Mapping[str, str] | None = None
) -> tuple[Iterator[HotspotRecord], FilterStats]:
    """Stream the passing records of one CSV file.

    The returned stats are complete once the iterator has been exhausted.
    """
    path = Path(path)
    try:
        handle = open(path, "rb")
    except OSError as exc:
        raise IngestIOError(f"cannot open {path}: {exc.strerror or exc}") from exc
    try:
        records, stats = filter_stream(handle, criteria, schema_hint)
    except SchemaError as exc:
        handle.close()
        raise SchemaError(f"{path}: {exc}") from None

    def guarded() -> Iterator[HotspotRecord]:
        try:
            yield from records
        except OSError as exc:
            raise IngestIOError(f"error reading {path}: {exc}") from exc
        finally:
            handle.close()

    return guarded(), stats


def merge_satellite_runs(
    runs: Iterable[tuple[Satellite, Iterable[HotspotRecord]]],
) -> tuple[Iterator[HotspotRecord], Counter]:
    """Concatenate per-satellite runs in order, one run at a time.

    Counts per satellite accumulate as records are consumed. A record whose
    tag disagrees with its run raises ``ConsistencyError``.
    """
    counts: Counter = Counter()

    def merged() -> Iterator[HotspotRecord]:
        for satellite, records in runs:
            satellite = Satellite(satellite)
            for record in records:
                if record.satellite is not satellite:
                    raise ConsistencyError(
                        f"{satellite.value} run contains a record tagged {record.satellite.value}"
                    )
                counts[satellite] += 1
                yield record

    return merged(), counts


def _format_float(value: float) -> str:
    return repr(float(value))


def record_to_row(record: HotspotRecord) -> list[str]:
    return [
        _format_float(record.latitude),
        _format_float(record.longitude),
        _format_float(record.brightness),
        _format_float(record.bright_t31),
        record.confidence.code,
        record.acq_date.isoformat(),
        record.hhmm,
        record.satellite.code,
        "" if record.frp is None else _format_float(record.frp),
        "" if record.daynight is None else record.daynight.value[0].upper(),
    ]


def write_records(records: Iterable[HotspotRecord], dest: IO[str]) -> int:
    """Serialize records in the canonical column order; returns the row count."""
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(OUTPUT_COLUMNS)
    n = 0
    for record in records:
        writer.writerow(record_to_row(record))
        n += 1
    return n


def read_records(path: str | Path) -> list[HotspotRecord]:
    """Load a canonical CSV written by ``write_records`` fully into memory."""
    with open(path, "rb") as handle:
        records, _ = parse_stream(handle)
        return list(records)
