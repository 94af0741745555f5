from __future__ import annotations

import io
from collections import Counter
from datetime import date

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oginfra.errors import ConsistencyError, IngestIOError, SchemaError
from oginfra.firms import (
    BoundingBox,
    Confidence,
    DayNight,
    FilterCriteria,
    HotspotRecord,
    Satellite,
    apply_filter,
    filter_file,
    merge_satellite_runs,
    parse_acq_time,
    parse_satellite,
    parse_stream,
    read_records,
    write_records,
)

CLASSIC_HEADER = "latitude,longitude,brightness,bright_t31,confidence,acq_date,acq_time,satellite"
VIIRS_HEADER = "latitude,longitude,bright_ti4,bright_ti5,confidence,acq_date,acq_time,satellite"


def parse_text(text: str):
    records, stats = parse_stream(io.BytesIO(text.encode()))
    return list(records), stats


def rec(brightness=310.0, t31=280.0, conf=Confidence.HIGH, sat=Satellite.SUOMI_NPP, lat=25.0, lon=55.0, **kw):
    return HotspotRecord(lat, lon, brightness, t31, conf, date(2021, 1, 1), 600, sat, **kw)


class TestParseStream:
    def test_classic_dialect_row(self):
        records, stats = parse_text(f"{CLASSIC_HEADER}\n25.1,55.2,305.0,275.0,h,2021-03-04,0130,N\n")
        assert len(records) == 1
        r = records[0]
        assert (r.latitude, r.longitude, r.brightness, r.bright_t31, r.confidence) == (25.1, 55.2, 305.0, 275.0, Confidence.HIGH)
        assert r.acq_time == 90 and r.hhmm == "0130"
        assert stats.rows_read == 1 and stats.rows_parsed == 1

    def test_official_viirs_names_alias(self):
        classic, _ = parse_text(f"{CLASSIC_HEADER}\n25.1,55.2,305.0,275.0,h,2021-03-04,0130,N\n")
        viirs, _ = parse_text(f"{VIIRS_HEADER}\n25.1,55.2,305.0,275.0,h,2021-03-04,0130,N\n")
        assert viirs == classic

    def test_column_order_and_extra_columns_are_free(self):
        text = (
            "satellite,scan,acq_time,confidence,bright_ti5,acq_date,frp,longitude,latitude,bright_ti4,daynight\n"
            "1,0.4,2359,N,275.0,2022-12-31,4.5,55.2,25.1,305.0,N\n"
        )
        (r,), _ = parse_text(text)
        assert r.satellite is Satellite.NOAA20 and r.confidence is Confidence.NOMINAL
        assert r.frp == 4.5 and r.daynight is DayNight.NIGHT and r.acq_time == 23 * 60 + 59

    def test_empty_longitude_is_rejected_and_stream_continues(self):
        text = (
            f"{CLASSIC_HEADER}\n"
            "25.1,,305.0,275.0,h,2021-03-04,0130,N\n"
            "25.2,55.3,305.0,275.0,h,2021-03-04,0130,N\n"
        )
        records, stats = parse_text(text)
        assert [r.latitude for r in records] == [25.2]
        assert stats.rows_rejected_parse == 1 and stats.rows_read == 2

    @pytest.mark.parametrize(
        "row",
        [
            "95.0,55.2,305.0,275.0,h,2021-03-04,0130,N",  # latitude out of range
            "25.1,55.2,abc,275.0,h,2021-03-04,0130,N",
            "25.1,55.2,305.0,275.0,x,2021-03-04,0130,N",
            "25.1,55.2,305.0,275.0,h,2021-13-04,0130,N",
            "25.1,55.2,305.0,275.0,h,2021-03-04,2460,N",
            "25.1,55.2,305.0,275.0,h,2021-03-04,0130,Z",
            "25.1,55.2,nan,275.0,h,2021-03-04,0130,N",
            "25.1,55.2,305.0",
        ],
    )
    def test_malformed_rows_are_counted(self, row):
        records, stats = parse_text(f"{CLASSIC_HEADER}\n{row}\n")
        assert records == [] and stats.rows_rejected_parse == 1

    def test_missing_column_is_schema_error(self):
        with pytest.raises(SchemaError, match="confidence"):
            parse_stream(io.BytesIO(b"latitude,longitude,brightness,bright_t31,acq_date,acq_time,satellite\n"))

    def test_empty_stream_is_schema_error(self):
        with pytest.raises(SchemaError):
            parse_stream(io.BytesIO(b""))

    def test_schema_hint_binds_custom_column(self):
        text = "latitude,longitude,temp_a,bright_t31,confidence,acq_date,acq_time,satellite\n25,55,301,271,n,2021-01-01,0000,N\n"
        records, _ = parse_stream(io.BytesIO(text.encode()), schema_hint={"brightness": "temp_a"})
        assert list(records)[0].brightness == 301.0

    def test_case_insensitive_codes(self):
        assert parse_satellite("Suomi-NPP") is Satellite.SUOMI_NPP
        assert parse_satellite("j1") is Satellite.NOAA20
        assert parse_satellite("NOAA-20") is Satellite.NOAA20
        assert parse_acq_time("5") == 5 and parse_acq_time("0005") == 5


class TestApplyFilter:
    @pytest.mark.parametrize(
        "b, t31, conf, expected",
        [
            (305.2, 276.1, Confidence.HIGH, True),
            (300.0, 270.0, Confidence.NOMINAL, True),
            (299.99, 280.0, Confidence.HIGH, False),
            (310.0, 275.0, Confidence.LOW, False),
            (310.0, 269.99, Confidence.HIGH, False),
        ],
    )
    def test_threshold_examples(self, b, t31, conf, expected):
        assert apply_filter(rec(b, t31, conf), FilterCriteria()) is expected

    def test_region(self):
        crit = FilterCriteria(region=BoundingBox(50, 20, 60, 30))
        assert apply_filter(rec(lon=55, lat=25), crit)
        assert not apply_filter(rec(lon=45, lat=25), crit)

    @settings(max_examples=200, deadline=None)
    @given(
        b=st.floats(200, 400),
        t31=st.floats(200, 350),
        conf=st.sampled_from(list(Confidence)),
        lo_b=st.floats(250, 350),
        up_b=st.floats(0, 50),
        lo_t=st.floats(230, 300),
        up_t=st.floats(0, 50),
    )
    def test_monotone_in_thresholds(self, b, t31, conf, lo_b, up_b, lo_t, up_t):
        r = rec(b, t31, conf)
        low = FilterCriteria(lo_b, lo_t)
        high = FilterCriteria(lo_b + up_b, lo_t + up_t)
        assert not (apply_filter(r, high) and not apply_filter(r, low))


# Hand-enumerated fixture: rows 1, 2, 6 and 9 meet every constraint; row 10 lacks a longitude.
TEN_ROWS = f"""{CLASSIC_HEADER}
25.10,55.20,305.2,276.1,h,2021-01-01,0100,N
25.11,55.21,300.0,270.0,n,2021-01-01,0101,N
25.12,55.22,299.99,280.0,h,2021-01-01,0102,N
25.13,55.23,310.0,275.0,l,2021-01-01,0103,N
25.14,55.24,320.0,269.9,n,2021-01-01,0104,N
25.15,55.25,400.0,350.0,H,2021-01-01,0105,N
25.16,55.26,250.0,250.0,l,2021-01-01,0106,N
25.17,55.27,301.0,271.0,l,2021-01-01,0107,N
25.18,55.28,330.0,290.0,N,2021-01-01,0108,N
25.19,,330.0,290.0,h,2021-01-01,0109,N
"""


class TestFilterFile:
    def test_ten_row_fixture(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text(TEN_ROWS)
        records, stats = filter_file(path, FilterCriteria())
        assert [r.acq_time - 60 for r in records] == [0, 1, 5, 8]
        assert stats.rows_passed == 4 and stats.rows_read == 10
        assert stats.rows_parsed == 9 and stats.rows_rejected_parse == 1
        assert stats.rows_failed_each_constraint == Counter(brightness=2, bright_t31=2, confidence=3, region=0)

    def test_header_only(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text(CLASSIC_HEADER + "\n")
        records, stats = filter_file(path, FilterCriteria())
        assert list(records) == [] and stats.rows_read == 0

    def test_all_low_confidence(self, tmp_path):
        path = tmp_path / "l.csv"
        path.write_text(CLASSIC_HEADER + "\n" + "25,55,310,280,l,2021-01-01,0000,N\n" * 3)
        records, stats = filter_file(path, FilterCriteria())
        assert list(records) == []
        assert stats.rows_passed == 0 and stats.rows_failed_each_constraint["confidence"] == 3

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(IngestIOError, match="nope.csv"):
            filter_file(tmp_path / "nope.csv", FilterCriteria())

    def test_schema_error_names_path(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(SchemaError, match="bad.csv"):
            filter_file(path, FilterCriteria())

    def test_matches_in_memory_oracle(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text(TEN_ROWS)
        crit = FilterCriteria()
        everything, _ = parse_stream(io.BytesIO(TEN_ROWS.encode()))
        oracle = [r for r in everything if r.brightness >= 300 and r.bright_t31 >= 270 and r.confidence.code in "nh"]
        records, _ = filter_file(path, crit)
        assert list(records) == oracle


class TestMergeRuns:
    def test_concatenation(self):
        snpp = [rec(sat=Satellite.SUOMI_NPP) for _ in range(2)]
        noaa = [rec(sat=Satellite.NOAA20, lat=26.0) for _ in range(3)]
        merged, counts = merge_satellite_runs([(Satellite.SUOMI_NPP, snpp), (Satellite.NOAA20, noaa)])
        assert list(merged) == snpp + noaa
        assert counts == {Satellite.SUOMI_NPP: 2, Satellite.NOAA20: 3}

    def test_single_run_is_identity(self):
        run = [rec(lat=20.0 + i) for i in range(4)]
        merged, _ = merge_satellite_runs([(Satellite.SUOMI_NPP, run)])
        assert list(merged) == run

    def test_mismatched_tag(self):
        merged, _ = merge_satellite_runs([(Satellite.NOAA20, [rec(sat=Satellite.SUOMI_NPP)])])
        with pytest.raises(ConsistencyError):
            list(merged)


record_strategy = st.builds(
    HotspotRecord,
    latitude=st.floats(-90, 90),
    longitude=st.floats(-180, 180),
    brightness=st.floats(1, 500),
    bright_t31=st.floats(1, 500),
    confidence=st.sampled_from(list(Confidence)),
    acq_date=st.dates(date(2012, 1, 1), date(2030, 12, 31)),
    acq_time=st.integers(0, 24 * 60 - 1),
    satellite=st.sampled_from(list(Satellite)),
    frp=st.none() | st.floats(0, 1000),
    daynight=st.none() | st.sampled_from(list(DayNight)),
)


@settings(max_examples=100, deadline=None)
@given(st.lists(record_strategy, max_size=20))
def test_serialize_parse_round_trip(tmp_path_factory, records):
    path = tmp_path_factory.mktemp("rt") / "out.csv"
    with open(path, "w", newline="", encoding="utf-8") as handle:
        assert write_records(records, handle) == len(records)
    assert read_records(path) == records
