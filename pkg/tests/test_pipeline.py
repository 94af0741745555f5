from __future__ import annotations

import json
import os

import pytest

from oginfra.cluster import read_catalog
from oginfra.errors import AuthError, CatalogError, ConfigError, PreconditionError
from oginfra.pipeline import (
    LEDGER,
    LockError,
    Pipeline,
    RunLedger,
    load_config,
    output_lock,
    parse_config,
    sites_to_geojson,
)
from e2e import EXPECTED_SITES, FIXTURE, toy_config, write_config

STAGES = ["ingest", "cluster", "fetch", "dataset", "train", "eval", "export-geojson"]


@pytest.fixture
def pipeline(stub, tmp_path):
    return Pipeline(load_config(write_config(tmp_path, stub.template)))


class TestConfig:
    def test_relative_paths_resolve_against_config_dir(self, stub, tmp_path):
        cfg = load_config(write_config(tmp_path, stub.template))
        assert cfg.output_dir == tmp_path / "out"
        assert cfg.imagery.client.cache_dir == tmp_path / "cache"

    def test_out_override(self, stub, tmp_path):
        cfg = load_config(write_config(tmp_path, stub.template), out_override=tmp_path / "elsewhere")
        assert cfg.output_dir == tmp_path / "elsewhere"

    def test_hash_ignores_formatting_key_order_and_token(self, stub, tmp_path):
        raw = toy_config(stub.template)
        a = parse_config(raw, tmp_path)
        reordered = json.loads(json.dumps(dict(reversed(list(raw.items())))))
        reordered["imagery"]["api_token"] = "other"
        assert parse_config(reordered, tmp_path).config_hash == a.config_hash
        (tmp_path / "spaced.json").write_text(json.dumps(raw, indent=8))
        assert load_config(tmp_path / "spaced.json").config_hash == a.config_hash

    def test_hash_tracks_semantic_changes(self, stub, tmp_path):
        raw = toy_config(stub.template)
        changed = toy_config(stub.template, cluster={"radius_m": 500})
        assert parse_config(raw, tmp_path).config_hash != parse_config(changed, tmp_path).config_hash

    def test_token_never_in_semantic_dict(self, stub, tmp_path):
        cfg = parse_config(toy_config(stub.template, token="sekrit-123"), tmp_path)
        assert "sekrit-123" not in json.dumps(cfg.semantic_dict())

    def test_env_token_wins(self, stub, tmp_path):
        cfg = parse_config(toy_config(stub.template), tmp_path, environ={"OGINFRA_API_TOKEN": "env"})
        assert cfg.imagery.client.api_token == "env"

    @pytest.mark.parametrize(
        "overrides, match",
        [
            ({"bogus": 1}, "unknown top-level"),
            ({"cluster": {"radius": 3}}, "unknown keys in 'cluster'"),
            ({"inputs": {"suomi-npp": ["missing.csv"]}}, "missing.csv"),
            ({"inputs": {"landsat": []}}, "inputs"),
            ({"dataset": {"fractions": [0.5, 0.5, 0.5]}}, "fractions"),
            ({"dataset": {"negatives_dir": "nowhere"}}, "nowhere"),
        ],
    )
    def test_rejects_bad_config(self, stub, tmp_path, overrides, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(toy_config(stub.template, **overrides), tmp_path)

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{nope")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(tmp_path / "c.json")
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.json")


class TestStages:
    def test_ingest_counts_per_satellite(self, pipeline):
        entry = pipeline.run("ingest")
        assert entry.counts["per_satellite"] == {"SuomiNPP": 5, "NOAA20": 5}
        assert entry.counts["rows_read"] == 16
        stats = json.loads(pipeline.path("ingest_stats.json").read_text())
        assert [f["rows_passed"] for f in stats["files"]] == [5, 5]

    def test_cluster_produces_expected_catalog(self, pipeline):
        pipeline.run("ingest")
        assert pipeline.run("cluster").counts == {"records": 10, "sites": 6}
        sites = read_catalog(pipeline.path("sites.jsonl"))
        assert [(s.site_id, s.detection_count) for s in sites] == [(e[0], e[3]) for e in EXPECTED_SITES]

    @pytest.mark.parametrize(
        "stage, artifact, producer",
        [("cluster", "hotspots.csv", "ingest"), ("fetch", "sites.jsonl", "cluster"),
         ("dataset", "fetch_index.json", "fetch"), ("train", "manifest.jsonl", "dataset"),
         ("eval", "model.ckpt", "train"), ("export-geojson", "sites.jsonl", "cluster")],
    )
    def test_missing_predecessor(self, pipeline, stage, artifact, producer):
        with pytest.raises(PreconditionError, match=rf"{artifact}.*oginfra {producer}"):
            pipeline.run(stage)

    def test_fetch_twice_uses_cache_only(self, stub, pipeline):
        for stage in ("ingest", "cluster", "fetch"):
            pipeline.run(stage)
        first = pipeline.path("fetch_index.json").read_bytes()
        stub.hits.clear()
        entry = pipeline.run("fetch")
        assert stub.hits == [] and entry.counts["requests"] == 0 and entry.counts["cached"] == 6
        assert pipeline.path("fetch_index.json").read_bytes() == first

    def test_train_then_eval_reports_four_metrics(self, pipeline):
        for stage in STAGES[:6]:
            pipeline.run(stage)
        report = json.loads(pipeline.path("eval_report.json").read_text())
        assert {"loss", "accuracy", "auroc", "f1"} <= set(report)
        header = pipeline.path("eval_report.txt").read_text().splitlines()[0].split()
        assert header == ["Model", "Loss", "Accuracy", "AUROC", "F1", "Score"]

    def test_empty_catalog_fetches_nothing(self, stub, tmp_path):
        strict = toy_config(stub.template, filter={"min_brightness": 1000})
        p = Pipeline(parse_config(strict, tmp_path))
        for stage in ("ingest", "cluster", "fetch", "export-geojson"):
            p.run(stage)
        assert stub.hits == []
        assert json.loads(p.path("sites.geojson").read_text()) == {"type": "FeatureCollection", "features": []}
        with pytest.raises(PreconditionError, match="no fetched positive"):
            p.run("dataset")


class TestRunAll:
    def test_ledger_has_seven_entries_with_hash(self, pipeline):
        ledger = pipeline.run_all()
        assert [e.stage for e in ledger.entries] == STAGES
        assert {e.config_hash for e in ledger.entries} == {pipeline.config.config_hash}
        assert RunLedger.read(pipeline.path(LEDGER)).entries == ledger.entries

    def test_invalid_token_halts_at_fetch(self, stub, tmp_path):
        p = Pipeline(parse_config(toy_config(stub.template, token="wrong"), tmp_path))
        with pytest.raises(AuthError) as info:
            p.run_all()
        assert info.value.stage == "fetch"
        assert [e.stage for e in RunLedger.read(p.path(LEDGER)).entries] == ["ingest", "cluster"]

    def test_missing_token_fails_before_any_stage(self, stub, tmp_path):
        p = Pipeline(parse_config(toy_config(stub.template, token=""), tmp_path, environ={}))
        with pytest.raises(ConfigError, match="API token"):
            p.run_all()
        assert not p.path(LEDGER).exists() or p.path(LEDGER).read_text() == ""


class TestLock:
    def test_second_holder_is_refused(self, tmp_path):
        with output_lock(tmp_path):
            with pytest.raises(LockError, match="locked"):
                with output_lock(tmp_path):
                    pass
        assert not (tmp_path / ".oginfra.lock").exists()

    def test_released_on_error(self, tmp_path):
        with pytest.raises(RuntimeError):
            with output_lock(tmp_path):
                raise RuntimeError
        with output_lock(tmp_path):
            assert os.path.exists(tmp_path / ".oginfra.lock")


def test_geojson_lon_lat_order(pipeline):
    pipeline.run("ingest")
    pipeline.run("cluster")
    collection = sites_to_geojson(read_catalog(pipeline.path("sites.jsonl")))
    first = collection["features"][0]
    assert first["geometry"] == {"type": "Point", "coordinates": [55.3, 25.2]}
    assert first["properties"] == {"site_id": "site-00001", "count": 1, "first_seen": "2021-07-07", "last_seen": "2021-07-07"}


def test_fixture_files_exist():
    assert (FIXTURE / "snpp.csv").is_file() and len(list((FIXTURE / "negatives").glob("*.png"))) == 6


SMALL = FIXTURE.parent / "ingest"


@pytest.fixture
def small(stub, tmp_path):
    raw = toy_config(stub.template, inputs={"suomi-npp": [str(SMALL / "snpp.csv")], "noaa-20": [str(SMALL / "noaa20.csv")]})
    return Pipeline(parse_config(raw, tmp_path))


class TestSmallFixture:
    def test_two_plus_three_rows(self, small):
        entry = small.run("ingest")
        assert entry.counts["per_satellite"] == {"SuomiNPP": 2, "NOAA20": 3}
        assert small.path("hotspots.csv").read_text().count("\n") == 1 + 5

    def test_cluster_hand_computed_sites(self, small):
        small.run("ingest")
        small.run("cluster")
        sites = read_catalog(small.path("sites.jsonl"))
        got = [(s.site_id, s.centroid_lat, s.centroid_lon, s.detection_count) for s in sites]
        # 24.0/54.0, 24.003/54.0 and 24.0/54.004 chain at 334 m and 406 m; the 26.0 pair is 999 m apart
        assert got == [
            ("site-00001", pytest.approx(72.003 / 3, abs=1e-12), pytest.approx(162.004 / 3, abs=1e-12), 3),
            ("site-00002", 26.0, 52.0, 1),
            ("site-00003", 26.0, 52.01, 1),
        ]


class TestIdempotence:
    @pytest.fixture
    def done(self, pipeline):
        pipeline.run_all()
        return pipeline

    def snapshot(self, out):
        return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*"))
                if p.is_file() and p.name != LEDGER}

    @pytest.mark.parametrize("stage", STAGES)
    def test_rerunning_a_stage_is_byte_identical(self, done, stub, stage):
        before = self.snapshot(done.out)
        hits = len(stub.hits)
        done.run(stage)
        assert self.snapshot(done.out) == before
        assert len(stub.hits) == hits

    def test_ledger_lists_every_written_file(self, done):
        listed = set()
        for entry in done.ledger.entries:
            listed.update(entry.outputs)
        written = set(self.snapshot(done.out))
        assert written <= listed
        cache = done.config.imagery.client.cache_dir
        assert {p.as_posix() for p in cache.rglob("*.png")} <= listed


def test_malformed_catalog_names_the_line(pipeline):
    pipeline.run("ingest")
    pipeline.run("cluster")
    first = pipeline.path("sites.jsonl").read_text().splitlines()[0]
    pipeline.path("sites.jsonl").write_text(first + "\nnot json\n")
    with pytest.raises(CatalogError, match=r"sites\.jsonl:2: malformed"):
        pipeline.export_geojson()
