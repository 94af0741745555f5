"""Stage-by-stage orchestration with file handoffs and a run ledger.

Stages read their predecessor's artifacts from the output directory, so each
one can be re-run on its own:

    ingest  -> hotspots.csv, ingest_stats.json
    cluster -> sites.jsonl
    fetch   -> fetch_index.json (images live in the imagery cache)
    dataset -> dataset/manifest.jsonl, dataset/balance.json, dataset/<split>/<label>/*.png
    train   -> model.ckpt, history.csv
    eval    -> eval_report.json, eval_report.txt
    export-geojson -> sites.geojson
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Iterator

from oginfra import cluster as geo
from oginfra import firms
from oginfra.cnn import checkpoint
from oginfra.cnn.network import build_classifier
from oginfra.cnn.train import TrainConfig, TrainingData, predict, train, write_history
from oginfra.dataset import DatasetManifest, build_dataset, class_balance_report, load_split
from oginfra.errors import ConfigError, FetchError, PreconditionError
from oginfra.imagery import ClientConfig, ImageryClient, cache_path
from oginfra.metrics import evaluate

logger = logging.getLogger(__name__)

HOTSPOTS = "hotspots.csv"
INGEST_STATS = "ingest_stats.json"
CATALOG = "sites.jsonl"
FETCH_INDEX = "fetch_index.json"
DATASET_DIR = "dataset"
MANIFEST = "dataset/manifest.jsonl"
BALANCE = "dataset/balance.json"
CHECKPOINT = "model.ckpt"
HISTORY = "history.csv"
EVAL_JSON = "eval_report.json"
EVAL_TXT = "eval_report.txt"
GEOJSON = "sites.geojson"
LEDGER = "run_ledger.jsonl"
LOCK = ".oginfra.lock"


@dataclass(frozen=True)
class ImagerySettings:
    client: ClientConfig
    zoom: int = 15
    width_px: int = 1000
    height_px: int = 1000
    style_id: str = "satellite-v9"


@dataclass(frozen=True)
class DatasetSettings:
    negatives_dir: Path | None = None
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0
    resolution: tuple[int, int] = (64, 64)


@dataclass(frozen=True)
class ModelSettings:
    channels: tuple[int, ...] = (8, 16, 16)
    residual: bool = False
    seed: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    inputs: dict[firms.Satellite, tuple[Path, ...]]
    filter: firms.FilterCriteria = field(default_factory=firms.FilterCriteria)
    cluster: geo.ClusterParams = field(default_factory=geo.ClusterParams)
    imagery: ImagerySettings = field(default_factory=lambda: ImagerySettings(ClientConfig()))
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    threshold: float = 0.5
    output_dir: Path = Path("out")

    def semantic_dict(self) -> dict[str, Any]:
        """Every setting that affects outputs; the API token is deliberately left out."""
        crit = self.filter
        client = self.imagery.client
        return {
            "inputs": {s.value: [str(p) for p in self.inputs.get(s, ())] for s in firms.Satellite},
            "filter": {
                "min_brightness": float(crit.min_brightness),
                "min_bright_t31": float(crit.min_bright_t31),
                "accepted_confidence": sorted(c.value for c in crit.accepted_confidence),
                "region": None if crit.region is None else [float(v) for v in asdict(crit.region).values()],
            },
            "cluster": {"radius_m": float(self.cluster.radius_m), "min_detections": self.cluster.min_detections},
            "imagery": {
                "endpoint_template": client.endpoint_template.replace("{token}", ""),
                "cache_dir": str(client.cache_dir),
                "rate_per_minute": float(client.rate_per_minute),
                "max_retries": client.max_retries,
                "backoff_base_ms": float(client.backoff_base_ms),
                "timeout_s": float(client.timeout_s),
                "workers": client.workers,
                "zoom": self.imagery.zoom,
                "width_px": self.imagery.width_px,
                "height_px": self.imagery.height_px,
                "style_id": self.imagery.style_id,
            },
            "dataset": {
                "negatives_dir": None if self.dataset.negatives_dir is None else str(self.dataset.negatives_dir),
                "fractions": [float(f) for f in self.dataset.fractions],
                "seed": self.dataset.seed,
                "resolution": list(self.dataset.resolution),
            },
            "model": {"channels": list(self.model.channels), "residual": self.model.residual, "seed": self.model.seed},
            "train": {f.name: getattr(self.train, f.name) for f in fields(self.train)},
            "threshold": float(self.threshold),
            "output_dir": str(self.output_dir),
        }

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_TOP_KEYS = {"inputs", "filter", "cluster", "imagery", "dataset", "model", "train", "eval", "output_dir"}


def _section(raw: dict, name: str, allowed: set[str]) -> dict:
    section = raw.get(name) or {}
    if not isinstance(section, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    return section


def _confidence(token) -> firms.Confidence:
    token = str(token).strip().lower()
    if token in {c.value for c in firms.Confidence}:
        return firms.Confidence(token)
    return firms.parse_confidence(token)


def parse_config(raw: dict, base_dir: Path, out_override: str | Path | None = None, environ=os.environ) -> PipelineConfig:
    """Validate a config dict as a whole. Relative paths resolve against ``base_dir``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")

    def resolve(p) -> Path:
        p = Path(p).expanduser()
        return p if p.is_absolute() else (base_dir / p)

    raw_inputs = raw.get("inputs")
    if not isinstance(raw_inputs, dict) or not raw_inputs:
        raise ConfigError("'inputs' must map satellite names to CSV paths")
    inputs: dict[firms.Satellite, tuple[Path, ...]] = {}
    for name, paths in raw_inputs.items():
        try:
            sat = firms.parse_satellite(name)
        except ValueError as exc:
            raise ConfigError(f"inputs: {exc}") from None
        if isinstance(paths, str):
            paths = [paths]
        resolved = tuple(resolve(p) for p in paths)
        for p in resolved:
            if not p.is_file():
                raise ConfigError(f"input file not found: {p}")
        inputs[sat] = inputs.get(sat, ()) + resolved

    f = _section(raw, "filter", {"min_brightness", "min_bright_t31", "accepted_confidence", "region"})
    try:
        confidence = frozenset(_confidence(c) for c in f.get("accepted_confidence", ["n", "h"]))
    except ValueError as exc:
        raise ConfigError(f"filter.accepted_confidence: {exc}") from None
    region = f.get("region")
    criteria = firms.FilterCriteria(
        min_brightness=float(f.get("min_brightness", 300.0)),
        min_bright_t31=float(f.get("min_bright_t31", 270.0)),
        accepted_confidence=confidence,
        region=None if region is None else firms.BoundingBox(*map(float, region)),
    )

    c = _section(raw, "cluster", {"radius_m", "min_detections"})
    cluster_params = geo.ClusterParams(float(c.get("radius_m", 750.0)), int(c.get("min_detections", 1)))

    i = _section(
        raw,
        "imagery",
        {"endpoint_template", "api_token", "cache_dir", "rate_per_minute", "max_retries", "backoff_base_ms",
         "timeout_s", "workers", "zoom", "width_px", "height_px", "style_id"},
    )
    client_kwargs = {k: i[k] for k in ("endpoint_template", "api_token", "rate_per_minute", "max_retries",
                                        "backoff_base_ms", "timeout_s", "workers") if k in i}
    client = ClientConfig(cache_dir=resolve(i.get("cache_dir", "imagery_cache")), **client_kwargs).with_env_token(environ)
    imagery = ImagerySettings(
        client, int(i.get("zoom", 15)), int(i.get("width_px", 1000)), int(i.get("height_px", 1000)),
        str(i.get("style_id", "satellite-v9")),
    )

    d = _section(raw, "dataset", {"negatives_dir", "fractions", "seed", "resolution"})
    negatives_dir = resolve(d["negatives_dir"]) if d.get("negatives_dir") else None
    if negatives_dir is not None and not negatives_dir.is_dir():
        raise ConfigError(f"negatives directory not found: {negatives_dir}")
    fractions = tuple(float(x) for x in d.get("fractions", (0.7, 0.15, 0.15)))
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"dataset.fractions must be three non-negative numbers summing to 1, got {fractions}")
    resolution = tuple(int(x) for x in d.get("resolution", (64, 64)))
    dataset = DatasetSettings(negatives_dir, fractions, int(d.get("seed", 0)), resolution)

    m = _section(raw, "model", {"channels", "residual", "seed"})
    model = ModelSettings(tuple(int(x) for x in m.get("channels", (8, 16, 16))), bool(m.get("residual", False)),
                          int(m.get("seed", 0)))

    t = _section(raw, "train", {f.name for f in fields(TrainConfig)})
    train_cfg = TrainConfig(**t)

    e = _section(raw, "eval", {"threshold"})
    out = resolve(out_override) if out_override is not None else resolve(raw.get("output_dir", "out"))
    return PipelineConfig(inputs, criteria, cluster_params, imagery, dataset, model, train_cfg,
                          float(e.get("threshold", 0.5)), out)


def load_config(path: str | Path, out_override: str | Path | None = None, environ=os.environ) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    try:
        return parse_config(raw, path.parent.resolve(), out_override, environ)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class LedgerEntry:
    stage: str
    inputs: list[str]
    outputs: list[str]
    counts: dict[str, Any]
    wall_time_s: float
    config_hash: str


@dataclass
class RunLedger:
    path: Path
    entries: list[LedgerEntry] = field(default_factory=list)

    def append(self, entry: LedgerEntry) -> None:
        self.entries.append(entry)
        with open(self.path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(asdict(entry), sort_keys=True) + "\n")

    def reset(self) -> None:
        self.entries.clear()
        self.path.write_text("", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> RunLedger:
        path = Path(path)
        entries = []
        if path.exists():
            for line in path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    entries.append(LedgerEntry(**json.loads(line)))
        return cls(path, entries)


class LockError(ConfigError):
    pass


@contextmanager
def output_lock(out_dir: Path) -> Iterator[None]:
    """Exclusive lock file so two runs never share one output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out_dir} is locked by another run (remove {lock} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@dataclass
class StageResult:
    inputs: list[Path]
    outputs: list[Path]
    counts: dict[str, Any]


class Pipeline:
    """Runs stages against one validated config and output directory."""

    def __init__(self, config: PipelineConfig, session=None, clock=None):
        self.config = config
        self.out = Path(config.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.ledger = RunLedger.read(self.out / LEDGER)
        self._session = session
        self._clock = clock

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise PreconditionError(f"missing {p}; run `oginfra {producer}` first")
        return p

    def _rel(self, p: Path) -> str:
        try:
            return str(Path(p).relative_to(self.out))
        except ValueError:
            return str(p)

    def run_stage(self, name: str, fn: Callable[[], StageResult]) -> LedgerEntry:
        logger.info("stage %s: start", name)
        start = time.perf_counter()
        result = fn()
        entry = LedgerEntry(
            stage=name,
            inputs=[self._rel(p) for p in result.inputs],
            outputs=[self._rel(p) for p in result.outputs],
            counts=result.counts,
            wall_time_s=round(time.perf_counter() - start, 6),
            config_hash=self.config.config_hash,
        )
        self.ledger.append(entry)
        logger.info("stage %s: done in %.2fs %s", name, entry.wall_time_s, result.counts)
        return entry

    # -- stages --------------------------------------------------------------

    def ingest(self) -> StageResult:
        cfg = self.config
        total = firms.FilterStats()
        used: list[Path] = []
        per_file = []

        def runs():
            nonlocal total
            for sat in firms.Satellite:
                for path in cfg.inputs.get(sat, ()):
                    used.append(path)
                    records, stats = firms.filter_file(path, cfg.filter)
                    yield sat, records
                    total = total.merge(stats)
                    per_file.append({"path": str(path), "satellite": sat.value, **stats.to_dict()})

        merged, counts = firms.merge_satellite_runs(runs())
        out_csv = self.path(HOTSPOTS)
        tmp = out_csv.with_suffix(".csv.part")
        with open(tmp, "w", encoding="utf-8", newline="") as handle:
            written = firms.write_records(merged, handle)
        os.replace(tmp, out_csv)
        stats_doc = {"total": total.to_dict(), "files": per_file}
        stats_path = self.path(INGEST_STATS)
        stats_path.write_text(json.dumps(stats_doc, indent=2) + "\n", encoding="utf-8")
        return StageResult(used, [out_csv, stats_path], {"rows_read": total.rows_read, "rows_passed": written,
                                                         "per_satellite": {s.value: counts.get(s, 0) for s in firms.Satellite}})

    def cluster(self) -> StageResult:
        src = self.require(HOTSPOTS, "ingest")
        records = firms.read_records(src)
        sites = geo.cluster_hotspots(records, self.config.cluster)
        sites = geo.rank_sites(sites, self.config.cluster.min_detections)
        out = self.path(CATALOG)
        with open(out, "w", encoding="utf-8") as handle:
            n = geo.write_catalog(sites, handle)
        return StageResult([src], [out], {"records": len(records), "sites": n})

    def fetch(self) -> StageResult:
        src = self.require(CATALOG, "cluster")
        sites = geo.read_catalog(src)
        index_path = self.path(FETCH_INDEX)
        img = self.config.imagery
        entries = []
        counts = {"sites": len(sites), "network": 0, "cached": 0, "failed": 0}
        if sites:
            client = ImageryClient(img.client, session=self._session, clock=self._clock)
            results = client.fetch_batch(sites, img.zoom, (img.width_px, img.height_px), img.style_id)
            for site in sites:
                res = results[site.site_id]
                if isinstance(res, FetchError):
                    counts["failed"] += 1
                    entries.append({"site_id": site.site_id, "status": "error", "error": str(res)})
                    continue
                counts["cached" if res.from_cache else "network"] += 1
                entries.append({
                    "site_id": site.site_id,
                    "status": "ok",
                    "request_key": res.request_key,
                    "image": str(cache_path(img.client.cache_dir, res.request_key)),
                })
            counts["requests"] = client.network_requests
        index_path.write_text(json.dumps({"sites": entries}, indent=2) + "\n", encoding="utf-8")
        outputs = [index_path] + [Path(e["image"]) for e in entries if e["status"] == "ok"]
        return StageResult([src], outputs, counts)

    def dataset(self) -> StageResult:
        src = self.require(FETCH_INDEX, "fetch")
        ds = self.config.dataset
        if ds.negatives_dir is None:
            raise ConfigError("dataset.negatives_dir is required for the dataset stage")
        index = json.loads(src.read_text(encoding="utf-8"))
        positives = {e["site_id"]: Path(e["image"]) for e in index["sites"] if e["status"] == "ok"}
        for sid, p in positives.items():
            if not p.exists():
                raise PreconditionError(f"cached image for {sid} is missing ({p}); run `oginfra fetch` again")
        negatives = {p.stem: p for p in sorted(ds.negatives_dir.glob("*.png"))}
        if not positives:
            raise PreconditionError("no fetched positive images; run `oginfra fetch` first")
        if not negatives:
            raise ConfigError(f"no negative PNGs found in {ds.negatives_dir}")
        root = self.path(DATASET_DIR)
        if root.exists():
            shutil.rmtree(root)
        manifest = build_dataset(positives, negatives, ds.fractions, ds.seed, root=root, size=ds.resolution)
        manifest_path = self.path(MANIFEST)
        with open(manifest_path, "w", encoding="utf-8") as handle:
            manifest.write(handle)
        balance = class_balance_report(manifest)
        balance_path = self.path(BALANCE)
        balance_path.write_text(json.dumps(balance, indent=2) + "\n", encoding="utf-8")
        outputs = [manifest_path, balance_path] + [root / e.path for e in manifest.entries]
        inputs = [src, *positives.values(), *negatives.values()]
        return StageResult(inputs, outputs, {"entries": len(manifest.entries), "positive_sources": len(positives),
                                             "negative_sources": len(negatives)})

    def train(self) -> StageResult:
        manifest_path = self.require(MANIFEST, "dataset")
        manifest = DatasetManifest.read(manifest_path)
        data = TrainingData.from_manifest(manifest)
        if len(data.x_train) == 0 or len(data.x_val) == 0:
            raise PreconditionError("train and val splits must be non-empty; adjust dataset.fractions or add sources")
        m = self.config.model
        model = build_classifier(data.x_train.shape[1:], m.channels, m.residual, m.seed)
        model, history = train(model, data, self.config.train)
        ckpt = self.path(CHECKPOINT)
        checkpoint.save(model, ckpt)
        hist = self.path(HISTORY)
        with open(hist, "w", encoding="utf-8", newline="") as handle:
            write_history(history, handle)
        last = history[-1]
        return StageResult([manifest_path], [ckpt, hist], {"epochs": len(history), "best_epoch": last.best_epoch,
                                                          "stopped_early": last.stopped_early,
                                                          "parameters": model.n_parameters()})

    def eval(self) -> StageResult:
        ckpt = self.require(CHECKPOINT, "train")
        manifest_path = self.require(MANIFEST, "dataset")
        manifest = DatasetManifest.read(manifest_path)
        x, y = load_split(manifest, "test")
        if len(y) == 0:
            raise PreconditionError("test split is empty; adjust dataset.fractions")
        model = checkpoint.load(ckpt)
        report = evaluate(predict(model, x), y, self.config.threshold)
        js, txt = self.path(EVAL_JSON), self.path(EVAL_TXT)
        js.write_text(report.to_json(), encoding="utf-8")
        txt.write_text(report.render_table("cnn"), encoding="utf-8")
        return StageResult([ckpt, manifest_path], [js, txt], {"test_samples": int(len(y)),
                                                              "accuracy": report.accuracy})

    def export_geojson(self, catalog: Path | None = None, dest: Path | None = None) -> StageResult:
        src = Path(catalog) if catalog is not None else self.require(CATALOG, "cluster")
        if not src.exists():
            raise PreconditionError(f"missing catalog {src}; run `oginfra cluster` first")
        out = Path(dest) if dest is not None else self.path(GEOJSON)
        collection = sites_to_geojson(geo.read_catalog(src))
        out.write_text(json.dumps(collection, indent=2) + "\n", encoding="utf-8")
        return StageResult([src], [out], {"features": len(collection["features"])})

    STAGES = ("ingest", "cluster", "fetch", "dataset", "train", "eval", "export-geojson")

    def run(self, stage: str) -> LedgerEntry:
        fn = {
            "ingest": self.ingest,
            "cluster": self.cluster,
            "fetch": self.fetch,
            "dataset": self.dataset,
            "train": self.train,
            "eval": self.eval,
            "export-geojson": self.export_geojson,
        }[stage]
        return self.run_stage(stage, fn)

    def run_all(self) -> RunLedger:
        """Run every stage in order, stopping at the first failure."""
        if not self.config.imagery.client.api_token:
            raise ConfigError("no API token configured (set OGINFRA_API_TOKEN or imagery.api_token)")
        self.ledger.reset()
        for stage in self.STAGES:
            try:
                self.run(stage)
            except Exception as exc:
                exc.stage = stage
                raise
        return self.ledger


def sites_to_geojson(sites) -> dict:
    features = [
        {
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [s.centroid_lon, s.centroid_lat]},
            "properties": {
                "site_id": s.site_id,
                "count": s.detection_count,
                "first_seen": s.first_seen.isoformat(),
                "last_seen": s.last_seen.isoformat(),
            },
        }
        for s in sorted(sites, key=lambda s: s.site_id)
    ]
    return {"type": "FeatureCollection", "features": features}
