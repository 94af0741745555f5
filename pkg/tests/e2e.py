"""The bundled end-to-end fixture: two FIRMS files, negatives and a toy config."""

from __future__ import annotations

import json
from pathlib import Path

FIXTURE = Path(__file__).parent / "fixtures" / "e2e"

# (site_id, lat, lon, count, first_seen, last_seen), derived by hand from the CSVs
EXPECTED_SITES = [
    ("site-00001", 25.2, 55.3, 1, "2021-07-07", "2021-07-07"),
    ("site-00002", (26.2 + 26.2055) / 2, 50.6, 2, "2021-02-02", "2021-08-08"),
    ("site-00003", 27.0, 49.5, 1, "2021-12-12", "2021-12-12"),
    ("site-00004", 29.1, 48.1, 1, "2021-04-04", "2021-04-04"),
    ("site-00005", 91.5005 / 3, 143.1007 / 3, 3, "2021-03-01", "2021-09-09"),
    ("site-00006", 31.0, 46.0, 1, "2021-11-20", "2021-11-20"),
]


def toy_config(template: str, token: str = "test-token", **overrides) -> dict:
    config = {
        "inputs": {"suomi-npp": [str(FIXTURE / "snpp.csv")], "noaa-20": [str(FIXTURE / "noaa20.csv")]},
        "filter": {"min_brightness": 300, "min_bright_t31": 270, "accepted_confidence": ["n", "h"]},
        "cluster": {"radius_m": 750, "min_detections": 1},
        "imagery": {
            "endpoint_template": template,
            "api_token": token,
            "cache_dir": "cache",
            "rate_per_minute": 6000,
            "backoff_base_ms": 1,
            "zoom": 15,
            "width_px": 128,
            "height_px": 128,
        },
        "dataset": {"negatives_dir": str(FIXTURE / "negatives"), "fractions": [0.5, 0.25, 0.25], "seed": 3,
                    "resolution": [32, 32]},
        "model": {"channels": [4, 8], "seed": 1},
        "train": {"learning_rate": 0.003, "batch_size": 8, "max_epochs": 6, "seed": 2},
        "output_dir": "out",
    }
    config.update(overrides)
    return config


def write_config(directory: Path, template: str, **kw) -> Path:
    path = Path(directory) / "oginfra.json"
    path.write_text(json.dumps(toy_config(template, **kw), indent=2), encoding="utf-8")
    return path
