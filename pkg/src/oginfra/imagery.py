"""Static satellite imagery retrieval with a disk cache, rate limiting and retries."""

from __future__ import annotations

import hashlib
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping

import requests

from oginfra.errors import (
    AuthError,
    BatchFetchError,
    ConfigError,
    FetchError,
    ProtocolError,
    TransientFetchError,
)

logger = logging.getLogger(__name__)

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
TOKEN_ENV_VAR = "OGINFRA_API_TOKEN"
DEFAULT_ENDPOINT = (
    "https://api.mapbox.com/styles/v1/mapbox/{style}/static/"
    "{lon},{lat},{zoom}/{width}x{height}?access_token={token}"
)
RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class _TokenRedactor(logging.Filter):
    """Scrubs registered tokens from records of the HTTP library's loggers."""

    def __init__(self) -> None:
        super().__init__()
        self.tokens: set[str] = set()

    def filter(self, record: logging.LogRecord) -> bool:
        if self.tokens:
            message = record.getMessage()
            for token in self.tokens:
                message = message.replace(token, "***")
            record.msg, record.args = message, None
        return True


_REDACTOR = _TokenRedactor()
logging.getLogger("urllib3.connectionpool").addFilter(_REDACTOR)


@dataclass(frozen=True)
class TileRequest:
    center_lon: float
    center_lat: float
    zoom: int = 15
    width_px: int = 1000
    height_px: int = 1000
    style_id: str = "satellite-v9"

    def __post_init__(self) -> None:
        if not 0 <= self.zoom <= 22:
            raise ConfigError(f"zoom must be in [0, 22], got {self.zoom}")
        for name in ("width_px", "height_px"):
            value = getattr(self, name)
            if not 1 <= value <= 1280:
                raise ConfigError(f"{name} must be in [1, 1280], got {value}")

    @property
    def lon6(self) -> str:
        return f"{self.center_lon:.6f}"

    @property
    def lat6(self) -> str:
        return f"{self.center_lat:.6f}"


@dataclass(frozen=True)
class ClientConfig:
    endpoint_template: str = DEFAULT_ENDPOINT
    api_token: str = ""
    cache_dir: Path = Path("imagery_cache")
    rate_per_minute: float = 250
    max_retries: int = 4
    backoff_base_ms: float = 500
    timeout_s: float = 30.0
    workers: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "cache_dir", Path(self.cache_dir))
        if not self.rate_per_minute > 0:
            raise ConfigError(f"rate_per_minute must be positive, got {self.rate_per_minute}")
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    def __repr__(self) -> str:
        # keep the token out of tracebacks and logs
        return (
            f"ClientConfig(endpoint_template={self.endpoint_template!r}, api_token='***', "
            f"cache_dir={str(self.cache_dir)!r}, rate_per_minute={self.rate_per_minute}, "
            f"max_retries={self.max_retries}, backoff_base_ms={self.backoff_base_ms})"
        )

    def with_env_token(self, environ: Mapping[str, str] = os.environ) -> ClientConfig:
        token = environ.get(TOKEN_ENV_VAR)
        if not token:
            return self
        return replace(self, api_token=token)


@dataclass(frozen=True)
class FetchOutcome:
    bytes: bytes
    from_cache: bool
    attempts: int
    request_key: str

    def __repr__(self) -> str:
        return (
            f"FetchOutcome(from_cache={self.from_cache}, attempts={self.attempts}, "
            f"request_key={self.request_key!r}, {len(self.bytes)} bytes)"
        )


class SystemClock:
    def monotonic(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class TokenBucket:
    """Token bucket with a burst of one: requests are spaced ``60 / rate`` seconds apart.

    A single-token bucket guarantees both that no rolling minute ever holds
    more than ``rate_per_minute`` requests and that N requests span at least
    ``(N - 1) / rate_per_minute`` minutes.
    """

    def __init__(self, rate_per_minute: float, clock=None):
        self.interval = 60.0 / rate_per_minute
        self.clock = clock or SystemClock()
        self._next_slot: float | None = None
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a slot is available; returns the slot time."""
        with self._lock:
            now = self.clock.monotonic()
            slot = now if self._next_slot is None else max(now, self._next_slot)
            self._next_slot = slot + self.interval
        self.clock.sleep(slot - now)
        return slot


def request_key(req: TileRequest) -> str:
    """SHA-256 of ``style|lon6|lat6|zoom|WxH``."""
    canonical = f"{req.style_id}|{req.lon6}|{req.lat6}|{req.zoom}|{req.width_px}x{req.height_px}"
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def cache_path(cache_dir: Path, key: str) -> Path:
    return Path(cache_dir) / key[:2] / f"{key}.png"


def _read_cached(path: Path) -> bytes | None:
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        return None
    if not data.startswith(PNG_MAGIC):
        logger.warning("ignoring corrupt cache entry %s", path.name)
        return None
    return data


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class ImageryClient:
    """Fetches static images through a shared rate limiter and cache.

    ``session`` only needs a ``get(url, timeout=...)`` method returning an
    object with ``status_code`` and ``content``; ``clock`` needs
    ``monotonic()`` and ``sleep(seconds)``.
    """

    def __init__(self, cfg: ClientConfig, session=None, clock=None):
        self.cfg = cfg
        self.clock = clock or SystemClock()
        self.session = session or requests.Session()
        self.limiter = TokenBucket(cfg.rate_per_minute, self.clock)
        self._key_locks: dict[str, threading.Lock] = {}
        self._key_locks_guard = threading.Lock()
        self._count_lock = threading.Lock()
        self.network_requests = 0
        if cfg.api_token:
            _REDACTOR.tokens.add(cfg.api_token)

    def _lock_for(self, key: str) -> threading.Lock:
        with self._key_locks_guard:
            return self._key_locks.setdefault(key, threading.Lock())

    def _url(self, req: TileRequest) -> str:
        return self.cfg.endpoint_template.format(
            lon=req.lon6,
            lat=req.lat6,
            zoom=req.zoom,
            width=req.width_px,
            height=req.height_px,
            style=req.style_id,
            token=self.cfg.api_token,
        )

    def _redact(self, text: str) -> str:
        return text.replace(self.cfg.api_token, "***") if self.cfg.api_token else text

    def fetch_image(self, req: TileRequest) -> FetchOutcome:
        if not self.cfg.api_token:
            raise ConfigError(f"no API token configured (set {TOKEN_ENV_VAR} or api_token)")
        key = request_key(req)
        path = cache_path(self.cfg.cache_dir, key)
        with self._lock_for(key):
            cached = _read_cached(path)
            if cached is not None:
                return FetchOutcome(cached, True, 0, key)
            data, attempts = self._download(req)
            _write_atomic(path, data)
            return FetchOutcome(data, False, attempts, key)

    def _download(self, req: TileRequest) -> tuple[bytes, int]:
        url = self._url(req)
        safe_url = self._redact(url)
        max_attempts = self.cfg.max_retries + 1
        last_problem = ""
        for attempt in range(max_attempts):
            if attempt:
                delay_ms = self.cfg.backoff_base_ms * 2 ** (attempt - 1)
                logger.info("retrying %s in %.0f ms after %s", safe_url, delay_ms, last_problem)
                self.clock.sleep(delay_ms / 1000.0)
            self.limiter.acquire()
            with self._count_lock:
                self.network_requests += 1
            logger.debug("GET %s (attempt %d)", safe_url, attempt + 1)
            try:
                response = self.session.get(url, timeout=self.cfg.timeout_s)
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_problem = self._redact(type(exc).__name__)
                continue
            status = response.status_code
            if status in (401, 403):
                raise AuthError(f"endpoint rejected credentials with HTTP {status} for {safe_url}")
            if status in RETRYABLE_STATUS:
                last_problem = f"HTTP {status}"
                continue
            if status != 200:
                raise FetchError(f"unexpected HTTP {status} for {safe_url}")
            body = response.content
            if not body.startswith(PNG_MAGIC):
                raise ProtocolError(f"response for {safe_url} is not a PNG")
            return body, attempt + 1
        raise TransientFetchError(
            f"gave up on {safe_url} after {max_attempts} attempts (last: {last_problem})", attempts=max_attempts
        )

    def fetch_batch(
        self,
        sites: Iterable,
        zoom: int = 15,
        size: tuple[int, int] = (1000, 1000),
        style_id: str = "satellite-v9",
    ) -> dict[str, FetchOutcome | FetchError]:
        """Fetch one image centred on each site's centroid.

        Per-site failures are returned as exception instances in the mapping.
        Raises ``BatchFetchError`` only when every site fails.
        """
        sites = list(sites)
        if not sites:
            raise ConfigError("fetch_batch needs at least one site")
        if not self.cfg.api_token:
            raise ConfigError(f"no API token configured (set {TOKEN_ENV_VAR} or api_token)")
        width, height = size
        requests_by_site = {
            s.site_id: TileRequest(s.centroid_lon, s.centroid_lat, zoom, width, height, style_id) for s in sites
        }

        def one(site_id: str) -> FetchOutcome | FetchError:
            try:
                return self.fetch_image(requests_by_site[site_id])
            except (AuthError, ConfigError):
                raise
            except FetchError as exc:
                logger.warning("site %s failed: %s", site_id, exc)
                return exc

        with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
            results = dict(zip(requests_by_site, pool.map(one, requests_by_site)))
        failures = {k: v for k, v in results.items() if isinstance(v, FetchError)}
        if len(failures) == len(results):
            raise BatchFetchError(f"all {len(results)} sites failed", failures)
        return results


def fetch_image(req: TileRequest, cfg: ClientConfig) -> FetchOutcome:
    return ImageryClient(cfg).fetch_image(req)


def fetch_batch(sites, cfg: ClientConfig, zoom: int = 15, size: tuple[int, int] = (1000, 1000)):
    return ImageryClient(cfg).fetch_batch(sites, zoom, size)
