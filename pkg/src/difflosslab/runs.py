"""Run directories: layout, manifest and the advisory lock."""

from __future__ import annotations

import csv
import datetime as _dt
import fcntl
import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .config import ExperimentConfig, dump_config, load_config
from .exceptions import ConfigError, RunLockedError

MANIFEST_NAME = "manifest.json"
CONFIG_NAME = "config.yaml"
LOCK_NAME = ".lock"
MANIFEST_FORMAT = 1
OUT_DIR_ENV = "DIFFLOSS_OUT_DIR"


def code_version() -> str:
    from . import __version__

    return __version__


def output_root(cfg: ExperimentConfig | None = None) -> Path:
    """``cfg.out_dir`` if set, else ``$DIFFLOSS_OUT_DIR``, else ``./runs``."""
    if cfg is not None and cfg.out_dir:
        return Path(cfg.out_dir)
    return Path(os.environ.get(OUT_DIR_ENV) or "runs")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


@dataclass
class RunManifest:
    run_id: str
    config_sha256: str
    code_version: str
    seed: int
    command: str
    started_at: str
    finished_at: str | None = None
    status: str = "running"
    artifacts: dict = field(default_factory=dict)
    format_version: int = MANIFEST_FORMAT


class RunDir:
    """One ``out_dir/run_id`` directory held under an exclusive advisory lock.

    Use as a context manager: entering writes the config copy and a
    ``running`` manifest; leaving finalizes the manifest and releases the lock.
    """

    def __init__(self, cfg: ExperimentConfig, command: str, root=None):
        self.cfg = cfg
        self.command = command
        self.path = Path(root) / cfg.run_id if root is not None else output_root(cfg) / cfg.run_id
        self._lock_fh = None
        self.manifest: RunManifest | None = None

    def __enter__(self) -> "RunDir":
        self.path.mkdir(parents=True, exist_ok=True)
        self._lock_fh = open(self.path / LOCK_NAME, "w")
        try:
            fcntl.flock(self._lock_fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            self._lock_fh.close()
            self._lock_fh = None
            raise RunLockedError(f"run directory {self.path} is in use by another process") from None
        config_bytes = dump_config(self.cfg).encode()
        atomic_write(self.path / CONFIG_NAME, config_bytes)
        previous = read_manifest(self.path) if (self.path / MANIFEST_NAME).exists() else None
        self.manifest = RunManifest(
            run_id=self.cfg.run_id,
            config_sha256=hashlib.sha256(config_bytes).hexdigest(),
            code_version=code_version(),
            seed=self.cfg.seed,
            command=self.command,
            started_at=_now(),
            artifacts=dict(previous.artifacts) if previous else {},
        )
        self._write_manifest()
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            self.manifest.finished_at = _now()
            self.manifest.status = "failed" if exc_type else "complete"
            self._write_manifest()
        finally:
            fcntl.flock(self._lock_fh, fcntl.LOCK_UN)
            self._lock_fh.close()
            self._lock_fh = None
        return False

    def _write_manifest(self) -> None:
        atomic_write(self.path / MANIFEST_NAME, json.dumps(asdict(self.manifest), indent=2, sort_keys=True) + "\n")

    def file(self, name: str) -> Path:
        return self.path / name

    def record(self, key: str, relpath) -> None:
        self.manifest.artifacts[key] = str(relpath)
        self._write_manifest()


def read_manifest(run_path) -> RunManifest:
    path = Path(run_path) / MANIFEST_NAME
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{run_path} is not a run directory (no {MANIFEST_NAME})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"corrupt run manifest {path}: {exc}") from exc
    return RunManifest(**data)


def load_run_config(run_path) -> ExperimentConfig:
    """Config stored in a run directory, verified against the manifest hash."""
    run_path = Path(run_path)
    cfg_path = run_path / CONFIG_NAME
    if not cfg_path.exists():
        raise ConfigError(f"{run_path} has no {CONFIG_NAME}")
    manifest = read_manifest(run_path)
    digest = hashlib.sha256(cfg_path.read_bytes()).hexdigest()
    if digest != manifest.config_sha256:
        raise ConfigError(f"{cfg_path} does not match the hash recorded in its manifest")
    return load_config(cfg_path)


def write_csv(path, rows: list[dict], columns) -> None:
    """Write rows with a header; floats use ``repr`` so output is exact and stable."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in rows:
            writer.writerow(["" if r.get(c) is None else _fmt(r.get(c)) for c in columns])
    os.replace(tmp, path)


def append_csv(path, rows: list[dict], columns) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(columns)
        for r in rows:
            writer.writerow(["" if r.get(c) is None else _fmt(r.get(c)) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
