"""Checkpoint container shared by the denoiser, restorer and probe.

A checkpoint is a directory holding

* ``params.npz``: every entry of the module's ``state_dict`` under its name,
* ``manifest.json``: format version, kind tag, model config, schedule
  descriptor, training step, seed, parameter shapes and a SHA-256 of
  ``params.npz``,
* ``optimizer.pt`` (optional): optimiser state for exact resumption.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .exceptions import (
    CheckpointConfigMismatchError,
    CheckpointCorruptError,
    CheckpointShapeError,
    CheckpointVersionError,
)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PARAMS = "params.npz"
OPTIMIZER = "optimizer.pt"


@dataclass
class LoadedCheckpoint:
    model: torch.nn.Module
    manifest: dict
    optimizer_state: dict | None = None


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_dict(config) -> dict:
    if is_dataclass(config):
        return asdict(config)
    return dict(config)


def save_checkpoint(
    module: torch.nn.Module,
    path,
    *,
    kind: str,
    config,
    schedule=None,
    step: int = 0,
    seed: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> Path:
    """Write ``module`` to the directory ``path`` (replaced atomically)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        state = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
        np.savez(tmp / PARAMS, **state)
        if optimizer is not None:
            torch.save(optimizer.state_dict(), tmp / OPTIMIZER)
        manifest = {
            "format_version": FORMAT_VERSION,
            "kind": kind,
            "config": _config_dict(config),
            "schedule": schedule.descriptor() if schedule is not None else None,
            "step": int(step),
            "seed": int(seed),
            "param_shapes": {k: list(v.shape) for k, v in state.items()},
            "params_sha256": _sha256(tmp / PARAMS),
            "extra": extra or {},
        }
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise CheckpointCorruptError(f"no checkpoint manifest at {path / MANIFEST}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"unreadable checkpoint manifest at {path}: {exc}") from exc
    if not isinstance(manifest, dict) or "format_version" not in manifest:
        raise CheckpointCorruptError(f"malformed checkpoint manifest at {path}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format_version={manifest['format_version']!r}, "
            f"this library reads version {FORMAT_VERSION}"
        )
    return manifest


def read_state(path, manifest: dict) -> dict[str, torch.Tensor]:
    path = Path(path)
    params = path / PARAMS
    if not params.exists():
        raise CheckpointCorruptError(f"missing parameter file {params}")
    if _sha256(params) != manifest.get("params_sha256"):
        raise CheckpointCorruptError(f"checksum mismatch for {params}")
    try:
        with np.load(params) as data:
            return {k: torch.from_numpy(data[k].copy()) for k in data.files}
    except Exception as exc:  # zipfile / pickle errors on damaged archives
        raise CheckpointCorruptError(f"cannot read {params}: {exc}") from exc


def _builders():
    from .denoiser import Denoiser, DenoiserConfig
    from .metrics import ProbeConfig, ProbeNet
    from .restorer import RestorerConfig, build_restorer

    return {
        "denoiser": (DenoiserConfig, Denoiser),
        "restorer": (RestorerConfig, build_restorer),
        "probe": (ProbeConfig, ProbeNet),
    }


def load_checkpoint(path, *, kind: str | None = None, expected_config: Any = None) -> LoadedCheckpoint:
    """Rebuild the model stored at ``path``.

    Raises :class:`CheckpointCorruptError`, :class:`CheckpointVersionError`,
    :class:`CheckpointConfigMismatchError` or :class:`CheckpointShapeError`.
    """
    path = Path(path)
    manifest = read_manifest(path)
    builders = _builders()
    stored_kind = manifest.get("kind")
    if kind is not None and stored_kind != kind:
        raise CheckpointConfigMismatchError(f"checkpoint {path} holds a {stored_kind!r}, expected {kind!r}")
    if stored_kind not in builders:
        raise CheckpointCorruptError(f"unknown checkpoint kind {stored_kind!r}")
    config_cls, factory = builders[stored_kind]
    try:
        config = config_cls(**manifest["config"])
    except Exception as exc:
        raise CheckpointConfigMismatchError(f"invalid config in manifest {path}: {exc}") from exc
    if expected_config is not None:
        expected = _config_dict(expected_config)
        if expected != manifest["config"]:
            diff = sorted(k for k in set(expected) | set(manifest["config"])
                          if expected.get(k) != manifest["config"].get(k))
            raise CheckpointConfigMismatchError(
                f"checkpoint {path} config differs from the expected one in {diff}"
            )
    state = read_state(path, manifest)
    model = factory(config)
    own = model.state_dict()
    if set(own) != set(state):
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        raise CheckpointShapeError(f"parameter names differ: missing={missing}, unexpected={unexpected}")
    bad = [k for k in own if tuple(own[k].shape) != tuple(state[k].shape)]
    if bad:
        raise CheckpointShapeError(f"parameter shape mismatch for {bad}")
    model.load_state_dict(state)
    optimizer_state = None
    if (path / OPTIMIZER).exists():
        optimizer_state = torch.load(path / OPTIMIZER, weights_only=True)
    return LoadedCheckpoint(model, manifest, optimizer_state)
