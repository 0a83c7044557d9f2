"""End-to-end experiment commands operating on run directories.

Every function here takes a validated :class:`ExperimentConfig` (or run
directories produced by one) and writes its outputs under
``out_dir/run_id``. Metric CSVs carry no timestamps so identical inputs
reproduce them byte for byte.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config, override
from .denoiser import Denoiser, FrozenDenoiser, freeze
from .diffusion import NoiseSchedule, sample
from .exceptions import CheckpointConfigMismatchError, CheckpointCorruptError, ConfigError, DataError
from .hspace import feature_distance_sweep
from .metrics import MetricReport, ProbeClassifier, evaluate_images, features
from .restorer import build_restorer, count_parameters
from .runs import (
    RunDir, append_csv, load_run_config, output_root, read_csv, write_csv,
)
from .seeding import RngBundle, set_global_seed
from .synthdata import ShapesDatasetSpec, degrade, generate_shapes, make_paired_arrays
from .trainer import (
    DDPM_LOG_COLUMNS, RESTORATION_LOG_COLUMNS, ddpm_training_loop, heldout_ddpm_loss,
    restoration_training_loop, restore_array,
)
from .validation import symmetric_to_unit, unit_to_symmetric

log = logging.getLogger(__name__)

DENOISER_DIR = "denoiser"
RESTORER_DIR = "restorer"
METRIC_COLUMNS = ("run_id", "condition", "psnr_db", "ssim", "desk_fid", "top1", "n_samples", "fid_reference")
DELTA_COLUMNS = ("run_id", "baseline", "d_psnr_db", "d_ssim", "d_desk_fid", "d_top1")
SWEEP_COLUMNS = ("gamma", "run_id", "psnr_db", "ssim", "desk_fid", "top1")
ABLATION_COLUMNS = ("variant", "run_id", "psnr_db", "ssim", "desk_fid", "top1", "rank_by_desk_fid", "reference_rank")
REFERENCE_GAMMA_BAND = (0.0005, 0.005)
# Reference ordering of the variants (best first) as reported for the full-scale model.
REFERENCE_VARIANT_ORDER = ("epsilon", "x0", "x_prev")
FID_REFERENCE = "clean-test"
PROBE_DATA_SEED_OFFSET = 10_000


# --------------------------------------------------------------------------- small helpers


def save_grid(rows: list[np.ndarray], path, n: int = 8) -> Path:
    """Tile ``rows`` (each (N, 3, H, W) in [0, 1]) into one lossless PNG, ``n`` images per row."""
    tiles = []
    for batch in rows:
        batch = np.asarray(batch)[:n]
        if batch.shape[0] < n:
            pad = np.zeros((n - batch.shape[0], *batch.shape[1:]), dtype=batch.dtype)
            batch = np.concatenate([batch, pad])
        tiles.append(np.concatenate(list(batch.transpose(0, 2, 3, 1)), axis=1))
    grid = np.concatenate(tiles, axis=0)
    Image.fromarray(np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8)).save(path)
    return Path(path)


def _require_path(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} is required but not set in the config")
    path = Path(path)
    if not path.exists():
        raise CheckpointCorruptError(f"{what} not found: {path}")
    return path


def load_denoiser(path, schedule_cfg=None) -> tuple[FrozenDenoiser, NoiseSchedule]:
    """Frozen denoiser plus the schedule it was trained with."""
    path = _require_path(path, "denoiser checkpoint")
    if (path / DENOISER_DIR).is_dir():
        path = path / DENOISER_DIR
    ckpt = load_checkpoint(path, kind="denoiser")
    if ckpt.manifest.get("schedule") is None:
        raise CheckpointCorruptError(f"denoiser checkpoint {path} has no schedule descriptor")
    s = NoiseSchedule.from_descriptor(ckpt.manifest["schedule"])
    if schedule_cfg is not None:
        want = schedule_cfg.build().descriptor()
        if want != s.descriptor():
            raise CheckpointConfigMismatchError(
                f"denoiser checkpoint {path} was trained with schedule {s.descriptor()}, config asks for {want}"
            )
    return freeze(ckpt.model), s


def _probe_key(cfg: ExperimentConfig) -> str:
    blob = json.dumps({"probe": asdict(cfg.probe), "resolution": cfg.dataset.resolution,
                       "n_classes": cfg.dataset.n_classes}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _probe_from_checkpoint(path, gate: float) -> ProbeClassifier:
    ckpt = load_checkpoint(path, kind="probe")
    return ProbeClassifier.from_net(ckpt.model, ckpt.manifest["extra"].get("clean_accuracy"), gate=gate)


def get_probe(cfg: ExperimentConfig, root=None) -> ProbeClassifier:
    """The evaluation probe: ``cfg.probe_ckpt`` if given, else a shared cached one.

    Cached probes live in ``<root>/_shared/probe-<hash>`` keyed on the probe
    section, so every run that shares it is scored by the same classifier.
    """
    if cfg.probe_ckpt is not None:
        return _probe_from_checkpoint(_require_path(cfg.probe_ckpt, "probe checkpoint"), cfg.probe.gate)
    root = Path(root) if root is not None else output_root(cfg)
    path = root / "_shared" / f"probe-{_probe_key(cfg)}"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path.parent / f".probe-{_probe_key(cfg)}.lock", "w") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        if not path.exists():
            train_probe_checkpoint(cfg, path)
    return _probe_from_checkpoint(path, cfg.probe.gate)


def train_probe_checkpoint(cfg: ExperimentConfig, path) -> ProbeClassifier:
    p = cfg.probe
    seed = PROBE_DATA_SEED_OFFSET + p.seed
    base = dict(resolution=cfg.dataset.resolution, n_classes=cfg.dataset.n_classes, seed=seed)
    Xtr, ytr = generate_shapes(ShapesDatasetSpec(n_images=p.n_train, split="train", **base))
    Xte, yte = generate_shapes(ShapesDatasetSpec(n_images=p.n_test, split="test", **base))
    probe = ProbeClassifier(n_classes=cfg.dataset.n_classes, feature_dim=p.feature_dim, width=p.width,
                            epochs=p.epochs, batch_size=p.batch_size, lr=p.lr, seed=p.seed, gate=p.gate)
    probe.fit(Xtr, ytr)
    acc = probe.check_gate(Xte, yte)
    log.info("probe clean-test accuracy %.4f (gate %.2f)", acc, p.gate)
    save_checkpoint(probe.net_, path, kind="probe", config=probe.net_.config, seed=p.seed,
                    extra={"clean_accuracy": acc, "gate": p.gate, "data_seed": seed})
    return probe


def _report_row(run_id: str, condition: str, r: MetricReport) -> dict:
    return {"run_id": run_id, "condition": condition, **asdict(r), "fid_reference": FID_REFERENCE}


def _fresh(run: RunDir, names) -> None:
    for name in names:
        p = run.file(name)
        if p.is_dir():
            shutil.rmtree(p)
        elif p.exists():
            p.unlink()


# --------------------------------------------------------------------------- phase A: toy DDPM


def pretrain_ddpm(cfg: ExperimentConfig, *, root=None, resume: bool = False) -> dict:
    """Train the toy DDPM on clean shapes; writes ``denoiser/``, logs and a sample grid."""
    s = cfg.schedule.build()
    x0 = unit_to_symmetric(torch.from_numpy(generate_shapes(cfg.dataset.spec("train"))[0]))
    x_val = unit_to_symmetric(torch.from_numpy(generate_shapes(cfg.dataset.spec("val"))[0]))
    with RunDir(cfg, "ddpm-train", root) as run:
        rngs = set_global_seed(cfg.seed)
        ckpt_path = run.file(DENOISER_DIR)
        start, opt_state = 0, None
        if resume and ckpt_path.exists():
            ckpt = load_checkpoint(ckpt_path, kind="denoiser", expected_config=cfg.denoiser)
            model, start, opt_state = ckpt.model, ckpt.manifest["step"], ckpt.optimizer_state
            for name in ("ddpm_log.csv", "ddpm_eval.csv"):
                if run.file(name).exists():
                    rows = [r for r in read_csv(run.file(name)) if int(r["step"]) < start + (name == "ddpm_eval.csv")]
                    cols = DDPM_LOG_COLUMNS if name == "ddpm_log.csv" else ("step", "heldout_loss")
                    write_csv(run.file(name), rows, cols)
        else:
            _fresh(run, (DENOISER_DIR, "ddpm_log.csv", "ddpm_eval.csv", "samples.png", "ddpm_summary.json"))
            model = rngs.init_module(Denoiser, cfg.denoiser)

        def checkpoint(step, opt):
            save_checkpoint(model, ckpt_path, kind="denoiser", config=cfg.denoiser, schedule=s, step=step,
                            seed=cfg.seed, optimizer=opt)

        d = cfg.ddpm
        state, opt = ddpm_training_loop(
            model, s, x0, rngs, max_steps=d.max_steps, batch_size=d.batch_size, lr=d.lr,
            betas=cfg.optimizer.betas, start_step=start, optimizer_state=opt_state, x_heldout=x_val,
            eval_every=d.eval_every, stop_below=d.stop_below, on_checkpoint=checkpoint, ckpt_every=d.ckpt_every,
        )
        if state.step == start or not ckpt_path.exists():
            checkpoint(state.step, opt)
        append_csv(run.file("ddpm_log.csv"), state.rows, DDPM_LOG_COLUMNS)
        append_csv(run.file("ddpm_eval.csv"), state.eval_rows, ("step", "heldout_loss"))
        final = heldout_ddpm_loss(model, x_val, s, rngs)
        imgs = sample(model, s, (d.n_samples, 3, cfg.dataset.resolution, cfg.dataset.resolution),
                      rngs.torch("sample", 0))
        save_grid([symmetric_to_unit(imgs).numpy()[i : i + 8] for i in range(0, d.n_samples, 8)], run.file("samples.png"))
        eval_rows = read_csv(run.file("ddpm_eval.csv"))
        summary = {"steps": state.step, "final_heldout_loss": final, "eps_zero_baseline": math.sqrt(2 / math.pi),
                   "best_heldout_loss": min((float(r["heldout_loss"]) for r in eval_rows), default=final),
                   "n_parameters": count_parameters(model)}
        run.file("ddpm_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        for key, name in (("denoiser", DENOISER_DIR), ("log", "ddpm_log.csv"), ("eval_log", "ddpm_eval.csv"),
                          ("samples", "samples.png"), ("summary", "ddpm_summary.json")):
            run.record(key, name)
        summary["run_dir"] = str(run.path)
        return summary


# --------------------------------------------------------------------------- phase B: restoration


def train_restoration(cfg: ExperimentConfig, *, root=None, resume: bool = False, evaluate: bool = True) -> dict:
    """Train a restorer with or without DiffLoss, then evaluate it on the test split."""
    denoiser = s = dl = None
    if cfg.diffloss.enabled:
        denoiser, s = load_denoiser(cfg.denoiser_ckpt, cfg.schedule)
        dl = cfg.diffloss.to_config()
    Y, X, _ = make_paired_arrays(cfg.dataset.spec("train"), cfg.degradation)
    Yv, Xv, _ = make_paired_arrays(cfg.dataset.spec("val"), cfg.degradation)
    with RunDir(cfg, "restore-train", root) as run:
        rngs = set_global_seed(cfg.seed)
        ckpt_path = run.file(RESTORER_DIR)
        start, opt_state = 0, None
        if resume and ckpt_path.exists():
            ckpt = load_checkpoint(ckpt_path, kind="restorer", expected_config=cfg.restorer)
            model, start, opt_state = ckpt.model, ckpt.manifest["step"], ckpt.optimizer_state
            for name, cols in (("train_log.csv", RESTORATION_LOG_COLUMNS), ("eval_log.csv", ("step", "val_psnr_db"))):
                if run.file(name).exists():
                    write_csv(run.file(name), [r for r in read_csv(run.file(name)) if int(r["step"]) < start + (name == "eval_log.csv")], cols)
        else:
            _fresh(run, (RESTORER_DIR, "train_log.csv", "eval_log.csv", "metrics.csv", "grid.png"))
            model = rngs.init_module(build_restorer, cfg.restorer)
        eval_rows = []

        def on_eval(step, m):
            from .metrics import psnr

            eval_rows.append({"step": step, "val_psnr_db": psnr(restore_array(m, Yv), Xv, cap=100.0)})

        def checkpoint(step, opt):
            save_checkpoint(model, ckpt_path, kind="restorer", config=cfg.restorer, step=step, seed=cfg.seed,
                            optimizer=opt, extra={"diffloss": asdict(cfg.diffloss)})

        checksum = denoiser.checksum() if denoiser is not None else None
        state, opt = restoration_training_loop(
            model, torch.from_numpy(Y), torch.from_numpy(X), rngs, max_steps=cfg.max_steps,
            batch_size=cfg.batch_size, lr=cfg.optimizer.lr, betas=cfg.optimizer.betas, denoiser=denoiser,
            schedule=s, diffloss=dl, patch_size=cfg.patch_size, start_step=start, optimizer_state=opt_state,
            on_eval=on_eval, eval_every=cfg.eval_every, on_checkpoint=checkpoint, ckpt_every=cfg.ckpt_every,
        )
        if checksum is not None and denoiser.checksum() != checksum:
            raise AssertionError("frozen denoiser parameters changed during restoration training")
        if state.step == start or not ckpt_path.exists():
            checkpoint(state.step, opt)
        append_csv(run.file("train_log.csv"), state.rows, RESTORATION_LOG_COLUMNS)
        append_csv(run.file("eval_log.csv"), eval_rows, ("step", "val_psnr_db"))
        for key, name in (("restorer", RESTORER_DIR), ("log", "train_log.csv"), ("eval_log", "eval_log.csv")):
            run.record(key, name)
        result = {"run_dir": str(run.path), "steps": state.step, "denoiser_checksum": checksum,
                  "n_parameters": count_parameters(model)}
    if evaluate:
        result["metrics"] = evaluate_run(run.path)
    return result


def _load_restorer(run_path: Path):
    return load_checkpoint(_require_path(run_path / RESTORER_DIR, "restorer checkpoint"), kind="restorer").model


def restored_test_set(run_path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(restored, degraded, clean, labels) on the run's test split."""
    run_path = Path(run_path)
    cfg = load_run_config(run_path)
    Y, X, labels = make_paired_arrays(cfg.dataset.spec("test"), cfg.degradation)
    return restore_array(_load_restorer(run_path), Y), Y, X, labels


def evaluate_run(run_path, *, probe: ProbeClassifier | None = None) -> list[dict]:
    """Score a trained run on its test split; writes ``metrics.csv`` and ``grid.png``.

    desk-FID always compares against probe features of the clean test split.
    """
    run_path = Path(run_path)
    cfg = load_run_config(run_path)
    probe = probe or get_probe(cfg, run_path.parent)
    Z, Y, X, labels = restored_test_set(run_path)
    ref = features(probe, X)
    rows = [_report_row(cfg.run_id, "restored", evaluate_images(Z, X, labels, probe, ref)),
            _report_row(cfg.run_id, "degraded", evaluate_images(Y, X, labels, probe, ref))]
    write_csv(run_path / "metrics.csv", rows, METRIC_COLUMNS)
    save_grid([Y, Z, X], run_path / "grid.png")
    return rows


def _restored_row(run_path) -> dict:
    path = Path(run_path) / "metrics.csv"
    if not path.exists():
        raise DataError(f"{run_path} has no metrics.csv; run `evaluate` on it first")
    for r in read_csv(path):
        if r["condition"] == "restored":
            return r
    raise DataError(f"{path} has no 'restored' row")


# --------------------------------------------------------------------------- multi-run commands


def report(run_paths, out_dir) -> tuple[list[dict], list[dict]]:
    """Side-by-side metrics of several runs plus deltas relative to the first (the baseline)."""
    if not run_paths:
        raise ConfigError("report needs at least one run directory")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [_restored_row(p) for p in run_paths]
    base = rows[0]
    deltas = []
    for r in rows:
        deltas.append({"run_id": r["run_id"], "baseline": base["run_id"],
                       **{f"d_{k}": float(r[k]) - float(base[k]) for k in ("psnr_db", "ssim", "desk_fid", "top1")}})
    write_csv(out_dir / "report.csv", rows, METRIC_COLUMNS)
    write_csv(out_dir / "report_delta.csv", deltas, DELTA_COLUMNS)
    return rows, deltas


def classify_eval(run_paths, out_dir) -> list[dict]:
    """Probe top-1 on clean, degraded and restored test images for each run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for p in run_paths:
        p = Path(p)
        cfg = load_run_config(p)
        probe = get_probe(cfg, p.parent)
        Z, Y, X, labels = restored_test_set(p)
        from .metrics import top1

        rows.append({"run_id": cfg.run_id, "degradation": cfg.degradation.kind,
                     "diffloss": cfg.diffloss.enabled and cfg.diffloss.gamma > 0,
                     "top1_clean": top1(probe, X, labels), "top1_degraded": top1(probe, Y, labels),
                     "top1_restored": top1(probe, Z, labels), "probe_clean_accuracy": probe.clean_accuracy_})
    write_csv(out_dir / "classify.csv", rows,
              ("run_id", "degradation", "diffloss", "top1_clean", "top1_degraded", "top1_restored",
               "probe_clean_accuracy"))
    return rows


def _child(cfg: ExperimentConfig, suffix: str, **changes) -> ExperimentConfig:
    return override(cfg, run_id=f"{cfg.run_id}__{suffix}", **changes)


def weight_sweep(cfg: ExperimentConfig, gammas=None, *, root=None) -> list[dict]:
    """One restoration run per gamma (shared seed); writes ``sweep.csv`` and ``psnr_vs_gamma.png``."""
    gammas = list(cfg.sweep_gammas if gammas is None else gammas)
    if not gammas:
        raise ConfigError("sweep needs at least one gamma")
    rows = []
    with RunDir(cfg, "sweep-gamma", root) as run:
        base_root = run.path.parent
        for g in gammas:
            child = _child(cfg, f"gamma{g:g}", **{"diffloss.gamma": float(g), "diffloss.enabled": True})
            res = train_restoration(child, root=base_root)
            r = next(m for m in res["metrics"] if m["condition"] == "restored")
            rows.append({"gamma": float(g), "run_id": child.run_id,
                         **{k: r[k] for k in ("psnr_db", "ssim", "desk_fid", "top1")}})
        write_csv(run.file("sweep.csv"), rows, SWEEP_COLUMNS)
        _plot_sweep(rows, run.file("psnr_vs_gamma.png"))
        run.record("sweep", "sweep.csv")
        run.record("plot", "psnr_vs_gamma.png")
    return rows


def _plot_sweep(rows, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    xs = list(range(len(rows)))
    ax.plot(xs, [r["psnr_db"] for r in rows], marker="o")
    ax.set_xticks(xs, [f"{r['gamma']:g}" for r in rows])
    in_band = [i for i, r in enumerate(rows) if REFERENCE_GAMMA_BAND[0] <= r["gamma"] <= REFERENCE_GAMMA_BAND[1]]
    if in_band:
        ax.axvspan(min(in_band) - 0.3, max(in_band) + 0.3, alpha=0.15, label="reference optimum band")
        ax.legend()
    ax.set_xlabel("gamma")
    ax.set_ylabel("test PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def ablation(cfg: ExperimentConfig, variants=("epsilon", "x0", "x_prev"), *, root=None) -> list[dict]:
    """One restoration run per DiffLoss variant; writes ``ablation.csv``.

    The reference ordering is reported in its own column and is not checked.
    """
    rows = []
    with RunDir(cfg, "ablate", root) as run:
        for v in variants:
            child = _child(cfg, f"variant_{v}", **{"diffloss.variant": v, "diffloss.enabled": True})
            res = train_restoration(child, root=run.path.parent)
            r = next(m for m in res["metrics"] if m["condition"] == "restored")
            rows.append({"variant": v, "run_id": child.run_id,
                         **{k: r[k] for k in ("psnr_db", "ssim", "desk_fid", "top1")},
                         "reference_rank": REFERENCE_VARIANT_ORDER.index(v) + 1})
        order = sorted(range(len(rows)), key=lambda i: rows[i]["desk_fid"])
        for rank, i in enumerate(order, 1):
            rows[i]["rank_by_desk_fid"] = rank
        write_csv(run.file("ablation.csv"), rows, ABLATION_COLUMNS)
        run.record("ablation", "ablation.csv")
    return rows


def hspace_probe(cfg: ExperimentConfig, *, root=None) -> list[dict]:
    """Perturbed-regeneration feature distances for clean, degraded and (optionally) restored images."""
    denoiser, s = load_denoiser(cfg.denoiser_ckpt, cfg.schedule)
    h = cfg.hspace
    Y, X, _ = make_paired_arrays(replace(cfg.dataset.spec("test"), n_images=h.n_images), cfg.degradation)
    conditions = {"clean": X, "degraded": Y, "restored_with": None, "restored_without": None}
    for name, ref in (("restored_with", h.restored_with_run), ("restored_without", h.restored_without_run)):
        if ref is not None:
            path = _require_path(ref, f"hspace.{name}_run")
            conditions[name] = restore_array(_load_restorer(path), Y)
    with RunDir(cfg, "hspace-probe", root) as run:
        probe = get_probe(cfg, run.path.parent)
        rows = feature_distance_sweep(conditions, h.spec(), denoiser, s, probe, out_dir=run.path)
        run.record("distances", "hspace_distances.csv")
        run.record("histogram", "hspace_histogram.png")
    return rows


__all__ = [
    "pretrain_ddpm", "train_restoration", "evaluate_run", "report", "classify_eval", "weight_sweep",
    "ablation", "hspace_probe", "get_probe", "load_denoiser", "save_grid", "restored_test_set",
    "METRIC_COLUMNS", "dump_config",
]
