"""Synthetic dataset of (sensor traces, scaling field) pairs with random
elliptical voids.

Every sample is generated from its own RNG seeded with ``seed ^ id``, so any
subset regenerates bit-identically and generation order (or worker count)
cannot change the output. Validation samples are the last ``n_validation``
ids; per-channel normalization statistics come from the training split only.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, config_hash
from .grid import EllipseParams, GridSpec, ScalarField, rasterize_ellipse
from .io import guarded_write_bytes, read_field, read_traces, field_to_bytes, traces_to_bytes
from .solver import DivergenceError, MaterialModel, SensorTraces, solve_forward

__all__ = [
    "EllipseBounds",
    "SampleRecord",
    "DatasetManifest",
    "sample_ellipse",
    "ellipse_bounds_for",
    "generate_dataset",
    "write_dataset",
    "load_manifest",
    "load_sample",
    "pretrain_subset",
    "traces_filename",
    "gamma_filename",
]

WORKERS_ENV = "VOIDFWI_WORKERS"


@dataclass(frozen=True)
class EllipseBounds:
    """Uniform sampling ranges; the center ranges must already account for the
    largest semi-axis plus the boundary margin, so every draw fits."""

    xc: tuple[float, float]
    yc: tuple[float, float]
    a: tuple[float, float]
    b_frac: tuple[float, float]

    def __post_init__(self):
        for name in ("xc", "yc", "a", "b_frac"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"ellipse bounds: {name} range [{lo}, {hi}] is empty")
        if self.a[0] <= 0:
            raise ConfigError(f"ellipse bounds: semi-axis range {self.a} must be positive")
        if not (0 < self.b_frac[0] and self.b_frac[1] <= 1):
            raise ConfigError(
                f"ellipse bounds: b_frac range {self.b_frac} must lie in (0, 1]"
            )


def ellipse_bounds_for(cfg: ExperimentConfig) -> EllipseBounds:
    """Derive sampling ranges from the config: the centers span the interior
    left feasible by the largest semi-axis plus the node-spacing margin."""
    grid = cfg.make_grid()
    d = cfg.dataset
    a_lo, a_hi = d.a_frac[0] * grid.lx, d.a_frac[1] * grid.lx
    margin = d.margin_nodes * max(grid.hx, grid.hy)
    clearance = a_hi + margin
    xc = (clearance, grid.lx - clearance)
    yc = (clearance, grid.ly - clearance)
    if xc[0] > xc[1] or yc[0] > yc[1]:
        raise ConfigError(
            f"dataset.a_frac {d.a_frac} cannot fit: largest semi-axis {a_hi} plus "
            f"margin {margin} leaves no feasible centers in "
            f"[0,{grid.lx}]x[0,{grid.ly}]"
        )
    return EllipseBounds(xc=xc, yc=yc, a=(a_lo, a_hi), b_frac=d.b_frac)


def sample_ellipse(rng: np.random.Generator, bounds: EllipseBounds) -> EllipseParams:
    """Draw (xc, yc, a, b, theta); theta uniform in [0, pi). Fixed draw order
    keeps the sequence reproducible."""
    xc = rng.uniform(*bounds.xc)
    yc = rng.uniform(*bounds.yc)
    a = rng.uniform(*bounds.a)
    b = a * rng.uniform(*bounds.b_frac)
    theta = rng.uniform(0.0, np.pi)
    return EllipseParams(xc, yc, a, b, theta)


@dataclass(frozen=True)
class SampleRecord:
    id: int
    ellipse: EllipseParams
    gamma_true: ScalarField
    traces: SensorTraces


@dataclass(frozen=True)
class DatasetManifest:
    config_hash: str
    seed: int
    n_samples: int
    n_train: int
    channel_scale: np.ndarray
    ellipses: dict[int, EllipseParams]
    failures: dict[int, str]

    @property
    def n_validation(self) -> int:
        return self.n_samples - self.n_train

    @property
    def train_ids(self) -> list[int]:
        return [i for i in range(self.n_train) if i not in self.failures]

    @property
    def validation_ids(self) -> list[int]:
        return [i for i in range(self.n_train, self.n_samples) if i not in self.failures]


def _make_sample(cfg: ExperimentConfig, seed: int, sample_id: int) -> SampleRecord:
    rng = np.random.default_rng(seed ^ sample_id)
    bounds = ellipse_bounds_for(cfg)
    ellipse = sample_ellipse(rng, bounds)
    grid = cfg.make_grid()
    gamma = rasterize_ellipse(ellipse, grid, cfg.network.eps)
    model = MaterialModel(cfg.material.rho0, cfg.material.c0, gamma)
    traces, _ = solve_forward(
        model, cfg.make_source(), cfg.make_timespec(), cfg.make_sensors()
    )
    return SampleRecord(sample_id, ellipse, gamma, traces)


def _worker(args):
    cfg, seed, sample_id = args
    try:
        return _make_sample(cfg, seed, sample_id), None
    except DivergenceError as exc:
        return sample_id, str(exc)


def _worker_count(n: int) -> int:
    cap = os.environ.get(WORKERS_ENV)
    if cap is not None:
        return max(1, int(cap))
    return min(os.cpu_count() or 1, 4, n)


def generate_dataset(
    cfg: ExperimentConfig, seed: int | None = None
) -> tuple[DatasetManifest, list[SampleRecord]]:
    """Generate all samples for the config. Forward-solve failures are
    reported per id and skipped; the rest of the run continues."""
    seed = cfg.dataset.seed if seed is None else seed
    n = cfg.dataset.n_samples
    jobs = [(cfg, seed, i) for i in range(n)]
    workers = _worker_count(n)
    if workers > 1 and n >= 8:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker, jobs, chunksize=4))
    else:
        results = [_worker(j) for j in jobs]

    records, failures = [], {}
    for res, err in results:
        if err is None:
            records.append(res)
        else:
            failures[res] = err
    records.sort(key=lambda r: r.id)

    n_train = cfg.n_train
    nt = cfg.time.nt
    scale = np.zeros(cfg.sensors.count)
    for r in records:
        if r.id < n_train:
            tail = np.abs(r.traces.data[:, 3 * nt // 4 :]).max(axis=1)
            scale = np.maximum(scale, tail)

    manifest = DatasetManifest(
        config_hash=config_hash(cfg),
        seed=seed,
        n_samples=n,
        n_train=n_train,
        channel_scale=scale,
        ellipses={r.id: r.ellipse for r in records},
        failures=failures,
    )
    return manifest, records


def traces_filename(sample_id: int) -> str:
    return f"traces_{sample_id:05d}.wft"


def gamma_filename(sample_id: int) -> str:
    return f"gamma_{sample_id:05d}.wfi"


def manifest_to_json(manifest: DatasetManifest) -> str:
    doc = {
        "config_hash": manifest.config_hash,
        "seed": manifest.seed,
        "n_samples": manifest.n_samples,
        "split": {"train": manifest.n_train, "validation": manifest.n_validation},
        "channel_scale": [float(v) for v in manifest.channel_scale],
        "samples": [
            {
                "id": i,
                "ellipse": {
                    "xc": e.xc, "yc": e.yc, "a": e.a, "b": e.b, "theta": e.theta,
                },
                "traces": traces_filename(i),
                "gamma": gamma_filename(i),
            }
            for i, e in sorted(manifest.ellipses.items())
        ],
        "failures": [
            {"id": i, "error": msg} for i, msg in sorted(manifest.failures.items())
        ],
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_dataset(
    out_dir, manifest: DatasetManifest, records: list[SampleRecord], force: bool = False
):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in records:
        guarded_write_bytes(out / traces_filename(r.id), traces_to_bytes(r.traces), force)
        guarded_write_bytes(out / gamma_filename(r.id), field_to_bytes(r.gamma_true), force)
    guarded_write_bytes(out / "manifest.json", manifest_to_json(manifest).encode(), force)


def load_manifest(dataset_dir) -> DatasetManifest:
    path = Path(dataset_dir) / "manifest.json"
    doc = json.loads(path.read_text())
    return DatasetManifest(
        config_hash=doc["config_hash"],
        seed=doc["seed"],
        n_samples=doc["n_samples"],
        n_train=doc["split"]["train"],
        channel_scale=np.array(doc["channel_scale"]),
        ellipses={
            s["id"]: EllipseParams(**s["ellipse"]) for s in doc["samples"]
        },
        failures={f["id"]: f["error"] for f in doc["failures"]},
    )


def load_sample(dataset_dir, sample_id: int, grid: GridSpec) -> tuple[SensorTraces, ScalarField]:
    base = Path(dataset_dir)
    traces = read_traces(base / traces_filename(sample_id))
    gamma = read_field(base / gamma_filename(sample_id), grid.lx, grid.ly)
    return traces, gamma


def pretrain_subset(manifest: DatasetManifest, n_d: int) -> list[int]:
    """First n_d training ids; subsets nest (the 2-sample set is a prefix of
    the 8-sample set, and so on)."""
    train = manifest.train_ids
    if not 0 <= n_d <= len(train):
        raise ValueError(f"subset size {n_d} exceeds the training split ({len(train)})")
    return train[:n_d]
