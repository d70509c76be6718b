"""Experiment configuration: one dataclass tree covering every default, a TOML
loader, and a content hash that binds datasets, checkpoints, and runs
together."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .grid import GridSpec
from .network import IN_SAMPLES, EncoderDecoderNet
from .solver import SensorArray, SourceSpec, TimeSpec, stable_dt

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "config_hash"]


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit status 2)."""


@dataclass(frozen=True)
class GridSection:
    nx: int = 64
    ny: int = 32
    lx: float = 2.0
    ly: float = 1.0


@dataclass(frozen=True)
class MaterialSection:
    rho0: float = 1.0
    c0: float = 1.0


@dataclass(frozen=True)
class SourceSection:
    psi0: float = 1.0
    f_psi: float = 3.0
    nc: int = 2
    # source defaults to the top-boundary center node when unset
    xs: float | None = None
    ys: float | None = None


@dataclass(frozen=True)
class TimeSection:
    safety: float = 0.7
    nt: int = 2048


@dataclass(frozen=True)
class SensorsSection:
    count: int = 8


@dataclass(frozen=True)
class NetworkSection:
    enc_channels: tuple[int, ...] = (16, 32)
    dec_channels: tuple[int, ...] = (16, 8, 8)
    eps: float = 1e-3


@dataclass(frozen=True)
class DatasetSection:
    n_samples: int = 160
    n_validation: int = 32
    seed: int = 7
    a_frac: tuple[float, float] = (0.08, 0.2)  # semi-major axis as fraction of lx
    b_frac: tuple[float, float] = (0.4, 1.0)  # semi-minor axis as fraction of a
    margin_nodes: float = 2.0  # clearance to the boundary, in node spacings


@dataclass(frozen=True)
class PretrainSection:
    epochs: int = 400
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 1


@dataclass(frozen=True)
class FwiSection:
    epochs: int = 200
    lr: float = 1e-3  # from-scratch learning rate
    lr_transfer: float = 2.5e-4  # after supervised pretraining
    freeze_prefix: int = 6  # encoder depth; applied only with a transferred start
    ap_target: float = 0.99
    seed: int = 2


_SECTIONS = {
    "grid": GridSection,
    "material": MaterialSection,
    "source": SourceSection,
    "time": TimeSection,
    "sensors": SensorsSection,
    "network": NetworkSection,
    "dataset": DatasetSection,
    "pretrain": PretrainSection,
    "fwi": FwiSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridSection = field(default_factory=GridSection)
    material: MaterialSection = field(default_factory=MaterialSection)
    source: SourceSection = field(default_factory=SourceSection)
    time: TimeSection = field(default_factory=TimeSection)
    sensors: SensorsSection = field(default_factory=SensorsSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    fwi: FwiSection = field(default_factory=FwiSection)

    def __post_init__(self):
        t = self.time
        if t.nt % 4 != 0 or t.nt // 4 != IN_SAMPLES:
            raise ConfigError(
                f"time.nt must be {4 * IN_SAMPLES} so the trace tail matches the "
                f"network input ({IN_SAMPLES} samples), got {t.nt}"
            )
        if not 0 < t.safety <= 1:
            raise ConfigError(f"time.safety must lie in (0, 1], got {t.safety}")
        if not 0 < self.network.eps < 1:
            raise ConfigError(f"network.eps must lie in (0, 1), got {self.network.eps}")
        if not 0 < self.fwi.ap_target <= 1:
            raise ConfigError(f"fwi.ap_target must lie in (0, 1], got {self.fwi.ap_target}")
        d = self.dataset
        if d.n_validation >= d.n_samples:
            raise ConfigError(
                f"dataset.n_validation ({d.n_validation}) must be smaller than "
                f"dataset.n_samples ({d.n_samples})"
            )
        if not (0 < d.a_frac[0] <= d.a_frac[1]):
            raise ConfigError(f"dataset.a_frac range invalid: {d.a_frac}")
        if not (0 < d.b_frac[0] <= d.b_frac[1] <= 1.0):
            raise ConfigError(f"dataset.b_frac range invalid: {d.b_frac}")

    # construction helpers for the physics objects

    def make_grid(self) -> GridSpec:
        g = self.grid
        return GridSpec(g.nx, g.ny, g.lx, g.ly)

    def make_timespec(self) -> TimeSpec:
        grid = self.make_grid()
        return TimeSpec(stable_dt(grid, self.material.c0, self.time.safety), self.time.nt)

    def make_source(self) -> SourceSpec:
        grid = self.make_grid()
        s = self.source
        xs = s.xs if s.xs is not None else ((grid.nx - 1) // 2) * grid.hx
        ys = s.ys if s.ys is not None else grid.ly
        return SourceSpec(xs=xs, ys=ys, psi0=s.psi0, f_psi=s.f_psi, nc=s.nc)

    def make_sensors(self) -> SensorArray:
        return SensorArray.top_boundary(self.make_grid(), self.sensors.count)

    def make_network(self) -> EncoderDecoderNet:
        n = self.network
        return EncoderDecoderNet.build(
            n_channels=self.sensors.count,
            enc_channels=tuple(n.enc_channels),
            dec_channels=tuple(n.dec_channels),
            eps=n.eps,
        )

    @property
    def n_train(self) -> int:
        return self.dataset.n_samples - self.dataset.n_validation

    def with_overrides(self, **section_updates) -> "ExperimentConfig":
        """Rebuild with replaced section fields, e.g.
        with_overrides(dataset={"seed": 3})."""
        updates = {}
        for name, fields in section_updates.items():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown config section {name!r}")
            updates[name] = replace(getattr(self, name), **fields)
        return replace(self, **updates)


def _coerce(section_cls, table: dict, section: str):
    valid = {f.name for f in section_cls.__dataclass_fields__.values()}
    unknown = set(table) - valid
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in table.items()}
    return section_cls(**coerced)


def load_config(path) -> ExperimentConfig:
    """Load a TOML config; every omitted key keeps its default."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {
        name: _coerce(cls, doc.get(name, {}), name) for name, cls in _SECTIONS.items()
    }
    return ExperimentConfig(**sections)


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable content hash binding datasets and runs to their configuration."""
    payload = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def write_example_config(path):
    """Write the shipped example config with every default spelled out."""
    cfg = ExperimentConfig()
    lines = ["# voidfwi experiment configuration; all values shown are the defaults\n"]
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        for key, val in asdict(getattr(cfg, name)).items():
            if val is None:
                lines.append(f"# {key} unset: derived from the grid")
                continue
            if isinstance(val, tuple):
                val = list(val)
            lines.append(f"{key} = {json.dumps(val)}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
