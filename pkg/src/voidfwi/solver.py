"""Explicit finite-difference solver for the scaled scalar wave equation.

    gamma * rho0 * u_tt - div(gamma * rho0 * c0^2 * grad u) = f

on a node-centered grid with homogeneous Neumann boundaries (mirrored ghost
nodes on all four sides), quiescent initial conditions, a sine-burst point
source, and per-step sensor recording.

Scheme: leapfrog (central second difference in time) with a 5-point flux-form
Laplacian. Edge coefficients use the harmonic mean of gamma: with the
arithmetic mean, the spectral radius of the update grows like 1/gamma_min at
material jumps and the scheme blows up for small void floors under the usual
CFL step, whereas the harmonic mean keeps the stability bound independent of
gamma. The operator stays self-adjoint under trapezoid node weights either
way, which the adjoint-based gradient relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec, ScalarField

__all__ = [
    "MaterialModel",
    "SourceSpec",
    "TimeSpec",
    "SensorArray",
    "SensorTraces",
    "SpaceTimeField",
    "DivergenceError",
    "burst",
    "stable_dt",
    "solve_forward",
]

MAX_AMPLITUDE = 1e12
MIN_SOLVER_NODES = 8


class DivergenceError(RuntimeError):
    """Raised when the time integration blows up."""

    def __init__(self, step: int, amplitude: float):
        super().__init__(
            f"wavefield diverged at step {step}: max |u| = {amplitude:.3e} "
            f"(limit {MAX_AMPLITUDE:.0e}); check the time step against stable_dt"
        )
        self.step = step
        self.amplitude = amplitude


@dataclass(frozen=True)
class MaterialModel:
    """Homogeneous background (rho0, c0) scaled by the nodal field gamma."""

    rho0: float
    c0: float
    gamma: ScalarField

    def __post_init__(self):
        if not (self.rho0 > 0 and self.c0 > 0):
            raise ValueError(f"rho0 and c0 must be positive, got {self.rho0}, {self.c0}")
        g = self.gamma.values
        if g.min() <= 0 or g.max() > 1.0 + 1e-12:
            raise ValueError(
                f"gamma values must lie in (0, 1], got range [{g.min()}, {g.max()}]"
            )

    @property
    def grid(self) -> GridSpec:
        return self.gamma.grid


@dataclass(frozen=True)
class SourceSpec:
    """Point source: sine burst of nc cycles at frequency f_psi, amplitude psi0,
    injected at the grid node (xs, ys)."""

    xs: float
    ys: float
    psi0: float = 1.0
    f_psi: float = 3.0
    nc: int = 2

    def __post_init__(self):
        if self.psi0 == 0:
            raise ValueError("source amplitude psi0 must be nonzero")
        if not self.f_psi > 0:
            raise ValueError(f"burst frequency must be positive, got {self.f_psi}")
        if self.nc < 1:
            raise ValueError(f"cycle count must be >= 1, got {self.nc}")

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.f_psi

    @property
    def duration(self) -> float:
        """End of the burst, 2*pi*nc/omega."""
        return self.nc / self.f_psi


@dataclass(frozen=True)
class TimeSpec:
    dt: float
    nt: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.nt < 1:
            raise ValueError(f"nt must be >= 1, got {self.nt}")

    @property
    def total(self) -> float:
        return self.nt * self.dt

    def times(self) -> np.ndarray:
        return np.arange(self.nt) * self.dt


@dataclass(frozen=True)
class SensorArray:
    """Receiver positions; each must coincide with a grid node."""

    positions: np.ndarray  # (n, 2) of (x, y)

    def __post_init__(self):
        p = np.atleast_2d(np.array(self.positions, dtype=np.float64))
        if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 1:
            raise ValueError(f"positions must be an (n, 2) array, got shape {p.shape}")
        p.setflags(write=False)
        object.__setattr__(self, "positions", p)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def node_indices(self, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
        """(ix, iy) node indices; raises if a position is off-node or duplicated."""
        ix = np.rint(self.positions[:, 0] / grid.hx).astype(np.intp)
        iy = np.rint(self.positions[:, 1] / grid.hy).astype(np.intp)
        ok = (
            (ix >= 0)
            & (ix < grid.nx)
            & (iy >= 0)
            & (iy < grid.ny)
            & (np.abs(ix * grid.hx - self.positions[:, 0]) < 1e-9 * grid.lx)
            & (np.abs(iy * grid.hy - self.positions[:, 1]) < 1e-9 * grid.ly)
        )
        if not ok.all():
            bad = self.positions[~ok]
            raise ValueError(f"sensor positions not on grid nodes: {bad.tolist()}")
        if len(set(zip(ix.tolist(), iy.tolist()))) != len(self):
            raise ValueError("sensor positions must be distinct grid nodes")
        return ix, iy

    @classmethod
    def top_boundary(cls, grid: GridSpec, n: int) -> "SensorArray":
        """n sensors evenly spaced over the interior of the top boundary."""
        idx = np.rint(np.linspace(0, grid.nx - 1, n + 2))[1:-1].astype(int)
        if len(set(idx.tolist())) != n:
            raise ValueError(f"cannot place {n} distinct sensors on {grid.nx} top nodes")
        xs = idx * grid.hx
        ys = np.full(n, (grid.ny - 1) * grid.hy)
        return cls(np.column_stack([xs, ys]))


@dataclass(frozen=True)
class SensorTraces:
    """Per-sensor time series, shape (n_sensors, nt)."""

    data: np.ndarray
    dt: float

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError(f"trace data must be 2D (sensors, time), got {d.ndim}D")
        if not np.all(np.isfinite(d)):
            raise ValueError("trace data must be finite")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def n_sensors(self) -> int:
        return self.data.shape[0]

    @property
    def nt(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SpaceTimeField:
    """Full wavefield history, shape (nt, nx*ny); snapshot 0 is the quiescent state."""

    grid: GridSpec
    snapshots: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.snapshots, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != self.grid.n_nodes:
            raise ValueError(
                f"snapshots must be (nt, {self.grid.n_nodes}), got {s.shape}"
            )
        object.__setattr__(self, "snapshots", s)

    @property
    def nt(self) -> int:
        return self.snapshots.shape[0]

    def frame(self, n: int) -> np.ndarray:
        return self.snapshots[n].reshape(self.grid.shape)


def burst(t: float, s: SourceSpec) -> float:
    """Sine-burst amplitude psi0*sin(w t)*sin(w t / (2 nc)) inside [0, duration], else 0."""
    if t < 0 or t > s.duration:
        return 0.0
    w = s.omega
    return s.psi0 * math.sin(w * t) * math.sin(w * t / (2.0 * s.nc))


def stable_dt(grid: GridSpec, c0: float, safety: float = 1.0) -> float:
    """Largest stable time step for the explicit 2D scheme, scaled by ``safety``."""
    if not 0 < safety <= 1:
        raise ValueError(f"safety factor must lie in (0, 1], got {safety}")
    return safety * min(grid.hx, grid.hy) / (c0 * math.sqrt(2.0))


def _edge_coefficients(m: MaterialModel):
    """Harmonic-mean edge coefficients kx (ny, nx-1) and ky (ny-1, nx) of
    gamma * rho0 * c0^2, plus the nodal mass gamma * rho0."""
    g = m.gamma.as2d()
    k = m.rho0 * m.c0 * m.c0
    kx = k * 2.0 * g[:, :-1] * g[:, 1:] / (g[:, :-1] + g[:, 1:])
    ky = k * 2.0 * g[:-1, :] * g[1:, :] / (g[:-1, :] + g[1:, :])
    return kx, ky, m.rho0 * g


def _apply_stiffness(u, kx, ky, hx2, hy2, out):
    """Flux-form div(k grad u) with mirrored ghost nodes (zero normal derivative)."""
    fx = kx * (u[:, 1:] - u[:, :-1])
    out[:, 1:-1] = fx[:, 1:] - fx[:, :-1]
    out[:, 0] = 2.0 * fx[:, 0]
    out[:, -1] = -2.0 * fx[:, -1]
    out /= hx2
    fy = ky * (u[1:, :] - u[:-1, :])
    dy = np.empty_like(u)
    dy[1:-1, :] = fy[1:, :] - fy[:-1, :]
    dy[0, :] = 2.0 * fy[0, :]
    dy[-1, :] = -2.0 * fy[-1, :]
    out += dy / hy2
    return out


def _integrate(m, ts, inject, keep_every_state, sensor_idx, first_step_half):
    """Shared leapfrog loop.

    ``inject(step, rhs2d)`` adds the source for the update producing state
    ``step``; with ``first_step_half`` the very first update carries the 1/2
    Taylor weight of a quiescent second-order start (forward convention),
    without it the first state gets the full dt^2/m kick (adjoint convention).
    Returns (traces (n_sensors, nt) or None, states (nt, n_nodes) or None).
    """
    grid = m.grid
    kx, ky, mass = _edge_coefficients(m)
    hx2, hy2 = grid.hx**2, grid.hy**2
    dt2 = ts.dt * ts.dt

    u_prev = np.zeros(grid.shape)
    u = np.zeros(grid.shape)
    states = np.zeros((ts.nt, grid.n_nodes)) if keep_every_state else None
    traces = None
    if sensor_idx is not None:
        six, siy = sensor_idx
        traces = np.zeros((len(six), ts.nt))
        traces[:, 0] = u[siy, six]

    rhs = np.empty(grid.shape)
    for n in range(1, ts.nt):
        _apply_stiffness(u, kx, ky, hx2, hy2, rhs)
        inject(n, rhs)
        if n == 1 and first_step_half:
            u_next = u + (0.5 * dt2 / mass) * rhs
        else:
            u_next = 2.0 * u - u_prev + (dt2 / mass) * rhs
        peak = float(np.max(np.abs(u_next)))
        if not peak < MAX_AMPLITUDE:
            raise DivergenceError(n, peak)
        u_prev, u = u, u_next
        if states is not None:
            states[n] = u.ravel()
        if traces is not None:
            traces[:, n] = u[siy, six]
    return traces, states


def solve_forward(
    m: MaterialModel,
    s: SourceSpec,
    ts: TimeSpec,
    sensors: SensorArray,
    keep_field: bool = False,
) -> tuple[SensorTraces, SpaceTimeField | None]:
    """Integrate the wave equation from rest and record sensor traces.

    The source is injected at the node nearest (xs, ys) as burst(t)/(hx*hy),
    a collocated discrete Dirac. Requires dt <= stable_dt(grid, c0, 1).
    """
    grid = m.grid
    if grid.nx < MIN_SOLVER_NODES or grid.ny < MIN_SOLVER_NODES:
        raise ValueError(
            f"solver requires at least {MIN_SOLVER_NODES} nodes per axis, got {grid.nx}x{grid.ny}"
        )
    if ts.dt > stable_dt(grid, m.c0, 1.0) * (1 + 1e-12):
        raise ValueError(
            f"dt={ts.dt} exceeds the stability bound {stable_dt(grid, m.c0, 1.0)}"
        )
    si = int(round(s.xs / grid.hx))
    sj = int(round(s.ys / grid.hy))
    if not (0 <= si < grid.nx and 0 <= sj < grid.ny):
        raise ValueError(f"source position ({s.xs}, {s.ys}) outside the grid")
    scale = 1.0 / (grid.hx * grid.hy)
    dt = ts.dt

    def inject(n, rhs):
        # update producing state n uses the source sampled at t_{n-1}
        rhs[sj, si] += burst((n - 1) * dt, s) * scale

    traces, states = _integrate(
        m, ts, inject, keep_field, sensors.node_indices(grid), first_step_half=True
    )
    field_out = SpaceTimeField(grid, states) if keep_field else None
    return SensorTraces(traces, ts.dt), field_out
