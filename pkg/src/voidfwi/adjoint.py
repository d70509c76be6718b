"""Measurement misfit, adjoint wavefield, and the gradient of the misfit with
respect to the nodal scaling field gamma.

The gradient is assembled as the exact discrete adjoint of the leapfrog
scheme: the adjoint field solves the same wave equation driven by the
time-reversed residuals injected at the sensor nodes, and the kernel
correlates the two histories with the same staggered differences the scheme
itself uses. Pairing the discretizations exactly (rather than re-discretizing
the continuous kernel with central differences) is what makes the result
match finite differences of the discrete loss to near machine precision; all
sign and scaling conventions below are anchored by that check, not by
notation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, ScalarField
from .solver import (
    MaterialModel,
    SensorArray,
    SensorTraces,
    SpaceTimeField,
    TimeSpec,
    _integrate,
    stable_dt,
)

__all__ = [
    "Residuals",
    "FrechetKernel",
    "measurement_loss",
    "residuals",
    "solve_adjoint",
    "frechet_kernel",
    "gamma_gradient",
    "misfit_gradient",
]

_CHUNK = 128  # time rows per block in the kernel correlation


@dataclass(frozen=True)
class Residuals:
    """Predicted-minus-measured sensor traces, shape (n_sensors, nt)."""

    data: np.ndarray
    dt: float

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError(f"residuals must be 2D (sensors, time), got {d.ndim}D")
        if not np.all(np.isfinite(d)):
            raise ValueError("residuals must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)


@dataclass(frozen=True)
class FrechetKernel:
    """Pointwise gradient density: misfit gradient = kernel * node cell area."""

    field: ScalarField


def _check_same_axes(pred: SensorTraces, meas: SensorTraces):
    if pred.data.shape != meas.data.shape:
        raise ValueError(
            f"trace shapes differ: {pred.data.shape} vs {meas.data.shape}"
        )
    if pred.dt != meas.dt:
        raise ValueError(f"trace time steps differ: {pred.dt} vs {meas.dt}")


def measurement_loss(pred: SensorTraces, meas: SensorTraces) -> float:
    """Misfit 1/2 * sum_i sum_n (pred - meas)^2 * dt (rectangle rule)."""
    _check_same_axes(pred, meas)
    r = pred.data - meas.data
    return 0.5 * float(np.sum(r * r)) * pred.dt


def residuals(pred: SensorTraces, meas: SensorTraces) -> Residuals:
    _check_same_axes(pred, meas)
    return Residuals(pred.data - meas.data, pred.dt)


def solve_adjoint(
    m: MaterialModel, res: Residuals, ts: TimeSpec, sensors: SensorArray
) -> SpaceTimeField:
    """Integrate the adjoint wavefield in reversed time tau = T - t.

    The same leapfrog operator is driven from rest by the time-reversed
    residuals, each injected at its sensor node as a collocated Dirac
    r / (w * hx * hy); w is the node's trapezoid weight, so the discrete
    source integrates to r over the domain even on boundary nodes. Snapshot q
    of the returned history is the adjoint state after q reversed steps
    (snapshot 0 is the quiescent start).
    """
    grid = m.grid
    if res.data.shape != (len(sensors), ts.nt):
        raise ValueError(
            f"residuals shape {res.data.shape} does not match "
            f"{len(sensors)} sensors x {ts.nt} steps"
        )
    if abs(res.dt - ts.dt) > 1e-15 * ts.dt:
        raise ValueError(f"residual dt {res.dt} differs from time spec dt {ts.dt}")
    if ts.dt > stable_dt(grid, m.c0, 1.0) * (1 + 1e-12):
        raise ValueError(
            f"dt={ts.dt} exceeds the stability bound {stable_dt(grid, m.c0, 1.0)}"
        )
    six, siy = sensors.node_indices(grid)
    w = grid.node_weights()
    scale = 1.0 / (w[siy, six] * grid.hx * grid.hy)
    r = res.data
    nt = ts.nt

    def inject(n, rhs):
        # reversed step n carries the residual sample at original index nt - n
        np.add.at(rhs, (siy, six), r[:, nt - n] * scale)

    _, states = _integrate(
        m, ts, inject, keep_every_state=True, sensor_idx=None, first_step_half=False
    )
    return SpaceTimeField(grid, states)


def frechet_kernel(
    u: SpaceTimeField, u_adj: SpaceTimeField, m: MaterialModel, ts: TimeSpec
) -> FrechetKernel:
    """Correlate forward and adjoint histories into the gradient density.

    Two terms mirror the two gamma dependencies of the scheme: the mass term
    pairs the adjoint state with the second time difference of the forward
    field, and the stiffness term pairs the edge differences of both fields
    weighted by the derivative of the harmonic edge average.
    """
    if u.grid != u_adj.grid:
        raise ValueError("forward and adjoint fields live on different grids")
    if u.nt != ts.nt or u_adj.nt != ts.nt:
        raise ValueError(
            f"history lengths {u.nt}, {u_adj.nt} do not match nt={ts.nt}"
        )
    grid = u.grid
    nt = ts.nt
    ny, nx = grid.shape
    hx, hy, dt = grid.hx, grid.hy, ts.dt
    g = m.gamma.as2d()
    wnode = grid.node_weights()

    U = u.snapshots
    H = u_adj.snapshots

    # mass term: sum_m H[nt-m] * (u^m - 2u^{m-1} + u^{m-2}), u^{-1} := 0
    d2 = np.empty((nt - 1, U.shape[1]))
    d2[0] = U[1] - 2.0 * U[0]
    if nt > 2:
        d2[1:] = U[2:] - 2.0 * U[1:-1] + U[:-2]
    t1 = np.zeros(U.shape[1])
    rev = d2[::-1]
    for lo in range(0, nt - 1, _CHUNK):
        hi = min(lo + _CHUNK, nt - 1)
        t1 += np.einsum("ij,ij->j", H[1 + lo : 1 + hi], rev[lo:hi])

    # stiffness term: per-edge correlation sum_j dH[j] * dU[nt-1-j], j = 1..nt-2
    cx = np.zeros((ny, nx - 1))
    cy = np.zeros((ny - 1, nx))
    H3 = H.reshape(nt, ny, nx)
    RU = U[::-1].reshape(nt, ny, nx)
    for lo in range(1, nt - 1, _CHUNK):
        hi = min(lo + _CHUNK, nt - 1)
        a = H3[lo:hi]
        b = RU[lo:hi]
        cx += np.einsum("tkr,tkr->kr", a[:, :, 1:] - a[:, :, :-1], b[:, :, 1:] - b[:, :, :-1])
        cy += np.einsum("tkr,tkr->kr", a[:, 1:, :] - a[:, :-1, :], b[:, 1:, :] - b[:, :-1, :])

    # d/dgamma of the harmonic edge mean 2 a b / (a + b)
    sx = g[:, :-1] + g[:, 1:]
    dk_left = 2.0 * g[:, 1:] ** 2 / sx**2
    dk_right = 2.0 * g[:, :-1] ** 2 / sx**2
    sy = g[:-1, :] + g[1:, :]
    dk_down = 2.0 * g[1:, :] ** 2 / sy**2
    dk_up = 2.0 * g[:-1, :] ** 2 / sy**2

    wx = np.ones(nx)
    wx[0] = wx[-1] = 0.5
    wy = np.ones(ny)
    wy[0] = wy[-1] = 0.5

    scat = np.zeros((ny, nx))
    ex = wy[:, None] * cx / hx**2
    scat[:, :-1] += ex * dk_left
    scat[:, 1:] += ex * dk_right
    ey = wx[None, :] * cy / hy**2
    scat[:-1, :] += ey * dk_down
    scat[1:, :] += ey * dk_up

    k2d = -(m.rho0 / dt) * t1.reshape(ny, nx) - dt * m.rho0 * m.c0**2 * scat / wnode
    return FrechetKernel(ScalarField.from2d(grid, k2d))


def gamma_gradient(k: FrechetKernel, grid: GridSpec) -> ScalarField:
    """Nodal gradient: kernel density times the node cell area (trapezoid
    weights: half on edges, quarter at corners)."""
    if k.field.grid != grid:
        raise ValueError("kernel grid does not match the requested grid")
    return ScalarField.from2d(grid, k.field.as2d() * grid.cell_areas())


def misfit_gradient(
    m: MaterialModel,
    pred: SensorTraces,
    meas: SensorTraces,
    ts: TimeSpec,
    sensors: SensorArray,
    u: SpaceTimeField,
) -> tuple[float, ScalarField]:
    """Loss and its nodal gamma gradient from a completed forward solve."""
    loss = measurement_loss(pred, meas)
    adj = solve_adjoint(m, residuals(pred, meas), ts, sensors)
    kern = frechet_kernel(u, adj, m, ts)
    return loss, gamma_gradient(kern, m.grid)
