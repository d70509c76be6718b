"""Spatial grid, nodal field containers, and ellipse rasterization.

All values live on a node-centered, corner-anchored grid: node (i, j) sits at
(i * hx, j * hy), boundary nodes included. Field arrays are stored flat in
row-major (j, i) order so ``values.reshape(ny, nx)[j, i]`` is the node value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridSpec",
    "ScalarField",
    "EllipseParams",
    "rasterize_ellipse",
    "resample_nearest",
    "nearest_index_map",
    "resample_nearest_adjoint",
]


@dataclass(frozen=True)
class GridSpec:
    """Rectangular node grid covering [0, lx] x [0, ly]."""

    nx: int
    ny: int
    lx: float
    ly: float

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs at least 2 nodes per axis, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError(f"domain extents must be positive, got lx={self.lx}, ly={self.ly}")

    @property
    def hx(self) -> float:
        return self.lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.ly / (self.ny - 1)

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape of a nodal field, (ny, nx)."""
        return (self.ny, self.nx)

    def x_coords(self) -> np.ndarray:
        return np.arange(self.nx) * self.hx

    def y_coords(self) -> np.ndarray:
        return np.arange(self.ny) * self.hy

    def node_weights(self) -> np.ndarray:
        """Trapezoid quadrature weights per node (1 interior, 1/2 edge, 1/4 corner),
        shape (ny, nx). Cell area of node (i, j) is weight * hx * hy."""
        wx = np.ones(self.nx)
        wx[0] = wx[-1] = 0.5
        wy = np.ones(self.ny)
        wy[0] = wy[-1] = 0.5
        return np.outer(wy, wx)

    def cell_areas(self) -> np.ndarray:
        return self.node_weights() * (self.hx * self.hy)


@dataclass(frozen=True)
class ScalarField:
    """A real-valued nodal field on a grid. Immutable after construction."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        if v.size != self.grid.n_nodes:
            raise ValueError(f"expected {self.grid.n_nodes} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def as2d(self) -> np.ndarray:
        """View of the values as a (ny, nx) array."""
        return self.values.reshape(self.grid.shape)

    @classmethod
    def from2d(cls, grid: GridSpec, arr: np.ndarray) -> "ScalarField":
        arr = np.asarray(arr)
        if arr.shape != grid.shape:
            raise ValueError(f"expected shape {grid.shape}, got {arr.shape}")
        return cls(grid, arr.ravel())

    @classmethod
    def constant(cls, grid: GridSpec, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.n_nodes, float(value)))


@dataclass(frozen=True)
class EllipseParams:
    """Elliptical void geometry: center (xc, yc), semi-axes a >= b, rotation theta.

    The constructor canonicalizes: if b > a the axes are swapped and theta is
    advanced by pi/2 (same point set), and theta is reduced modulo pi.
    """

    xc: float
    yc: float
    a: float
    b: float
    theta: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"semi-axes must be positive, got a={self.a}, b={self.b}")
        a, b, th = self.a, self.b, self.theta
        if b > a:
            a, b, th = b, a, th + math.pi / 2
        th = th % math.pi
        object.__setattr__(self, "a", float(a))
        object.__setattr__(self, "b", float(b))
        object.__setattr__(self, "theta", float(th))

    def bbox_half_extents(self) -> tuple[float, float]:
        """Axis-aligned bounding-box half widths of the rotated ellipse."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        wx = math.hypot(self.a * c, self.b * s)
        wy = math.hypot(self.a * s, self.b * c)
        return wx, wy

    def margin(self, lx: float, ly: float) -> float:
        """Smallest distance from the ellipse to the domain boundary (negative
        if it sticks out)."""
        wx, wy = self.bbox_half_extents()
        return min(self.xc - wx, lx - self.xc - wx, self.yc - wy, ly - self.yc - wy)


def rasterize_ellipse(e: EllipseParams, grid: GridSpec, eps: float) -> ScalarField:
    """Nodal scaling field: ``eps`` inside the ellipse (boundary inclusive), 1 outside.

    Raises ValueError if the ellipse is not entirely inside the domain or eps
    is outside (0, 1).
    """
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if e.margin(grid.lx, grid.ly) < 0:
        raise ValueError(
            f"ellipse extends outside the domain [0,{grid.lx}]x[0,{grid.ly}]: {e}"
        )
    X, Y = np.meshgrid(grid.x_coords(), grid.y_coords())
    dx = X - e.xc
    dy = Y - e.yc
    c, s = math.cos(e.theta), math.sin(e.theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    inside = u * u / (e.a * e.a) + v * v / (e.b * e.b) <= 1.0
    return ScalarField.from2d(grid, np.where(inside, eps, 1.0))


def nearest_index_map(src: GridSpec, dst: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis indices of the source node nearest to each destination node.

    Ties break toward the lower index. Returns (ix, iy) with shapes (dst.nx,)
    and (dst.ny,).
    """

    def axis_map(n_src, h_src, n_dst, h_dst):
        t = np.arange(n_dst) * (h_dst / h_src)
        idx = np.ceil(t - 0.5).astype(np.intp)  # round half down
        return np.clip(idx, 0, n_src - 1)

    ix = axis_map(src.nx, src.hx, dst.nx, dst.hx)
    iy = axis_map(src.ny, src.hy, dst.ny, dst.hy)
    return ix, iy


def resample_nearest(src: ScalarField, dst_grid: GridSpec) -> ScalarField:
    """Resample a field onto another grid by nearest-node lookup."""
    ix, iy = nearest_index_map(src.grid, dst_grid)
    vals = src.as2d()[np.ix_(iy, ix)]
    return ScalarField.from2d(dst_grid, vals)


def resample_nearest_adjoint(
    dst_values: np.ndarray, src: GridSpec, dst: GridSpec
) -> np.ndarray:
    """Transpose of :func:`resample_nearest` as a linear map: scatter-add each
    destination-node value back onto its source node. Input and output are
    (ny, nx) arrays."""
    dst_values = np.asarray(dst_values, dtype=np.float64)
    if dst_values.shape != dst.shape:
        raise ValueError(f"expected shape {dst.shape}, got {dst_values.shape}")
    ix, iy = nearest_index_map(src, dst)
    out = np.zeros(src.shape)
    flat_src = (iy[:, None] * src.nx + ix[None, :]).ravel()
    np.add.at(out.ravel(), flat_src, dst_values.ravel())
    return out
