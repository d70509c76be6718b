"""The two optimization loops: supervised pretraining of the network on
labeled fields, and physics-driven inversion of a single measurement where
the misfit gradient flows through the adjoint solve into backpropagation.

One inversion epoch is one full gradient step: forward solve, adjoint solve,
kernel assembly, backpropagation, Adam update. Histories record the state at
the start of each epoch, so row 0 is the untrained (or transferred) network
and a run with max_epochs=0 is a pure evaluation.
"""

from __future__ import annotations

import io as _io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adjoint import misfit_gradient
from .config import ExperimentConfig
from .grid import (
    GridSpec,
    ScalarField,
    resample_nearest,
    resample_nearest_adjoint,
)
from .metrics import average_precision_score, binarize_labels
from .network import (
    AdamState,
    EncoderDecoderNet,
    adam_step,
    load_checkpoint,
    prepare_input,
)
from .solver import MaterialModel, SensorArray, SensorTraces, SourceSpec, TimeSpec, solve_forward

__all__ = [
    "ForwardSetup",
    "HistoryRow",
    "RunHistory",
    "TrainingAborted",
    "pretrain",
    "fwi_gradient",
    "run_fwi",
    "transfer_weights",
]

CSV_HEADER = "epoch,loss_m,loss_d,avg_precision,wall_ms"


class TrainingAborted(RuntimeError):
    """Non-finite loss; carries the history recorded up to the failure."""

    def __init__(self, message: str, history: "RunHistory"):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class ForwardSetup:
    """Everything the deterministic forward operator needs besides gamma."""

    grid: GridSpec
    rho0: float
    c0: float
    source: SourceSpec
    timespec: TimeSpec
    sensors: SensorArray

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "ForwardSetup":
        return cls(
            grid=cfg.make_grid(),
            rho0=cfg.material.rho0,
            c0=cfg.material.c0,
            source=cfg.make_source(),
            timespec=cfg.make_timespec(),
            sensors=cfg.make_sensors(),
        )


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    loss_m: float | None = None
    loss_d: float | None = None
    avg_precision: float | None = None
    wall_ms: float | None = None


@dataclass
class RunHistory:
    rows: list[HistoryRow] = field(default_factory=list)

    def add(self, **kw):
        row = HistoryRow(**kw)
        for name in ("loss_m", "loss_d", "avg_precision"):
            v = getattr(row, name)
            if v is not None and not np.isfinite(v):
                raise ValueError(f"non-finite {name} at epoch {row.epoch}")
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def first_epoch_reaching(self, ap_target: float) -> int | None:
        for r in self.rows:
            if r.avg_precision is not None and r.avg_precision >= ap_target:
                return r.epoch
        return None

    def to_csv(self, include_timings: bool = False) -> str:
        """Timings are omitted by default so identical reruns produce
        byte-identical files."""

        def fmt(v):
            return "" if v is None else repr(float(v))

        out = _io.StringIO()
        out.write(CSV_HEADER + "\n")
        for r in self.rows:
            wall = fmt(r.wall_ms) if include_timings else ""
            out.write(
                f"{r.epoch},{fmt(r.loss_m)},{fmt(r.loss_d)},{fmt(r.avg_precision)},{wall}\n"
            )
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RunHistory":
        lines = text.strip().splitlines()
        if not lines or lines[0] != CSV_HEADER:
            raise ValueError(f"history CSV must start with header {CSV_HEADER!r}")
        hist = cls()
        for line in lines[1:]:
            cells = line.split(",")
            if len(cells) != 5:
                raise ValueError(f"malformed history row: {line!r}")
            vals = [None if c == "" else float(c) for c in cells[1:]]
            hist.add(
                epoch=int(cells[0]),
                loss_m=vals[0],
                loss_d=vals[1],
                avg_precision=vals[2],
                wall_ms=vals[3],
            )
        return hist


def field_mse_loss(pred2d: np.ndarray, target2d: np.ndarray, grid: GridSpec):
    """Supervised field misfit 1/2 * sum (pred - target)^2 * hx * hy and its
    gradient with respect to the prediction."""
    diff = pred2d - target2d
    area = grid.hx * grid.hy
    return 0.5 * float(np.sum(diff * diff)) * area, diff * area


def network_grid(net: EncoderDecoderNet, lx: float, ly: float) -> GridSpec:
    ny, nx = net.output_shape
    return GridSpec(nx, ny, lx, ly)


def pretrain(
    net: EncoderDecoderNet,
    inputs: list[np.ndarray],
    targets: list[ScalarField],
    epochs: int,
    lr: float,
    batch_size: int = 8,
    seed: int = 0,
) -> RunHistory:
    """Minimize the summed field misfit over the sample set with Adam.

    ``inputs`` are prepared network tensors; ``targets`` are the true fields
    (resampled to the network output grid if needed). Batch order reshuffles
    every epoch from the given seed. Returns one history row per epoch with
    the summed loss and mean average precision over the set.
    """
    if len(inputs) != len(targets) or not inputs:
        raise ValueError("need equally many inputs and targets, at least one each")
    net_grid = network_grid(net, targets[0].grid.lx, targets[0].grid.ly)
    t2d = [resample_nearest(t, net_grid).as2d() for t in targets]
    labels = [binarize_labels(t) for t in t2d]
    rng = np.random.default_rng(seed)
    adam = AdamState(alpha=lr)
    history = RunHistory()
    n = len(inputs)
    batch_size = max(1, min(batch_size, n))
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total_loss = 0.0
        ap_sum = 0.0
        for lo in range(0, n, batch_size):
            batch = order[lo : lo + batch_size]
            grad = np.zeros_like(net.theta)
            for i in batch:
                pred = net.forward(inputs[i])
                loss_i, up = field_mse_loss(pred, t2d[i], net_grid)
                total_loss += loss_i
                ap_sum += average_precision_score(pred, labels[i])
                grad += net.backward(up)
            adam_step(net, adam, grad / len(batch))
        if not np.isfinite(total_loss):
            raise TrainingAborted(
                f"pretraining loss became non-finite at epoch {epoch}", history
            )
        history.add(
            epoch=epoch,
            loss_d=total_loss,
            avg_precision=ap_sum / n,
            wall_ms=1e3 * (time.perf_counter() - t0),
        )
    return history


def fwi_gradient(
    net: EncoderDecoderNet,
    x: np.ndarray,
    meas: SensorTraces,
    setup: ForwardSetup,
) -> tuple[float, np.ndarray, ScalarField]:
    """Full chain: network forward, resample to the solver grid, forward
    solve, misfit, adjoint gradient, pull back through the resampling, and
    backpropagate. Returns (loss, theta gradient, gamma on the solver grid)."""
    ngrid = network_grid(net, setup.grid.lx, setup.grid.ly)
    gamma_net = net.forward(x)
    gamma_field = ScalarField.from2d(ngrid, gamma_net)
    gamma_solver = resample_nearest(gamma_field, setup.grid)
    model = MaterialModel(setup.rho0, setup.c0, gamma_solver)
    pred, u = solve_forward(model, setup.source, setup.timespec, setup.sensors, keep_field=True)
    loss, g_solver = misfit_gradient(model, pred, meas, setup.timespec, setup.sensors, u)
    g_net = resample_nearest_adjoint(g_solver.as2d(), ngrid, setup.grid)
    return loss, net.backward(g_net), gamma_solver


def run_fwi(
    net: EncoderDecoderNet,
    meas: SensorTraces,
    setup: ForwardSetup,
    epochs: int,
    lr: float,
    gamma_true: ScalarField | None = None,
    ap_target: float | None = None,
    channel_scale: np.ndarray | None = None,
    snapshot_callback=None,
) -> RunHistory:
    """Iterate Adam on the physics misfit. Row ``j`` holds the metrics of the
    parameters entering epoch ``j``; the loop stops after the row whose
    average precision reaches ``ap_target`` (when the true field is known) or
    after ``epochs`` steps, whichever comes first."""
    x = prepare_input(meas, channel_scale)
    adam = AdamState(alpha=lr)
    history = RunHistory()
    labels = None
    if gamma_true is not None:
        if gamma_true.grid != setup.grid:
            gamma_true = resample_nearest(gamma_true, setup.grid)
        labels = binarize_labels(gamma_true)
    for epoch in range(epochs + 1):
        t0 = time.perf_counter()
        loss, grad, gamma_solver = fwi_gradient(net, x, meas, setup)
        if not np.isfinite(loss):
            raise TrainingAborted(
                f"inversion loss became non-finite at epoch {epoch}", history
            )
        ap = loss_d = None
        if labels is not None:
            ap = average_precision_score(gamma_solver.as2d(), labels)
            loss_d, _ = field_mse_loss(gamma_solver.as2d(), gamma_true.as2d(), setup.grid)
        history.add(
            epoch=epoch,
            loss_m=loss,
            loss_d=loss_d,
            avg_precision=ap,
            wall_ms=1e3 * (time.perf_counter() - t0),
        )
        if snapshot_callback is not None:
            snapshot_callback(epoch, gamma_solver)
        if ap is not None and ap_target is not None and ap >= ap_target:
            break
        if epoch == epochs:
            break
        adam_step(net, adam, grad)
    return history


def transfer_weights(checkpoint_path, net: EncoderDecoderNet, freeze_prefix: int = 0):
    """Load pretrained parameters into an identically built network and apply
    the freeze depth. Refuses on any architecture difference."""
    from .network import CheckpointMismatch

    layers, _, theta, _ = load_checkpoint(checkpoint_path)
    want = net.architecture_key()
    got = tuple((l.kind, l.in_channels, l.out_channels) for l in layers)
    if want != got:
        lines = [f"checkpoint architecture does not match the configured network:"]
        for i in range(max(len(want), len(got))):
            a = want[i] if i < len(want) else "(missing)"
            b = got[i] if i < len(got) else "(missing)"
            if a != b:
                lines.append(f"  layer {i}: network {a} vs checkpoint {b}")
        raise CheckpointMismatch("\n".join(lines))
    net.theta = theta.copy()
    net.freeze_prefix(freeze_prefix)
    return net
