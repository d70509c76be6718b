"""Scikit-learn style estimators wrapping the two training loops.

``VoidNetRegressor`` learns the supervised map from sensor traces to scaling
fields (the warm-start model); ``WaveformInverter`` fits the network to a
single measurement through the physics misfit. Both follow the usual
conventions: constructor arguments are stored verbatim, ``fit`` sets
trailing-underscore attributes, and ``get_params``/``set_params`` come from
``sklearn.base.BaseEstimator`` so the models compose with pipelines and
search utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .config import ExperimentConfig
from .grid import ScalarField, resample_nearest
from .network import prepare_input
from .solver import SensorTraces
from .training import ForwardSetup, network_grid, pretrain, run_fwi, transfer_weights
from .validation import check_fields_batch, check_is_fitted, check_traces_batch

__all__ = ["VoidNetRegressor", "WaveformInverter"]


class VoidNetRegressor(BaseEstimator, RegressorMixin):
    """Supervised traces-to-field regressor (the pretraining stage).

    Parameters mirror the config sections; ``config=None`` uses the package
    defaults. ``channel_scale=None`` derives the per-channel normalization
    from the fitted training data, matching the dataset convention.
    """

    def __init__(
        self,
        config: ExperimentConfig | None = None,
        epochs: int = 400,
        lr: float = 1e-3,
        batch_size: int = 8,
        seed: int = 0,
        channel_scale=None,
    ):
        self.config = config
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.channel_scale = channel_scale

    def _config(self) -> ExperimentConfig:
        return self.config if self.config is not None else ExperimentConfig()

    def fit(self, X, y):
        cfg = self._config()
        X = check_traces_batch(X, cfg.sensors.count, cfg.time.nt)
        grid = cfg.make_grid()
        y = check_fields_batch(y, grid.shape, X.shape[0])

        if self.channel_scale is not None:
            scale = np.asarray(self.channel_scale, dtype=np.float64)
        else:
            nt = cfg.time.nt
            scale = np.abs(X[:, :, 3 * nt // 4 :]).max(axis=(0, 2))
        self.channel_scale_ = scale

        dt = cfg.make_timespec().dt
        inputs = [prepare_input(SensorTraces(x, dt), scale) for x in X]
        targets = [ScalarField.from2d(grid, f) for f in y]
        net = cfg.make_network().init_glorot(self.seed)
        self.history_ = pretrain(
            net, inputs, targets,
            epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, seed=self.seed,
        )
        self.net_ = net
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        cfg = self._config()
        X = check_traces_batch(X, cfg.sensors.count, cfg.time.nt)
        grid = cfg.make_grid()
        dt = cfg.make_timespec().dt
        out = np.empty((X.shape[0],) + grid.shape)
        for i, x in enumerate(X):
            pred = self.net_.forward(prepare_input(SensorTraces(x, dt), self.channel_scale_))
            ngrid = network_grid(self.net_, grid.lx, grid.ly)
            out[i] = resample_nearest(ScalarField.from2d(ngrid, pred), grid).as2d()
        return out

    def score(self, X, y):
        """R^2 over flattened fields (RegressorMixin convention)."""
        from sklearn.metrics import r2_score

        cfg = self._config()
        grid = cfg.make_grid()
        y = check_fields_batch(y, grid.shape)
        pred = self.predict(X)
        return r2_score(y.reshape(len(y), -1), pred.reshape(len(pred), -1))


class WaveformInverter(BaseEstimator):
    """Adjoint-driven inversion of one measured trace set.

    ``fit(X, y=None)`` takes a single sample's traces (and optionally the true
    field, which enables per-epoch average precision and early stopping at
    ``ap_target``). The starting point is Glorot initialization, or a
    checkpoint file via ``init_checkpoint`` with the first ``freeze_prefix``
    layers frozen. After fitting, ``gamma_`` holds the recovered field on the
    solver grid and ``history_`` the per-epoch record.
    """

    def __init__(
        self,
        config: ExperimentConfig | None = None,
        epochs: int = 200,
        lr: float = 1e-3,
        ap_target: float | None = 0.99,
        seed: int = 0,
        init_checkpoint=None,
        freeze_prefix: int = 0,
        channel_scale=None,
    ):
        self.config = config
        self.epochs = epochs
        self.lr = lr
        self.ap_target = ap_target
        self.seed = seed
        self.init_checkpoint = init_checkpoint
        self.freeze_prefix = freeze_prefix
        self.channel_scale = channel_scale

    def _config(self) -> ExperimentConfig:
        return self.config if self.config is not None else ExperimentConfig()

    def fit(self, X, y=None):
        cfg = self._config()
        X = check_traces_batch(X, cfg.sensors.count, cfg.time.nt)
        if X.shape[0] != 1:
            raise ValueError(
                f"the inverter fits one specimen at a time, got {X.shape[0]} samples"
            )
        setup = ForwardSetup.from_config(cfg)
        meas = SensorTraces(X[0], setup.timespec.dt)

        gamma_true = None
        if y is not None:
            y = check_fields_batch(y, setup.grid.shape, 1)
            gamma_true = ScalarField.from2d(setup.grid, y[0])

        net = cfg.make_network().init_glorot(self.seed)
        if self.init_checkpoint is not None:
            transfer_weights(self.init_checkpoint, net, self.freeze_prefix)

        scale = None if self.channel_scale is None else np.asarray(self.channel_scale)
        self.history_ = run_fwi(
            net, meas, setup,
            epochs=self.epochs, lr=self.lr,
            gamma_true=gamma_true, ap_target=self.ap_target,
            channel_scale=scale,
        )
        self.net_ = net
        ngrid = network_grid(net, setup.grid.lx, setup.grid.ly)
        gamma_net = ScalarField.from2d(ngrid, net.forward(prepare_input(meas, scale)))
        self.gamma_ = resample_nearest(gamma_net, setup.grid).as2d()
        self.n_epochs_ = self.history_.rows[-1].epoch
        return self

    def predict(self, X):
        """Evaluate the (fitted) network on trace sets without further
        inversion."""
        check_is_fitted(self, "net_")
        cfg = self._config()
        X = check_traces_batch(X, cfg.sensors.count, cfg.time.nt)
        grid = cfg.make_grid()
        dt = cfg.make_timespec().dt
        scale = None if self.channel_scale is None else np.asarray(self.channel_scale)
        out = np.empty((X.shape[0],) + grid.shape)
        for i, x in enumerate(X):
            pred = self.net_.forward(prepare_input(SensorTraces(x, dt), scale))
            ngrid = network_grid(self.net_, grid.lx, grid.ly)
            out[i] = resample_nearest(ScalarField.from2d(ngrid, pred), grid).as2d()
        return out
