"""Encoder-decoder network mapping sensor traces to a scaling field, with
hand-rolled reverse-mode differentiation.

The last quarter of each sensor trace (512 samples) is reshaped to a 32x16
channel. The encoder alternates 3x3 convolutions (PReLU) with 2x2 average
pooling down to an 8x4x32 bottleneck; the decoder alternates nearest-neighbour
2x upsampling with convolutions back up to 64x32, and a final convolution
plus adaptive sigmoid produces one channel in (0, 1), affinely mapped to
[eps, 1]. The first spatial axis of the network output runs along x, so the
returned field array is the transpose of the final feature map.

All parameters live in one flat float64 vector; forward and backward are
deterministic functions of (theta, input).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .io import guarded_write_bytes
from .solver import SensorTraces

__all__ = [
    "LayerSpec",
    "EncoderDecoderNet",
    "AdamState",
    "adam_step",
    "prepare_input",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointMismatch",
]

IN_ROWS, IN_COLS = 32, 16
IN_SAMPLES = IN_ROWS * IN_COLS  # trace samples fed to the network per channel

_KIND_IDS = {
    "conv2d": 1,
    "prelu": 2,
    "avgpool2x2": 3,
    "upsample_nearest2x": 4,
    "adaptive_sigmoid": 5,
}
_KIND_NAMES = {v: k for k, v in _KIND_IDS.items()}

_CHECKPOINT_MAGIC = b"WFC1"


class CheckpointMismatch(RuntimeError):
    """Checkpoint architecture differs from the constructed network."""


@dataclass(frozen=True)
class LayerSpec:
    """One network stage. Convolutions are 3x3, stride 1, zero padding 1;
    prelu and adaptive_sigmoid carry one learnable scalar each."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0

    def __post_init__(self):
        if self.kind not in _KIND_IDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and not (self.in_channels >= 1 and self.out_channels >= 1):
            raise ValueError("conv2d needs in_channels and out_channels >= 1")

    @property
    def n_params(self) -> int:
        if self.kind == "conv2d":
            return self.out_channels * self.in_channels * 9 + self.out_channels
        if self.kind in ("prelu", "adaptive_sigmoid"):
            return 1
        return 0


def _conv_windows(xp: np.ndarray) -> np.ndarray:
    c, hp, wp = xp.shape
    sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (c, hp - 2, wp - 2, 3, 3), (sc, sh, sw, sh, sw), writeable=False
    )


class EncoderDecoderNet:
    def __init__(self, layers: list[LayerSpec], n_channels: int, eps: float = 1e-3):
        if not 0.0 < eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {eps}")
        self.layers = list(layers)
        self.n_channels = int(n_channels)
        self.eps = float(eps)
        self._offsets = np.cumsum([0] + [l.n_params for l in self.layers])
        self.theta = np.zeros(int(self._offsets[-1]))
        self.freeze_mask = np.zeros(len(self.layers), dtype=bool)
        self._cache = None
        self.output_shape = self._check_shapes()

    @classmethod
    def build(
        cls,
        n_channels: int,
        enc_channels: tuple[int, int] = (16, 32),
        dec_channels: tuple[int, int, int] = (16, 8, 8),
        eps: float = 1e-3,
    ) -> "EncoderDecoderNet":
        """Default topology: two conv/pool encoder stages, three upsample/conv
        decoder stages, final 1-channel conv with adaptive sigmoid."""
        layers = []
        ch = n_channels
        for out in enc_channels:
            layers += [
                LayerSpec("conv2d", ch, out),
                LayerSpec("prelu"),
                LayerSpec("avgpool2x2"),
            ]
            ch = out
        for out in dec_channels:
            layers += [
                LayerSpec("upsample_nearest2x"),
                LayerSpec("conv2d", ch, out),
                LayerSpec("prelu"),
            ]
            ch = out
        layers += [LayerSpec("conv2d", ch, 1), LayerSpec("adaptive_sigmoid")]
        return cls(layers, n_channels, eps)

    @property
    def n_encoder_layers(self) -> int:
        """Layers up to and including the last pooling stage."""
        last = max(i for i, l in enumerate(self.layers) if l.kind == "avgpool2x2")
        return last + 1

    @property
    def n_params(self) -> int:
        return self.theta.size

    def _check_shapes(self) -> tuple[int, int]:
        c, h, w = self.n_channels, IN_ROWS, IN_COLS
        for i, l in enumerate(self.layers):
            if l.kind == "conv2d":
                if l.in_channels != c:
                    raise ValueError(
                        f"layer {i}: conv2d expects {l.in_channels} channels, gets {c}"
                    )
                c = l.out_channels
            elif l.kind == "avgpool2x2":
                if h % 2 or w % 2:
                    raise ValueError(f"layer {i}: cannot pool odd shape {h}x{w}")
                h, w = h // 2, w // 2
            elif l.kind == "upsample_nearest2x":
                h, w = 2 * h, 2 * w
        if c != 1:
            raise ValueError(f"network must end with one channel, ends with {c}")
        return (w, h)  # (ny, nx): output rows run along x

    def layer_theta(self, i: int) -> np.ndarray:
        return self.theta[self._offsets[i] : self._offsets[i + 1]]

    @property
    def frozen_param_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_params, dtype=bool)
        for i, frozen in enumerate(self.freeze_mask):
            if frozen:
                mask[self._offsets[i] : self._offsets[i + 1]] = True
        return mask

    def freeze_prefix(self, k: int):
        if not 0 <= k <= len(self.layers):
            raise ValueError(f"freeze prefix {k} out of range 0..{len(self.layers)}")
        self.freeze_mask[:] = False
        self.freeze_mask[:k] = True

    def init_glorot(self, seed: int):
        """Uniform +-sqrt(6/(fan_in+fan_out)) conv weights, zero biases,
        PReLU slopes 0.25, sigmoid steepness 1."""
        rng = np.random.default_rng(seed)
        for i, l in enumerate(self.layers):
            p = self.layer_theta(i)
            if l.kind == "conv2d":
                fan_in = l.in_channels * 9
                fan_out = l.out_channels * 9
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                nw = l.out_channels * l.in_channels * 9
                p[:nw] = rng.uniform(-bound, bound, nw)
                p[nw:] = 0.0
            elif l.kind == "prelu":
                p[:] = 0.25
            elif l.kind == "adaptive_sigmoid":
                p[:] = 1.0
        return self

    def architecture_key(self) -> tuple:
        return tuple((l.kind, l.in_channels, l.out_channels) for l in self.layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Map an input tensor (n_channels, 32, 16) to a gamma array of shape
        ``output_shape`` with values in [eps, 1]; caches activations for
        :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_channels, IN_ROWS, IN_COLS):
            raise ValueError(
                f"expected input shape {(self.n_channels, IN_ROWS, IN_COLS)}, got {x.shape}"
            )
        cache = {"x": x.copy(), "inputs": []}
        a = x
        for i, l in enumerate(self.layers):
            p = self.layer_theta(i)
            if l.kind == "conv2d":
                xp = np.pad(a, ((0, 0), (1, 1), (1, 1)))
                cache["inputs"].append(xp)
                wgt = p[: l.out_channels * l.in_channels * 9].reshape(
                    l.out_channels, l.in_channels, 3, 3
                )
                bias = p[l.out_channels * l.in_channels * 9 :]
                a = np.einsum("chwij,ocij->ohw", _conv_windows(xp), wgt)
                a += bias[:, None, None]
            elif l.kind == "prelu":
                cache["inputs"].append(a)
                a = np.where(a > 0, a, p[0] * a)
            elif l.kind == "avgpool2x2":
                cache["inputs"].append(a)
                c, h, w = a.shape
                a = a.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
            elif l.kind == "upsample_nearest2x":
                cache["inputs"].append(a)
                a = a.repeat(2, axis=1).repeat(2, axis=2)
            elif l.kind == "adaptive_sigmoid":
                cache["inputs"].append(a)
                a = expit(p[0] * a)
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(
                    f"non-finite activation after layer {i} ({l.kind})"
                )
        cache["out"] = a
        self._cache = cache
        gamma = self.eps + (1.0 - self.eps) * a[0]
        return gamma.T.copy()

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product: gradient of sum(upstream * forward(x))
        with respect to theta, using the cached forward pass. Entries of
        frozen layers are included (they are zeroed at the update stage)."""
        if self._cache is None:
            raise RuntimeError("backward called before forward; no cached activations")
        cache = self._cache
        grad = np.zeros_like(self.theta)
        da = ((1.0 - self.eps) * np.asarray(upstream, dtype=np.float64).T)[None]
        a_out = cache["out"]
        for i in range(len(self.layers) - 1, -1, -1):
            l = self.layers[i]
            p = self.layer_theta(i)
            gslice = grad[self._offsets[i] : self._offsets[i + 1]]
            a_in = cache["inputs"][i]
            if l.kind == "conv2d":
                nw = l.out_channels * l.in_channels * 9
                wgt = p[:nw].reshape(l.out_channels, l.in_channels, 3, 3)
                gslice[:nw] = np.einsum(
                    "ohw,chwij->ocij", da, _conv_windows(a_in)
                ).ravel()
                gslice[nw:] = da.sum(axis=(1, 2))
                upp = np.pad(da, ((0, 0), (1, 1), (1, 1)))
                da = np.einsum(
                    "ohwij,ocij->chw", _conv_windows(upp), wgt[:, :, ::-1, ::-1]
                )
            elif l.kind == "prelu":
                gslice[0] = np.sum(da * np.where(a_in > 0, 0.0, a_in))
                da = da * np.where(a_in > 0, 1.0, p[0])
            elif l.kind == "avgpool2x2":
                da = da.repeat(2, axis=1).repeat(2, axis=2) / 4.0
            elif l.kind == "upsample_nearest2x":
                c, h, w = da.shape
                da = da.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))
            elif l.kind == "adaptive_sigmoid":
                sig = a_out if i == len(self.layers) - 1 else expit(p[0] * a_in)
                dsig = sig * (1.0 - sig)
                gslice[0] = np.sum(da * a_in * dsig)
                da = da * p[0] * dsig
        return grad


def prepare_input(
    traces: SensorTraces, channel_scale: np.ndarray | None = None
) -> np.ndarray:
    """Reshape the last quarter of each trace into a 32x16 channel and divide
    by the per-channel training-split scale (non-positive scales pass through
    unscaled)."""
    nt = traces.nt
    if nt % 4 != 0 or nt // 4 != IN_SAMPLES:
        raise ValueError(
            f"network input needs nt = {4 * IN_SAMPLES} (last quarter = "
            f"{IN_SAMPLES} samples), got nt = {nt}"
        )
    tail = traces.data[:, 3 * nt // 4 :]
    x = tail.reshape(traces.n_sensors, IN_ROWS, IN_COLS).astype(np.float64)
    if channel_scale is not None:
        scale = np.asarray(channel_scale, dtype=np.float64).ravel()
        if scale.size != traces.n_sensors:
            raise ValueError(
                f"channel_scale has {scale.size} entries for {traces.n_sensors} sensors"
            )
        x = x / np.where(scale > 0, scale, 1.0)[:, None, None]
    return x


@dataclass
class AdamState:
    """First/second moment accumulators; frozen entries never accumulate."""

    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def ensure(self, n: int):
        if self.m is None:
            self.m = np.zeros(n)
            self.v = np.zeros(n)
        elif self.m.size != n:
            raise ValueError(f"moment vectors sized {self.m.size}, need {n}")
        return self


def adam_step(net: EncoderDecoderNet, state: AdamState, grad: np.ndarray):
    """One bias-corrected Adam update of net.theta in place; frozen layers
    stay bit-identical."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != net.theta.shape:
        raise ValueError(f"gradient length {grad.size} != parameter length {net.theta.size}")
    state.ensure(net.n_params)
    frozen = net.frozen_param_mask
    g = np.where(frozen, 0.0, grad)
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = state.m / (1 - state.beta1**state.step)
    vhat = state.v / (1 - state.beta2**state.step)
    theta = net.theta - state.alpha * mhat / (np.sqrt(vhat) + state.eps_adam)
    theta[frozen] = net.theta[frozen]
    net.theta = theta


def checkpoint_to_bytes(net: EncoderDecoderNet, adam: AdamState | None = None) -> bytes:
    parts = [struct.pack("<4sI", _CHECKPOINT_MAGIC, len(net.layers))]
    for l, frozen in zip(net.layers, net.freeze_mask):
        shape = (l.in_channels, l.out_channels) if l.kind == "conv2d" else ()
        parts.append(struct.pack("<II", _KIND_IDS[l.kind], len(shape)))
        for s in shape:
            parts.append(struct.pack("<I", s))
        parts.append(struct.pack("<I", int(frozen)))
    parts.append(struct.pack("<Q", net.n_params))
    parts.append(net.theta.astype("<f8").tobytes())
    if adam is None:
        parts.append(struct.pack("<I", 0))
    else:
        adam.ensure(net.n_params)
        parts.append(struct.pack("<IQ", 1, adam.step))
        parts.append(adam.m.astype("<f8").tobytes())
        parts.append(adam.v.astype("<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, net, adam: AdamState | None = None, force: bool = False):
    guarded_write_bytes(path, checkpoint_to_bytes(net, adam), force=force)


def load_checkpoint(path):
    """Returns (layers, freeze_flags, theta, adam_state_or_None)."""
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != _CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a WFC1 checkpoint file")
    (n_layers,) = struct.unpack("<I", blob[4:8])
    pos = 8
    layers, frozen = [], []
    for _ in range(n_layers):
        kind_id, n_shape = struct.unpack("<II", blob[pos : pos + 8])
        pos += 8
        shape = struct.unpack(f"<{n_shape}I", blob[pos : pos + 4 * n_shape])
        pos += 4 * n_shape
        (fr,) = struct.unpack("<I", blob[pos : pos + 4])
        pos += 4
        kind = _KIND_NAMES.get(kind_id)
        if kind is None:
            raise ValueError(f"{path}: unknown layer kind id {kind_id}")
        if kind == "conv2d":
            layers.append(LayerSpec(kind, shape[0], shape[1]))
        else:
            layers.append(LayerSpec(kind))
        frozen.append(bool(fr))
    (n_theta,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    theta = np.frombuffer(blob[pos : pos + 8 * n_theta], dtype="<f8").copy()
    pos += 8 * n_theta
    (has_adam,) = struct.unpack("<I", blob[pos : pos + 4])
    pos += 4
    adam = None
    if has_adam:
        (step,) = struct.unpack("<Q", blob[pos : pos + 8])
        pos += 8
        m = np.frombuffer(blob[pos : pos + 8 * n_theta], dtype="<f8").copy()
        pos += 8 * n_theta
        v = np.frombuffer(blob[pos : pos + 8 * n_theta], dtype="<f8").copy()
        adam = AdamState(step=step, m=m, v=v)
    return layers, frozen, theta, adam
