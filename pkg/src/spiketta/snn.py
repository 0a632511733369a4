"""Leaky integrate-and-fire network simulation with reverse-mode gradients.

Spike tensors are laid out time-major, ``(T, B, ...)``: ``T`` time steps,
``B`` independent samples simulated side by side. Convolution and dense
layers integrate their synaptic current into LIF neurons; pooling layers are
stateless averages that feed the next layer's current.

The backward pass uses the shifted-Heaviside surrogate: the derivative of a
spike with respect to the pre-reset potential is 1 where the potential is at
or above threshold and 0 elsewhere.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng as rngmod

log = logging.getLogger(__name__)


class SnnError(Exception):
    pass


class ShapeError(SnnError, ValueError):
    pass


class ConfigurationError(SnnError, ValueError):
    pass


class IntegrityError(SnnError):
    pass


class NonFiniteGradientError(SnnError, FloatingPointError):
    def __init__(self, layer_index: int):
        super().__init__(f"non-finite gradient in layer {layer_index}; update refused")
        self.layer_index = layer_index


class ResetMode(str, Enum):
    SUBTRACT = "subtract"
    TO_ZERO = "zero"


@dataclass(frozen=True)
class LifNeuronConfig:
    tau_m: float = 2.0
    u_th: float = 1.0
    resistance: float = 1.0
    reset_mode: ResetMode = ResetMode.SUBTRACT
    time_steps: int = 16

    def __post_init__(self):
        if not self.tau_m >= 1:
            raise ConfigurationError(f"tau_m must be >= 1, got {self.tau_m}")
        if not self.u_th > 0:
            raise ConfigurationError(f"u_th must be > 0, got {self.u_th}")
        if not self.resistance > 0:
            raise ConfigurationError(f"resistance must be > 0, got {self.resistance}")
        if self.time_steps < 1:
            raise ConfigurationError(f"time_steps must be >= 1, got {self.time_steps}")
        object.__setattr__(self, "reset_mode", ResetMode(self.reset_mode))

    @property
    def leak_factor(self) -> float:
        return 1.0 - 1.0 / self.tau_m

    @property
    def input_gain(self) -> float:
        return self.resistance / self.tau_m


@dataclass
class LifState:
    potentials: np.ndarray
    time_index: int = 0


def _lif_update(u, current, cfg: LifNeuronConfig):
    """One discretized step: returns (pre-reset potential, spikes, post-reset potential)."""
    h = cfg.leak_factor * u + cfg.input_gain * current
    o = (h >= cfg.u_th).astype(h.dtype)
    if cfg.reset_mode is ResetMode.SUBTRACT:
        u_next = h - cfg.u_th * o
    else:
        u_next = h * (1 - o)
    return h, o, u_next


def lif_step(state: LifState, input_current, config: LifNeuronConfig) -> tuple[LifState, np.ndarray]:
    current = np.asarray(input_current, dtype=np.result_type(state.potentials, np.float32))
    if current.shape != np.shape(state.potentials):
        raise ShapeError(
            f"input current shape {current.shape} does not match state shape {np.shape(state.potentials)}"
        )
    _, o, u = _lif_update(np.asarray(state.potentials), current, config)
    return LifState(u, state.time_index + 1), o


def surrogate_gate(potential, config: LifNeuronConfig):
    """d(spike)/d(potential) under the shifted-Heaviside surrogate."""
    gate = np.where(np.asarray(potential) >= config.u_th, 1.0, 0.0)
    return float(gate) if gate.ndim == 0 else gate


# --------------------------------------------------------------------------- layers


@dataclass
class ConvLayer:
    """3x3 'same' convolution feeding LIF neurons."""

    weight: np.ndarray  # (c_out, c_in, 3, 3)
    bias: np.ndarray | None = None

    kind = "conv"
    spiking = True

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.weight.shape[1]:
            raise ConfigurationError(f"conv expects ({self.weight.shape[1]}, H, W) input, got {in_shape}")
        return (self.weight.shape[0], in_shape[1], in_shape[2])


@dataclass
class PoolLayer:
    size: int = 2

    kind = "pool"
    spiking = False
    weight = None
    bias = None

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] % self.size or in_shape[2] % self.size:
            raise ConfigurationError(f"pool {self.size} cannot tile input {in_shape}")
        return (in_shape[0], in_shape[1] // self.size, in_shape[2] // self.size)


@dataclass
class DenseLayer:
    weight: np.ndarray  # (n_out, n_in)
    bias: np.ndarray | None = None

    kind = "dense"
    spiking = True

    def out_shape(self, in_shape):
        n_in = int(np.prod(in_shape))
        if n_in != self.weight.shape[1]:
            raise ConfigurationError(f"dense expects {self.weight.shape[1]} inputs, got {in_shape}")
        return (self.weight.shape[0],)


Layer = Union[ConvLayer, PoolLayer, DenseLayer]


@dataclass
class NetworkParams:
    """Ordered layers split into a feature extractor followed by a classifier."""

    layers: list
    input_shape: tuple
    extractor_span: tuple  # [start, stop)
    classifier_span: tuple
    alignment_layer: int

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.extractor_span = tuple(self.extractor_span)
        self.classifier_span = tuple(self.classifier_span)
        self.validate()

    def validate(self):
        n = len(self.layers)
        e0, e1 = self.extractor_span
        c0, c1 = self.classifier_span
        if not (e0 == 0 and e1 == c0 and c1 == n and 0 < e1 < n):
            raise ConfigurationError(
                f"extractor {self.extractor_span} and classifier {self.classifier_span} must partition {n} layers"
            )
        shapes = self.layer_shapes()
        a = self.alignment_layer
        if not e0 <= a < e1:
            raise ConfigurationError(f"alignment layer {a} is outside the extractor {self.extractor_span}")
        if not self.layers[a].spiking:
            raise ConfigurationError(f"alignment layer {a} is not a spiking layer")
        out = shapes[a + 1]
        if len(out) != 3 or out[1] * out[2] <= 1:
            raise ConfigurationError(f"alignment layer {a} has no spatial extent (shape {out})")

    def layer_shapes(self) -> list:
        """Per-sample shapes: input, then the output of each layer."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.out_shape(shapes[-1]))
        return shapes

    @property
    def num_classes(self) -> int:
        return self.layer_shapes()[-1][0]

    @property
    def dtype(self):
        for layer in self.layers:
            if layer.weight is not None:
                return layer.weight.dtype
        return np.dtype(np.float32)

    def copy(self) -> "NetworkParams":
        layers = []
        for layer in self.layers:
            if layer.spiking:
                bias = None if layer.bias is None else layer.bias.copy()
                layers.append(replace(layer, weight=layer.weight.copy(), bias=bias))
            else:
                layers.append(replace(layer))
        return replace(self, layers=layers)

    def digest(self) -> int:
        crc = 0
        for layer in self.layers:
            crc = zlib.crc32(layer.kind.encode(), crc)
            for arr in (layer.weight, layer.bias):
                if arr is not None:
                    crc = zlib.crc32(np.ascontiguousarray(arr).tobytes(), crc)
        return crc


def select_alignment_layer(layers, input_shape, extractor_stop: int) -> int:
    """Deepest extractor spiking layer whose output keeps spatial support.

    The last spiking layer of the extractor is used unless its map is 1x1 (or
    flat), in which case the spiking layer before it is taken.
    """
    shapes = [tuple(input_shape)]
    for layer in layers[:extractor_stop]:
        shapes.append(layer.out_shape(shapes[-1]))
    spiking = [i for i in range(extractor_stop) if layers[i].spiking]
    if not spiking:
        raise ConfigurationError("extractor has no spiking layer")

    def has_extent(i):
        s = shapes[i + 1]
        return len(s) == 3 and s[1] * s[2] > 1

    last = spiking[-1]
    if has_extent(last):
        return last
    if len(spiking) >= 2 and has_extent(spiking[-2]):
        return spiking[-2]
    raise ConfigurationError("no extractor layer with spatial extent > 1 near the top of the extractor")


@dataclass(frozen=True)
class ArchConfig:
    input_shape: tuple = (1, 24, 24)
    conv_channels: tuple = (8, 16, 16)
    dense_hidden: tuple = (64,)
    num_classes: int = 4
    classifier_layers: int = 2
    bias: bool = True
    init_gain: float = 8.0  # hidden layers; large enough that deep layers fire at init
    readout_gain: float = 1.0  # output layer


def build_network(arch: ArchConfig, seed: int) -> NetworkParams:
    """Conv(3x3)+LIF / avg-pool blocks, then dense+LIF layers, seeded init.

    Weights are drawn uniform in +-gain*sqrt(3/fan_in), with ``readout_gain``
    for the output layer and ``init_gain`` elsewhere; biases start at zero.
    """
    g = rngmod.generator(seed, rngmod.INIT)
    layers: list = []
    c_in = arch.input_shape[0]
    for c_out in arch.conv_channels:
        fan_in = c_in * 9
        bound = arch.init_gain * np.sqrt(3.0 / fan_in)
        w = g.uniform(-bound, bound, size=(c_out, c_in, 3, 3)).astype(np.float32)
        layers.append(ConvLayer(w, np.zeros(c_out, np.float32) if arch.bias else None))
        layers.append(PoolLayer(2))
        c_in = c_out
    shape = tuple(arch.input_shape)
    for layer in layers:
        shape = layer.out_shape(shape)
    n_in = int(np.prod(shape))
    widths = (*arch.dense_hidden, arch.num_classes)
    for k, n_out in enumerate(widths):
        gain = arch.readout_gain if k == len(widths) - 1 else arch.init_gain
        bound = gain * np.sqrt(3.0 / n_in)
        w = g.uniform(-bound, bound, size=(n_out, n_in)).astype(np.float32)
        layers.append(DenseLayer(w, np.zeros(n_out, np.float32) if arch.bias else None))
        n_in = n_out
    split = len(layers) - arch.classifier_layers
    if split <= 0:
        raise ConfigurationError("classifier_layers leaves no extractor")
    align = select_alignment_layer(layers, arch.input_shape, split)
    return NetworkParams(layers, arch.input_shape, (0, split), (split, len(layers)), align)


# --------------------------------------------------------------------------- forward
#
# Internally conv feature maps are channels-last, (N, H, W, C) with N = T*B
# (time-major), so that im2col output feeds a single GEMM without transposes.
# Public tensors (inputs, alignment spikes/potentials, injected gradients) use
# (T, B, C, H, W).


@dataclass
class LayerTape:
    inputs: np.ndarray | None = None  # conv: im2col matrix, dense: flat input
    pre_reset: np.ndarray | None = None  # (T, B, ...) channels-last
    spikes: np.ndarray | None = None


@dataclass
class Tape:
    layers: list
    digest: int
    time_steps: int
    batch: int
    config: LifNeuronConfig


@dataclass
class ForwardRecord:
    prediction_scores: np.ndarray | None  # (B, classes), None if stopped early
    alignment_spikes: np.ndarray  # (T, B, C, H, W)
    alignment_potentials: np.ndarray  # post-reset, same shape
    tape: Tape | None = field(default=None, repr=False)


def _internal(shape):
    return (shape[1], shape[2], shape[0]) if len(shape) == 3 else tuple(shape)


def _to_public(x):
    """(T, B, H, W, C) -> (T, B, C, H, W); flat tensors pass through."""
    return np.ascontiguousarray(x.transpose(0, 1, 4, 2, 3)) if x.ndim == 5 else x


def _to_internal(x):
    return np.ascontiguousarray(x.transpose(0, 1, 3, 4, 2)) if x.ndim == 5 else x


def _im2col(x):
    """(N, H, W, C) -> (N*H*W, 9*C), columns ordered (ki, kj, c)."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 3, 3, c), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, :, ki, kj, :] = xp[:, ki : ki + h, kj : kj + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _col2im(dcols, shape):
    n, h, w, c = shape
    d = dcols.reshape(n, h, w, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki : ki + h, kj : kj + w, :] += d[:, :, :, ki, kj, :]
    return dxp[:, 1:-1, 1:-1, :]


def _conv_matrix(weight):
    """(c_out, c_in, 3, 3) -> (c_out, 9*c_in) matching :func:`_im2col` columns."""
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def _pool(x, s):
    n, h, w, c = x.shape
    if s == 2:
        return (x[:, 0::2, 0::2] + x[:, 1::2, 0::2] + x[:, 0::2, 1::2] + x[:, 1::2, 1::2]) * 0.25
    return x.reshape(n, h // s, s, w // s, s, c).mean(axis=(2, 4))


def _simulate(current, cfg: LifNeuronConfig):
    """Run LIF neurons over the leading time axis; returns (pre_reset, spikes)."""
    h = np.empty_like(current)
    o = np.empty_like(current)
    u = np.zeros_like(current[0])
    for t in range(current.shape[0]):
        h[t], o[t], u = _lif_update(u, current[t], cfg)
    return h, o


def _post_reset(h, o, cfg: LifNeuronConfig):
    if cfg.reset_mode is ResetMode.SUBTRACT:
        return h - cfg.u_th * o
    return h * (1 - o)


def forward(
    params: NetworkParams,
    spikes,
    config: LifNeuronConfig,
    *,
    stop_after: int | None = None,
    keep_tape: bool = True,
) -> ForwardRecord:
    """Simulate the network on input spikes of shape ``(T, B, *input_shape)``.

    All neurons start from zero potential. ``stop_after`` ends the simulation
    after that layer (e.g. the alignment layer when only extractor features are
    needed); prediction scores are then ``None``.
    """
    params.validate()
    spikes = np.asarray(spikes)
    T = config.time_steps
    if spikes.ndim != len(params.input_shape) + 2 or spikes.shape[2:] != params.input_shape:
        raise ShapeError(f"input spikes {spikes.shape} do not match (T, B, *{params.input_shape})")
    if spikes.shape[0] != T:
        raise ShapeError(f"input has {spikes.shape[0]} time steps, config expects {T}")
    B = spikes.shape[1]
    last = len(params.layers) - 1 if stop_after is None else stop_after
    if not params.alignment_layer <= last < len(params.layers):
        raise ConfigurationError("simulation must reach the alignment layer")
    dtype = params.dtype
    x = _to_internal(spikes.astype(dtype))
    x = x.reshape(T * B, *x.shape[2:])
    tapes = []
    align_spikes = align_pot = None
    for i, layer in enumerate(params.layers[: last + 1]):
        lt = LayerTape()
        if layer.kind == "pool":
            x = _pool(x, layer.size)
            tapes.append(lt)
            continue
        if layer.kind == "conv":
            cols = _im2col(x)
            cur = cols @ _conv_matrix(layer.weight).T
            lt.inputs = cols if keep_tape else None
        else:
            flat = x.reshape(x.shape[0], -1)
            cur = flat @ layer.weight.T
            lt.inputs = flat if keep_tape else None
        if layer.bias is not None:
            cur += layer.bias
        cur = cur.reshape(T, B, *x.shape[1:-1], -1) if layer.kind == "conv" else cur.reshape(T, B, -1)
        h, o = _simulate(cur, config)
        if keep_tape:
            lt.pre_reset, lt.spikes = h, o
        if i == params.alignment_layer:
            align_spikes = _to_public(o)
            align_pot = _to_public(_post_reset(h, o, config))
        x = o.reshape(T * B, *o.shape[2:])
        tapes.append(lt)
    scores = None
    if last == len(params.layers) - 1:
        scores = x.reshape(T, B, -1).sum(axis=0)
    tape = Tape(tapes, params.digest(), T, B, config) if keep_tape else None
    return ForwardRecord(scores, align_spikes, align_pot, tape)


def predict(params: NetworkParams, spikes, config: LifNeuronConfig) -> np.ndarray:
    """Class index per sample: argmax of output spike counts (first index on ties)."""
    rec = forward(params, spikes, config, keep_tape=False)
    return np.argmax(rec.prediction_scores, axis=1)


# --------------------------------------------------------------------------- backward


@dataclass
class LayerGrad:
    weight: np.ndarray
    bias: np.ndarray | None


def _lif_backward(g_spikes, g_post, h, o, cfg: LifNeuronConfig, window: float = 0.0):
    """Gradient w.r.t. the synaptic current, given gradients at spikes and post-reset potentials."""
    open_at = cfg.u_th - window
    g_cur = np.empty_like(h)
    carry = np.zeros_like(h[0])
    leak = cfg.leak_factor
    for t in range(h.shape[0] - 1, -1, -1):
        g_u = carry if g_post is None else carry + g_post[t]
        gate = (h[t] >= open_at).astype(h.dtype)
        if cfg.reset_mode is ResetMode.SUBTRACT:
            g_o = g_spikes[t] - cfg.u_th * g_u
            g_h = g_u + g_o * gate
        else:
            g_o = g_spikes[t] - h[t] * g_u
            g_h = g_u * (1 - o[t]) + g_o * gate
        g_cur[t] = g_h
        carry = leak * g_h
    return g_cur * cfg.input_gain


def backward(
    params: NetworkParams,
    tape: Tape,
    *,
    d_scores=None,
    d_spikes: dict | None = None,
    d_potentials: dict | None = None,
    surrogate_window: float = 0.0,
) -> list:
    """Reverse-mode pass through a recorded forward simulation.

    Loss gradients may be injected at the prediction scores ``(B, classes)``,
    at any spiking layer's spikes ``{layer: (T, B, ...)}`` or at its post-reset
    potentials. Returns one :class:`LayerGrad` per spiking layer and ``None``
    for pooling layers; layers above the highest injection get zero gradients.

    ``surrogate_window`` widens the gate to potentials up to that distance
    below threshold; 0 is the plain shifted Heaviside. Source training uses a
    window so that silent units still receive gradient.
    """
    if surrogate_window < 0:
        raise ConfigurationError("surrogate_window must be non-negative")
    if tape is None:
        raise IntegrityError("forward was run without a tape")
    if tape.digest != params.digest() or len(tape.layers) > len(params.layers):
        raise IntegrityError("tape was not produced by these parameters")
    T, B, cfg = tape.time_steps, tape.batch, tape.config
    n_layers = len(params.layers)
    shapes = [_internal(s) for s in params.layer_shapes()]
    dtype = params.dtype

    def _inject(store, src):
        for i, g in (src or {}).items():
            want = (T, B, *params.layer_shapes()[i + 1])
            g = np.asarray(g, dtype)
            if g.shape != want:
                raise ShapeError(f"gradient for layer {i} has shape {g.shape}, expected {want}")
            store[i] = _to_internal(g)

    ext_spikes: dict = {}
    ext_post: dict = {}
    _inject(ext_spikes, d_spikes)
    _inject(ext_post, d_potentials)
    if d_scores is not None:
        if len(tape.layers) < n_layers:
            raise IntegrityError("tape stops before the output layer")
        d_scores = np.asarray(d_scores, dtype)
        out = tape.layers[-1].spikes
        if d_scores.shape != out.shape[1:]:
            raise ShapeError(f"score gradient {d_scores.shape} does not match outputs {out.shape[1:]}")
        top = n_layers - 1
        ext_spikes[top] = ext_spikes.get(top, 0) + np.broadcast_to(d_scores, out.shape)
    grads = [_zero_grad(layer) for layer in params.layers]
    injected = set(ext_spikes) | set(ext_post)
    if not injected:
        return grads
    top = max(injected)
    if top >= len(tape.layers):
        raise IntegrityError(f"tape has no record of layer {top}")

    g_in = None  # gradient w.r.t. the output of layer i, (T*B, ...) channels-last
    for i in range(top, -1, -1):
        layer = params.layers[i]
        lt = tape.layers[i]
        out_shape = (T, B, *shapes[i + 1])
        g_out = np.zeros(out_shape, dtype) if g_in is None else g_in.reshape(out_shape)
        if i in ext_spikes:
            g_out = g_out + ext_spikes[i]
        if layer.kind == "pool":
            s = layer.size
            g = g_out.reshape(T * B, *shapes[i + 1]) * (1.0 / (s * s))
            g_in = np.repeat(np.repeat(g, s, axis=1), s, axis=2)
            continue
        g_cur = _lif_backward(g_out, ext_post.get(i), lt.pre_reset, lt.spikes, cfg, surrogate_window)
        g2 = g_cur.reshape(-1, g_cur.shape[-1])
        if layer.kind == "conv":
            c_out, c_in = layer.weight.shape[:2]
            dw = (g2.T @ lt.inputs).reshape(c_out, 3, 3, c_in).transpose(0, 3, 1, 2)
            if i > 0:
                g_in = _col2im(g2 @ _conv_matrix(layer.weight), (T * B, *shapes[i]))
        else:
            dw = g2.T @ lt.inputs
            if i > 0:
                g_in = (g2 @ layer.weight).reshape(T * B, *shapes[i])
        db = g2.sum(axis=0) if layer.bias is not None else None
        grads[i] = LayerGrad(np.ascontiguousarray(dw), db)
    return grads


def _zero_grad(layer):
    if not layer.spiking:
        return None
    return LayerGrad(np.zeros_like(layer.weight), None if layer.bias is None else np.zeros_like(layer.bias))


def sgd_update(params: NetworkParams, grads, eta: float, span: tuple | None = None) -> NetworkParams:
    """One plain SGD step on the layers in ``span`` (default: the extractor).

    Returns new parameters; the input is never modified. Layers outside the
    span are copied bit for bit.
    """
    start, stop = params.extractor_span if span is None else span
    for i in range(start, stop):
        g = grads[i]
        if g is None:
            continue
        if not np.all(np.isfinite(g.weight)) or (g.bias is not None and not np.all(np.isfinite(g.bias))):
            raise NonFiniteGradientError(i)
    new = params.copy()
    if eta == 0:
        return new
    for i in range(start, stop):
        g = grads[i]
        layer = new.layers[i]
        if g is None or not layer.spiking:
            continue
        layer.weight -= np.asarray(eta * g.weight, layer.weight.dtype)
        if layer.bias is not None and g.bias is not None:
            layer.bias -= np.asarray(eta * g.bias, layer.bias.dtype)
    return new


# --------------------------------------------------------------------------- encoding

clamp_events = 0  # pixels clamped into [0, 1] by poisson_encode since import


def poisson_encode(image, T: int, rng: np.random.Generator) -> np.ndarray:
    """Rate-code intensities as independent Bernoulli spikes, shape ``(T, *image.shape)``."""
    global clamp_events
    x = np.asarray(image, dtype=np.float64)
    bad = int(np.count_nonzero((x < 0) | (x > 1)))
    if bad:
        clamp_events += bad
        log.warning("poisson_encode: clamped %d values into [0, 1]", bad)
        x = np.clip(x, 0.0, 1.0)
    if T < 1:
        raise ValueError("T must be positive")
    return (rng.random((T, *x.shape)) < x).astype(np.float32)
