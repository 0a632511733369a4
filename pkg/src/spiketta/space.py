"""Single-sample test-time adaptation by spike-pattern consistency across augmented views.

The alignment-layer activity of each view is turned into a per-channel
spatial distribution; the loss penalizes dissimilarity between every pair of
views, and one SGD step on the feature extractor follows.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from . import augment
from . import rng as rngmod
from . import snn

log = logging.getLogger(__name__)


class Aggregation(str, Enum):
    SPIKE_COUNT = "count"
    AVG_POTENTIAL = "amp"
    SPIKES_THROUGH_TIME = "stt"


class Scope(str, Enum):
    LOCAL = "local"
    GLOBAL = "global"


@dataclass(frozen=True)
class AdaptConfig:
    eta: float = 0.001
    num_augments: int = 32
    aggregation: Aggregation = Aggregation.SPIKE_COUNT
    scope: Scope = Scope.LOCAL
    lambda_mmd: float = 0.1
    kernel_bandwidth: float = 0.05
    temporal_smoothing_sigma: float = 0.0
    augment_strength: int = 1

    def __post_init__(self):
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        object.__setattr__(self, "scope", Scope(self.scope))
        if not self.eta >= 0 or not math.isfinite(self.eta):
            raise snn.ConfigurationError(f"eta must be a finite non-negative number, got {self.eta}")
        if self.num_augments < 2:
            raise snn.ConfigurationError("num_augments must be at least 2")
        if self.lambda_mmd < 0:
            raise snn.ConfigurationError("lambda_mmd must be non-negative")
        if self.lambda_mmd > 0 and not self.kernel_bandwidth > 0:
            raise snn.ConfigurationError("kernel_bandwidth must be positive when the MMD term is on")
        if self.temporal_smoothing_sigma < 0:
            raise snn.ConfigurationError("temporal_smoothing_sigma must be non-negative")
        if self.temporal_smoothing_sigma > 0 and self.aggregation is not Aggregation.SPIKES_THROUGH_TIME:
            raise snn.ConfigurationError("temporal smoothing is only defined for the spikes-through-time mode")
        if not 1 <= self.augment_strength <= 10:
            raise snn.ConfigurationError("augment_strength must lie in [1, 10]")


@dataclass
class FeatureMap:
    values: np.ndarray  # (C, D), or (T, C, D) for spikes-through-time
    mode: Aggregation
    time_steps: int


@dataclass
class ChannelDistribution:
    probs: np.ndarray  # (C, D), rows on the simplex


# --------------------------------------------------------------------------- features


def smoothing_matrix(T: int, sigma: float) -> np.ndarray:
    """``T x T`` matrix applying a 3-sigma truncated Gaussian along time with reflective edges."""
    eye = np.eye(T)
    if sigma == 0:
        return eye
    return ndimage.gaussian_filter1d(eye, sigma, axis=0, mode="reflect", truncate=3.0)


def _flatten_space(x):
    # (T, B, C, H, W) -> (T, B, C, D)
    return x.reshape(*x.shape[:3], -1)


def aggregate_batch(spikes, potentials, mode, sigma: float = 0.0) -> np.ndarray:
    """Per-view features from public alignment tensors ``(T, B, C, H, W)``.

    Returns ``(B, C, D)``, or ``(B, T, C, D)`` for spikes-through-time.
    """
    mode = Aggregation(mode)
    if sigma and mode is not Aggregation.SPIKES_THROUGH_TIME:
        raise snn.ConfigurationError("temporal smoothing is only defined for the spikes-through-time mode")
    if mode is Aggregation.SPIKE_COUNT:
        return _flatten_space(spikes).sum(axis=0).astype(np.float64)
    if mode is Aggregation.AVG_POTENTIAL:
        return _flatten_space(potentials).mean(axis=0).astype(np.float64)
    s = _flatten_space(spikes).astype(np.float64)
    S = smoothing_matrix(s.shape[0], sigma)
    return np.einsum("ts,sbcd->btcd", S, s)


def aggregate_features(record: snn.ForwardRecord, mode, temporal_smoothing_sigma: float = 0.0) -> list[FeatureMap]:
    """One :class:`FeatureMap` per batch element of ``record``."""
    mode = Aggregation(mode)
    vals = aggregate_batch(record.alignment_spikes, record.alignment_potentials, mode, temporal_smoothing_sigma)
    T = record.alignment_spikes.shape[0]
    return [FeatureMap(v, mode, T) for v in vals]


def _softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_backward(p, dp, axis=-1):
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


def normalize_channels(f: FeatureMap) -> ChannelDistribution:
    if f.values.ndim != 2:
        raise ValueError("normalize_channels needs a time-collapsed (C, D) feature map")
    return ChannelDistribution(_softmax(np.asarray(f.values, np.float64), axis=1))


def _probs(x):
    return x.probs if isinstance(x, ChannelDistribution) else np.asarray(x, np.float64)


def similarity(p_i, p_j) -> float:
    """Channel-averaged inner product of two per-channel spatial distributions."""
    a, b = _probs(p_i), _probs(p_j)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float((a * b).sum() / a.shape[0])


def global_similarity(f_i, f_j) -> float:
    """Inner product after one softmax over the whole flattened map."""
    a = np.asarray(getattr(f_i, "values", f_i), np.float64)
    b = np.asarray(getattr(f_j, "values", f_j), np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(_softmax(a.ravel()) @ _softmax(b.ravel()))


def consistency_loss(items, scope=Scope.LOCAL) -> float:
    """Sum over unordered pairs of ``1 - similarity``.

    With the local scope ``items`` are channel distributions; with the global
    scope they are feature maps (normalized jointly inside).
    """
    scope = Scope(scope)
    if len(items) < 2:
        raise ValueError("consistency loss needs at least two views")
    sim = similarity if scope is Scope.LOCAL else global_similarity
    return float(sum(1.0 - sim(items[i], items[j]) for i in range(len(items)) for j in range(i)))


def _kernel(a, b, sigma):
    return np.exp(-((a - b) ** 2) / (2.0 * sigma**2))


def mmd_squared(p, q, sigma: float) -> float:
    """Squared MMD between the entries of two D-vectors under a Gaussian kernel."""
    if not sigma > 0:
        raise ValueError("kernel bandwidth must be positive")
    p = np.asarray(p, np.float64)
    q = np.asarray(q, np.float64)
    D = len(p)
    kpp = _kernel(p[:, None], p[None, :], sigma).sum()
    kqq = _kernel(q[:, None], q[None, :], sigma).sum()
    kpq = _kernel(p[:, None], q[None, :], sigma).sum()
    return float((kpp + kqq - 2.0 * kpq) / D**2)


def combined_loss(items, scope, lambda_mmd: float, sigma: float) -> float:
    """Consistency loss plus ``lambda`` times the channel-averaged MMD summed over pairs.

    The MMD term always uses per-channel distributions; with the global scope
    they are derived from the feature maps in ``items``.
    """
    scope = Scope(scope)
    base = consistency_loss(items, scope)
    if lambda_mmd == 0:
        return base
    dists = [_probs(x) if scope is Scope.LOCAL else _softmax(np.asarray(getattr(x, "values", x), np.float64), 1) for x in items]
    C = dists[0].shape[0]
    extra = 0.0
    for i in range(len(dists)):
        for j in range(i):
            extra += sum(mmd_squared(dists[i][c], dists[j][c], sigma) for c in range(C)) / C
    return base + lambda_mmd * extra


# --------------------------------------------------------------------------- batched loss with gradient


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray  # d loss / d features, same shape as the input features
    pair_similarity: np.ndarray  # (M, M), symmetric; time-averaged for stt

    def mean_pair_similarity(self) -> float:
        M = self.pair_similarity.shape[0]
        iu = np.triu_indices(M, 1)
        return float(self.pair_similarity[iu].mean())


def _mmd_pairs_grad(P, sigma):
    """Sum over pairs of channel-averaged MMD^2 and its gradient w.r.t. P ``(M, C, D)``."""
    M, C, D = P.shape
    W = np.full((M, M), -1.0)
    np.fill_diagonal(W, M - 1.0)
    total = 0.0
    grad = np.empty_like(P)
    for c in range(C):
        x = P[:, c, :]  # (M, D)
        diff = x[:, None, :, None] - x[None, :, None, :]  # (M, M, D, D)
        K = np.exp(-(diff**2) / (2.0 * sigma**2))
        A = K.sum(axis=(2, 3)) / D**2
        total += float((W * A).sum())
        g = -(K * diff).sum(axis=3) / sigma**2  # d k(x_m[a], x_j[b]) / d x_m[a], summed over b
        grad[:, c, :] = 2.0 * np.einsum("mj,mja->ma", W, g) / D**2
    return total / C, grad / C


def _loss_slice(F, scope, lambda_mmd, sigma):
    """Loss, gradient and pair similarities for ``F`` of shape ``(M, C, D)``."""
    M, C, D = F.shape
    if scope is Scope.LOCAL:
        P = _softmax(F, axis=2)
        flat = P.reshape(M, -1)
        S = flat @ flat.T / C
        Q = P.sum(axis=0, keepdims=True)
        dP = -(Q - P) / C
        dF = _softmax_backward(P, dP, axis=2)
    else:
        flat = _softmax(F.reshape(M, -1), axis=1)
        S = flat @ flat.T
        dflat = -(flat.sum(axis=0, keepdims=True) - flat)
        dF = _softmax_backward(flat, dflat, axis=1).reshape(F.shape)
    iu = np.triu_indices(M, 1)
    loss = float((1.0 - S[iu]).sum())
    if lambda_mmd > 0:
        Pc = P if scope is Scope.LOCAL else _softmax(F, axis=2)
        extra, gP = _mmd_pairs_grad(Pc, sigma)
        loss += lambda_mmd * extra
        dF = dF + lambda_mmd * _softmax_backward(Pc, gP, axis=2)
    return loss, dF, S


def loss_and_grad(F, scope=Scope.LOCAL, lambda_mmd: float = 0.0, sigma: float = 1.0) -> LossResult:
    """Pairwise consistency loss over views ``F`` ``(M, C, D)`` or ``(M, T, C, D)``.

    The temporal variant averages the per-time-step loss over ``T``.
    """
    scope = Scope(scope)
    F = np.asarray(F, np.float64)
    if F.shape[0] < 2:
        raise ValueError("consistency loss needs at least two views")
    if F.ndim == 3:
        loss, dF, S = _loss_slice(F, scope, lambda_mmd, sigma)
        return LossResult(loss, dF, S)
    T = F.shape[1]
    grad = np.empty_like(F)
    S_sum = np.zeros((F.shape[0], F.shape[0]))
    total = 0.0
    for t in range(T):
        loss, dF, S = _loss_slice(F[:, t], scope, lambda_mmd, sigma)
        total += loss / T
        grad[:, t] = dF / T
        S_sum += S / T
    return LossResult(total, grad, S_sum)


def feature_backward(dF, mode, T: int, spatial, sigma: float = 0.0):
    """Map d loss / d features back to public ``(T, M, C, H, W)`` alignment-layer gradients.

    Returns ``(d_spikes, d_potentials)``; exactly one of them is not ``None``.
    """
    mode = Aggregation(mode)
    M, C = dF.shape[0], dF.shape[-2]
    if mode is Aggregation.SPIKE_COUNT:
        g = np.broadcast_to(dF[None], (T, *dF.shape)).reshape(T, M, C, *spatial)
        return g, None
    if mode is Aggregation.AVG_POTENTIAL:
        g = np.broadcast_to(dF[None] / T, (T, *dF.shape)).reshape(T, M, C, *spatial)
        return None, g
    S = smoothing_matrix(T, sigma)
    g = np.einsum("ts,btcd->sbcd", S, dF).reshape(T, M, C, *spatial)
    return g, None


# --------------------------------------------------------------------------- the adaptation step


@dataclass
class AdaptTrace:
    sample_id: int
    label: int | None
    pre_loss: float
    post_loss: float
    pre_mean_sim: float
    post_mean_sim: float
    pred_before: int
    pred_after: int
    fallback_flag: bool
    seed: int
    updates: int = 0
    pair_sims: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("pair_sims")
        d.pop("updates")
        return d


@dataclass
class AdaptResult:
    params: snn.NetworkParams
    prediction: int
    trace: AdaptTrace


def encode_sample(image, T: int, seed: int, sample_id: int) -> np.ndarray:
    """Spikes ``(T, 1, 1, H, W)`` for one test image, shared by every method that sees it."""
    g = rngmod.generator(seed, rngmod.ENCODE, sample_id)
    return snn.poisson_encode(image, T, g)[:, None, None]


def encode_views(views, T: int, seed: int, sample_id: int) -> np.ndarray:
    out = np.empty((T, len(views), 1, *views.shape[1:]), np.float32)
    for m, v in enumerate(views):
        out[:, m, 0] = snn.poisson_encode(v, T, rngmod.generator(seed, rngmod.VIEW_ENCODE, sample_id, m))
    return out


def _view_loss(params, spikes, neuron, cfg, with_tape):
    rec = snn.forward(params, spikes, neuron, stop_after=params.alignment_layer, keep_tape=with_tape)
    F = aggregate_batch(rec.alignment_spikes, rec.alignment_potentials, cfg.aggregation, cfg.temporal_smoothing_sigma)
    res = loss_and_grad(F, cfg.scope, cfg.lambda_mmd, cfg.kernel_bandwidth)
    return rec, res


def adapt_single(
    params: snn.NetworkParams,
    x: np.ndarray,
    policy: augment.AugmentPolicy,
    cfg: AdaptConfig,
    neuron: snn.LifNeuronConfig,
    seed: int,
    sample_id: int = 0,
    label: int | None = None,
    original_spikes: np.ndarray | None = None,
) -> AdaptResult:
    """Augment, measure view consistency, take one extractor SGD step, predict on the original.

    ``params`` is never modified; the adapted copy is returned. Non-finite
    losses or gradients leave the model untouched and flag the trace.
    """
    T = neuron.time_steps
    if original_spikes is None:
        original_spikes = encode_sample(x, T, seed, sample_id)
    pred_before = int(snn.predict(params, original_spikes, neuron)[0])

    views = augment.make_batch(x, cfg.num_augments, policy, rngmod.child_seed(seed, rngmod.AUGMENT, sample_id))
    view_spikes = encode_views(views, T, seed, sample_id)
    trace = AdaptTrace(sample_id, label, math.nan, math.nan, math.nan, math.nan, pred_before, pred_before, False, seed)

    with np.errstate(all="ignore"):
        rec, pre = _view_loss(params, view_spikes, neuron, cfg, with_tape=True)
    trace.pre_loss = pre.loss
    trace.pre_mean_sim = pre.mean_pair_similarity()
    trace.pair_sims = pre.pair_similarity[np.triu_indices(cfg.num_augments, 1)].tolist()
    try:
        if not (np.isfinite(pre.loss) and np.all(np.isfinite(pre.grad))):
            raise FloatingPointError("non-finite consistency loss")
        spatial = rec.alignment_spikes.shape[3:]
        d_spk, d_pot = feature_backward(pre.grad, cfg.aggregation, T, spatial, cfg.temporal_smoothing_sigma)
        layer = params.alignment_layer
        grads = snn.backward(
            params,
            rec.tape,
            d_spikes={layer: d_spk} if d_spk is not None else None,
            d_potentials={layer: d_pot} if d_pot is not None else None,
        )
        adapted = snn.sgd_update(params, grads, cfg.eta)
        trace.updates = 1
        with np.errstate(all="ignore"):
            _, post = _view_loss(adapted, view_spikes, neuron, cfg, with_tape=False)
        if not np.isfinite(post.loss):
            raise FloatingPointError("non-finite loss after the update")
        pred_after = int(snn.predict(adapted, original_spikes, neuron)[0])
    except FloatingPointError as exc:
        log.warning("sample %d: adaptation aborted (%s); using the source model", sample_id, exc)
        trace.fallback_flag = True
        trace.updates = 0
        return AdaptResult(params, pred_before, trace)
    trace.post_loss = post.loss
    trace.post_mean_sim = post.mean_pair_similarity()
    trace.pred_after = pred_after
    return AdaptResult(adapted, pred_after, trace)
