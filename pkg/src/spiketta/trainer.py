"""Desk-scale source models: synthetic shape datasets and surrogate-gradient training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment, formats, space, snn
from . import rng as rngmod

log = logging.getLogger(__name__)

SHAPE_FAMILIES = ("hbar", "vbar", "cross", "disk", "diag_down", "diag_up")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 4
    image_size: tuple = (24, 24)
    samples_per_class: int = 150
    test_per_class: int = 50
    noise_floor: float = 0.05

    def validate(self):
        if self.samples_per_class < 2:
            raise ValueError("samples_per_class must be at least 2")
        if not 1 <= self.test_per_class < self.samples_per_class:
            raise ValueError("test_per_class must leave at least one training sample per class")
        if not 2 <= self.num_classes <= len(SHAPE_FAMILIES):
            raise ValueError(f"num_classes must be in [2, {len(SHAPE_FAMILIES)}]")


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    indices: np.ndarray  # positions in the generated pool, for disjointness checks

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.indices[idx])


def _draw_shape(family: str, size, g: np.random.Generator) -> np.ndarray:
    H, W = size
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy = H / 2 - 0.5 + g.uniform(-H / 8, H / 8)
    cx = W / 2 - 0.5 + g.uniform(-W / 8, W / 8)
    half_t = g.uniform(1.0, 2.0)
    half_len = g.uniform(0.28, 0.42) * min(H, W)
    inten = g.uniform(0.6, 1.0)
    dy, dx = yy - cy, xx - cx

    def bar(along, across):
        return (np.abs(across) <= half_t) & (np.abs(along) <= half_len)

    if family == "hbar":
        mask = bar(dx, dy)
    elif family == "vbar":
        mask = bar(dy, dx)
    elif family == "cross":
        mask = bar(dx, dy) | bar(dy, dx)
    elif family == "disk":
        mask = dy**2 + dx**2 <= (g.uniform(0.55, 0.8) * half_len) ** 2
    elif family == "diag_down":
        mask = bar((dx + dy) / np.sqrt(2), (dy - dx) / np.sqrt(2))
    elif family == "diag_up":
        mask = bar((dx - dy) / np.sqrt(2), (dy + dx) / np.sqrt(2))
    else:
        raise ValueError(f"unknown shape family {family!r}")
    return mask * inten


def synth_dataset(spec: SyntheticDatasetSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/test split of jittered shape images.

    Each class draws ``samples_per_class`` images; the last ``test_per_class``
    of each class form the test set.
    """
    spec.validate()
    g = rngmod.generator(seed, rngmod.DATA)
    H, W = spec.image_size
    n = spec.num_classes * spec.samples_per_class
    images = np.empty((n, H, W), np.float32)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    for k in range(n):
        img = _draw_shape(SHAPE_FAMILIES[labels[k]], (H, W), g)
        img = img + g.uniform(0.0, spec.noise_floor, size=(H, W))
        images[k] = np.clip(img, 0.0, 1.0)
    within = np.tile(np.arange(spec.samples_per_class), spec.num_classes)
    is_test = within >= spec.samples_per_class - spec.test_per_class
    train_idx = np.flatnonzero(~is_test)
    test_idx = np.flatnonzero(is_test)
    assert not np.intersect1d(train_idx, test_idx).size
    pool = Dataset(images, labels.astype(np.int64), np.arange(n))
    return pool.subset(train_idx), pool.subset(test_idx)


def encode_batch(images, T: int, seed: int, stream: int, ids) -> np.ndarray:
    """Poisson-encode images ``(B, H, W)`` to spikes ``(T, B, 1, H, W)``, one stream per id."""
    out = np.empty((T, len(images), 1, *images.shape[1:]), np.float32)
    for b, (img, i) in enumerate(zip(images, ids)):
        out[:, b, 0] = snn.poisson_encode(img, T, rngmod.generator(seed, stream, int(i)))
    return out


def softmax_cross_entropy(scores, labels):
    """Mean cross-entropy of softmaxed scores; returns (loss, d loss / d scores)."""
    z = scores - scores.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-12))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


@dataclass
class TrainResult:
    params: snn.NetworkParams
    train_accuracy: float
    test_accuracy: float | None
    history: list = field(default_factory=list)
    diverged: bool = False


def accuracy(params, data: Dataset, neuron: snn.LifNeuronConfig, seed: int, batch_size: int = 64) -> float:
    """Batched clean accuracy (training diagnostics; evaluation proper goes through :func:`evaluate`)."""
    hits = 0
    for s in range(0, len(data), batch_size):
        sl = slice(s, s + batch_size)
        x = encode_batch(data.images[sl], neuron.time_steps, seed, rngmod.ENCODE, data.indices[sl])
        hits += int(np.sum(snn.predict(params, x, neuron) == data.labels[sl]))
    return hits / len(data)


def train_source(
    train: Dataset,
    arch: snn.ArchConfig,
    neuron: snn.LifNeuronConfig,
    epochs: int = 20,
    lr: float = 0.05,
    seed: int = 0,
    batch_size: int = 32,
    test: Dataset | None = None,
    logit_scale: float = 0.5,
    surrogate_window: float = 2.0,
    cosine_decay: bool = True,
) -> TrainResult:
    """Mini-batch SGD on softmax cross-entropy of output spike counts.

    Counts are multiplied by ``logit_scale`` before the softmax. The backward
    pass widens the surrogate gate by ``surrogate_window`` below threshold;
    with the plain gate a unit that falls silent never receives gradient
    again, and whole readout neurons die during training.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    if epochs < 0 or lr < 0 or batch_size < 1 or logit_scale <= 0:
        raise ValueError("epochs, lr must be non-negative, batch_size >= 1, logit_scale > 0")
    params = snn.build_network(arch, seed)
    history = []
    diverged = False
    steps_per_epoch = -(-len(train) // batch_size)
    total = max(1, epochs * steps_per_epoch)
    step = 0
    for epoch in range(epochs):
        order = rngmod.generator(seed, rngmod.SHUFFLE, epoch).permutation(len(train))
        losses = []
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            x = encode_batch(
                train.images[idx], neuron.time_steps, rngmod.child_seed(seed, epoch), rngmod.TRAIN_ENCODE, train.indices[idx]
            )
            rec = snn.forward(params, x, neuron)
            loss, d_scores = softmax_cross_entropy(rec.prediction_scores * logit_scale, train.labels[idx])
            grads = snn.backward(params, rec.tape, d_scores=d_scores * logit_scale, surrogate_window=surrogate_window)
            eta = lr * 0.5 * (1 + math.cos(math.pi * step / total)) if cosine_decay else lr
            step += 1
            try:
                if not np.isfinite(loss):
                    raise FloatingPointError("non-finite loss")
                params = snn.sgd_update(params, grads, eta, span=(0, len(params.layers)))
            except FloatingPointError:
                log.warning("training diverged in epoch %d; keeping last good parameters", epoch)
                diverged = True
                break
            losses.append(loss)
        if diverged:
            break
        history.append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f", epoch, history[-1])
    train_acc = accuracy(params, train, neuron, seed)
    test_acc = accuracy(params, test, neuron, seed) if test is not None else None
    return TrainResult(params, train_acc, test_acc, history, diverged)


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # (true, predicted) counts
    predictions: np.ndarray
    labels: np.ndarray
    traces: list = field(default_factory=list)

    @property
    def per_class_correct(self) -> np.ndarray:
        return np.diag(self.confusion).copy()


def prepare_input(image, sample_id: int, seed: int, corruption=None) -> np.ndarray:
    """The test image as the model sees it: optionally corrupted with a per-sample stream."""
    if corruption is None:
        return image
    kind, severity = corruption
    return augment.corrupt(image, kind, severity, rngmod.generator(seed, rngmod.CORRUPT, int(sample_id)))


def evaluate(
    params: snn.NetworkParams,
    data: Dataset,
    neuron: snn.LifNeuronConfig,
    seed: int = 0,
    corruption: tuple | None = None,
    adapt: space.AdaptConfig | None = None,
    policy: augment.AugmentPolicy | None = None,
    on_sample=None,
    carry_state: bool = False,
) -> EvalResult:
    """Batch-size-one evaluation, optionally corrupted and optionally adapted per sample.

    Each sample starts from ``params`` (model reset between samples) unless
    ``carry_state`` is set, in which case adapted weights carry to the next one.
    ``on_sample(i, prediction, trace)`` is called after every sample.
    """
    K = params.num_classes
    preds = np.empty(len(data), np.int64)
    confusion = np.zeros((K, K), np.int64)
    traces = []
    current = params
    if adapt is not None and policy is None:
        policy = augment.AugmentPolicy(strength=adapt.augment_strength)
    for i in range(len(data)):
        sid = int(data.indices[i])
        label = int(data.labels[i])
        image = prepare_input(data.images[i], sid, seed, corruption)
        spikes = space.encode_sample(image, neuron.time_steps, seed, sid)
        trace = None
        if adapt is None:
            pred = int(snn.predict(params, spikes, neuron)[0])
        else:
            res = space.adapt_single(current, image, policy, adapt, neuron, seed, sid, label, original_spikes=spikes)
            pred, trace = res.prediction, res.trace
            if carry_state:
                current = res.params
            traces.append(trace)
        preds[i] = pred
        confusion[label, pred] += 1
        if on_sample is not None:
            on_sample(i, pred, trace)
    acc = float(np.mean(preds == data.labels)) if len(data) else float("nan")
    return EvalResult(acc, confusion, preds, data.labels.copy(), traces)


def save_dataset(path, data: Dataset):
    Path(path).write_bytes(formats.encode_dataset(data.images, data.labels, data.indices))


def load_dataset(path) -> Dataset:
    images, labels, indices = formats.decode_dataset(Path(path).read_bytes())
    return Dataset(images, labels, indices)
