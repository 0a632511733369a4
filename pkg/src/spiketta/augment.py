"""AugMix-style view generation and noise corruptions for 2-D grayscale images.

Images are ``(H, W)`` float arrays in [0, 1]. Every function takes an explicit
generator (or seed) so that outputs are reproducible byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from . import rng as rngmod

OPERATORS = (
    "rotate",
    "translate_x",
    "translate_y",
    "shear_x",
    "shear_y",
    "hflip",
    "contrast",
    "brightness",
    "posterize",
)


@dataclass(frozen=True)
class AugmentPolicy:
    """Operator pool, mixing structure and magnitude caps.

    A sampled magnitude is ``uniform(0.1, strength) / 10``, so at
    ``strength <= 10`` every operator stays inside its cap.
    """

    operators: tuple = OPERATORS
    mixture_width: int = 3
    mixture_depth: tuple = (1, 3)
    strength: int = 3
    alpha: float = 1.0
    max_rotate_deg: float = 30.0
    max_translate_frac: float = 0.5  # of the image side: 16 px on a 32 px image
    max_shear: float = 0.3
    max_enhance: float = 0.9  # contrast/brightness factor in [1-c, 1+c]
    min_posterize_bits: int = 4

    def validate(self):
        unknown = set(self.operators) - set(OPERATORS)
        if unknown:
            raise ValueError(f"unknown operators {sorted(unknown)}")
        if not self.operators:
            raise ValueError("operator pool is empty")
        if self.mixture_width < 1:
            raise ValueError("mixture_width must be >= 1")
        lo, hi = self.mixture_depth
        if not 1 <= lo <= hi:
            raise ValueError("mixture_depth must be a range 1 <= lo <= hi")
        if not 1 <= self.strength <= 10:
            raise ValueError("strength must lie in [1, 10]")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    def translate_cap(self, size) -> float:
        return self.max_translate_frac * min(size)


@dataclass(frozen=True)
class OpDraw:
    name: str
    magnitude: float  # in [0, 1]
    sign: int  # +1 or -1


def sample_op(policy: AugmentPolicy, g: np.random.Generator) -> OpDraw:
    name = policy.operators[g.integers(len(policy.operators))]
    magnitude = g.uniform(0.1, policy.strength) / 10.0
    sign = 1 if g.random() < 0.5 else -1
    if not 0.0 <= magnitude <= 1.0:
        raise AssertionError(f"magnitude {magnitude} escapes its semantic bound")
    return OpDraw(str(name), float(magnitude), sign)


def _affine(img, matrix, shift):
    # maps output coordinate o to input coordinate matrix @ o + shift
    return ndimage.affine_transform(img, matrix, offset=shift, order=1, mode="reflect")


def _about_center(img, matrix):
    c = (np.asarray(img.shape, float) - 1) / 2
    return _affine(img, matrix, c - matrix @ c)


def apply_op(img: np.ndarray, op: OpDraw, policy: AugmentPolicy) -> np.ndarray:
    """Apply one operator; a zero magnitude leaves every operator but ``hflip`` an identity."""
    m, s = op.magnitude, op.sign
    if op.name == "rotate":
        angle = s * m * policy.max_rotate_deg
        if abs(angle) > policy.max_rotate_deg:
            raise AssertionError("rotation exceeds cap")
        a = np.deg2rad(angle)
        out = _about_center(img, np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]))
    elif op.name in ("translate_x", "translate_y"):
        shift = s * m * policy.translate_cap(img.shape)
        if abs(shift) > policy.translate_cap(img.shape):
            raise AssertionError("translation exceeds cap")
        vec = np.array([0.0, shift]) if op.name == "translate_x" else np.array([shift, 0.0])
        out = _affine(img, np.eye(2), -vec)
    elif op.name in ("shear_x", "shear_y"):
        k = s * m * policy.max_shear
        mat = np.array([[1.0, 0.0], [k, 1.0]]) if op.name == "shear_x" else np.array([[1.0, k], [0.0, 1.0]])
        out = _about_center(img, mat)
    elif op.name == "hflip":
        out = img[:, ::-1]
    elif op.name == "contrast":
        f = 1.0 + s * m * policy.max_enhance
        mean = img.mean()
        out = mean + f * (img - mean)
    elif op.name == "brightness":
        out = img * (1.0 + s * m * policy.max_enhance)
    elif op.name == "posterize":
        if m == 0:
            return img.copy()
        bits = 8 - m * (8 - policy.min_posterize_bits)
        levels = 2.0**bits - 1
        out = np.round(img * levels) / levels
    else:
        raise ValueError(f"unknown operator {op.name!r}")
    return np.clip(out, 0.0, 1.0)


def mix(x: np.ndarray, chains, chain_weights, blend: float, policy: AugmentPolicy) -> np.ndarray:
    """Deterministic AugMix combination given the random draws.

    ``chains`` is a list of operator lists; the result is
    ``blend * x + (1 - blend) * sum_i w_i chain_i(x)``.
    """
    mixed = np.zeros_like(x, dtype=np.float64)
    for w, chain in zip(chain_weights, chains):
        view = x.astype(np.float64)
        for op in chain:
            view = apply_op(view, op, policy)
        mixed += w * view
    out = blend * x + (1.0 - blend) * mixed
    return np.clip(out, 0.0, 1.0).astype(x.dtype)


def augmix_sample(x: np.ndarray, policy: AugmentPolicy, g: np.random.Generator) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {x.shape}")
    lo, hi = policy.mixture_depth
    weights = g.dirichlet([policy.alpha] * policy.mixture_width)
    blend = g.beta(policy.alpha, policy.alpha)
    chains = [[sample_op(policy, g) for _ in range(g.integers(lo, hi + 1))] for _ in range(policy.mixture_width)]
    return mix(x, chains, weights, blend, policy)


def make_batch(x: np.ndarray, M: int, policy: AugmentPolicy, seed: int) -> np.ndarray:
    """``M`` independent augmented views ``(M, H, W)``; the original is not among them."""
    if M < 2:
        raise ValueError("an augmented batch needs M >= 2 views")
    policy.validate()
    return np.stack([augmix_sample(x, policy, rngmod.generator(seed, rngmod.AUGMENT, m)) for m in range(M)])


class Corruption(str, Enum):
    GAUSSIAN = "gaussian_noise"
    SHOT = "shot_noise"
    IMPULSE = "impulse_noise"


SEVERITY_LADDERS = {
    Corruption.GAUSSIAN: (0.04, 0.08, 0.12, 0.18, 0.26),
    Corruption.SHOT: (60, 25, 12, 5, 3),
    Corruption.IMPULSE: (0.01, 0.03, 0.06, 0.10, 0.17),
}


def corrupt(x: np.ndarray, kind, severity: int, g: np.random.Generator) -> np.ndarray:
    """Noise corruption at severity 1..5; severity 0 returns the input unchanged."""
    kind = Corruption(kind)
    if not isinstance(severity, (int, np.integer)) or not 0 <= severity <= 5:
        raise ValueError(f"severity must be an integer in 0..5, got {severity!r}")
    x = np.asarray(x)
    if severity == 0:
        return x.copy()
    level = SEVERITY_LADDERS[kind][severity - 1]
    xf = x.astype(np.float64)
    if kind is Corruption.GAUSSIAN:
        out = xf + g.normal(0.0, level, size=x.shape)
    elif kind is Corruption.SHOT:
        out = g.poisson(xf * level) / level
    else:
        out = xf.copy()
        hit = g.random(x.shape) < level
        out[hit] = (g.random(x.shape) < 0.5)[hit]
    return np.clip(out, 0.0, 1.0).astype(x.dtype)
