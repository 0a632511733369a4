import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spiketta import augment
from spiketta import rng as rngmod

# Worst relative L2 distance over 1000 seeds at strength 10 on the shape images
# was 1.33 (measured once, before the rest of the build); the bound is frozen here.
L2_BOUND = 1.5


def shape_image(seed=0, size=24):
    g = np.random.default_rng(seed)
    img = np.full((size, size), 0.05)
    y0, x0 = g.integers(4, size - 10, size=2)
    img[y0 : y0 + 6, x0 : x0 + 3] = g.uniform(0.6, 1.0)
    return img.astype(np.float32)


def zero_op(name):
    return augment.OpDraw(name, 0.0, 1)


@pytest.mark.parametrize("name", [op for op in augment.OPERATORS if op != "hflip"])
def test_zero_magnitude_is_identity(name):
    x = shape_image(1).astype(np.float64)
    out = augment.apply_op(x, zero_op(name), augment.AugmentPolicy())
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_blend_one_returns_original():
    x = shape_image(2)
    pol = augment.AugmentPolicy()
    chains = [[augment.OpDraw("rotate", 0.7, 1), augment.OpDraw("hflip", 0.5, 1)]]
    out = augment.mix(x, chains, [1.0], 1.0, pol)
    np.testing.assert_array_equal(out, x)


def test_identity_limit_zero_magnitudes_and_any_blend():
    x = shape_image(3)
    pol = augment.AugmentPolicy()
    chains = [[zero_op("rotate"), zero_op("contrast")], [zero_op("translate_x")]]
    out = augment.mix(x, chains, [0.4, 0.6], 0.3, pol)
    np.testing.assert_allclose(out, x, atol=1e-6)


@pytest.mark.parametrize("name", ["rotate", "translate_x", "translate_y", "shear_x", "shear_y", "hflip"])
def test_constant_image_unchanged_by_geometry(name):
    x = np.full((24, 24), 0.5)
    out = augment.apply_op(x, augment.OpDraw(name, 0.9, -1), augment.AugmentPolicy())
    np.testing.assert_allclose(out, x, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), strength=st.integers(1, 10))
def test_output_bounded_and_close(seed, strength):
    x = shape_image(seed % 7)
    pol = augment.AugmentPolicy(strength=strength)
    y = augment.augmix_sample(x, pol, rngmod.generator(seed, rngmod.AUGMENT))
    assert y.shape == x.shape and y.dtype == x.dtype
    assert y.min() >= 0.0 and y.max() <= 1.0
    assert np.linalg.norm(y - x) <= L2_BOUND * np.linalg.norm(x)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), strength=st.integers(1, 10))
def test_sampled_magnitudes_within_caps(seed, strength):
    pol = augment.AugmentPolicy(strength=strength)
    g = rngmod.generator(seed)
    for _ in range(20):
        op = augment.sample_op(pol, g)
        assert 0.01 <= op.magnitude <= strength / 10 + 1e-12
        assert op.magnitude * pol.max_rotate_deg <= 30.0
        assert op.magnitude * pol.translate_cap((24, 24)) <= 12.0


def test_make_batch_determinism_and_distinct_views():
    x = shape_image(4)
    pol = augment.AugmentPolicy()
    a = augment.make_batch(x, 4, pol, seed=11)
    b = augment.make_batch(x, 4, pol, seed=11)
    assert a.shape == (4, 24, 24)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a[0], a[1])
    assert not any(np.array_equal(v, x) for v in a)


def test_make_batch_two_views_distinct():
    v = augment.make_batch(shape_image(5), 2, augment.AugmentPolicy(), seed=0)
    assert not np.array_equal(v[0], v[1])


def test_make_batch_needs_two():
    with pytest.raises(ValueError):
        augment.make_batch(shape_image(), 1, augment.AugmentPolicy(), seed=0)


@pytest.mark.parametrize(
    "bad",
    [dict(strength=0), dict(strength=11), dict(mixture_width=0), dict(mixture_depth=(2, 1)), dict(operators=("blur",))],
)
def test_policy_validation(bad):
    with pytest.raises(ValueError):
        augment.AugmentPolicy(**bad).validate()


# --------------------------------------------------------------------------- corruptions


@pytest.mark.parametrize("kind", list(augment.Corruption))
def test_severity_zero_is_identity(kind):
    x = shape_image(6)
    np.testing.assert_array_equal(augment.corrupt(x, kind, 0, rngmod.generator(0)), x)


def test_gaussian_severity5_std():
    x = np.full((200, 200), 0.5)
    y = augment.corrupt(x, "gaussian_noise", 5, rngmod.generator(1))
    # clipping at 0/1 trims tails ~2 sigma out; the std stays within 10% of 0.26
    assert abs(y.std() - 0.26) <= 0.026


def test_impulse_severity1_fraction():
    x = np.full((200, 200), 0.5)
    y = augment.corrupt(x, "impulse_noise", 1, rngmod.generator(2))
    frac = np.mean(y != 0.5)
    assert abs(frac - 0.01) <= 0.003


def test_shot_noise_mean_preserved():
    x = np.full((200, 200), 0.4)
    y = augment.corrupt(x, "shot_noise", 3, rngmod.generator(3))
    # Poisson(x*lam)/lam has mean x and std sqrt(x/lam)
    assert abs(y.mean() - 0.4) < 4 * np.sqrt(0.4 / 12) / 200
    assert abs(y.std() - np.sqrt(0.4 / 12)) < 0.01


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), kind=st.sampled_from(list(augment.Corruption)), severity=st.integers(0, 5))
def test_corruption_bounded_and_deterministic(seed, kind, severity):
    x = shape_image(seed % 5)
    a = augment.corrupt(x, kind, severity, rngmod.generator(seed, rngmod.CORRUPT))
    b = augment.corrupt(x, kind, severity, rngmod.generator(seed, rngmod.CORRUPT))
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1


@pytest.mark.parametrize("kind,severity", [("gaussian_noise", 6), ("gaussian_noise", -1), ("blur", 1), ("shot_noise", 2.5)])
def test_corruption_rejects_unknown(kind, severity):
    with pytest.raises(ValueError):
        augment.corrupt(shape_image(), kind, severity, rngmod.generator(0))
