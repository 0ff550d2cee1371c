import itertools

import numpy as np
import pytest

from flowrl.guidance import (GuidanceConfig, bandwidth, guided_update,
                             repulsion_force, repulsion_forces)


def test_bandwidth_collinear_median():
    pts = np.array([[0.0], [1.0], [3.0]])  # pairwise distances {1, 2, 3}
    assert bandwidth(pts) == 2.0


def test_bandwidth_single_pair():
    pts = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert bandwidth(pts) == pytest.approx(2.0, abs=1e-12)


def test_bandwidth_small_or_degenerate_groups():
    assert bandwidth(np.zeros((1, 3))) is None
    assert bandwidth(np.zeros((4, 3))) == 0.0


def test_bandwidth_matches_sort_based_oracle():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((4, 5))
    dists = sorted(np.linalg.norm(pts[i] - pts[j])
                   for i, j in itertools.combinations(range(4), 2))
    # 6 pairs: even count -> mean of the two central values
    expected = 0.5 * (dists[2] + dists[3])
    assert bandwidth(pts) == pytest.approx(expected, rel=1e-12)


def test_pair_force_hand_value():
    z = np.array([[1.0, 0.0], [-1.0, 0.0]])
    f1 = repulsion_force(z, 0, sigma=2.0)
    np.testing.assert_allclose(f1, [2.0 * np.exp(-0.5), 0.0], atol=1e-6)
    np.testing.assert_allclose(f1, [1.21306, 0.0], atol=1e-5)
    f2 = repulsion_force(z, 1, sigma=2.0)
    np.testing.assert_allclose(f1, -f2, atol=1e-12)


def test_single_latent_zero_force():
    z = np.array([[0.3, -0.7]])
    np.testing.assert_array_equal(repulsion_force(z, 0, sigma=1.0), np.zeros(2))


def test_batched_forces_match_per_index():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((6, 2, 3))
    sigma = bandwidth(z)
    batched = repulsion_forces(z, sigma)
    for i in range(6):
        np.testing.assert_allclose(batched[i], repulsion_force(z, i, sigma),
                                   atol=1e-10)


def test_force_coefficient_sign_at_sqrt2_sigma():
    sigma = 1.3
    for scale, sign in [(0.9, 1), (1.0, 0), (1.1, -1)]:
        d = np.sqrt(2.0) * sigma * scale
        z = np.array([[0.0], [d]])
        f = repulsion_force(z, 1, sigma)[0]  # along +d direction
        if sign == 0:
            assert abs(f) < 1e-12
        else:
            assert np.sign(f) == sign


def test_centroid_preserved():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((8, 4))
    forces = repulsion_forces(z, bandwidth(z))
    np.testing.assert_allclose(forces.sum(axis=0), np.zeros(4), atol=1e-9)


def test_guided_update_scaling_and_endpoints():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((5, 3))
    base = rng.standard_normal((5, 3))
    cfg = GuidanceConfig(gamma_max=0.8)

    mean0, off0 = guided_update(base, z, 0, 10, cfg)
    np.testing.assert_array_equal(off0, np.zeros_like(base))
    np.testing.assert_array_equal(mean0, base)

    mean_k, off_k = guided_update(base, z, 10, 10, cfg)
    expected = 0.8 * repulsion_forces(z, bandwidth(z))
    np.testing.assert_allclose(off_k, expected, atol=1e-12)
    np.testing.assert_allclose(mean_k, base + expected, atol=1e-12)

    _, off_half = guided_update(base, z, 5, 10, cfg)
    np.testing.assert_allclose(off_half, 0.5 * off_k, atol=1e-12)
    # offsets cancel groupwise at every step
    np.testing.assert_allclose(off_half.sum(axis=0), np.zeros(3), atol=1e-9)


def test_guided_update_skips_degenerate_groups():
    base = np.ones((3, 2))
    cfg = GuidanceConfig()
    # coincident latents -> sigma 0 -> skipped
    mean, off = guided_update(base, np.zeros((3, 2)), 5, 10, cfg)
    np.testing.assert_array_equal(off, np.zeros_like(base))
    np.testing.assert_array_equal(mean, base)
    # single member -> skipped
    mean, off = guided_update(base[:1], np.ones((1, 2)), 5, 10, cfg)
    np.testing.assert_array_equal(off, np.zeros((1, 2)))


def test_guided_update_disabled():
    base = np.ones((4, 2))
    z = np.random.default_rng(4).standard_normal((4, 2))
    mean, off = guided_update(base, z, 7, 10, GuidanceConfig(enabled=False))
    np.testing.assert_array_equal(mean, base)
    np.testing.assert_array_equal(off, np.zeros_like(base))


def test_gamma_max_must_be_nonnegative():
    with pytest.raises(ValueError):
        GuidanceConfig(gamma_max=-0.1)
