import numpy as np
import pytest

from n2nus import scenes
from n2nus.rf_sim import ProbeConfig


def test_native_dz():
    p = ProbeConfig()
    assert scenes.native_dz(p) == pytest.approx(1540 / (2 * 31.25e6))


def test_patch_grid_geometry():
    p = ProbeConfig()
    g = scenes.patch_grid(p, z0=0.03, size=96)
    assert g.shape == (96, 96)
    assert g.dz == pytest.approx(scenes.native_dz(p) / 8)
    assert g.z[0] == pytest.approx(0.03)
    assert g.x.mean() == pytest.approx(0.0, abs=1e-12)


def test_depth_grid_span():
    g = scenes.depth_grid(ProbeConfig())
    assert g.z[0] == pytest.approx(0.005)
    assert g.z[-1] == pytest.approx(0.035, abs=scenes.native_dz(ProbeConfig()))


def test_random_medium_deterministic_and_inside():
    g = scenes.patch_grid(ProbeConfig(), size=16)
    a = scenes.random_medium(g, 3)
    b = scenes.random_medium(g, 3)
    np.testing.assert_array_equal(a.positions, b.positions)
    assert len(a) > 0
    ext = scenes.grid_extent(g)
    assert np.all(ext.contains(a.positions[:, 0], a.positions[:, 1]))


def test_patch_setup_stack():
    setup = scenes.PatchSetup(size=16, noise_rel=0.5)
    assert setup.noise_sigma > 0
    s1 = setup.stack(4, 3)
    s2 = setup.stack(4, 3)
    assert s1.shape == (16, 16) and len(s1) == 3
    assert s1.as_array().tobytes() == s2.as_array().tobytes()
    assert s1.frames[0].noise_sigma == pytest.approx(setup.noise_sigma)
    moving = setup.stack(4, 3, tremor_wavelengths=2.0)
    assert moving.shifts[1] != (0.0, 0.0)


def test_explicit_noise_sigma_wins():
    setup = scenes.PatchSetup(size=16, noise_sigma=0.123)
    assert setup.noise_sigma == 0.123
