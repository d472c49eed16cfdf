"""Ready-made media and acquisition setups.

Two setups are provided:

* depth-profile stacks cover 5 to 35 mm on the native axial sampling grid and
  show how the SNR falls with depth;
* training patches are 96 x 96 pixel windows around 30 mm depth, beamformed
  on a grid 8x finer than the sampling step axially and 50 um laterally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from n2nus.rf_sim import (AttenuationModel, BeamformGrid, Extent, FrameStack, Inclusion,
                          MotionModel, ProbeConfig, ScattererField, das_beamform,
                          generate_frame_stack, generate_scatterers, simulate_channel_data)

#: scatterers per m^2 of the reference speckle used for noise calibration
REFERENCE_DENSITY = 200e6


def native_dz(probe: ProbeConfig) -> float:
    """Axial distance travelled (round trip) per RF sample."""
    return probe.sound_speed / (2.0 * probe.sampling_freq)


def patch_grid(probe: ProbeConfig, z0: float = 0.03, size: int = 96,
               dx: float = 50e-6, axial_upsampling: int = 8) -> BeamformGrid:
    return BeamformGrid.centered(z0, native_dz(probe) / axial_upsampling, size, dx, size)


def depth_grid(probe: ProbeConfig, z_start: float = 0.005, z_stop: float = 0.035,
               nx: int = 96, dx: float = 1e-4) -> BeamformGrid:
    dz = native_dz(probe)
    nz = int(round((z_stop - z_start) / dz))
    return BeamformGrid.centered(z_start, dz, nz, dx, nx)


def grid_extent(grid: BeamformGrid, margin_z: float = 1e-3, margin_x: float = 3e-3) -> Extent:
    """Scatterer region covering the grid plus margins."""
    z = grid.z
    x = grid.x
    return Extent(z_min=max(0.0, z[0] - margin_z), z_max=z[-1] + margin_z,
                  x_min=x[0] - margin_x, x_max=x[-1] + margin_x)


def random_medium(grid: BeamformGrid, seed: int,
                  density_range: tuple = (50e6, 300e6)) -> ScattererField:
    """Speckle background with one to three random circular inclusions.

    Inclusion contrast is drawn from {0, 0, 0.3, 2}: anechoic cysts twice as
    often as hypoechoic or hyperechoic regions. Radii are 15 to 35 % of the
    smaller grid side.
    """
    rng = np.random.default_rng([seed, 7])
    z = grid.z
    x = grid.x
    h = z[-1] - z[0]
    w = x[-1] - x[0]
    inclusions = []
    for _ in range(int(rng.integers(1, 4))):
        r = rng.uniform(0.15, 0.35) * min(h, w)
        center = (z[0] + rng.uniform(0, h), rng.uniform(x[0], x[-1]))
        inclusions.append(Inclusion(center, r, float(rng.choice([0.0, 0.0, 0.3, 2.0]))))
    density = rng.uniform(*density_range)
    return generate_scatterers(grid_extent(grid), density, inclusions, seed=seed)


def default_phantom(grid: BeamformGrid, seed: int = 0) -> ScattererField:
    """Homogeneous speckle with an anechoic cyst and a bright inclusion."""
    z = grid.z
    x = grid.x
    zc = 0.5 * (z[0] + z[-1])
    r = 0.15 * min(z[-1] - z[0], x[-1] - x[0])
    inclusions = [Inclusion((zc - 2 * r, x[0] + 0.3 * (x[-1] - x[0])), r, 0.0),
                  Inclusion((zc + 2 * r, x[0] + 0.7 * (x[-1] - x[0])), r, 2.0)]
    return generate_scatterers(grid_extent(grid), REFERENCE_DENSITY, inclusions, seed=seed)


def reference_rms(probe: ProbeConfig, grid: BeamformGrid,
                  atten: AttenuationModel = AttenuationModel(), seed: int = 12345) -> float:
    """RMS of the clean beamformed frame of homogeneous reference speckle on ``grid``."""
    field = generate_scatterers(grid_extent(grid), REFERENCE_DENSITY, (), seed=seed)
    frame = das_beamform(simulate_channel_data(probe, field, atten), grid)
    return float(np.sqrt(np.mean(frame.samples.astype(np.float64) ** 2)))


@dataclass
class PatchSetup:
    """Acquisition shared by a family of training / test patches."""

    probe: ProbeConfig = ProbeConfig()
    atten: AttenuationModel = AttenuationModel()
    z0: float = 0.03
    size: int = 96
    noise_rel: float = 0.4
    noise_sigma: Optional[float] = None
    dx: float = 50e-6
    axial_upsampling: int = 8

    def __post_init__(self):
        self.grid = patch_grid(self.probe, self.z0, self.size, self.dx, self.axial_upsampling)
        if self.noise_sigma is None:
            self.noise_sigma = self.noise_rel * reference_rms(self.probe, self.grid, self.atten)

    def stack(self, seed: int, n: int, tremor_wavelengths: float = 0.0) -> FrameStack:
        field = random_medium(self.grid, seed)
        s = tremor_wavelengths * self.probe.wavelength
        motion = MotionModel(s, s, seed)
        return generate_frame_stack(self.probe, field, self.atten, motion, n, self.noise_sigma,
                                    seed, self.grid, medium_id=f"medium{seed:04d}")


def depth_stack(n: int = 30, seed: int = 0, probe: ProbeConfig = ProbeConfig(),
                atten: AttenuationModel = AttenuationModel(), bottom_snr_db: float = 0.0,
                noise_sigma: Optional[float] = None) -> FrameStack:
    """Aligned stack of the default phantom from 5 to 35 mm.

    Unless given, the noise level is set so the clean RMS of the deepest
    tenth of the image equals ``noise_sigma * 10**(bottom_snr_db / 20)``.
    """
    grid = depth_grid(probe)
    field = default_phantom(grid, seed)
    if noise_sigma is None:
        clean = das_beamform(simulate_channel_data(probe, field, atten), grid).samples
        bottom = clean[-max(1, grid.nz // 10):].astype(np.float64)
        noise_sigma = float(np.sqrt(np.mean(bottom ** 2))) / 10 ** (bottom_snr_db / 20.0)
    return generate_frame_stack(probe, field, atten, MotionModel(), n, noise_sigma, seed, grid,
                                medium_id=f"phantom{seed:04d}")
