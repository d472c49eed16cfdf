"""Synthetic plane-wave ultrasound RF data.

Point-scatterer pulse-echo simulation for a linear array firing a single
0 degree plane wave, delay-and-sum beamforming, additive acquisition noise,
rigid inter-frame motion and B-mode conversion.

All randomness is driven by explicit integer seeds. Per-frame generators are
derived as ``np.random.default_rng([seed, frame_index, stream])`` so frames
can be produced in any order (or in parallel) with identical results.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.signal import hilbert

from n2nus._validation import check_finite, check_positive

#: 0.5 dB/(cm MHz) expressed in Np/(m Hz).
DEFAULT_ALPHA0 = 0.5 / (20.0 * math.log10(math.e)) * 100.0 / 1e6

# stream ids for per-frame generators
_STREAM_MOTION = 0
_STREAM_NOISE = 1


class FrameKind(str, enum.Enum):
    CHANNEL = "channel"
    BEAMFORMED = "beamformed"


@dataclass(frozen=True)
class ProbeConfig:
    """Linear array and acquisition constants."""

    num_elements: int = 32
    pitch: float = 3.0e-4
    center_freq: float = 7.6e6
    sampling_freq: float = 31.25e6
    sound_speed: float = 1540.0
    num_samples: int = 2048
    pulse_cycles: int = 3

    def __post_init__(self):
        if self.num_elements < 2:
            raise ValueError("num_elements must be >= 2")
        check_positive(self.pitch, "pitch")
        check_positive(self.sound_speed, "sound_speed")
        check_positive(self.center_freq, "center_freq")
        if self.sampling_freq <= 2.0 * self.center_freq:
            raise ValueError("sampling_freq must exceed twice center_freq")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.pulse_cycles < 1:
            raise ValueError("pulse_cycles must be >= 1")

    @property
    def wavelength(self) -> float:
        return self.sound_speed / self.center_freq

    @property
    def max_depth(self) -> float:
        """Deepest point whose round-trip echo fits in the recorded trace."""
        return self.num_samples * self.sound_speed / (2.0 * self.sampling_freq)

    @property
    def element_x(self) -> np.ndarray:
        """Lateral element centres, symmetric about x = 0."""
        n = self.num_elements
        return (np.arange(n) - (n - 1) / 2.0) * self.pitch

    def to_dict(self) -> dict:
        return {
            "num_elements": self.num_elements,
            "pitch": self.pitch,
            "center_freq": self.center_freq,
            "sampling_freq": self.sampling_freq,
            "sound_speed": self.sound_speed,
            "num_samples": self.num_samples,
            "pulse_cycles": self.pulse_cycles,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        return cls(**d)


@dataclass(frozen=True)
class AttenuationModel:
    """Homogeneous attenuation with a linear frequency law ``alpha = alpha0 * f``.

    ``alpha0`` is in Np/(m Hz). ``prefactor`` multiplies the depth integral of
    alpha in the amplitude exponent.
    """

    alpha0: float = DEFAULT_ALPHA0
    prefactor: float = 4.0

    def __post_init__(self):
        if not self.alpha0 >= 0:
            raise ValueError("alpha0 must be >= 0")
        check_positive(self.prefactor, "prefactor")

    @classmethod
    def from_db(cls, db_per_cm_mhz: float, prefactor: float = 4.0) -> "AttenuationModel":
        np_per_m_hz = db_per_cm_mhz / (20.0 * math.log10(math.e)) * 100.0 / 1e6
        return cls(alpha0=np_per_m_hz, prefactor=prefactor)


def attenuation_gain(model: AttenuationModel, f, z):
    """Amplitude gain ``exp(-prefactor * alpha0 * f * z)`` at frequency ``f`` and depth ``z``.

    Accepts scalars or arrays for ``z``; returns the same shape.
    """
    z_arr = np.asarray(z, dtype=np.float64)
    if np.any(z_arr < 0):
        raise ValueError("depth must be >= 0")
    if not f > 0:
        raise ValueError("frequency must be > 0")
    g = np.exp(-model.prefactor * model.alpha0 * f * z_arr)
    return float(g) if g.ndim == 0 else g


@dataclass(frozen=True)
class Inclusion:
    center: tuple  # (z, x) metres
    radius: float
    contrast: float


@dataclass(frozen=True)
class Extent:
    """Rectangular scatterer region, depth in ``[z_min, z_max]``."""

    z_max: float
    x_min: float
    x_max: float
    z_min: float = 0.0

    def __post_init__(self):
        if not (0 <= self.z_min < self.z_max):
            raise ValueError("extent needs 0 <= z_min < z_max")
        if not self.x_min < self.x_max:
            raise ValueError("extent needs x_min < x_max")

    @property
    def area(self) -> float:
        return (self.z_max - self.z_min) * (self.x_max - self.x_min)

    def contains(self, z, x) -> np.ndarray:
        z = np.asarray(z)
        x = np.asarray(x)
        return (z >= self.z_min) & (z <= self.z_max) & (x >= self.x_min) & (x <= self.x_max)


@dataclass(frozen=True)
class ScattererField:
    positions: np.ndarray  # (S, 2) columns z, x
    amplitudes: np.ndarray  # (S,)
    extent: Extent

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        amp = np.asarray(self.amplitudes, dtype=np.float64).reshape(-1)
        if pos.shape[0] != amp.shape[0]:
            raise ValueError("positions and amplitudes differ in length")
        check_finite(amp, "amplitudes")
        if pos.size and not np.all(self.extent.contains(pos[:, 0], pos[:, 1])):
            raise ValueError("scatterer outside extent")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "amplitudes", amp)

    def __len__(self):
        return self.amplitudes.shape[0]

    def scaled(self, k: float) -> "ScattererField":
        return replace(self, amplitudes=self.amplitudes * k)


@dataclass(frozen=True)
class MotionModel:
    """Rigid per-frame tremor; frame 0 is never shifted."""

    tremor_sigma_z: float = 0.0
    tremor_sigma_x: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.tremor_sigma_z < 0 or self.tremor_sigma_x < 0:
            raise ValueError("tremor sigmas must be >= 0")

    @property
    def is_static(self) -> bool:
        return self.tremor_sigma_z == 0 and self.tremor_sigma_x == 0

    def shift(self, frame_index: int) -> tuple:
        if frame_index == 0 or self.is_static:
            return (0.0, 0.0)
        rng = np.random.default_rng([self.seed, frame_index, _STREAM_MOTION])
        dz, dx = rng.standard_normal(2)
        return (float(dz * self.tremor_sigma_z), float(dx * self.tremor_sigma_x))


@dataclass(frozen=True)
class BeamformGrid:
    """Regular pixel grid: ``nz`` depths from ``z0`` and ``nx`` lines from ``x0``."""

    z0: float
    dz: float
    nz: int
    x0: float
    dx: float
    nx: int

    def __post_init__(self):
        if self.nz < 1 or self.nx < 1:
            raise ValueError("grid must have at least one pixel")
        check_positive(self.dz, "dz")
        check_positive(self.dx, "dx")
        if self.z0 < 0:
            raise ValueError("grid z0 must be >= 0")

    @classmethod
    def centered(cls, z0, dz, nz, dx, nx) -> "BeamformGrid":
        return cls(z0=z0, dz=dz, nz=nz, x0=-(nx - 1) / 2.0 * dx, dx=dx, nx=nx)

    @property
    def z(self) -> np.ndarray:
        return self.z0 + self.dz * np.arange(self.nz)

    @property
    def x(self) -> np.ndarray:
        return self.x0 + self.dx * np.arange(self.nx)

    @property
    def shape(self) -> tuple:
        return (self.nz, self.nx)

    def to_dict(self) -> dict:
        return {"z0": self.z0, "dz": self.dz, "nz": self.nz,
                "x0": self.x0, "dx": self.dx, "nx": self.nx}

    @classmethod
    def from_dict(cls, d: dict) -> "BeamformGrid":
        return cls(**d)


@dataclass
class RFFrame:
    samples: np.ndarray
    kind: FrameKind
    probe: ProbeConfig
    noise_sigma: float = 0.0
    grid: Optional[BeamformGrid] = None

    def __post_init__(self):
        self.kind = FrameKind(self.kind)
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise ValueError("RF samples must be 2-D")
        check_finite(self.samples, "RF samples")
        if self.kind is FrameKind.CHANNEL:
            expected = (self.probe.num_samples, self.probe.num_elements)
        elif self.grid is not None:
            expected = self.grid.shape
        else:
            expected = self.samples.shape
        if self.samples.shape != expected:
            raise ValueError(f"RF frame shape {self.samples.shape} != {expected}")

    @property
    def shape(self) -> tuple:
        return self.samples.shape

    def with_samples(self, samples, noise_sigma=None) -> "RFFrame":
        return RFFrame(samples, self.kind, self.probe,
                       self.noise_sigma if noise_sigma is None else noise_sigma, self.grid)


@dataclass
class FrameStack:
    frames: list
    clean: Optional[RFFrame] = None
    medium_id: str = "medium"
    shifts: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("frame stack is empty")
        ref = self.frames[0]
        for f in self.frames[1:]:
            if f.shape != ref.shape or f.kind != ref.kind or f.probe != ref.probe:
                raise ValueError("frames in a stack must share kind, shape and probe")
        if self.clean is not None and self.clean.shape != ref.shape:
            raise ValueError("clean reference shape differs from frames")

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self) -> tuple:
        return self.frames[0].shape

    @property
    def kind(self) -> FrameKind:
        return self.frames[0].kind

    def as_array(self) -> np.ndarray:
        """Frames stacked as ``(n, rows, cols)`` float32."""
        return np.stack([f.samples for f in self.frames])


@dataclass
class BModeImage:
    pixels: np.ndarray
    dynamic_range_db: float = 60.0


def generate_scatterers(extent: Extent, density: float,
                        inclusions: Sequence[Inclusion] = (), seed: int = 0) -> ScattererField:
    """Uniform random scatterers with standard normal reflectivity.

    ``density`` is in scatterers per square metre. Amplitudes of scatterers
    inside an inclusion are multiplied by its contrast (later inclusions
    apply on top of earlier ones).
    """
    check_positive(density, "density")
    rng = np.random.default_rng(seed)
    count = int(rng.poisson(density * extent.area))
    z = rng.uniform(extent.z_min, extent.z_max, count)
    x = rng.uniform(extent.x_min, extent.x_max, count)
    amp = rng.standard_normal(count)
    for inc in inclusions:
        cz, cx = inc.center
        inside = (z - cz) ** 2 + (x - cx) ** 2 <= inc.radius ** 2
        amp[inside] *= inc.contrast
    return ScattererField(np.column_stack([z, x]), amp, extent)


def pulse(probe: ProbeConfig, t):
    """Gaussian-windowed cosine at the centre frequency.

    The window standard deviation is ``pulse_cycles / (6 f_c)``, so the pulse is
    effectively confined to ``pulse_cycles`` carrier periods (+/- 3 sigma).
    """
    sigma = probe.pulse_cycles / (6.0 * probe.center_freq)
    t = np.asarray(t)
    return np.cos(2 * np.pi * probe.center_freq * t) * np.exp(-0.5 * (t / sigma) ** 2)


def _pulse_half_width(probe: ProbeConfig) -> int:
    # samples covering +/- 4 sigma of the window
    sigma = probe.pulse_cycles / (6.0 * probe.center_freq)
    return int(math.ceil(4.0 * sigma * probe.sampling_freq)) + 1


def simulate_channel_data(probe: ProbeConfig, field: ScattererField,
                          atten: AttenuationModel = AttenuationModel(),
                          shift: tuple = (0.0, 0.0)) -> RFFrame:
    """Clean per-element echoes of a 0 degree plane-wave transmit.

    Scatterers pushed above the probe or beyond ``probe.max_depth`` by the
    shift are skipped.
    """
    fs = probe.sampling_freq
    c = probe.sound_speed
    out = np.zeros((probe.num_samples, probe.num_elements), dtype=np.float64)
    if len(field) == 0:
        return RFFrame(out, FrameKind.CHANNEL, probe)

    z = field.positions[:, 0] + shift[0]
    x = field.positions[:, 1] + shift[1]
    keep = (z >= 0) & (z <= probe.max_depth) & (field.amplitudes != 0)
    z, x = z[keep], x[keep]
    amp = field.amplitudes[keep] * attenuation_gain(atten, probe.center_freq, z)

    xe = probe.element_x
    tau = (z[:, None] + np.hypot(z[:, None], x[:, None] - xe[None, :])) / c  # (S, E)
    center = np.floor(tau * fs).astype(np.int64)
    half = _pulse_half_width(probe)
    elem = np.broadcast_to(np.arange(probe.num_elements), tau.shape)
    weight = np.broadcast_to(amp[:, None], tau.shape)
    flat = out.reshape(-1)
    for k in range(-half, half + 1):
        idx = center + k
        ok = (idx >= 0) & (idx < probe.num_samples)
        vals = weight[ok] * pulse(probe, idx[ok] / fs - tau[ok])
        flat += np.bincount(idx[ok] * probe.num_elements + elem[ok], weights=vals,
                            minlength=flat.size)
    return RFFrame(out, FrameKind.CHANNEL, probe)


def add_gaussian_noise(frame: RFFrame, sigma: float, seed: int = 0) -> RFFrame:
    """Return ``frame`` plus i.i.d. N(0, sigma^2) noise."""
    if not sigma >= 0:
        raise ValueError("noise sigma must be >= 0")
    if sigma == 0:
        return frame.with_samples(frame.samples.copy())
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(frame.shape) * sigma
    total = math.hypot(frame.noise_sigma, sigma)
    return frame.with_samples(frame.samples.astype(np.float64) + noise, noise_sigma=total)


def das_beamform(channel: RFFrame, grid: BeamformGrid) -> RFFrame:
    """Delay-and-sum for a 0 degree plane-wave transmit with linear interpolation.

    Pixel (z, x) sums, over elements, the trace sampled at
    ``(z + hypot(z, x - x_e)) / c * fs``. Delays outside the trace contribute 0.
    """
    if channel.kind is not FrameKind.CHANNEL:
        raise ValueError("das_beamform expects channel data")
    probe = channel.probe
    data = channel.samples.astype(np.float64)
    ns = data.shape[0]
    z = grid.z[:, None]
    x = grid.x[None, :]
    out = np.zeros(grid.shape, dtype=np.float64)
    scale = probe.sampling_freq / probe.sound_speed
    for e, xe in enumerate(probe.element_x):
        d = (z + np.hypot(z, x - xe)) * scale
        i0 = np.floor(d).astype(np.int64)
        frac = d - i0
        trace = data[:, e]
        lo_ok = (i0 >= 0) & (i0 < ns)
        hi_ok = (i0 + 1 >= 0) & (i0 + 1 < ns)
        lo = np.where(lo_ok, trace[np.clip(i0, 0, ns - 1)], 0.0)
        hi = np.where(hi_ok, trace[np.clip(i0 + 1, 0, ns - 1)], 0.0)
        out += (1.0 - frac) * lo + frac * hi
    return RFFrame(out, FrameKind.BEAMFORMED, probe, channel.noise_sigma, grid)


def envelope(rf: np.ndarray) -> np.ndarray:
    """Magnitude of the analytic signal along the axial (first) axis."""
    rf = np.asarray(rf, dtype=np.float64)
    return np.abs(hilbert(rf, axis=0))


def to_bmode(frame, dynamic_range_db: float = 60.0, ref_max: Optional[float] = None) -> BModeImage:
    """Log-compressed envelope mapped to [0, 1].

    The envelope is normalised by its own maximum unless ``ref_max`` is given,
    which lets several images share one display gain. 0 maps to
    ``-dynamic_range_db`` and 1 to 0 dB.
    """
    check_positive(dynamic_range_db, "dynamic_range_db")
    rf = frame.samples if isinstance(frame, RFFrame) else np.asarray(frame)
    if rf.size == 0:
        raise ValueError("empty frame")
    env = envelope(rf)
    peak = env.max() if ref_max is None else float(ref_max)
    if peak <= 0:
        return BModeImage(np.zeros_like(env), dynamic_range_db)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(env / peak)
    db = np.clip(db, -dynamic_range_db, 0.0)
    return BModeImage((db + dynamic_range_db) / dynamic_range_db, dynamic_range_db)


def generate_frame_stack(probe: ProbeConfig, field: ScattererField, atten: AttenuationModel,
                         motion: MotionModel, n: int, noise_sigma: float, seed: int,
                         grid: BeamformGrid, medium_id: str = "medium",
                         noise_stage: str = "beamformed") -> FrameStack:
    """Simulate ``n`` noisy beamformed frames of one medium.

    Each frame is the medium rigidly shifted by ``motion.shift(i)``, simulated,
    beamformed, and corrupted with independent Gaussian noise. With
    ``noise_stage="channel"`` the noise is added to the element traces before
    beamforming instead of to the beamformed frame. ``clean`` is the noiseless
    beamformed frame at zero shift.
    """
    if n < 2:
        raise ValueError("a frame stack needs n >= 2 frames")
    if noise_stage not in ("beamformed", "channel"):
        raise ValueError(f"unknown noise_stage {noise_stage!r}")
    clean_channel = simulate_channel_data(probe, field, atten)
    clean = das_beamform(clean_channel, grid)
    frames, shifts = [], []
    for i in range(n):
        shift = motion.shift(i)
        shifts.append(shift)
        if noise_stage == "beamformed":
            bf = clean if shift == (0.0, 0.0) else das_beamform(
                simulate_channel_data(probe, field, atten, shift), grid)
            frame = add_gaussian_noise(bf, noise_sigma, seed=_frame_seed(seed, i))
        else:
            ch = clean_channel if shift == (0.0, 0.0) else simulate_channel_data(
                probe, field, atten, shift)
            frame = das_beamform(add_gaussian_noise(ch, noise_sigma, seed=_frame_seed(seed, i)), grid)
        frames.append(frame)
    return FrameStack(frames, clean, medium_id, shifts)


def _frame_seed(seed: int, frame_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, frame_index, _STREAM_NOISE])
