"""Synthetic dual-venc 4D Flow MRI acquisition.

Noise-free high-resolution velocity plus magnitude is phase-encoded at a low and
a high venc, Fourier transformed, cropped to half resolution in k-space, corrupted
with complex Gaussian noise, transformed back and unwrapped with the dual-venc
rule. All transforms use the orthonormal DFT with DC-centred k-space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .volume import ComplexVolume, MagnitudeVolume, Space, VelocityVolume

__all__ = [
    "AcquisitionConfig",
    "VencPair",
    "SnrRecord",
    "select_vencs",
    "encode_phase",
    "assemble_complex",
    "fft3",
    "ifft3",
    "crop_kspace",
    "add_kspace_noise",
    "decode_velocity",
    "dualvenc_unwrap",
    "synthesize",
    "wrap_velocity",
]

HIGH, LOW, NOISE_FREE = "High", "Low", "NoiseFree"


@dataclass(frozen=True)
class AcquisitionConfig:
    venc_low: float = 0.6
    tsnr_high_range: tuple = (8.0, 12.0)
    tsnr_low_range: tuple = (2.0, 6.0)
    tsnr_highvenc: float = 15.0
    magnitude_floor: float = 30.0
    downsample_factor: int = 2
    seed: int = 0
    noise_free: bool = False

    def __post_init__(self):
        if not self.venc_low > 0:
            raise ValidationError("venc_low must be > 0")
        for name in ("tsnr_high_range", "tsnr_low_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValidationError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if not self.tsnr_highvenc > 0:
            raise ValidationError("tsnr_highvenc must be > 0")
        if self.downsample_factor != 2:
            raise ValidationError("downsample_factor must be 2")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")


@dataclass(frozen=True)
class VencPair:
    venc_low: float
    venc_high: float


@dataclass(frozen=True)
class SnrRecord:
    timestep: int
    stratum: str
    tsnr: float


def select_vencs(frame, cfg):
    """High venc is ``2 * venc_low`` unless the frame's peak component exceeds it."""
    frame = np.asarray(frame)
    vmax = float(np.max(np.abs(frame))) if frame.size else 0.0
    high = vmax if vmax >= 2.0 * cfg.venc_low else 2.0 * cfg.venc_low
    return VencPair(cfg.venc_low, high)


def encode_phase(v, venc):
    if not venc > 0:
        raise ValidationError("venc must be > 0")
    return np.asarray(v, dtype=float) / venc * np.pi


def assemble_complex(m, phase, floor=30.0):
    """Complex image ``m * exp(i*phase)`` with magnitudes below ``floor`` zeroed."""
    m = np.asarray(getattr(m, "data", m), dtype=float)
    phase = np.asarray(phase, dtype=float)
    if m.shape != phase.shape:
        raise DimensionError(f"magnitude {m.shape} and phase {phase.shape} shapes differ")
    m = np.where(m < floor, 0.0, m)
    return ComplexVolume(m * np.exp(1j * phase), Space.IMAGE)


def fft3(x):
    """Unitary 3-D DFT returning DC-centred k-space."""
    if x.space is not Space.IMAGE:
        raise ValidationError("fft3 expects image-space input")
    k = np.fft.fftshift(np.fft.fftn(x.data, norm="ortho"))
    return ComplexVolume(k, Space.KSPACE)


def ifft3(k):
    if k.space is not Space.KSPACE:
        raise ValidationError("ifft3 expects k-space input")
    img = np.fft.ifftn(np.fft.ifftshift(k.data), norm="ortho")
    return ComplexVolume(img, Space.IMAGE)


def crop_kspace(k, factor=2):
    """Keep the central half of DC-centred k-space along every axis.

    The result is scaled by ``factor**-1.5`` so that, under the unitary convention,
    band-limited image intensities are unchanged after the inverse transform.
    """
    if factor != 2:
        raise ValidationError("only a downsampling factor of 2 is supported")
    if k.space is not Space.KSPACE:
        raise ValidationError("crop_kspace expects k-space input")
    shape = k.data.shape
    if any(n % 2 for n in shape):
        raise DimensionError(f"k-space dims must be even, got {shape}")
    slices = []
    for n in shape:
        half = n // 2
        start = n // 2 - half // 2
        slices.append(slice(start, start + half))
    cropped = k.data[tuple(slices)] / math.sqrt(factor**3)
    return ComplexVolume(cropped, Space.KSPACE)


def add_kspace_noise(k, tsnr, signal_ref, rng):
    """Add complex white Gaussian noise with per-channel std ``signal_ref / tsnr``.

    The transform is unitary, so the same std appears per real/imaginary channel
    in image space. ``tsnr = inf`` returns the input unchanged.
    """
    if math.isinf(tsnr):
        return k
    if not tsnr > 0 or not signal_ref > 0:
        raise ValidationError("tsnr and signal_ref must be > 0")
    sigma = signal_ref / tsnr
    shape = k.data.shape
    noise = rng.normal(0.0, sigma, size=shape) + 1j * rng.normal(0.0, sigma, size=shape)
    return ComplexVolume(k.data + noise, k.space)


def decode_velocity(x, venc):
    """Velocity from the principal phase in (-pi, pi], and magnitude ``|x|``."""
    if not venc > 0:
        raise ValidationError("venc must be > 0")
    data = getattr(x, "data", x)
    phase = np.angle(data)
    phase = np.where(phase == -np.pi, np.pi, phase)
    return phase * venc / np.pi, MagnitudeVolume(np.abs(data))


def wrap_velocity(v, venc):
    """Alias ``v`` into ``[-venc, venc)`` the way a phase measurement would."""
    return np.mod(np.asarray(v, dtype=float) + venc, 2.0 * venc) - venc


def dualvenc_unwrap(v_lv, v_hv, venc_low, return_branches=False):
    """Correct up to three wraps per sign in the low-venc velocity.

    ``d = v_hv - v_lv`` selects the number of ``2 * venc_low`` periods to add
    using thresholds 1.2, 3, 5 and 7 times ``venc_low``; outside every branch the
    low-venc value is returned as is. With ``return_branches`` the per-voxel
    branch index (1..6, 0 for no correction) is returned as well.
    """
    v_lv = np.asarray(v_lv, dtype=float)
    v_hv = np.asarray(v_hv, dtype=float)
    if v_lv.shape != v_hv.shape:
        raise DimensionError(f"shape mismatch {v_lv.shape} vs {v_hv.shape}")
    if not venc_low > 0:
        raise ValidationError("venc_low must be > 0")
    t1, t2, t3, t4 = 1.2 * venc_low, 3.0 * venc_low, 5.0 * venc_low, 7.0 * venc_low
    d = v_hv - v_lv
    conditions = [
        (t1 < d) & (d < t2),
        (-t2 < d) & (d < -t1),
        (t2 <= d) & (d < t3),
        (-t3 < d) & (d <= -t2),
        (t3 <= d) & (d < t4),
        (-t4 < d) & (d <= -t3),
    ]
    shifts = [2.0, -2.0, 4.0, -4.0, 6.0, -6.0]
    out = np.select(conditions, [v_lv + s * venc_low for s in shifts], default=v_lv)
    if return_branches:
        branches = np.select(conditions, list(range(1, 7)), default=0)
        return out, branches
    return out


def _draw_tsnr(cfg, t):
    rng = np.random.default_rng([cfg.seed, 0, t])
    if rng.random() < 0.5:
        lo, hi = cfg.tsnr_high_range
        stratum = HIGH
    else:
        lo, hi = cfg.tsnr_low_range
        stratum = LOW
    return stratum, float(rng.uniform(lo, hi))


def _channel(m, v_comp, venc, tsnr, signal_ref, cfg, rng):
    x = assemble_complex(m, encode_phase(v_comp, venc), cfg.magnitude_floor)
    k = crop_kspace(fft3(x), cfg.downsample_factor)
    k = add_kspace_noise(k, tsnr, signal_ref, rng)
    v, _ = decode_velocity(ifft3(k), venc)
    return v


def synthesize(v_hr, m, mask, cfg):
    """Run the full acquisition on every frame.

    Returns the half-resolution dual-venc velocity and a list of
    :class:`SnrRecord`, one per frame. Noise streams are derived from
    ``(seed, frame, component, channel)`` so frames are independent.
    """
    m_arr = np.asarray(getattr(m, "data", m), dtype=float)
    mask = np.asarray(mask, dtype=bool)
    spatial = v_hr.data.shape[1:4]
    if m_arr.shape != spatial or mask.shape != spatial:
        raise DimensionError("velocity, magnitude and mask grids differ")
    if any(n % 2 for n in spatial):
        raise DimensionError(f"volume dims must be even, got {v_hr.dims}")

    floored = np.where(m_arr < cfg.magnitude_floor, 0.0, m_arr)
    fluid = floored[mask] if mask.any() else floored
    signal_ref = float(fluid.mean()) if fluid.size else 0.0
    if not cfg.noise_free and not signal_ref > 0:
        raise ValidationError("mean fluid magnitude is zero; cannot calibrate noise")

    out = np.empty((v_hr.nt,) + tuple(n // 2 for n in spatial) + (3,))
    log = []
    for t in range(v_hr.nt):
        frame = v_hr.data[t]
        vencs = select_vencs(frame, cfg)
        if cfg.noise_free:
            stratum, tsnr_low, tsnr_high = NOISE_FREE, math.inf, math.inf
        else:
            stratum, tsnr_low = _draw_tsnr(cfg, t)
            tsnr_high = cfg.tsnr_highvenc
        log.append(SnrRecord(t, stratum, tsnr_low))
        for c in range(3):
            rng_lv = np.random.default_rng([cfg.seed, 1, t, c, 0])
            rng_hv = np.random.default_rng([cfg.seed, 1, t, c, 1])
            v_lv = _channel(m_arr, frame[..., c], vencs.venc_low, tsnr_low, signal_ref, cfg, rng_lv)
            v_hv = _channel(m_arr, frame[..., c], vencs.venc_high, tsnr_high, signal_ref, cfg, rng_hv)
            out[t, ..., c] = dualvenc_unwrap(v_lv, v_hv, vencs.venc_low)
    return VelocityVolume(out, v_hr.spacing * cfg.downsample_factor, v_hr.dt), log
