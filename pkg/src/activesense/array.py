"""Antenna array geometry, point-target backscatter parameters and link budget."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class ArrayConfig:
    """Half-wavelength ULA used for both transmit and radar receive."""

    n_antennas: int
    carrier_freq_hz: float = 30e9
    wavelength_m: float = field(init=False)

    def __post_init__(self):
        if self.n_antennas < 2:
            raise DomainError(f"n_antennas must be >= 2, got {self.n_antennas}")
        if self.carrier_freq_hz <= 0:
            raise DomainError("carrier_freq_hz must be positive")
        object.__setattr__(self, "wavelength_m", SPEED_OF_LIGHT / self.carrier_freq_hz)


@dataclass(frozen=True)
class Target:
    range_m: float
    radial_speed_mps: float = 0.0
    angle_rad: float = 0.0
    rcs_m2: float = 1.0

    def __post_init__(self):
        if not self.range_m > 0:
            raise DomainError(f"range_m must be positive, got {self.range_m}")
        if not self.rcs_m2 > 0:
            raise DomainError(f"rcs_m2 must be positive, got {self.rcs_m2}")
        _check_angle(self.angle_rad)


@dataclass(frozen=True)
class PathParams:
    """Channel parameters of one backscatter path (round-trip delay and Doppler)."""

    gain: complex
    delay_s: float
    doppler_hz: float
    angle_rad: float

    @property
    def effective_gain(self) -> complex:
        """Gain with the delay-Doppler phase term folded in, h' = h exp(j2pi tau nu)."""
        return self.gain * np.exp(2j * np.pi * self.delay_s * self.doppler_hz)


@dataclass(frozen=True)
class NoiseModel:
    psd_w_per_hz: float = 2e-21
    noise_figure_db: float = 3.0
    bandwidth_hz: float = 150e6

    def __post_init__(self):
        if self.psd_w_per_hz <= 0 or self.bandwidth_hz <= 0:
            raise DomainError("noise PSD and bandwidth must be positive")
        if self.noise_figure_db < 0:
            raise DomainError("noise figure must be nonnegative")

    @property
    def variance_w(self) -> float:
        return self.psd_w_per_hz * 10 ** (self.noise_figure_db / 10) * self.bandwidth_hz


def _check_angle(angle_rad: float) -> None:
    if not (-math.pi / 2 <= angle_rad <= math.pi / 2):
        raise DomainError(f"angle {angle_rad!r} rad outside [-pi/2, pi/2]")


def steering_vector(angle_rad: float, n_antennas: int) -> np.ndarray:
    """Array response a(phi) with elements exp(j*pi*i*sin(phi)), i = 0..N_a-1."""
    _check_angle(angle_rad)
    if n_antennas < 1:
        raise DomainError("n_antennas must be >= 1")
    return np.exp(1j * np.pi * np.arange(n_antennas) * math.sin(angle_rad))


def steering_matrix(sin_values, n_antennas: int) -> np.ndarray:
    """Stack of steering vectors, one row per entry of ``sin_values``.

    Takes sin-space coordinates directly so that callers can sample beamspace
    uniformly without going through arcsin.
    """
    s = np.asarray(sin_values, dtype=float)
    return np.exp(1j * np.pi * np.outer(s, np.arange(n_antennas)))


def channel_gain_sq(target: Target, array: ArrayConfig) -> float:
    lam = array.wavelength_m
    return lam**2 * target.rcs_m2 / ((4 * math.pi) ** 3 * target.range_m**4)


def path_params(target: Target, array: ArrayConfig, rng: np.random.Generator) -> PathParams:
    """Draw the backscatter path of ``target``; only the gain phase is random."""
    amplitude = math.sqrt(channel_gain_sq(target, array))
    phase = rng.uniform(0.0, 2 * math.pi)
    return PathParams(
        gain=complex(amplitude * np.exp(1j * phase)),
        delay_s=2 * target.range_m / SPEED_OF_LIGHT,
        doppler_hz=2 * target.radial_speed_mps * array.carrier_freq_hz / SPEED_OF_LIGHT,
        angle_rad=target.angle_rad,
    )


def link_snr_db(target: Target, tx_power_w: float, noise: NoiseModel, array: ArrayConfig) -> float:
    """Per-sample radar SNR before any array or processing gain."""
    if tx_power_w <= 0:
        raise DomainError("tx_power_w must be positive")
    return 10 * math.log10(channel_gain_sq(target, array) * tx_power_w / noise.variance_w)


def range_for_snr_db(snr_db: float, tx_power_w: float, noise: NoiseModel, array: ArrayConfig,
                     rcs_m2: float = 1.0) -> float:
    """Inverse of :func:`link_snr_db` in range."""
    lam = array.wavelength_m
    lin = 10 ** (snr_db / 10)
    return (lam**2 * rcs_m2 * tx_power_w / ((4 * math.pi) ** 3 * noise.variance_w * lin)) ** 0.25


def dbm_to_w(dbm: float) -> float:
    return 10 ** ((dbm - 30) / 10)
