"""OTFS frame synthesis and the delay-Doppler response of a point path.

Rectangular transmit/receive pulses are used and the frame is treated as
periodic in time, so a delay is a circular shift of the ``N*M`` sample frame.
With that convention the whole chain (ISFFT, Heisenberg transform, delay,
Doppler ramp, Wigner transform, SFFT) is unitary and the crosstalk matrix
is the identity at (0, 0).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .array import NoiseModel, PathParams, steering_vector
from .errors import ContractViolation, DomainError


@dataclass(frozen=True)
class OtfsFrame:
    n_doppler: int = 16
    m_delay: int = 16
    subcarrier_hz: float = 150e6 / 16
    blocks: int = 1

    def __post_init__(self):
        if self.n_doppler < 1 or self.m_delay < 1:
            raise DomainError("frame dimensions must be positive")
        if self.subcarrier_hz <= 0:
            raise DomainError("subcarrier spacing must be positive")

    @property
    def symbol_s(self) -> float:
        return 1.0 / self.subcarrier_hz

    @property
    def bandwidth_hz(self) -> float:
        return self.m_delay * self.subcarrier_hz

    @property
    def block_s(self) -> float:
        return self.n_doppler * self.symbol_s

    @property
    def n_samples(self) -> int:
        return self.n_doppler * self.m_delay

    @property
    def delay_resolution_s(self) -> float:
        return 1.0 / self.bandwidth_hz

    @property
    def doppler_resolution_hz(self) -> float:
        return self.subcarrier_hz / self.n_doppler


@dataclass(frozen=True)
class SymbolFrame:
    symbols: np.ndarray
    constellation: str = "qpsk"

    @property
    def vector(self) -> np.ndarray:
        """Row-major stacking, entry (k, l) at index k*M + l."""
        return self.symbols.reshape(-1)


@dataclass(frozen=True)
class CrosstalkMatrix:
    entries: np.ndarray
    doppler_hz: float
    delay_s: float

    def __matmul__(self, other):
        return self.entries @ other


@dataclass(frozen=True)
class BlockObservation:
    samples: np.ndarray
    block_index: int
    reduction: np.ndarray
    symbols: np.ndarray

    def __post_init__(self):
        n_rf = self.reduction.shape[1]
        if self.samples.shape != (n_rf * self.symbols.size,):
            raise ContractViolation(
                f"observation length {self.samples.shape} != N_rf*N*M = {n_rf * self.symbols.size}"
            )

    @property
    def per_chain(self) -> np.ndarray:
        """Samples reshaped to (N_rf, N*M)."""
        return self.samples.reshape(self.reduction.shape[1], -1)


def isfft(dd_grid: np.ndarray) -> np.ndarray:
    """Delay-Doppler grid x[k, l] to time-frequency grid X[n, m].

    X[n, m] = 1/sqrt(NM) sum_{k,l} x[k, l] exp(j2pi(nk/N - ml/M)).
    """
    return np.fft.fft(np.fft.ifft(dd_grid, axis=-2, norm="ortho"), axis=-1, norm="ortho")


def sfft(tf_grid: np.ndarray) -> np.ndarray:
    return np.fft.ifft(np.fft.fft(tf_grid, axis=-2, norm="ortho"), axis=-1, norm="ortho")


def heisenberg(tf_grid: np.ndarray) -> np.ndarray:
    """Rectangular-pulse multicarrier modulator: (..., N, M) grid to (..., N*M) samples."""
    sig = np.fft.ifft(tf_grid, axis=-1, norm="ortho")
    return sig.reshape(*sig.shape[:-2], -1)


def wigner(samples: np.ndarray, frame: OtfsFrame) -> np.ndarray:
    grid = samples.reshape(*samples.shape[:-1], frame.n_doppler, frame.m_delay)
    return np.fft.fft(grid, axis=-1, norm="ortho")


def modulate(x: np.ndarray, frame: OtfsFrame) -> np.ndarray:
    """Delay-Doppler symbols (vectors of length N*M, batched) to time samples at rate W."""
    grid = np.asarray(x).reshape(*np.shape(x)[:-1], frame.n_doppler, frame.m_delay)
    return heisenberg(isfft(grid))


def demodulate(samples: np.ndarray, frame: OtfsFrame) -> np.ndarray:
    dd = sfft(wigner(samples, frame))
    return dd.reshape(*dd.shape[:-2], -1)


def delay_signal(samples: np.ndarray, delay_s, frame: OtfsFrame) -> np.ndarray:
    """Band-limited circular delay of the last axis.

    ``delay_s`` may be a scalar or a 1-D array; an array adds a leading axis
    holding one delayed copy per delay value.
    """
    n = samples.shape[-1]
    freqs = np.fft.fftfreq(n, d=1.0 / frame.bandwidth_hz)
    tau = np.asarray(delay_s, dtype=float)
    spectrum = np.fft.fft(samples, axis=-1)
    ramp = np.exp(-2j * np.pi * np.multiply.outer(tau, freqs))
    if tau.ndim == 0:
        return np.fft.ifft(spectrum * ramp, axis=-1)
    return np.fft.ifft(ramp.reshape(tau.shape + (1,) * (samples.ndim - 1) + (n,)) * spectrum, axis=-1)


def doppler_ramp(doppler_hz, frame: OtfsFrame) -> np.ndarray:
    """exp(j2pi nu t_i) over the frame's sample instants; one row per Doppler value."""
    t = np.arange(frame.n_samples) / frame.bandwidth_hz
    return np.exp(2j * np.pi * np.multiply.outer(np.asarray(doppler_hz, dtype=float), t))


def _check_delay(delay_s: float, frame: OtfsFrame) -> None:
    if abs(delay_s) >= frame.block_s:
        raise DomainError(f"delay {delay_s:g} s not shorter than block duration {frame.block_s:g} s")


def channel_response(x: np.ndarray, doppler_hz: float, delay_s: float, frame: OtfsFrame) -> np.ndarray:
    """Psi(nu, tau) @ x, evaluated through the time-domain chain without forming Psi."""
    _check_delay(delay_s, frame)
    s = modulate(x, frame)
    r = delay_signal(s, delay_s, frame) * doppler_ramp(doppler_hz, frame)
    return demodulate(r, frame)


@functools.lru_cache(maxsize=256)
def _crosstalk_entries(doppler_hz: float, delay_s: float, n: int, m: int, df: float) -> np.ndarray:
    frame = OtfsFrame(n, m, df)
    # row j of channel_response(I) is the response to impulse j, i.e. column j of Psi
    cols = channel_response(np.eye(n * m, dtype=complex), doppler_hz, delay_s, frame)
    psi = np.ascontiguousarray(cols.T)
    psi.flags.writeable = False
    return psi


def crosstalk_matrix(doppler_hz: float, delay_s: float, frame: OtfsFrame) -> CrosstalkMatrix:
    """Materialized NM x NM delay-Doppler crosstalk matrix, cached per (nu, tau, frame)."""
    _check_delay(delay_s, frame)
    entries = _crosstalk_entries(float(doppler_hz), float(delay_s), frame.n_doppler,
                                 frame.m_delay, float(frame.subcarrier_hz))
    return CrosstalkMatrix(entries, float(doppler_hz), float(delay_s))


def spatial_response(u_matrix: np.ndarray, tx_beam: np.ndarray, angle_rad: float) -> np.ndarray:
    """g = U^H a(phi) a^H(phi) f, the length-N_rf spatial factor of the effective channel."""
    a = steering_vector(angle_rad, u_matrix.shape[0])
    return (u_matrix.conj().T @ a) * (a.conj() @ tx_beam)


def effective_channel_apply(u_matrix: np.ndarray, f: np.ndarray, angle: float, psi, x: np.ndarray) -> np.ndarray:
    """((U^H a a^H f) kron Psi) x without building the Kronecker product."""
    u_matrix = np.atleast_2d(np.asarray(u_matrix))
    if u_matrix.shape[0] != f.shape[0]:
        raise ContractViolation(f"U has {u_matrix.shape[0]} rows but f has length {f.shape[0]}")
    entries = psi.entries if isinstance(psi, CrosstalkMatrix) else np.asarray(psi)
    if entries.shape != (x.size, x.size):
        raise ContractViolation(f"crosstalk shape {entries.shape} does not match x of length {x.size}")
    g = spatial_response(u_matrix, f, angle)
    z = entries @ x
    return (g[:, None] * z[None, :]).reshape(-1)


def generate_symbols(frame: OtfsFrame, rng: np.random.Generator) -> SymbolFrame:
    bits = rng.integers(0, 2, size=(frame.n_doppler, frame.m_delay, 2))
    sym = ((1 - 2 * bits[..., 0]) + 1j * (1 - 2 * bits[..., 1])) / math.sqrt(2)
    return SymbolFrame(sym)


def _noise_variance(noise) -> float:
    if noise is None:
        return 0.0
    if isinstance(noise, NoiseModel):
        return noise.variance_w
    return float(noise)


def complex_awgn(shape, variance: float, rng: np.random.Generator) -> np.ndarray:
    scale = math.sqrt(variance / 2)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def synthesize_rx_block(paths: list[PathParams], u_matrix: np.ndarray, f: np.ndarray, x: SymbolFrame,
                        frame: OtfsFrame, noise, rng: np.random.Generator, *, block_index: int = 0,
                        tx_power_w: float = 1.0) -> BlockObservation:
    """One received block y_b = sqrt(P) sum_p h'_p G_b(nu_p, tau_p, phi_p) x_b + w_b.

    ``noise`` is a :class:`NoiseModel`, a variance in watts, or ``None`` for a
    noiseless block.
    """
    u_matrix = np.atleast_2d(np.asarray(u_matrix, dtype=complex))
    xv = x.vector
    n_rf = u_matrix.shape[1]
    y = np.zeros(n_rf * xv.size, dtype=complex)
    amp = math.sqrt(tx_power_w)
    for p in paths:
        g = spatial_response(u_matrix, f, p.angle_rad)
        z = channel_response(xv, p.doppler_hz, p.delay_s, frame)
        y += amp * p.effective_gain * (g[:, None] * z[None, :]).reshape(-1)
    var = _noise_variance(noise)
    if var > 0:
        y += complex_awgn(y.shape, var, rng)
    return BlockObservation(y, block_index, u_matrix, xv)
