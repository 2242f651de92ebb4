"""GLRT metric over the delay-Doppler-angle grid, thresholds and detection extraction.

For a hypothesis (nu, tau, phi) and block b the effective channel output is
G_b x_b = g_b(phi) kron Psi(nu, tau) x_b with g_b = U_b^H a(phi) a(phi)^H f, so

    y_b^H G_b x_b = sum_q g_{b,q}(phi) * y_{b,q}^H Psi(nu, tau) x_b.

The delay-Doppler factor y_{b,q}^H Psi x_b is a cross-ambiguity of the received
and transmitted time signals and is evaluated for the whole (nu, tau) grid at
once; the angle factor is a small matrix product. Psi is unitary, so
||G_b x_b||^2 = ||g_b(phi)||^2 ||x_b||^2.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .array import steering_matrix
from .codebook import Codebook, WeightProfile
from .errors import CalibrationError, ContractViolation, DomainError
from .otfs import (BlockObservation, OtfsFrame, channel_response, delay_signal, doppler_ramp, modulate,
                   spatial_response)

DEFAULT_CLIP_QUANTILE = 0.99
MIN_EXCEEDANCES = 50


@dataclass(frozen=True, eq=False)
class HypothesisGrid:
    doppler_axis: np.ndarray
    delay_axis: np.ndarray
    angle_axis: np.ndarray

    def __post_init__(self):
        for name in ("doppler_axis", "delay_axis", "angle_axis"):
            ax = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if ax.ndim != 1 or ax.size == 0:
                raise ContractViolation(f"{name} must be a nonempty 1-D axis")
            if ax.size > 1 and not np.all(np.diff(ax) > 0):
                raise ContractViolation(f"{name} must be strictly increasing")
            object.__setattr__(self, name, ax)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.doppler_axis.size, self.delay_axis.size, self.angle_axis.size)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def point(self, index) -> tuple[float, float, float]:
        k, d, g = index
        return float(self.doppler_axis[k]), float(self.delay_axis[d]), float(self.angle_axis[g])

    @classmethod
    def from_bins(cls, frame: OtfsFrame, doppler_bins, delay_bins, angles_rad) -> "HypothesisGrid":
        """Grid on integer multiples of the frame's Doppler and delay resolution."""
        return cls(np.asarray(doppler_bins, dtype=float) * frame.doppler_resolution_hz,
                   np.asarray(delay_bins, dtype=float) * frame.delay_resolution_s,
                   np.asarray(angles_rad, dtype=float))


def uniform_angle_grid(fov_deg=(-48.0, 48.0), count: int = 96) -> np.ndarray:
    """``count`` cell-centred angles tiling the FoV, in radians."""
    lo, hi = fov_deg
    step = (hi - lo) / count
    return np.radians(lo + step * (np.arange(count) + 0.5))


@dataclass(frozen=True, eq=False)
class MetricField:
    """S(nu, tau, phi) with the numerator and energy it was built from.

    ``values`` has shape (doppler, delay, angle); ``numerator`` holds
    sum_b y_b^H G_b x_b and ``energy`` sum_b ||G_b x_b||^2 per angle.
    ``block_scope`` is a block index or ``None`` for the integrated metric.
    """

    values: np.ndarray
    grid: HypothesisGrid
    numerator: np.ndarray | None = None
    energy: np.ndarray | None = None
    block_scope: int | None = None

    def gain_estimate(self, index) -> complex:
        """Closed-form ML gain at one grid cell; 0 where the hypothesis carries no energy."""
        k, d, g = index
        e = self.energy[g]
        return complex(np.conj(self.numerator[k, d, g]) / e) if e > 0 else 0j


@dataclass(frozen=True)
class GpdFit:
    shape: float
    scale: float
    clip_threshold: float
    tail_count: int
    sample_count: int

    @property
    def tail_prob(self) -> float:
        return self.tail_count / self.sample_count


@dataclass(frozen=True)
class Detection:
    doppler_hz: float
    delay_s: float
    angle_rad: float
    metric: float
    gain_estimate: complex
    codeword_bin: int
    threshold: float = float("nan")
    index: tuple[int, int, int] = (0, 0, 0)


# -- GLRT ---------------------------------------------------------------------

def spatial_gains(u_matrix: np.ndarray, tx_beam: np.ndarray, angles_rad) -> np.ndarray:
    """g(phi) = U^H a(phi) a(phi)^H f for every angle; shape (G, N_rf)."""
    A = steering_matrix(np.sin(np.asarray(angles_rad, dtype=float)), u_matrix.shape[0])
    return (A @ u_matrix.conj()) * (A.conj() @ tx_beam)[:, None]


def block_correlations(block: BlockObservation, frame: OtfsFrame, grid: HypothesisGrid) -> np.ndarray:
    """c[q, k, d] = y_{b,q}^H Psi(nu_k, tau_d) x_b for every RF chain and grid point."""
    if np.any(np.abs(grid.delay_axis) >= frame.block_s):
        raise DomainError("delay axis exceeds the block duration")
    s = modulate(block.symbols, frame)
    r = modulate(block.per_chain, frame)
    s_del = delay_signal(s, grid.delay_axis, frame)
    ramp = doppler_ramp(grid.doppler_axis, frame)
    prod = r.conj()[:, None, :] * s_del[None, :, :]
    return np.swapaxes(prod @ ramp.T, 1, 2)


def block_terms(block: BlockObservation, tx_beam: np.ndarray, frame: OtfsFrame,
                grid: HypothesisGrid) -> tuple[np.ndarray, np.ndarray]:
    """(numerator y_b^H G_b x_b over the grid, energy ||G_b x_b||^2 per angle) for one block."""
    c = block_correlations(block, frame, grid)
    g = spatial_gains(block.reduction, tx_beam, grid.angle_axis)
    num = np.einsum("gq,qkd->kdg", g, c, optimize=True)
    energy = (np.abs(g) ** 2).sum(axis=1) * np.vdot(block.symbols, block.symbols).real
    # |g_q|^2 <= N_a^2 ||u_q||^2 ||f||^2; anything at round-off level of that bound is a null
    bound = (block.reduction.shape[0] ** 2 * np.vdot(block.reduction, block.reduction).real
             * np.vdot(tx_beam, tx_beam).real * np.vdot(block.symbols, block.symbols).real)
    dead = energy <= 1e-24 * bound
    energy[dead] = 0.0
    num[..., dead] = 0.0
    return num, energy


def metric_from_terms(num: np.ndarray, energy: np.ndarray) -> np.ndarray:
    safe = np.where(energy > 0, energy, 1.0)
    return np.where(energy > 0, np.abs(num) ** 2 / safe, 0.0)


def glrt_field(blocks: Sequence[BlockObservation], tx_beam: np.ndarray, frame: OtfsFrame,
               grid: HypothesisGrid, *, block_scope: int | None = None) -> MetricField:
    """S = |sum_b y_b^H G_b x_b|^2 / sum_b ||G_b x_b||^2 over the whole grid."""
    if not blocks:
        raise ContractViolation("at least one block is required")
    num = np.zeros(grid.shape, dtype=complex)
    energy = np.zeros(grid.shape[2])
    for blk in blocks:
        n_b, e_b = block_terms(blk, tx_beam, frame, grid)
        num += n_b
        energy += e_b
    return MetricField(metric_from_terms(num, energy), grid, num, energy, block_scope)


def _point_grid(grid_point) -> HypothesisGrid:
    nu, tau, phi = grid_point
    return HypothesisGrid(np.array([nu]), np.array([tau]), np.array([phi]))


def estimate_gain(blocks, grid_point, tx_beam, frame: OtfsFrame) -> complex:
    """h_hat = (sum_b y_b^H G_b x_b)^* / sum_b ||G_b x_b||^2 at one (nu, tau, phi)."""
    field = glrt_field(blocks, tx_beam, frame, _point_grid(grid_point))
    return field.gain_estimate((0, 0, 0))


def glrt_metric(blocks, grid_point, tx_beam, frame: OtfsFrame) -> float:
    return float(glrt_field(blocks, tx_beam, frame, _point_grid(grid_point)).values[0, 0, 0])


def weighted_metric(field: MetricField, weights: WeightProfile | np.ndarray) -> MetricField:
    """Scale every (nu, tau) slice at angle phi_g by W_b(phi_g)."""
    w = weights.values if isinstance(weights, WeightProfile) else np.asarray(weights, dtype=float)
    if w.shape != (field.values.shape[2],):
        raise ContractViolation(f"weight profile of length {w.shape} vs angle axis {field.values.shape[2]}")
    return MetricField(field.values * w, field.grid, None, None, field.block_scope)


# -- GEVT hard threshold ------------------------------------------------------

def fit_gpd(samples, clip: float) -> GpdFit:
    """Probability-weighted-moment GPD fit to the excesses of ``samples`` over ``clip``."""
    x = np.asarray(samples, dtype=float).ravel()
    exc = np.sort(x[x > clip] - clip)
    k = exc.size
    if k < 2:
        raise CalibrationError(f"only {k} samples exceed the clip threshold {clip:g}")
    d0 = exc.mean()
    d1 = np.mean(np.arange(k) / (k - 1) * exc)
    shape = 2.0 - d0 / (2.0 * d1 - d0)
    scale = (1.0 - shape) * d0
    return GpdFit(float(shape), float(scale), float(clip), k, x.size)


def tail_threshold(fit: GpdFit, pfa: float) -> float:
    """Level exceeded with probability ``pfa`` under the fitted tail.

    T = eta + beta/alpha * ((N pfa / K)^(-alpha) - 1), with the exponential
    limit eta + beta ln(K / (N pfa)) for |alpha| < 1e-6.
    """
    if not 0 < pfa < fit.tail_prob:
        raise DomainError(f"pfa {pfa:g} must lie in (0, P_eta = {fit.tail_prob:g})")
    ratio = pfa / fit.tail_prob
    if abs(fit.shape) < 1e-6:
        return fit.clip_threshold - fit.scale * math.log(ratio)
    return fit.clip_threshold + fit.scale / fit.shape * (ratio ** (-fit.shape) - 1.0)


def gevt_threshold(samples, clip: float | None = None, pfa: float = 1e-3, *,
                   clip_quantile: float = DEFAULT_CLIP_QUANTILE,
                   min_exceedances: int = MIN_EXCEEDANCES) -> float:
    """Single-block hard threshold T_b from a GPD fit to the metric's upper tail."""
    x = np.asarray(samples, dtype=float).ravel()
    if clip is None:
        clip = float(np.quantile(x, clip_quantile))
    fit = fit_gpd(x, clip) if np.count_nonzero(x > clip) >= 2 else None
    if fit is None or fit.tail_count < min_exceedances:
        n = 0 if fit is None else fit.tail_count
        raise CalibrationError(f"{n} exceedances above {clip:g}; at least {min_exceedances} required")
    return tail_threshold(fit, pfa)


# -- OS-CFAR ------------------------------------------------------------------

def _per_axis(v, ndim=3) -> tuple[int, ...]:
    return tuple(int(x) for x in np.broadcast_to(np.asarray(v), (ndim,)))


def reference_offsets(window, guard) -> np.ndarray:
    """Offsets of the reference cells: inside the window box, outside the guard box."""
    window, guard = _per_axis(window), _per_axis(guard)
    if any(w <= g for w, g in zip(window, guard)) or any(g < 0 for g in guard):
        raise ContractViolation(f"window {window} must exceed guard {guard} on every axis")
    axes = [np.arange(-w, w + 1) for w in window]
    off = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return off[~np.all(np.abs(off) <= np.asarray(guard), axis=1)]


def _order_statistic(values: np.ndarray, cells: np.ndarray, offsets: np.ndarray,
                     rank_fraction: float, chunk: int = 4096) -> np.ndarray:
    shape = np.asarray(values.shape)
    out = np.empty(len(cells))
    for start in range(0, len(cells), chunk):
        c = cells[start:start + chunk]
        idx = c[:, None, :] + offsets[None, :, :]
        valid = np.all((idx >= 0) & (idx < shape), axis=2)
        idx = np.clip(idx, 0, shape - 1)
        ref = values[idx[..., 0], idx[..., 1], idx[..., 2]]
        ref = np.where(valid, ref, np.inf)
        count = valid.sum(axis=1)
        rank = np.clip(np.ceil(rank_fraction * count).astype(int) - 1, 0, None)
        sel = np.empty(len(c))
        # cells away from the edges share one rank, so selection is grouped by rank
        for r in np.unique(rank):
            rows = rank == r
            sel[rows] = np.partition(ref[rows], r, axis=1)[:, r]
        out[start:start + chunk] = sel
    return out


def os_cfar_threshold(field: MetricField | np.ndarray, window=(2, 4, 8), guard=(1, 1, 3),
                      rank_fraction: float = 0.75, scale: float = 1.0, cells=None) -> np.ndarray:
    """Per-cell threshold: ``scale`` times an order statistic of the surrounding reference cells.

    Reference cells outside the grid are dropped, so edge cells rank fewer
    references. With ``cells`` (an (n, 3) index array) only those cells are
    evaluated and a length-n vector is returned; otherwise a full map.
    """
    values = field.values if isinstance(field, MetricField) else np.asarray(field, dtype=float)
    if not 0 < rank_fraction <= 1:
        raise ContractViolation("rank_fraction must lie in (0, 1]")
    offsets = reference_offsets(window, guard)
    if cells is None:
        idx = np.indices(values.shape).reshape(3, -1).T
        return scale * _order_statistic(values, idx, offsets, rank_fraction).reshape(values.shape)
    return scale * _order_statistic(values, np.asarray(cells, dtype=int).reshape(-1, 3), offsets,
                                    rank_fraction)


def os_cfar_pfa_iid(scale: float, n_ref: int, rank: int) -> float:
    """False-alarm probability of OS-CFAR on i.i.d. exponential cells (rank is 1-based)."""
    i = np.arange(rank)
    return float(np.prod((n_ref - i) / (n_ref - i + scale)))


def calibrate_os_cfar_scale(noise_fields, pfa: float, window=(2, 4, 8), guard=(1, 1, 3),
                            rank_fraction: float = 0.75) -> float:
    """Scale at which noise-only cells exceed the OS-CFAR threshold with rate ``pfa``."""
    ratios = []
    for f in noise_fields:
        values = f.values if isinstance(f, MetricField) else np.asarray(f, dtype=float)
        base = os_cfar_threshold(values, window, guard, rank_fraction, 1.0)
        ratios.append((values / np.where(base > 0, base, np.inf)).ravel())
    r = np.concatenate(ratios)
    if r.size * pfa < 10:
        raise CalibrationError(f"{r.size} noise cells are too few to calibrate pfa={pfa:g}")
    return float(np.quantile(r, 1.0 - pfa))


# -- detections ---------------------------------------------------------------

def local_maxima(values: np.ndarray) -> np.ndarray:
    """Boolean mask of cells not exceeded by any of their 26 neighbours."""
    return values >= ndimage.maximum_filter(values, size=3, mode="nearest")


def _detection(field: MetricField, idx, codebook: Codebook, threshold: float) -> Detection:
    nu, tau, phi = field.grid.point(idx)
    gain = field.gain_estimate(idx) if field.numerator is not None else complex("nan")
    return Detection(nu, tau, phi, float(field.values[idx]), gain,
                     int(codebook.sector_of(math.sin(phi))), float(threshold), tuple(int(i) for i in idx))


def extract_detections(field: MetricField, thresholds, codebook: Codebook) -> list[Detection]:
    """One detection per super-threshold 3-D local maximum, strongest first."""
    values = field.values
    thr = np.broadcast_to(np.asarray(thresholds, dtype=float), values.shape)
    mask = (values > thr) & local_maxima(values)
    cells = np.argwhere(mask)
    order = np.argsort(-values[mask], kind="stable")
    return [_detection(field, tuple(cells[i]), codebook, thr[tuple(cells[i])]) for i in order]


def cfar_detections(field: MetricField, codebook: Codebook, *, window=(2, 4, 8), guard=(1, 1, 3),
                    rank_fraction: float = 0.75, scale: float = 1.0) -> list[Detection]:
    """OS-CFAR detections, thresholding only the local maxima.

    Same result as ``extract_detections(field, os_cfar_threshold(field, ...))``
    without building the full threshold map.
    """
    values = field.values
    cells = np.argwhere(local_maxima(values))
    thr = os_cfar_threshold(values, window, guard, rank_fraction, scale, cells=cells)
    hit = values[tuple(cells.T)] > thr
    cells, thr = cells[hit], thr[hit]
    order = np.argsort(-values[tuple(cells.T)], kind="stable")
    return [_detection(field, tuple(cells[i]), codebook, thr[i]) for i in order]


def clean_detections(candidates: Sequence[Detection], field: MetricField, probes: Sequence[BlockObservation],
                     tx_beam: np.ndarray, frame: OtfsFrame, codebook: Codebook) -> list[Detection]:
    """Successive cancellation over a candidate list (CLEAN).

    The strongest candidate is accepted, its reconstructed echo h_hat G_b x_b
    is removed from every block's numerator, and the remaining candidates
    survive only if they are still local maxima above their original
    threshold on the residual metric. This strips the angle ripple and delay
    sidelobes that a strong path leaves behind while keeping separate paths.
    ``probes`` carries each block's reduction matrix and symbols.
    """
    if not candidates:
        return []
    if field.numerator is None or field.energy is None:
        raise ContractViolation("CLEAN needs the numerator and energy of the integrated field")
    grid = field.grid
    num = field.numerator.copy()
    energy = field.energy
    remaining = list(candidates)
    accepted = []
    while remaining:
        det = remaining.pop(0)
        accepted.append(det)
        if not remaining:
            break
        for blk in probes:
            g = spatial_response(blk.reduction, tx_beam, det.angle_rad)
            z = channel_response(blk.symbols, det.doppler_hz, det.delay_s, frame)
            echo = BlockObservation(det.gain_estimate * (g[:, None] * z[None, :]).reshape(-1),
                                    blk.block_index, blk.reduction, blk.symbols)
            num -= block_terms(echo, tx_beam, frame, grid)[0]
        residual = MetricField(metric_from_terms(num, energy), grid, num, energy, field.block_scope)
        peaks = local_maxima(residual.values)
        remaining = [_detection(residual, d.index, codebook, d.threshold) for d in remaining
                     if peaks[d.index] and residual.values[d.index] > d.threshold]
        remaining.sort(key=lambda d: -d.metric)
    return accepted


def write_field_csv(path, field: MetricField, thresholds) -> None:
    """Export one row per grid cell: nu_hz, tau_s, phi_rad, metric, threshold, detected."""
    thr = np.broadcast_to(np.asarray(thresholds, dtype=float), field.values.shape)
    grid = field.grid
    detected = (field.values > thr) & local_maxima(field.values)
    try:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["nu_hz", "tau_s", "phi_rad", "metric", "threshold", "detected"])
            for (k, d, g), v in np.ndenumerate(field.values):
                w.writerow([repr(float(grid.doppler_axis[k])), repr(float(grid.delay_axis[d])),
                            repr(float(grid.angle_axis[g])), repr(float(v)), repr(float(thr[k, d, g])),
                            int(detected[k, d, g])])
    except OSError as exc:
        raise OSError(f"cannot write metric field to {path}: {exc}") from exc
