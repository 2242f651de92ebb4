"""Flat-top receive codebooks, beam shift operators and circular-shift selection.

Patterns are ``u^H a(phi)`` as seen through a receive combiner ``U^H``. All
beam geometry (centers, widths, shifts) lives in sin-angle space, where a ULA
pattern is shift-invariant.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .array import ArrayConfig, steering_matrix
from .errors import DomainError, SynthesisError

MAX_RIPPLE_DB = 1.5
MAX_SIDELOBE_DB = -15.0


@dataclass(frozen=True, eq=False)
class Codeword:
    weights: np.ndarray
    center_sin: float
    width_sin: float

    @property
    def n_antennas(self) -> int:
        return self.weights.size

    def pattern(self, sin_values) -> np.ndarray:
        """Complex pattern u^H a(phi) at the given sin-angle points."""
        return steering_matrix(sin_values, self.n_antennas) @ self.weights.conj()


@dataclass(frozen=True, eq=False)
class Codebook:
    codewords: tuple[Codeword, ...]
    fov_rad: tuple[float, float]
    delta_deg: float

    @property
    def q_count(self) -> int:
        return len(self.codewords)

    @property
    def width_sin(self) -> float:
        return self.codewords[0].width_sin

    @property
    def centers_sin(self) -> np.ndarray:
        return np.array([c.center_sin for c in self.codewords])

    @property
    def matrix(self) -> np.ndarray:
        """N_a x Q weight matrix."""
        return np.stack([c.weights for c in self.codewords], axis=1)

    def sector_of(self, sin_value) -> np.ndarray:
        """Index of the sector whose span contains each sin value (nearest center at the edges)."""
        s = np.asarray(sin_value, dtype=float)
        return np.abs(s[..., None] - self.centers_sin).argmin(axis=-1)

    def __getitem__(self, q) -> Codeword:
        return self.codewords[q]


@dataclass(frozen=True)
class WeightProfile:
    values: np.ndarray


@dataclass(frozen=True)
class ShiftTable:
    """Per-codeword circular shifts; entry q is sorted and starts with 0."""

    shifts: tuple[tuple[int, ...], ...]

    def probe_shifts(self, q: int) -> tuple[int, ...]:
        return tuple(k for k in self.shifts[q] if k != 0)


def _circ_dist(s, c):
    d = np.abs((np.asarray(s) - c + 1.0) % 2.0 - 1.0)
    return d


def _check_span(center_sin: float, width_sin: float) -> None:
    lo, hi = center_sin - width_sin / 2, center_sin + width_sin / 2
    if lo < -1 - 1e-12 or hi > 1 + 1e-12:
        raise DomainError(f"beam span [{lo:.4f}, {hi:.4f}] leaves sin-space [-1, 1]")


def pattern_metrics(weights: np.ndarray, center_sin: float, width_sin: float,
                    oversample: int = 10) -> tuple[float, float]:
    """(in-band ripple dB peak-to-peak, worst sidelobe dB relative to the passband median).

    Evaluated on an ``oversample * N_a`` point grid over sin-space. The sidelobe
    region excludes a transition band of 2/N_a beyond each span edge.
    """
    n = weights.size
    s = -1 + 2 * np.arange(oversample * n) / (oversample * n)
    p = np.abs(steering_matrix(s, n) @ weights.conj()) ** 2
    dist = _circ_dist(s, center_sin)
    passband = p[dist <= width_sin / 2 + 1e-12]
    stop = p[dist > width_sin / 2 + 2 / n]
    ripple = 10 * np.log10(passband.max() / passband.min())
    side = 10 * np.log10(stop.max() / np.median(passband)) if stop.size else -np.inf
    return float(ripple), float(side)


def _mls(A, passband, stop, level, iterations, tol):
    """Alternating-phase magnitude least squares; returns v = conj(u), unnormalized."""
    care = passband | stop
    weights = np.where(passband, 1.0, 3.0)[care]
    Aw = A[care] * weights[:, None]
    n = A.shape[1]
    s_phase = np.angle(A[:, 1]) / np.pi
    # linear-phase start: zero-phase response about the array center
    desired = np.where(passband, level, 0.0) * np.exp(1j * np.pi * (n - 1) / 2 * s_phase)
    v = np.linalg.lstsq(Aw, desired[care] * weights, rcond=None)[0]
    prev = np.inf
    for _ in range(iterations):
        p = A @ v
        t = np.where(passband, level * np.exp(1j * np.angle(p)), 0.0)
        v = np.linalg.lstsq(Aw, t[care] * weights, rcond=None)[0]
        err = np.linalg.norm((np.abs(A @ v) - np.where(passband, level, 0.0))[care] * weights)
        if prev - err < tol * max(err, 1e-30):
            break
        prev = err
    return v


def _refine(v0, A, passband, stop, coherence_offsets):
    """Penalty refinement of the MLS solution against the ripple, sidelobe and coherence targets.

    Hinge penalties keep a margin below each contract: +-0.56 dB about the mean
    in-band level, -17.5 dB sidelobes and 0.08 coherence with translated copies.
    """
    n = v0.size
    Ap, As = A[passband], A[stop]
    n_pb, n_st = Ap.shape[0], As.shape[0]
    offs = np.asarray(coherence_offsets, dtype=float)
    E = np.exp(1j * np.pi * np.outer(offs, np.arange(n))) if offs.size else np.zeros((0, n))
    side_t = 10 ** (-1.75)

    def fun(x):
        v = x[:n] + 1j * x[n:]
        pp, ps = Ap @ v, As @ v
        Pp, Ps = np.abs(pp) ** 2, np.abs(ps) ** 2
        lp = np.log(Pp)
        m = lp.mean()
        d = lp - m
        hinge = np.maximum(np.abs(d) - 0.13, 0.0)
        J = np.mean(d**2) + 100 * np.mean(hinge**2)
        e = (2 * d + 200 * hinge * np.sign(d)) / n_pb
        dlp = e - e.mean()

        sl = Ps / np.exp(m)
        rs = np.maximum(sl - side_t, 0.0)
        J += 1e4 * np.mean(rs**2)
        r = 2e4 * rs / n_st
        dPs = r / np.exp(m)
        dlp = dlp - (r * sl).sum() / n_pb
        grad = Ap.conj().T @ (dlp / Pp * pp) + As.conj().T @ (dPs * ps)

        if E.shape[0]:
            pw = np.abs(v) ** 2
            nv = pw.sum()
            z = E @ pw
            az = np.abs(z)
            coh = az / nv
            rc = np.maximum(coh - 0.08, 0.0)
            J += 100 * np.sum(rc**2)
            h = 200 * rc
            safe = np.where(az > 0, az, 1.0)
            dpw = (h[:, None] * ((np.conj(z)[:, None] * E).real / (safe[:, None] * nv)
                                 - (az / nv**2)[:, None])).sum(axis=0)
            grad = grad + dpw * v
        return J, np.concatenate([2 * grad.real, 2 * grad.imag])

    x0 = np.concatenate([v0.real, v0.imag])
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", options={"maxiter": 5000, "ftol": 1e-14, "gtol": 1e-10})
    return res.x[:n] + 1j * res.x[n:]


def design_flattop(array: ArrayConfig | int, center_sin: float, width_sin: float, *,
                   iterations: int = 200, tol: float = 1e-6, coherence_offsets=()) -> Codeword:
    """Unit-norm flat-top beam covering ``[center - width/2, center + width/2]`` in sin-space.

    Iterative magnitude least squares gives the starting point; a penalty
    refinement then enforces the ripple and sidelobe targets and, when
    ``coherence_offsets`` is given, near-orthogonality to copies of the beam
    translated by those sin-space offsets. Beams narrower than 3/N_a
    degenerate to a steered (Fourier) beam.
    """
    n = array if isinstance(array, int) else array.n_antennas
    _check_span(center_sin, width_sin)
    min_width = 2.0 / n
    if width_sin < min_width * (1 - 1e-9):
        raise SynthesisError(f"width {width_sin:.4g} below aperture resolution {min_width:.4g}")
    if width_sin < 1.5 * min_width:
        w = np.exp(1j * np.pi * np.arange(n) * center_sin) / math.sqrt(n)
        return Codeword(w, float(center_sin), float(width_sin))
    if center_sin < 0:
        # mirror image of the design at -center: conj(u) flips the pattern in sin-space
        cw = design_flattop(n, -center_sin, width_sin, iterations=iterations, tol=tol,
                            coherence_offsets=coherence_offsets)
        return Codeword(cw.weights.conj(), float(center_sin), float(width_sin))
    u = _design_weights(n, float(center_sin), float(width_sin), iterations, tol,
                        tuple(float(o) for o in coherence_offsets))
    return Codeword(u.copy(), float(center_sin), float(width_sin))


@functools.lru_cache(maxsize=64)
def _design_weights(n, center_sin, width_sin, iterations, tol, coherence_offsets):
    s = -1 + 2 * np.arange(16 * n) / (16 * n)
    # the span edges themselves are constrained, not just the nearest grid points
    edge, stop_edge = width_sin / 2, width_sin / 2 + 2.0 / n
    s = np.concatenate([s, center_sin + np.array([-edge, edge, -stop_edge, stop_edge])])
    s = (s + 1) % 2 - 1
    A = steering_matrix(s, n)
    dist = _circ_dist(s, center_sin)
    passband = dist <= width_sin / 2 + 1e-12
    stop = dist >= stop_edge - 1e-12
    v = _mls(A, passband, stop, math.sqrt(2.0 / width_sin), iterations, tol)
    v = _refine(v / np.linalg.norm(v), A, passband, stop, coherence_offsets)
    u = v.conj() / np.linalg.norm(v)
    ripple, side = pattern_metrics(u, center_sin, width_sin)
    if ripple > MAX_RIPPLE_DB or side > MAX_SIDELOBE_DB:
        raise SynthesisError(
            f"flat-top synthesis missed its targets: ripple {ripple:.2f} dB, sidelobes {side:.1f} dB"
        )
    u.flags.writeable = False
    return u


def build_codebook(array: ArrayConfig | int, fov_deg: tuple[float, float] = (-48.0, 48.0),
                   q_count: int = 8) -> Codebook:
    """Q flat-top beams of equal sin-space width tiling sin(FoV)."""
    if q_count <= 1:
        raise DomainError("q_count must exceed 1")
    lo, hi = (math.radians(a) for a in fov_deg)
    s_lo, s_hi = math.sin(lo), math.sin(hi)
    width = (s_hi - s_lo) / q_count
    centers = s_lo + (np.arange(q_count) + 0.5) * width
    # one prototype translated across the FoV; translates of a beam are
    # decorrelated through the offsets handed to the synthesis
    offsets = width * np.arange(1, q_count)
    proto = design_flattop(array, float(centers[0]), width, coherence_offsets=offsets)
    words = tuple(grid_shift(proto, float(c - centers[0])) for c in centers)
    steered = width < 1.5 * 2.0 / proto.n_antennas
    for q, cw in enumerate(words):
        if steered:
            # a single Fourier beam has no flat top to hold to the ripple contract
            break
        ripple, side = pattern_metrics(cw.weights, cw.center_sin, cw.width_sin)
        if ripple > MAX_RIPPLE_DB or side > MAX_SIDELOBE_DB:
            raise SynthesisError(f"codeword {q}: ripple {ripple:.2f} dB, sidelobes {side:.1f} dB")
    return Codebook(words, (lo, hi), (fov_deg[1] - fov_deg[0]) / q_count)


def tx_beam(array: ArrayConfig | int, fov_deg: tuple[float, float] = (-48.0, 48.0)) -> np.ndarray:
    """Wide flat-top transmit beamformer f covering the whole FoV, unit norm."""
    s_lo, s_hi = (math.sin(math.radians(a)) for a in fov_deg)
    return design_flattop(array, (s_lo + s_hi) / 2, s_hi - s_lo).weights


def grid_shift(u: Codeword, delta_sin: float) -> Codeword:
    """Translate the beam pattern by ``delta_sin`` in sin-space via a linear phase ramp."""
    _check_span(u.center_sin + delta_sin, u.width_sin)
    ramp = np.exp(1j * np.pi * np.arange(u.n_antennas) * delta_sin)
    return replace(u, weights=u.weights * ramp, center_sin=u.center_sin + delta_sin)


def circ_shift(u: Codeword, k: int) -> Codeword:
    """Cyclically rotate the weights by ``k`` positions (element i takes u[i - k])."""
    return replace(u, weights=np.roll(u.weights, int(k) % u.n_antennas))


def beamspace_grid(n_antennas: int) -> np.ndarray:
    """The N_a sin-angle points 2m/N_a - 1, where circular shifts leave |pattern| unchanged."""
    return -1 + 2 * np.arange(n_antennas) / n_antennas


def coherence_profile(u: Codeword | np.ndarray) -> np.ndarray:
    """c[k] = |u^H Gamma(u, k)| for k = 0..N_a-1."""
    w = u.weights if isinstance(u, Codeword) else np.asarray(u)
    # circular cross-correlation through the FFT
    W = np.fft.fft(w)
    return np.abs(np.fft.ifft(np.abs(W) ** 2))


def coherence_map(u: Codeword | np.ndarray) -> np.ndarray:
    """|Gamma(u, i)^H Gamma(u, j)| for all shift pairs."""
    c = coherence_profile(u)
    n = c.size
    idx = np.arange(n)
    return c[(idx[None, :] - idx[:, None]) % n]


def babel_select(u: Codeword | np.ndarray, l_max: int) -> list[int]:
    """Size-``l_max`` shift set with the least summed pairwise coherence.

    The objective depends only on pairwise shift differences, so every optimum
    has a translate containing shift 0 and only those sets are enumerated.
    Ties go to the lexicographically smallest set.
    """
    c = coherence_profile(u)
    n = c.size
    if not 2 <= l_max <= n:
        raise DomainError(f"l_max must lie in [2, {n}], got {l_max}")
    rest = np.array(list(itertools.combinations(range(1, n), l_max - 1)), dtype=np.int64)
    sets = np.concatenate([np.zeros((rest.shape[0], 1), dtype=np.int64), rest], axis=1)
    diffs = (sets[:, None, :] - sets[:, :, None]) % n
    obj = c[diffs].sum(axis=(1, 2)) - l_max * c[0]
    best = obj.min()
    pick = int(np.flatnonzero(obj <= best + 1e-9 * max(best, 1.0))[0])
    return [int(k) for k in sets[pick]]


def build_shift_table(codebook: Codebook, l_max: int) -> ShiftTable:
    """Look-up table of the reference shift 0 plus ``l_max`` probe shifts per codeword."""
    return ShiftTable(tuple(tuple(babel_select(u, l_max + 1)) for u in codebook.codewords))


def weight_profile(u_matrix, angular_grid) -> WeightProfile:
    """Max over RF chains of |u_q^H a(phi_g)|^2, normalized to a maximum of 1."""
    if isinstance(u_matrix, np.ndarray):
        W = np.atleast_2d(u_matrix)
    else:
        W = np.stack([c.weights if isinstance(c, Codeword) else np.asarray(c) for c in u_matrix], axis=1)
    grid = np.asarray(angular_grid, dtype=float)
    if grid.size == 0:
        raise DomainError("angular grid is empty")
    p = np.abs(steering_matrix(np.sin(grid), W.shape[0]) @ W.conj()) ** 2
    prof = p.max(axis=1)
    top = prof.max()
    return WeightProfile(prof / top if top > 0 else prof)


# -- text serialization -------------------------------------------------------

_HEADER = "# activesense codebook v1"


def save_codebook(path, codebook: Codebook, shift_table: ShiftTable | None = None) -> None:
    """Write one codeword per line: ``center width re0 im0 re1 im1 ...``.

    Optional ``shifts q k0 k1 ...`` lines follow for a shift table.
    """
    lines = [_HEADER,
             f"n_antennas {codebook.codewords[0].n_antennas}",
             f"fov_rad {float(codebook.fov_rad[0])!r} {float(codebook.fov_rad[1])!r}",
             f"delta_deg {float(codebook.delta_deg)!r}"]
    for cw in codebook.codewords:
        pairs = " ".join(f"{float(z.real)!r} {float(z.imag)!r}" for z in cw.weights)
        lines.append(f"codeword {float(cw.center_sin)!r} {float(cw.width_sin)!r} {pairs}")
    if shift_table is not None:
        for q, ks in enumerate(shift_table.shifts):
            lines.append(f"shifts {q} " + " ".join(str(k) for k in ks))
    Path(path).write_text("\n".join(lines) + "\n")


def load_codebook(path) -> tuple[Codebook, ShiftTable | None]:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != _HEADER:
        raise ValueError(f"{path}: not an activesense codebook file")
    words, shifts, fov, delta = [], {}, None, None
    for line in text[1:]:
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        if key == "fov_rad":
            fov = (float(parts[1]), float(parts[2]))
        elif key == "delta_deg":
            delta = float(parts[1])
        elif key == "codeword":
            vals = np.array([float(v) for v in parts[3:]])
            words.append(Codeword(vals[0::2] + 1j * vals[1::2], float(parts[1]), float(parts[2])))
        elif key == "shifts":
            shifts[int(parts[1])] = tuple(int(k) for k in parts[2:])
    book = Codebook(tuple(words), fov, delta)
    table = ShiftTable(tuple(shifts[q] for q in range(len(words)))) if shifts else None
    return book, table
