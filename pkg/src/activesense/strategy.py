"""Block-by-block selection of reduction matrices and the end-to-end acquisition loop.

Every block the receiver combines the array through N_rf codewords. Chains
not claimed by a track explore sectors that have not been tested yet. A
block-level detection in an exploring beam opens a track on that sector; the
track then probes L_max variants of the detected beam in the following
blocks, either grid-shifted (GS) or circularly shifted (CS). All blocks are
integrated at the end and the final detections come from OS-CFAR on the
integrated metric.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .array import SPEED_OF_LIGHT, ArrayConfig, NoiseModel, PathParams, Target, path_params
from .codebook import Codebook, Codeword, ShiftTable, circ_shift, grid_shift, weight_profile
from .detector import (Detection, HypothesisGrid, MetricField, block_terms, cfar_detections,
                       clean_detections, extract_detections, gevt_threshold, metric_from_terms, weighted_metric)
from .errors import CalibrationError, ConfigurationError, DomainError
from .otfs import BlockObservation, OtfsFrame, generate_symbols, synthesize_rx_block


class Strategy(str, enum.Enum):
    GS = "gs"
    CS = "cs"
    RANDOM = "random"


class Hypothesis(str, enum.Enum):
    POSITIVE = "H_p"
    NEGATIVE = "H_n"


HP, HN = Hypothesis.POSITIVE, Hypothesis.NEGATIVE


@dataclass
class BeamTrack:
    """Probing state of one detected sector.

    ``shift_state`` is the last grid shift delta_l in sin units (GS) or the
    last circular shift k (CS). ``beam`` is the variant probed in the block
    being planned.
    """

    base_codeword: int
    level: int = 0
    shift_state: float = 0.0
    last_hypothesis: Hypothesis | None = None
    active: bool = True
    metric: float = 0.0
    hypotheses: list[Hypothesis] = field(default_factory=list)
    beam: Codeword | None = None

    @property
    def confirmed(self) -> bool:
        return HP in self.hypotheses


@dataclass(frozen=True, eq=False)
class ReductionMatrix:
    """The N_rf codewords combining the array in one block, with their provenance."""

    beams: tuple[Codeword, ...]
    sources: tuple[str, ...]
    sectors: tuple[int, ...]

    @property
    def matrix(self) -> np.ndarray:
        return np.stack([b.weights for b in self.beams], axis=1)

    @property
    def explored(self) -> tuple[int, ...]:
        return tuple(q for q, s in zip(self.sectors, self.sources) if s == "explore")


@dataclass
class BlockRecord:
    block_index: int
    plan: ReductionMatrix
    threshold: float
    detections: list[Detection]
    track_states: str


@dataclass
class AcquisitionState:
    n_rf: int
    l_max: int
    block_index: int = 0
    tracks: list[BeamTrack] = field(default_factory=list)
    covered_sectors: set[int] = field(default_factory=set)
    requeued: set[int] = field(default_factory=set)
    history: list[BlockRecord] = field(default_factory=list)
    plan: ReductionMatrix | None = None

    @property
    def active_tracks(self) -> list[BeamTrack]:
        return [t for t in self.tracks if t.active]

    def coverage_complete(self, q_count: int) -> bool:
        return len(self.covered_sectors) == q_count and not self.requeued


@dataclass
class AcquisitionResult:
    detections: list[Detection]
    blocks_used: int
    acquisition_time_s: float
    estimates: list[tuple[float, float, float, complex]]
    complete: bool
    history: list[BlockRecord]
    checkpoints: dict[int, list[Detection]] = field(default_factory=dict)
    final_field: MetricField | None = None


# -- exploration --------------------------------------------------------------

def _explore(state: AcquisitionState, codebook: Codebook, count: int, rng: np.random.Generator,
             busy=()) -> list[int]:
    """``count`` distinct sectors: untested (or requeued) ones first, then any other."""
    if count <= 0:
        return []
    pool = sorted((set(range(codebook.q_count)) - state.covered_sectors) | state.requeued)
    first = [int(q) for q in rng.permutation(pool)[:count]] if pool else []
    if len(first) == count:
        return first
    rest = sorted(set(range(codebook.q_count)) - set(first) - set(busy))
    if len(rest) < count - len(first):
        rest = sorted(set(range(codebook.q_count)) - set(first))
    return first + [int(q) for q in rng.choice(rest, count - len(first), replace=False)]


def _mark_explored(state: AcquisitionState, sectors) -> None:
    state.covered_sectors.update(sectors)
    state.requeued.difference_update(sectors)


def _plan(codebook: Codebook, tracks: Sequence[BeamTrack], explore: Sequence[int], label: str) -> ReductionMatrix:
    beams = [t.beam for t in tracks] + [codebook[q] for q in explore]
    sources = [f"{label}:{t.level}" for t in tracks] + ["explore"] * len(explore)
    sectors = [t.base_codeword for t in tracks] + list(explore)
    return ReductionMatrix(tuple(beams), tuple(sources), tuple(sectors))


def init_plan(codebook: Codebook, n_rf: int, rng: np.random.Generator,
              l_max: int = 3) -> tuple[ReductionMatrix, AcquisitionState]:
    """U_1: N_rf distinct codewords drawn uniformly; their sectors count as covered."""
    if not 1 <= n_rf <= codebook.q_count:
        raise ConfigurationError(f"n_rf={n_rf} must lie in [1, Q={codebook.q_count}]")
    state = AcquisitionState(n_rf=n_rf, l_max=l_max)
    picks = _explore(state, codebook, n_rf, rng)
    _mark_explored(state, picks)
    state.plan = _plan(codebook, [], picks, "explore")
    return state.plan, state


# -- track bookkeeping --------------------------------------------------------

def gs_next_shift(prev_delta: float, level: int, hypothesis: Hypothesis | None, delta: float) -> float:
    """delta_l for level ``level`` given the hypothesis observed on the level l-1 beam."""
    if level == 1:
        return delta / 2
    if level == 2:
        gamma = 0.5 if hypothesis is HP else -2.0
    else:
        gamma = 0.5 if hypothesis is HP else -0.5
    return gamma * prev_delta


def gs_shift_sequence(delta: float, hypotheses: Sequence[Hypothesis]) -> list[float]:
    """Shifts delta_1, delta_2, ... produced by a string of block hypotheses."""
    shifts = [gs_next_shift(0.0, 1, None, delta)]
    for level, h in enumerate(hypotheses, start=2):
        shifts.append(gs_next_shift(shifts[-1], level, h, delta))
    return shifts


def _in_span(det: Detection, beam: Codeword) -> bool:
    return abs(math.sin(det.angle_rad) - beam.center_sin) <= beam.width_sin / 2


def handle_misspent(track: BeamTrack, block_detections: Sequence[Detection]) -> BeamTrack:
    """Record the hypothesis of the block just probed and retire a track whose first two probes fail.

    Returns the same (mutated) track for convenience.
    """
    if not track.active or track.beam is None:
        return track
    hit = [d for d in block_detections if _in_span(d, track.beam)]
    h = HP if hit else HN
    track.hypotheses.append(h)
    track.last_hypothesis = h
    if hit:
        track.metric = max(d.metric for d in hit)
    if track.hypotheses[:2] == [HN, HN]:
        track.active = False
    return track


def _retire_finished(state: AcquisitionState) -> None:
    for t in state.active_tracks:
        if t.level >= state.l_max:
            t.active = False


def _advance_gs(track: BeamTrack, codebook: Codebook) -> None:
    level = track.level + 1
    step = gs_next_shift(track.shift_state, level, track.last_hypothesis, codebook.width_sin)
    prev = track.beam if track.beam is not None else codebook[track.base_codeword]
    # keep the probe inside visible space; only reachable for FoVs close to +-90 degrees
    half = prev.width_sin / 2
    target = min(max(prev.center_sin + step, -1 + half), 1 - half)
    track.beam = grid_shift(prev, target - prev.center_sin)
    track.shift_state = step
    track.level = level


def _advance_cs(track: BeamTrack, codebook: Codebook, table: ShiftTable) -> None:
    level = track.level + 1
    k = table.probe_shifts(track.base_codeword)[level - 1]
    track.beam = circ_shift(codebook[track.base_codeword], k)
    track.shift_state = k
    track.level = level


def _adaptive_update(state: AcquisitionState, block_detections, codebook: Codebook,
                     rng: np.random.Generator, advance, label: str) -> ReductionMatrix:
    probed = [t for t in state.active_tracks if t.beam is not None]
    for t in probed:
        before = t.active
        handle_misspent(t, block_detections)
        if before and not t.active and not t.confirmed:
            state.requeued.add(t.base_codeword)
    _retire_finished(state)

    explored = set(state.plan.explored) if state.plan is not None else set()
    busy = {t.base_codeword for t in state.active_tracks}
    fresh: dict[int, float] = {}
    for d in block_detections:
        if d.codeword_bin in explored and d.codeword_bin not in busy:
            fresh[d.codeword_bin] = max(fresh.get(d.codeword_bin, 0.0), d.metric)
    # ongoing tracks keep their chains; new ones are admitted strongest first
    room = state.n_rf - len(state.active_tracks)
    for q, m in sorted(fresh.items(), key=lambda kv: -kv[1])[:max(room, 0)]:
        state.tracks.append(BeamTrack(q, metric=m))
        state.requeued.discard(q)

    active = state.active_tracks
    for t in active:
        advance(t)
    picks = _explore(state, codebook, state.n_rf - len(active), rng,
                     busy={t.base_codeword for t in active})
    _mark_explored(state, picks)
    state.plan = _plan(codebook, active, picks, label)
    state.block_index += 1
    return state.plan


def gs_update(state: AcquisitionState, block_detections, codebook: Codebook,
              rng: np.random.Generator) -> ReductionMatrix:
    """Next plan under grid shifting: each track's beam moves by delta_l per the hypothesis recursion."""
    return _adaptive_update(state, block_detections, codebook, rng,
                            lambda t: _advance_gs(t, codebook), "gs")


def cs_update(state: AcquisitionState, block_detections, codebook: Codebook, shift_table: ShiftTable,
              rng: np.random.Generator) -> ReductionMatrix:
    """Next plan under circulant shifting: each track probes its next table shift."""
    if len(shift_table.shifts) != codebook.q_count:
        raise ConfigurationError("shift table does not cover every codeword")
    short = [q for q in range(codebook.q_count) if len(shift_table.probe_shifts(q)) < state.l_max]
    if short:
        raise ConfigurationError(f"shift table holds fewer than L_max={state.l_max} shifts for codewords {short}")
    return _adaptive_update(state, block_detections, codebook, rng,
                            lambda t: _advance_cs(t, codebook, shift_table), "cs")


def random_baseline_update(state: AcquisitionState, codebook: Codebook,
                           rng: np.random.Generator) -> ReductionMatrix:
    """Next plan without adaptation: untested sectors first, then uniform over the codebook."""
    picks = _explore(state, codebook, state.n_rf, rng)
    _mark_explored(state, picks)
    state.plan = _plan(codebook, [], picks, "explore")
    state.block_index += 1
    return state.plan


# -- acquisition run ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AcquisitionSetup:
    """Precomputed, trial-independent pieces of an acquisition run."""

    frame: OtfsFrame
    array: ArrayConfig
    codebook: Codebook
    tx_beam: np.ndarray
    shift_table: ShiftTable | None
    angle_axis: np.ndarray
    doppler_bins: tuple[int, ...] = (-1, 0, 1)
    delay_bins: int = 32
    n_rf: int = 4
    l_max: int = 3
    pfa_block: float = 1e-3
    blocks: int | None = None
    b_max: int = 12
    checkpoints: tuple[int, ...] = ()
    tx_power_w: float = 10 ** (-0.6)
    noise: NoiseModel | float | None = NoiseModel()
    cfar_window: tuple[int, int, int] = (2, 4, 8)
    cfar_guard: tuple[int, int, int] = (1, 1, 3)
    cfar_rank: float = 0.75
    cfar_scale: float = 1.0

    def __post_init__(self):
        if not 1 <= self.n_rf <= self.codebook.q_count:
            raise ConfigurationError(f"n_rf={self.n_rf} must lie in [1, Q={self.codebook.q_count}]")
        if self.blocks is not None and self.blocks < 1:
            raise ConfigurationError("blocks must be positive")
        if self.l_max < 1:
            raise ConfigurationError("l_max must be positive")

    def grid(self, gate_start_bin: int) -> HypothesisGrid:
        return HypothesisGrid.from_bins(self.frame, self.doppler_bins,
                                        gate_start_bin + np.arange(self.delay_bins), self.angle_axis)


@dataclass(frozen=True)
class Scenario:
    """Targets of one trial and the seed material for its random streams."""

    targets: tuple[Target, ...]
    seed: int = 0
    trial: int = 0
    gate_start_bin: int | None = None

    def streams(self) -> dict[str, np.random.Generator]:
        """Independent generators for the plan, channel phases, symbols, noise and target placement.

        Child i of SeedSequence([seed, trial]); keeping the plan stream apart
        makes exploration identical across strategies until a track opens.
        """
        children = np.random.SeedSequence([self.seed, self.trial]).spawn(5)
        return dict(zip(("plan", "phase", "symbols", "noise", "placement"), map(np.random.default_rng, children)))


def range_gate_start(frame: OtfsFrame, targets: Sequence[Target], delay_bins: int) -> int:
    """First delay bin of a gate of ``delay_bins`` bins centred on the targets' mean range."""
    if not targets:
        return 0
    centre = np.mean([2 * t.range_m / SPEED_OF_LIGHT for t in targets]) / frame.delay_resolution_s
    return max(int(round(centre)) - delay_bins // 2, 0)


def _track_summary(state: AcquisitionState) -> str:
    return ";".join(f"{t.base_codeword}:{t.level}:{t.shift_state:.6g}:"
                    f"{t.last_hypothesis.value if t.last_hypothesis else '-'}:{int(t.active)}"
                    for t in state.tracks)


def block_detections(field: MetricField, plan: ReductionMatrix, setup: AcquisitionSetup
                     ) -> tuple[float, list[Detection]]:
    """Weighted per-block metric, its GEVT threshold and the super-threshold peaks."""
    weights = weight_profile(plan.matrix, setup.angle_axis)
    weighted = weighted_metric(field, weights)
    try:
        thr = gevt_threshold(weighted.values, pfa=setup.pfa_block)
    except (CalibrationError, DomainError):
        # a degenerate field (e.g. noiseless) has no usable tail; nothing is declared
        thr = math.inf
    return thr, extract_detections(weighted, thr, setup.codebook)


def _final_detections(num, energy, grid: HypothesisGrid, setup: AcquisitionSetup,
                      probes: Sequence[BlockObservation]) -> list[Detection]:
    """OS-CFAR candidates on the integrated metric, thinned by successive cancellation."""
    field = MetricField(metric_from_terms(num, energy), grid, num.copy(), energy.copy())
    candidates = cfar_detections(field, setup.codebook, window=setup.cfar_window, guard=setup.cfar_guard,
                                 rank_fraction=setup.cfar_rank, scale=setup.cfar_scale)
    return clean_detections(candidates, field, probes, setup.tx_beam, setup.frame, setup.codebook)


def _unscaled(det: Detection, amp: float) -> Detection:
    # the metric sees sqrt(P) h'; report h' itself
    return replace(det, gain_estimate=det.gain_estimate / amp)


def run_acquisition(scenario: Scenario, strategy: Strategy | str, setup: AcquisitionSetup) -> AcquisitionResult:
    """Simulate one CPI: plan, observe, test and adapt block by block, then detect on the integral.

    With ``setup.blocks`` set exactly that many blocks are used. Otherwise the
    run stops after the first block at which every sector has been explored
    and no track remains active, or at ``setup.b_max``; reaching the cap with
    sectors unexplored flags the result incomplete.
    """
    strategy = Strategy(strategy)
    if strategy is Strategy.CS and setup.shift_table is None:
        raise ConfigurationError("the CS strategy needs a shift table")
    rngs = scenario.streams()
    paths: list[PathParams] = [path_params(t, setup.array, rngs["phase"]) for t in scenario.targets]
    gate = scenario.gate_start_bin
    if gate is None:
        gate = range_gate_start(setup.frame, scenario.targets, setup.delay_bins)
    grid = setup.grid(gate)
    q_count = setup.codebook.q_count

    plan, state = init_plan(setup.codebook, setup.n_rf, rngs["plan"], setup.l_max)
    num = np.zeros(grid.shape, dtype=complex)
    energy = np.zeros(grid.shape[2])
    checkpoints: dict[int, list[Detection]] = {}
    probes: list[BlockObservation] = []
    b = 0
    while True:
        x = generate_symbols(setup.frame, rngs["symbols"])
        obs = synthesize_rx_block(paths, plan.matrix, setup.tx_beam, x, setup.frame, setup.noise,
                                  rngs["noise"], block_index=b, tx_power_w=setup.tx_power_w)
        probes.append(obs)
        n_b, e_b = block_terms(obs, setup.tx_beam, setup.frame, grid)
        num += n_b
        energy += e_b
        b += 1
        thr, dets = block_detections(MetricField(metric_from_terms(n_b, e_b), grid, block_scope=b - 1),
                                     plan, setup)
        if b in setup.checkpoints:
            checkpoints[b] = _final_detections(num, energy, grid, setup, probes)
        explored_all = state.coverage_complete(q_count)
        if strategy is Strategy.RANDOM:
            next_plan = random_baseline_update(state, setup.codebook, rngs["plan"])
        elif strategy is Strategy.GS:
            next_plan = gs_update(state, dets, setup.codebook, rngs["plan"])
        else:
            next_plan = cs_update(state, dets, setup.codebook, setup.shift_table, rngs["plan"])
        state.history.append(BlockRecord(b - 1, plan, thr, dets, _track_summary(state)))
        if setup.blocks is not None:
            if b >= setup.blocks:
                break
        elif b >= setup.b_max or (explored_all and not state.active_tracks):
            break
        plan = next_plan

    amp = math.sqrt(setup.tx_power_w)
    final = checkpoints[b] if b in checkpoints else _final_detections(num, energy, grid, setup, probes)
    final = [_unscaled(d, amp) for d in final]
    checkpoints = {k: [_unscaled(d, amp) for d in v] for k, v in checkpoints.items()}
    estimates = [(d.doppler_hz, d.delay_s, d.angle_rad, d.gain_estimate) for d in final]
    integrated = MetricField(metric_from_terms(num, energy), grid, num, energy)
    return AcquisitionResult(final, b, b * setup.frame.n_doppler / setup.frame.subcarrier_hz, estimates,
                             explored_all, state.history, checkpoints,
                             integrated)


def write_event_log(path, result: AcquisitionResult) -> None:
    """One CSV row per block: index, codewords with provenance, track states, block detections."""
    try:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block", "codewords", "sources", "tracks_after", "threshold", "detections"])
            for rec in result.history:
                dets = ";".join(f"{d.codeword_bin}@{math.degrees(d.angle_rad):.2f}" for d in rec.detections)
                w.writerow([rec.block_index, ";".join(map(str, rec.plan.sectors)), ";".join(rec.plan.sources),
                            rec.track_states, repr(float(rec.threshold)), dets])
    except OSError as exc:
        raise OSError(f"cannot write event log to {path}: {exc}") from exc
