"""Simulation of active beam acquisition for mmWave ISAC with hybrid arrays and OTFS.

Modules: :mod:`array` (geometry, channel, link budget), :mod:`otfs` (waveform
and crosstalk), :mod:`codebook` (flat-top beams and shift operators),
:mod:`detector` (GLRT, thresholds, detections), :mod:`strategy` (block-wise
beam selection) and :mod:`harness` (Monte Carlo sweeps).
"""

from .array import (ArrayConfig, NoiseModel, PathParams, Target, channel_gain_sq, link_snr_db, path_params,
                    steering_vector)
from .codebook import (Codebook, Codeword, ShiftTable, WeightProfile, babel_select, build_codebook,
                       build_shift_table, circ_shift, design_flattop, grid_shift, weight_profile)
from .detector import (Detection, GpdFit, HypothesisGrid, MetricField, clean_detections, estimate_gain,
                       extract_detections, fit_gpd, gevt_threshold, glrt_field, glrt_metric, os_cfar_threshold,
                       weighted_metric)
from .errors import (ActiveSenseError, CalibrationError, ConfigurationError, ContractViolation, DomainError,
                     SynthesisError)
from .harness import PRESETS, ExperimentConfig, PdCurve, build_setup, compute_pd, emit_outputs, run_sweep, run_trials
from .otfs import (BlockObservation, CrosstalkMatrix, OtfsFrame, SymbolFrame, crosstalk_matrix,
                   effective_channel_apply, generate_symbols, isfft, sfft, synthesize_rx_block)
from .strategy import (AcquisitionResult, AcquisitionState, BeamTrack, Scenario, Strategy, cs_update,
                       gs_update, handle_misspent, init_plan, random_baseline_update, run_acquisition)

__version__ = "0.1.0"
