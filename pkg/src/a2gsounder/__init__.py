"""Passive LTE air-to-ground channel sounding: waveform synthesis, flight
channel simulation, cell search, CIR extraction, SAGE estimation, channel
statistics and an empirical stochastic channel model."""
from .iq import IqTrace, read_iq, write_iq
from .waveform import CellConfig, Numerology, generate, make_crs, make_pss, make_sss, modulate_frame
from .airchan import (FlightTrajectory, Mpc, Scatterer, ScattererSet, apply_channel,
                      horizontal_flight, load_scenario, mpc_tracks, resample, vertical_flight)
from .sync import NoCellFound, SyncResult, cell_search, compute_pci, detect_pss, detect_sss
from .cirex import CirStream, extract_cir, pdp
from .sage import SageConfig, SnapshotEstimate, sage_run, sage_snapshot
from .stats import (channel_power, correlation, fit_distribution, fit_path_loss, k_factor,
                    rms_delay_spread, rms_doppler_spread, smooth_power)
from .a2gmodel import ModelParams, draw_statistics, model_roundtrip, synthesize_mpcs
from .pipeline import RunConfig, emit_plots, run_pipeline

__version__ = "0.1.0"
