"""Experiment orchestration: configs, instrumented training, sweeps and outputs."""
from .config import ETA_GRID, ExperimentConfig, ProbeConfig, StoppingConfig, load_config, save_config
from .persist import emit_outputs, load_record, load_records, read_trace_csv, save_record
from .runner import (RunRecord, SweepSummary, TaskData, gap_lambda_correlation, prepare_task, run_early_stop_control,
                     run_step_matched, run_sweep, run_training, select_learning_rate, summarize)
