"""Federated EHR sequence modeling: synthetic cohorts, FedAvg training and
experiment grids. Thin wrapper over the C++ core; heavy lifting happens in
``fedseq._core``."""

import json as _json

from ._core import __version__, average_precision, summarize
from . import _core


def synth_cohort(out_dir, **kwargs):
    """Write a synthetic multi-center cohort (visits/groups/transfers CSVs)."""
    return _json.loads(_core.synth_cohort(str(out_dir), **kwargs))


def run_experiment(config):
    """Run the regime x threshold x seed grid from a config dict."""
    return _json.loads(_core.run_experiment_json(_json.dumps(config)))


def compare_pretraining(config):
    """Run the FL pretraining ablation from a config dict."""
    return _json.loads(_core.compare_pretraining_json(_json.dumps(config)))


def load_run(run_dir):
    """Reload a finished run directory into the report shape."""
    return _json.loads(_core.load_run_json(str(run_dir)))


def checkpoint_info(path):
    """Manifest (hyperparameters, tensor names, checksum) of a checkpoint."""
    return _json.loads(_core.checkpoint_info_json(str(path)))


__all__ = [
    "__version__",
    "average_precision",
    "summarize",
    "synth_cohort",
    "run_experiment",
    "compare_pretraining",
    "load_run",
    "checkpoint_info",
]
