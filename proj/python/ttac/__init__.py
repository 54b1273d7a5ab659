"""Streaming test-time adaptation with anchored clustering."""

import json as _json

from ._ttac import (
    ContractError,
    DecompositionError,
    Model,
    SourceBank,
    StreamReport,
    batch_moments,
    estimate_source_stats,
    gaussian_kl,
    infer_source_bank,
    train_source,
)
from . import _ttac

__all__ = [
    "ContractError",
    "DecompositionError",
    "Model",
    "SourceBank",
    "StreamReport",
    "adapt",
    "baseline",
    "batch_moments",
    "default_config",
    "estimate_source_stats",
    "gaussian_kl",
    "generate_domain",
    "infer_source_bank",
    "run_grid",
    "train_source",
]


def default_config():
    return _json.loads(_ttac.default_config())


def adapt(model, inputs, labels=None, source=None, config=None):
    """Runs TTAC++; `config` is a dict of protocol keys (missing keys keep defaults)."""
    return _ttac.run("TTAC++", _json.dumps(config or {}), model, inputs, list(labels or []), source)


def baseline(kind, model, inputs, labels=None, config=None):
    return _ttac.run(kind, _json.dumps(config or {}), model, inputs, list(labels or []), None)


def generate_domain(spec=None):
    return _ttac.generate_domain(_json.dumps(spec or {}))


def run_grid(grid, out_dir):
    return _ttac.run_grid(_json.dumps(grid), str(out_dir))
