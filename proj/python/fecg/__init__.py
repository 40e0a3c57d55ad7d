"""Fetal ECG simulation, mutual-information electrode selection and JADE extraction."""

import json as _json
import os as _os

from . import _fecg
from ._fecg import (
    FecgError,
    amari_index,
    detect_r_peaks,
    mi_binned,
    mi_knn,
    remove_baseline,
    select_fetal,
    select_rule1,
    select_rule2,
    separate,
)

__version__ = _fecg.__version__


def _text(config):
    if config is None:
        return _fecg.default_config()
    if isinstance(config, (str, bytes, _os.PathLike)) and _os.path.exists(config):
        with open(config) as f:
            return f.read()
    if isinstance(config, dict):
        return _json.dumps(config)
    return config


def _base(config, base_dir):
    if base_dir is not None:
        return str(base_dir)
    if isinstance(config, (str, _os.PathLike)) and _os.path.exists(config):
        return _os.path.dirname(_os.path.abspath(config))
    return "."


def default_config():
    """Built-in configuration as a dict."""
    return _json.loads(_fecg.default_config())


def config_hash(config=None, base_dir=None):
    return _fecg.config_hash(_text(config), _base(config, base_dir))


def simulate(config=None, base_dir=None):
    """Config may be a dict, JSON text, a file path, or None for the defaults."""
    return _fecg.simulate(_text(config), _base(config, base_dir))


def run_pipeline(config=None, out_dir="fecg_out", stages=(), base_dir=None):
    """Runs the requested stages (all when empty) and returns the manifest as a dict."""
    path = _fecg.run_pipeline(_text(config), str(out_dir), list(stages), _base(config, base_dir))
    with open(path) as f:
        return _json.load(f)


__all__ = [
    "FecgError",
    "amari_index",
    "config_hash",
    "default_config",
    "detect_r_peaks",
    "mi_binned",
    "mi_knn",
    "remove_baseline",
    "run_pipeline",
    "select_fetal",
    "select_rule1",
    "select_rule2",
    "separate",
    "simulate",
]
