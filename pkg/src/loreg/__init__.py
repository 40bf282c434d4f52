"""Learned-optimizer regularization lab.

Train coordinatewise LSTM optimizers whose meta-objective carries
sharpness-aware (SAM/GSAM/GAM) and smoothing regularization, then verify
with projected-gradient-ascent probes that the trained optimizer transfers
those properties to unseen tasks with no regularizer active at meta-test.
"""

__version__ = "0.1.0"

from .meta_training import MetaConfig, Regularizer, train_meta
from .optimizer import CoordinatewiseLSTM, OptState, deserialize_lo, load_lo, save_lo, serialize_lo
from .probes import ProbeConfig, ProbeReport, StageTag, detect_convergence, probe_sweep
from .rng import RngStream

__all__ = [
    "MetaConfig", "Regularizer", "train_meta",
    "CoordinatewiseLSTM", "OptState", "serialize_lo", "deserialize_lo", "save_lo", "load_lo",
    "ProbeConfig", "ProbeReport", "StageTag", "detect_convergence", "probe_sweep",
    "RngStream", "__version__",
]
