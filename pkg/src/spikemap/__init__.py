"""Lossless conversion of trained ReLU networks into single-spike networks.

Pipeline: `preprocess` rewrites a network (batchnorm fused, inputs in
[0, 1], weight sums bounded) without changing its function, `calibrate`
records per-layer maxima, `convert` produces integrate-and-fire parameters,
and `simulate_event` runs the spiking network so `verify` can check that
both networks predict identically, sample by sample.
"""

from .convert import SnnNetwork, convert, convert_pooling, inverse_weights
from .layers import BatchNorm, Conv2d, Dense, Flatten, Pool2d
from .modelio import (
    Dataset,
    load_dataset,
    load_model,
    load_scaled,
    load_snn,
    save_dataset,
    save_model,
    save_scaled,
    save_snn,
)
from .network import ReluNetwork, predict, relu_forward
from .preprocess import Hyper, ScaledNetwork, calibrate, preprocess, recover_original
from .simulate import NoiseSpec, SpikeTrace, decode, encode_input, simulate_event, snn_predict
from .stepped import simulate_stepped
from .tensor import Tensor
from .verify import AgreementReport, run_agreement, sweep_alpha_noise, sweep_jitter, sweep_zeta

__version__ = "0.1.0"

__all__ = [
    "AgreementReport", "BatchNorm", "Conv2d", "Dataset", "Dense", "Flatten",
    "Hyper", "NoiseSpec", "Pool2d", "ReluNetwork", "ScaledNetwork",
    "SnnNetwork", "SpikeTrace", "Tensor", "calibrate", "convert",
    "convert_pooling", "decode", "encode_input", "inverse_weights",
    "load_dataset", "load_model", "load_scaled", "load_snn", "predict",
    "preprocess", "recover_original", "relu_forward", "run_agreement",
    "save_dataset", "save_model", "save_scaled", "save_snn",
    "simulate_event", "simulate_stepped", "snn_predict", "sweep_alpha_noise",
    "sweep_jitter", "sweep_zeta",
]
