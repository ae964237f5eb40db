"""Spiking transformer with local dilated attention and response pooling, on a numpy autograd core."""

from .attention import LSSSA, LSSSAConfig
from .config import ModelConfig, OptimConfig, RunConfig
from .data import DatasetContainer, load_container, save_container, synth_dataset
from .metrics import EnergyReport, energy_ann, energy_snn, profile_model
from .model import LSFormer, count_parameters, load_checkpoint, lsformer_2_256, lsformer_4_384, save_checkpoint, toy_config
from .neuron import LIFParams, lif_sequence, lif_step
from .pooling import SPooling, SPoolingConfig, pool_output_shape, spool
from .tensor import Tensor, backward

__all__ = [
    "LSSSA",
    "LSSSAConfig",
    "ModelConfig",
    "OptimConfig",
    "RunConfig",
    "DatasetContainer",
    "load_container",
    "save_container",
    "synth_dataset",
    "EnergyReport",
    "energy_ann",
    "energy_snn",
    "profile_model",
    "LSFormer",
    "count_parameters",
    "load_checkpoint",
    "lsformer_2_256",
    "lsformer_4_384",
    "save_checkpoint",
    "toy_config",
    "LIFParams",
    "lif_sequence",
    "lif_step",
    "SPooling",
    "SPoolingConfig",
    "pool_output_shape",
    "spool",
    "Tensor",
    "backward",
]
