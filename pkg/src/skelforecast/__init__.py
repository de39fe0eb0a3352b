"""Skeleton-based human motion forecasting with a spatio-temporal graph WaveNet."""

__version__ = "0.1.0"

from .model import GraphWaveNet, ModelConfig, count_parameters, load_checkpoint, save_checkpoint
from .skeleton import Skeleton, build_chain_table, build_subgraphs, chain_skeleton, h36m_skeleton, load_skeleton
from .training import TrainConfig, fit
from .evaluation import EvalConfig, EvalReport, euler_distance, run_protocol

__all__ = [
    "EvalConfig",
    "EvalReport",
    "GraphWaveNet",
    "ModelConfig",
    "Skeleton",
    "TrainConfig",
    "build_chain_table",
    "build_subgraphs",
    "chain_skeleton",
    "count_parameters",
    "euler_distance",
    "fit",
    "h36m_skeleton",
    "load_checkpoint",
    "load_skeleton",
    "run_protocol",
    "save_checkpoint",
]
