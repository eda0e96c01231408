"""Federated learning of partially trainable networks with seed-reconstructed frozen blocks."""

from .config import ExperimentConfig, load_config
from .data import Dataset, FederatedDataset, PartitionConfig, dirichlet_partition, shard_equal, synth_gaussian_mixture
from .dp import DpConfig, clip_update, noise_nodes_for, tree_prefix_noise
from .fed import ClientUpdate, EngineConfig, OptimizerConfig, Simulation, aggregate, client_update, server_step
from .metrics import comm_cost, reduction_factor
from .model import (
    FreezePlan,
    LayerSpec,
    ModelSpec,
    PartitionedParams,
    apply_freeze_plan,
    build_model,
    emnist_cnn_spec,
    mlp_spec,
    reconstruct,
    trainable_fraction,
)

__version__ = "0.1.0"
