"""Graph-autoencoder trend extraction for fleets of PV systems.

A fleet of co-located systems is modelled as a graph; an array of graph
autoencoders splits every series into a smooth aging term and flat
fluctuation terms, from which degradation rates are read off.
"""

from .fleet_graph import (
    FleetGraph,
    FleetSeries,
    build_correlation_adjacency,
    build_spatial_adjacency,
    load_fleet_csv,
    read_graph,
    write_fleet_csv,
    write_graph,
)
from .gae_array import (
    Decomposition,
    DecompositionModel,
    ModelConfig,
    gat_conv,
    init_params,
    load_checkpoint,
    model_forward,
    save_checkpoint,
    transformer_conv,
)
from .objective import LossWeights, loss_and_gradients, total_loss
from .para_trainer import TrainConfig, benchmark_speedup, train_parallel, train_serial
from .synth_fleet import DegradationSpec, generate_fleet, paper_defaults
from .trend_outputs import global_plr, mape, moving_average_oracle, plr_report, scaled_ed

__version__ = "0.1.0"

__all__ = [
    "Decomposition", "DecompositionModel", "DegradationSpec", "FleetGraph", "FleetSeries",
    "LossWeights", "ModelConfig", "TrainConfig", "benchmark_speedup",
    "build_correlation_adjacency", "build_spatial_adjacency", "gat_conv", "generate_fleet",
    "global_plr", "init_params", "load_checkpoint", "load_fleet_csv", "loss_and_gradients",
    "mape", "model_forward", "moving_average_oracle", "paper_defaults", "plr_report",
    "read_graph", "save_checkpoint", "scaled_ed", "total_loss", "train_parallel",
    "train_serial", "transformer_conv", "write_fleet_csv", "write_graph",
]
