"""fedbed: a single-machine federated learning testbed.

Runs real multi-process FL over a TCP protocol, emulates heterogeneous
edge-device fleets (compute speed, link bandwidth, power draw), scrapes
per-client telemetry in the background, and computes time/energy
trade-off metrics from the collected data.
"""

from fedbed.model import (
    Dataset,
    ModelSpec,
    ParamVector,
    TrainConfig,
    evaluate,
    init_model,
    local_train,
    proximal_penalty,
)
from fedbed.data import PartitionPlan, dirichlet_partition, synth_dataset, train_val_split
from fedbed.strategy import (
    ClientUpdate,
    RoundRecord,
    StrategyConfig,
    aggregate_fedavg,
    heterofl_aggregate,
    heterofl_extract,
    sample_clients,
    should_stop,
)
from fedbed.emulator import DeviceProfile, EmulatedClock, get_profile

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "ModelSpec",
    "ParamVector",
    "TrainConfig",
    "evaluate",
    "init_model",
    "local_train",
    "proximal_penalty",
    "PartitionPlan",
    "dirichlet_partition",
    "synth_dataset",
    "train_val_split",
    "ClientUpdate",
    "RoundRecord",
    "StrategyConfig",
    "aggregate_fedavg",
    "heterofl_aggregate",
    "heterofl_extract",
    "sample_clients",
    "should_stop",
    "DeviceProfile",
    "EmulatedClock",
    "get_profile",
]
