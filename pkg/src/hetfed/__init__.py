"""Discrete-event simulator for federated learning across heterogeneous devices.

Implements synchronous FedAvg and staleness-aware asynchronous aggregation
with per-client DP-SGD local training and moments-accountant privacy
tracking, driven by a deterministic virtual clock.
"""

from hetfed.accountant import (
    AccountantState,
    GridMismatchError,
    MechanismParams,
    MomentOverflowError,
    compose,
    epsilon,
    log_moment,
)
from hetfed.dp import DpConfig, LocalTrainResult, TrainingDivergedError, clip_per_sample, local_train, noised_mean_gradient
from hetfed.federation import (
    ProtocolError,
    ServerState,
    UpdateMessage,
    fedavg_aggregate,
    fedasync_apply,
    staleness_weight,
)
from hetfed.sim import DeviceProfile, RunReport, SimulationAbortedError, default_profiles, run, sample_round_duration, staleness_trace
from hetfed.task import (
    Dataset,
    ModelLayout,
    ModelParameters,
    evaluate,
    forward_loss,
    generate_synthetic,
    init_params,
    load_dataset,
    partition_iid,
    save_dataset,
)

__version__ = "0.1.0"
