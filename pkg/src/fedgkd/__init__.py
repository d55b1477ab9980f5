"""Federated learning simulator with historical-global-model knowledge distillation.

Strategies: fedavg, fedprox, fedgkd (distill from the averaged recent global
models), fedgkd_vote (distill from each buffered global model with
validation-weighted coefficients).
"""

from .config import ConfigError, ExperimentConfig, parse_config
from .data import ClientShard, Dataset, PartitionSpec, dirichlet_partition, gen_toy_dataset, train_val_split
from .diagnostics import DriftReport, InexactnessProbe, drift_report, finite_diff_check, inexactness_ratio
from .federation import (
    ClientResult,
    FedConfig,
    RoundRecord,
    RunContext,
    ServerState,
    TeacherBuffer,
    aggregate,
    client_update,
    ensemble_teacher,
    run_federation,
    run_round,
    sample_clients,
    vote_coefficients,
)
from .harness import run_experiment, summarize, verify
from .losses import DistillConfig, ProxConfig, cross_entropy, kd_term, kl_div, local_objective, prox_term
from .nn import (
    ForwardCache,
    MlpSpec,
    SgdHyper,
    backprop,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    softmax,
)

__version__ = "0.1.0"
