"""Federated protocol: synthetic cross-assessment, layer-wise dynamic
aggregation, consistency loss, baselines, and round orchestration."""

from .aggregation import (
    cross_assess,
    dynamic_aggregate,
    fedavg_aggregate,
    normalize_similarity,
    pairwise_aggregate,
)
from .client import ClientState, ClientWorker, evaluate, local_train, make_client
from .experiment import ExperimentResult, ablate, compare, run_experiment, summarize, sweep
from .server import Federation, RoundAborted, RoundReport, ServerState, run_round
from .synthetic import SyntheticBank, bank_update, consistency_weights, gen_synthetic, loss_sc

__all__ = [
    "ClientState", "ClientWorker", "ExperimentResult", "Federation", "RoundAborted", "RoundReport",
    "ServerState", "SyntheticBank", "ablate", "bank_update", "compare", "consistency_weights",
    "cross_assess", "dynamic_aggregate", "evaluate", "fedavg_aggregate", "gen_synthetic",
    "local_train", "loss_sc", "make_client", "normalize_similarity", "pairwise_aggregate",
    "run_experiment", "run_round", "summarize", "sweep",
]
