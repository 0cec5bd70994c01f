"""Federated class-incremental learning with prototypical feature knowledge transfer.

A deterministic desk-scale simulator: clients rehearse previous classes with
translated features while the server fuses class prototypes into a shared
knowledge base. Each run is scored on continual utility and on privacy under
gradient inversion, with per-round cost kept for an efficiency score.
"""
__version__ = "0.1.0"

from .client import (ClientState, ClientUpdate, LocalHyper, PrototypeEntry, compute_prototypes,
                     cosine_relation, local_train_round, select_base_class, translate_features)
from .data import (DatasetSpec, PartitionConfig, Samples, TaskStream, build_task_stream, generate_dataset,
                   partition_asynchronous, partition_synchronous, round_to_task)
from .errors import (ArgumentError, ConfigurationError, DimensionError, FedProKError, FormatError, LabelError,
                     NumericError, RunError)
from .experiment import ExperimentConfig, RunRecord, emit_csv, emit_summary, run_experiment, run_suite
from .metrics import (continual_utility, efficiency_score, evaluate, gradient_inversion_attack, privacy_score,
                      prototype_inversion_attack)
from .nn import (GradientSet, ModelParams, apply_sgd, average_params, deserialize_params, forward_features,
                 forward_logits, grow_classifier, init_params, loss_and_grads, serialize_params)
from .server import GlobalState, KnowledgeEntry, distribute, fedavg, fuse_prototypes
