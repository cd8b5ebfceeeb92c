"""Fairness-aware exact graph unlearning.

Train small graph convolutional classifiers on balanced graph shards,
honor deletion requests by retraining only the affected shards, and keep
the deployed (importance-weighted) model's predictions demographically
balanced through bi-level debiasing. Includes deletion-request sampling,
retraining baselines and a shadow-model membership-inference audit.
"""

__version__ = "0.1.0"

from .errors import (ContractError, DegenerateGroupError, NumericError,
                     ParseError, ValidationError)
from .graph import (Graph, SbmSpec, apply_deletion, build_graph, generate_sbm,
                    load_graph, normalize_adjacency, save_graph)
from .partition import (Partition, balanced_partition, induce_shards,
                        load_assignment, route_request, save_assignment)
from .gcn import (AdamState, Predictions, ShardModel, adam_step, backward,
                  forward, init_adam, init_model, predict_labels,
                  utility_loss, utility_loss_grad)
from .metrics import (FairnessReport, accuracy_f1, delta_dp, delta_eo,
                      evaluate_predictions, soft_group_gap)
from .trainer import (FguConfig, FguState, ImportanceScores, aggregate,
                      combine_models, config_hash, fgu_unlearn_retrain,
                      importance_gradient, load_state, save_state,
                      train_shards, update_importance)
from .unlearn import (DeletionSpec, UnlearnRequest, fair_retrain_baseline,
                      load_request, privileged_group, retrain_baseline,
                      sample_request, save_request)
from .mia import (AttackDataset, AttackModel, ShadowResult,
                  build_attack_dataset, fit_attack, mia_features, run_attack,
                  train_shadows)
