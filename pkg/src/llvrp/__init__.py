"""Lifelong-learning neural solver for routing problems.

A Transformer construction policy whose attention key matrices and
additive bias matrices carry knowledge across a sequence of training
contexts (distance metrics or problem sizes), trained with multi-start
REINFORCE, an importance-weighted L1 regularizer against the previous
context, and cross-context experience replay.  Exact desk-scale oracles
and benchmark-format I/O make every piece testable.
"""

from .autodiff import Adam, GradientError, InfeasibleMaskError, ShapeError, Tape, Tensor, grad_check
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .oracles import (OracleCache, OracleResult, SizeLimitError, cvrp_exact_tiny,
                      cvrp_sweep, gap, held_karp, nearest_neighbor, reference_solve,
                      two_opt)
from .policy import (ContextSnapshot, ModelCapacityError, ModelConfig, PolicyParams,
                     decode_step, encode, greedy_cost, rollout_batch,
                     rollout_multistart, snapshot_context, tour_log_prob)
from .scheduler import DCSConfig, MetricStats, hardness, metric_probs, sample_plan
from .training import (ContextSpec, EpochStats, TrainAbort, TrainConfig, TrainResult,
                       epoch_instance_plan, lifelong_train, reg_loss, reinforce_loss,
                       replay_plan, shared_baseline, total_loss, validation_seed)
from .vrp import (FeasibilityError, Instance, MetricKind, ProblemKind, RolloutState,
                  Tour, capacity_for, distance, distance_matrix, generate_instance,
                  initial_state, instance_from_json, instance_seeds, instance_to_json,
                  make_tour, stable_seed, step, tour_cost, valid_actions)

__version__ = "0.1.0"
