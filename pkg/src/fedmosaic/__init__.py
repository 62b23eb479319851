"""Personalized federated co-training with adaptive loss weighting and
expertise-weighted consensus, simulated at desk scale."""

from .consensus import (
    consensus_argmax, dp_noise_expertise, expertise_frequency, expertise_uncertainty,
    majority_consensus, predict_hard, weighted_score_matrix,
)
from .data import (
    Dataset, DomainShift, PartitionSpec, PublicPool, ScenarioSpec, apply_feature_shift,
    make_domain_shift, make_mixture, make_scenario, partition, split_public,
)
from .learner import (
    Model, SoftmaxClassifier, compute_lambda, cross_entropy_loss, grad_combined, init_model,
    predict_probs, sgd_epoch,
)
from .metrics import (
    RunRecord, accuracy, convergence_bound, grad_norm_sq_sample, proposition1_bound,
    pseudo_label_drift, trend_checks,
)
from .estimator import FedMosaicClassifier
from .protocol import DPConfig, ProtocolConfig, run_centralized, run_experiment, sync_round

__version__ = "0.1.0"
