"""Low-rank orthogonal metric learning with multi-task triplet mining."""
from .data_model import (Dataset, DatasetError, FeatureScaler, TaskSchema, compute_gradient_labels,
                         default_schema, impute_nearest, load_dataset, load_schema, prepare,
                         save_dataset, save_schema, split_by_individual, standardize)
from .evaluation import (EvalReport, change_eval, evaluate, knn_precision, score_regression_eval,
                         shuffled_precision, sweep)
from .metric import (LossConfig, MetricParams, angular_factor, angular_hinge, bilinear_sim, embed,
                     grad_total_loss, mahalanobis_sq, mse_head, total_loss, triplet_nll)
from .miner import (InadmissibleError, MinerConfig, Triplet, admissible_pair_count, classify_pair,
                    match_count, sample_triplets)
from .stiefel import OptimizerState, retract_qr, tangent_project
from .synthgen import SynthConfig, generate, generate_with_truth
from .trainer import (TrainConfig, TrainHistory, TrainResult, finite_diff_audit, load_checkpoint,
                      save_checkpoint, train)

__version__ = "0.1.0"
