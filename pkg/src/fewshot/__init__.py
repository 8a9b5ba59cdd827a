"""Metric-based few-shot classification with a covariance-regularized
Mahalanobis head, FiLM task adaptation, and an episodic harness."""

from .autodiff import (NonFiniteError, ShapeMismatchError,
                       SPDFactorizationError, Tape, Tensor,
                       finite_difference_check, spd_solve)
from .backbone import AdaptationNetwork, BackboneConfig, FilmBackbone, FilmParams
from .datasets import (ClassSplit, ConfigurationError, IdxFormatError,
                       LabeledDataset, SyntheticSpec, generate_synthetic,
                       kfold_splits, load_idx, mixture_from_spec, split_classes,
                       write_idx)
from .episodes import (Episode, EpisodeProtocol, SamplingError, episode_stream,
                       sample_episode, stream_episode, validate_episode)
from .evaluate import (EpisodeResult, EvalSummary, accuracy_by_shots,
                       accuracy_by_ways, ablation_table, count_trainable_params,
                       evaluate)
from .heads import (ClassStats, MahalanobisHead, RegularizedCovariance,
                    TaskStats, blend_covariance, class_covariance, class_means,
                    classify, mahalanobis_logits, metric_logits, shot_weight,
                    task_covariance)
from .model import FewShotClassifier, HeadConfig
from .oracles import (BregmanGenerator, GaussianMixtureRef,
                      bayes_optimal_accuracy, bregman_divergence,
                      dense_reference_covariance, dense_reference_inverse,
                      dense_reference_solve, gmm_responsibilities,
                      gmm_responsibilities_shared, nearest_mean_accuracy)
from .train import TrainConfig, TrainingDivergedError, adam_step, train

__version__ = "0.1.0"
