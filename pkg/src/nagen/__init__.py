"""Non-adversarial recurrent gesture generation with a soft-DTW set loss."""

from .errors import DataError, NumericError
from .gestures import Dataset, Gesture, SplitSpec, load_dataset, prepare_gesture, resample, split_subject_independent
from .sdtw import CostKind, dtw_classic, sdtw_backward, sdtw_batch, sdtw_forward
from .loss import BatchQuad, LossBreakdown, avg_hausdorff, deepnag_gradient, deepnag_total, resample_loss
from .generator import GeneratorParams, generator_backward, generator_forward, init_params, make_latent
from .trainer import TrainConfig, generate, train
from .augment import ScoreTable, knn1_dtw_classify, noise_augment, run_experiment, score_generators

__version__ = "0.1.0"
