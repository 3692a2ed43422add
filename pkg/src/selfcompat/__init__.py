"""Width-switchable embedding networks whose sub-models share one compatible feature space."""

from .aggregate import AggregationConfig, GradientSet, aggregate, project_pair
from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledVectorSet, SyntheticSpec, generate_synthetic, load_csv, load_idx
from .losses import CompatibleLossConfig, compatible_loss, evidential_ce, kl_to_uniform, make_opinion
from .model import ModelConfig, SwitchableModel, build_model
from .retrieval import CompatMatrix, compat_matrix, map_r1
from .trainer import TrainConfig, train, train_step

__version__ = "0.1.0"
