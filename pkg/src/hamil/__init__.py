"""HAMIL: hierarchical aggregation networks for multi-instance learning,
plus ablations (random-order and mean-merge variants), pooling and
attention baselines, and a reproducible cross-validation harness.
"""

from .aggregators import AggregatorSpec
from .data import Bag, Dataset, load_bag_csv, make_cv_plan, normalize, synth_image_bags
from .hierclust import MergeQueue, MergeTriplet, build_hierarchy
from .models import ImagePathwayModel, VectorPathwayModel, build_model, loss_bag
from .tensor import Tensor, set_default_dtype
from .train_eval import OptimizerConfig, RunSpec, evaluate, run_cv, train

__version__ = "0.1.0"

__all__ = [
    "AggregatorSpec", "Bag", "Dataset", "ImagePathwayModel", "MergeQueue",
    "MergeTriplet", "OptimizerConfig", "RunSpec", "Tensor",
    "VectorPathwayModel", "build_hierarchy", "build_model", "evaluate",
    "load_bag_csv", "loss_bag", "make_cv_plan", "normalize", "run_cv",
    "set_default_dtype", "synth_image_bags", "train",
]
