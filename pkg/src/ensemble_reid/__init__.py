"""Multi-branch ensemble embeddings for person re-identification.

Modules:

- data: dataset loading (Market-style directories, synthetic manifests),
  augmentation, image utilities
- model: the multi-branch embedding network, vertical part pooling, losses,
  initialization, checkpoints
- training: multi-objective SGD loop with a two-group step schedule
- features: flip-averaged descriptor extraction, the binary feature format,
  ensembles by concatenation
- evaluation: CMC/mAP under the single-query protocol, cosine distances,
  k-reciprocal re-ranking
- landscape: filter-normalized random directions and metric surfaces
- config, cli: run configuration and the command-line interface
"""

from .config import DataConfig, RunConfig, load_data
from .data import (AugmentConfig, Dataset, Sample, augment, hflip, load_dataset,
                   make_synthetic_dataset, parse_market_filename, resize_image,
                   save_synthetic_manifest, standardize)
from .evaluation import (DistanceMatrix, EvalReport, RerankParams, cosine_distance,
                         euclidean_distance, evaluate, evaluate_features, rerank)
from .features import (DimTag, FeatureMatrix, concat_ensemble, extract_all,
                       extract_descriptor, load_features, save_features)
from .landscape import (Direction, EvalBundle, LandscapeGrid, grid_from_csv,
                        grid_to_csv, make_eval_bundle, near_center_area,
                        performance_surface, performance_surfaces, random_direction,
                        save_heatmap)
from .model import (EnsembleNet, ModelConfig, ReductionHead, adaptive_vertical_pool,
                    build_model, extract_backbone_state, init_model, load_checkpoint,
                    num_part_vectors, parameter_counts, part_layout, part_row_bins,
                    save_checkpoint, softmax_log_loss)
from .training import (EpochRecord, TrainConfig, TrainLog, lr_schedule, param_groups,
                       total_loss, train)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "DataConfig", "Dataset", "DimTag", "Direction", "DistanceMatrix",
    "EnsembleNet", "EpochRecord", "EvalBundle", "EvalReport", "FeatureMatrix",
    "LandscapeGrid", "ModelConfig", "ReductionHead", "RerankParams", "RunConfig",
    "Sample", "TrainConfig", "TrainLog", "adaptive_vertical_pool", "augment",
    "build_model", "concat_ensemble", "cosine_distance", "euclidean_distance", "evaluate",
    "evaluate_features", "extract_all", "extract_backbone_state", "extract_descriptor",
    "grid_from_csv", "grid_to_csv", "hflip", "init_model", "load_checkpoint",
    "load_data", "load_dataset", "load_features", "lr_schedule",
    "make_eval_bundle", "make_synthetic_dataset", "near_center_area",
    "num_part_vectors", "param_groups", "parameter_counts", "parse_market_filename",
    "part_layout", "part_row_bins", "performance_surface", "performance_surfaces",
    "random_direction", "rerank", "resize_image", "save_checkpoint", "save_features",
    "save_heatmap", "save_synthetic_manifest", "softmax_log_loss", "standardize",
    "total_loss", "train",
]
