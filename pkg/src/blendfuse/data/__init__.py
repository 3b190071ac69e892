from .aggregate import STAT_NAMES, aggregate_frames
from .pack import FeaturePack, load_feature_pack, pack_checksum, write_feature_pack
from .records import EncoderSpec, SampleRecord, stack_features, stack_targets
from .splits import kfold_split
from .synthetic import SyntheticConfig, generate_synthetic

__all__ = [
    "STAT_NAMES",
    "EncoderSpec",
    "FeaturePack",
    "SampleRecord",
    "SyntheticConfig",
    "aggregate_frames",
    "generate_synthetic",
    "kfold_split",
    "load_feature_pack",
    "pack_checksum",
    "stack_features",
    "stack_targets",
    "write_feature_pack",
]
