"""Point-cloud set-abstraction kernels, profiler, and desk-scale trainer."""

from .datagen import (
    generate_cloud,
    load_dataset,
    make_clouds,
    make_dataset,
    make_splits,
    nearest_centroid_accuracy,
    save_dataset,
)
from .geometry import (
    GroupedTensor,
    NeighborTable,
    PointCloud,
    ball_query,
    ball_query_brute,
    farthest_point_sample,
    group,
    load_point_cloud_csv,
    save_point_cloud_csv,
)
from .network import (
    BackboneConfig,
    ClassifierModel,
    build_backbone,
    evaluate,
    forward_classify,
    forward_classify_batch,
    load_model,
    save_model,
    scale_depth,
    scale_width,
    train_classifier,
)
from .nn import (
    GradTape,
    MlpLayer,
    MlpStack,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
    sgd_step,
)
from .profiler import (
    FlopsReport,
    LatencyReport,
    count_flops,
    extract_feature_patterns,
    measure_latency,
)
from .reduction import (
    ReductionSpec,
    anisotropic_reduce,
    pospool_reduce,
    reduce_features,
    relpos_sum_reduce,
)
from .set_abstraction import (
    BlockInput,
    ConfigError,
    SaBlock,
    SaConfig,
    SaVariant,
    assa_forward,
    preconv_sa_forward,
    preconv_vanilla_max_error,
    separable_sa_forward,
    vanilla_sa_forward,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
