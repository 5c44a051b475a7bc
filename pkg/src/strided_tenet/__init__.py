"""Strided matrix-product-state image segmentation.

Pixels are lifted to unit-norm sinusoidal feature vectors, whole K x K
patches to their tensor product, and a learned MPS chain classifies every
pixel of a patch at once; sliding the same chain over non-overlapping
patches and tiling the results segments the full image. Training is plain
binary cross entropy plus Adam with validation-Dice early stopping.
"""

from .data import (
    DatasetManifest,
    SynthConfig,
    generate_synthetic,
    load_image,
    load_manifest,
    load_mask,
    load_pairs,
    render_overlay,
    write_manifest,
    write_mask_png,
    write_soft_png,
)
from .errors import (
    CapacityError,
    DomainError,
    FormatError,
    NumericError,
    ShapeError,
    StateError,
    StridedTenetError,
    UndefinedMetricError,
)
from .features import (
    LocalFeatureConfig,
    feature_map_names,
    get_feature_map,
    local_feature_map,
    map_patch,
    materialize_global_feature_map,
    register_feature_map,
)
from .metrics import PrCurve, dice, pr_curve, prauc, threshold
from .mps import (
    ForwardCache,
    MpsModel,
    backward,
    decompose_weight_tensor,
    forward,
    init_mps,
    load_checkpoint,
    materialize_weight_tensor,
    parameter_count,
    save_checkpoint,
)
from .segmenter import PatchBatch, extract_patches, segment_image, tile_predictions
from .tensor import (
    DenseTensor,
    GradCheckReport,
    contract,
    finite_difference_check,
    matrix_chain_product,
)
from .train import (
    AdamState,
    EvalResult,
    TrainConfig,
    TrainHistory,
    adam_step,
    bce_with_logits,
    evaluate,
    gradient_check,
    train,
)

__version__ = "0.1.0"
