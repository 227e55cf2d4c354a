"""Hot-Distance segmentation targets: one-hot plus tanh signed-distance channels
with sparse-annotation masks, the masked composite loss, and watershed
post-processing for 3D label volumes."""

from .edt import signed_distance, squared_edt
from .loss import (
    DivergenceError,
    LossParams,
    LossReport,
    PredictionBundle,
    bce_from_logits,
    check_gradients,
    fit_predictions,
    hot_distance_loss,
)
from .postprocess import (
    WatershedParams,
    connected_components,
    dice_score,
    threshold_semantic,
    watershed_instances,
)
from .targets import (
    DistanceParams,
    TargetBundle,
    build_targets,
    distance_targets,
    hot_targets,
    tanh_scale,
)
from .volume import (
    UNKNOWN_LABEL,
    ClassSchema,
    CropMeta,
    LabelVolume,
    Volume,
    read_volume,
    validate_labels,
    write_volume,
)

__version__ = "0.1.0"
