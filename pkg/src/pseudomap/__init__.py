"""Vectorized map pseudo-labels from semantic BEV rasters.

Covers the raster-to-vector pipeline, Gaussian-surfel BEV rendering, the
mask-aware hybrid one-to-one / one-to-many assignment, mask-aware losses with
analytic gradients, and Chamfer-AP / coverage evaluation.
"""

from .assign import (
    AssignmentResult,
    CostParams,
    Subsegments,
    cost_o2m,
    cost_o2o,
    enumerate_subsets,
    hungarian,
    solve_global,
    split_by_mask,
)
from .config import PipelineConfig, load_config
from .errors import (
    BudgetExceededError,
    DegenerateGeometryError,
    FormatError,
    InfeasibleAssignmentError,
    PseudoMapError,
)
from .geometry import (
    BevSpec,
    Kind,
    MapClass,
    MapElement,
    Pose2,
    VectorMap,
    chamfer_distance,
    crop_to_range,
    equivalent_orderings,
    resample,
)
from .losses import (
    LossBreakdown,
    LossParams,
    SoftRaster,
    compute_losses,
    dice_loss,
    direction_loss,
    focal_loss,
    masked_bev_seg_loss,
    pointwise_l1,
    render_loss,
    soft_rasterize,
    total_loss,
)
from .metrics import ApConfig, EvalReport, chamfer_ap, coverage_curve, coverage_ratio, mask_gt
from .raster import (
    BevMask,
    RasterClass,
    SemanticRaster,
    StructuringElement,
    connect_lane_fragments,
    connected_components,
    extract_boundary,
    maxpool_downsample,
    morphology,
    remove_artifacts,
    skeletonize,
)
from .surfels import Surfel, SurfelGrid, Trajectory, init_meshgrid, render_bev, transform_grid
from .synth import (
    OcclusionParams,
    SceneParams,
    gen_occlusion,
    gen_scene,
    multi_trip_union,
    rasterize_gt,
)
from .vectorize import (
    PixelPath,
    VectorizeParams,
    filter_dividers,
    rdp_iterative,
    trace_lines,
    trace_polygons,
    vectorize_bev,
)

__version__ = "0.1.0"
