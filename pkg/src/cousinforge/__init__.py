"""Real-to-sim pipeline: distill urban scene graphs from per-frame
perception outputs, retrieve digital-cousin assets, assemble
physics-ready scenes, and evaluate fidelity, scaling, and navigation.
"""

from __future__ import annotations

__version__ = "0.1.0"

from . import (  # noqa: F401
    assembly,
    color,
    config,
    errors,
    evaluation,
    fusion,
    geometry,
    jsonio,
    navsim,
    retrieval,
    scenegraph,
)
from .assembly import (  # noqa: F401
    GroundPlane,
    Placement,
    SceneSpec,
    emit_scene,
    fit_ground_planes,
    generate_cousins,
    load_scene,
    place_objects,
    save_scene,
)
from .evaluation import (  # noqa: F401
    FidelityReport,
    GtObject,
    NavMetrics,
    ScalingFit,
    fidelity,
    fit_power_law,
    map25,
    match_objects,
    nav_metrics,
)
from .fusion import (  # noqa: F401
    DetectionRecord,
    FusionConfig,
    GroundMaskRecord,
    extract_sky,
    fuse_ground,
    fuse_objects,
)
from .geometry import (  # noqa: F401
    CameraFrame,
    OrientedBox,
    PointCloud,
    cloud_overlap,
    fit_oriented_box,
    iou_3d,
    lift_mask,
    lift_pixel,
)
from .navsim import (  # noqa: F401
    AgentState,
    EpisodeConfig,
    RewardWeights,
    reward,
    run_episode,
    run_episode_detailed,
    step,
)
from .retrieval import (  # noqa: F401
    AssetRecord,
    CousinSelection,
    GroundMaterial,
    SkyAsset,
    appearance_rank,
    geometry_filter,
    match_ground_material,
    match_sky,
    materialize,
    mbbd,
    semantic_match,
)
from .scenegraph import (  # noqa: F401
    CropDescriptor,
    GroundNode,
    ObjectNode,
    SceneGraph,
    SkyCrop,
    SkyNode,
    load_graph,
    save_graph,
)
