"""Real-time RGB-D SLAM with a scene-coordinate-regression implicit map.

The map is a small network trained online to regress global 3D coordinates
from feature descriptors; camera poses come exclusively from RANSAC
relocalization against that map.
"""

__version__ = "0.1.0"

from .errors import (
    BehindCameraError,
    BootstrapFailureError,
    DegenerateConfigurationError,
    EmptyAssociationError,
    InsufficientPointsError,
    InvalidObservationError,
    ScrSlamError,
    SerializationError,
)
from .frontend import (
    FeatureFrame,
    StreamConfig,
    SyntheticScene,
    generate_scene,
    generate_stream,
    generate_trajectory,
    read_stream,
    render_frame,
    write_stream,
)
from .geometry import (
    AteResult,
    CameraIntrinsics,
    Pose,
    associate_timestamps,
    ate_alignment,
    ate_rmse,
    kabsch_umeyama,
    look_at,
    project,
    read_trajectory,
    rotation_angle_between,
    unproject,
    write_trajectory,
)
from .network import (
    AdamOptimizer,
    HomMlp,
    HomMlpConfig,
    ScrNetwork,
    TriMlp,
    TriplaneConfig,
    coordinates_from_votes,
    deserialize,
    load_map,
    make_bases,
    save_map,
    serialize,
)
from .relocalizer import RansacConfig, RelocResult, predict_global, ransac_align, relocalize
from .slam import (
    CycleReport,
    IngestReport,
    Keyframe,
    SchedulerStats,
    SlamConfig,
    SlamSystem,
    WindowMember,
    triplane_bounds_for_frame,
)
