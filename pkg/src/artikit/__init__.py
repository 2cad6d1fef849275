"""Articulated-object representation, kinematics, metrics and a desk-scale diffusion model."""
from .core import (
    ArticulatedObject,
    JointSpec,
    JointType,
    OrientedBox,
    PartNode,
    attributes_to_vector,
    denormalize_state,
    forward_kinematics,
    joint_transform,
    pose_object,
    sample_states,
    shuffle_parts,
    validate_object,
    vector_to_attributes,
)
from .errors import (
    ArtikitError,
    FormatError,
    GeometryError,
    ParameterError,
    ParseError,
    ProviderError,
    RangeError,
    ShapeError,
    StructuralError,
    TrainingError,
    TransportError,
)
from .geometry import TriMesh, chamfer_distance, fit_obb, part_overlap_rate

__version__ = "0.1.0"
