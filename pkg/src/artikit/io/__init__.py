"""File formats: canonical objects, OBJ meshes, feature files, URDF."""
from .canonical import (
    FORMAT_VERSION,
    atomic_write_text,
    dumps_object,
    load_asset,
    load_object,
    loads_object,
    object_from_dict,
    object_to_dict,
    save_asset,
    save_object,
)
from .features import load_features, save_features
from .objfile import format_obj, load_obj, parse_obj, save_obj
from .urdf import export_urdf, parse_mobility_urdf
