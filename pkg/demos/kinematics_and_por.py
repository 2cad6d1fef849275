"""Ingest the bundled cabinet URDF, sweep its door and print the overlap rate per pose.

Run from the repository root:  python3 demos/kinematics_and_por.py
"""
from pathlib import Path

import numpy as np

from artikit.core import pose_object, validate_object
from artikit.geometry import part_overlap_rate
from artikit.io import parse_mobility_urdf

HERE = Path(__file__).resolve().parent
CABINET = HERE.parent / "tests" / "fixtures" / "urdf" / "cabinet"


def main():
    obj, meshes = parse_mobility_urdf(CABINET)
    print(f"{obj.category}: {len(obj.parts)} parts, valid={validate_object(obj).ok}")
    for part in obj.parts:
        print(f"  {part.part_id} {part.semantic_label:14s} {part.joint.joint_type.value:10s} range={part.joint.range}")

    door = obj.parts[1]
    for s in np.linspace(0.0, 1.0, 5):
        posed = pose_object(obj, [0.0, s], meshes)
        center = posed.obbs[1].center
        print(f"s={s:.2f}  door center=({center[0]:+.3f}, {center[1]:+.3f}, {center[2]:+.3f})"
              f"  POR={part_overlap_rate(posed, 32):.4f}")
    print(f"door opens about {np.round(door.joint.direction, 3)} through {np.round(door.joint.origin, 3)}")


if __name__ == "__main__":
    main()
