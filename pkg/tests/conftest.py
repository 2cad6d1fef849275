import math
from pathlib import Path

import numpy as np
import pytest

from artikit.core import ArticulatedObject, JointSpec, JointType, OrientedBox, PartNode

FIXTURES = Path(__file__).parent / "fixtures"


def make_part(pid, parent=None, jt=JointType.FIXED, origin=(0, 0, 0), direction=(0, 0, 1),
              rng=(0, 0, 0, 0), state=0.0, center=(0, 0, 0), half=(0.5, 0.5, 0.5), label=None,
              pitch=0.02, mesh_ref=None, latent=None):
    return PartNode(
        part_id=pid,
        semantic_label=label or f"p{pid}",
        obb=OrientedBox(center, half, (0, 0, 0)),
        joint=JointSpec(origin, direction, jt, rng, pitch),
        state=state,
        parent_id=parent,
        shape_latent=latent,
        mesh_ref=mesh_ref,
    )


def revolute_chain(n, angle=math.pi / 2, states=None):
    """Chain 0 <- 1 <- ... <- n-1; every child revolute about z through the origin on [0, angle]."""
    parts = [make_part(0)]
    for i in range(1, n):
        parts.append(make_part(i, i - 1, JointType.REVOLUTE, rng=(0, angle, 0, 0), center=(i, 0, 0)))
    obj = ArticulatedObject(parts, 0, "chain")
    return obj if states is None else obj.with_states(states)


def unit_cube_mesh(offset=(0.0, 0.0, 0.0)):
    from artikit.geometry import box_mesh

    lo = np.asarray(offset, float)
    return box_mesh(lo, lo + 1.0)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


# --- acceptance reporting ----------------------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
