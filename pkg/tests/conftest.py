import numpy as np
import pytest

from zeropose.geometry import CameraIntrinsics, Pose, rotation_about_axis


@pytest.fixture
def camera():
    return CameraIntrinsics(550.0, 550.0, 320.0, 240.0, 640, 480)


def random_rotation(rng) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return rotation_about_axis(axis, rng.uniform(0.0, np.pi))


def random_pose(rng, z_range=(500.0, 900.0)) -> Pose:
    t = np.array([rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(*z_range)])
    return Pose(random_rotation(rng), t)


CUBE_ASCII_PLY = """ply
format ascii 1.0
comment unit cube, mm
element vertex 8
property float x
property float y
property float z
element face 12
property list uchar int vertex_indices
end_header
0 0 0
1 0 0
1 1 0
0 1 0
0 0 1
1 0 1
1 1 1
0 1 1
3 0 1 2
3 0 2 3
3 4 6 5
3 4 7 6
3 0 4 5
3 0 5 1
3 3 2 6
3 3 6 7
3 0 3 7
3 0 7 4
3 1 5 6
3 1 6 2
"""


@pytest.fixture
def cube_ascii_ply(tmp_path):
    path = tmp_path / "cube.ply"
    path.write_text(CUBE_ASCII_PLY)
    return path
