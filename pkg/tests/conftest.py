import numpy as np
import pytest

from monokp.geometry import CameraModel, Dimension3D, ObjectBox3D
from monokp.oracles import DEFAULT_P2, SceneSpec, sample_box


# corner projections of dim (1.5, 1.6, 3.9), theta 0.3, T (1, 1.5, 10) through
# fx = fy = 700, (cx, cy) = (640, 180), computed longhand by the oracle
FROZEN_KPS = np.array(
    [
        [852.9490188182862, 334.59356691774076],
        [852.3159679577715, 361.88187657399675],
        [561.5729719812686, 340.51781172127835],
        [601.3295980934348, 318.8823538949706],
        [852.9490188182862, 231.53118897258025],
        [852.3159679577715, 240.62729219133226],
        [561.5729719812686, 233.5059372404261],
        [601.3295980934348, 226.2941179649902],
        [710.0, 285.0],
    ]
)


@pytest.fixture
def kitti_cam():
    return CameraModel(DEFAULT_P2)


@pytest.fixture
def simple_cam():
    return CameraModel.from_intrinsics(700.0, 700.0, 640.0, 180.0)


def random_boxes(rng, n, spec=None):
    """n frustum-valid boxes (ObjectBox3D) drawn by the scene sampler."""
    spec = spec or SceneSpec()
    out = []
    while len(out) < n:
        s = sample_box(rng, spec)
        if s is not None:
            dims, theta, T, _ = s
            out.append(ObjectBox3D(Dimension3D(*dims), theta, T))
    return out
