import numpy as np
import pytest

from beamopt.dose import EngineConfig
from beamopt.env import EnvConfig, PlanScorer
from beamopt.phantom import CtVolume, GridGeometry, Phantom, Structure, generate_phantom


@pytest.fixture(scope="session")
def standard_phantom():
    """The default 32^3 pelvis case, seed 0. Shared; treat as read-only."""
    return generate_phantom()


@pytest.fixture(scope="session")
def standard_scorer(standard_phantom):
    """One scorer for the whole session so the per-angle dose cache is reused."""
    return PlanScorer(standard_phantom, EnvConfig(), EngineConfig())


def _sphere_mask(geom: GridGeometry, center_mm, radius_mm: float) -> np.ndarray:
    centers = [geom.axis_centers_mm(a) for a in range(3)]
    x, y, z = np.meshgrid(*centers, indexing="ij")
    return (
        (x - center_mm[0]) ** 2 + (y - center_mm[1]) ** 2 + (z - center_mm[2]) ** 2
        <= radius_mm**2
    )


@pytest.fixture(scope="session")
def water_phantom():
    """Homogeneous water cube with a centered box PTV; no OARs.

    HU is zero everywhere, so attenuation is exactly mu_water along any ray
    and the depth-dose curve has a closed form.
    """
    geom = GridGeometry((32, 32, 32), (4.0, 4.0, 4.0))
    hu = np.zeros(geom.shape, dtype=np.float32)
    ptv = np.zeros(geom.shape, dtype=bool)
    ptv[13:19, 13:19, 13:19] = True
    return Phantom(
        "water",
        CtVolume(geom, hu),
        [Structure("ptv", "ptv", ptv, target_dose_gy=100.0)],
    )


@pytest.fixture(scope="session")
def symmetric_phantom():
    """Water cube with a centered spherical PTV, invariant under z-axis
    quarter turns; used for the rotation-equivariance checks."""
    geom = GridGeometry((32, 32, 32), (4.0, 4.0, 4.0))
    hu = np.zeros(geom.shape, dtype=np.float32)
    ptv = _sphere_mask(geom, geom.center_mm, 20.0)
    return Phantom(
        "sym",
        CtVolume(geom, hu),
        [Structure("ptv", "ptv", ptv, target_dose_gy=100.0)],
    )


@pytest.fixture()
def mini_phantom():
    """Tiny hand-checkable case: 10-voxel PTV plus a one-voxel rectum."""
    geom = GridGeometry((16, 16, 16), (2.0, 2.0, 2.0))
    hu = np.zeros(geom.shape, dtype=np.float32)
    ptv = np.zeros(geom.shape, dtype=bool)
    ptv[8, 8, 3:13] = True  # exactly 10 voxels
    rectum = np.zeros(geom.shape, dtype=bool)
    rectum[8, 12, 8] = True
    return Phantom(
        "mini",
        CtVolume(geom, hu),
        [
            Structure("ptv", "ptv", ptv, target_dose_gy=100.0),
            Structure("rectum", "oar", rectum, dose_limit_gy=50.0),
        ],
    )
