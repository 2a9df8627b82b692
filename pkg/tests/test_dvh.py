"""DVH curves cross-checked against a brute-force threshold count."""

import numpy as np
import pytest

from beamopt.evaluation import dvh


def test_dvh_matches_brute_force_counting():
    rng = np.random.default_rng(17)
    for _ in range(20):
        dose = rng.uniform(0.0, 110.0, size=(9, 9, 9))
        mask = rng.random((9, 9, 9)) < 0.3
        if not mask.any():
            continue
        curve = dvh(dose, mask, "s", max_dose_gy=120.0, bins=61)
        inside = dose[mask]
        for edge, frac in zip(curve.dose_gy, curve.fractions):
            assert frac == np.mean(inside >= edge)  # exact, not approximate


def test_dvh_shape_and_grid():
    dose = np.zeros((4, 4, 4))
    mask = np.ones((4, 4, 4), dtype=bool)
    curve = dvh(dose, mask, "ptv", max_dose_gy=100.0, bins=11)
    assert curve.structure == "ptv"
    assert np.array_equal(curve.dose_gy, np.linspace(0.0, 100.0, 11))
    assert curve.fractions.shape == (11,)


def test_dvh_starts_full_and_never_rises():
    rng = np.random.default_rng(18)
    dose = rng.uniform(0.0, 80.0, size=(8, 8, 8))
    mask = np.ones((8, 8, 8), dtype=bool)
    curve = dvh(dose, mask, "s", max_dose_gy=100.0)
    assert curve.fractions[0] == 1.0  # every voxel receives at least 0 Gy
    assert np.all(np.diff(curve.fractions) <= 0.0)
    assert curve.fractions[-1] == 0.0  # nothing reaches the 100 Gy edge


def test_dvh_uniform_dose_is_a_step():
    dose = np.full((5, 5, 5), 50.0)
    mask = np.ones((5, 5, 5), dtype=bool)
    curve = dvh(dose, mask, "s", max_dose_gy=100.0, bins=101)
    expected = np.where(curve.dose_gy <= 50.0, 1.0, 0.0)
    assert np.array_equal(curve.fractions, expected)


def test_dvh_zero_dose():
    curve = dvh(np.zeros((3, 3, 3)), np.ones((3, 3, 3), bool), "s", 60.0, bins=7)
    assert curve.fractions[0] == 1.0
    assert np.all(curve.fractions[1:] == 0.0)


def test_dvh_validation():
    dose = np.zeros((3, 3, 3))
    with pytest.raises(ValueError, match="empty mask"):
        dvh(dose, np.zeros((3, 3, 3), bool), "rectum", 60.0)
    with pytest.raises(ValueError, match="bins"):
        dvh(dose, np.ones((3, 3, 3), bool), "s", 60.0, bins=1)
    with pytest.raises(ValueError, match="max_dose_gy"):
        dvh(dose, np.ones((3, 3, 3), bool), "s", 0.0)
