"""Uniform-random baseline planner."""

from __future__ import annotations

import numpy as np

from ..dose import BeamSpec, Plan

__all__ = ["random_plan"]


def random_plan(rng: np.random.Generator, max_beams: int = 5) -> Plan:
    """Draw a plan with 1..max_beams beams at i.i.d. uniform angles.

    Angles colliding at 1 degree resolution are resampled so the plan
    constructor's distinctness rule always holds.
    """
    if max_beams < 1:
        raise ValueError(f"max_beams must be >= 1, got {max_beams!r}")
    count = int(rng.integers(1, max_beams + 1))
    angles: list[float] = []
    taken: set[int] = set()
    while len(angles) < count:
        angle = float(rng.uniform(0.0, 360.0))
        key = round(angle) % 360
        if key not in taken:
            taken.add(key)
            angles.append(angle)
    return Plan([BeamSpec(a) for a in angles])
