"""Deterministic surrogate dose engine.

Parallel beams in the axial plane with exponential primary attenuation along
jitted (or numpy) ray traversals. The model is intentionally simple: no
scatter, no buildup, no divergence. It is fast enough to sit inside an
episodic planning loop and faithful enough that beam geometry matters.

Angle convention: 0 degrees enters from +y travelling toward -y; angles grow
clockwise when viewed from +z, so 90 degrees enters from +x.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import BACKEND_NAME, deposit_beam, traverse_ray as _kernel_traverse
from .phantom import GridGeometry, ManifestError, Phantom, SidecarSizeError, hu_to_attenuation

__all__ = [
    "EngineConfig",
    "BeamSpec",
    "Plan",
    "DoseGrid",
    "PlanDoseResult",
    "trace_ray",
    "beam_direction",
    "compute_beam_dose",
    "compute_plan_dose",
    "save_dose",
    "load_dose",
    "BACKEND_NAME",
]


@dataclass(frozen=True)
class EngineConfig:
    """Knobs of the surrogate engine; defaults suit 4 mm desk-scale grids."""

    mu_water_per_mm: float = 0.005
    ray_spacing_mm: float = 2.0
    beam_margin_mm: float = 8.0
    penumbra_sigma_mm: float = 0.0

    def __post_init__(self):
        for name in ("mu_water_per_mm", "ray_spacing_mm", "beam_margin_mm"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0) and not (name == "beam_margin_mm" and v == 0):
                raise ValueError(f"{name} must be positive, got {v!r}")
        if not (np.isfinite(self.penumbra_sigma_mm) and self.penumbra_sigma_mm >= 0):
            raise ValueError(f"penumbra_sigma_mm must be >= 0, got {self.penumbra_sigma_mm!r}")


@dataclass(frozen=True)
class BeamSpec:
    """One parallel beam: gantry angle in degrees and a relative weight."""

    angle_deg: float
    weight: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.angle_deg):
            raise ValueError(f"angle_deg must be finite, got {self.angle_deg!r}")
        if not (np.isfinite(self.weight) and self.weight > 0):
            raise ValueError(f"weight must be positive, got {self.weight!r}")
        object.__setattr__(self, "angle_deg", float(self.angle_deg) % 360.0)
        object.__setattr__(self, "weight", float(self.weight))


@dataclass(frozen=True)
class Plan:
    """An ordered set of beams; angles must be distinct at 1 degree resolution."""

    beams: tuple[BeamSpec, ...]

    def __init__(self, beams):
        beams = tuple(beams)
        if not beams:
            raise ValueError("a plan needs at least one beam")
        bins = [round(b.angle_deg) % 360 for b in beams]
        if len(set(bins)) != len(bins):
            raise ValueError(f"beam angles collide at 1 degree resolution: {[b.angle_deg for b in beams]}")
        object.__setattr__(self, "beams", beams)

    @property
    def angles_deg(self) -> tuple[float, ...]:
        return tuple(b.angle_deg for b in self.beams)


@dataclass
class DoseGrid:
    """Dose values (Gy) on a grid; non-negative by construction."""

    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != self.geometry.shape:
            raise ValueError(
                f"dose shape {self.values.shape} does not match dims {self.geometry.dims}"
            )
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("dose values must be finite and non-negative")


@dataclass
class PlanDoseResult:
    """Plan dose plus how (and whether) it was rescaled to the prescription."""

    dose: DoseGrid
    scale: float
    normalized: bool


def _snap(c: float) -> float:
    """Round direction components sitting within 1e-12 of 0 or +-1.

    Keeps right-angle beams exactly axis-aligned so a 90-degree gantry turn
    traverses the rotated voxel pattern instead of a nearly-rotated one.
    """
    if abs(c) < 1e-12:
        return 0.0
    if abs(c - 1.0) < 1e-12:
        return 1.0
    if abs(c + 1.0) < 1e-12:
        return -1.0
    return c


def beam_direction(angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Unit propagation direction and in-plane lateral axis for a gantry angle.

    Returns ``(direction, lateral)``: the source sits along
    ``(sin a, cos a, 0)`` and the beam propagates opposite to it; ``lateral``
    is the in-plane axis perpendicular to the beam used to fan rays out.
    """
    a = math.radians(angle_deg)
    sin, cos = _snap(math.sin(a)), _snap(math.cos(a))
    direction = np.array([-sin, -cos, 0.0])
    lateral = np.array([cos, -sin, 0.0])
    return direction, lateral


def trace_ray(
    geometry: GridGeometry, entry_point_mm, direction
) -> tuple[np.ndarray, np.ndarray]:
    """Voxels crossed by a ray: (indices (N, 3), segment lengths in mm).

    ``direction`` must be unit length to 1e-9; the entry point may lie
    anywhere (outside the grid is fine, the ray is clipped). Indices come
    back strictly ordered along the ray; lengths along any chord sum to the
    geometric chord length.
    """
    direction = np.asarray(direction, dtype=np.float64)
    norm = float(np.linalg.norm(direction))
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"direction must be unit length, |d| = {norm!r}")
    lo, _ = geometry.bounds_mm()
    return _kernel_traverse(
        np.asarray(entry_point_mm, dtype=np.float64),
        direction,
        lo,
        np.asarray(geometry.spacing_mm),
        np.asarray(geometry.dims, dtype=np.int64),
    )


def _ptv_bbox_mm(phantom: Phantom) -> tuple[np.ndarray, np.ndarray]:
    idx = np.argwhere(phantom.ptv.mask)
    origin = np.asarray(phantom.geometry.origin_mm)
    spacing = np.asarray(phantom.geometry.spacing_mm)
    lo = origin + idx.min(axis=0) * spacing - spacing / 2.0
    hi = origin + idx.max(axis=0) * spacing + spacing / 2.0
    return lo, hi


def _ray_starts(phantom: Phantom, cfg: EngineConfig, direction, lateral) -> np.ndarray:
    """Entry points for the parallel ray fan covering the PTV plus margin."""
    geom = phantom.geometry
    bb_lo, bb_hi = _ptv_bbox_mm(phantom)
    center = (bb_lo + bb_hi) / 2.0

    # Lateral half-width: project the four axial bbox corners onto the
    # lateral axis. Offsets are centered so the fan is symmetric about the
    # beam axis (and maps onto itself under quarter-turn rotations).
    corners = np.array(
        [
            [bb_lo[0], bb_lo[1]],
            [bb_lo[0], bb_hi[1]],
            [bb_hi[0], bb_lo[1]],
            [bb_hi[0], bb_hi[1]],
        ]
    )
    rel = corners - center[:2][None, :]
    half_width = np.abs(rel @ lateral[:2]).max() + cfg.beam_margin_mm
    n_lat = max(1, int(math.ceil(2.0 * half_width / cfg.ray_spacing_mm)))
    offsets = (np.arange(n_lat) - (n_lat - 1) / 2.0) * cfg.ray_spacing_mm

    zs = geom.axis_centers_mm(2)
    zs = zs[(zs >= bb_lo[2] - cfg.beam_margin_mm) & (zs <= bb_hi[2] + cfg.beam_margin_mm)]

    glo, ghi = geom.bounds_mm()
    back_off = float(np.linalg.norm(ghi - glo)) + half_width + 1.0

    starts = np.empty((len(offsets) * len(zs), 3), dtype=np.float64)
    k = 0
    for s in offsets:
        px = center[0] + s * lateral[0] - back_off * direction[0]
        py = center[1] + s * lateral[1] - back_off * direction[1]
        for z in zs:
            starts[k, 0] = px
            starts[k, 1] = py
            starts[k, 2] = z
            k += 1
    return starts


def _blur_in_plane(values: np.ndarray, geometry: GridGeometry, sigma_mm: float) -> np.ndarray:
    """Separable x/y Gaussian with zero padding; kernel truncated at 3 sigma."""
    out = values
    for axis in (0, 1):
        spacing = geometry.spacing_mm[axis]
        radius = max(1, int(math.ceil(3.0 * sigma_mm / spacing)))
        taps = np.exp(-0.5 * ((np.arange(-radius, radius + 1) * spacing) / sigma_mm) ** 2)
        taps /= taps.sum()
        acc = np.zeros_like(out)
        n = out.shape[axis]
        for j, w in enumerate(taps):
            shift = j - radius
            src = slice(max(0, -shift), min(n, n - shift))
            dst = slice(max(0, shift), min(n, n + shift))
            sl_src = [slice(None)] * 3
            sl_dst = [slice(None)] * 3
            sl_src[axis] = src
            sl_dst[axis] = dst
            acc[tuple(sl_dst)] += w * out[tuple(sl_src)]
        out = acc
    return out


def _beam_inputs(phantom: Phantom, beam: BeamSpec, cfg: EngineConfig):
    """Kernel arguments for one beam, shared by the engine and the benchmark."""
    geom = phantom.geometry
    if cfg.ray_spacing_mm > min(geom.spacing_mm) + 1e-12:
        raise ValueError(
            f"ray_spacing_mm={cfg.ray_spacing_mm} exceeds the finest voxel "
            f"spacing {min(geom.spacing_mm)}; rays would skip voxels"
        )
    direction, lateral = beam_direction(beam.angle_deg)
    starts = _ray_starts(phantom, cfg, direction, lateral)
    mu = hu_to_attenuation(phantom.ct.hu, cfg.mu_water_per_mm)
    lo, _ = geom.bounds_mm()
    ray_area = cfg.ray_spacing_mm * geom.spacing_mm[2]
    return mu, lo, np.asarray(geom.spacing_mm), starts, direction, beam.weight, ray_area


def compute_beam_dose(phantom: Phantom, beam: BeamSpec, cfg: EngineConfig = EngineConfig()) -> DoseGrid:
    """Dose grid of a single beam.

    Every ray deposits ``weight * mu * exp(-depth) * length / normalizer``
    per crossed voxel, where depth is the radiological depth upstream of the
    voxel and the normalizer is the fan's ray density per unit area, so
    refining ``ray_spacing_mm`` converges instead of inflating dose.
    """
    geom = phantom.geometry
    mu, lo, spacing, starts, direction, weight, ray_area = _beam_inputs(phantom, beam, cfg)
    dose = np.zeros(geom.dims, dtype=np.float64)
    deposit_beam(mu, lo, spacing, starts, direction, weight, ray_area, dose)
    if cfg.penumbra_sigma_mm > 0:
        dose = _blur_in_plane(dose, geom, cfg.penumbra_sigma_mm)
    return DoseGrid(geom, dose)


def compute_plan_dose(
    phantom: Phantom,
    plan: Plan,
    cfg: EngineConfig = EngineConfig(),
    prescription_gy: float | None = None,
    normalize: bool = True,
    unit_beam_dose=None,
) -> PlanDoseResult:
    """Summed plan dose, rescaled so the mean PTV dose hits the prescription.

    Beams are accumulated in ascending-angle order regardless of plan order,
    which makes the result bit-identical under permutations of ``plan.beams``.
    A plan whose unscaled PTV mean is zero cannot be normalized; it comes back
    unscaled with ``normalized=False``.

    ``unit_beam_dose`` lets callers supply cached unit-weight beam grids
    (``angle_deg -> values``); by default each beam is computed afresh.
    """
    if prescription_gy is None:
        prescription_gy = phantom.ptv.target_dose_gy
    if not (np.isfinite(prescription_gy) and prescription_gy > 0):
        raise ValueError(f"prescription_gy must be positive, got {prescription_gy!r}")

    total = np.zeros(phantom.geometry.dims, dtype=np.float64)
    for beam in sorted(plan.beams, key=lambda b: (b.angle_deg, b.weight)):
        if unit_beam_dose is None:
            total += compute_beam_dose(phantom, beam, cfg).values
        else:
            total += beam.weight * unit_beam_dose(beam.angle_deg)

    scale = 1.0
    normalized = False
    if normalize:
        ptv_mean = float(total[phantom.ptv.mask].mean())
        if ptv_mean > 0:
            scale = prescription_gy / ptv_mean
            total = total * scale
            normalized = True
    return PlanDoseResult(DoseGrid(phantom.geometry, total), scale, normalized)


# ---------------------------------------------------------------------------
# Dose serialization: same sidecar convention as phantoms.
# ---------------------------------------------------------------------------


def save_dose(
    result_or_grid,
    path_prefix: str | Path,
    prescription_gy: float | None = None,
    beam_angles_deg: list[float] | None = None,
) -> Path:
    """Write ``<prefix>.json`` + ``<prefix>.raw`` (little-endian float32)."""
    grid = result_or_grid.dose if isinstance(result_or_grid, PlanDoseResult) else result_or_grid
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": 1,
        "dims": list(grid.geometry.dims),
        "spacing_mm": list(grid.geometry.spacing_mm),
        "origin_mm": list(grid.geometry.origin_mm),
        "dose_file": prefix.name + ".raw",
        "prescription_gy": prescription_gy,
        "beam_angles_deg": beam_angles_deg,
    }
    raw = np.asarray(grid.values, dtype="<f4").ravel(order="F").tobytes()
    Path(str(prefix) + ".raw").write_bytes(raw)
    Path(str(prefix) + ".json").write_text(json.dumps(manifest, indent=2) + "\n")
    return prefix


def load_dose(path_prefix: str | Path) -> tuple[DoseGrid, dict]:
    """Read a dose grid written by :func:`save_dose`; returns (grid, manifest)."""
    prefix = Path(path_prefix)
    try:
        manifest = json.loads(Path(str(prefix) + ".json").read_text())
    except OSError as exc:
        raise ManifestError(f"cannot read dose manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"dose manifest is not valid JSON: {exc}") from exc
    dims = tuple(int(d) for d in manifest["dims"])
    geom = GridGeometry(
        dims,
        tuple(float(s) for s in manifest["spacing_mm"]),
        tuple(float(o) for o in manifest["origin_mm"]),
    )
    raw = (prefix.parent / manifest["dose_file"]).read_bytes()
    n = dims[0] * dims[1] * dims[2]
    if len(raw) != 4 * n:
        raise SidecarSizeError(f"dose sidecar holds {len(raw)} bytes, expected {4 * n}")
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims, order="F")
    return DoseGrid(geom, values), manifest
