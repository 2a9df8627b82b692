"""CT phantoms for beam-angle planning experiments.

Synthetic pelvic phantoms on regular voxel grids: a water-equivalent body
ellipse, a spherical planning target, and the usual troublemakers around it
(rectum, bladder, femoral heads). Phantoms serialize to a directory holding a
JSON manifest plus raw little-endian sidecars so cases can be shared and
replayed byte-for-byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

AIR_HU = -1000.0
BONE_HU = 700.0

#: Default OAR dose limits in Gy.
DEFAULT_DOSE_LIMITS = {
    "rectum": 50.0,
    "bladder": 65.0,
    "femoral_head_l": 45.0,
    "femoral_head_r": 45.0,
}

DEFAULT_TARGET_DOSE_GY = 100.0

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


class PhantomIOError(ValueError):
    """Base class for errors raised while reading a phantom directory."""


class ManifestError(PhantomIOError):
    """Manifest file missing, unparseable, or structurally wrong."""


class FormatVersionError(PhantomIOError):
    """Manifest declares a format_version this code does not understand."""


class SidecarSizeError(PhantomIOError):
    """Raw sidecar byte count disagrees with the manifest dims."""


@dataclass(frozen=True)
class GridGeometry:
    """Regular voxel grid: dims in voxels, spacing and origin in mm.

    ``origin_mm`` is the world position of the *center* of voxel (0, 0, 0);
    arrays over the grid are indexed ``[ix, iy, iz]``.
    """

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.dims) != 3:
            raise ValueError(f"dims must have three entries, got {self.dims!r}")
        dims = tuple(int(d) for d in self.dims)
        if any(d < 1 for d in dims):
            raise ValueError(f"dims must be positive, got {self.dims!r}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing_mm must be three positive reals, got {self.spacing_mm!r}")
        origin = tuple(float(o) for o in self.origin_mm)
        if len(origin) != 3 or not all(np.isfinite(o) for o in origin):
            raise ValueError(f"origin_mm must be three finite reals, got {self.origin_mm!r}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    @property
    def center_mm(self) -> np.ndarray:
        """World position of the grid center."""
        o = np.asarray(self.origin_mm)
        s = np.asarray(self.spacing_mm)
        n = np.asarray(self.dims)
        return o + (n - 1) / 2.0 * s

    def bounds_mm(self) -> tuple[np.ndarray, np.ndarray]:
        """Outer grid box (lo, hi): voxel faces, not centers."""
        o = np.asarray(self.origin_mm)
        s = np.asarray(self.spacing_mm)
        n = np.asarray(self.dims)
        lo = o - s / 2.0
        hi = o + (n - 0.5) * s
        return lo, hi

    def axis_centers_mm(self, axis: int) -> np.ndarray:
        """Voxel center coordinates along one axis (0=x, 1=y, 2=z)."""
        return self.origin_mm[axis] + np.arange(self.dims[axis]) * self.spacing_mm[axis]


@dataclass
class CtVolume:
    """HU values on a grid. Stored float32 to match the on-disk sidecar."""

    geometry: GridGeometry
    hu: np.ndarray

    def __post_init__(self):
        self.hu = np.ascontiguousarray(self.hu, dtype=np.float32)
        if self.hu.shape != self.geometry.shape:
            raise ValueError(
                f"HU array shape {self.hu.shape} does not match dims {self.geometry.dims}"
            )
        if not np.all(np.isfinite(self.hu)):
            raise ValueError("HU values must be finite")

    def body_mask(self) -> np.ndarray:
        """Voxels that are not air."""
        return self.hu > AIR_HU


def hu_to_attenuation(hu: np.ndarray | float, mu_water_per_mm: float) -> np.ndarray:
    """Map HU to a linear attenuation coefficient in 1/mm.

    Water (0 HU) maps to ``mu_water_per_mm``, air (-1000 HU) to zero, and the
    mapping is linear in between and above, floored at zero so nothing ever
    amplifies a ray.
    """
    if not (mu_water_per_mm > 0 and np.isfinite(mu_water_per_mm)):
        raise ValueError(f"mu_water_per_mm must be positive, got {mu_water_per_mm!r}")
    hu = np.asarray(hu, dtype=np.float64)
    if not np.all(np.isfinite(hu)):
        raise ValueError("HU values must be finite")
    return mu_water_per_mm * np.maximum(0.0, 1.0 + hu / 1000.0)


@dataclass
class Structure:
    """A named region of interest: the planning target or an organ at risk."""

    name: str
    kind: str
    mask: np.ndarray
    dose_limit_gy: float | None = None
    target_dose_gy: float | None = None

    def __post_init__(self):
        if not self.name or not all(c.isalnum() or c in "_-" for c in self.name):
            raise ValueError(f"structure name must be filename-safe, got {self.name!r}")
        if self.kind not in ("ptv", "oar"):
            raise ValueError(f"kind must be 'ptv' or 'oar', got {self.kind!r}")
        self.mask = np.ascontiguousarray(np.asarray(self.mask, dtype=bool))
        if self.kind == "ptv":
            if self.target_dose_gy is None or not self.target_dose_gy > 0:
                raise ValueError(f"PTV {self.name!r} needs a positive target_dose_gy")
        else:
            if self.dose_limit_gy is None or not self.dose_limit_gy > 0:
                raise ValueError(f"OAR {self.name!r} needs a positive dose_limit_gy")

    @property
    def voxel_count(self) -> int:
        return int(self.mask.sum())


@dataclass
class Phantom:
    """A CT volume plus its structure set. Exactly one PTV, any number of OARs."""

    label: str
    ct: CtVolume
    structures: list[Structure] = field(default_factory=list)

    def __post_init__(self):
        names = [s.name for s in self.structures]
        if len(set(names)) != len(names):
            raise ValueError(f"structure names must be unique, got {names}")
        ptvs = [s for s in self.structures if s.kind == "ptv"]
        if len(ptvs) != 1:
            raise ValueError(f"phantom needs exactly one PTV, found {len(ptvs)}")
        shape = self.ct.geometry.shape
        for s in self.structures:
            if s.mask.shape != shape:
                raise ValueError(f"mask shape {s.mask.shape} for {s.name!r} does not match dims {shape}")
            if s.voxel_count == 0:
                raise ValueError(f"structure {s.name!r} has an empty mask")
        ptv = ptvs[0]
        for s in self.structures:
            if s.kind == "oar" and np.any(s.mask & ptv.mask):
                raise ValueError(f"OAR {s.name!r} overlaps the PTV")

    @property
    def geometry(self) -> GridGeometry:
        return self.ct.geometry

    @property
    def ptv(self) -> Structure:
        return next(s for s in self.structures if s.kind == "ptv")

    @property
    def oars(self) -> list[Structure]:
        return [s for s in self.structures if s.kind == "oar"]

    def structure(self, name: str) -> Structure:
        for s in self.structures:
            if s.name == name:
                return s
        raise KeyError(name)


def mask_centroid_mm(geometry: GridGeometry, mask: np.ndarray) -> np.ndarray:
    """Center of mass of a voxel mask in world coordinates."""
    idx = np.argwhere(mask)
    if idx.size == 0:
        raise ValueError("cannot take the centroid of an empty mask")
    centers = np.asarray(geometry.origin_mm) + idx * np.asarray(geometry.spacing_mm)
    return centers.mean(axis=0)


def _sphere_mask(xs, ys, zs, center, radius) -> np.ndarray:
    dx = xs - center[0]
    dy = ys - center[1]
    dz = zs - center[2]
    return dx * dx + dy * dy + dz * dz <= radius * radius


def generate_phantom(
    dims: tuple[int, int, int] = (32, 32, 32),
    spacing_mm: tuple[float, float, float] = (4.0, 4.0, 4.0),
    seed: int = 0,
    label: str | None = None,
) -> Phantom:
    """Build a synthetic pelvis: body ellipse, PTV sphere, four OARs.

    The seed jitters structure centers and radii by a few percent (centroids
    move by at most 10% of the body's minor radius) so a family of seeds makes
    a small case population. Construction is deterministic per seed.

    Parameters
    ----------
    dims : tuple of int
        Grid size in voxels; each entry must be at least 16.
    spacing_mm : tuple of float
        Voxel spacing. The default 4 mm keeps desk-scale runs quick.
    seed : int
        Case seed; ``seed=0`` with default dims is the standard case.
    label : str, optional
        Case label; defaults to ``pelvis-<seed>``.

    Raises
    ------
    ValueError
        If dims are below the minimum or a structure does not fit inside
        the body at the requested size (the message names the structure).
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 16 for d in dims):
        raise ValueError(f"dims must be at least 16 voxels per axis, got {dims}")
    spacing = tuple(float(s) for s in spacing_mm)

    # Center the world frame on the grid so the isocenter sits at the origin.
    origin = tuple(-(d - 1) / 2.0 * s for d, s in zip(dims, spacing))
    geom = GridGeometry(dims, spacing, origin)

    xs = geom.axis_centers_mm(0)[:, None, None]
    ys = geom.axis_centers_mm(1)[None, :, None]
    zs = geom.axis_centers_mm(2)[None, None, :]

    extent = np.asarray(dims) * np.asarray(spacing)
    semi_x = 0.45 * extent[0]
    semi_y = 0.40 * extent[1]
    body = (xs / semi_x) ** 2 + (ys / semi_y) ** 2 <= 1.0
    body = np.broadcast_to(body, dims).copy()
    body_minor_mm = min(semi_x, semi_y)

    rng = np.random.default_rng(seed)

    def jitter_center(base):
        # Component jitter of 5% of the minor body radius bounds the centroid
        # shift by sqrt(3)*5% < 10% of the body radius.
        return np.asarray(base, dtype=float) + rng.uniform(-0.05, 0.05, size=3) * body_minor_mm

    def jitter_radius(base):
        return float(base) * (1.0 + rng.uniform(-0.08, 0.08))

    r_ptv = jitter_radius(12.0)
    c_ptv = jitter_center((0.0, 0.0, 0.0))
    r_bla = jitter_radius(10.0)
    c_bla = jitter_center((0.0, r_ptv + 10.0 + 10.0, 0.0))
    r_rec = jitter_radius(8.0)
    c_rec = jitter_center((0.0, -(r_ptv + 8.0 + 10.0), 0.0))
    r_fem = jitter_radius(10.0)
    c_fml = jitter_center((-(r_ptv + 10.0 + 12.0), 0.0, 0.0))
    c_fmr = jitter_center((r_ptv + 10.0 + 12.0, 0.0, 0.0))

    masks = {
        "ptv": _sphere_mask(xs, ys, zs, c_ptv, r_ptv),
        "rectum": _sphere_mask(xs, ys, zs, c_rec, r_rec),
        "bladder": _sphere_mask(xs, ys, zs, c_bla, r_bla),
        "femoral_head_l": _sphere_mask(xs, ys, zs, c_fml, r_fem),
        "femoral_head_r": _sphere_mask(xs, ys, zs, c_fmr, r_fem),
    }
    for name, mask in masks.items():
        if not mask.any():
            raise ValueError(f"structure {name!r} does not fit: empty at dims {dims}")
        if np.any(mask & ~body):
            raise ValueError(f"structure {name!r} does not fit inside the body at dims {dims}")

    hu = np.full(dims, AIR_HU, dtype=np.float32)
    hu[body] = 0.0
    hu[masks["femoral_head_l"]] = BONE_HU
    hu[masks["femoral_head_r"]] = BONE_HU

    structures = [
        Structure("ptv", "ptv", masks["ptv"], target_dose_gy=DEFAULT_TARGET_DOSE_GY)
    ]
    for name in ("rectum", "bladder", "femoral_head_l", "femoral_head_r"):
        structures.append(
            Structure(name, "oar", masks[name], dose_limit_gy=DEFAULT_DOSE_LIMITS[name])
        )

    return Phantom(label or f"pelvis-{seed:03d}", CtVolume(geom, hu), structures)


# ---------------------------------------------------------------------------
# Serialization: manifest.json + raw little-endian sidecars, x-fastest order.
# ---------------------------------------------------------------------------


def _write_raw_f32(path: Path, values: np.ndarray) -> None:
    path.write_bytes(np.asarray(values, dtype="<f4").ravel(order="F").tobytes())


def _write_raw_mask(path: Path, mask: np.ndarray) -> None:
    path.write_bytes(np.asarray(mask, dtype=np.uint8).ravel(order="F").tobytes())


def save_phantom(phantom: Phantom, directory: str | Path) -> Path:
    """Write a phantom to ``directory`` (created if needed). Returns the path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    entries = []
    for s in phantom.structures:
        mask_file = f"{s.name}.mask.raw"
        entry: dict = {"name": s.name, "kind": s.kind, "mask_file": mask_file}
        if s.dose_limit_gy is not None:
            entry["dose_limit_gy"] = s.dose_limit_gy
        if s.target_dose_gy is not None:
            entry["target_dose_gy"] = s.target_dose_gy
        entries.append(entry)
        _write_raw_mask(directory / mask_file, s.mask)

    manifest = {
        "format_version": FORMAT_VERSION,
        "label": phantom.label,
        "dims": list(phantom.geometry.dims),
        "spacing_mm": list(phantom.geometry.spacing_mm),
        "origin_mm": list(phantom.geometry.origin_mm),
        "ct_file": "ct.raw",
        "structures": entries,
    }
    _write_raw_f32(directory / "ct.raw", phantom.ct.hu)
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def _require(manifest: dict, key: str, types) -> object:
    if key not in manifest:
        raise ManifestError(f"manifest is missing key {key!r}")
    value = manifest[key]
    if not isinstance(value, types):
        raise ManifestError(f"manifest key {key!r} has unexpected type {type(value).__name__}")
    return value


def _read_triple(manifest: dict, key: str, kind) -> tuple:
    value = _require(manifest, key, list)
    if len(value) != 3 or not all(isinstance(v, (int, float)) for v in value):
        raise ManifestError(f"manifest key {key!r} must be three numbers")
    return tuple(kind(v) for v in value)


def load_phantom(directory: str | Path) -> Phantom:
    """Read a phantom directory written by :func:`save_phantom`.

    HU values below -1000 are clamped on the way in. Raises
    :class:`ManifestError`, :class:`FormatVersionError`, or
    :class:`SidecarSizeError` depending on what is wrong with the input.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    try:
        text = manifest_path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read {manifest_path}: {exc}") from exc
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise ManifestError("manifest must be a JSON object")

    version = _require(manifest, "format_version", int)
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported format_version {version!r}")

    label = _require(manifest, "label", str)
    dims = _read_triple(manifest, "dims", int)
    spacing = _read_triple(manifest, "spacing_mm", float)
    origin = _read_triple(manifest, "origin_mm", float)
    geom = GridGeometry(dims, spacing, origin)
    n_voxels = dims[0] * dims[1] * dims[2]

    ct_file = _require(manifest, "ct_file", str)
    try:
        raw = (directory / ct_file).read_bytes()
    except OSError as exc:
        raise ManifestError(f"cannot read CT sidecar {ct_file!r}: {exc}") from exc
    if len(raw) != 4 * n_voxels:
        raise SidecarSizeError(
            f"CT sidecar {ct_file!r} holds {len(raw)} bytes, expected {4 * n_voxels}"
        )
    hu = np.frombuffer(raw, dtype="<f4").reshape(dims, order="F")
    hu = np.maximum(hu, np.float32(AIR_HU))

    structures = []
    for entry in _require(manifest, "structures", list):
        if not isinstance(entry, dict):
            raise ManifestError("structure entries must be JSON objects")
        name = _require(entry, "name", str)
        kind = _require(entry, "kind", str)
        mask_file = _require(entry, "mask_file", str)
        try:
            raw = (directory / mask_file).read_bytes()
        except OSError as exc:
            raise ManifestError(f"cannot read mask sidecar {mask_file!r}: {exc}") from exc
        if len(raw) != n_voxels:
            raise SidecarSizeError(
                f"mask sidecar {mask_file!r} holds {len(raw)} bytes, expected {n_voxels}"
            )
        flat = np.frombuffer(raw, dtype=np.uint8)
        if np.any(flat > 1):
            raise ManifestError(f"mask sidecar {mask_file!r} holds values other than 0/1")
        mask = flat.reshape(dims, order="F").astype(bool)
        structures.append(
            Structure(
                name,
                kind,
                mask,
                dose_limit_gy=entry.get("dose_limit_gy"),
                target_dose_gy=entry.get("target_dose_gy"),
            )
        )

    return Phantom(label, CtVolume(geom, hu), structures)
