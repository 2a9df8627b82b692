"""Episodic beam-angle planning environment and its reward.

The reward of a dose distribution is a Gaussian credit for every PTV voxel
near its target dose minus a linear penalty for every OAR voxel above its
limit. Episodes add one beam per step from a discrete set of gantry angles;
rewards are dense deltas of the plan score, so they telescope to the final
score over an episode.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .dose import BeamSpec, EngineConfig, Plan, compute_beam_dose, compute_plan_dose
from .phantom import AIR_HU, Phantom, mask_centroid_mm

__all__ = [
    "EnvConfig",
    "RewardBreakdown",
    "EnvState",
    "score_plan",
    "PlanScorer",
    "PlanningEnv",
    "render_state",
    "render_slices_for_prompt",
    "encode_png",
    "save_prompt_images",
]


@dataclass(frozen=True)
class EnvConfig:
    """Reward and episode parameters.

    ``prescription_gy`` is both the normalization level of plan doses and the
    per-voxel PTV target in the reward. ``homogeneity_width_gy`` is the width
    of the Gaussian credit around the target: 1 Gy keeps credit meaningful
    only for voxels essentially at prescription.
    """

    prescription_gy: float = 100.0
    r_max: float = 1.0
    penalty: float = 1.0
    homogeneity_width_gy: float = 1.0
    max_beams: int = 5
    angle_bins: int = 36
    normalize_to_prescription: bool = True

    def __post_init__(self):
        for name in ("prescription_gy", "r_max", "penalty", "homogeneity_width_gy"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v!r}")
        if int(self.max_beams) < 1:
            raise ValueError(f"max_beams must be >= 1, got {self.max_beams!r}")
        if int(self.angle_bins) < 2:
            raise ValueError(f"angle_bins must be >= 2, got {self.angle_bins!r}")
        object.__setattr__(self, "max_beams", int(self.max_beams))
        object.__setattr__(self, "angle_bins", int(self.angle_bins))


@dataclass(frozen=True)
class RewardBreakdown:
    """Score split into the PTV credit and per-OAR penalties."""

    ptv_term: float
    oar_terms: dict[str, float]
    total: float


def score_plan(dose_values, phantom: Phantom, cfg: EnvConfig = EnvConfig()) -> RewardBreakdown:
    """Score a dose distribution against the phantom's structures.

    PTV voxels earn ``r_max * exp(-((T - D) / width)^2)``; every OAR voxel
    contributes ``penalty * max(0, D - limit)``. OAR penalties are summed in
    sorted-name order so the total is invariant to structure list order.
    """
    values = dose_values.values if hasattr(dose_values, "values") else np.asarray(dose_values)
    if values.shape != phantom.geometry.shape:
        raise ValueError(f"dose shape {values.shape} does not match phantom dims")

    z = (cfg.prescription_gy - values[phantom.ptv.mask]) / cfg.homogeneity_width_gy
    ptv_term = float(cfg.r_max * np.exp(-(z * z)).sum())

    oar_terms = {}
    for s in phantom.oars:
        excess = np.maximum(0.0, values[s.mask] - s.dose_limit_gy)
        oar_terms[s.name] = float(cfg.penalty * excess.sum())

    total = ptv_term - sum(oar_terms[name] for name in sorted(oar_terms))
    return RewardBreakdown(ptv_term, oar_terms, total)


class PlanScorer:
    """Caches unit-weight beam doses per angle and scores plans on top.

    One scorer per (phantom, configs); the cache makes repeated plan
    evaluations cheap because a 36-bin discrete agent can only ever request
    36 distinct beams.
    """

    def __init__(
        self,
        phantom: Phantom,
        env_cfg: EnvConfig = EnvConfig(),
        engine_cfg: EngineConfig = EngineConfig(),
    ):
        self.phantom = phantom
        self.env_cfg = env_cfg
        self.engine_cfg = engine_cfg
        self._cache: dict[float, np.ndarray] = {}

    def unit_beam_dose(self, angle_deg: float) -> np.ndarray:
        """Read-only unit-weight dose grid for one gantry angle."""
        key = float(angle_deg) % 360.0
        values = self._cache.get(key)
        if values is None:
            values = compute_beam_dose(
                self.phantom, BeamSpec(key, 1.0), self.engine_cfg
            ).values
            values.setflags(write=False)
            self._cache[key] = values
        return values

    def plan_dose(self, plan: Plan):
        return compute_plan_dose(
            self.phantom,
            plan,
            self.engine_cfg,
            prescription_gy=self.env_cfg.prescription_gy,
            normalize=self.env_cfg.normalize_to_prescription,
            unit_beam_dose=self.unit_beam_dose,
        )

    def score_angles(self, angles_deg) -> tuple[np.ndarray, RewardBreakdown, bool]:
        """Dose, reward breakdown, and normalization flag for a list of angles."""
        plan = Plan([BeamSpec(a) for a in angles_deg])
        result = self.plan_dose(plan)
        breakdown = score_plan(result.dose.values, self.phantom, self.env_cfg)
        return result.dose.values, breakdown, result.normalized


@dataclass(frozen=True)
class EnvState:
    """Immutable episode snapshot; ``step`` returns a fresh one."""

    chosen_angles: tuple[float, ...]
    steps_taken: int
    dose: np.ndarray
    last_score: float
    done: bool
    seed: int


class PlanningEnv:
    """Gym-style episodic environment over a fixed phantom.

    Actions 0..angle_bins-1 add the beam at ``action * 360 / angle_bins``
    degrees; action ``angle_bins`` is STOP. Invalid actions (an angle already
    chosen, or STOP before any beam) leave the plan untouched and pay a flat
    -1; every call consumes a step, so an episode lasts at most ``max_beams``
    steps.
    """

    INVALID_ACTION_REWARD = -1.0

    def __init__(
        self,
        phantom: Phantom,
        cfg: EnvConfig = EnvConfig(),
        engine_cfg: EngineConfig = EngineConfig(),
    ):
        self.phantom = phantom
        self.cfg = cfg
        self.scorer = PlanScorer(phantom, cfg, engine_cfg)

    @property
    def n_actions(self) -> int:
        return self.cfg.angle_bins + 1

    @property
    def stop_action(self) -> int:
        return self.cfg.angle_bins

    def action_angle(self, action: int) -> float:
        return float(action) * 360.0 / self.cfg.angle_bins

    def reset(self, seed: int = 0) -> EnvState:
        dose = np.zeros(self.phantom.geometry.dims, dtype=np.float64)
        score = score_plan(dose, self.phantom, self.cfg).total
        return EnvState(
            chosen_angles=(),
            steps_taken=0,
            dose=dose,
            last_score=score,
            done=False,
            seed=int(seed),
        )

    def step(self, state: EnvState, action: int) -> tuple[EnvState, float, bool]:
        """Apply one action; returns (next_state, reward_delta, done)."""
        if state.done:
            raise ValueError("episode is over; call reset")
        action = int(action)
        if not 0 <= action <= self.stop_action:
            raise ValueError(f"action must be in [0, {self.stop_action}], got {action}")

        steps = state.steps_taken + 1
        out_of_steps = steps >= self.cfg.max_beams

        if action == self.stop_action:
            if not state.chosen_angles:
                next_state = replace(state, steps_taken=steps, done=out_of_steps)
                return next_state, self.INVALID_ACTION_REWARD, next_state.done
            next_state = replace(state, steps_taken=steps, done=True)
            return next_state, 0.0, True

        angle = self.action_angle(action)
        if any(round(angle) % 360 == round(a) % 360 for a in state.chosen_angles):
            next_state = replace(state, steps_taken=steps, done=out_of_steps)
            return next_state, self.INVALID_ACTION_REWARD, next_state.done

        angles = state.chosen_angles + (angle,)
        dose, breakdown, _ = self.scorer.score_angles(angles)
        reward_delta = breakdown.total - state.last_score
        next_state = EnvState(
            chosen_angles=angles,
            steps_taken=steps,
            dose=dose,
            last_score=breakdown.total,
            done=out_of_steps,
            seed=state.seed,
        )
        return next_state, reward_delta, next_state.done

    def render_state(self, state: EnvState, dims: tuple[int, int, int] = (16, 16, 16)) -> np.ndarray:
        return render_state(self.phantom, state.dose, self.cfg.prescription_gy, dims)

    def render_slices(self, state: EnvState, size: int = 256):
        return render_slices_for_prompt(
            self.phantom, state.dose, self.cfg.prescription_gy, size=size
        )


# ---------------------------------------------------------------------------
# Observation and prompt rendering.
# ---------------------------------------------------------------------------


def _nearest_indices(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out) * n_in) // n_out


def render_state(
    phantom: Phantom,
    dose_values: np.ndarray,
    prescription_gy: float,
    dims: tuple[int, int, int] = (16, 16, 16),
) -> np.ndarray:
    """Two-channel float32 observation, nearest-neighbor downsampled.

    Channel 0 is CT mapped from [-1000, 1000] HU to [0, 1]; channel 1 is dose
    over prescription mapped from [0, 2] to [0, 1]. Air at zero dose is
    exactly (0, 0).
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"downsample dims must be positive, got {dims!r}")
    ixs = [_nearest_indices(dims[a], phantom.geometry.dims[a]) for a in range(3)]
    sub = np.ix_(*ixs)

    ct = np.clip((phantom.ct.hu.astype(np.float64) + 1000.0) / 2000.0, 0.0, 1.0)
    dose = np.clip(np.asarray(dose_values) / prescription_gy, 0.0, 2.0) / 2.0
    out = np.stack([ct[sub], dose[sub]]).astype(np.float32)
    return out


# Perceptual low-to-high dose ramp (dark violet through teal to yellow),
# sampled at 11 even anchors and interpolated linearly.
_DOSE_RAMP = np.array(
    [
        [0.267004, 0.004874, 0.329415],
        [0.282623, 0.140926, 0.457517],
        [0.253935, 0.265254, 0.529983],
        [0.206756, 0.371758, 0.553117],
        [0.163625, 0.471133, 0.558148],
        [0.127568, 0.566949, 0.550556],
        [0.134692, 0.658636, 0.517649],
        [0.266941, 0.748751, 0.440573],
        [0.477504, 0.821444, 0.318195],
        [0.741388, 0.873449, 0.149561],
        [0.993248, 0.906157, 0.143936],
    ]
)

_CONTOUR_COLORS = {
    "ptv": np.array([255, 64, 64], dtype=np.float64),
    "oar": np.array([80, 200, 255], dtype=np.float64),
}


def _ramp(frac: np.ndarray) -> np.ndarray:
    anchors = np.linspace(0.0, 1.0, len(_DOSE_RAMP))
    return np.stack(
        [np.interp(frac, anchors, _DOSE_RAMP[:, c]) for c in range(3)], axis=-1
    )


def _outline(mask2d: np.ndarray) -> np.ndarray:
    """Boundary pixels: mask cells with at least one off-mask 4-neighbor."""
    interior = mask2d.copy()
    interior[1:, :] &= mask2d[:-1, :]
    interior[:-1, :] &= mask2d[1:, :]
    interior[:, 1:] &= mask2d[:, :-1]
    interior[:, :-1] &= mask2d[:, 1:]
    return mask2d & ~interior


def _resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    rows = _nearest_indices(size, img.shape[0])
    cols = _nearest_indices(size, img.shape[1])
    return img[np.ix_(rows, cols)]


def render_slices_for_prompt(
    phantom: Phantom,
    dose_values: np.ndarray,
    prescription_gy: float,
    size: int = 256,
) -> list[tuple[str, np.ndarray]]:
    """Axial, coronal, and sagittal mid-PTV slices as RGB uint8 arrays.

    CT in grayscale, dose as a translucent perceptual ramp (opacity scales
    with dose, so a zero-dose state shows bare anatomy), structure outlines
    on top: red for the PTV, cyan for OARs.
    """
    geom = phantom.geometry
    centroid = mask_centroid_mm(geom, phantom.ptv.mask)
    center_idx = [
        int(np.clip(round((centroid[a] - geom.origin_mm[a]) / geom.spacing_mm[a]), 0, geom.dims[a] - 1))
        for a in range(3)
    ]

    hu = phantom.ct.hu.astype(np.float64)
    dose = np.asarray(dose_values, dtype=np.float64)

    # (label, slicer, transpose) per view; rows are flipped so +y (anterior)
    # and +z (superior) point up in the images.
    views = [
        ("axial", lambda v: v[:, :, center_idx[2]].T[::-1, :]),
        ("coronal", lambda v: v[:, center_idx[1], :].T[::-1, :]),
        ("sagittal", lambda v: v[center_idx[0], :, :].T[::-1, :]),
    ]

    images = []
    for label, take in views:
        gray = np.clip((take(hu) + 1000.0) / 2000.0, 0.0, 1.0)
        frac = np.clip(take(dose) / (1.1 * prescription_gy), 0.0, 1.0)
        alpha = 0.6 * np.sqrt(np.clip(take(dose) / prescription_gy, 0.0, 1.0))

        rgb = gray[..., None] * (1.0 - alpha[..., None]) + _ramp(frac) * alpha[..., None]
        rgb = np.clip(rgb, 0.0, 1.0) * 255.0

        for s in phantom.structures:
            edge = _outline(take(s.mask).astype(bool))
            rgb[edge] = _CONTOUR_COLORS["ptv" if s.kind == "ptv" else "oar"]

        images.append((label, _resize_nearest(rgb, size).astype(np.uint8)))
    return images


def encode_png(rgb: np.ndarray) -> bytes:
    """Deterministic PNG bytes for an RGB uint8 array."""
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_prompt_images(images, directory, case_label: str) -> list[str]:
    """Write ``{case}_{plane}.png`` files; returns the paths written."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for label, rgb in images:
        path = directory / f"{case_label}_{label}.png"
        path.write_bytes(encode_png(rgb))
        paths.append(str(path))
    return paths
