"""Method comparison harness: run trials, collect DVHs, test significance.

Runs each configured planning method (random baseline, trained DQN, LLM
text-to-plan) for a fixed number of seeded trials on one phantom, scores
every produced plan with the shared reward, and writes a small report
directory: per-method reward tables, DVH curves of the best plan, the best
dose grid itself, and a stats.json with pairwise t tests and a one-way
ANOVA. Artifacts are deterministic for fixed inputs; reruns are
byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents.dqn import rollout
from .agents.qnet import QNetwork
from .agents.random_policy import random_plan
from .agents.text2plan import run_text_to_plan
from .dose import DoseGrid, EngineConfig, save_dose
from .env import EnvConfig, PlanningEnv, PlanScorer, score_plan
from .llm import ChatClientError
from .phantom import Phantom
from .stats import AnovaResult, one_way_anova, two_sample_t

__all__ = [
    "DvhCurve",
    "dvh",
    "EvalSettings",
    "TrialResult",
    "MethodOutcome",
    "ComparisonReport",
    "METHODS",
    "run_comparison",
    "write_report",
]

METHODS = ("random", "dqn", "text_to_plan")


@dataclass(frozen=True)
class DvhCurve:
    """Cumulative dose-volume histogram of one structure.

    ``fractions[i]`` is the fraction of structure volume receiving at least
    ``dose_gy[i]``; by construction it starts at 1.0 and is non-increasing.
    """

    structure: str
    dose_gy: np.ndarray
    fractions: np.ndarray


def dvh(dose_values: np.ndarray, mask: np.ndarray, structure: str,
        max_dose_gy: float, bins: int = 121) -> DvhCurve:
    """Cumulative DVH sampled at ``bins`` evenly spaced dose levels."""
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if max_dose_gy <= 0:
        raise ValueError(f"max_dose_gy must be positive, got {max_dose_gy!r}")
    doses = np.sort(np.asarray(dose_values, dtype=np.float64)[np.asarray(mask, dtype=bool)])
    if doses.size == 0:
        raise ValueError(f"structure {structure!r} has an empty mask")
    edges = np.linspace(0.0, float(max_dose_gy), bins)
    below = np.searchsorted(doses, edges, side="left")
    fractions = (doses.size - below) / doses.size
    return DvhCurve(structure, edges, fractions)


@dataclass(frozen=True)
class EvalSettings:
    """Scale and knobs of a comparison run."""

    trials_per_method: int = 30
    text2plan_iterations: int = 10
    parse_retries: int = 3
    dvh_bins: int = 121
    dvh_max_dose_factor: float = 1.2
    dqn_epsilon: float = 0.05

    def __post_init__(self):
        if self.trials_per_method < 2:
            raise ValueError("trials_per_method must be >= 2 for the t test")
        if self.text2plan_iterations < 1:
            raise ValueError("text2plan_iterations must be >= 1")
        if self.parse_retries < 0:
            raise ValueError("parse_retries must be >= 0")
        if self.dvh_bins < 2:
            raise ValueError("dvh_bins must be >= 2")
        if self.dvh_max_dose_factor <= 0:
            raise ValueError("dvh_max_dose_factor must be positive")
        if not 0.0 <= self.dqn_epsilon <= 1.0:
            raise ValueError("dqn_epsilon must be in [0, 1]")


@dataclass(frozen=True)
class TrialResult:
    trial: int
    seed: int
    reward: float
    angles_deg: tuple[float, ...]


@dataclass
class MethodOutcome:
    method: str
    skipped: bool = False
    skip_reason: str | None = None
    trials: list[TrialResult] = field(default_factory=list)
    best_trial: int | None = None
    best_dose: np.ndarray | None = None

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.trials], dtype=np.float64)


@dataclass
class ComparisonReport:
    phantom_label: str
    prescription_gy: float
    settings: EvalSettings
    outcomes: dict[str, MethodOutcome]
    anova: AnovaResult | None
    notes: str

    def ran(self) -> list[str]:
        return [m for m in METHODS if m in self.outcomes and not self.outcomes[m].skipped]


def _trial_seed(base_seed: int, method_index: int, trial: int) -> int:
    seq = np.random.SeedSequence([base_seed, method_index, trial])
    return int(seq.generate_state(1)[0])


def _score_or_zero(scorer: PlanScorer, phantom: Phantom, env_cfg: EnvConfig, angles):
    """Reward and dose for a list of angles; empty plans score the zero dose."""
    if angles:
        dose, breakdown, _ = scorer.score_angles(angles)
        return breakdown.total, dose
    dose = np.zeros(phantom.geometry.dims, dtype=np.float64)
    return score_plan(dose, phantom, env_cfg).total, dose


def run_comparison(
    phantom: Phantom,
    settings: EvalSettings = EvalSettings(),
    env_cfg: EnvConfig = EnvConfig(),
    engine_cfg: EngineConfig = EngineConfig(),
    qnet: QNetwork | None = None,
    client_factory=None,
    seed: int = 0,
    methods=METHODS,
    jobs: int = 1,
    progress=None,
) -> ComparisonReport:
    """Compare the selected planning methods on one phantom.

    ``qnet`` enables the dqn arm; ``client_factory`` (a callable taking a
    trial seed and returning a ChatClient) enables the text_to_plan arm.
    A method whose dependency is missing, or whose chat client fails, is
    marked skipped with a reason while the others still report. Per-trial
    seeds derive from (seed, canonical method index, trial), so selecting a
    subset of methods does not change the draws of the rest. ``jobs`` > 1
    runs the trials of a method in parallel threads; results are keyed by
    trial index, so the output is the same either way.
    """
    selected = [m for m in METHODS if m in set(methods)]
    unknown = sorted(set(methods) - set(METHODS))
    if unknown:
        raise ValueError(f"unknown method {unknown[0]!r}; choose from {list(METHODS)}")
    if not selected:
        raise ValueError("no methods selected")
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    scorer = PlanScorer(phantom, env_cfg, engine_cfg)
    outcomes: dict[str, MethodOutcome] = {}

    def _run_trial(method: str, method_index: int, trial: int):
        trial_seed = _trial_seed(seed, method_index, trial)
        if method == "random":
            rng = np.random.default_rng(trial_seed)
            plan = random_plan(rng, env_cfg.max_beams)
            angles = list(plan.angles_deg)
        elif method == "dqn":
            env = PlanningEnv(phantom, env_cfg, engine_cfg)
            env.scorer = scorer  # reuse the shared per-angle dose cache
            state, _ = rollout(
                env, qnet, qnet.input_dims,
                epsilon=settings.dqn_epsilon, seed=trial_seed,
            )
            angles = list(state.chosen_angles)
        else:
            client = client_factory(trial_seed)
            transcript = run_text_to_plan(
                phantom, client, env_cfg, engine_cfg,
                max_iterations=settings.text2plan_iterations,
                parse_retries=settings.parse_retries,
                scorer=scorer,
            )
            angles = list(transcript.best_angles or [])
        reward, dose = _score_or_zero(scorer, phantom, env_cfg, angles)
        return TrialResult(trial, trial_seed, reward, tuple(angles)), dose

    for method in selected:
        method_index = METHODS.index(method)
        outcome = MethodOutcome(method)
        outcomes[method] = outcome
        if method == "dqn" and qnet is None:
            outcome.skipped = True
            outcome.skip_reason = "no trained network provided"
            continue
        if method == "text_to_plan" and client_factory is None:
            outcome.skipped = True
            outcome.skip_reason = "no chat client configured"
            continue
        try:
            trials = range(settings.trials_per_method)
            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    results = list(
                        pool.map(lambda t: _run_trial(method, method_index, t), trials)
                    )
            else:
                results = [_run_trial(method, method_index, t) for t in trials]
            for result, dose in results:
                outcome.trials.append(result)
                if (
                    outcome.best_trial is None
                    or result.reward > outcome.trials[outcome.best_trial].reward
                ):
                    outcome.best_trial = result.trial
                    outcome.best_dose = dose
                if progress is not None:
                    progress(method, result.trial, result.reward)
        except ChatClientError as exc:
            outcome.skipped = True
            outcome.skip_reason = f"chat client failed: {exc}"
            outcome.trials.clear()
            outcome.best_trial = None
            outcome.best_dose = None

    ran = [m for m in selected if not outcomes[m].skipped]
    anova = one_way_anova([outcomes[m].rewards for m in ran]) if len(ran) >= 2 else None
    skipped = [m for m in selected if outcomes[m].skipped]
    notes = (
        f"Desk-scale comparison: {settings.trials_per_method} trials per method "
        f"on phantom {phantom.label}. A full study would use more trials per "
        f"arm and several phantoms; the statistics here are meant as a smoke "
        f"test of the pipeline, not a clinical claim."
    )
    if skipped:
        details = "; ".join(f"{m} ({outcomes[m].skip_reason})" for m in skipped)
        notes += f" Skipped methods: {details}."
    return ComparisonReport(
        phantom_label=phantom.label,
        prescription_gy=env_cfg.prescription_gy,
        settings=settings,
        outcomes=outcomes,
        anova=anova,
        notes=notes,
    )


def _fmt(value: float) -> str:
    # repr round-trips float64 exactly, which keeps reruns byte-identical.
    return repr(float(value))


def write_report(report: ComparisonReport, out_dir: str | Path, phantom: Phantom) -> dict:
    """Write the artifact files for a comparison; returns the stats payload.

    Layout under ``out_dir``:

    - rewards_{method}.csv, one row per trial
    - dvh_{method}_{structure}.csv for the best plan of each method
    - dose_{method}_best.json / .raw, the best plan's dose grid
    - stats.json with per-method summaries, pairwise tests, and the ANOVA
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    max_dose = report.settings.dvh_max_dose_factor * report.prescription_gy
    present = [m for m in METHODS if m in report.outcomes]

    for method in present:
        outcome = report.outcomes[method]
        if outcome.skipped:
            continue
        with open(out / f"rewards_{method}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["trial", "seed", "reward", "angles_deg"])
            for t in outcome.trials:
                writer.writerow(
                    [t.trial, t.seed, _fmt(t.reward), ";".join(_fmt(a) for a in t.angles_deg)]
                )
        if outcome.best_dose is None:
            continue
        best = report.outcomes[method].trials[outcome.best_trial]
        save_dose(
            DoseGrid(phantom.geometry, outcome.best_dose),
            out / f"dose_{method}_best",
            prescription_gy=report.prescription_gy,
            beam_angles_deg=list(best.angles_deg),
        )
        for structure in [phantom.ptv] + list(phantom.oars):
            curve = dvh(
                outcome.best_dose, structure.mask, structure.name,
                max_dose, report.settings.dvh_bins,
            )
            with open(out / f"dvh_{method}_{structure.name}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["dose_gy", "volume_fraction"])
                for edge, frac in zip(curve.dose_gy, curve.fractions):
                    writer.writerow([_fmt(edge), _fmt(frac)])

    payload: dict = {
        "phantom": report.phantom_label,
        "prescription_gy": report.prescription_gy,
        "trials_per_method": report.settings.trials_per_method,
        "notes": report.notes,
        "methods": {},
        "pairwise": {},
        "anova": None,
    }
    for method in present:
        outcome = report.outcomes[method]
        if outcome.skipped:
            payload["methods"][method] = {"skipped": True, "reason": outcome.skip_reason}
            continue
        rewards = outcome.rewards
        best = outcome.trials[outcome.best_trial]
        payload["methods"][method] = {
            "skipped": False,
            "n": int(rewards.size),
            "mean_reward": float(rewards.mean()),
            "std_reward": float(rewards.std(ddof=1)),
            "min_reward": float(rewards.min()),
            "max_reward": float(rewards.max()),
            "best_trial": outcome.best_trial,
            "best_reward": best.reward,
            "best_angles_deg": list(best.angles_deg),
        }
    ran = report.ran()
    for i, a in enumerate(ran):
        for b in ran[i + 1:]:
            result = two_sample_t(report.outcomes[a].rewards, report.outcomes[b].rewards)
            payload["pairwise"][f"{a}_vs_{b}"] = {
                "t": result.t if math.isfinite(result.t) else repr(result.t),
                "df": result.df,
                "p_two_sided": result.p_two_sided,
                "p_first_greater": result.p_greater,
                "p_second_greater": 1.0 - result.p_greater if not result.degenerate
                else two_sample_t(report.outcomes[b].rewards, report.outcomes[a].rewards).p_greater,
                "degenerate": result.degenerate,
            }
    if report.anova is not None:
        payload["anova"] = {
            "groups": ran,
            "f": report.anova.f if math.isfinite(report.anova.f) else repr(report.anova.f),
            "df_between": report.anova.df_between,
            "df_within": report.anova.df_within,
            "p_value": report.anova.p_value,
            "degenerate": report.anova.degenerate,
        }
    with open(out / "stats.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return payload
