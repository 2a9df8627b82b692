"""Acceptance gate: one test per shipping criterion, run in order.

Each test owns one numbered criterion, checks it at the stated tolerance,
enforces its wall-clock budget, and prints a single PASS line (visible with
``pytest -s``; under plain ``pytest -v`` the test name itself is the
pass/fail line). The scales and tolerances here are contractual: do not
loosen them to make a failing build green.
"""

import json
import math
import time

import numpy as np
import pytest

from beamopt.agents.dqn import DqnHyperparams, train_dqn
from beamopt.agents.qnet import QNetwork
from beamopt.agents.random_policy import random_plan
from beamopt.agents.text2plan import (
    load_transcript,
    parse_angles,
    run_text_to_plan,
    save_transcript,
)
from beamopt.dose import BeamSpec, EngineConfig, compute_beam_dose, trace_ray
from beamopt.env import EnvConfig, PlanningEnv, score_plan
from beamopt.evaluation import EvalSettings, dvh, run_comparison, write_report
from beamopt.llm import HillClimbChatClient, ScriptedChatClient
from beamopt.phantom import generate_phantom, load_phantom, save_phantom
from beamopt.stats import betainc, one_way_anova, two_sample_t


def _stamp(number: int, label: str, started: float, limit_s: float) -> None:
    elapsed = time.perf_counter() - started
    assert elapsed < limit_s, f"criterion {number} overran: {elapsed:.1f}s (budget {limit_s}s)"
    print(f"criterion {number:02d} PASS ({elapsed:.1f}s / {limit_s:.0f}s budget): {label}")


# --- 1. reward formula exactness ----------------------------------------------


def test_criterion_01_reward_formula_exactness(mini_phantom):
    started = time.perf_counter()
    shape = mini_phantom.geometry.shape
    cfg = EnvConfig()

    dose = np.zeros(shape)
    dose[mini_phantom.ptv.mask] = 100.0
    assert abs(score_plan(dose, mini_phantom, cfg).total - 10.0) <= 1e-12

    dose[mini_phantom.structure("rectum").mask] = 55.0
    assert abs(score_plan(dose, mini_phantom, cfg).total - 5.0) <= 1e-12

    dose = np.zeros(shape)
    dose[8, 8, 3] = 99.0  # one PTV voxel, 1 Gy short
    assert abs(score_plan(dose, mini_phantom, cfg).total - math.exp(-1.0)) <= 1e-12

    _stamp(1, "reward worked examples exact to 1e-12", started, 1.0)


# --- 2. dose engine physics -----------------------------------------------------


def _aabb_chord(lo, hi, origin, direction) -> float:
    """Slab-method chord length of a ray through an axis-aligned box."""
    t_enter, t_exit = -math.inf, math.inf
    for axis in range(3):
        inv = 1.0 / direction[axis]
        ta = (lo[axis] - origin[axis]) * inv
        tb = (hi[axis] - origin[axis]) * inv
        t_enter = max(t_enter, min(ta, tb))
        t_exit = min(t_exit, max(ta, tb))
    return max(0.0, t_exit - t_enter)


def test_criterion_02_dose_engine_physics(water_phantom, symmetric_phantom):
    started = time.perf_counter()
    cfg = EngineConfig()

    # central-axis falloff in homogeneous water vs the closed form
    dose = compute_beam_dose(water_phantom, BeamSpec(0.0), cfg).values
    column = dose[16, :, 16]
    spacing_y = water_phantom.geometry.spacing_mm[1]
    depths = np.arange(3, 31, 3)  # 10 sampled depths along the beam
    reference = int(depths[-1])  # shallowest sample, nearest the entry side
    for j in depths:
        got = column[j] / column[reference]
        want = math.exp(-cfg.mu_water_per_mm * (reference - j) * spacing_y)
        assert abs(got - want) <= 0.02 * want

    # quarter-turn equivariance on the rotation-symmetric case
    for theta in (0.0, 30.0, 123.4):
        d0 = compute_beam_dose(symmetric_phantom, BeamSpec(theta), cfg).values
        d90 = compute_beam_dose(symmetric_phantom, BeamSpec(theta + 90.0), cfg).values
        assert np.abs(d90 - np.rot90(d0, k=-1, axes=(0, 1))).max() <= 1e-6 * d0.max()

    # chord lengths from the traversal kernel vs the slab oracle
    geom = water_phantom.geometry
    lo, hi = geom.bounds_mm()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        target = rng.uniform(lo, hi)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        origin = target - 300.0 * direction
        _, lengths = trace_ray(geom, origin, direction)
        worst = max(worst, abs(lengths.sum() - _aabb_chord(lo, hi, origin, direction)))
    assert worst <= 1e-9

    _stamp(2, "attenuation 2%, rotation 1e-6, chords 1e-9 over 1000 rays", started, 30.0)


# --- 3. normalization contract --------------------------------------------------


def test_criterion_03_normalization_contract(standard_scorer, standard_phantom):
    started = time.perf_counter()
    rng = np.random.default_rng(17)
    prescription = EnvConfig().prescription_gy
    mask = standard_phantom.ptv.mask
    for _ in range(50):
        plan = random_plan(rng, max_beams=5)
        dose, _, normalized = standard_scorer.score_angles(plan.angles_deg)
        assert normalized
        assert abs(dose[mask].mean() - prescription) <= 1e-9 * prescription
    _stamp(3, "mean PTV dose = 100 Gy to 1e-9 rel over 50 random plans", started, 60.0)


# --- 4. environment algebra -----------------------------------------------------


def test_criterion_04_environment_algebra(mini_phantom):
    started = time.perf_counter()
    env = PlanningEnv(mini_phantom)
    rng = np.random.default_rng(404)
    for episode in range(100):
        state = env.reset(seed=episode)
        assert state.last_score == 0.0
        rewards: list[float] = []
        invalid = 0
        while not state.done:
            action = int(rng.integers(env.n_actions))
            prev = state
            state, reward, done = env.step(state, action)
            rewards.append(reward)
            if action == env.stop_action:
                if prev.chosen_angles:
                    assert reward == 0.0
                else:
                    assert reward == -1.0
                    invalid += 1
            elif env.action_angle(action) in prev.chosen_angles:
                # duplicate angle: flat penalty, plan untouched
                assert reward == -1.0
                assert state.dose is prev.dose
                assert state.last_score == prev.last_score
                invalid += 1
            else:
                assert reward == state.last_score - prev.last_score  # bitwise
            assert done == state.done
        total = math.fsum(rewards)
        assert total == pytest.approx(state.last_score - invalid, rel=1e-12, abs=1e-9)
    _stamp(4, "step rewards telescope; duplicate-angle rule holds, 100 episodes", started, 60.0)


# --- 5. DQN machinery -----------------------------------------------------------


def test_criterion_05a_gradient_check():
    started = time.perf_counter()
    net = QNetwork((6, 6, 6), angle_bins=4, seed=11)
    rng = np.random.default_rng(5)
    obs = rng.normal(size=(2, 2, 6, 6, 6))
    gout = rng.normal(size=(2, 5))

    net.zero_grads()
    net.forward(obs, train=True)
    net.backward(gout)
    grads = {k: v.copy() for k, v in net.gradients().items()}

    eps = 1e-6
    worst = 0.0
    for name, arr in net.parameters().items():
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        for i in rng.choice(flat.size, size=min(8, flat.size), replace=False):
            keep = flat[i]
            flat[i] = keep + eps
            up = float(np.sum(net.forward(obs, train=True) * gout))
            flat[i] = keep - eps
            down = float(np.sum(net.forward(obs, train=True) * gout))
            flat[i] = keep
            numeric = (up - down) / (2.0 * eps)
            analytic = g[i]
            # conv biases sit under batch norm, so both sides are ~0 there;
            # the floored denominator keeps 0-vs-0 from reading as disagreement
            rel = abs(analytic - numeric) / max(1e-4, abs(analytic) + abs(numeric))
            worst = max(worst, rel)
    assert worst < 1e-3
    _stamp(5, "(a) analytic gradients match central differences, 6^3 input", started, 120.0)


def test_criterion_05b_terminal_targets_and_determinism(mini_phantom):
    started = time.perf_counter()

    rng = np.random.default_rng(2)
    rewards = rng.normal(size=16)
    bootstrap = rng.normal(size=16) * 100.0
    done = np.ones(16)
    targets = rewards + 0.95 * bootstrap * (1.0 - done)
    assert np.array_equal(targets, rewards)

    hp = DqnHyperparams(
        episodes=20,
        replay_capacity=256,
        batch_size=8,
        epsilon_decay_episodes=15,
        target_sync_interval=10,
        render_dims=(8, 8, 8),
    )
    first = train_dqn(PlanningEnv(mini_phantom), hp)
    second = train_dqn(PlanningEnv(mini_phantom), hp)
    assert first.episode_returns == second.episode_returns
    assert first.losses == second.losses
    pa, pb = first.qnet.parameters(), second.qnet.parameters()
    assert pa.keys() == pb.keys()
    for key in pa:
        assert np.array_equal(pa[key], pb[key]), key

    _stamp(5, "(b) terminal targets = rewards; 20-episode run bit-deterministic", started, 300.0)


@pytest.mark.slow
def test_criterion_05c_learning_on_the_standard_case(standard_phantom):
    started = time.perf_counter()
    hp = DqnHyperparams()  # stock settings, stock seed, 300 episodes
    result = train_dqn(PlanningEnv(standard_phantom), hp)
    first_30 = float(np.mean(result.episode_returns[:30]))
    last_30 = float(np.mean(result.episode_returns[-30:]))
    assert last_30 > first_30, f"no improvement: first 30 {first_30:.2f}, last 30 {last_30:.2f}"
    _stamp(5, f"(c) return improved {first_30:.2f} -> {last_30:.2f} over 300 episodes", started, 1800.0)


# --- 6. text-to-plan loop fidelity ----------------------------------------------

ROUNDS = (
    [10, 50, 90, 130, 170, 210, 250, 290],
    [30, 80, 130, 180, 230, 280, 330],
    [30, 75, 120, 165, 210, 255, 300, 345],
    [30, 60, 110, 150, 210, 250, 300, 340],
)


def test_criterion_06_text_to_plan_fidelity(mini_phantom, tmp_path):
    started = time.perf_counter()

    responses = [
        f'Here is the arrangement I suggest: {{"gantry_angles": {json.dumps(plan)}}}'
        for plan in ROUNDS
    ]
    transcript = run_text_to_plan(
        mini_phantom,
        ScriptedChatClient(responses),
        env_cfg=EnvConfig(max_beams=8),
        max_iterations=4,
        model_name="scripted",
    )
    assert len(transcript.iterations) == 4
    assert not transcript.incomplete
    for record, plan in zip(transcript.iterations, ROUNDS):
        assert record.parsed_angles == [float(v) for v in plan]
        assert record.reward is not None
    rewards = [r.reward for r in transcript.iterations]
    assert transcript.best_iteration == int(np.argmax(rewards))
    assert transcript.best_reward == max(rewards)

    path = save_transcript(transcript, tmp_path / "transcript.jsonl")
    assert load_transcript(path) == transcript

    rng = np.random.default_rng(1000)
    for _ in range(1000):
        count = int(rng.integers(1, 9))
        angles = [int(a) for a in rng.choice(360, size=count, replace=False)]
        text = f'{{"gantry_angles": {json.dumps(angles)}}}'
        assert parse_angles(text, max_beams=8).angles == tuple(float(a) for a in angles)

    _stamp(6, "4-round replay parses exactly; 1000-plan parser round trip", started, 30.0)


# --- 7. three-method ordering ---------------------------------------------------


@pytest.mark.slow
def test_criterion_07_method_ordering(standard_phantom):
    started = time.perf_counter()
    report = run_comparison(
        standard_phantom,
        EvalSettings(),  # 30 trials per method
        qnet=QNetwork((16, 16, 16), angle_bins=36, seed=0),
        client_factory=lambda seed: HillClimbChatClient(seed=seed, beam_count=5),
        seed=0,
        methods=("random", "dqn", "text_to_plan"),
    )
    assert report.ran() == ["random", "dqn", "text_to_plan"]

    random_rewards = report.outcomes["random"].rewards
    text_rewards = report.outcomes["text_to_plan"].rewards
    assert text_rewards.mean() > random_rewards.mean()

    t = two_sample_t(text_rewards, random_rewards)
    assert t.p_two_sided < 0.05
    assert t.p_greater < 0.05

    assert report.anova is not None
    assert (report.anova.df_between, report.anova.df_within) == (2, 87)

    _stamp(
        7,
        f"text-to-plan {text_rewards.mean():.2f} > random {random_rewards.mean():.2f}, "
        f"p = {t.p_two_sided:.2e}, ANOVA dfs (2, 87)",
        started,
        600.0,
    )


# --- 8. statistics oracle equivalence -------------------------------------------


def _betainc_series(a: float, b: float, x: float, terms: int = 500) -> float:
    """Independent power-series evaluation; converges for the grid below."""
    coeff = 1.0
    total = 1.0 / a
    for n in range(1, terms):
        coeff *= (n - b) / n * x
        total += coeff / (a + n)
        if abs(coeff / (a + n)) < 1e-18 * abs(total):
            break
    ln_norm = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    return math.exp(ln_norm + a * math.log(x)) * total


def test_criterion_08_statistics_oracles():
    started = time.perf_counter()

    result = one_way_anova([[1.0, 2.0, 3.0], [2.0, 3.0, 4.0], [3.0, 4.0, 5.0]])
    assert result.f == pytest.approx(3.0, rel=1e-12)
    assert (result.df_between, result.df_within) == (2, 6)
    assert result.p_value == pytest.approx(0.125, rel=1e-12)

    rng = np.random.default_rng(8)
    x = rng.normal(size=12)
    y = rng.normal(loc=0.6, size=15)
    forward, reverse = two_sample_t(x, y), two_sample_t(y, x)
    assert forward.t == -reverse.t
    assert forward.p_two_sided == pytest.approx(reverse.p_two_sided, rel=1e-12)
    same = two_sample_t(x, x)
    assert same.t == 0.0 and same.p_two_sided == 1.0

    for a in (0.5, 1.5, 2.0, 7.0):
        for b in (0.5, 1.5, 2.0, 7.0):
            for x_val in (0.05, 0.2, 0.45, 0.7):
                assert betainc(a, b, x_val) == pytest.approx(
                    _betainc_series(a, b, x_val), rel=1e-10
                )

    _stamp(8, "ANOVA fixture, t antisymmetry, betainc vs series to 1e-10", started, 5.0)


# --- 9. DVH properties ----------------------------------------------------------


def test_criterion_09_dvh_properties():
    started = time.perf_counter()
    rng = np.random.default_rng(9)
    for _ in range(20):
        dose = rng.uniform(0.0, 120.0, size=(10, 10, 10))
        mask = rng.random((10, 10, 10)) < 0.4
        if not mask.any():
            mask[0, 0, 0] = True
        curve = dvh(dose, mask, "roi", max_dose_gy=120.0, bins=61)
        assert curve.fractions[0] == 1.0
        assert np.all(np.diff(curve.fractions) <= 0.0)
        inside = dose[mask]
        for edge, frac in zip(curve.dose_gy, curve.fractions):
            assert frac == np.mean(inside >= edge)  # brute-force oracle, exact
    _stamp(9, "DVH monotone from 1.0 and exact vs threshold counts, 20 grids", started, 10.0)


# --- 10. reproducibility and IO -------------------------------------------------


def test_criterion_10_reproducibility_and_io(standard_phantom, mini_phantom, tmp_path):
    started = time.perf_counter()

    phantom = generate_phantom(seed=3)
    dir_a, dir_b = tmp_path / "pa", tmp_path / "pb"
    save_phantom(phantom, dir_a)
    loaded = load_phantom(dir_a)
    assert np.array_equal(loaded.ct.hu, phantom.ct.hu)
    for s in phantom.structures:
        assert np.array_equal(loaded.structure(s.name).mask, s.mask)
    save_phantom(loaded, dir_b)
    for name in sorted(p.name for p in dir_a.iterdir()):
        assert (dir_a / name).read_bytes() == (dir_b / name).read_bytes(), name

    transcript = run_text_to_plan(
        mini_phantom,
        HillClimbChatClient(seed=1, beam_count=3),
        max_iterations=2,
        model_name="mock-hillclimb",
    )
    t1 = save_transcript(transcript, tmp_path / "t1.jsonl")
    reloaded = load_transcript(t1)
    assert reloaded == transcript
    t2 = save_transcript(reloaded, tmp_path / "t2.jsonl")
    assert t1.read_bytes() == t2.read_bytes()

    settings = EvalSettings(trials_per_method=3, text2plan_iterations=2)
    def evaluate(into):
        report = run_comparison(
            standard_phantom,
            settings,
            client_factory=lambda seed: HillClimbChatClient(seed=seed, beam_count=3),
            seed=11,
            methods=("random", "text_to_plan"),
        )
        write_report(report, into, standard_phantom)
    evaluate(tmp_path / "run1")
    evaluate(tmp_path / "run2")
    names = sorted(p.name for p in (tmp_path / "run1").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "run2").iterdir())
    for name in names:
        assert (tmp_path / "run1" / name).read_bytes() == (
            tmp_path / "run2" / name
        ).read_bytes(), name

    _stamp(10, "phantom/transcript round trips bit-exact; evaluate byte-stable", started, 120.0)
