"""beamopt command line: phantom generation through full method comparison.

Subcommands mirror the workflow stages: ``phantom gen`` makes a case,
``score`` evaluates a fixed plan, ``train-dqn`` fits the Q-network,
``agent run`` drives one text-to-plan conversation, ``evaluate`` runs the
multi-method comparison, ``dvh`` exports histogram curves for a saved dose,
and ``bench`` times the two traversal kernels against each other.

Every command exits 0 on success and 2 with a single-line error otherwise.
Commands that write into ``--out`` also drop a ``config.json`` with the
fully resolved configuration, so a run directory is self-describing.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .agents.dqn import rollout, train_dqn
from .agents.qnet import QNetwork
from .agents.text2plan import run_text_to_plan, save_transcript
from .config import ConfigError, RunConfig, load_config
from .dose import BeamSpec, DoseGrid, _beam_inputs, load_dose, save_dose
from .env import PlanningEnv, PlanScorer
from .evaluation import METHODS, dvh, run_comparison, write_report
from .llm import ChatClientError, HillClimbChatClient, HttpChatClient, ScriptedChatClient
from .phantom import PhantomIOError, generate_phantom, load_phantom, save_phantom

_METHOD_ALIASES = {"text2plan": "text_to_plan"}


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    if not text.strip():
        return ()
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _echo_config(out_dir: Path, cfg: RunConfig, command: str, flags: dict) -> None:
    payload = {"command": command, "flags": flags, "config": cfg.to_dict()}
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _print(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_phantom_gen(args) -> int:
    cfg = load_config(args.config)
    if len(args.dims) != 3 or (args.spacing is not None and len(args.spacing) != 3):
        raise ValueError("--dims and --spacing take exactly three comma-separated values")
    spacing = args.spacing if args.spacing is not None else (4.0, 4.0, 4.0)
    phantom = generate_phantom(args.dims, spacing, seed=args.seed, label=args.label)
    out = Path(args.out)
    save_phantom(phantom, out)
    _echo_config(
        out, cfg, "phantom gen",
        {"dims": list(args.dims), "spacing": list(spacing), "seed": args.seed,
         "label": phantom.label},
    )
    _print({"phantom": str(out), "label": phantom.label,
            "structures": [s.name for s in phantom.structures]})
    return 0


def cmd_score(args) -> int:
    cfg = load_config(args.config)
    if not args.angles:
        raise ValueError("--angles needs at least one angle")
    phantom = load_phantom(args.phantom)
    scorer = PlanScorer(phantom, cfg.env, cfg.engine)
    dose, breakdown, normalized = scorer.score_angles(list(args.angles))
    payload = {
        "angles_deg": list(args.angles),
        "ptv_term": breakdown.ptv_term,
        "oar_terms": dict(breakdown.oar_terms),
        "total": breakdown.total,
        "normalized": normalized,
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_dose(
            DoseGrid(phantom.geometry, dose), out / "dose",
            prescription_gy=cfg.env.prescription_gy,
            beam_angles_deg=list(args.angles),
        )
        _echo_config(out, cfg, "score", {"phantom": str(args.phantom),
                                         "angles": list(args.angles)})
        payload["dose"] = str(out / "dose")
    _print(payload)
    return 0


def cmd_train_dqn(args) -> int:
    cfg = load_config(args.config)
    hp = cfg.dqn
    if args.episodes is not None:
        hp = dataclasses.replace(hp, episodes=args.episodes)
    if args.seed is not None:
        hp = dataclasses.replace(hp, seed=args.seed)
    phantom = load_phantom(args.phantom)
    env = PlanningEnv(phantom, cfg.env, cfg.engine)
    every = max(1, hp.episodes // 10)

    def report(episode: int, total: float) -> None:
        if (episode + 1) % every == 0 or episode + 1 == hp.episodes:
            print(f"episode {episode + 1}/{hp.episodes} return={total:.3f}",
                  file=sys.stderr, flush=True)

    result = train_dqn(env, hp, progress=report if not args.quiet else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.qnet.save(out / "qnet")
    with open(out / "training_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "return", "epsilon"])
        for i, (ret, eps) in enumerate(zip(result.episode_returns, result.episode_epsilons)):
            writer.writerow([i, repr(ret), repr(eps)])
    _echo_config(out, dataclasses.replace(cfg, dqn=hp), "train-dqn",
                 {"phantom": str(args.phantom)})
    state, ret = rollout(env, result.qnet, hp.render_dims, epsilon=0.0, seed=0)
    _print({
        "weights": str(out / "qnet"),
        "episodes": hp.episodes,
        "final_return": result.episode_returns[-1],
        "greedy_return": ret,
        "greedy_angles_deg": list(state.chosen_angles),
        "wall_time_s": round(result.wall_time_s, 3),
    })
    return 0


def _make_client_factory(backend: str, cfg: RunConfig, script_path, max_beams: int):
    if backend == "mock-hillclimb":
        return lambda seed: HillClimbChatClient(seed=seed, beam_count=max_beams)
    if backend == "mock-script":
        if script_path is None:
            raise ConfigError("--script FILE is required with the mock-script backend")
        data = json.loads(Path(script_path).read_text())
        if not isinstance(data, list) or not all(isinstance(x, str) for x in data):
            raise ConfigError(f"script {script_path} must be a JSON list of strings")
        return lambda seed: ScriptedChatClient(data)
    if backend == "http":
        return lambda seed: HttpChatClient(cfg.client)
    raise ConfigError(f"unknown backend {backend!r}")


def cmd_agent_run(args) -> int:
    cfg = load_config(args.config)
    phantom = load_phantom(args.phantom)
    factory = _make_client_factory(args.backend, cfg, args.script, cfg.env.max_beams)
    client = factory(args.seed)
    out = Path(args.out)
    transcript = run_text_to_plan(
        phantom, client, cfg.env, cfg.engine,
        max_iterations=args.iterations,
        parse_retries=cfg.eval.parse_retries,
        image_dir=out / "images",
        model_name=args.backend if args.backend != "http" else cfg.client.model,
    )
    path = save_transcript(transcript, out / "transcript.jsonl")
    _echo_config(out, cfg, "agent run",
                 {"phantom": str(args.phantom), "backend": args.backend,
                  "iterations": args.iterations, "seed": args.seed})
    _print({
        "transcript": str(path),
        "iterations": len(transcript.iterations),
        "best_iteration": transcript.best_iteration,
        "best_reward": transcript.best_reward,
        "best_angles_deg": transcript.best_angles,
        "incomplete": transcript.incomplete,
    })
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    settings = cfg.eval
    if args.trials is not None:
        settings = dataclasses.replace(settings, trials_per_method=args.trials)
    methods = [_METHOD_ALIASES.get(m.strip(), m.strip()) for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from random, dqn, text2plan")
    phantom = load_phantom(args.phantom)
    qnet = QNetwork.load(args.qnet) if args.qnet else None
    factory = None
    if "text_to_plan" in methods:
        factory = _make_client_factory(args.backend, cfg, args.script, cfg.env.max_beams)

    def progress(method: str, trial: int, reward: float) -> None:
        print(f"{method} trial {trial}: reward={reward:.3f}", file=sys.stderr, flush=True)

    report = run_comparison(
        phantom, settings, cfg.env, cfg.engine,
        qnet=qnet, client_factory=factory, seed=args.seed,
        methods=methods, jobs=args.jobs,
        progress=None if args.quiet else progress,
    )
    out = Path(args.out)
    payload = write_report(report, out, phantom)
    _echo_config(out, dataclasses.replace(cfg, eval=settings), "evaluate",
                 {"phantom": str(args.phantom), "methods": methods,
                  "backend": args.backend, "seed": args.seed, "jobs": args.jobs})
    _print({"out": str(out), "stats": str(out / "stats.json"),
            "methods": payload["methods"], "notes": payload["notes"]})
    return 0


def cmd_dvh(args) -> int:
    cfg = load_config(args.config)
    phantom = load_phantom(args.phantom)
    grid, manifest = load_dose(args.dose)
    if grid.geometry.dims != phantom.geometry.dims:
        raise ValueError(
            f"dose dims {grid.geometry.dims} do not match phantom dims "
            f"{phantom.geometry.dims}"
        )
    prescription = manifest.get("prescription_gy") or cfg.env.prescription_gy
    max_dose = args.max_dose if args.max_dose is not None else (
        cfg.eval.dvh_max_dose_factor * prescription
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for structure in [phantom.ptv] + list(phantom.oars):
        curve = dvh(grid.values, structure.mask, structure.name, max_dose, args.bins)
        path = out / f"dvh_{structure.name}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dose_gy", "volume_fraction"])
            for edge, frac in zip(curve.dose_gy, curve.fractions):
                writer.writerow([repr(float(edge)), repr(float(frac))])
        written.append(str(path))
    _echo_config(out, cfg, "dvh", {"phantom": str(args.phantom), "dose": str(args.dose),
                                   "bins": args.bins, "max_dose_gy": max_dose})
    _print({"out": str(out), "curves": written})
    return 0


def cmd_bench(args) -> int:
    from .kernels import numba_backend, numpy_backend

    cfg = load_config(args.config)
    phantom = load_phantom(args.phantom)
    angles = args.angles if args.angles else tuple(float(a) for a in range(0, 360, 45))
    inputs = [_beam_inputs(phantom, BeamSpec(a), cfg.engine) for a in angles]
    dims = phantom.geometry.dims

    def run(backend) -> tuple[np.ndarray, list[float]]:
        dose = np.zeros(dims, dtype=np.float64)
        for mu, lo, spacing, starts, direction, weight, ray_area in inputs:
            backend.deposit_beam(mu, lo, spacing, starts, direction, weight, ray_area, dose)
        times = []
        for _ in range(args.repeat):
            scratch = np.zeros(dims, dtype=np.float64)
            t0 = time.perf_counter()
            for mu, lo, spacing, starts, direction, weight, ray_area in inputs:
                backend.deposit_beam(
                    mu, lo, spacing, starts, direction, weight, ray_area, scratch
                )
            times.append((time.perf_counter() - t0) * 1000.0)
        return dose, times

    dose_nb, times_nb = run(numba_backend)
    dose_np, times_np = run(numpy_backend)
    payload = {
        "phantom": str(args.phantom),
        "angles_deg": list(angles),
        "repeat": args.repeat,
        "numba_ms": [round(t, 3) for t in times_nb],
        "numpy_ms": [round(t, 3) for t in times_np],
        "numba_median_ms": round(sorted(times_nb)[len(times_nb) // 2], 3),
        "numpy_median_ms": round(sorted(times_np)[len(times_np) // 2], 3),
        "max_abs_diff": float(np.abs(dose_nb - dose_np).max()),
    }
    payload["speedup"] = round(payload["numpy_median_ms"] / payload["numba_median_ms"], 2) \
        if payload["numba_median_ms"] > 0 else None
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        _echo_config(out, cfg, "bench", {"phantom": str(args.phantom),
                                         "angles": list(angles), "repeat": args.repeat})
    _print(payload)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="beamopt",
        description="Beam-angle planning on synthetic phantoms: surrogate dose "
                    "engine, DQN and LLM agents, and a comparison harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, phantom=True, out=True):
        p.add_argument("--config", help="JSON config file (see README)")
        if phantom:
            p.add_argument("--phantom", required=True, help="phantom directory")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("phantom", help="phantom operations")
    psub = p.add_subparsers(dest="phantom_command", required=True)
    g = psub.add_parser("gen", help="generate and save a synthetic pelvis case")
    common(g, phantom=False)
    g.add_argument("--dims", type=_ints, default=(32, 32, 32),
                   help="grid size, e.g. 32,32,16")
    g.add_argument("--spacing", type=_floats, default=None, help="voxel mm, e.g. 4,4,4")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--label", default=None)
    g.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("score", help="score a fixed plan and export its dose")
    common(p, out=False)
    p.add_argument("--angles", type=_floats, required=True, help="e.g. 0,90,180,270")
    p.add_argument("--out", default=None, help="directory for the dose grid")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train-dqn", help="train the Q-network on one phantom")
    common(p)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train_dqn)

    p = sub.add_parser("agent", help="agent operations")
    asub = p.add_subparsers(dest="agent_command", required=True)
    r = asub.add_parser("run", help="run one text-to-plan conversation")
    common(r)
    r.add_argument("--backend", choices=["mock-script", "mock-hillclimb", "http"],
                   default="mock-hillclimb")
    r.add_argument("--iterations", type=int, default=10)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--script", default=None,
                   help="JSON list of canned responses (mock-script backend)")
    r.set_defaults(func=cmd_agent_run)

    p = sub.add_parser("evaluate", help="compare methods and write a report")
    common(p)
    p.add_argument("--methods", default="random,text2plan",
                   help="comma list from: random, dqn, text2plan")
    p.add_argument("--backend", choices=["mock-script", "mock-hillclimb", "http"],
                   default="mock-hillclimb")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--qnet", default=None, help="weights prefix for the dqn method")
    p.add_argument("--script", default=None)
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel trials per method (default 1)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dvh", help="export DVH curves for a saved dose grid")
    common(p)
    p.add_argument("--dose", required=True, help="dose path prefix (no extension)")
    p.add_argument("--bins", type=int, default=121)
    p.add_argument("--max-dose", type=float, default=None)
    p.set_defaults(func=cmd_dvh)

    p = sub.add_parser("bench", help="time the numba kernel against pure numpy")
    common(p, out=False)
    p.add_argument("--angles", type=_floats, default=None)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except (ConfigError, PhantomIOError, ChatClientError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr, flush=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
