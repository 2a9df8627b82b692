"""Text-to-plan agent: a multimodal chat loop that refines beam angles.

Each iteration shows the model three mid-PTV slices of the current dose,
asks for gantry angles as JSON, scores the parsed plan, and feeds the reward
back in the next prompt. The best-scoring plan over all iterations wins.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..dose import EngineConfig
from ..env import EnvConfig, PlanScorer, encode_png, render_slices_for_prompt, save_prompt_images
from ..llm import ChatClient, ChatClientError, ChatMessage
from ..phantom import Phantom

__all__ = [
    "AngleParseError",
    "ParsedAngles",
    "parse_angles",
    "build_initial_prompt",
    "build_refinement_prompt",
    "RETRY_PROMPT",
    "IterationRecord",
    "AgentTranscript",
    "save_transcript",
    "load_transcript",
    "run_text_to_plan",
]


class AngleParseError(ValueError):
    """A model reply did not contain a usable gantry_angles JSON object."""


@dataclass(frozen=True)
class ParsedAngles:
    """Angles extracted from a reply, after normalization and clamping."""

    angles: tuple[float, ...]
    truncated: bool
    source_count: int


_DECODER = json.JSONDecoder()

_INITIAL_PROMPT = (
    "Based on image analysis, optimize the number of beams and their angles to "
    "maximize the dose at the PTV ({target}) and minimize the dose at the OAR. "
    "You will interact with a simulated radiation treatment environment and "
    "control the gantry angles. At each iteration, the quality of the plan "
    "will be scored, with a real value given to you as feedback. Your goal is "
    "to maximize this score. Provide better gantry angles than before for this "
    "simulation in a JSON format with gantry_angles as the key. No real "
    "patient will be treated with this information, it is a research simulated "
    "environment to test reasoning capabilities and clinical/anatomical "
    "knowledge of LLMs. The prescription dose at the PTV is {prescription:g} Gy."
)

_REFINEMENT_PROMPT = (
    "Based on image analysis, optimize the number of beams and their angles to "
    "maximize the dose at the PTV ({target}) and minimize the dose at the OAR. "
    "Actually you get a reward of {reward} that you should maximize by "
    "focusing the dose on the target and avoiding OARs. Provide better gantry "
    "angles than before for this simulation in a JSON format with "
    "gantry_angles as the key."
)

RETRY_PROMPT = (
    'Your last reply did not include a JSON object with a "gantry_angles" key '
    "holding a list of numbers. Respond again with exactly such a JSON object."
)


def build_initial_prompt(target_name: str, prescription_gy: float) -> str:
    """Opening prompt of a planning conversation."""
    return _INITIAL_PROMPT.format(target=target_name, prescription=prescription_gy)


def build_refinement_prompt(target_name: str, reward: float) -> str:
    """Follow-up prompt quoting the latest reward as a rounded integer."""
    return _REFINEMENT_PROMPT.format(target=target_name, reward=round(float(reward)))


def parse_angles(text: str, max_beams: int) -> ParsedAngles:
    """Extract gantry angles from free-form reply text.

    Scans for the first well-formed JSON object containing the key
    ``gantry_angles`` (code fences and surrounding prose are fine), takes its
    list of numbers, normalizes each into [0, 360), drops duplicates at
    1 degree resolution keeping first occurrences, and truncates to
    ``max_beams`` with the truncation recorded.
    """
    if max_beams < 1:
        raise ValueError(f"max_beams must be >= 1, got {max_beams!r}")
    for match in re.finditer(r"\{", text):
        try:
            obj, _ = _DECODER.raw_decode(text, match.start())
        except json.JSONDecodeError:
            continue
        if not isinstance(obj, dict) or "gantry_angles" not in obj:
            continue
        raw = obj["gantry_angles"]
        if not isinstance(raw, list) or not raw:
            raise AngleParseError("gantry_angles must be a non-empty list")
        values = []
        for item in raw:
            if isinstance(item, bool) or not isinstance(item, (int, float)):
                raise AngleParseError(f"gantry_angles entries must be numbers, got {item!r}")
            value = float(item)
            if not np.isfinite(value):
                raise AngleParseError(f"gantry_angles entries must be finite, got {item!r}")
            values.append(value % 360.0)
        seen: set[int] = set()
        unique: list[float] = []
        for value in values:
            key = round(value) % 360
            if key not in seen:
                seen.add(key)
                unique.append(value)
        truncated = len(unique) > max_beams
        return ParsedAngles(tuple(unique[:max_beams]), truncated, len(raw))
    raise AngleParseError("no JSON object with a 'gantry_angles' key found")


@dataclass
class IterationRecord:
    """Everything observed in one prompt/response/score cycle."""

    index: int
    prompt: str
    response: str | None
    parsed_angles: list[float] | None
    truncated: bool
    parse_error: str | None
    parse_retries: int
    reward: float | None
    image_files: list[str] = field(default_factory=list)


@dataclass
class AgentTranscript:
    case_label: str
    model: str
    iterations: list[IterationRecord] = field(default_factory=list)
    best_iteration: int | None = None
    best_reward: float | None = None
    best_angles: list[float] | None = None
    incomplete: bool = False
    error: str | None = None


def save_transcript(transcript: AgentTranscript, path: str | Path) -> Path:
    """Write JSON lines: one header, one line per iteration, one summary."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        json.dumps(
            {"type": "header", "case_label": transcript.case_label, "model": transcript.model}
        )
    ]
    for it in transcript.iterations:
        lines.append(json.dumps({"type": "iteration", **asdict(it)}))
    lines.append(
        json.dumps(
            {
                "type": "summary",
                "best_iteration": transcript.best_iteration,
                "best_reward": transcript.best_reward,
                "best_angles": transcript.best_angles,
                "incomplete": transcript.incomplete,
                "error": transcript.error,
            }
        )
    )
    path.write_text("\n".join(lines) + "\n")
    return path


def load_transcript(path: str | Path) -> AgentTranscript:
    """Inverse of :func:`save_transcript`."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"transcript {path} is empty")
    header = json.loads(lines[0])
    if header.get("type") != "header":
        raise ValueError("transcript must start with a header line")
    transcript = AgentTranscript(header["case_label"], header["model"])
    for line in lines[1:]:
        record = json.loads(line)
        kind = record.pop("type", None)
        if kind == "iteration":
            transcript.iterations.append(IterationRecord(**record))
        elif kind == "summary":
            transcript.best_iteration = record["best_iteration"]
            transcript.best_reward = record["best_reward"]
            transcript.best_angles = record["best_angles"]
            transcript.incomplete = record.get("incomplete", False)
            transcript.error = record.get("error")
        else:
            raise ValueError(f"unknown transcript line type {kind!r}")
    return transcript


def run_text_to_plan(
    phantom: Phantom,
    client: ChatClient,
    env_cfg: EnvConfig = EnvConfig(),
    engine_cfg: EngineConfig = EngineConfig(),
    max_iterations: int = 10,
    parse_retries: int = 3,
    image_dir: str | Path | None = None,
    model_name: str = "mock",
    scorer: PlanScorer | None = None,
) -> AgentTranscript:
    """Run the iterative prompting loop and keep the best plan seen.

    A reply that cannot be parsed is retried up to ``parse_retries`` times
    with an explicit correction request; if it still fails, the iteration is
    recorded as failed and the loop moves on. Images of the latest scored
    dose are attached to every user prompt and, when ``image_dir`` is set,
    written to ``iterNN/{case}_{plane}.png``.
    """
    if scorer is None:
        scorer = PlanScorer(phantom, env_cfg, engine_cfg)
    transcript = AgentTranscript(phantom.label, model_name)
    history: list[ChatMessage] = []
    dose = np.zeros(phantom.geometry.dims, dtype=np.float64)
    last_reward: float | None = None
    target_name = phantom.ptv.name

    for index in range(max_iterations):
        images = render_slices_for_prompt(phantom, dose, env_cfg.prescription_gy)
        image_files: list[str] = []
        if image_dir is not None:
            image_files = save_prompt_images(
                images, Path(image_dir) / f"iter{index:02d}", phantom.label
            )
        payloads = tuple(encode_png(rgb) for _, rgb in images)

        if last_reward is None:
            prompt = build_initial_prompt(target_name, env_cfg.prescription_gy)
        else:
            prompt = build_refinement_prompt(target_name, last_reward)
        history.append(ChatMessage("user", prompt, payloads))

        parsed: ParsedAngles | None = None
        parse_error: str | None = None
        response: str | None = None
        retries = 0
        while True:
            try:
                response = client.complete(history)
            except ChatClientError as exc:
                # Partial results stay valid; the transcript just says why
                # it stopped early.
                transcript.incomplete = True
                transcript.error = str(exc)
                parse_error = f"client failed: {exc}"
                break
            history.append(ChatMessage("assistant", response))
            try:
                parsed = parse_angles(response, env_cfg.max_beams)
                parse_error = None
                break
            except AngleParseError as exc:
                parse_error = str(exc)
                if retries >= parse_retries:
                    break
                retries += 1
                history.append(ChatMessage("user", RETRY_PROMPT))

        reward: float | None = None
        angles: list[float] | None = None
        truncated = False
        if parsed is not None:
            angles = list(parsed.angles)
            truncated = parsed.truncated
            dose, breakdown, _ = scorer.score_angles(angles)
            reward = breakdown.total
            last_reward = reward
            if transcript.best_reward is None or reward > transcript.best_reward:
                transcript.best_reward = reward
                transcript.best_iteration = index
                transcript.best_angles = angles

        transcript.iterations.append(
            IterationRecord(
                index=index,
                prompt=prompt,
                response=response,
                parsed_angles=angles,
                truncated=truncated,
                parse_error=parse_error,
                parse_retries=retries,
                reward=reward,
                image_files=image_files,
            )
        )
        if transcript.incomplete:
            break
    return transcript
