"""Planning agents: random baseline, DQN over a numpy CNN, and the LLM loop."""

from .dqn import DqnHyperparams, DqnResult, ReplayBuffer, rollout, train_dqn
from .qnet import QNetwork
from .random_policy import random_plan
from .text2plan import (
    AgentTranscript,
    AngleParseError,
    IterationRecord,
    ParsedAngles,
    build_initial_prompt,
    build_refinement_prompt,
    load_transcript,
    parse_angles,
    run_text_to_plan,
    save_transcript,
)

__all__ = [
    "DqnHyperparams",
    "DqnResult",
    "ReplayBuffer",
    "rollout",
    "train_dqn",
    "QNetwork",
    "random_plan",
    "AgentTranscript",
    "AngleParseError",
    "IterationRecord",
    "ParsedAngles",
    "build_initial_prompt",
    "build_refinement_prompt",
    "load_transcript",
    "parse_angles",
    "run_text_to_plan",
    "save_transcript",
]
