"""beamopt: beam-angle treatment planning on synthetic phantoms.

A small research package: a deterministic attenuation-based dose engine over
voxel phantoms, an episodic planning environment with a clinical-style
reward, agents (random, DQN on a numpy CNN, and a text-driven loop speaking
to a chat-completion endpoint), and an evaluation harness with DVHs, ANOVA,
and t-tests.
"""

from .dose import (
    BeamSpec,
    DoseGrid,
    EngineConfig,
    Plan,
    PlanDoseResult,
    beam_direction,
    compute_beam_dose,
    compute_plan_dose,
    load_dose,
    save_dose,
    trace_ray,
)
from .env import (
    EnvConfig,
    EnvState,
    PlanningEnv,
    PlanScorer,
    RewardBreakdown,
    render_slices_for_prompt,
    render_state,
    score_plan,
)
from .evaluation import (
    ComparisonReport,
    DvhCurve,
    EvalSettings,
    MethodOutcome,
    dvh,
    run_comparison,
    write_report,
)
from .llm import (
    AuthenticationError,
    ChatClientError,
    ChatMessage,
    ClientConfig,
    HillClimbChatClient,
    HttpChatClient,
    MalformedResponseError,
    ScriptedChatClient,
    TransportError,
)
from .phantom import (
    CtVolume,
    GridGeometry,
    Phantom,
    Structure,
    generate_phantom,
    hu_to_attenuation,
    load_phantom,
    save_phantom,
)
from .stats import AnovaResult, TTestResult, betainc, one_way_anova, two_sample_t

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "BeamSpec",
    "DoseGrid",
    "EngineConfig",
    "Plan",
    "PlanDoseResult",
    "beam_direction",
    "compute_beam_dose",
    "compute_plan_dose",
    "load_dose",
    "save_dose",
    "trace_ray",
    "EnvConfig",
    "EnvState",
    "PlanningEnv",
    "PlanScorer",
    "RewardBreakdown",
    "render_slices_for_prompt",
    "render_state",
    "score_plan",
    "ComparisonReport",
    "DvhCurve",
    "EvalSettings",
    "MethodOutcome",
    "dvh",
    "run_comparison",
    "write_report",
    "AuthenticationError",
    "ChatClientError",
    "ChatMessage",
    "ClientConfig",
    "HillClimbChatClient",
    "HttpChatClient",
    "MalformedResponseError",
    "ScriptedChatClient",
    "TransportError",
    "CtVolume",
    "GridGeometry",
    "Phantom",
    "Structure",
    "generate_phantom",
    "hu_to_attenuation",
    "load_phantom",
    "save_phantom",
    "AnovaResult",
    "TTestResult",
    "betainc",
    "one_way_anova",
    "two_sample_t",
]
