"""Parallel agent orchestration over DAG task plans.

Composite tasks are decomposed into a goal/path graph, ready subtasks
execute their tool calls concurrently each step, observations fold into
a shared dialogue state, and the plan is periodically refined from
model-written progress summaries. Backends and tools are pluggable, so
every control-flow property is testable offline with scripted replies
and fixture tools.
"""

from .backend import (
    ActionEnvelope,
    DialogueTurn,
    HttpChatBackend,
    JudgeVerdict,
    ModelBackend,
    PromptTemplate,
    ScriptedBackend,
    judge,
    load_template,
    page_summarizer,
    parse_envelope,
    render_prompt,
    render_tool_schemas,
    serialize_envelope,
)
from .engine import AgentState, Engine, EngineConfig, integrate, refine, run, select_actions
from .errors import (
    BackendUnavailable,
    ConfigError,
    CountMismatch,
    DagentError,
    EnvelopeParseError,
    ExportError,
    FetchError,
    HttpError,
    JudgeParseError,
    MalformedPlan,
    RateLimited,
    ScriptExhausted,
    SummarizerUnavailable,
    SummaryParseError,
    ToolError,
    UnboundPlaceholder,
    UnknownNode,
)
from .plan import (
    CycleReport,
    Goal,
    GoalStatus,
    NodeId,
    Path,
    PathStatus,
    PlanGraph,
    parse_plan,
    serialize_plan,
    validate_dag,
)
from .scheduler import Frontier, SchedulingPolicy, eligible_nodes, mark_complete, ready_set
from .tools import (
    MockWebEnvironment,
    Observation,
    SearchResult,
    ToolCall,
    ToolRegistry,
    ToolSpec,
    mock_registry,
    truncate_page,
)
from .trajectory import (
    Metrics,
    SftDialogue,
    StepRecord,
    TrajectoryRecord,
    compute_metrics,
    export_sft,
    filter_corpus,
    validate_sft,
)

__version__ = "0.1.0"
