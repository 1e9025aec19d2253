"""Exception hierarchy shared across the package."""


class DagentError(Exception):
    """Base class for all package-specific errors."""


class MalformedPlan(DagentError):
    """Plan text violates the goal/path grammar or the 1-5 count bounds."""


class UnknownNode(DagentError):
    """A node id was referenced that does not exist in the plan graph."""


class EnvelopeParseError(DagentError):
    """Model reply could not be parsed into a valid action envelope.

    ``span`` holds the offending fragment of the reply, when known.
    """

    def __init__(self, message: str, span: str = ""):
        super().__init__(message)
        self.span = span


class SummaryParseError(DagentError):
    """Progress-summary reply had no recognizable goal status sections."""


class JudgeParseError(DagentError):
    """Judge reply was not JSON or carried a judgement outside correct/incorrect."""


class CountMismatch(DagentError):
    """Observation count does not match the envelope's tool call count."""


class ToolError(DagentError):
    """Base class for tool execution failures; rendered as error observations."""


class HttpError(ToolError):
    """Non-retryable HTTP failure from a live tool endpoint."""


class RateLimited(HttpError):
    """HTTP 429 that persisted through the bounded retry budget."""


class FetchError(ToolError):
    """Page fetch failed; message mirrors the upstream status line."""


class SummarizerUnavailable(ToolError):
    """The page summarization backend failed or was unreachable."""


class BackendUnavailable(DagentError):
    """The model backend could not be reached or returned a transport error."""


class ScriptExhausted(DagentError):
    """A scripted backend ran out of replies or saw an unexpected purpose."""


class UnboundPlaceholder(DagentError):
    """A prompt template was rendered without all declared placeholders bound."""


class ExportError(DagentError):
    """Trajectory cannot be exported to dialogue form (not answer-terminated)."""


class ConfigError(DagentError):
    """CLI or config-file settings are missing or inconsistent."""
