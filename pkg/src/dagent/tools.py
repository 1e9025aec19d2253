"""Tool registry, the three standard tools, and the hermetic mock web.

The standard tool set is ``web_search`` (5 ranked results per query),
``crawl_page`` (fetch through a reader proxy, truncate to the first
60,000 characters, then condense with a summarizer), and
``final_answer`` (the termination signal). Live executors speak HTTP
with timeouts and a bounded retry budget; mock executors read fixtures
from a directory and never touch the network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Any, Callable, Mapping, Optional
from urllib.parse import urlsplit

from .errors import FetchError, HttpError, RateLimited, SummarizerUnavailable, ToolError

logger = logging.getLogger(__name__)

MAX_PAGE_CHARS = 60_000
SEARCH_RESULT_LIMIT = 5
NO_RELEVANT_INFORMATION = "No relevant information"

WEB_SEARCH = "web_search"
CRAWL_PAGE = "crawl_page"
FINAL_ANSWER = "final_answer"

# Callable that condenses page text against a query; see backend.page_summarizer.
Summarize = Callable[[str, str], str]


@dataclass(frozen=True)
class ToolCall:
    """One requested tool invocation: a registry name plus arguments."""

    name: str
    arguments: Mapping[str, Any]

    def render_arguments(self) -> str:
        # Python-repr style ({'query': '...'}), the shape observation
        # headers and transcripts use.
        return repr(dict(self.arguments))


@dataclass(frozen=True)
class Observation:
    """The result of one tool call, indexed back to the call."""

    call_index: int
    content: str
    status: str = "ok"  # ok | error
    latency: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class SearchResult:
    title: str
    snippet: str
    url: str
    source: str = "Unknown source"
    date: Optional[str] = None


def truncate_page(text: str) -> str:
    """First 60,000 characters, exactly; idempotent."""
    return text[:MAX_PAGE_CHARS]


def passthrough_summarizer(content: str, query: str) -> str:
    """Identity summarizer for fixture-backed runs: fixture pages are
    already condensed, so the crawl observation is the page text itself."""
    return content


def render_search_results(results: list[SearchResult]) -> str:
    """Numbered result blocks; at most 5 are rendered."""
    blocks = []
    for i, r in enumerate(results[:SEARCH_RESULT_LIMIT], start=1):
        lines = [f"{i}. [{r.title}]({r.url})"]
        if r.date:
            lines.append(f"Date published: {r.date}")
        lines.append(f"Source: {r.source}")
        lines.append(f"   {r.snippet}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def render_observation_block(call: ToolCall, observation: Observation) -> str:
    return (
        f"Results for tool call {call.name} with arguments "
        f"{call.render_arguments()}: {observation.content}"
    )


def render_observations(calls: list[ToolCall], observations: list[Observation]) -> str:
    """All of one step's observations in submission order, with headers."""
    return "\n\n".join(
        render_observation_block(call, obs) for call, obs in zip(calls, observations)
    )


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

Executor = Callable[[Mapping[str, Any]], str]


@dataclass
class ToolSpec:
    """Declares a tool's schema and wraps its executor."""

    name: str
    description: str
    inputs: dict[str, dict[str, str]]
    executor: Executor
    output_type: str = "string"
    max_concurrency: Optional[int] = None
    _gate: Optional[threading.Semaphore] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.max_concurrency is not None:
            self._gate = threading.Semaphore(self.max_concurrency)

    def run(self, arguments: Mapping[str, Any]) -> str:
        for key in self.inputs:
            if key not in arguments:
                raise ToolError(f"missing required argument {key!r} for {self.name}")
        if self._gate is None:
            return self.executor(arguments)
        with self._gate:
            return self.executor(arguments)


def final_answer_spec() -> ToolSpec:
    def run(arguments: Mapping[str, Any]) -> str:
        answer = str(arguments.get("answer", ""))
        if not answer.strip():
            raise ToolError("final_answer requires a non-empty answer")
        return answer

    return ToolSpec(
        name=FINAL_ANSWER,
        description="Gives a clear, accurate final answer to the given task.",
        inputs={"answer": {"type": "string", "description": "The clear, accurate final answer to the task"}},
        executor=run,
    )


class ToolRegistry:
    """Name-keyed tool specs; ``final_answer`` is always present."""

    def __init__(self, specs: Optional[list[ToolSpec]] = None):
        self._specs: dict[str, ToolSpec] = {}
        for spec in specs or []:
            self.register(spec)
        if FINAL_ANSWER not in self._specs:
            self.register(final_answer_spec())

    def register(self, spec: ToolSpec) -> None:
        if spec.name in self._specs:
            raise ValueError(f"tool {spec.name!r} already registered")
        self._specs[spec.name] = spec

    def names(self) -> list[str]:
        return list(self._specs)

    def get(self, name: str) -> ToolSpec:
        return self._specs[name]

    def specs(self) -> list[ToolSpec]:
        return list(self._specs.values())

    def execute(
        self,
        call: ToolCall,
        call_index: int,
        clock: Callable[[], float] = time.monotonic,
    ) -> Observation:
        """Run one call, capturing failures as error observations."""
        started = clock()
        try:
            spec = self._specs.get(call.name)
            if spec is None:
                raise ToolError(f"unknown tool {call.name!r}")
            content = spec.run(call.arguments)
            return Observation(call_index, content, "ok", clock() - started)
        except ToolError as exc:
            return Observation(call_index, str(exc), "error", clock() - started)
        except Exception as exc:  # tool bugs must not kill the run
            logger.exception("tool %s raised", call.name)
            return Observation(call_index, f"{type(exc).__name__}: {exc}", "error", clock() - started)


# ---------------------------------------------------------------------------
# Mock fixtures
# ---------------------------------------------------------------------------

def normalize_query(query: str) -> str:
    return " ".join(query.lower().split())


def normalize_url(url: str) -> str:
    return url.strip()


def _key_hash(key: str) -> str:
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


class MockWebEnvironment:
    """Fixture-backed stand-in for the live web.

    Layout under the fixtures directory::

        search/<sha256-16 of normalized query>.json   {"query", "results": [...]}
        pages/<sha256-16 of normalized url>.json      {"url", "content"}

    Queries are normalized by lowercasing and collapsing whitespace,
    URLs by stripping surrounding whitespace.
    """

    def __init__(self, root: str | FsPath):
        self.root = FsPath(root)

    @staticmethod
    def search_fixture_path(root: str | FsPath, query: str) -> FsPath:
        return FsPath(root) / "search" / f"{_key_hash(normalize_query(query))}.json"

    @staticmethod
    def page_fixture_path(root: str | FsPath, url: str) -> FsPath:
        return FsPath(root) / "pages" / f"{_key_hash(normalize_url(url))}.json"

    @classmethod
    def add_search_fixture(cls, root: str | FsPath, query: str, results: list[SearchResult]) -> FsPath:
        path = cls.search_fixture_path(root, query)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "query": query,
            "results": [
                {"title": r.title, "snippet": r.snippet, "url": r.url, "source": r.source, "date": r.date}
                for r in results
            ],
        }
        path.write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")
        return path

    @classmethod
    def add_page_fixture(cls, root: str | FsPath, url: str, content: str) -> FsPath:
        path = cls.page_fixture_path(root, url)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"url": url, "content": content}, ensure_ascii=False), encoding="utf-8")
        return path

    def search_results(self, query: str) -> list[SearchResult]:
        path = self.search_fixture_path(self.root, query)
        if not path.exists():
            raise ToolError(f"no search fixture for query: {query}")
        data = json.loads(path.read_text(encoding="utf-8"))
        return [
            SearchResult(
                title=item["title"],
                snippet=item.get("snippet", ""),
                url=item["url"],
                source=item.get("source") or "Unknown source",
                date=item.get("date"),
            )
            for item in data.get("results", [])
        ]

    def page(self, url: str) -> str:
        path = self.page_fixture_path(self.root, url)
        if not path.exists():
            raise FetchError(f"Error reading page: no page fixture for url: {url}")
        return json.loads(path.read_text(encoding="utf-8"))["content"]


# ---------------------------------------------------------------------------
# web_search
# ---------------------------------------------------------------------------

_SEARCH_DESCRIPTION = "Perform a web search query and return the search results."
_SEARCH_INPUTS = {"query": {"type": "string", "description": "The web search query to perform."}}

_CRAWL_DESCRIPTION = (
    "Access webpage using the provided URL and extract relevant content.  "
    "Please make full use of this tool to verify the accuracy of the searched content."
)
_CRAWL_INPUTS = {
    "url": {"type": "string", "description": "The URL of the webpage to visit."},
    "query": {"type": "string", "description": "The specific information to extract from the webpage."},
}


def _require_query(arguments: Mapping[str, Any]) -> str:
    query = str(arguments.get("query", "")).strip()
    if not query:
        raise ToolError("web_search requires a non-empty query")
    return query


def mock_search_spec(env: MockWebEnvironment) -> ToolSpec:
    def run(arguments: Mapping[str, Any]) -> str:
        query = _require_query(arguments)
        return render_search_results(env.search_results(query))

    return ToolSpec(WEB_SEARCH, _SEARCH_DESCRIPTION, dict(_SEARCH_INPUTS), run)


DEFAULT_SEARCH_ENDPOINT = "https://google.serper.dev/search"
RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})
MAX_RETRIES = 2


def _request_with_retries(send: Callable[[], "Any"], what: str):
    """Bounded retries on 429/5xx with exponential backoff."""
    delay = 0.5
    for attempt in range(MAX_RETRIES + 1):
        response = send()
        if response.status_code < 400:
            return response
        if response.status_code in RETRYABLE_STATUSES and attempt < MAX_RETRIES:
            retry_after = response.headers.get("Retry-After")
            try:
                wait = float(retry_after) if retry_after else delay
            except ValueError:
                wait = delay
            time.sleep(min(wait, 30.0))
            delay *= 2
            continue
        body = (response.text or "")[:200]
        if response.status_code == 429:
            raise RateLimited(f"{what}: 429 rate limited: {body}")
        raise HttpError(f"{what}: {response.status_code}: {body}")
    raise HttpError(f"{what}: retries exhausted")


def live_search_spec(
    api_key: str,
    endpoint: str = DEFAULT_SEARCH_ENDPOINT,
    timeout: float = 30.0,
    session=None,
) -> ToolSpec:
    """Search backed by a results API: POST {"q": query, "num": 5} with an
    API-key header."""
    import requests

    http = session or requests.Session()

    def run(arguments: Mapping[str, Any]) -> str:
        query = _require_query(arguments)
        response = _request_with_retries(
            lambda: http.post(
                endpoint,
                json={"q": query, "num": SEARCH_RESULT_LIMIT},
                headers={"X-API-KEY": api_key, "Content-Type": "application/json"},
                timeout=timeout,
            ),
            "web_search",
        )
        payload = response.json()
        results = [
            SearchResult(
                title=item.get("title", ""),
                snippet=item.get("snippet", ""),
                url=item.get("link", item.get("url", "")),
                source=item.get("source") or "Unknown source",
                date=item.get("date"),
            )
            for item in payload.get("organic", [])
        ]
        return render_search_results(results)

    return ToolSpec(WEB_SEARCH, _SEARCH_DESCRIPTION, dict(_SEARCH_INPUTS), run)


# ---------------------------------------------------------------------------
# crawl_page
# ---------------------------------------------------------------------------

DEFAULT_READER_BASE = "https://r.jina.ai"


def proxied_url(reader_base: str, url: str) -> str:
    return f"{reader_base.rstrip('/')}/{url}"


def _check_url(url: str, reader_base: str) -> None:
    parts = urlsplit(url)
    if parts.scheme not in ("http", "https") or not parts.netloc or " " in url:
        # Mirrors what the reader proxy reports for such URLs.
        raise FetchError(
            f"Error reading page: 400 Client Error: Bad Request for url: {proxied_url(reader_base, url)}"
        )


def _crawl_content(arguments: Mapping[str, Any], fetch: Callable[[str], str], summarize: Summarize) -> str:
    url = normalize_url(str(arguments.get("url", "")))
    query = str(arguments.get("query", ""))
    page_text = truncate_page(fetch(url))
    try:
        return summarize(page_text, query)
    except ToolError:
        raise
    except Exception as exc:
        raise SummarizerUnavailable(f"page summarizer failed: {exc}") from exc


def mock_crawl_spec(env: MockWebEnvironment, summarize: Summarize, reader_base: str = DEFAULT_READER_BASE) -> ToolSpec:
    def fetch(url: str) -> str:
        _check_url(url, reader_base)
        return env.page(url)

    def run(arguments: Mapping[str, Any]) -> str:
        return _crawl_content(arguments, fetch, summarize)

    return ToolSpec(CRAWL_PAGE, _CRAWL_DESCRIPTION, dict(_CRAWL_INPUTS), run)


def live_crawl_spec(
    summarize: Summarize,
    reader_base: str = DEFAULT_READER_BASE,
    timeout: float = 60.0,
    session=None,
) -> ToolSpec:
    """Crawl through a reader proxy that prefixes the target URL and
    returns the page as plain text."""
    import requests

    http = session or requests.Session()

    def fetch(url: str) -> str:
        _check_url(url, reader_base)
        target = proxied_url(reader_base, url)
        try:
            response = http.get(target, timeout=timeout)
        except requests.RequestException as exc:
            raise FetchError(f"Error reading page: {exc} for url: {target}") from exc
        if response.status_code >= 400:
            raise FetchError(
                f"Error reading page: {response.status_code} {response.reason} for url: {target}"
            )
        return response.text

    def run(arguments: Mapping[str, Any]) -> str:
        return _crawl_content(arguments, fetch, summarize)

    return ToolSpec(CRAWL_PAGE, _CRAWL_DESCRIPTION, dict(_CRAWL_INPUTS), run)


def mock_registry(fixtures_dir: str | FsPath, summarize: Summarize) -> ToolRegistry:
    """The standard three-tool registry wired to fixtures. Hermetic."""
    env = MockWebEnvironment(fixtures_dir)
    return ToolRegistry([mock_search_spec(env), mock_crawl_spec(env, summarize)])
