"""Pluggable chat-completion backends with schema-validated responses.

Every call requests structured JSON and validates it against a schema;
free-text answers are retried and, after ``max_retries`` failures, raise
``SchemaViolationError`` so callers can take their documented fallback.

The scripted mock replays a fixture keyed by (iteration, stage, leaf id),
which is how offline runs reproduce a fixed confounder schedule.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol

import httpx
import jsonschema

log = logging.getLogger(__name__)

LLM_KEY_ENV = "CONFLOOP_LLM_KEY"


class BackendError(RuntimeError):
    """Backend failed to produce a usable response."""


class SchemaViolationError(BackendError):
    """Response failed schema validation after all retries."""


class MockFixtureError(BackendError):
    """Scripted fixture lacks an entry the run needs."""


class AgentBackend(Protocol):
    name: str

    def complete(self, prompt: str, response_schema: Mapping, context: Mapping) -> dict: ...


def validate_response(payload: object, schema: Mapping) -> dict:
    try:
        jsonschema.validate(payload, dict(schema))
    except jsonschema.ValidationError as exc:
        raise SchemaViolationError(f"response violates schema: {exc.message}") from None
    return payload  # type: ignore[return-value]


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = ""
    model: str = ""
    temperature: float = 0.0
    max_retries: int = 3


class HttpAgentBackend:
    """Chat-completion HTTP client (messages array + JSON-schema response).

    The bearer token comes from the CONFLOOP_LLM_KEY environment variable;
    endpoint and model name from the run configuration.
    """

    def __init__(self, config: BackendConfig, client: httpx.Client | None = None):
        if not config.endpoint:
            raise BackendError("http backend requires an endpoint")
        self.config = config
        self.name = f"http:{config.model or config.endpoint}"
        self._client = client or httpx.Client(timeout=120.0)

    def complete(self, prompt: str, response_schema: Mapping, context: Mapping) -> dict:
        key = os.environ.get(LLM_KEY_ENV, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
            "response_format": {"type": "json_schema", "json_schema": dict(response_schema)},
        }
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            try:
                resp = self._client.post(self.config.endpoint, json=payload, headers=headers)
                resp.raise_for_status()
                content = resp.json()["choices"][0]["message"]["content"]
                return validate_response(json.loads(content), response_schema)
            except (httpx.HTTPError, KeyError, json.JSONDecodeError, SchemaViolationError) as exc:
                last_error = exc
                log.warning("backend call failed (attempt %d/%d): %s",
                            attempt + 1, self.config.max_retries + 1, exc)
        raise SchemaViolationError(f"backend failed after retries: {last_error}")


# Built-in responses used when a fixture omits a stage entirely. The reason
# default is empty, so a fixture that only scripts its schedule terminates
# the loop once the schedule runs out.
_BUILTIN_STAGE_DEFAULTS: dict[str, dict] = {
    "explain": {"narrative": ""},
    "decompose": {
        "subqueries": [
            {"text": "What factors influence both the treatment choice and the outcome in this subgroup?",
             "source": "rag"}
        ]
    },
    "reason": {"confounders": []},
}


class MockAgentBackend:
    """Deterministic scripted backend driven by a fixture file.

    Fixture layout (JSON)::

        {
          "stages":     {"explain": {"*": {...}}, ...},   # optional fallbacks
          "iterations": [ {"reason": {"*": {...}}}, ... ],# 1-based loop order
          "final":      {"reason": {"*": {...}}}          # past the schedule
        }

    Stage blocks map a leaf id (as a string) or ``"*"`` to the scripted
    response. Lookup order: the iteration's block, then ``stages``, then
    ``final`` (past the schedule), then a built-in default. The builtin
    ``reason`` default proposes nothing, so a schedule exhausting naturally
    ends the run.
    """

    name = "mock"

    def __init__(self, fixture: Mapping | str | Path):
        if isinstance(fixture, (str, Path)):
            fixture = json.loads(Path(fixture).read_text(encoding="utf-8"))
        self.fixture: dict = dict(fixture)
        self.iterations: list[dict] = list(self.fixture.get("iterations", []))
        self.stage_defaults: dict = dict(self.fixture.get("stages", {}))
        self.final: dict = dict(self.fixture.get("final", {}))

    def _stage_block(self, iteration: int, stage: str) -> Mapping | None:
        if 1 <= iteration <= len(self.iterations):
            block = self.iterations[iteration - 1].get(stage)
            if block is not None:
                return block
        elif iteration > len(self.iterations):
            block = self.final.get(stage)
            if block is not None:
                return block
        return self.stage_defaults.get(stage)

    def complete(self, prompt: str, response_schema: Mapping, context: Mapping) -> dict:
        iteration = int(context.get("iteration", 1))
        stage = str(context.get("stage", ""))
        leaf_id = context.get("leaf_id")
        block = self._stage_block(iteration, stage)
        if block is None:
            if stage not in _BUILTIN_STAGE_DEFAULTS:
                raise MockFixtureError(f"no scripted response for stage {stage!r}")
            response = _BUILTIN_STAGE_DEFAULTS[stage]
        else:
            response = block.get(str(leaf_id), block.get("*"))
            if response is None:
                raise MockFixtureError(
                    f"fixture has stage {stage!r} for iteration {iteration} but no entry "
                    f"for leaf {leaf_id!r} (add a '*' key for a catch-all)"
                )
        return validate_response(copy.deepcopy(response), response_schema)


class ReplayBackend:
    """Replays recorded responses keyed by the prompt's SHA-256 hash."""

    name = "replay"

    def __init__(self, responses_by_prompt_sha: Mapping[str, dict]):
        self._responses = dict(responses_by_prompt_sha)

    @classmethod
    def from_trace_events(cls, events: list[Mapping]) -> "ReplayBackend":
        responses = {
            str(e["prompt_sha256"]): e["response"]
            for e in events
            if e.get("kind") == "backend_call" and e.get("response") is not None
        }
        return cls(responses)

    def complete(self, prompt: str, response_schema: Mapping, context: Mapping) -> dict:
        import hashlib

        digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        if digest not in self._responses:
            raise BackendError(f"trace has no recorded response for prompt {digest[:12]}…")
        return validate_response(copy.deepcopy(self._responses[digest]), response_schema)
