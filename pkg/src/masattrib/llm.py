"""OpenAI-compatible chat-completions client, pricing, and the counterfactual judge prompt."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import httpx

logger = logging.getLogger(__name__)


class LLMError(RuntimeError):
    pass


class ConfigurationError(LLMError):
    pass


class AuthenticationError(LLMError):
    pass


class RateLimitError(LLMError):
    pass


class ServerError(LLMError):
    pass


class RequestTimeoutError(LLMError):
    pass


class ClientRequestError(LLMError):
    """Non-retryable 4xx response other than auth and rate limits."""


class ResponseFormatError(LLMError):
    pass


class PricingError(KeyError):
    pass


@dataclass(frozen=True)
class ModelEndpoint:
    base_url: str
    model: str
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    temperature: float = 0.0
    max_concurrency: int = 4

    def __post_init__(self):
        if self.timeout <= 0:
            raise ConfigurationError("timeout must be positive")
        if self.max_retries < 0:
            raise ConfigurationError("max_retries must be >= 0")
        if self.max_concurrency < 1:
            raise ConfigurationError("max_concurrency must be >= 1")

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"


@dataclass(frozen=True)
class ChatResult:
    text: str
    prompt_tokens: int
    completion_tokens: int
    model: Optional[str] = None


@dataclass(frozen=True)
class RequestRecord:
    model: str
    attempt: int
    status: Optional[int]
    prompt_tokens: int = 0
    completion_tokens: int = 0
    error: Optional[str] = None


@dataclass(frozen=True)
class PricingTable:
    """USD per 1K tokens: ``{model: (prompt_price, completion_price)}``."""

    per_model: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for model, prices in self.per_model.items():
            if isinstance(prices, Mapping):
                prices = (prices["prompt"], prices["completion"])
            p, q = (float(x) for x in prices)
            if p < 0 or q < 0:
                raise PricingError(f"negative price for {model!r}")
            clean[str(model)] = (p, q)
        object.__setattr__(self, "per_model", clean)

    def __contains__(self, model) -> bool:
        return model in self.per_model


def price(tokens: Mapping[str, int], model: str, table: PricingTable) -> float:
    """Cost of ``{"prompt": ..., "completion": ...}`` tokens for ``model``."""
    try:
        p, q = table.per_model[model]
    except KeyError:
        raise PricingError(f"model {model!r} not in pricing table; known: {sorted(table.per_model)}") from None
    return tokens.get("prompt", 0) * p / 1000.0 + tokens.get("completion", 0) * q / 1000.0


class ChatClient:
    """Shareable chat client with retries and a per-request ledger.

    Transient failures (5xx, 429, timeouts, connection errors) are retried
    with exponential backoff; a ``Retry-After`` header overrides the backoff.
    """

    def __init__(self, *, backoff_base: float = 1.0, backoff_cap: float = 30.0,
                 transport: Optional[httpx.BaseTransport] = None, sleep=time.sleep):
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._http = httpx.Client(transport=transport)
        self._sleep = sleep
        self._ledger: list = []
        self._ledger_lock = threading.Lock()
        self._slots: dict = {}
        self._slots_lock = threading.Lock()

    @property
    def ledger(self) -> list:
        with self._ledger_lock:
            return list(self._ledger)

    def _record(self, rec: RequestRecord):
        with self._ledger_lock:
            self._ledger.append(rec)

    def _slot(self, endpoint: ModelEndpoint) -> threading.Semaphore:
        key = (endpoint.url, endpoint.model)
        with self._slots_lock:
            if key not in self._slots:
                self._slots[key] = threading.Semaphore(endpoint.max_concurrency)
            return self._slots[key]

    def close(self):
        self._http.close()

    def chat(self, endpoint: ModelEndpoint, messages: Sequence[Mapping[str, str]]) -> ChatResult:
        key = os.environ.get(endpoint.api_key_env)
        if not key:
            raise ConfigurationError(f"environment variable {endpoint.api_key_env} is not set")
        body = {"model": endpoint.model, "messages": [dict(m) for m in messages],
                "temperature": endpoint.temperature}
        headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
        with self._slot(endpoint):
            return self._send(endpoint, body, headers)

    def _send(self, endpoint, body, headers) -> ChatResult:
        attempt = 0
        while True:
            attempt += 1
            wait = None
            try:
                resp = self._http.post(endpoint.url, json=body, headers=headers, timeout=endpoint.timeout)
            except httpx.TimeoutException as exc:
                self._record(RequestRecord(endpoint.model, attempt, None, error="timeout"))
                err = RequestTimeoutError(f"{endpoint.url} timed out after {endpoint.timeout}s")
                err.__cause__ = exc
            except httpx.TransportError as exc:
                self._record(RequestRecord(endpoint.model, attempt, None, error=type(exc).__name__))
                err = ServerError(f"transport failure talking to {endpoint.url}: {exc}")
            else:
                status = resp.status_code
                if status == 200:
                    result = _parse_completion(resp)
                    self._record(RequestRecord(endpoint.model, attempt, status,
                                               result.prompt_tokens, result.completion_tokens))
                    return result
                self._record(RequestRecord(endpoint.model, attempt, status, error=resp.text[:200]))
                if status in (401, 403):
                    raise AuthenticationError(f"{status} from {endpoint.url}: {resp.text[:200]}")
                if status == 429:
                    err = RateLimitError(f"rate limited by {endpoint.url}")
                    wait = _retry_after(resp)
                elif status >= 500:
                    err = ServerError(f"{status} from {endpoint.url}")
                    wait = _retry_after(resp)
                else:
                    raise ClientRequestError(f"{status} from {endpoint.url}: {resp.text[:200]}")
            if attempt > endpoint.max_retries:
                raise err
            if wait is None:
                wait = min(self.backoff_cap, self.backoff_base * 2 ** (attempt - 1))
            logger.warning("%s; retry %d/%d in %.2fs", err, attempt, endpoint.max_retries, wait)
            self._sleep(wait)


def _retry_after(resp: httpx.Response) -> Optional[float]:
    raw = resp.headers.get("retry-after")
    if raw is None:
        return None
    try:
        return max(0.0, float(raw))
    except ValueError:
        return None


def _parse_completion(resp: httpx.Response) -> ChatResult:
    try:
        data = resp.json()
        text = data["choices"][0]["message"]["content"]
        usage = data["usage"]
        return ChatResult(text or "", int(usage["prompt_tokens"]), int(usage["completion_tokens"]),
                          data.get("model"))
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ResponseFormatError(f"malformed chat completion: {exc!r}") from exc


JUDGE_SYSTEM = (
    "You are a counterfactual evaluator for a multi-agent system. Given the task, the lead "
    "orchestrator's transcript, and each sub-agent's contribution, decide whether the task "
    "would still succeed if a specified subset of agents were ignored."
)


def _agent_ref(i: int, labels: Optional[Mapping[int, str]]) -> str:
    if labels and labels.get(i):
        return f"{i} ({labels[i]})"
    return str(i)


def render_judge_prompt(task: str, transcripts: Mapping[int, str], ablated, *,
                        labels: Optional[Mapping[int, str]] = None, lead: Optional[int] = None) -> list:
    """Build the judge messages marking each agent ACTIVE or ABLATED."""
    ablated = set(int(i) for i in ablated)
    ids = sorted(int(i) for i in transcripts)
    missing = ablated - set(ids)
    if missing:
        raise KeyError(f"no transcript for agent(s) {sorted(missing)}")
    if lead is not None and lead not in transcripts:
        raise KeyError(f"no transcript for lead agent {lead}")

    def tag(i):
        return "ABLATED" if i in ablated else "ACTIVE"

    lines = [f"Task: {task}"]
    if lead is not None:
        lines.append(f"Lead transcript [{tag(lead)}]: {transcripts[lead]}")
    lines.append("Per-agent transcripts:")
    for i in ids:
        if i == lead:
            continue
        lines.append(f"- Agent {_agent_ref(i, labels)} [{tag(i)}]: {transcripts[i]}")
    off = [_agent_ref(i, labels) for i in ids if i in ablated]
    on = [_agent_ref(i, labels) for i in ids if i not in ablated]
    lines.append(f"Instruction: disregard agents [{', '.join(off)}]; consider only [{', '.join(on)}].")
    lines.append("")
    lines.append("Counterfactually, would the task succeed using only the active agents?")
    lines.append('Reply as JSON: {"success": 0/1, "reasoning": "..."}.')
    return [{"role": "system", "content": JUDGE_SYSTEM}, {"role": "user", "content": "\n".join(lines)}]


def parse_verdict(text: str) -> dict:
    """Parse ``{"success": 0|1, "reasoning": str}``; tolerates a fenced code block."""
    body = text.strip()
    if body.startswith("```"):
        body = body.strip("`")
        if body.lower().startswith("json"):
            body = body[4:]
    try:
        data = json.loads(body)
    except ValueError as exc:
        raise ResponseFormatError(f"judge reply is not JSON: {text[:80]!r}") from exc
    if not isinstance(data, dict):
        raise ResponseFormatError("judge reply must be a JSON object")
    success = data.get("success")
    if isinstance(success, bool) or not isinstance(success, int) or success not in (0, 1):
        raise ResponseFormatError(f"judge 'success' must be 0 or 1, got {success!r}")
    if not isinstance(data.get("reasoning"), str):
        raise ResponseFormatError("judge reply lacks a string 'reasoning' field")
    return {"success": int(success), "reasoning": data["reasoning"]}
