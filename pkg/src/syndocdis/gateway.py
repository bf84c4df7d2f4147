"""Dispatch prompts to a chat-completion provider, or to a deterministic mock.

The remote path speaks the OpenAI-compatible ``/chat/completions`` JSON
shape so any conforming endpoint (hosted or local) can serve generation.
The mock path produces a canonical-format dialogue that satisfies every
structural validation rule for its metadata; it is the structural oracle
the parser and validator are tested against, and it lets the whole
pipeline run offline.
"""
from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import requests

from .metadata import CaseMetadata
from .prompts import physician_declaration

ENV_API_KEY = "SYNDOCDIS_API_KEY"
ENV_API_BASE = "SYNDOCDIS_API_BASE"
ENV_MODEL = "SYNDOCDIS_MODEL"

DEFAULT_API_BASE = "https://api.openai.com/v1"
DEFAULT_MODEL = "gpt-4"

BACKOFF_BASE = 1.0
BACKOFF_FACTOR = 2.0
BACKOFF_JITTER = 0.1  # multiplicative, in [0, BACKOFF_JITTER)


class GatewayError(Exception):
    """Base class for generation failures."""


class AuthError(GatewayError):
    """Credentials rejected (HTTP 401/403); never retried."""


class RateLimited(GatewayError):
    """HTTP 429 persisted through every retry."""


class TransportError(GatewayError):
    """Network failure or server error that outlived the retry budget."""


class EmptyCompletion(GatewayError):
    """Provider returned a completion with no text."""


class InfeasibleConstraints(GatewayError):
    """Metadata asks for replies but lists nobody to reply."""


@dataclass(frozen=True)
class GenerationRequest:
    model_name: str
    system_message: str
    user_message: str
    temperature: float = 0.7
    max_output_tokens: int = 2048
    seed: int | None = None
    timeout: float = 60.0
    max_retries: int = 3

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def fingerprint(self) -> str:
        """Hash of the full request; changes iff any field changes."""
        payload = json.dumps(
            {
                "model_name": self.model_name,
                "system_message": self.system_message,
                "user_message": self.user_message,
                "temperature": self.temperature,
                "max_output_tokens": self.max_output_tokens,
                "seed": self.seed,
                "timeout": self.timeout,
                "max_retries": self.max_retries,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class GenerationResult:
    raw_text: str
    provider_id: str
    model_name: str
    latency: float
    request_fingerprint: str

    def __post_init__(self):
        if not self.raw_text:
            raise ValueError("raw_text must be non-empty on success")


# A transport takes (url, headers, json_body, timeout) and returns
# (status_code, parsed_body).  Swappable so tests can script failures.
Transport = Callable[[str, dict, dict, float], tuple[int, dict]]


def _requests_transport(url: str, headers: dict, body: dict, timeout: float) -> tuple[int, dict]:
    response = requests.post(url, headers=headers, json=body, timeout=timeout)
    try:
        payload = response.json()
    except ValueError:
        payload = {"raw": response.text}
    return response.status_code, payload


class RateLimiter:
    """Token bucket; serialized access, used to pace concurrent batch calls."""

    def __init__(self, rate_per_sec: float, burst: int = 1, clock=time.monotonic, sleep=time.sleep):
        self._rate = rate_per_sec
        self._burst = burst
        self._tokens = float(burst)
        self._last = clock()
        self._lock = threading.Lock()
        self._clock = clock
        self._sleep = sleep

    def acquire(self):
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self._burst, self._tokens + (now - self._last) * self._rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                needed = (1.0 - self._tokens) / self._rate
            self._sleep(needed)


def generate_remote(
    req: GenerationRequest,
    api_key: str | None = None,
    api_base: str | None = None,
    transport: Transport = _requests_transport,
    sleep: Callable[[float], None] = time.sleep,
    clock: Callable[[], float] = time.monotonic,
    rng: random.Random | None = None,
) -> GenerationResult:
    """POST the request to ``<base>/chat/completions`` and return the first
    assistant message.

    Transient failures (429, 5xx, network errors) are retried with
    exponential backoff: base 1 s, factor 2, multiplicative jitter, at most
    ``req.max_retries`` retries.  401/403 fail immediately.
    """
    api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY)
    if not api_key:
        raise AuthError(f"no API key: set {ENV_API_KEY} or pass api_key")
    api_base = api_base or os.environ.get(ENV_API_BASE) or DEFAULT_API_BASE
    url = api_base.rstrip("/") + "/chat/completions"
    headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
    body = {
        "model": req.model_name,
        "messages": [
            {"role": "system", "content": req.system_message},
            {"role": "user", "content": req.user_message},
        ],
        "temperature": req.temperature,
        "max_tokens": req.max_output_tokens,
    }
    if req.seed is not None:
        body["seed"] = req.seed
    rng = rng or random.Random()

    started = clock()
    last_failure: GatewayError | None = None
    for attempt in range(req.max_retries + 1):
        try:
            status, payload = transport(url, headers, body, req.timeout)
        except (requests.Timeout, requests.ConnectionError, TimeoutError, ConnectionError) as exc:
            last_failure = TransportError(f"transport failure: {exc}")
            status, payload = None, None
        if status is not None:
            if status in (401, 403):
                raise AuthError(f"provider rejected credentials (HTTP {status})")
            if status == 200:
                content = _extract_content(payload)
                if not content:
                    raise EmptyCompletion("completion had no message content")
                return GenerationResult(
                    raw_text=content,
                    provider_id=api_base,
                    model_name=req.model_name,
                    latency=clock() - started,
                    request_fingerprint=req.fingerprint(),
                )
            if status == 429:
                last_failure = RateLimited(f"rate limited (HTTP {status})")
            elif status >= 500:
                last_failure = TransportError(f"server error (HTTP {status})")
            else:
                raise TransportError(f"unexpected HTTP {status}: {payload}")
        if attempt < req.max_retries:
            delay = BACKOFF_BASE * (BACKOFF_FACTOR**attempt)
            delay *= 1.0 + rng.random() * BACKOFF_JITTER
            sleep(delay)
    assert last_failure is not None
    raise last_failure


def _extract_content(payload: dict) -> str:
    try:
        return payload["choices"][0]["message"]["content"] or ""
    except (KeyError, IndexError, TypeError):
        return ""


# ---------------------------------------------------------------------------
# Deterministic mock generator
# ---------------------------------------------------------------------------

_OPENERS = [
    "Presenting a case for the group's input.",
    "Sharing a case I would value opinions on.",
    "Posting a case for discussion.",
    "Would appreciate the group's thoughts on this case.",
]

_OPENING_QUESTIONS = [
    "What would you recommend as the next step?",
    "How would you manage this patient?",
    "Is there evidence to support a change in management here?",
    "Keen to hear how others would proceed.",
]

_RESPONSES = [
    "Based on the current evidence I would not change management; the data do not support it{cite}.",
    "I agree with a conservative approach here; guidelines favor standard of care{cite}.",
    "Has molecular profiling been completed? That could open additional options{cite}.",
    "In our center we would continue the current regimen and reassess at next imaging{cite}.",
    "I would consider discussing this at the multidisciplinary board before changing course{cite}.",
    "The benefit is unproven in this setting; I would monitor closely instead{cite}.",
    "Worth checking performance status trends before escalating therapy{cite}.",
    "A second imaging review could clarify whether this is truly progression{cite}.",
]

_FOLLOWUPS = [
    "Thanks all, that matches my reading of the evidence.",
    "Good point, I will verify that and report back.",
    "To clarify: the patient remains asymptomatic at this time.",
    "Appreciated; I will raise this at our next team meeting.",
]

_REFERENCE_STUBS = [
    "Clinical practice guideline, current edition, relevant society recommendations.",
    "Randomized trial report covering the regimen under discussion.",
    "Systematic review of treatment outcomes for this indication.",
    "Consensus statement on molecular-driven therapy selection.",
]

MOCK_PROVIDER_ID = "mock"


def _mock_seed(meta: CaseMetadata, seed: int) -> int:
    digest = hashlib.sha256(f"{meta.case_id}|{seed}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def mock_fingerprint(meta: CaseMetadata, seed: int) -> str:
    payload = json.dumps(
        {"meta": meta.to_document(), "seed": seed, "provider": MOCK_PROVIDER_ID},
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def generate_mock(meta: CaseMetadata, seed: int) -> GenerationResult:
    """Deterministic canonical-format dialogue for the given metadata.

    The output opens with the case owner presenting the case, contains
    exactly ``num_responses`` responder turns assigned round-robin over the
    first ``min(num_responses, len(participant_ids))`` participants, one
    case-owner follow-up when two or more replies are requested, a
    references section, and the physician/reply declaration footer.
    Bit-identical across runs and platforms for fixed (meta, seed).
    """
    if meta.num_responses > 0 and not meta.participant_ids:
        raise InfeasibleConstraints(
            f"case {meta.case_id}: {meta.num_responses} responses requested "
            "but no participants listed"
        )
    rng = random.Random(_mock_seed(meta, seed))

    if meta.num_responses <= len(meta.participant_ids):
        responders = list(meta.participant_ids[: meta.num_responses])
    else:
        responders = list(meta.participant_ids)
    speakers = [responders[i % len(responders)] for i in range(meta.num_responses)]
    distinct = list(dict.fromkeys(speakers))

    n_refs = 1 + rng.randrange(0, len(_REFERENCE_STUBS) - 1)
    references = [(n, _REFERENCE_STUBS[(n - 1) % len(_REFERENCE_STUBS)]) for n in range(1, n_refs + 1)]

    lines: list[str] = []
    opener = rng.choice(_OPENERS)
    question = rng.choice(_OPENING_QUESTIONS)
    lines.append(f"Case owner: {opener} {meta.patient_case} {question}")

    followup_after = rng.randrange(1, meta.num_responses) if meta.num_responses >= 2 else None
    for i, doctor_id in enumerate(speakers):
        template = rng.choice(_RESPONSES)
        if rng.random() < 0.5:
            cite = f" [{rng.randrange(1, n_refs + 1)}]"
        else:
            cite = ""
        lines.append(f"Doctor {doctor_id}: {template.format(cite=cite)}")
        if followup_after is not None and i + 1 == followup_after:
            lines.append(f"Case owner: {rng.choice(_FOLLOWUPS)}")

    lines.append("")
    lines.append("References:")
    for number, stub in references:
        lines.append(f"[{number}] {stub}")
    lines.append("")
    lines.append(physician_declaration(distinct))
    lines.append(f"Total replies: R={meta.num_responses}")

    return GenerationResult(
        raw_text="\n".join(lines) + "\n",
        provider_id=MOCK_PROVIDER_ID,
        model_name=MOCK_PROVIDER_ID,
        latency=0.0,
        request_fingerprint=mock_fingerprint(meta, seed),
    )


@dataclass(frozen=True)
class RunManifest:
    """Sidecar record of how a dialogue file was produced."""

    case_id: str
    provider_id: str
    model_name: str
    request_fingerprint: str
    seed: int | None
    timestamp: str
    template_version: str | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)
