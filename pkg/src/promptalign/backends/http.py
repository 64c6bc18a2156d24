"""HTTP clients for chat-completion and image-generation style services.

Wire protocol:

* ``POST {endpoint}/chat/completions`` with ``{"model", "messages", "seed",
  "logprobs"}`` (plus ``"temperature"`` on parse-retry); the reply's first
  choice carries ``message.content`` and optional token ``logprobs``.
* ``POST {endpoint}/images`` with ``{"model", "prompt", "seed"}``; the reply
  carries ``url`` or ``b64_data``.

Transport failures are retried with exponential backoff and full jitter
(base 0.5 s, cap 30 s); every issued request passes the per-backend rate
limiter. Secrets come from the environment variable named in
``BackendConfig.auth`` and are never logged.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import os
import random
import re
import threading
import time
from collections import deque
from pathlib import Path
from typing import Any, Callable, Sequence

from ..model import ImageRef, McQuestion, NounChunk, QuestionCategory
from ..scoring import vqa_question_text
from ..util import sha256_hex
from .base import BackendConfig, BackendError, BackendSuite, ChatMessage, TransportError

logger = logging.getLogger(__name__)

BACKOFF_BASE_S = 0.5
BACKOFF_CAP_S = 30.0

Transport = Callable[[str, dict, dict, float], dict]


def requests_transport(url: str, payload: dict, headers: dict, timeout_s: float) -> dict:
    """Default transport: POST JSON via requests; 429/5xx raise TransportError."""
    import requests

    try:
        response = requests.post(url, json=payload, headers=headers, timeout=timeout_s)
    except requests.RequestException as exc:
        raise TransportError(f"request failed: {exc}") from exc
    if response.status_code == 429 or response.status_code >= 500:
        raise TransportError(f"retryable status {response.status_code}")
    if response.status_code >= 400:
        raise BackendError(f"request rejected with status {response.status_code}")
    return response.json()


class RateLimiter:
    """Sliding-window limiter: at most ``limit`` acquisitions per 60 seconds."""

    def __init__(
        self,
        limit_per_min: int,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if limit_per_min <= 0:
            raise ValueError("limit_per_min must be > 0")
        self.limit = limit_per_min
        self._clock = clock
        self._sleep = sleep
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= 60.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.limit:
                    self._stamps.append(now)
                    return
                wait = 60.0 - (now - self._stamps[0])
            self._sleep(max(wait, 0.0))


class HttpClient:
    """Shared POST machinery: auth, rate limit, bounded parallelism, retries."""

    def __init__(
        self,
        config: BackendConfig,
        transport: Transport | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
        max_parallel: int = 8,
    ) -> None:
        self.config = config
        self.transport = transport or requests_transport
        self._sleep = sleep
        self._rng = rng or random.Random()
        self.limiter = RateLimiter(config.rate_limit_per_min, clock=clock, sleep=sleep)
        self._slots = threading.BoundedSemaphore(max_parallel)
        self.last_attempts = 0

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.auth:
            secret = os.environ.get(self.config.auth)
            if secret is None:
                raise BackendError(
                    f"missing secret: environment variable {self.config.auth} is not set",
                    kind=self.config.kind,
                )
            headers["Authorization"] = f"Bearer {secret}"
        return headers

    def post(self, path: str, payload: dict) -> dict:
        url = self.config.endpoint.rstrip("/") + path
        timeout_s = self.config.timeout_ms / 1000.0
        headers = self._headers()
        attempts = 0
        while True:
            attempts += 1
            self.last_attempts = attempts
            self.limiter.acquire()
            try:
                with self._slots:
                    return self.transport(url, payload, headers, timeout_s)
            except TransportError as exc:
                if attempts > self.config.max_retries:
                    raise TransportError(
                        f"{self.config.kind}: gave up after {attempts} attempts: {exc}",
                        kind=self.config.kind,
                    ) from exc
                delay = self._rng.uniform(0.0, min(BACKOFF_CAP_S, BACKOFF_BASE_S * 2 ** (attempts - 1)))
                logger.debug(
                    "%s: attempt %d failed (%s), retrying in %.2fs",
                    self.config.kind,
                    attempts,
                    exc,
                    delay,
                )
                self._sleep(delay)


class ChatService:
    """Chat-completions endpoint wrapper used by all text-shaped backends."""

    def __init__(self, config: BackendConfig, client: HttpClient | None = None, **client_kwargs: Any):
        self.config = config
        self.client = client or HttpClient(config, **client_kwargs)

    def chat(
        self,
        messages: Sequence[ChatMessage],
        seed: int,
        *,
        logprobs: bool = False,
        temperature: float | None = None,
    ) -> tuple[str, Any]:
        payload: dict[str, Any] = {
            "model": self.config.model_id,
            "messages": [msg.as_dict() for msg in messages],
            "seed": seed,
            "logprobs": logprobs,
        }
        if temperature is not None:
            payload["temperature"] = temperature
        data = self.client.post("/chat/completions", payload)
        try:
            choice = data["choices"][0]
            content = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {exc}", kind=self.config.kind) from exc
        if content is None or not str(content).strip():
            raise BackendError("empty completion", kind=self.config.kind)
        return str(content), choice.get("logprobs")


def _parse_lines(text: str) -> list[str]:
    """Split a reply into unique non-blank lines, stripping list markers."""
    seen = set()
    lines = []
    for raw in text.splitlines():
        line = re.sub(r"^\s*(?:[-*]|\d+[.)])\s*", "", raw).strip()
        if line and line not in seen:
            seen.add(line)
            lines.append(line)
    return lines


class HttpParaphraser:
    kind = "paraphraser"

    INSTRUCTION = (
        "You rewrite prompts for a text-to-image generation model. "
        "Reply with exactly {m} paraphrases of the user's prompt, one per line, "
        "with no numbering and no commentary."
    )

    def __init__(self, config: BackendConfig, **kwargs: Any):
        self.service = ChatService(config, **kwargs)

    def fingerprint(self) -> dict[str, object]:
        return {"name": "http-paraphraser", "model_id": self.service.config.model_id}

    def paraphrase(self, prompt: str, m: int, seed: int) -> list[str]:
        messages = [
            ChatMessage("system", self.INSTRUCTION.format(m=m)),
            ChatMessage("user", prompt),
        ]
        content, _ = self.service.chat(messages, seed)
        lines = _parse_lines(content)
        if len(lines) < m:
            # One retry at a higher sampling temperature before giving up.
            content, _ = self.service.chat(messages, seed, temperature=1.0)
            lines = _parse_lines(content)
        if len(lines) < m:
            raise BackendError(
                f"insufficient paraphrases: wanted {m}, got {len(lines)}", kind=self.kind
            )
        return lines[:m]


class HttpImageGenerator:
    """Image endpoint client; hashes the returned bytes for the content id."""

    kind = "image_gen"

    def __init__(
        self,
        config: BackendConfig,
        image_dir: str | Path | None = None,
        fetch_bytes: Callable[[str], bytes] | None = None,
        **kwargs: Any,
    ):
        self.config = config
        self.client = HttpClient(config, **kwargs)
        self.image_dir = Path(image_dir) if image_dir else None
        self._fetch_bytes = fetch_bytes or _fetch_url_bytes

    def fingerprint(self) -> dict[str, object]:
        return {"name": "http-image", "model_id": self.config.model_id}

    def generate(self, prompt: str, seed: int) -> ImageRef:
        data = self.client.post(
            "/images", {"model": self.config.model_id, "prompt": prompt, "seed": seed}
        )
        if "b64_data" in data:
            blob = base64.b64decode(data["b64_data"])
            content_id = sha256_hex(blob)
            if self.image_dir is not None:
                self.image_dir.mkdir(parents=True, exist_ok=True)
                path = self.image_dir / f"{content_id}.img"
                if not path.exists():
                    path.write_bytes(blob)
                locator = str(path)
            else:
                locator = "data:application/octet-stream;base64," + data["b64_data"]
        elif "url" in data:
            blob = self._fetch_bytes(data["url"])
            content_id = sha256_hex(blob)
            locator = data["url"]
        else:
            raise BackendError("image response carries neither url nor b64_data", kind=self.kind)
        return ImageRef(
            content_id=content_id,
            locator=locator,
            generator_id=self.config.model_id,
            generation_seed=seed,
        )


def _fetch_url_bytes(url: str) -> bytes:
    import requests

    try:
        response = requests.get(url, timeout=60)
        response.raise_for_status()
    except requests.RequestException as exc:
        raise TransportError(f"image fetch failed: {exc}", kind="image_gen") from exc
    return response.content


class HttpChunkExtractor:
    kind = "chunk_extract"

    INSTRUCTION = (
        "Extract the noun chunks from the user's image prompt: the objects, "
        "entities and features expected to appear in the image. "
        "Reply with one noun chunk per line and nothing else."
    )

    def __init__(self, config: BackendConfig, **kwargs: Any):
        self.service = ChatService(config, **kwargs)

    def fingerprint(self) -> dict[str, object]:
        return {"name": "http-chunker", "model_id": self.service.config.model_id}

    def extract(self, prompt: str) -> list[str]:
        messages = [ChatMessage("system", self.INSTRUCTION), ChatMessage("user", prompt)]
        content, _ = self.service.chat(messages, seed=0)
        return _parse_lines(content)


class HttpQuestionGenerator:
    kind = "question_gen"

    INSTRUCTION = (
        "Write {q} multiple-choice questions that verify the presence, attributes "
        "or relationships of elements in the user's image prompt. Each question has "
        "exactly one correct answer derived from the prompt and several distractors. "
        'Reply with a JSON array of objects shaped like {{"question": str, '
        '"options": [str, ...], "correct_index": int, "category": '
        '"object"|"attribute"|"relationship"|"other"}} and nothing else.'
    )

    def __init__(self, config: BackendConfig, **kwargs: Any):
        self.service = ChatService(config, **kwargs)

    def fingerprint(self) -> dict[str, object]:
        return {"name": "http-questions", "model_id": self.service.config.model_id}

    def generate(self, prompt: str, q: int, seed: int) -> list[McQuestion]:
        messages = [
            ChatMessage("system", self.INSTRUCTION.format(q=q)),
            ChatMessage("user", prompt),
        ]
        content, _ = self.service.chat(messages, seed)
        questions = self._parse(content)
        if questions is None:
            content, _ = self.service.chat(messages, seed, temperature=1.0)
            questions = self._parse(content)
        if questions is None:
            raise BackendError("question generation failed: unparseable reply", kind=self.kind)
        return questions[:q]

    def _parse(self, content: str) -> list[McQuestion] | None:
        text = content.strip()
        if text.startswith("```"):
            text = re.sub(r"^```[a-z]*\s*|\s*```$", "", text)
        try:
            raw = json.loads(text)
            questions = []
            for item in raw:
                options = tuple(str(o) for o in item["options"])
                correct = int(item["correct_index"])
                if len(options) < 2 or len(set(options)) != len(options):
                    return None
                if not 0 <= correct < len(options):
                    return None
                try:
                    category = QuestionCategory(item.get("category", "other"))
                except ValueError:
                    category = QuestionCategory.OTHER
                questions.append(
                    McQuestion(
                        question=str(item["question"]),
                        options=options,
                        correct_index=correct,
                        category=category,
                    )
                )
            return questions or None
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            return None


class HttpVqaAnswerer:
    kind = "vqa_answer"

    def __init__(self, config: BackendConfig, **kwargs: Any):
        self.service = ChatService(config, **kwargs)

    def fingerprint(self) -> dict[str, object]:
        return {"name": "http-vqa", "model_id": self.service.config.model_id}

    def answer(self, image: ImageRef, question: McQuestion) -> int:
        numbered = "\n".join(f"{i + 1}. {opt}" for i, opt in enumerate(question.options))
        body = (
            f"Image: {image.locator}\n"
            f"Question: {question.question}\n"
            f"Options:\n{numbered}\n"
            f"Reply with the number of the correct option and nothing else."
        )
        messages = [ChatMessage("user", body)]
        content, _ = self.service.chat(messages, seed=0)
        chosen = self._parse_index(content, len(question.options))
        if chosen is None:
            content, _ = self.service.chat(messages, seed=0, temperature=0.2)
            chosen = self._parse_index(content, len(question.options))
        if chosen is None:
            raise BackendError(f"unparseable answer: {content!r}", kind=self.kind)
        return chosen

    @staticmethod
    def _parse_index(content: str, n_options: int) -> int | None:
        match = re.search(r"\d+", content)
        if not match:
            return None
        value = int(match.group()) - 1
        if 0 <= value < n_options:
            return value
        return None


class HttpYesProbability:
    """Yes-probability via token likelihoods when available, else a parsed decimal."""

    kind = "yes_prob"

    def __init__(self, config: BackendConfig, **kwargs: Any):
        self.service = ChatService(config, **kwargs)

    def fingerprint(self) -> dict[str, object]:
        return {"name": "http-yesprob", "model_id": self.service.config.model_id}

    def probability(self, image: ImageRef, chunk: NounChunk) -> float:
        body = f"Image: {image.locator}\n{vqa_question_text(chunk)}\nAnswer Yes or No."
        messages = [ChatMessage("user", body)]
        content, logprobs = self.service.chat(messages, seed=0, logprobs=True)
        value = _yes_probability_from_logprobs(logprobs)
        if value is None:
            value = _parse_probability(content)
        if value is None:
            raise BackendError(f"unparseable probability: {content!r}", kind=self.kind)
        return value


def _yes_probability_from_logprobs(logprobs: Any) -> float | None:
    """P("Yes") normalized over {"Yes", "No"} from the first decoded token."""
    try:
        entries = logprobs["content"][0]["top_logprobs"]
    except (KeyError, IndexError, TypeError):
        return None
    yes_mass = no_mass = 0.0
    for entry in entries:
        token = str(entry.get("token", "")).strip().lower()
        if token == "yes":
            yes_mass = math.exp(float(entry["logprob"]))
        elif token == "no":
            no_mass = math.exp(float(entry["logprob"]))
    if yes_mass == 0.0 and no_mass == 0.0:
        return None
    return yes_mass / (yes_mass + no_mass)


def _parse_probability(content: str) -> float | None:
    stripped = content.strip().lower()
    if stripped.startswith("yes"):
        return 1.0
    if stripped.startswith("no"):
        return 0.0
    match = re.search(r"\d*\.\d+|\d+", content)
    if not match:
        return None
    value = float(match.group())
    if 0.0 <= value <= 1.0:
        return value
    return None


class HttpCompletion:
    kind = "one_pass_llm"

    def __init__(self, config: BackendConfig, **kwargs: Any):
        self.service = ChatService(config, **kwargs)

    def fingerprint(self) -> dict[str, object]:
        return {"name": "http-completion", "model_id": self.service.config.model_id}

    def complete(self, messages: Sequence[ChatMessage], seed: int) -> str:
        content, _ = self.service.chat(messages, seed)
        return content


_COMPONENTS: dict[str, type] = {
    "paraphraser": HttpParaphraser,
    "image_gen": HttpImageGenerator,
    "chunk_extract": HttpChunkExtractor,
    "question_gen": HttpQuestionGenerator,
    "vqa_answer": HttpVqaAnswerer,
    "yes_prob": HttpYesProbability,
    "one_pass_llm": HttpCompletion,
}


def http_suite(
    configs: dict[str, BackendConfig],
    *,
    cache=None,
    image_dir: str | Path | None = None,
    transport: Transport | None = None,
) -> BackendSuite:
    """Build a backend suite from per-kind connection configs.

    Kinds missing from ``configs`` fall back to the ``one_pass_llm`` config
    if present, except ``one_pass_llm`` itself which stays unset.
    """

    def build(kind: str) -> Any:
        config = configs.get(kind)
        if config is None:
            raise BackendError(f"no backend configured for kind {kind!r}", kind=kind)
        kwargs: dict[str, Any] = {"transport": transport} if transport else {}
        if kind == "image_gen":
            kwargs["image_dir"] = image_dir
        return _COMPONENTS[kind](config, **kwargs)

    one_pass = None
    if "one_pass_llm" in configs:
        one_pass = build("one_pass_llm")
    return BackendSuite(
        paraphraser=build("paraphraser"),
        image_gen=build("image_gen"),
        chunk_extractor=build("chunk_extract"),
        question_gen=build("question_gen"),
        vqa_answerer=build("vqa_answer"),
        yes_prob=build("yes_prob"),
        one_pass_llm=one_pass,
        cache=cache,
    )
