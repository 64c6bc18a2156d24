"""Backend plumbing shared by the synthetic and HTTP families.

A ``BackendSuite`` bundles one component per backend kind and fronts every
call with optional response caching and exact call accounting. Counters only
move on real backend invocations; cache hits are free.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Callable, Protocol, Sequence

from ..model import BackendCallStats, ImageRef, McQuestion, NounChunk, QuestionCategory
from ..model import image_ref_from_dict, image_ref_to_dict

KINDS = (
    "paraphraser",
    "image_gen",
    "question_gen",
    "chunk_extract",
    "vqa_answer",
    "yes_prob",
    "one_pass_llm",
)

_KIND_TO_FIELD = {kind: f"{kind}_calls" for kind in KINDS}

ROLES = ("system", "user", "assistant")


class BackendError(RuntimeError):
    """Base error for backend failures; carries the backend kind."""

    def __init__(self, message: str, *, kind: str = ""):
        super().__init__(message)
        self.kind = kind


class TransportError(BackendError):
    """Network-level failure that survived the retry budget."""


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for one remote backend kind.

    ``auth`` names an environment variable holding the secret; the secret
    itself never lives in config files or logs.
    """

    kind: str
    endpoint: str
    model_id: str
    timeout_ms: int = 60_000
    max_retries: int = 3
    rate_limit_per_min: int = 60
    auth: str = ""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown backend kind: {self.kind!r}")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.rate_limit_per_min <= 0:
            raise ValueError("rate_limit_per_min must be > 0")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"invalid role: {self.role!r}")

    def as_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


class CallTracker:
    """Thread-safe monotone counters, one per backend kind."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counts = {kind: 0 for kind in KINDS}

    def increment(self, kind: str, amount: int = 1) -> None:
        if kind not in self._counts:
            raise ValueError(f"unknown backend kind: {kind!r}")
        with self._lock:
            self._counts[kind] += amount

    def count(self, kind: str) -> int:
        with self._lock:
            return self._counts[kind]

    def snapshot(self) -> BackendCallStats:
        with self._lock:
            return BackendCallStats(**{_KIND_TO_FIELD[k]: v for k, v in self._counts.items()})


class ResponseCacheProtocol(Protocol):
    def get(self, key: str) -> Any | None: ...

    def put(self, key: str, value: Any) -> None: ...

    def make_key(self, kind: str, identity: dict[str, Any], payload: dict[str, Any]) -> str: ...


class BackendSuite:
    """One component per backend kind behind a caching, counting facade.

    Components are duck-typed; each exposes its single operation plus a
    ``fingerprint()`` dict that identifies the model and its parameters for
    cache keys and run manifests.
    """

    def __init__(
        self,
        *,
        paraphraser: Any,
        image_gen: Any,
        chunk_extractor: Any,
        question_gen: Any,
        vqa_answerer: Any,
        yes_prob: Any,
        one_pass_llm: Any | None = None,
        cache: ResponseCacheProtocol | None = None,
    ) -> None:
        self.paraphraser = paraphraser
        self.image_gen = image_gen
        self.chunk_extractor = chunk_extractor
        self.question_gen = question_gen
        self.vqa_answerer = vqa_answerer
        self.yes_prob = yes_prob
        self.one_pass_llm = one_pass_llm
        self.cache = cache

    # -- operations ---------------------------------------------------------

    def paraphrase(self, prompt: str, m: int, seed: int, tracker: CallTracker) -> list[str]:
        """Return exactly ``m`` non-empty paraphrases of ``prompt``."""
        if m < 1:
            raise ValueError("m must be >= 1")
        if not prompt.strip():
            raise ValueError("prompt must be non-empty")
        result = self._cached(
            "paraphraser",
            self.paraphraser,
            {"prompt": prompt, "m": m, "seed": seed},
            lambda: list(self.paraphraser.paraphrase(prompt, m, seed)),
            tracker,
        )
        if len(result) != m or any(not p.strip() for p in result):
            raise BackendError(
                f"insufficient paraphrases: wanted {m}, got {len(result)} usable",
                kind="paraphraser",
            )
        return result

    def generate_image(self, prompt: str, seed: int, tracker: CallTracker) -> ImageRef:
        if not prompt.strip():
            raise ValueError("prompt must be non-empty")
        return self._cached(
            "image_gen",
            self.image_gen,
            {"prompt": prompt, "seed": seed},
            lambda: self.image_gen.generate(prompt, seed),
            tracker,
            encode=image_ref_to_dict,
            decode=image_ref_from_dict,
        )

    def extract_noun_chunks(
        self, prompt: str, tracker: CallTracker, *, source_prompt_id: str = ""
    ) -> list[NounChunk]:
        if not prompt.strip():
            raise ValueError("prompt must be non-empty")
        texts = self._cached(
            "chunk_extract",
            self.chunk_extractor,
            {"prompt": prompt},
            lambda: list(self.chunk_extractor.extract(prompt)),
            tracker,
        )
        if not texts:
            raise BackendError("no scorable content: zero noun chunks", kind="chunk_extract")
        return [NounChunk(text=t, source_prompt_id=source_prompt_id) for t in texts]

    def generate_questions(
        self, prompt: str, q: int, seed: int, tracker: CallTracker
    ) -> list[McQuestion]:
        if q < 1:
            raise ValueError("q must be >= 1")
        if not prompt.strip():
            raise ValueError("prompt must be non-empty")
        return self._cached(
            "question_gen",
            self.question_gen,
            {"prompt": prompt, "q": q, "seed": seed},
            lambda: list(self.question_gen.generate(prompt, q, seed)),
            tracker,
            encode=lambda qs: [_question_to_dict(x) for x in qs],
            decode=lambda raw: [_question_from_dict(x) for x in raw],
        )

    def answer_question(self, image: ImageRef, question: McQuestion, tracker: CallTracker) -> int:
        chosen = self._cached(
            "vqa_answer",
            self.vqa_answerer,
            {"content_id": image.content_id, "question": _question_to_dict(question)},
            lambda: self.vqa_answerer.answer(image, question),
            tracker,
        )
        if not 0 <= chosen < len(question.options):
            raise BackendError(f"unparseable answer: index {chosen} out of range", kind="vqa_answer")
        return chosen

    def yes_probability(self, image: ImageRef, chunk: NounChunk, tracker: CallTracker) -> float:
        value = self._cached(
            "yes_prob",
            self.yes_prob,
            {"content_id": image.content_id, "chunk": chunk.text},
            lambda: self.yes_prob.probability(image, chunk),
            tracker,
        )
        if not 0.0 <= value <= 1.0:
            raise BackendError(f"unparseable probability: {value!r}", kind="yes_prob")
        return value

    def complete(self, messages: Sequence[ChatMessage], seed: int, tracker: CallTracker) -> str:
        if self.one_pass_llm is None:
            raise BackendError("one_pass_llm backend not configured", kind="one_pass_llm")
        if not messages:
            raise ValueError("messages must be non-empty")
        reply = self._cached(
            "one_pass_llm",
            self.one_pass_llm,
            {"messages": [msg.as_dict() for msg in messages], "seed": seed},
            lambda: self.one_pass_llm.complete(messages, seed),
            tracker,
        )
        if not reply.strip():
            raise BackendError("empty completion", kind="one_pass_llm")
        return reply

    # -- bookkeeping ---------------------------------------------------------

    def fingerprint(self) -> dict[str, Any]:
        parts = {
            "paraphraser": self.paraphraser.fingerprint(),
            "image_gen": self.image_gen.fingerprint(),
            "chunk_extract": self.chunk_extractor.fingerprint(),
            "question_gen": self.question_gen.fingerprint(),
            "vqa_answer": self.vqa_answerer.fingerprint(),
            "yes_prob": self.yes_prob.fingerprint(),
        }
        if self.one_pass_llm is not None:
            parts["one_pass_llm"] = self.one_pass_llm.fingerprint()
        return parts

    def _cached(
        self,
        kind: str,
        component: Any,
        payload: dict[str, Any],
        call: Callable[[], Any],
        tracker: CallTracker,
        encode: Callable[[Any], Any] = lambda v: v,
        decode: Callable[[Any], Any] = lambda v: v,
    ) -> Any:
        key = None
        if self.cache is not None:
            key = self.cache.make_key(kind, component.fingerprint(), payload)
            hit = self.cache.get(key)
            if hit is not None:
                return decode(hit)
        result = call()
        tracker.increment(kind)
        if self.cache is not None and key is not None:
            self.cache.put(key, encode(result))
        return result


def _question_to_dict(question: McQuestion) -> dict[str, Any]:
    return {
        "question": question.question,
        "options": list(question.options),
        "correct_index": question.correct_index,
        "category": question.category.value,
    }


def _question_from_dict(data: dict[str, Any]) -> McQuestion:
    return McQuestion(
        question=data["question"],
        options=tuple(data["options"]),
        correct_index=data["correct_index"],
        category=QuestionCategory(data["category"]),
    )
