"""Deterministic seeded stand-ins for the remote model services.

The synthetic world gives every prompt a hidden reference token set: its own
content tokens plus a few seed-derived "latent detail" tokens. Images are
token sets: the generator renders each content token of its input text,
dropping tokens with probability ``noise_scale`` (deterministically, keyed by
world seed, generation seed, token, and text). Faithfulness then reduces to
token overlap, so the whole optimization loop has a computable ground truth:

* a question is answered correctly iff its correct option's tokens all
  appear in the image token set;
* a chunk's yes-probability is its token overlap fraction with the image;
* with zero noise, score is monotone in token overlap with the reference.

Every component is a pure function of (inputs, seed). Nothing here touches
the network, the filesystem, or wall-clock time.
"""

from __future__ import annotations

import base64
import json
import random
import re
from dataclasses import dataclass

from ..model import ImageRef, McQuestion, NounChunk, QuestionCategory
from ..util import canonical_json, derive_seed, sha256_hex
from .base import BackendSuite, BackendError, ChatMessage

ARTICLES = frozenset({"a", "an", "the"})

# Words that end a noun-ish run: prepositions, conjunctions, linking verbs,
# and the participles common in image prompts.
SEPARATOR_WORDS = frozenset(
    {
        "next", "to", "on", "in", "at", "with", "and", "or", "of", "under", "over",
        "above", "below", "beside", "behind", "near", "by", "between", "against",
        "across", "through", "from", "into", "onto", "upon", "is", "are", "was",
        "were", "while", "as", "riding", "sitting", "standing", "wearing",
        "holding", "flying", "playing", "floating", "resting", "perched",
        "leaning", "walking", "running", "jumping", "looking", "facing",
        "surrounded", "covered", "filled", "made",
    }
)

STOPWORDS = ARTICLES | SEPARATOR_WORDS | frozenset({"this", "that", "these", "those", "its", "their"})

_WORD_RE = re.compile(r"[A-Za-z0-9']+")

LATENT_DETAIL_VOCAB = (
    "shimmering", "weathered", "dappled", "lantern", "mist", "copper", "ivy",
    "dusk", "marble", "feathers", "embers", "frost", "moss", "ripples",
    "gilded", "velvet", "amber", "petals", "smoke", "pebbles",
)

DECOY_VOCAB = (
    "submarine", "accordion", "cactus", "typewriter", "flamingo", "anvil",
    "chandelier", "tractor", "iceberg", "bagpipes", "walrus", "obelisk",
    "zeppelin", "harpsichord", "gargoyle", "sundial", "trombone", "yurt",
    "catapult", "periscope", "monocle", "gondola", "abacus", "sphinx",
)

STYLE_TAGS = (
    "rendered in fine detail",
    "soft golden light",
    "sharp focus",
    "wide angle view",
    "subtle film grain",
    "balanced composition",
    "high clarity",
    "natural tones",
)

_LOCATOR_PREFIX = "synthetic://"


def words_of(text: str) -> list[str]:
    return _WORD_RE.findall(text)


def content_tokens(text: str) -> list[str]:
    """Lowercased alphanumeric tokens with function words removed."""
    return [w.lower() for w in words_of(text) if w.lower() not in STOPWORDS]


def extract_chunks(prompt: str) -> list[str]:
    """Split a prompt into maximal noun-ish token runs.

    Separator words end a run; articles attach to the run they introduce.
    Runs without any content word are discarded.
    """
    chunks: list[str] = []
    current: list[str] = []

    def flush() -> None:
        if any(w.lower() not in ARTICLES for w in current):
            chunks.append(" ".join(current))
        current.clear()

    for word in words_of(prompt):
        lower = word.lower()
        if lower in SEPARATOR_WORDS:
            flush()
        elif lower in ARTICLES:
            if any(w.lower() not in ARTICLES for w in current):
                flush()
            current.append(word)
        else:
            current.append(word)
    flush()
    return chunks


def image_payload(tokens: frozenset[str]) -> bytes:
    """The canonical byte content of a synthetic image: its sorted token set."""
    return canonical_json(sorted(tokens)).encode("utf-8")


def tokens_to_locator(tokens: frozenset[str]) -> str:
    encoded = base64.urlsafe_b64encode(image_payload(tokens)).decode("ascii")
    return _LOCATOR_PREFIX + encoded


def tokens_from_locator(locator: str) -> frozenset[str]:
    if not locator.startswith(_LOCATOR_PREFIX):
        raise BackendError(f"not a synthetic image locator: {locator!r}")
    payload = base64.urlsafe_b64decode(locator[len(_LOCATOR_PREFIX):].encode("ascii"))
    return frozenset(json.loads(payload.decode("utf-8")))


@dataclass(frozen=True)
class SyntheticWorld:
    """Hidden ground truth shared by all synthetic components.

    ``noise_scale`` is the per-token dropout probability applied during image
    generation; ``latent_detail_count`` controls how many off-prompt detail
    tokens belong to each prompt's reference set (0 disables them, making the
    reference exactly the prompt's content tokens).
    """

    seed: int
    noise_scale: float = 0.0
    latent_detail_count: int = 3

    def __post_init__(self) -> None:
        if not 0.0 <= self.noise_scale < 1.0:
            raise ValueError("noise_scale must lie in [0, 1)")
        if self.latent_detail_count < 0:
            raise ValueError("latent_detail_count must be >= 0")

    def unit(self, *parts: object) -> float:
        """Deterministic pseudo-uniform value in [0, 1) keyed by ``parts``."""
        return derive_seed(self.seed, *parts) / float(2**63)

    def latent_tokens(self, prompt: str) -> tuple[str, ...]:
        if self.latent_detail_count == 0:
            return ()
        rng = random.Random(derive_seed(self.seed, "latent", prompt))
        count = min(self.latent_detail_count, len(LATENT_DETAIL_VOCAB))
        return tuple(rng.sample(LATENT_DETAIL_VOCAB, count))

    def reference_tokens(self, prompt: str) -> frozenset[str]:
        return frozenset(content_tokens(prompt)) | frozenset(self.latent_tokens(prompt))

    def image_tokens(self, text: str, generation_seed: int) -> frozenset[str]:
        kept = {
            token
            for token in content_tokens(text)
            if self.unit("image", generation_seed, token, text) >= self.noise_scale
        }
        return frozenset(kept)


class SyntheticParaphraser:
    """Seeded text rewriter: keeps the input's substance, varies its surface.

    Each variant may drop a detail, inject latent-detail tokens from the
    world's reference set, and appends a per-index style tag so the outputs
    of one call are textually distinct. ``perturbation_rate`` 0 disables all
    edits and every variant equals the input verbatim.
    """

    kind = "paraphraser"

    def __init__(self, world: SyntheticWorld, perturbation_rate: float = 0.3):
        if not 0.0 <= perturbation_rate <= 1.0:
            raise ValueError("perturbation_rate must lie in [0, 1]")
        self.world = world
        self.perturbation_rate = perturbation_rate

    def fingerprint(self) -> dict[str, object]:
        return {
            "name": "synthetic-paraphraser",
            "world_seed": self.world.seed,
            "noise_scale": self.world.noise_scale,
            "latent_detail_count": self.world.latent_detail_count,
            "perturbation_rate": self.perturbation_rate,
        }

    def paraphrase(self, prompt: str, m: int, seed: int) -> list[str]:
        # Variant i depends only on (prompt, seed, i), never on m, so a
        # smaller m yields a prefix of a larger m's output.
        return [self._variant(prompt, seed, i) for i in range(m)]

    def _variant(self, prompt: str, seed: int, index: int) -> str:
        rate = self.perturbation_rate
        if rate == 0.0:
            return prompt
        rng = random.Random(derive_seed(self.world.seed, "paraphrase", prompt, seed, index))

        words = words_of(prompt)
        kept = [w for w in words if w.lower() in STOPWORDS or rng.random() >= 0.15 * rate]
        if not any(w.lower() not in STOPWORDS for w in kept):
            kept = words[:]

        parts = [" ".join(kept)]
        extras = [tok for tok in self.world.latent_tokens(prompt) if rng.random() < 0.6 * rate]
        if extras:
            parts.append("with " + " ".join(extras))

        style_base = random.Random(derive_seed(self.world.seed, "style", prompt, seed)).randrange(
            len(STYLE_TAGS)
        )
        parts.append(STYLE_TAGS[(style_base + index) % len(STYLE_TAGS)])
        return ", ".join(parts)


class SyntheticImageGenerator:
    """Maps text to the token set the frozen image model would render."""

    kind = "image_gen"

    def __init__(self, world: SyntheticWorld):
        self.world = world
        self.generator_id = f"synthetic-image-w{world.seed}"

    def fingerprint(self) -> dict[str, object]:
        return {
            "name": "synthetic-image",
            "world_seed": self.world.seed,
            "noise_scale": self.world.noise_scale,
        }

    def generate(self, prompt: str, seed: int) -> ImageRef:
        tokens = self.world.image_tokens(prompt, seed)
        payload = image_payload(tokens)
        return ImageRef(
            content_id=sha256_hex(payload),
            locator=tokens_to_locator(tokens),
            generator_id=self.generator_id,
            generation_seed=seed,
        )


class SyntheticChunkExtractor:
    kind = "chunk_extract"

    def __init__(self, world: SyntheticWorld):
        self.world = world

    def fingerprint(self) -> dict[str, object]:
        return {"name": "synthetic-chunker"}

    def extract(self, prompt: str) -> list[str]:
        return extract_chunks(prompt)


class SyntheticQuestionGenerator:
    """Builds one multiple-choice question per noun chunk, cycling as needed.

    The correct option is the chunk's content form; distractors come from a
    fixed decoy vocabulary, sampled and shuffled deterministically.
    """

    kind = "question_gen"

    def __init__(self, world: SyntheticWorld, options_per_question: int = 4):
        if options_per_question < 2:
            raise ValueError("options_per_question must be >= 2")
        self.world = world
        self.options_per_question = options_per_question

    def fingerprint(self) -> dict[str, object]:
        return {
            "name": "synthetic-questions",
            "world_seed": self.world.seed,
            "options_per_question": self.options_per_question,
        }

    def generate(self, prompt: str, q: int, seed: int) -> list[McQuestion]:
        chunks = extract_chunks(prompt)
        if not chunks:
            raise BackendError("question generation failed: no scorable content", kind=self.kind)
        questions = []
        for i in range(q):
            chunk = chunks[i % len(chunks)]
            core_tokens = content_tokens(chunk)
            core = " ".join(core_tokens) if core_tokens else chunk.lower()
            rng = random.Random(derive_seed(self.world.seed, "question", prompt, seed, i))
            pool = [d for d in DECOY_VOCAB if d not in core_tokens]
            distractors = rng.sample(pool, self.options_per_question - 1)
            options = distractors + [core]
            rng.shuffle(options)
            category = QuestionCategory.OBJECT if len(core_tokens) <= 1 else QuestionCategory.ATTRIBUTE
            questions.append(
                McQuestion(
                    question="Which of the following appears in the image?",
                    options=tuple(options),
                    correct_index=options.index(core),
                    category=category,
                )
            )
        return questions


class SyntheticVqaAnswerer:
    """Answers correctly iff the correct option's tokens all appear in the image."""

    kind = "vqa_answer"

    def __init__(self, world: SyntheticWorld):
        self.world = world

    def fingerprint(self) -> dict[str, object]:
        return {"name": "synthetic-vqa", "world_seed": self.world.seed}

    def answer(self, image: ImageRef, question: McQuestion) -> int:
        image_tokens = tokens_from_locator(image.locator)
        correct_tokens = set(content_tokens(question.options[question.correct_index]))
        if correct_tokens <= image_tokens:
            return question.correct_index
        return (question.correct_index + 1) % len(question.options)


class SyntheticYesProbability:
    """Token-overlap fraction between the chunk and the image token set."""

    kind = "yes_prob"

    def __init__(self, world: SyntheticWorld):
        self.world = world

    def fingerprint(self) -> dict[str, object]:
        return {"name": "synthetic-yesprob", "world_seed": self.world.seed}

    def probability(self, image: ImageRef, chunk: NounChunk) -> float:
        chunk_tokens = set(content_tokens(chunk.text))
        if not chunk_tokens:
            return 0.0
        image_tokens = tokens_from_locator(image.locator)
        return len(chunk_tokens & image_tokens) / len(chunk_tokens)


class SyntheticCompletion:
    """One-pass prompt improver: echoes the last user prompt with added detail.

    Honors the dialogue framing: strips a leading "User Prompt:" from the
    request and frames its reply with "Improved Prompt:".
    """

    kind = "one_pass_llm"

    def __init__(self, world: SyntheticWorld):
        self.world = world

    def fingerprint(self) -> dict[str, object]:
        return {"name": "synthetic-completion", "world_seed": self.world.seed}

    def complete(self, messages: list[ChatMessage], seed: int) -> str:
        user_texts = [msg.content for msg in messages if msg.role == "user"]
        source = user_texts[-1] if user_texts else messages[-1].content
        if source.startswith("User Prompt:"):
            source = source[len("User Prompt:"):].strip()
        rng = random.Random(derive_seed(self.world.seed, "complete", source, seed))
        extras = self.world.latent_tokens(source)[:2]
        improved = source
        if extras:
            improved += ", with " + " ".join(extras)
        improved += ", " + STYLE_TAGS[rng.randrange(len(STYLE_TAGS))]
        return f"Improved Prompt: {improved}"


def synthetic_suite(
    seed: int,
    *,
    noise_scale: float = 0.0,
    latent_detail_count: int = 3,
    perturbation_rate: float = 0.3,
    cache=None,
) -> BackendSuite:
    """Build a full backend suite over one shared synthetic world."""
    world = SyntheticWorld(seed=seed, noise_scale=noise_scale, latent_detail_count=latent_detail_count)
    return BackendSuite(
        paraphraser=SyntheticParaphraser(world, perturbation_rate=perturbation_rate),
        image_gen=SyntheticImageGenerator(world),
        chunk_extractor=SyntheticChunkExtractor(world),
        question_gen=SyntheticQuestionGenerator(world),
        vqa_answerer=SyntheticVqaAnswerer(world),
        yes_prob=SyntheticYesProbability(world),
        one_pass_llm=SyntheticCompletion(world),
        cache=cache,
    )
