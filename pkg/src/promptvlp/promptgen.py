"""Category-label prompting: templates, LLM backends, caching, and corpus building.

The nine prompt templates each probe a different aspect of a visual category
(colors, shapes, ..., first-person view). For every category surface form
(canonical label plus synonyms) each template is asked ``responses_per_prompt``
times; the resulting descriptions form the text side of the training corpus.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import BackendError, ManifestError, PartialResultError, TemplateError

logger = logging.getLogger(__name__)

PLACEHOLDER = "<category>"

CACHE_FORMAT_VERSION = 1

DEFAULT_RESPONSES_PER_PROMPT = 5


@dataclass(frozen=True)
class PromptTemplate:
    """One prompt template with a single ``<category>`` placeholder."""

    id: str
    template_text: str
    focus: str

    def __post_init__(self):
        n = self.template_text.count(PLACEHOLDER)
        if n != 1:
            raise TemplateError(
                f"template {self.id!r} must contain exactly one {PLACEHOLDER!r} "
                f"placeholder, found {n}"
            )


TEMPLATES: tuple[PromptTemplate, ...] = (
    PromptTemplate("P1", "Describe colors of a <category>", "colors"),
    PromptTemplate("P2", "Describe shapes of a <category>", "shapes"),
    PromptTemplate("P3", "Describe textures of a <category>", "textures"),
    PromptTemplate("P4", "Describe visual appearances of a <category>", "summarized visual appearances"),
    PromptTemplate("P5", "Describe a <category> in a scene", "scenes"),
    PromptTemplate("P6", "Describe what a <category> could be seen with", "relations with other entities"),
    PromptTemplate("P7", "Describe the places a <category> has been seen", "places"),
    PromptTemplate("P8", "Describe the main activities of a <category>", "activities"),
    PromptTemplate("P9", "Describe what is it like to be a <category>", "first-person view"),
)

TEMPLATE_IDS: tuple[str, ...] = tuple(t.id for t in TEMPLATES)

TEMPLATES_BY_ID: dict[str, PromptTemplate] = {t.id: t for t in TEMPLATES}

FOCUS_BY_ID: dict[str, str] = {t.id: t.focus for t in TEMPLATES}


def render_surface(label: str) -> str:
    """Underscores become spaces; case is preserved."""
    return " ".join(label.replace("_", " ").split())


def render_prompt(template: PromptTemplate, label_surface: str) -> str:
    """Substitute the category placeholder with the rendered surface form."""
    if not label_surface or not label_surface.strip():
        raise ValueError("label_surface must be non-empty")
    n = template.template_text.count(PLACEHOLDER)
    if n != 1:
        raise TemplateError(
            f"template {template.id!r} has {n} placeholders, expected exactly one"
        )
    return template.template_text.replace(PLACEHOLDER, render_surface(label_surface))


@dataclass(frozen=True)
class CategoryEntry:
    """A category with its canonical label and optional synonyms."""

    category_id: str
    canonical_label: str
    synonyms: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.canonical_label or not self.canonical_label.strip():
            raise ValueError(f"category {self.category_id!r}: canonical_label is empty")
        object.__setattr__(self, "synonyms", tuple(self.synonyms))
        if len(set(self.synonyms)) != len(self.synonyms):
            raise ValueError(f"category {self.category_id!r}: duplicate synonyms")
        if self.canonical_label in self.synonyms:
            raise ValueError(
                f"category {self.category_id!r}: synonyms must not repeat the canonical label"
            )

    @property
    def article_form(self) -> str:
        return render_surface(self.canonical_label)

    def labels(self) -> tuple[str, ...]:
        """Canonical label first, then synonyms, in declaration order."""
        return (self.canonical_label,) + self.synonyms


def _normalize_text(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class DescriptionRecord:
    """One generated description bound to a category and a prompt type."""

    description_id: str
    category_id: str
    prompt_id: str
    surface_label_used: str
    response_index: int
    text: str

    def __post_init__(self):
        if self.prompt_id not in TEMPLATES_BY_ID:
            raise ValueError(f"unknown prompt_id {self.prompt_id!r}")
        if self.response_index < 0:
            raise ValueError("response_index must be >= 0")
        if not _normalize_text(self.text):
            raise ValueError("description text is empty after whitespace normalization")

    def to_json(self) -> str:
        return json.dumps(
            {
                "description_id": self.description_id,
                "category_id": self.category_id,
                "prompt_id": self.prompt_id,
                "surface_label_used": self.surface_label_used,
                "response_index": self.response_index,
                "text": self.text,
            },
            ensure_ascii=False,
            sort_keys=True,
        )

    @staticmethod
    def from_json(line: str) -> "DescriptionRecord":
        d = json.loads(line)
        return DescriptionRecord(
            description_id=d["description_id"],
            category_id=d["category_id"],
            prompt_id=d["prompt_id"],
            surface_label_used=d["surface_label_used"],
            response_index=int(d["response_index"]),
            text=d["text"],
        )


def stable_hash(*parts: str) -> int:
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def description_id_for(category_id: str, prompt_id: str, surface: str, index: int, text: str) -> str:
    digest = hashlib.sha256(
        "\x1f".join([category_id, prompt_id, surface, str(index), text]).encode("utf-8")
    ).hexdigest()
    return digest[:16]


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


@dataclass
class BackendConfig:
    """Retry/timeout/rate-limit knobs shared by all backends."""

    retries: int = 2
    retry_wait: float = 0.05
    timeout: float = 30.0
    min_interval: float = 0.0
    max_concurrency: int = 1


class LanguageModelBackend:
    """Text-in/text-out completion interface.

    ``sample_index`` identifies which of the repeated draws for the same
    prompt is being requested; sampling backends may ignore it, deterministic
    ones use it to key their response.
    """

    name = "backend"

    def complete(self, prompt: str, sample_index: int = 0) -> str:
        raise NotImplementedError


_FIXTURE_BANKS: dict[str, tuple[str, tuple[str, ...]]] = {
    "P1": ("is mostly {w} in color", ("crimson and slate", "amber and ivory", "teal and charcoal",
                                      "olive and rust", "violet and sand", "copper and jade",
                                      "navy and pearl", "scarlet and ash")),
    "P2": ("has a {w} outline", ("rounded", "angular", "elongated", "squat", "tapered",
                                 "blocky", "slender", "curved")),
    "P3": ("feels {w} to the touch", ("smooth and glossy", "rough and grainy", "soft and fuzzy",
                                      "ridged and firm", "slick and wet", "coarse and matte",
                                      "velvety", "bumpy")),
    "P4": ("looks like a {w} specimen overall", ("compact", "striking", "plain", "ornate",
                                                 "weathered", "pristine", "massive", "delicate")),
    "P5": ("appears in a scene near {w}", ("a quiet shoreline", "a busy street", "tall grass",
                                           "an open field", "a cluttered workshop", "a forest edge",
                                           "a market stall", "a rocky slope")),
    "P6": ("is often seen together with {w}", ("water and reeds", "tools and benches",
                                               "fences and gates", "rocks and moss",
                                               "crowds and signs", "trees and shade",
                                               "sand and shells", "wires and poles")),
    "P7": ("has been seen around {w}", ("ponds", "cities", "farms", "mountains", "harbors",
                                        "backyards", "deserts", "meadows")),
    "P8": ("spends time {w}", ("foraging for food", "resting in shade", "moving in groups",
                               "standing watch", "drifting slowly", "working steadily",
                               "calling loudly", "hiding from view")),
    "P9": ("would experience the world as {w}", ("a wide bright place", "a noisy blur",
                                                 "an endless search", "a slow routine",
                                                 "a crowded space", "a calm stretch",
                                                 "a series of chases", "a patient wait")),
}


class FixtureBackend(LanguageModelBackend):
    """Deterministic canned responses so everything builds and tests offline.

    Responses are keyed by (prompt text, sample_index); the variant stride
    guarantees distinct texts for up to 8 draws per prompt.
    """

    name = "fixture"

    def __init__(self, fail_on: Callable[[str, int], bool] | None = None):
        self._fail_on = fail_on
        self.calls = 0

    def complete(self, prompt: str, sample_index: int = 0) -> str:
        self.calls += 1
        if self._fail_on is not None and self._fail_on(prompt, sample_index):
            raise BackendError(f"fixture backend configured to fail on {prompt!r}")
        prompt_id = None
        surface = None
        for template in TEMPLATES:
            head, _, tail = template.template_text.partition(PLACEHOLDER)
            if prompt.startswith(head) and prompt.endswith(tail):
                middle = prompt[len(head):len(prompt) - len(tail)] if tail else prompt[len(head):]
                prompt_id, surface = template.id, middle
                break
        if prompt_id is None:
            # Free-form prompt: echo something stable.
            return f"response {sample_index} to: {prompt}"
        pattern, words = _FIXTURE_BANKS[prompt_id]
        word = words[(stable_hash(surface, prompt_id) + sample_index) % len(words)]
        return f"A {surface} " + pattern.format(w=word) + "."


class OpenAICompatibleBackend(LanguageModelBackend):
    """Minimal client for an OpenAI-style completions endpoint.

    Credentials come from ``PROMPTVLP_API_KEY``; the endpoint from
    ``PROMPTVLP_API_URL``. Decoding settings are passed through untouched.
    """

    name = "live"

    def __init__(self, model: str = "gpt-3.5-turbo-instruct", temperature: float | None = None,
                 max_tokens: int = 80, config: BackendConfig | None = None,
                 session=None):
        api_key = os.environ.get("PROMPTVLP_API_KEY")
        if not api_key:
            raise BackendError("live backend requires PROMPTVLP_API_KEY in the environment")
        self.api_url = os.environ.get("PROMPTVLP_API_URL", "https://api.openai.com/v1/completions")
        self.api_key = api_key
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.config = config or BackendConfig()
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def complete(self, prompt: str, sample_index: int = 0) -> str:
        payload: dict = {"model": self.model, "prompt": prompt, "max_tokens": self.max_tokens}
        if self.temperature is not None:
            payload["temperature"] = self.temperature
        resp = self._session.post(
            self.api_url,
            json=payload,
            headers={"Authorization": f"Bearer {self.api_key}"},
            timeout=self.config.timeout,
        )
        if resp.status_code != 200:
            raise BackendError(f"backend returned HTTP {resp.status_code}")
        body = resp.json()
        try:
            return body["choices"][0]["text"]
        except (KeyError, IndexError) as exc:
            raise BackendError(f"malformed backend response: {body!r}") from exc


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


class PromptCache:
    """Keyed store from (prompt_id, surface_label, response_index) to text.

    Entries live under ``<cache_dir>/v<version>/<hash>.txt``; bumping the
    format version starts a clean namespace. With no directory the cache is
    in-memory only. Writes are serialized per cache instance.
    """

    def __init__(self, cache_dir: str | Path | None = None, version: int = CACHE_FORMAT_VERSION):
        self.version = version
        self._mem: dict[str, str] = {}
        self._lock = threading.Lock()
        self._dir: Path | None = None
        if cache_dir is not None:
            self._dir = Path(cache_dir) / f"v{version}"
            self._dir.mkdir(parents=True, exist_ok=True)

    def _key(self, prompt_id: str, surface_label: str, response_index: int) -> str:
        raw = "\x1f".join([str(self.version), prompt_id, surface_label, str(response_index)])
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()

    def get(self, prompt_id: str, surface_label: str, response_index: int) -> str | None:
        key = self._key(prompt_id, surface_label, response_index)
        with self._lock:
            if key in self._mem:
                return self._mem[key]
        if self._dir is not None:
            path = self._dir / f"{key}.txt"
            if path.exists():
                text = path.read_text(encoding="utf-8")
                with self._lock:
                    self._mem[key] = text
                return text
        return None

    def put(self, prompt_id: str, surface_label: str, response_index: int, text: str) -> None:
        key = self._key(prompt_id, surface_label, response_index)
        with self._lock:
            self._mem[key] = text
            if self._dir is not None:
                tmp = self._dir / f"{key}.txt.tmp"
                tmp.write_text(text, encoding="utf-8")
                tmp.replace(self._dir / f"{key}.txt")

    def __len__(self) -> int:
        with self._lock:
            return len(self._mem)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


@dataclass
class GenerationStats:
    requested: int = 0
    records: int = 0
    duplicates: int = 0
    empty_responses: int = 0
    backend_calls: int = 0
    cache_hits: int = 0


def _fetch_one(backend: LanguageModelBackend, cache: PromptCache, prompt_id: str,
               surface: str, index: int, prompt: str, config: BackendConfig,
               stats: GenerationStats, stats_lock: threading.Lock) -> str:
    cached = cache.get(prompt_id, surface, index)
    if cached is not None:
        with stats_lock:
            stats.cache_hits += 1
        return cached
    last_exc: Exception | None = None
    for attempt in range(config.retries + 1):
        if attempt > 0 and config.retry_wait > 0:
            time.sleep(config.retry_wait)
        if config.min_interval > 0:
            time.sleep(config.min_interval)
        try:
            with stats_lock:
                stats.backend_calls += 1
            text = backend.complete(prompt, sample_index=index)
            cache.put(prompt_id, surface, index, text)
            return text
        except BackendError as exc:
            last_exc = exc
            logger.warning("backend call failed (attempt %d/%d): %s", attempt + 1,
                           config.retries + 1, exc)
    raise BackendError(f"backend failed after {config.retries + 1} attempts: {last_exc}")


def generate_descriptions(
    entry: CategoryEntry,
    templates: Sequence[PromptTemplate],
    backend: LanguageModelBackend,
    responses_per_prompt: int = DEFAULT_RESPONSES_PER_PROMPT,
    cache: PromptCache | None = None,
    config: BackendConfig | None = None,
    stats: GenerationStats | None = None,
) -> list[DescriptionRecord]:
    """Generate descriptions for every (surface form, template, response index).

    Exact duplicate texts within the same (category, prompt) are collapsed and
    counted in ``stats.duplicates``; at least one record per distinct text is
    always kept. Empty backend responses are skipped and counted.

    Raises PartialResultError carrying the completed records if the backend
    keeps failing after retries.
    """
    if responses_per_prompt < 1:
        raise ValueError("responses_per_prompt must be >= 1")
    config = config or BackendConfig()
    cache = cache if cache is not None else PromptCache()
    stats = stats if stats is not None else GenerationStats()
    stats_lock = threading.Lock()

    tasks = []  # (surface, template, index, prompt)
    for label in entry.labels():
        surface = render_surface(label)
        for template in templates:
            prompt = render_prompt(template, label)
            for index in range(responses_per_prompt):
                tasks.append((surface, template, index, prompt))
    stats.requested += len(tasks)

    texts: dict[tuple[str, str, int], str] = {}
    failures: list[tuple[str, str, int, str]] = []

    def run_task(task):
        surface, template, index, prompt = task
        return (surface, template.id, index), _fetch_one(
            backend, cache, template.id, surface, index, prompt, config, stats, stats_lock
        )

    if config.max_concurrency > 1:
        with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
            futures = {pool.submit(run_task, t): t for t in tasks}
            for future, task in futures.items():
                surface, template, index, prompt = task
                try:
                    key, text = future.result()
                    texts[key] = text
                except BackendError as exc:
                    failures.append((surface, template.id, index, str(exc)))
    else:
        for task in tasks:
            surface, template, index, prompt = task
            try:
                key, text = run_task(task)
                texts[key] = text
            except BackendError as exc:
                failures.append((surface, template.id, index, str(exc)))

    # Assemble records in deterministic (label order, template order, index) order.
    records: list[DescriptionRecord] = []
    seen_texts: dict[tuple[str, str], dict[str, DescriptionRecord]] = {}
    for label in entry.labels():
        surface = render_surface(label)
        for template in templates:
            for index in range(responses_per_prompt):
                key = (surface, template.id, index)
                if key not in texts:
                    continue
                text = _normalize_text(texts[key])
                if not text:
                    stats.empty_responses += 1
                    logger.warning("empty backend response for %s/%s/%d skipped",
                                   template.id, surface, index)
                    continue
                bucket = seen_texts.setdefault((entry.category_id, template.id), {})
                if text in bucket:
                    stats.duplicates += 1
                    continue
                record = DescriptionRecord(
                    description_id=description_id_for(
                        entry.category_id, template.id, surface, index, text
                    ),
                    category_id=entry.category_id,
                    prompt_id=template.id,
                    surface_label_used=surface,
                    response_index=index,
                    text=text,
                )
                bucket[text] = record
                records.append(record)
    stats.records += len(records)

    if failures:
        raise PartialResultError(
            f"{len(failures)} prompt(s) failed after retries", completed=records,
            failures=failures,
        )
    return records


@dataclass
class CorpusStats:
    categories: int = 0
    total_records: int = 0
    per_prompt: dict[str, int] = field(default_factory=dict)
    duplicates: int = 0
    empty_responses: int = 0
    backend_calls: int = 0
    cache_hits: int = 0

    def to_dict(self) -> dict:
        return {
            "categories": self.categories,
            "total_records": self.total_records,
            "per_prompt": dict(sorted(self.per_prompt.items())),
            "duplicates": self.duplicates,
            "empty_responses": self.empty_responses,
            "backend_calls": self.backend_calls,
            "cache_hits": self.cache_hits,
        }

    def persistable(self) -> dict:
        """Content-determined subset; excludes per-run backend/cache counters."""
        d = self.to_dict()
        d.pop("backend_calls")
        d.pop("cache_hits")
        return d


@dataclass
class TextCorpus:
    """Handle over the generated description records plus summary statistics."""

    records: list[DescriptionRecord]
    stats: CorpusStats

    def by_category(self) -> dict[str, list[DescriptionRecord]]:
        out: dict[str, list[DescriptionRecord]] = {}
        for record in self.records:
            out.setdefault(record.category_id, []).append(record)
        return out


def build_text_corpus(
    entries: Sequence[CategoryEntry],
    templates: Sequence[PromptTemplate] = TEMPLATES,
    backend: LanguageModelBackend | None = None,
    responses_per_prompt: int = DEFAULT_RESPONSES_PER_PROMPT,
    cache: PromptCache | None = None,
    config: BackendConfig | None = None,
) -> TextCorpus:
    """Generate and collect descriptions for every category entry.

    Deterministic given the backend and cache version: re-running with a warm
    cache makes zero backend calls and reproduces the same records.
    """
    if not entries:
        raise ManifestError("entries must be non-empty")
    ids = [e.category_id for e in entries]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ManifestError(f"duplicate category_id(s): {dupes}")
    backend = backend or FixtureBackend()
    cache = cache if cache is not None else PromptCache()

    gen_stats = GenerationStats()
    records: list[DescriptionRecord] = []
    for entry in entries:
        records.extend(
            generate_descriptions(
                entry, templates, backend, responses_per_prompt,
                cache=cache, config=config, stats=gen_stats,
            )
        )

    per_prompt: dict[str, int] = {t.id: 0 for t in templates}
    for record in records:
        per_prompt[record.prompt_id] += 1
    stats = CorpusStats(
        categories=len(entries),
        total_records=len(records),
        per_prompt=per_prompt,
        duplicates=gen_stats.duplicates,
        empty_responses=gen_stats.empty_responses,
        backend_calls=gen_stats.backend_calls,
        cache_hits=gen_stats.cache_hits,
    )
    return TextCorpus(records=records, stats=stats)


def save_description_corpus(corpus: TextCorpus, path: str | Path) -> None:
    """Write records as UTF-8 JSON lines plus a ``.stats.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in corpus.records:
            fh.write(record.to_json() + "\n")
    stats_path = path.with_suffix(path.suffix + ".stats.json")
    stats_path.write_text(
        json.dumps(corpus.stats.persistable(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_description_corpus(path: str | Path) -> list[DescriptionRecord]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(DescriptionRecord.from_json(line))
    return records


def load_category_entries(path: str | Path) -> list[CategoryEntry]:
    """Read a JSON array of {category_id, canonical_label, synonyms} objects."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ManifestError("categories file must contain a JSON array")
    entries = []
    for item in data:
        entries.append(
            CategoryEntry(
                category_id=str(item["category_id"]),
                canonical_label=str(item["canonical_label"]),
                synonyms=tuple(item.get("synonyms", ())),
            )
        )
    return entries


def select_templates(ids: Iterable[str] | None) -> tuple[PromptTemplate, ...]:
    if ids is None:
        return TEMPLATES
    out = []
    for tid in ids:
        if tid not in TEMPLATES_BY_ID:
            raise ValueError(f"unknown template id {tid!r}; valid: {', '.join(TEMPLATE_IDS)}")
        out.append(TEMPLATES_BY_ID[tid])
    if not out:
        raise ValueError("template selection is empty")
    return tuple(out)
