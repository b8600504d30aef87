"""Concern detection and categorization clients, prompt assembly and agreement metrics."""
from __future__ import annotations

import json
import logging
import os
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from ._io import data_path, load_toml
from .corpus import WindowedText
from .errors import ConfigError, ProtocolError, RetryableError

log = logging.getLogger(__name__)


class EthicalConcernCategory(Enum):
    Addiction = "Addiction"
    Censorship = "Censorship"
    Cyberbullying = "Cyberbullying"
    Discrimination = "Discrimination"
    HarmfulAdvertising = "Harmful Advertising"
    InappropriateContent = "Inappropriate Content"
    Misinformation = "Misinformation"
    Privacy = "Privacy"
    Safety = "Safety"
    Scam = "Scam"
    SocialIsolation = "Social Isolation"
    NoneLabel = "None"

    @property
    def label(self) -> str:
        return self.value


CONCERN_CATEGORIES = tuple(c for c in EthicalConcernCategory if c is not EthicalConcernCategory.NoneLabel)


def _squash(s: str) -> str:
    return re.sub(r"[^0-9a-z]", "", s.casefold())


_LOOKUP = {}
for _c in EthicalConcernCategory:
    _LOOKUP[_squash(_c.value)] = _c
    _LOOKUP[_squash(_c.name)] = _c


def parse_category(text: str) -> EthicalConcernCategory:
    """Map a client reply to exactly one category (case-insensitive)."""
    reply = text.strip().strip(".\"'` ")
    try:
        return _LOOKUP[_squash(reply)]
    except KeyError:
        raise ProtocolError(f"reply {text!r} is not exactly one category label") from None


# -- taxonomy and prompts ------------------------------------------------------


def load_taxonomy(path=None) -> dict[EthicalConcernCategory, str]:
    raw = load_toml(path or data_path("taxonomy.toml")).get("categories", {})
    out = {}
    for key, definition in raw.items():
        try:
            cat = _LOOKUP[_squash(key)]
        except KeyError:
            raise ConfigError(f"unknown category {key!r} in taxonomy") from None
        out[cat] = definition
    return out


def load_task_prompt(path=None) -> str:
    return load_toml(path or data_path("prompt.toml"))["task"].strip()


SEPARATOR = "\n\n"
POST_HEADER = "Post:\n"
DEFS_HEADER = "Categories:\n"


@dataclass(frozen=True)
class PromptText:
    task_instructions: str
    category_definitions: str
    windowed_post: str

    def render(self) -> str:
        # categories go last
        return (
            self.task_instructions
            + SEPARATOR
            + POST_HEADER
            + self.windowed_post
            + SEPARATOR
            + DEFS_HEADER
            + self.category_definitions
        )


FIXED_PROMPT_OVERHEAD = len(SEPARATOR) * 2 + len(POST_HEADER) + len(DEFS_HEADER)


def assemble_category_prompt(
    windowed: WindowedText,
    taxonomy: Mapping[EthicalConcernCategory, str],
    task: str | None = None,
) -> PromptText:
    missing = [c.value for c in CONCERN_CATEGORIES if not taxonomy.get(c)]
    if missing:
        raise ConfigError(f"taxonomy lacks definitions for: {', '.join(missing)}")
    defs = "\n".join(f"- {c.value}: {taxonomy[c]}" for c in CONCERN_CATEGORIES)
    defs += "\n- None: The post matches none of the categories above."
    return PromptText(task if task is not None else load_task_prompt(), defs, windowed.text)


# -- client contracts ----------------------------------------------------------


class DetectorClient(Protocol):
    name: str
    max_parallelism: int

    def detect(self, text: str) -> Mapping:
        """Return {"is_concern": bool, "confidence": float}."""


class CategorizerClient(Protocol):
    name: str
    max_parallelism: int

    def categorize(self, prompt: PromptText) -> str:
        """Return a single category name."""


@dataclass(frozen=True)
class ConcernDetection:
    post_id: str
    is_concern: bool
    confidence: float
    source: str


def _phrase_regex(phrases: Iterable[str]) -> re.Pattern | None:
    phrases = sorted({p.strip() for p in phrases if p.strip()}, key=len, reverse=True)
    if not phrases:
        return None
    body = "|".join(r"\s+".join(re.escape(w) for w in p.split()) for p in phrases)
    return re.compile(rf"(?<!\w)(?:{body})(?!\w)", re.IGNORECASE)


class StubDetector:
    """Flags text containing any lexeme from a reviewable lexicon file."""

    name = "stub-detector"
    max_parallelism = 64

    def __init__(self, lexemes: Sequence[str] | None = None):
        if lexemes is None:
            lexemes = load_toml(data_path("detector_stub.toml"))["lexemes"]
        self._regex = _phrase_regex(lexemes)

    @classmethod
    def from_file(cls, path) -> "StubDetector":
        return cls(load_toml(path)["lexemes"])

    def detect(self, text: str) -> dict:
        hit = bool(self._regex and self._regex.search(text))
        return {"is_concern": hit, "confidence": 1.0 if hit else 0.0}


class StubCategorizer:
    """First matching phrase rule (file order) decides; no match means None."""

    name = "stub-categorizer"
    max_parallelism = 64

    def __init__(self, rules: Sequence[tuple[str, Sequence[str]]] | None = None):
        if rules is None:
            raw = load_toml(data_path("categorizer_stub.toml"))["rules"]
            rules = [(r["category"], r["phrases"]) for r in raw]
        self._rules = []
        for category, phrases in rules:
            cat = parse_category(category)
            self._rules.append((cat, _phrase_regex(phrases)))

    @classmethod
    def from_file(cls, path) -> "StubCategorizer":
        raw = load_toml(path)["rules"]
        return cls([(r["category"], r["phrases"]) for r in raw])

    def categorize(self, prompt: PromptText) -> str:
        for cat, regex in self._rules:
            if regex is not None and regex.search(prompt.windowed_post):
                return cat.value
        return EthicalConcernCategory.NoneLabel.value


def detect_concern(windowed: WindowedText, client: DetectorClient) -> ConcernDetection:
    try:
        reply = client.detect(windowed.text)
    except RetryableError as exc:
        exc.post_id = windowed.post_id
        raise
    if not isinstance(reply, Mapping) or "is_concern" not in reply or "confidence" not in reply:
        raise ProtocolError(f"malformed detector reply {reply!r}", windowed.post_id)
    flag, conf = reply["is_concern"], reply["confidence"]
    if not isinstance(flag, bool):
        raise ProtocolError(f"is_concern must be boolean, got {flag!r}", windowed.post_id)
    if isinstance(conf, bool) or not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
        raise ProtocolError(f"confidence {conf!r} outside [0, 1]", windowed.post_id)
    return ConcernDetection(windowed.post_id, flag, float(conf), client.name)


def categorize(
    windowed: WindowedText,
    client: CategorizerClient,
    taxonomy: Mapping[EthicalConcernCategory, str] | None = None,
    task: str | None = None,
) -> EthicalConcernCategory:
    prompt = assemble_category_prompt(windowed, taxonomy or load_taxonomy(), task)
    try:
        reply = client.categorize(prompt)
    except RetryableError as exc:
        exc.post_id = windowed.post_id
        raise
    if not isinstance(reply, str):
        raise ProtocolError(f"categorizer reply must be a string, got {reply!r}", windowed.post_id)
    try:
        return parse_category(reply)
    except ProtocolError as exc:
        exc.post_id = windowed.post_id
        raise


# -- HTTP clients --------------------------------------------------------------

API_KEY_ENV = "CONCERNKIT_API_KEY"


def _post_json(client, url: str, payload: dict, headers: dict) -> dict:
    import httpx

    try:
        resp = client.post(url, json=payload, headers=headers)
    except httpx.TimeoutException as exc:
        raise RetryableError(f"timeout calling {url}: {exc}") from exc
    except httpx.TransportError as exc:
        raise RetryableError(f"transport error calling {url}: {exc}") from exc
    if resp.status_code == 429 or resp.status_code >= 500:
        raise RetryableError(f"{url} answered HTTP {resp.status_code}")
    if resp.status_code >= 400:
        raise ProtocolError(f"{url} answered HTTP {resp.status_code}: {resp.text[:200]}")
    try:
        return resp.json()
    except ValueError:
        raise ProtocolError(f"{url} returned non-JSON body") from None


class HttpCategorizer:
    """Chat-completions style endpoint; the first choice's message is the label."""

    name = "http-categorizer"

    def __init__(self, url: str, model: str, api_key: str | None = None, timeout: float = 60.0,
                 max_parallelism: int = 4, transport=None):
        import httpx

        self.url = url
        self.model = model
        self.max_parallelism = max_parallelism
        self._key = api_key or os.environ.get(API_KEY_ENV)
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def categorize(self, prompt: PromptText) -> str:
        headers = {"Authorization": f"Bearer {self._key}"} if self._key else {}
        payload = {
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt.render()}],
        }
        body = _post_json(self._client, self.url, payload, headers)
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ProtocolError(f"unexpected completion payload: {str(body)[:200]}") from None


class HttpDetector:
    """POSTs {"text": ...}; expects {"is_concern": bool, "confidence": float}."""

    name = "http-detector"

    def __init__(self, url: str, api_key: str | None = None, timeout: float = 30.0,
                 max_parallelism: int = 4, transport=None):
        import httpx

        self.url = url
        self.max_parallelism = max_parallelism
        self._key = api_key or os.environ.get(API_KEY_ENV)
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def detect(self, text: str) -> Mapping:
        headers = {"Authorization": f"Bearer {self._key}"} if self._key else {}
        return _post_json(self._client, self.url, {"text": text}, headers)


# -- retries and batch driver -------------------------------------------------


def call_with_retry(fn: Callable[[], object], attempts: int = 3, base_delay: float = 0.5,
                    sleep: Callable[[float], None] = time.sleep):
    """Call `fn`, retrying RetryableError with exponential backoff (base, 2*base, ...)."""
    for attempt in range(attempts):
        try:
            return fn()
        except RetryableError:
            if attempt == attempts - 1:
                raise
            sleep(base_delay * 2**attempt)


@dataclass
class LabelRecord:
    post_id: str
    is_concern: bool
    confidence: float
    category: str | None
    source: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)


@dataclass(frozen=True)
class ClientFailure:
    post_id: str
    stage: str
    error: str


class LabelCache:
    """Append-only JSONL of LabelRecords so interrupted client runs can resume."""

    def __init__(self, path):
        self.path = path
        self.records: dict[str, LabelRecord] = {}
        if path and os.path.exists(path):
            with open(path, encoding="utf-8") as f:
                for lineno, line in enumerate(f, 1):
                    if not line.strip():
                        continue
                    try:
                        rec = LabelRecord(**json.loads(line))
                    except (json.JSONDecodeError, TypeError):
                        log.warning("%s:%d: skipping corrupt label record", path, lineno)
                        continue
                    self.records[rec.post_id] = rec

    def get(self, post_id: str) -> LabelRecord | None:
        return self.records.get(post_id)

    def put(self, rec: LabelRecord) -> None:
        self.records[rec.post_id] = rec
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(rec.to_json() + "\n")


def label_posts(
    windows: Sequence[WindowedText],
    detector: DetectorClient,
    categorizer: CategorizerClient | None = None,
    taxonomy: Mapping[EthicalConcernCategory, str] | None = None,
    cache: LabelCache | None = None,
    workers: int = 8,
    attempts: int = 3,
    base_delay: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[list[LabelRecord], list[ClientFailure]]:
    """Detect, then categorize positives. Failures are recorded per post; the batch continues.

    Results come back in input order regardless of worker scheduling.
    """
    taxonomy = taxonomy or (load_taxonomy() if categorizer else None)
    task = load_task_prompt() if categorizer else None

    def one(w: WindowedText):
        if cache is not None:
            hit = cache.get(w.post_id)
            if hit is not None:
                return hit, None
        try:
            det = call_with_retry(lambda: detect_concern(w, detector), attempts, base_delay, sleep)
            category = None
            if det.is_concern and categorizer is not None:
                category = call_with_retry(
                    lambda: categorize(w, categorizer, taxonomy, task), attempts, base_delay, sleep
                ).value
        except (RetryableError, ProtocolError) as exc:
            return None, ClientFailure(w.post_id, type(exc).__name__, str(exc))
        source = detector.name if categorizer is None else f"{detector.name}+{categorizer.name}"
        return LabelRecord(w.post_id, det.is_concern, det.confidence, category, source), None

    limit = min(
        workers,
        getattr(detector, "max_parallelism", 1),
        getattr(categorizer, "max_parallelism", workers) if categorizer else workers,
    )
    if limit <= 1:
        results = [one(w) for w in windows]
    else:
        with ThreadPoolExecutor(max_workers=limit) as pool:
            results = list(pool.map(one, windows))
    records, failures = [], []
    for (rec, fail), w in zip(results, windows):
        if fail is not None:
            failures.append(fail)
            continue
        if cache is not None and cache.get(w.post_id) is None:
            cache.put(rec)
        records.append(rec)
    return records, failures


# -- agreement and label evaluation -------------------------------------------


@dataclass(frozen=True)
class AgreementReport:
    kappa: float
    observed_agreement: float
    expected_agreement: float
    n: int


def cohens_kappa(labels_a: Sequence, labels_b: Sequence) -> AgreementReport:
    """Multi-class Cohen's kappa; chance agreement from each rater's marginals."""
    if len(labels_a) != len(labels_b):
        raise ValueError("label lists differ in length")
    n = len(labels_a)
    if n == 0:
        raise ValueError("no labels")
    po = sum(a == b for a, b in zip(labels_a, labels_b)) / n
    ca, cb = Counter(labels_a), Counter(labels_b)
    pe = sum(ca[k] * cb[k] for k in ca) / (n * n)
    if pe == 1.0:
        kappa = 1.0  # both raters used one identical label throughout
    else:
        kappa = (po - pe) / (1.0 - pe)
    return AgreementReport(kappa, po, pe, n)


def evaluate_category_labels(
    judgments: Iterable[tuple[EthicalConcernCategory, bool]],
    per_category_n: int = 10,
    keep_threshold: int = 8,
) -> set[EthicalConcernCategory]:
    """Keep categories whose manually judged sample has >= keep_threshold valid labels."""
    valid: Counter = Counter()
    total: Counter = Counter()
    for cat, ok in judgments:
        total[cat] += 1
        valid[cat] += bool(ok)
    wrong = {c.value: n for c, n in total.items() if n != per_category_n}
    if wrong:
        raise ValueError(f"expected {per_category_n} judgments per category, got {wrong}")
    return {c for c in total if valid[c] >= keep_threshold}
