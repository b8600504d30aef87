"""Post corpora: JSONL parsing, keyword windowing, app filtering and stratified sampling."""
from __future__ import annotations

import json
import random
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timezone
from enum import Enum
from typing import Iterable, Iterator, Mapping, Sequence

from ._io import data_path, load_toml
from .errors import ConfigError, NotFound

REQUIRED_FIELDS = (
    "id",
    "subreddit",
    "created_utc",
    "title",
    "body",
    "upvotes",
    "upvote_ratio",
    "num_comments",
)


@dataclass(frozen=True)
class RawPost:
    id: str
    subreddit: str
    created_utc: int
    title: str
    body: str
    upvotes: int
    upvote_ratio: float
    num_comments: int

    @property
    def text(self) -> str:
        return f"{self.title}\n{self.body}"

    @property
    def created(self) -> datetime:
        return datetime.fromtimestamp(self.created_utc, tz=timezone.utc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RecordError:
    line: int
    message: str
    field: str | None = None


@dataclass(frozen=True)
class Corpus:
    posts: tuple[RawPost, ...]
    errors: tuple[RecordError, ...] = ()

    def __len__(self) -> int:
        return len(self.posts)

    def __iter__(self) -> Iterator[RawPost]:
        return iter(self.posts)

    def by_id(self) -> dict[str, RawPost]:
        return {p.id: p for p in self.posts}


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def post_from_dict(record: Mapping) -> RawPost:
    """Validate one decoded record; raises ValueError carrying the offending field name."""
    if not isinstance(record, Mapping):
        raise ValueError("record is not a JSON object")
    for name in REQUIRED_FIELDS:
        if name not in record or record[name] is None:
            raise ValueError(f"missing required field '{name}'")
    for name in ("id", "subreddit", "title", "body"):
        if not isinstance(record[name], str):
            raise ValueError(f"field '{name}' must be a string")
    if not record["id"]:
        raise ValueError("field 'id' must be non-empty")
    for name in ("created_utc", "upvotes", "num_comments"):
        if not _is_int(record[name]):
            raise ValueError(f"field '{name}' must be an integer")
    if record["created_utc"] <= 0:
        raise ValueError("field 'created_utc' must be positive")
    if record["upvotes"] < 0 or record["num_comments"] < 0:
        bad = "upvotes" if record["upvotes"] < 0 else "num_comments"
        raise ValueError(f"field '{bad}' must be non-negative")
    ratio = record["upvote_ratio"]
    if isinstance(ratio, bool) or not isinstance(ratio, (int, float)) or not 0.0 <= ratio <= 1.0:
        raise ValueError("field 'upvote_ratio' must be a number in [0, 1]")
    return RawPost(
        id=record["id"],
        subreddit=record["subreddit"],
        created_utc=record["created_utc"],
        title=record["title"],
        body=record["body"],
        upvotes=record["upvotes"],
        upvote_ratio=float(ratio),
        num_comments=record["num_comments"],
    )


def _field_of(message: str) -> str | None:
    m = re.search(r"'(\w+)'", message)
    return m.group(1) if m else None


def parse_posts(lines: Iterable[str | bytes]) -> Corpus:
    """Parse line-delimited JSON posts.

    Malformed lines and duplicate ids are reported as RecordErrors with their
    1-based line number; blank lines are skipped.
    """
    posts: list[RawPost] = []
    errors: list[RecordError] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            errors.append(RecordError(lineno, f"invalid JSON: {exc.msg}"))
            continue
        try:
            post = post_from_dict(record)
        except ValueError as exc:
            errors.append(RecordError(lineno, str(exc), _field_of(str(exc))))
            continue
        if post.id in seen:
            errors.append(RecordError(lineno, f"duplicate id '{post.id}'", "id"))
            continue
        seen.add(post.id)
        posts.append(post)
    return Corpus(tuple(posts), tuple(errors))


def read_posts(path) -> Corpus:
    with open(path, encoding="utf-8") as f:
        return parse_posts(f)


def serialize_posts(posts: Iterable[RawPost]) -> str:
    # ASCII escapes keep one record per physical line whatever splitter reads it back
    return "".join(json.dumps(p.to_dict(), sort_keys=True) + "\n" for p in posts)


# -- windowing ---------------------------------------------------------------


@dataclass(frozen=True)
class WindowedText:
    post_id: str
    keyword: str
    text: str


def window_text(post: RawPost, keyword: str, radius: int = 300) -> WindowedText:
    """Cut `radius` characters either side of the first case-insensitive keyword hit.

    The searched text is title + "\\n" + body. Offsets count code points.
    """
    if not keyword:
        raise ValueError("keyword must be non-empty")
    text = post.text
    m = re.search(re.escape(keyword), text, flags=re.IGNORECASE)
    if m is None:
        raise NotFound(f"keyword {keyword!r} not found in post {post.id}")
    start = max(0, m.start() - radius)
    end = min(len(text), m.end() + radius)
    return WindowedText(post.id, keyword, text[start:end])


# -- app catalog -------------------------------------------------------------


class Domain(str, Enum):
    BUSINESS = "business"
    ENTERTAINMENT = "entertainment"
    SHOPPING = "shopping"
    SOCIAL_MEDIA = "social_media"
    UTILITY_PRODUCTIVITY = "utility_productivity"


@dataclass(frozen=True)
class AppEntry:
    name: str
    aliases: tuple[str, ...]
    domain: Domain
    match_name: bool = True

    @property
    def patterns(self) -> tuple[str, ...]:
        return ((self.name,) if self.match_name else ()) + self.aliases


def _alias_regex(aliases: Sequence[str]) -> re.Pattern:
    # longest alias first so "Facebook Messenger" wins over "Facebook"
    alts = sorted(aliases, key=len, reverse=True)
    body = "|".join(re.escape(a) for a in alts)
    return re.compile(rf"(?<!\w)(?:{body})(?!\w)", re.IGNORECASE)


@dataclass
class AppCatalog:
    entries: list[AppEntry]
    default_allowlist: list[str] = field(default_factory=list)

    def __post_init__(self):
        names: dict[str, str] = {}
        owners: dict[str, str] = {}
        for e in self.entries:
            key = e.name.casefold()
            if key in names:
                raise ConfigError(f"duplicate app name {e.name!r}")
            names[key] = e.name
            if not e.patterns:
                raise ConfigError(f"app {e.name!r} has nothing to match")
            for alias in e.patterns:
                akey = alias.casefold()
                if akey in owners and owners[akey] != e.name:
                    raise ConfigError(f"alias {alias!r} maps to both {owners[akey]!r} and {e.name!r}")
                owners[akey] = e.name
        self._names = names
        self._regex = {e.name: _alias_regex(e.patterns) for e in self.entries}
        self._by_name = {e.name: e for e in self.entries}

    def resolve(self, name: str) -> str:
        """Canonical name for `name` (case-insensitive), else ConfigError."""
        try:
            return self._names[name.casefold()]
        except KeyError:
            raise ConfigError(f"unknown app {name!r}") from None

    def entry(self, name: str) -> AppEntry:
        return self._by_name[self.resolve(name)]

    def mentions(self, text: str, names: Iterable[str] | None = None) -> list[str]:
        """Canonical names (catalog order) whose aliases occur as whole words in `text`."""
        wanted = None if names is None else {self.resolve(n) for n in names}
        return [
            e.name
            for e in self.entries
            if (wanted is None or e.name in wanted) and self._regex[e.name].search(text)
        ]

    def first_mention(self, text: str, names: Iterable[str] | None = None) -> tuple[str, str] | None:
        """(canonical name, matched surface text) of the earliest mention, or None."""
        best = None
        for name in self.mentions(text, names):
            m = self._regex[name].search(text)
            if best is None or m.start() < best[0]:
                best = (m.start(), name, m.group(0))
        return None if best is None else (best[1], best[2])


def load_catalog(path=None) -> AppCatalog:
    raw = load_toml(path or data_path("apps.toml"))
    entries = []
    for item in raw.get("app", []):
        try:
            domain = Domain(item["domain"])
        except (KeyError, ValueError):
            raise ConfigError(f"app {item.get('name')!r}: bad or missing domain") from None
        entries.append(
            AppEntry(
                name=item["name"],
                aliases=tuple(item.get("aliases", ())),
                domain=domain,
                match_name=item.get("match_name", True),
            )
        )
    catalog = AppCatalog(entries, list(raw.get("default_allowlist", [])))
    for name in catalog.default_allowlist:
        catalog.resolve(name)
    return catalog


# -- filtering ---------------------------------------------------------------

DEFAULT_MIN_DATE = date(2018, 1, 1)


def _day_start_utc(d: date) -> int:
    return int(datetime(d.year, d.month, d.day, tzinfo=timezone.utc).timestamp())


def filter_corpus(
    corpus: Corpus,
    app_allowlist: Iterable[str],
    min_date: date = DEFAULT_MIN_DATE,
    catalog: AppCatalog | None = None,
) -> Corpus:
    """Keep posts created on/after `min_date` (00:00 UTC) that mention an allowlisted app."""
    catalog = catalog or load_catalog()
    allow = [catalog.resolve(n) for n in app_allowlist]
    if not allow:
        raise ConfigError("app allowlist is empty")
    cutoff = _day_start_utc(min_date)
    kept = tuple(
        p for p in corpus.posts if p.created_utc >= cutoff and catalog.mentions(p.text, allow)
    )
    return Corpus(kept, corpus.errors)


# -- stratified sampling -----------------------------------------------------


@dataclass(frozen=True, order=True)
class StratumKey:
    community: str
    domain: Domain


@dataclass(frozen=True)
class SampleResult:
    posts: tuple[RawPost, ...]
    counts: dict[StratumKey, int]
    shortfalls: dict[StratumKey, int]


def stratified_sample(
    posts: Iterable[RawPost],
    strata: Mapping[str, StratumKey],
    per_stratum: int,
    seed: int,
    expected: Iterable[StratumKey] | None = None,
    domains: Sequence[Domain] = tuple(Domain),
) -> SampleResult:
    """Draw `per_stratum` posts from every (community, domain) stratum.

    Each stratum's posts are sorted by id and shuffled with one seeded RNG,
    strata visited in (community, domain-order) order. A stratum with too few
    posts gives all it has; its shortfall is refilled round-robin over the
    community's domains in `domains` order, one post per turn, taking the next
    unused post of that domain. Whatever cannot be refilled is reported in
    `shortfalls` (keyed by the stratum that fell short).
    """
    if per_stratum < 1:
        raise ValueError("per_stratum must be >= 1")
    groups: dict[StratumKey, list[RawPost]] = defaultdict(list)
    for p in posts:
        key = strata.get(p.id)
        if key is not None:
            groups[key].append(p)
    wanted = set(groups) if expected is None else set(expected) | set(groups)
    order = {d: i for i, d in enumerate(domains)}
    rng = random.Random(seed)

    queues: dict[StratumKey, list[RawPost]] = {}
    for key in sorted(wanted, key=lambda k: (k.community, order.get(k.domain, len(order)))):
        pool = sorted(groups.get(key, []), key=lambda p: p.id)
        rng.shuffle(pool)
        queues[key] = pool

    picked: list[RawPost] = []
    counts: dict[StratumKey, int] = {}
    shortfalls: dict[StratumKey, int] = {}
    communities = sorted({k.community for k in queues})
    for community in communities:
        keys = [k for k in queues if k.community == community]
        keys.sort(key=lambda k: order.get(k.domain, len(order)))
        cursor = {k: 0 for k in keys}
        missing: list[StratumKey] = []
        for k in keys:
            take = min(per_stratum, len(queues[k]))
            picked.extend(queues[k][:take])
            cursor[k] = take
            counts[k] = take
            missing.extend([k] * (per_stratum - take))
        # round-robin refill
        need = len(missing)
        while need:
            progressed = False
            for k in keys:
                if need and cursor[k] < len(queues[k]):
                    picked.append(queues[k][cursor[k]])
                    cursor[k] += 1
                    counts[k] += 1
                    need -= 1
                    progressed = True
            if not progressed:
                break
        for k in missing[len(missing) - need:]:
            shortfalls[k] = shortfalls.get(k, 0) + 1
    return SampleResult(tuple(picked), counts, shortfalls)
