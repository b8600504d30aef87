"""Lexicon topic scoring and the harm / negativity / children priority themes."""
from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping, Sequence

from ._io import data_path, load_toml
from .errors import ConfigError

_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str, stemmer: Callable[[str], str] | None = None) -> list[str]:
    """Lowercase, split on anything that is not [0-9a-z]; optional stemming."""
    tokens = [t for t in _SPLIT.split(text.lower()) if t]
    if stemmer is not None:
        tokens = [stemmer(t) for t in tokens]
    return tokens


@dataclass(frozen=True)
class TopicLexicon:
    # topic -> {term tokens: weight}; multi-word terms are tuples of length > 1
    topics: Mapping[str, Mapping[tuple[str, ...], float]]

    def __post_init__(self):
        for name, terms in self.topics.items():
            if not terms:
                raise ConfigError(f"topic {name!r} has no terms")

    @classmethod
    def from_terms(cls, topics: Mapping[str, Sequence[str] | Mapping[str, float]]) -> "TopicLexicon":
        built = {}
        for name, terms in topics.items():
            pairs = terms.items() if isinstance(terms, Mapping) else ((t, 1.0) for t in terms)
            table: dict[tuple[str, ...], float] = {}
            for term, weight in pairs:
                key = tuple(tokenize(term))
                if key:
                    table[key] = float(weight)
            built[name] = table
        return cls(built)

    def max_len(self, topic: str) -> int:
        return max(len(k) for k in self.topics[topic])


def load_lexicon(path=None) -> TopicLexicon:
    raw = load_toml(path or data_path("topics.toml"))["topics"]
    topics = {}
    for name, entry in raw.items():
        weights = entry.get("weights")
        topics[name] = dict(weights) if weights else list(entry["terms"])
    return TopicLexicon.from_terms(topics)


class PriorityTheme(Enum):
    HARM = "harm"
    NEGATIVITY = "negativity"
    CHILDREN = "children"


THEMES = tuple(PriorityTheme)


def load_theme_topics(path=None, lexicon: TopicLexicon | None = None) -> dict[PriorityTheme, tuple[str, ...]]:
    """Load theme -> topics and check it against the 21-topic table."""
    raw = load_toml(path or data_path("themes.toml"))
    out = {}
    for theme in THEMES:
        if theme.value not in raw:
            raise ConfigError(f"theme {theme.value!r} missing from themes file")
        out[theme] = tuple(raw[theme.value])
    flat = [t for topics in out.values() for t in topics]
    if len(flat) != len(set(flat)):
        raise ConfigError("theme topic lists overlap")
    if len(flat) != 21:
        raise ConfigError(f"expected 21 theme topics, found {len(flat)}")
    if lexicon is not None:
        absent = [t for t in flat if t not in lexicon.topics]
        if absent:
            raise ConfigError(f"lexicon lacks topics {absent}")
    return out


def _matched_weight(tokens: Sequence[str], terms: Mapping[tuple[str, ...], float], longest: int) -> float:
    # greedy longest match left to right; each token is consumed at most once
    total = 0.0
    i, n = 0, len(tokens)
    while i < n:
        for size in range(min(longest, n - i), 0, -1):
            w = terms.get(tuple(tokens[i:i + size]))
            if w is not None:
                total += w
                i += size
                break
        else:
            i += 1
    return total


def topic_score_tokens(tokens: Sequence[str], topic: str, lexicon: TopicLexicon) -> float:
    if topic not in lexicon.topics:
        raise KeyError(f"unknown topic {topic!r}")
    if not tokens:
        return 0.0
    return _matched_weight(tokens, lexicon.topics[topic], lexicon.max_len(topic)) / len(tokens)


def topic_score(text: str, topic: str, lexicon: TopicLexicon) -> float:
    """Weighted lexicon hits divided by the number of tokens in `text`."""
    return topic_score_tokens(tokenize(text), topic, lexicon)


def theme_score(text: str, theme: PriorityTheme, lexicon: TopicLexicon,
                theme_topics: Mapping[PriorityTheme, Sequence[str]] | None = None) -> float:
    theme_topics = theme_topics or load_theme_topics()
    tokens = tokenize(text)
    return sum(topic_score_tokens(tokens, t, lexicon) for t in theme_topics[theme])


@dataclass(frozen=True)
class ThemeScores:
    post_id: str
    harm: float
    negativity: float
    children: float

    def get(self, theme: PriorityTheme) -> float:
        return getattr(self, theme.value)


class ThemeScorer:
    """Scores all three themes for many posts with one loaded lexicon."""

    def __init__(self, lexicon: TopicLexicon | None = None, theme_topics=None,
                 stemmer: Callable[[str], str] | None = None):
        self.lexicon = lexicon or load_lexicon()
        self.theme_topics = theme_topics or load_theme_topics(lexicon=self.lexicon)
        self.stemmer = stemmer

    def score(self, post_id: str, text: str) -> ThemeScores:
        tokens = tokenize(text, self.stemmer)
        values = {
            theme.value: sum(topic_score_tokens(tokens, t, self.lexicon) for t in topics)
            for theme, topics in self.theme_topics.items()
        }
        return ThemeScores(post_id, **values)
