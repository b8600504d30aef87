"""Valence scoring, toxicity providers and the weighted sentiment aggregate."""
from __future__ import annotations

import math
import os
import string
from dataclasses import dataclass, fields
from typing import Mapping, Protocol

from ._io import data_path, load_toml
from .errors import ProtocolError
from .themes import tokenize

TOXICITY_ATTRIBUTES = ("toxicity", "severe_toxicity", "insult", "profanity", "threat", "identity_attack")


@dataclass(frozen=True)
class ValenceLexicon:
    valences: Mapping[str, float]
    negators: frozenset
    intensifiers: frozenset
    negation_scalar: float = -0.74
    intensifier_increment: float = 0.293
    alpha: float = 15.0
    negation_window: int = 3


def load_valence_lexicon(path=None, rules_path=None) -> ValenceLexicon:
    """TSV of token, mean valence (further columns ignored) plus the rules TOML."""
    valences = {}
    with open(path or data_path("valence_lexicon.tsv"), encoding="utf-8") as f:
        for line in f:
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2 or not parts[0]:
                continue
            try:
                valences[parts[0].lower()] = float(parts[1])
            except ValueError:
                continue
    rules = load_toml(rules_path or data_path("valence_rules.toml"))
    return ValenceLexicon(
        valences=valences,
        negators=frozenset(w.lower() for w in rules["negators"]),
        intensifiers=frozenset(w.lower() for w in rules["intensifiers"]),
        negation_scalar=rules.get("negation_scalar", -0.74),
        intensifier_increment=rules.get("intensifier_increment", 0.293),
        alpha=rules.get("alpha", 15.0),
        negation_window=rules.get("negation_window", 3),
    )


_DEFAULT_VALENCE: ValenceLexicon | None = None


def default_valence_lexicon() -> ValenceLexicon:
    global _DEFAULT_VALENCE
    if _DEFAULT_VALENCE is None:
        _DEFAULT_VALENCE = load_valence_lexicon()
    return _DEFAULT_VALENCE


@dataclass(frozen=True)
class ValenceScore:
    compound: float


def valence_tokens(text: str, lexicon: ValenceLexicon) -> list[str]:
    # whitespace tokens; keep a token verbatim if the lexicon knows it (emoticons), else strip punctuation
    out = []
    for raw in text.lower().split():
        if raw in lexicon.valences:
            out.append(raw)
            continue
        tok = raw.strip(string.punctuation)
        if tok:
            out.append(tok)
    return out


def _is_negator(tok: str, lexicon: ValenceLexicon) -> bool:
    return tok in lexicon.negators or tok.endswith("n't")


def valence(text: str, lexicon: ValenceLexicon | None = None) -> ValenceScore:
    """Compound valence S / sqrt(S^2 + alpha) over rule-adjusted token valences.

    A token right after an intensifier moves 0.293 further from zero; a negator
    among the three preceding tokens then flips it and scales by 0.74.
    """
    lex = lexicon or default_valence_lexicon()
    tokens = valence_tokens(text, lex)
    total = 0.0
    for i, tok in enumerate(tokens):
        v = lex.valences.get(tok)
        if not v:
            continue
        if i > 0 and tokens[i - 1] in lex.intensifiers:
            v += math.copysign(lex.intensifier_increment, v)
        window = tokens[max(0, i - lex.negation_window):i]
        if any(_is_negator(t, lex) for t in window):
            v *= lex.negation_scalar
        total += v
    if total == 0.0:
        return ValenceScore(0.0)
    return ValenceScore(total / math.sqrt(total * total + lex.alpha))


# -- toxicity ------------------------------------------------------------------


@dataclass(frozen=True)
class ToxicityAttributes:
    toxicity: float
    severe_toxicity: float
    insult: float
    profanity: float
    threat: float
    identity_attack: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{f.name}={v} outside [0, 1]")


class ToxicityProvider(Protocol):
    name: str
    max_parallelism: int

    def score(self, text: str) -> Mapping[str, float]:
        ...


class StubToxicityProvider:
    """Counts whole-token hits per attribute list; attribute = min(1, hits / 5)."""

    name = "stub-toxicity"
    max_parallelism = 64

    def __init__(self, lists: Mapping[str, list[str]] | None = None):
        if lists is None:
            lists = load_toml(data_path("toxicity_stub.toml"))["attributes"]
        self._lists = {a: frozenset(w.lower() for w in lists.get(a, ())) for a in TOXICITY_ATTRIBUTES}

    @classmethod
    def from_file(cls, path) -> "StubToxicityProvider":
        return cls(load_toml(path)["attributes"])

    def score(self, text: str) -> dict[str, float]:
        tokens = tokenize(text)
        out = {}
        for attr, words in self._lists.items():
            hits = sum(t in words for t in tokens)
            out[attr] = min(1.0, hits / 5)
        return out


class PerspectiveProvider:
    """Perspective-style comments:analyze endpoint."""

    name = "perspective"

    def __init__(self, url: str, api_key: str | None = None, timeout: float = 30.0,
                 max_parallelism: int = 1, transport=None):
        import httpx

        self.url = url
        self.max_parallelism = max_parallelism
        self._key = api_key or os.environ.get("CONCERNKIT_API_KEY")
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def score(self, text: str) -> dict[str, float]:
        from .classify import _post_json

        payload = {
            "comment": {"text": text},
            "languages": ["en"],
            "requestedAttributes": {a.upper(): {} for a in TOXICITY_ATTRIBUTES},
        }
        params = f"?key={self._key}" if self._key else ""
        body = _post_json(self._client, self.url + params, payload, {})
        try:
            scores = body["attributeScores"]
            return {a: scores[a.upper()]["summaryScore"]["value"] for a in TOXICITY_ATTRIBUTES}
        except (KeyError, TypeError):
            raise ProtocolError(f"unexpected toxicity payload: {str(body)[:200]}") from None


def toxicity(text: str, provider: ToxicityProvider) -> ToxicityAttributes:
    raw = provider.score(text)  # RetryableError propagates to the caller's retry loop
    if not isinstance(raw, Mapping):
        raise ProtocolError(f"toxicity provider returned {type(raw).__name__}")
    values = {}
    for attr in TOXICITY_ATTRIBUTES:
        v = raw.get(attr)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or math.isnan(v):
            raise ProtocolError(f"toxicity attribute {attr!r} missing or not numeric: {v!r}")
        if not 0.0 <= v <= 1.0:
            raise ProtocolError(f"toxicity attribute {attr!r}={v} outside [0, 1]")
        values[attr] = float(v)
    return ToxicityAttributes(**values)


# -- aggregation ---------------------------------------------------------------


@dataclass(frozen=True)
class SentimentWeights:
    w_a: float = 1.0  # toxicity
    w_b: float = 1.0  # severe toxicity
    w_c: float = 1.0  # insult
    w_d: float = 1.0  # profanity
    w_e: float = 1.0  # threat
    w_f: float = 1.0  # identity attack
    w_g: float = 1.0  # negated valence

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{f.name} must be positive and finite")


def nor(value: float, lo: float, hi: float) -> float:
    """Min-max scale; a degenerate range maps everything to 0."""
    if hi == lo:
        return 0.0
    return (value - lo) / (hi - lo)


SENTIMENT_FIELDS = ("tox", "sev", "ins", "pro", "thr", "ide", "vad")


def aggregate_sentiment(
    attrs: ToxicityAttributes,
    vad: ValenceScore,
    weights: SentimentWeights,
    norms: Mapping[str, tuple[float, float]],
    normalize_identity: bool = False,
) -> float:
    """Weighted sum of normalized toxicity attributes and negated valence.

    `norms` maps tox/sev/ins/pro/thr/ide/vad to corpus (min, max); the vad
    range is over negated compound scores. Identity attack enters raw unless
    `normalize_identity` is set.
    """
    ide = attrs.identity_attack
    if normalize_identity:
        ide = nor(ide, *norms["ide"])
    return (
        weights.w_a * nor(attrs.toxicity, *norms["tox"])
        + weights.w_b * nor(attrs.severe_toxicity, *norms["sev"])
        + weights.w_c * nor(attrs.insult, *norms["ins"])
        + weights.w_d * nor(attrs.profanity, *norms["pro"])
        + weights.w_e * nor(attrs.threat, *norms["thr"])
        + weights.w_f * ide
        + weights.w_g * nor(-vad.compound, *norms["vad"])
    )
