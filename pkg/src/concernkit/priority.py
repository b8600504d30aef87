"""Per-post priority scoring, weight tuning and ranking evaluation."""
from __future__ import annotations

import itertools
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._io import load_toml, toml_value
from .classify import EthicalConcernCategory
from .corpus import RawPost
from .errors import ConfigError
from .sentiment import SentimentWeights, ToxicityAttributes, ValenceScore, aggregate_sentiment, nor
from .themes import THEMES, PriorityTheme, ThemeScores

EPSILON = 1e-9
DEFAULT_GRID = (1.0, 2.0, 5.0, 10.0)

# column order of the feature matrix == weight order w_a .. w_j
FEATURE_NAMES = ("tox", "sev", "ins", "pro", "thr", "ide", "vad", "ent", "rec", "pop")
WEIGHT_NAMES = tuple(f"w_{c}" for c in "abcdefghij")


# -- theme distribution and entropy -------------------------------------------


@dataclass(frozen=True)
class ThemeHistogram:
    edges: tuple[float, ...]
    phi: tuple[float, ...]

    @property
    def bin_count(self) -> int:
        return len(self.phi)

    def bin_of(self, value: float) -> int:
        if self.bin_count == 1:
            return 0
        i = int(np.searchsorted(self.edges, value, side="right")) - 1
        return min(max(i, 0), self.bin_count - 1)

    def phi_of(self, value: float) -> float:
        return self.phi[self.bin_of(value)]


@dataclass(frozen=True)
class ThemeDistribution:
    histograms: Mapping[PriorityTheme, ThemeHistogram]

    def phi(self, theme: PriorityTheme, value: float) -> float:
        return self.histograms[theme].phi_of(value)


def _fit_histogram(values: Sequence[float], bin_count: int, eps: float) -> ThemeHistogram:
    lo, hi = min(values), max(values)
    if lo == hi:
        return ThemeHistogram((lo, hi), (1.0,))
    edges = tuple(float(e) for e in np.linspace(lo, hi, bin_count + 1))
    hist = ThemeHistogram(edges, (0.0,) * bin_count)
    counts = np.zeros(bin_count)
    for v in values:
        counts[hist.bin_of(v)] += 1
    freq = counts / len(values)
    empty = freq == 0
    # empty bins sit exactly at eps; occupied bins share the remaining mass
    phi = np.where(empty, eps, freq * (1.0 - eps * empty.sum()) / freq[~empty].sum())
    return ThemeHistogram(edges, tuple(float(p) for p in phi))


def fit_theme_distribution(scores: Sequence[ThemeScores], bin_count: int = 10,
                           eps: float = EPSILON) -> ThemeDistribution:
    """Equal-width histogram per theme over the observed [min, max]; empty bins floored at eps."""
    if not scores:
        raise ValueError("need at least one ThemeScores")
    if bin_count < 1:
        raise ValueError("bin_count must be >= 1")
    return ThemeDistribution(
        {t: _fit_histogram([s.get(t) for s in scores], bin_count, eps) for t in THEMES}
    )


def entropy_term(phi: float, surprisal: bool = False) -> float:
    """-phi * log2(phi); with `surprisal`, -log2(phi) instead."""
    if not phi > 0.0:
        raise ValueError(f"phi must be in (0, 1], got {phi}")
    if surprisal:
        return -math.log2(phi)
    return -phi * math.log2(phi)


def total_entropy(scores: ThemeScores, dist: ThemeDistribution, surprisal: bool = False) -> float:
    return sum(entropy_term(dist.phi(t, scores.get(t)), surprisal) for t in THEMES)


# -- recency, popularity, normalization ---------------------------------------


def recency(post: RawPost) -> int:
    """Whole days since the Unix epoch."""
    return post.created_utc // 86_400


def popularity(post: RawPost, max_upvotes: int, max_comments: int) -> float:
    up = post.upvotes / max_upvotes if max_upvotes > 0 else 0.0
    com = post.num_comments / max_comments if max_comments > 0 else 0.0
    return up + post.upvote_ratio + com


def normalize(values: Sequence[float]) -> list[float]:
    if len(values) == 0:
        raise ValueError("cannot normalize an empty list")
    lo, hi = min(values), max(values)
    return [nor(v, lo, hi) for v in values]


# -- features and weights ------------------------------------------------------


@dataclass(frozen=True)
class FeatureVector:
    """Raw (pre-normalization) features of one post. `vad` is the negated valence compound."""

    post_id: str
    created_utc: int
    tox: float
    sev: float
    ins: float
    pro: float
    thr: float
    ide: float
    vad: float
    ent: float
    rec: float
    pop: float

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, n) for n in FEATURE_NAMES)


@dataclass(frozen=True)
class FeatureNorms:
    ranges: Mapping[str, tuple[float, float]]

    @classmethod
    def fit(cls, features: Sequence[FeatureVector]) -> "FeatureNorms":
        if not features:
            raise ValueError("no features to fit norms on")
        return cls({n: (min(getattr(f, n) for f in features), max(getattr(f, n) for f in features))
                    for n in FEATURE_NAMES})

    def __getitem__(self, name: str) -> tuple[float, float]:
        return self.ranges[name]


@dataclass(frozen=True)
class PriorityWeights:
    w_a: float = 1.0
    w_b: float = 1.0
    w_c: float = 1.0
    w_d: float = 1.0
    w_e: float = 1.0
    w_f: float = 1.0
    w_g: float = 1.0
    w_h: float = 1.0
    w_i: float = 1.0
    w_j: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{f.name} must be positive and finite, got {v}")

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "PriorityWeights":
        if len(values) != 10:
            raise ValueError("exactly 10 weights required")
        return cls(*(float(v) for v in values))

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, n) for n in WEIGHT_NAMES)

    def sentiment(self) -> SentimentWeights:
        return SentimentWeights(*self.as_tuple()[:7])

    def scaled(self, c: float) -> "PriorityWeights":
        return PriorityWeights.from_sequence([c * w for w in self.as_tuple()])

    def to_toml(self, header: str | None = None) -> str:
        lines = [f"# {header}"] if header else []
        lines += [f"{n} = {toml_value(v)}" for n, v in zip(WEIGHT_NAMES, self.as_tuple())]
        return "\n".join(lines) + "\n"


def load_weights(path) -> PriorityWeights:
    raw = load_toml(path)
    raw = raw.get("weights", raw)
    unknown = set(raw) - set(WEIGHT_NAMES)
    if unknown:
        raise ConfigError(f"unknown weight names {sorted(unknown)}")
    missing = [n for n in WEIGHT_NAMES if n not in raw]
    if missing:
        raise ConfigError(f"weights file lacks {missing}")
    return PriorityWeights(**{n: float(raw[n]) for n in WEIGHT_NAMES})


def priority(features: FeatureVector, weights: PriorityWeights, norms: FeatureNorms,
             normalize_identity: bool = False) -> float:
    """Sentiment aggregate plus weighted normalized entropy, recency and popularity."""
    attrs = ToxicityAttributes(features.tox, features.sev, features.ins, features.pro,
                               features.thr, features.ide)
    sent = aggregate_sentiment(attrs, ValenceScore(-features.vad), weights.sentiment(),
                               norms.ranges, normalize_identity)
    return (
        sent
        + weights.w_h * nor(features.ent, *norms["ent"])
        + weights.w_i * nor(features.rec, *norms["rec"])
        + weights.w_j * nor(features.pop, *norms["pop"])
    )


def feature_matrix(features: Sequence[FeatureVector], norms: FeatureNorms,
                   normalize_identity: bool = False) -> np.ndarray:
    """n x 10 matrix of the terms that the weights multiply, in w_a..w_j order."""
    cols = []
    for name in FEATURE_NAMES:
        raw = np.array([getattr(f, name) for f in features], dtype=float)
        if name == "ide" and not normalize_identity:
            cols.append(raw)
            continue
        lo, hi = norms[name]
        cols.append(np.zeros_like(raw) if hi == lo else (raw - lo) / (hi - lo))
    return np.column_stack(cols) if cols[0].size else np.zeros((0, len(FEATURE_NAMES)))


def build_features(
    posts: Sequence[RawPost],
    themes: Mapping[str, ThemeScores],
    toxicity: Mapping[str, ToxicityAttributes],
    valences: Mapping[str, ValenceScore],
    bin_count: int = 10,
    surprisal: bool = False,
) -> tuple[list[FeatureVector], ThemeDistribution]:
    """Combine per-post signals into FeatureVectors; corpus-level pieces fitted on `posts`."""
    if not posts:
        return [], ThemeDistribution({})
    dist = fit_theme_distribution([themes[p.id] for p in posts], bin_count)
    max_up = max(p.upvotes for p in posts)
    max_com = max(p.num_comments for p in posts)
    out = []
    for p in posts:
        t = toxicity[p.id]
        out.append(FeatureVector(
            post_id=p.id,
            created_utc=p.created_utc,
            tox=t.toxicity, sev=t.severe_toxicity, ins=t.insult, pro=t.profanity,
            thr=t.threat, ide=t.identity_attack,
            vad=-valences[p.id].compound,
            ent=total_entropy(themes[p.id], dist, surprisal),
            rec=float(recency(p)),
            pop=popularity(p, max_up, max_com),
        ))
    return out, dist


# -- ranking and evaluation ---------------------------------------------------


def tie_ranks(created: Sequence[int], ids: Sequence[str]) -> np.ndarray:
    """Position of each item in (older first, then id) order."""
    order = sorted(range(len(ids)), key=lambda i: (created[i], ids[i]))
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[order] = np.arange(len(ids))
    return ranks


def rank_indices(scores: np.ndarray, tie: np.ndarray) -> np.ndarray:
    """Descending score; ties broken by `tie` ascending."""
    return np.lexsort((tie, -np.asarray(scores)))


@dataclass(frozen=True)
class EvalMetrics:
    precision_at_k: float
    recall_at_k: float
    k: int
    n_relevant: int
    per_fold: tuple = ()
    degenerate_folds: int = 0


def precision_recall_at_k(ranked: Sequence[str], truth: Mapping[str, float], k: int = 20,
                          relevance_threshold: float = 4.0) -> EvalMetrics:
    """Precision/recall of the top-k of `ranked`; k is clamped to the list length.

    With no relevant item in the list, recall is 1 and precision 0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not ranked:
        raise ValueError("ranked list is empty")
    missing = [i for i in ranked if i not in truth]
    if missing:
        raise KeyError(f"ids without ground truth: {missing[:5]}")
    k_eff = min(k, len(ranked))
    relevant = {i for i in ranked if truth[i] >= relevance_threshold}
    hits = sum(1 for i in ranked[:k_eff] if i in relevant)
    precision = hits / k_eff
    recall = hits / len(relevant) if relevant else 1.0
    return EvalMetrics(precision, recall, k_eff, len(relevant))


def read_truth(path) -> dict[str, float]:
    """CSV with post_id,mean_rating; ratings must lie in [1, 5]."""
    import csv

    out = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(line for line in f if not line.startswith("#")):
            r = float(row["mean_rating"])
            if not 1.0 <= r <= 5.0:
                raise ValueError(f"rating {r} for {row['post_id']} outside [1, 5]")
            out[row["post_id"]] = r
    return out


# -- grid search ----------------------------------------------------------------


def grid_candidates(grid: Sequence[float] = DEFAULT_GRID, free: Sequence[str] = WEIGHT_NAMES,
                    fixed: PriorityWeights | None = None) -> Iterable[tuple[float, ...]]:
    """All weight tuples, lexicographic over the free parameters (w_a slowest)."""
    base = (fixed or PriorityWeights()).as_tuple()
    pos = [WEIGHT_NAMES.index(n) for n in free]
    for combo in itertools.product(sorted(grid), repeat=len(pos)):
        w = list(base)
        for p, v in zip(pos, combo):
            w[p] = v
        yield tuple(w)


class _CandidateSpace:
    """Index <-> weight-tuple mapping for the lexicographic grid, built chunk-wise."""

    def __init__(self, grid, free, fixed):
        self.grid = np.array(sorted(grid), dtype=float)
        self.base = np.array((fixed or PriorityWeights()).as_tuple(), dtype=float)
        self.pos = [WEIGHT_NAMES.index(n) for n in free]
        if len(set(self.pos)) != len(self.pos):
            raise ValueError("free parameters repeat")
        self.size = len(self.grid) ** len(self.pos)
        b = len(self.grid)
        self.powers = b ** np.arange(len(self.pos) - 1, -1, -1)

    def weights(self, start: int, stop: int) -> np.ndarray:
        idx = np.arange(start, stop)
        digits = (idx[:, None] // self.powers[None, :]) % len(self.grid)
        w = np.repeat(self.base[None, :], stop - start, axis=0)
        w[:, self.pos] = self.grid[digits]
        return w

    def weight(self, i: int) -> tuple[float, ...]:
        return tuple(float(v) for v in self.weights(i, i + 1)[0])


def _topk_hits(scores: np.ndarray, rel: np.ndarray, tie: np.ndarray, k: int) -> np.ndarray:
    """Relevant items among each row's top-k under (score desc, tie asc) order."""
    m, n = scores.shape
    if k >= n:
        return np.full(m, int(rel.sum()))
    kth = np.partition(scores, n - k, axis=1)[:, n - k]
    ge = scores >= kth[:, None]
    n_ge = ge.sum(1)
    hits = ge[:, rel].sum(1)
    # rows where ties straddle the cut: resolve exactly with the tie order
    for r in np.flatnonzero(n_ge > k):
        top = rank_indices(scores[r], tie)[:k]
        hits[r] = int(rel[top].sum())
    return hits


@dataclass(frozen=True)
class FoldResult:
    fold: int
    train_size: int
    test_size: int
    selected: tuple[float, ...]
    train_precision: float
    test: EvalMetrics
    degenerate: bool


@dataclass(frozen=True)
class GridSearchResult:
    best: PriorityWeights
    metrics: EvalMetrics
    folds: tuple[FoldResult, ...]
    n_candidates: int
    selection_counts: Mapping[tuple[float, ...], int] = field(default_factory=dict)


def fold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle of 0..n-1 split into `folds` nearly equal parts."""
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if n < folds:
        raise ValueError(f"{n} items cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def _score_candidates(space: _CandidateSpace, x: np.ndarray, rel: np.ndarray, tie: np.ndarray,
                      k: int, chunk: int, workers: int) -> np.ndarray:
    xt = np.ascontiguousarray(x.T)
    starts = list(range(0, space.size, chunk))

    def run(start):
        w = space.weights(start, min(start + chunk, space.size))
        return _topk_hits(w @ xt, rel, tie, k)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts)


def _evaluate_fold(x, ids, tie, truth, weights, k, threshold) -> EvalMetrics:
    order = rank_indices(x @ np.asarray(weights, dtype=float), tie)
    return precision_recall_at_k([ids[i] for i in order], truth, k, threshold)


def grid_search(
    x: np.ndarray,
    ids: Sequence[str],
    created: Sequence[int],
    truth: Mapping[str, float],
    grid: Sequence[float] = DEFAULT_GRID,
    k: int = 20,
    folds: int = 10,
    seed: int = 0,
    relevance_threshold: float = 4.0,
    free: Sequence[str] = WEIGHT_NAMES,
    fixed: PriorityWeights | None = None,
    workers: int | None = None,
    chunk: int = 16384,
) -> GridSearchResult:
    """Cross-validated exhaustive search over weight tuples.

    `x` is the normalized feature matrix (rows aligned with `ids`). For each
    fold the tuple with the highest training precision@k wins, earliest in
    lexicographic order on ties; it is then scored on the held-out fold with
    k clamped to the fold size. The returned weights are the tuple chosen
    most often across folds (lexicographically smallest on ties).
    """
    x = np.asarray(x, dtype=float)
    ids = list(ids)
    if x.shape != (len(ids), len(WEIGHT_NAMES)):
        raise ValueError(f"feature matrix must be ({len(ids)}, 10), got {x.shape}")
    missing = [i for i in ids if i not in truth]
    if missing:
        raise KeyError(f"ids without ground truth: {missing[:5]}")
    if len(ids) < folds:
        raise ValueError(f"ground truth has {len(ids)} items, fewer than {folds} folds")
    workers = workers or os.cpu_count() or 1
    space = _CandidateSpace(grid, free, fixed)
    rel_all = np.array([truth[i] >= relevance_threshold for i in ids])
    tie_all = tie_ranks(created, ids)

    results = []
    parts = fold_indices(len(ids), folds, seed)
    for f, test in enumerate(parts):
        train = np.setdiff1d(np.arange(len(ids)), test)
        hits = _score_candidates(space, x[train], rel_all[train], tie_all[train], k, chunk, workers)
        best = int(np.argmax(hits))
        chosen = space.weight(best)
        k_train = min(k, len(train))
        test_metrics = _evaluate_fold(x[test], [ids[i] for i in test], tie_all[test], truth, chosen,
                                      k, relevance_threshold)
        results.append(FoldResult(
            fold=f,
            train_size=len(train),
            test_size=len(test),
            selected=chosen,
            train_precision=float(hits[best]) / k_train,
            test=test_metrics,
            degenerate=test_metrics.n_relevant == 0,
        ))

    counts = Counter(r.selected for r in results)
    top = max(counts.values())
    best_tuple = min(t for t, c in counts.items() if c == top)
    metrics = EvalMetrics(
        precision_at_k=float(np.mean([r.test.precision_at_k for r in results])),
        recall_at_k=float(np.mean([r.test.recall_at_k for r in results])),
        k=k,
        n_relevant=int(rel_all.sum()),
        per_fold=tuple(r.test for r in results),
        degenerate_folds=sum(r.degenerate for r in results),
    )
    return GridSearchResult(PriorityWeights.from_sequence(best_tuple), metrics, tuple(results),
                            space.size, dict(counts))


def cross_validate(x: np.ndarray, ids: Sequence[str], created: Sequence[int], truth: Mapping[str, float],
                   weights: PriorityWeights, k: int = 20, folds: int = 10, seed: int = 0,
                   relevance_threshold: float = 4.0) -> EvalMetrics:
    """Score fixed weights on the same held-out folds grid_search would use."""
    x = np.asarray(x, dtype=float)
    ids = list(ids)
    tie_all = tie_ranks(created, ids)
    per_fold = []
    for test in fold_indices(len(ids), folds, seed):
        per_fold.append(_evaluate_fold(x[test], [ids[i] for i in test], tie_all[test], truth,
                                       weights.as_tuple(), k, relevance_threshold))
    return EvalMetrics(
        float(np.mean([m.precision_at_k for m in per_fold])),
        float(np.mean([m.recall_at_k for m in per_fold])),
        k, sum(m.n_relevant for m in per_fold), tuple(per_fold),
        sum(m.n_relevant == 0 for m in per_fold),
    )


def random_baseline(ids: Sequence[str], truth: Mapping[str, float], k: int = 20, folds: int = 10,
                    seed: int = 0, draws: int = 100, relevance_threshold: float = 4.0) -> EvalMetrics:
    """Mean held-out precision/recall of `draws` uniformly random rankings per fold."""
    ids = list(ids)
    rng = np.random.default_rng(seed + 1)
    precisions, recalls = [], []
    for _ in range(draws):
        for test in fold_indices(len(ids), folds, seed):
            order = rng.permutation(test)
            m = precision_recall_at_k([ids[i] for i in order], truth, k, relevance_threshold)
            precisions.append(m.precision_at_k)
            recalls.append(m.recall_at_k)
    return EvalMetrics(float(np.mean(precisions)), float(np.mean(recalls)), k,
                       sum(truth[i] >= relevance_threshold for i in ids))


# -- ranking output -----------------------------------------------------------


@dataclass(frozen=True)
class RankedPost:
    rank: int
    post_id: str
    priority: float
    category: EthicalConcernCategory
    components: tuple[float, ...]  # the ten weighted terms, w_a..w_j


@dataclass(frozen=True)
class CategoryPriority:
    category: EthicalConcernCategory
    mean_priority: float
    n_posts: int


def rank_and_aggregate(
    features: Sequence[FeatureVector],
    weights: PriorityWeights,
    categories: Mapping[str, EthicalConcernCategory],
    norms: FeatureNorms | None = None,
    normalize_identity: bool = False,
) -> tuple[list[RankedPost], list[CategoryPriority]]:
    """Rank posts by priority (ties: older first, then id) and average priority per category.

    Posts labelled None are ranked but left out of the category table.
    """
    if not features:
        return [], []
    norms = norms or FeatureNorms.fit(features)
    missing = [f.post_id for f in features if f.post_id not in categories]
    if missing:
        raise KeyError(f"posts without category: {missing[:5]}")
    x = feature_matrix(features, norms, normalize_identity)
    w = np.array(weights.as_tuple())
    prio = [priority(f, weights, norms, normalize_identity) for f in features]
    tie = tie_ranks([f.created_utc for f in features], [f.post_id for f in features])
    order = rank_indices(np.array(prio), tie)
    ranked = [
        RankedPost(r + 1, features[i].post_id, prio[i], categories[features[i].post_id],
                   tuple(float(v) for v in x[i] * w))
        for r, i in enumerate(order)
    ]
    sums: dict[EthicalConcernCategory, list[float]] = {}
    for f, p in zip(features, prio):
        cat = categories[f.post_id]
        if cat is EthicalConcernCategory.NoneLabel:
            continue
        sums.setdefault(cat, []).append(p)
    table = [CategoryPriority(c, sum(v) / len(v), len(v)) for c, v in sums.items()]
    table.sort(key=lambda c: (-c.mean_priority, c.category.value))
    return ranked, table
