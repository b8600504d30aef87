"""Seeded synthetic data: planted-priority corpora, weekly series and a small demo workspace."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .timeline import WeeklyPoint


@dataclass(frozen=True)
class PlantedCorpus:
    x: np.ndarray  # normalized n x 10 feature matrix
    ids: list[str]
    created: list[int]
    truth: dict[str, float]
    weights: tuple[float, ...]
    kind: np.ndarray  # 0 relevant-type, 1 decoy, 2 background


def planted_corpus(n: int = 400, weights: Sequence[float] = (1, 1, 2, 1, 1, 10, 1, 5, 1, 2),
                   seed: int = 7, relevant_share: float = 0.55, decoy_share: float = 0.15) -> PlantedCorpus:
    """Feature matrix whose Likert truth is the quantized weighted sum under `weights`.

    Heavily weighted features (>= 5) carry the signal for relevant-type posts;
    decoys are high on every lightly weighted feature, so uniform weights
    over-rank them. The top `relevant_share` of planted scores get ratings 4-5.
    """
    rng = np.random.default_rng(seed)
    w = np.asarray(weights, dtype=float)
    heavy = w >= 5
    kind = rng.choice(3, size=n, p=[relevant_share, decoy_share, 1 - relevant_share - decoy_share])
    x = np.empty((n, len(w)))
    for i, k in enumerate(kind):
        if k == 0:
            x[i] = np.where(heavy, rng.uniform(0.7, 1.0), rng.uniform(0, 0.02, len(w)))
        elif k == 1:
            x[i] = np.where(heavy, rng.uniform(0, 0.1, len(w)), rng.uniform(0.6, 1.0, len(w)))
        else:
            x[i] = rng.uniform(0, 0.3, len(w))
    score = x @ w
    cuts = np.quantile(score, [0.15, 0.30, 1 - relevant_share, 1 - relevant_share / 2])
    ratings = 1.0 + np.searchsorted(cuts, score, side="right")
    ids = [f"s{i:04d}" for i in range(n)]
    created = [int(c) for c in rng.integers(1_514_764_800, 1_672_531_200, n)]
    return PlantedCorpus(x, ids, created, dict(zip(ids, (float(r) for r in ratings))),
                         tuple(float(v) for v in w), kind)


def seasonal_series(n_weeks: int = 260, seed: int = 0, level: float = 0.2, slope: float = 2e-4,
                    amplitude: float = 0.05, noise: float = 0.01, start: date = date(2018, 1, 1),
                    period: float = 52.18, denominator: int = 1_000_000) -> list[WeeklyPoint]:
    """Trend + yearly sine + Gaussian noise, stored as counts over a large weekly total."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_weeks)
    y = level + slope * t + amplitude * np.sin(2 * np.pi * t / period) + rng.normal(0, noise, n_weeks)
    y = np.clip(y, 0.0, 1.0)
    first = start - timedelta(days=start.weekday())
    return [WeeklyPoint(first + timedelta(weeks=int(i)), int(round(v * denominator)), denominator)
            for i, v in zip(t, y)]


# -- demo workspace --------------------------------------------------------------

_SUBREDDITS = {
    "BlackLGBT": (1, 0, 1, 0, 0, 0, 0),
    "QueerPoC": (1, 0, 1, 0, 0, 0, 0),
    "DisabledWomen": (0, 1, 0, 0, 0, 1, 0),
    "ChronicIllnessLadies": (0, 1, 0, 0, 0, 1, 0),
    "PovertyAndMentalHealth": (0, 0, 0, 1, 0, 0, 1),
    "BrokeAndAnxious": (0, 0, 0, 1, 0, 0, 1),
}

_APPS = ("YouTube", "Facebook", "Instagram", "Discord", "Twitter", "TikTok")

_CONCERN_SNIPPETS = (
    "people keep sending hate messages, this harassment is bullying",
    "they sold my data and there is zero privacy",
    "I keep scrolling for hours, I think I am addicted",
    "moderators banned my post and removed my account for no reason",
    "the ads are full of scam links promising free money",
    "there is so much fake news and misinformation on my feed",
    "my kid saw violent graphic content and porn in the recommendations",
    "the algorithm is racist and discriminates against us",
    "strangers threatened to hurt me and I feel unsafe",
    "I feel lonely and isolated since everyone lives online",
)

_NEUTRAL_SNIPPETS = (
    "how do I change the dark mode setting",
    "what is your favourite channel to watch on weekends",
    "just sharing a cute picture of my cat",
    "does anyone know a good recipe group",
    "the new update moved the settings button",
)


def demo_workspace(root, seed: int = 7, n_posts: int = 600, weeks: int = 130) -> dict[str, Path]:
    """Write a small, fully synthetic workspace (posts, memberships, truth, events, config)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    start = datetime(2019, 1, 7, tzinfo=timezone.utc)
    posts = []
    for i in range(n_posts):
        week = int(rng.integers(0, weeks))
        seasonal = 0.25 + 0.15 * np.sin(2 * np.pi * week / 52.18)
        concern = rng.random() < seasonal
        app = _APPS[int(rng.integers(len(_APPS)))]
        snippet = (_CONCERN_SNIPPETS[int(rng.integers(len(_CONCERN_SNIPPETS)))] if concern
                   else _NEUTRAL_SNIPPETS[int(rng.integers(len(_NEUTRAL_SNIPPETS)))])
        created = start + timedelta(weeks=week, seconds=int(rng.integers(0, 7 * 86400)))
        sub = list(_SUBREDDITS)[int(rng.integers(len(_SUBREDDITS)))]
        posts.append({
            "id": f"d{i:05d}",
            "subreddit": sub,
            "created_utc": int(created.timestamp()),
            "title": f"Question about {app}",
            "body": f"On {app} {snippet}. Anyone else?",
            "upvotes": int(rng.integers(0, 500)),
            "upvote_ratio": round(float(rng.uniform(0.5, 1.0)), 2),
            "num_comments": int(rng.integers(0, 120)),
        })
    paths = {
        "posts": root / "posts.jsonl",
        "memberships": root / "memberships.csv",
        "truth": root / "truth.csv",
        "events": root / "events.csv",
        "config": root / "config.toml",
    }
    with open(paths["posts"], "w", encoding="utf-8") as f:
        for p in posts:
            f.write(json.dumps(p, sort_keys=True) + "\n")
    with open(paths["memberships"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["subreddit", "bipoc", "women_afab", "lgbtqia", "low_ses", "global_south",
                    "physical_health", "mental_health"])
        for name, bits in _SUBREDDITS.items():
            w.writerow([name, *bits])
    with open(paths["truth"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["post_id", "mean_rating"])
        for p in posts[:120]:
            w.writerow([p["id"], f"{float(rng.integers(1, 6)):.2f}"])
    with open(paths["events"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["name", "date"] + [f"score_{i}" for i in range(1, 10)])
        for j in range(12):
            d = (start + timedelta(weeks=int(rng.integers(0, weeks)))).date()
            w.writerow([f"Event {j + 1}", d.isoformat()] + [int(s) for s in rng.integers(-2, 3, 9)])
    paths["config"].write_text(
        "seed = 7\n\n"
        "[inputs]\n"
        'posts = "posts.jsonl"\n'
        'memberships = "memberships.csv"\n'
        'truth = "truth.csv"\n'
        'events = "events.csv"\n\n'
        "[priority]\n"
        "tune = false\n",
        encoding="utf-8",
    )
    return paths
