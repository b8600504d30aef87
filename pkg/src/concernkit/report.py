"""Frequency tables, CSV/SVG writers and the run manifest."""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape

from ._io import atomic_write, sha256_bytes
from .classify import CONCERN_CATEGORIES, EthicalConcernCategory
from .priority import CategoryPriority, RankedPost, WEIGHT_NAMES


@dataclass(frozen=True)
class FrequencyRow:
    key: tuple[str, ...]
    numerator: int
    denominator: int

    def __post_init__(self):
        if self.denominator <= 0:
            raise ValueError(f"{self.key}: denominator must be positive")
        if not 0 <= self.numerator <= self.denominator:
            raise ValueError(f"{self.key}: numerator outside [0, denominator]")

    @property
    def frequency(self) -> float:
        return self.numerator / self.denominator


@dataclass(frozen=True)
class FrequencyTable:
    name: str
    key_columns: tuple[str, ...]
    rows: tuple[FrequencyRow, ...]
    style: str = "percent"  # "percent" -> one decimal; "proportion" -> three decimals

    def formatted(self, row: FrequencyRow) -> str:
        if self.style == "percent":
            return f"{100 * row.frequency:.1f}"
        return f"{row.frequency:.3f}"

    def lookup(self, *key: str) -> FrequencyRow:
        for r in self.rows:
            if r.key == key:
                return r
        raise KeyError(key)

    def to_csv(self, run_id: str | None = None) -> str:
        buf = io.StringIO()
        if run_id:
            buf.write(f"# run_id={run_id}\n")
        w = csv.writer(buf, lineterminator="\n")
        value_col = "percent" if self.style == "percent" else "proportion"
        w.writerow([*self.key_columns, "numerator", "denominator", value_col])
        for r in self.rows:
            w.writerow([*r.key, r.numerator, r.denominator, self.formatted(r)])
        return buf.getvalue()


def frequency_by_category(categories: Iterable[EthicalConcernCategory]) -> FrequencyTable:
    """Share of each concern category among categorized posts (None labels excluded).

    Every category gets a row, zero counts included; rows by count desc, then name.
    """
    counts = Counter(c for c in categories if c is not EthicalConcernCategory.NoneLabel)
    total = sum(counts.values())
    if total == 0:
        raise ValueError("no categorized posts")
    rows = sorted((FrequencyRow((c.value,), counts[c], total) for c in CONCERN_CATEGORIES),
                  key=lambda r: (-r.numerator, r.key))
    return FrequencyTable("frequency_by_category", ("category",), tuple(rows))


def frequency_by_app(post_apps: Mapping[str, Sequence[str]], concern: Mapping[str, bool]) -> FrequencyTable:
    """Concern posts over all posts mentioning each app; a multi-app post counts for every app."""
    totals: Counter = Counter()
    hits: Counter = Counter()
    for pid, apps in post_apps.items():
        for app in dict.fromkeys(apps):
            totals[app] += 1
            hits[app] += bool(concern.get(pid, False))
    rows = sorted((FrequencyRow((a,), hits[a], totals[a]) for a in totals),
                  key=lambda r: (-r.frequency, r.key))
    return FrequencyTable("frequency_by_app", ("app",), tuple(rows))


def frequency_by_community(post_cluster: Mapping[str, str],
                           categories: Mapping[str, EthicalConcernCategory]) -> FrequencyTable:
    """(cluster, category) concern posts over all posts in the cluster, three decimals.

    Every cluster x category pair is emitted, zeros included.
    """
    totals: Counter = Counter(post_cluster.values())
    hits: Counter = Counter()
    for pid, cluster in post_cluster.items():
        cat = categories.get(pid)
        if cat is not None and cat is not EthicalConcernCategory.NoneLabel:
            hits[(cluster, cat)] += 1
    rows = [
        FrequencyRow((cl, c.value), hits[(cl, c)], totals[cl])
        for cl in sorted(totals)
        for c in CONCERN_CATEGORIES
    ]
    return FrequencyTable("frequency_by_community", ("cluster", "category"), tuple(rows), "proportion")


# -- other tabular outputs ---------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def ranked_csv(ranked: Sequence[RankedPost], run_id: str | None = None) -> str:
    buf = io.StringIO()
    if run_id:
        buf.write(f"# run_id={run_id}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "post_id", "priority", "category", *(f"term_{n[-1]}" for n in WEIGHT_NAMES)])
    for r in ranked:
        w.writerow([r.rank, r.post_id, _fmt(r.priority), r.category.value, *(_fmt(c) for c in r.components)])
    return buf.getvalue()


def category_priority_csv(table: Sequence[CategoryPriority], run_id: str | None = None) -> str:
    buf = io.StringIO()
    if run_id:
        buf.write(f"# run_id={run_id}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category", "mean_priority", "n_posts"])
    for c in table:
        w.writerow([c.category.value, _fmt(c.mean_priority), c.n_posts])
    return buf.getvalue()


def rows_csv(rows: Sequence[Mapping], columns: Sequence[str], run_id: str | None = None) -> str:
    buf = io.StringIO()
    if run_id:
        buf.write(f"# run_id={run_id}\n")
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r.get(c, "") for c in columns})
    return buf.getvalue()


def category_priority_svg(table: Sequence[CategoryPriority], run_id: str | None = None,
                          width: int = 640, bar_height: int = 22) -> str:
    """Horizontal bars of mean priority per category, highest first."""
    pad_l, pad_r, pad_t = 170, 60, 30
    height = pad_t + bar_height * max(len(table), 1) + 20
    top = max((c.mean_priority for c in table), default=1.0) or 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">']
    if run_id:
        parts.append(f"<metadata>run_id={escape(run_id)}</metadata>")
    parts.append('<text x="10" y="18" font-family="sans-serif" font-size="13">Mean priority by concern</text>')
    for i, c in enumerate(table):
        y = pad_t + i * bar_height
        length = max(c.mean_priority, 0.0) / top * (width - pad_l - pad_r)
        parts.append(f'<text x="{pad_l - 6}" y="{y + bar_height * 0.7:.1f}" font-family="sans-serif" '
                     f'font-size="11" text-anchor="end">{escape(c.category.value)}</text>')
        parts.append(f'<rect x="{pad_l}" y="{y + 3}" width="{length:.2f}" height="{bar_height - 6}" fill="#0072b2"/>')
        parts.append(f'<text x="{pad_l + length + 4:.2f}" y="{y + bar_height * 0.7:.1f}" '
                     f'font-family="sans-serif" font-size="10">{c.mean_priority:.3f} (n={c.n_posts})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- manifest ------------------------------------------------------------------


def run_id_for(config_hash: str, input_hashes: Mapping[str, str], seed: int, version: str) -> str:
    blob = json.dumps({"config": config_hash, "inputs": dict(sorted(input_hashes.items())),
                       "seed": seed, "version": version}, sort_keys=True)
    return sha256_bytes(blob.encode())[:16]


@dataclass
class RunManifest:
    """Deterministic record of a run. Wall-clock timings live in run_log.json, not here."""

    run_id: str
    tool_version: str
    seed: int
    config_hash: str
    input_hashes: dict[str, str]
    stages: list[dict] = field(default_factory=list)
    outputs: dict[str, str] = field(default_factory=dict)
    status: str = "running"
    failed_stage: str | None = None
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        atomic_write(path, self.to_json())
