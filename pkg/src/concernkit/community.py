"""Intersectional community detection from binary membership vectors."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)


class MarginAxis(Enum):
    BIPOC = "bipoc"
    WomenAFAB = "women_afab"
    LGBTQIA = "lgbtqia"
    LowSES = "low_ses"
    GlobalSouth = "global_south"
    PhysicalHealth = "physical_health"
    MentalHealth = "mental_health"


AXES: tuple[MarginAxis, ...] = tuple(MarginAxis)
LINKAGES = ("average", "complete", "single")


@dataclass(frozen=True)
class MembershipVector:
    subreddit: str
    bits: tuple[int, ...]

    def __post_init__(self):
        if len(self.bits) != len(AXES) or any(b not in (0, 1) for b in self.bits):
            raise ValidationError(f"{self.subreddit}: expected {len(AXES)} binary cells, got {self.bits}")

    @property
    def axes(self) -> list[MarginAxis]:
        return [a for a, b in zip(AXES, self.bits) if b]


def read_memberships(path) -> list[MembershipVector]:
    """Read `subreddit,bipoc,women_afab,...,mental_health` CSV with 0/1 cells."""
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        cols = [a.value for a in AXES]
        missing = [c for c in ["subreddit", *cols] if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"membership CSV lacks columns {missing}")
        for row in reader:
            try:
                bits = tuple(int(row[c]) for c in cols)
            except ValueError:
                raise ValidationError(f"non-integer cell in row for {row['subreddit']!r}") from None
            vec = MembershipVector(row["subreddit"], bits)
            if sum(bits) < 2:
                log.warning("subreddit %s has fewer than two axes set; not intersectional", vec.subreddit)
            out.append(vec)
    return out


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    height: float
    size: int


@dataclass(frozen=True)
class Dendrogram:
    """Merge history in scipy's convention: leaves are 0..n-1, merge i creates node n+i."""

    leaves: tuple[MembershipVector, ...]
    merges: tuple[Merge, ...]
    linkage: str = "average"

    @property
    def heights(self) -> list[float]:
        return [m.height for m in self.merges]

    def to_dot(self) -> str:
        n = len(self.leaves)
        lines = ["digraph dendrogram {", "  node [shape=box, fontsize=10];"]
        for i, leaf in enumerate(self.leaves):
            label = leaf.subreddit.replace('"', '\\"')
            lines.append(f'  n{i} [label="{label}"];')
        for i, m in enumerate(self.merges):
            node = n + i
            lines.append(f'  n{node} [shape=point, xlabel="{m.height:.4f}"];')
            lines.append(f"  n{node} -> n{m.left};")
            lines.append(f"  n{node} -> n{m.right};")
        lines.append("}")
        return "\n".join(lines) + "\n"


def _canonical(vectors: Iterable[MembershipVector]) -> list[MembershipVector]:
    return sorted(vectors, key=lambda v: (v.bits, v.subreddit))


def agglomerate(vectors: Sequence[MembershipVector], linkage: str = "average") -> Dendrogram:
    """Hierarchical agglomerative clustering on Euclidean distances between bit vectors.

    Inputs are put into canonical order (bits, then name) first so that the
    result does not depend on input order. Among equally close pairs the one
    with the lexicographically smallest (cluster id, cluster id) merges first.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"linkage must be one of {LINKAGES}")
    if len(vectors) < 2:
        raise ValueError("need at least two membership vectors")
    names = [v.subreddit for v in vectors]
    if len(set(names)) != len(names):
        raise ValidationError("subreddit names must be unique")
    leaves = _canonical(vectors)
    n = len(leaves)
    x = np.array([v.bits for v in leaves], dtype=float)
    sq = (x * x).sum(1)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0))
    np.fill_diagonal(d, np.inf)

    ids = np.arange(n)  # cluster id living at each position
    sizes = np.ones(n)
    merges: list[Merge] = []
    for step in range(n - 1):
        best = d.min()
        rows, cols = np.nonzero(d == best)
        keep = rows < cols
        rows, cols = rows[keep], cols[keep]
        a_ids, b_ids = ids[rows], ids[cols]
        lo, hi = np.minimum(a_ids, b_ids), np.maximum(a_ids, b_ids)
        pick = np.lexsort((hi, lo))[0]
        i, j = rows[pick], cols[pick]
        if ids[i] > ids[j]:
            i, j = j, i
        ni, nj = sizes[i], sizes[j]
        if linkage == "single":
            new = np.minimum(d[i], d[j])
        elif linkage == "complete":
            new = np.maximum(d[i], d[j])
        else:
            new = (ni * d[i] + nj * d[j]) / (ni + nj)
        merges.append(Merge(int(ids[i]), int(ids[j]), float(best), int(ni + nj)))
        d[i, :] = new
        d[:, i] = new
        d[i, i] = np.inf
        d[j, :] = np.inf
        d[:, j] = np.inf
        sizes[i] = ni + nj
        ids[i] = n + step
    heights = [m.height for m in merges]
    if any(b < a - 1e-12 for a, b in zip(heights, heights[1:])):
        raise AssertionError("merge heights are not monotone")
    return Dendrogram(tuple(leaves), tuple(merges), linkage)


@dataclass(frozen=True)
class CommunityCluster:
    name: str
    members: tuple[str, ...]
    profile: tuple[float, ...]  # fraction of members with each axis, in AXES order

    def profile_dict(self) -> dict[str, float]:
        return {a.name: f for a, f in zip(AXES, self.profile)}


def name_for_profile(profile: Sequence[float]) -> str:
    axes = [a.name for a, f in zip(AXES, profile) if f > 0.5]
    return " x ".join(axes) if axes else "Mixed"


def name_clusters(clusters: Sequence[CommunityCluster]) -> list[CommunityCluster]:
    """Rename clusters from their majority axes; repeated names get a ' #2', ' #3' suffix."""
    if not clusters:
        raise ValueError("no clusters to name")
    seen: dict[str, int] = {}
    out = []
    for c in clusters:
        base = name_for_profile(c.profile)
        seen[base] = seen.get(base, 0) + 1
        name = base if seen[base] == 1 else f"{base} #{seen[base]}"
        out.append(CommunityCluster(name, c.members, c.profile))
    return out


def gap_index(heights: Sequence[float], gap_factor: float = 2.0) -> int:
    """Number of merges to apply before cutting.

    The first merge (scanning in order) whose height exceeds `gap_factor` times
    the previous merge height marks the gap; without a gap all but the last
    merge are applied.
    """
    for m in range(1, len(heights)):
        if heights[m] > gap_factor * heights[m - 1]:
            return m
    return len(heights) - 1


def cut_at_gap(d: Dendrogram, gap_factor: float = 2.0) -> list[CommunityCluster]:
    n = len(d.leaves)
    applied = gap_index(d.heights, gap_factor)
    parent = list(range(2 * n - 1))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, m in enumerate(d.merges[:applied]):
        node = n + i
        parent[find(m.left)] = node
        parent[find(m.right)] = node
    groups: dict[int, list[int]] = {}
    for leaf in range(n):
        groups.setdefault(find(leaf), []).append(leaf)
    clusters = []
    for leaf_ids in sorted(groups.values()):
        bits = np.array([d.leaves[i].bits for i in leaf_ids], dtype=float)
        profile = tuple(float(v) for v in bits.mean(0))
        members = tuple(sorted(d.leaves[i].subreddit for i in leaf_ids))
        clusters.append(CommunityCluster("", members, profile))
    clusters.sort(key=lambda c: (name_for_profile(c.profile), c.members))
    return name_clusters(clusters)


def cluster_report(d: Dendrogram, clusters: Sequence[CommunityCluster], gap_factor: float) -> dict:
    return {
        "linkage": d.linkage,
        "gap_factor": gap_factor,
        "merges_applied": gap_index(d.heights, gap_factor),
        "n_subreddits": len(d.leaves),
        "clusters": [
            {
                "name": c.name,
                "size": len(c.members),
                "profile": {k: round(v, 6) for k, v in c.profile_dict().items()},
                "members": list(c.members),
            }
            for c in clusters
        ],
    }


def write_cluster_report(path, d: Dendrogram, clusters, gap_factor: float, run_id: str | None = None) -> None:
    report = cluster_report(d, clusters, gap_factor)
    if run_id:
        report["run_id"] = run_id
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def subreddit_clusters(clusters: Iterable[CommunityCluster]) -> dict[str, str]:
    return {m: c.name for c in clusters for m in c.members}
