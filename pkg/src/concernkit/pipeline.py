"""End-to-end pipeline: config, content-hash stage cache, and the ordered stages."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Callable

from . import __version__
from ._io import atomic_write, load_toml, sha256_bytes, sha256_file
from .classify import (
    EthicalConcernCategory,
    HttpCategorizer,
    HttpDetector,
    LabelCache,
    LabelRecord,
    StubCategorizer,
    StubDetector,
    label_posts,
    parse_category,
)
from .community import agglomerate, cut_at_gap, read_memberships, subreddit_clusters, write_cluster_report
from .corpus import DEFAULT_MIN_DATE, filter_corpus, load_catalog, read_posts, window_text
from .errors import ConfigError
from .priority import (
    DEFAULT_GRID,
    FeatureNorms,
    PriorityWeights,
    build_features,
    feature_matrix,
    grid_search,
    load_weights,
    precision_recall_at_k,
    rank_and_aggregate,
    read_truth,
    WEIGHT_NAMES,
)
from .report import (
    RunManifest,
    category_priority_csv,
    category_priority_svg,
    frequency_by_app,
    frequency_by_category,
    frequency_by_community,
    ranked_csv,
    rows_csv,
    run_id_for,
)
from .sentiment import (
    PerspectiveProvider,
    StubToxicityProvider,
    ToxicityAttributes,
    ValenceScore,
    toxicity,
    valence,
)
from .themes import ThemeScorer, ThemeScores
from .timeline import (
    TIMELINE_COLUMNS,
    align_events,
    classify_outliers,
    event_summary,
    fit_baseline,
    fit_seasonal,
    rank_events,
    read_events,
    timeline_rows,
    timeline_svg,
    weekly_frequencies,
)

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    base_dir: Path
    seed: int = 7
    posts: Path | None = None
    memberships: Path | None = None
    truth: Path | None = None
    events: Path | None = None
    apps: list[str] | None = None
    min_date: date = DEFAULT_MIN_DATE
    window_radius: int = 300
    client: str = "stub"
    client_options: dict = field(default_factory=dict)
    linkage: str = "average"
    gap_factor: float = 2.0
    weights: Path | None = None
    tune: bool = False
    k: int = 20
    folds: int = 10
    grid: tuple[float, ...] = DEFAULT_GRID
    free: tuple[str, ...] = WEIGHT_NAMES
    bins: int = 10
    surprisal: bool = False
    normalize_identity: bool = False
    relevance_threshold: float = 4.0
    max_order: int = 5
    criterion: str = "bic"
    event_threshold: int = 8
    event_window: int = 5
    raw: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.posts is None:
            raise ConfigError("inputs.posts is required")
        for name in ("posts", "memberships", "truth", "events", "weights"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name} file not found: {p}")
        if self.tune and self.truth is None:
            raise ConfigError("tuning requested but no ground-truth file given (inputs.truth)")
        if self.client not in ("stub", "http"):
            raise ConfigError(f"client must be 'stub' or 'http', got {self.client!r}")
        if self.client == "http":
            need = [k for k in ("detector_url", "categorizer_url", "model", "toxicity_url")
                    if not self.client_options.get(k)]
            if need:
                raise ConfigError(f"http client needs [client] options {need}")
        bad = [n for n in self.free if n not in WEIGHT_NAMES]
        if bad:
            raise ConfigError(f"unknown free weights {bad}")

    def canonical(self) -> dict:
        """Everything that influences outputs, with input paths replaced by nothing (hashed separately)."""
        d = {k: v for k, v in self.__dict__.items()
             if k not in ("base_dir", "raw", "posts", "memberships", "truth", "events", "weights")}
        d["min_date"] = self.min_date.isoformat()
        d["grid"] = list(self.grid)
        d["free"] = list(self.free)
        d["client_options"] = {k: v for k, v in sorted(self.client_options.items()) if "key" not in k}
        return d


def load_config(path=None, **overrides) -> PipelineConfig:
    """Read a pipeline TOML; relative input paths resolve against the file's directory."""
    raw = load_toml(path) if path else {}
    base = Path(path).resolve().parent if path else Path.cwd()
    inputs = raw.get("inputs", {})
    flt = raw.get("filter", {})
    cl = raw.get("cluster", {})
    pr = raw.get("priority", {})
    tl = raw.get("timeline", {})

    def p(v):
        return None if v in (None, "") else (base / v if not Path(v).is_absolute() else Path(v))

    try:
        cfg = PipelineConfig(
            base_dir=base,
            seed=int(raw.get("seed", 7)),
            posts=p(inputs.get("posts")),
            memberships=p(inputs.get("memberships")),
            truth=p(inputs.get("truth")),
            events=p(inputs.get("events")),
            apps=flt.get("apps"),
            min_date=date.fromisoformat(flt.get("min_date", DEFAULT_MIN_DATE.isoformat())),
            window_radius=int(flt.get("window_radius", 300)),
            client=raw.get("client", {}).get("kind", "stub"),
            client_options={k: v for k, v in raw.get("client", {}).items() if k != "kind"},
            linkage=cl.get("linkage", "average"),
            gap_factor=float(cl.get("gap_factor", 2.0)),
            weights=p(pr.get("weights")),
            tune=bool(pr.get("tune", False)),
            k=int(pr.get("k", 20)),
            folds=int(pr.get("folds", 10)),
            grid=tuple(float(g) for g in pr.get("grid", DEFAULT_GRID)),
            free=tuple(pr.get("free", WEIGHT_NAMES)),
            bins=int(pr.get("bins", 10)),
            surprisal=bool(pr.get("surprisal", False)),
            normalize_identity=bool(pr.get("normalize_identity", False)),
            relevance_threshold=float(pr.get("relevance_threshold", 4.0)),
            max_order=int(tl.get("max_order", 5)),
            criterion=tl.get("criterion", "bic"),
            event_threshold=int(tl.get("event_threshold", 8)),
            event_window=int(tl.get("event_window", 5)),
            raw=raw,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg


class StageCache:
    """JSON payloads keyed by stage name + content hash; unreadable entries are recomputed."""

    def __init__(self, root):
        self.root = Path(root)
        self.hits: dict[str, bool] = {}

    @staticmethod
    def key(*parts: Any) -> str:
        return sha256_bytes(json.dumps(parts, sort_keys=True, default=str).encode())[:24]

    def path(self, stage: str, key: str) -> Path:
        return self.root / f"{stage}-{key}.json"

    def get_or_compute(self, stage: str, key: str, compute: Callable[[], Any]) -> Any:
        path = self.path(stage, key)
        if path.exists():
            try:
                with open(path, encoding="utf-8") as f:
                    payload = json.load(f)
                self.hits[stage] = True
                return payload
            except (json.JSONDecodeError, UnicodeDecodeError, OSError):
                log.warning("cache file %s is corrupt; recomputing stage %s", path, stage)
        value = compute()
        atomic_write(path, json.dumps(value, sort_keys=True))
        self.hits[stage] = False
        return value


def make_clients(cfg: PipelineConfig):
    if cfg.client == "stub":
        return StubDetector(), StubCategorizer(), StubToxicityProvider()
    o = cfg.client_options
    par = int(o.get("max_parallelism", 4))
    return (
        HttpDetector(o["detector_url"], max_parallelism=par),
        HttpCategorizer(o["categorizer_url"], o["model"], max_parallelism=par),
        PerspectiveProvider(o["toxicity_url"], max_parallelism=par),
    )


@dataclass
class PipelineResult:
    manifest: RunManifest
    out_dir: Path
    ok: bool


def run_pipeline(cfg: PipelineConfig, out_dir) -> PipelineResult:
    """Run every stage in dependency order; the manifest is written last, atomically."""
    cfg.validate()  # configuration errors surface before any work
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = StageCache(out / "cache")
    inputs = {n: getattr(cfg, n) for n in ("posts", "memberships", "truth", "events", "weights")
              if getattr(cfg, n) is not None}
    input_hashes = {n: sha256_file(p) for n, p in inputs.items()}
    config_hash = sha256_bytes(json.dumps(cfg.canonical(), sort_keys=True, default=str).encode())
    run_id = run_id_for(config_hash, input_hashes, cfg.seed, __version__)
    manifest = RunManifest(run_id, __version__, cfg.seed, config_hash, input_hashes)
    timings: dict[str, float] = {}
    state: dict[str, Any] = {}

    def emit(name: str, text: str) -> None:
        atomic_write(out / name, text)
        manifest.outputs[name] = sha256_bytes(text.encode("utf-8"))

    def stage(name: str, fn: Callable[[], None]) -> None:
        t0 = time.perf_counter()
        fn()
        timings[name] = round(time.perf_counter() - t0, 6)
        manifest.stages.append({"name": name, "status": "done"})

    # -- stage bodies ----------------------------------------------------------
    catalog = load_catalog()

    def ingest():
        corpus = read_posts(cfg.posts)
        for err in corpus.errors:
            log.warning("posts line %d: %s", err.line, err.message)
        allow = cfg.apps or catalog.default_allowlist
        kept = filter_corpus(corpus, allow, cfg.min_date, catalog)
        posts = sorted(kept.posts, key=lambda p: p.id)
        if not posts:
            raise ConfigError("no posts left after filtering")
        state["posts"] = posts
        state["apps"] = {p.id: catalog.mentions(p.text, allow) for p in posts}
        state["allow"] = allow
        emit("ingest.json", json.dumps({
            "run_id": run_id, "n_read": len(corpus.posts), "n_errors": len(corpus.errors),
            "n_kept": len(posts), "apps": list(allow), "min_date": cfg.min_date.isoformat(),
        }, indent=2, sort_keys=True) + "\n")

    def cluster():
        if cfg.memberships is None:
            state["post_cluster"] = None
            return
        d = agglomerate(read_memberships(cfg.memberships), cfg.linkage)
        clusters = cut_at_gap(d, cfg.gap_factor)
        write_cluster_report(out / "clusters.json", d, clusters, cfg.gap_factor, run_id)
        manifest.outputs["clusters.json"] = sha256_file(out / "clusters.json")
        emit("dendrogram.dot", f"// run_id={run_id}\n" + d.to_dot())
        by_sub = subreddit_clusters(clusters)
        state["post_cluster"] = {p.id: by_sub[p.subreddit] for p in state["posts"] if p.subreddit in by_sub}
        unassigned = len(state["posts"]) - len(state["post_cluster"])
        if unassigned:
            log.warning("%d posts come from subreddits outside the membership table", unassigned)

    def labels():
        posts = state["posts"]
        windows = []
        for p in posts:
            _, surface = catalog.first_mention(p.text, state["allow"])
            windows.append(window_text(p, surface, cfg.window_radius))
        detector, categorizer, _ = make_clients(cfg)
        key = cache.key("labels", input_hashes["posts"], cfg.canonical())

        def compute():
            resume = LabelCache(out / "cache" / f"labels-{key}.jsonl") if cfg.client == "http" else None
            recs, failures = label_posts(windows, detector, categorizer, cache=resume)
            if failures:
                raise RuntimeError(f"{len(failures)} posts failed labelling, first: {failures[0]}")
            return [r.__dict__ for r in recs]

        recs = [LabelRecord(**r) for r in cache.get_or_compute("labels", key, compute)]
        state["labels"] = {r.post_id: r for r in recs}
        state["categories"] = {
            r.post_id: parse_category(r.category) if r.category else EthicalConcernCategory.NoneLabel
            for r in recs
        }
        rows = [{"post_id": r.post_id, "apps": ";".join(state["apps"][r.post_id]),
                 "is_concern": int(r.is_concern), "confidence": f"{r.confidence:.6g}",
                 "category": r.category or "", "source": r.source} for r in recs]
        emit("labels.csv", rows_csv(rows, ("post_id", "apps", "is_concern", "confidence", "category", "source"),
                                    run_id))

    def signals():
        posts = state["posts"]
        _, _, provider = make_clients(cfg)
        key = cache.key("signals", input_hashes["posts"], cfg.canonical())

        def compute():
            scorer = ThemeScorer()
            out_rows = {}
            for p in posts:
                th = scorer.score(p.id, p.text)
                tox = toxicity(p.text, provider)
                out_rows[p.id] = {"themes": [th.harm, th.negativity, th.children],
                                  "tox": list(tox.__dict__.values()), "vad": valence(p.text).compound}
            return out_rows

        raw = cache.get_or_compute("signals", key, compute)
        state["themes"] = {pid: ThemeScores(pid, *v["themes"]) for pid, v in raw.items()}
        state["tox"] = {pid: ToxicityAttributes(*v["tox"]) for pid, v in raw.items()}
        state["vad"] = {pid: ValenceScore(v["vad"]) for pid, v in raw.items()}

    def features():
        feats, _ = build_features(state["posts"], state["themes"], state["tox"], state["vad"],
                                  cfg.bins, cfg.surprisal)
        state["features"] = feats
        state["norms"] = FeatureNorms.fit(feats)
        cols = ["post_id", "created_utc", "tox", "sev", "ins", "pro", "thr", "ide", "vad", "ent", "rec", "pop"]
        rows = [{c: (getattr(f, c) if c in ("post_id", "created_utc") else f"{getattr(f, c):.10g}") for c in cols}
                for f in feats]
        emit("features.csv", rows_csv(rows, cols, run_id))

    def tune():
        weights = load_weights(cfg.weights) if cfg.weights else PriorityWeights()
        truth = read_truth(cfg.truth) if cfg.truth else None
        state["truth"] = truth
        if cfg.tune:
            feats = [f for f in state["features"] if f.post_id in truth]
            if len(feats) < cfg.folds:
                raise ConfigError(f"only {len(feats)} ground-truth posts in the corpus; need >= {cfg.folds}")
            key = cache.key("tune", input_hashes["posts"], input_hashes["truth"], cfg.canonical())

            def compute():
                x = feature_matrix(feats, state["norms"], cfg.normalize_identity)
                res = grid_search(x, [f.post_id for f in feats], [f.created_utc for f in feats], truth,
                                  cfg.grid, cfg.k, cfg.folds, cfg.seed, cfg.relevance_threshold,
                                  cfg.free, weights)
                return {
                    "best": list(res.best.as_tuple()),
                    "precision_at_k": res.metrics.precision_at_k,
                    "recall_at_k": res.metrics.recall_at_k,
                    "degenerate_folds": res.metrics.degenerate_folds,
                    "n_candidates": res.n_candidates,
                    "folds": [{"fold": r.fold, "selected": list(r.selected), "train_precision": r.train_precision,
                               "test_precision": r.test.precision_at_k, "test_recall": r.test.recall_at_k,
                               "k": r.test.k, "degenerate": r.degenerate} for r in res.folds],
                }

            report = cache.get_or_compute("tune", key, compute)
            weights = PriorityWeights.from_sequence(report["best"])
            emit("tune.json", json.dumps({"run_id": run_id, **report}, indent=2, sort_keys=True) + "\n")
        state["weights"] = weights
        emit("weights.toml", weights.to_toml(f"run_id={run_id}"))

    def prioritize():
        concern = [f for f in state["features"] if state["labels"][f.post_id].is_concern
                   and state["categories"][f.post_id] is not EthicalConcernCategory.NoneLabel]
        ranked, table = rank_and_aggregate(concern, state["weights"], state["categories"], state["norms"],
                                           cfg.normalize_identity)
        emit("ranked.csv", ranked_csv(ranked, run_id))
        emit("category_priority.csv", category_priority_csv(table, run_id))
        emit("category_priority.svg", category_priority_svg(table, run_id))
        truth = state.get("truth")
        if truth:
            all_ranked, _ = rank_and_aggregate(
                [f for f in state["features"] if f.post_id in truth], state["weights"],
                state["categories"], state["norms"], cfg.normalize_identity)
            ids = [r.post_id for r in all_ranked]
            if ids:
                m = precision_recall_at_k(ids, truth, cfg.k, cfg.relevance_threshold)
                emit("eval.json", json.dumps({"run_id": run_id, "k": m.k, "precision_at_k": m.precision_at_k,
                                              "recall_at_k": m.recall_at_k, "n_relevant": m.n_relevant},
                                             indent=2, sort_keys=True) + "\n")

    def timeline():
        posts = state["posts"]
        first = min(p.created for p in posts).date()
        last = max(p.created for p in posts).date()
        flags = {pid: r.is_concern for pid, r in state["labels"].items()}
        series = weekly_frequencies(posts, flags, first, last)
        model = fit_seasonal(series)
        flags_out = classify_outliers(series, model.forecasts)
        alignments = []
        if cfg.events is not None:
            events = read_events(cfg.events)
            selected = rank_events(events, cfg.event_threshold)
            alignments = align_events(series, flags_out, selected, cfg.event_window)
            summ = event_summary(events, cfg.event_threshold)
            emit("events.json", json.dumps({
                "run_id": run_id, "summary": summ.__dict__,
                "selected": [{"name": a.event.name, "date": a.event.date.isoformat(), "total": a.event.total,
                              "week_start": a.week_start.isoformat() if a.week_start else None,
                              "outlier_week": a.outlier.week_start.isoformat() if a.outlier else None,
                              "note": a.note} for a in alignments],
            }, indent=2, sort_keys=True) + "\n")
        emit("timeline.csv", rows_csv(timeline_rows(series, model.forecasts, flags_out), TIMELINE_COLUMNS, run_id))
        emit("timeline.svg", timeline_svg(series, model.forecasts, flags_out, alignments, run_id))
        try:
            base = fit_baseline(series, cfg.max_order, cfg.criterion)
        except Exception as exc:  # short series: baseline is optional
            log.warning("baseline model skipped: %s", exc)
            return
        emit("baseline.csv", rows_csv(timeline_rows(series, base.forecasts, classify_outliers(series, base.forecasts)),
                                      TIMELINE_COLUMNS, run_id))

    def tables():
        cats = state["categories"]
        labelled = [c for c in cats.values() if c is not EthicalConcernCategory.NoneLabel]
        if labelled:
            emit("freq_category.csv", frequency_by_category(labelled).to_csv(run_id))
        concern = {pid: r.is_concern for pid, r in state["labels"].items()}
        emit("freq_app.csv", frequency_by_app(state["apps"], concern).to_csv(run_id))
        if state.get("post_cluster"):
            emit("freq_community.csv", frequency_by_community(state["post_cluster"], cats).to_csv(run_id))

    stages = [("ingest", ingest), ("cluster", cluster), ("labels", labels), ("signals", signals),
              ("features", features), ("tune", tune), ("prioritize", prioritize), ("timeline", timeline),
              ("report", tables)]
    ok = True
    for name, fn in stages:
        try:
            stage(name, fn)
        except Exception as exc:
            log.error("stage %s failed: %s", name, exc)
            manifest.stages.append({"name": name, "status": "failed"})
            manifest.status, manifest.failed_stage, manifest.error = "failed", name, str(exc)
            ok = False
            break
    if ok:
        manifest.status = "complete"
    manifest.outputs = dict(sorted(manifest.outputs.items()))
    atomic_write(out / "run_log.json", json.dumps({"run_id": run_id, "timings_s": timings,
                                                   "cache_hits": cache.hits, "pid": os.getpid()},
                                                  indent=2, sort_keys=True) + "\n")
    manifest.write(out / "manifest.json")
    return PipelineResult(manifest, out, ok)
