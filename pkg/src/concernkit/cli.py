"""Command-line entry point: `concernkit <subcommand> ...`."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from ._io import atomic_write
from .errors import ConcernKitError, ConfigError

log = logging.getLogger("concernkit")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cfg(args, **extra):
    from .pipeline import load_config

    return load_config(args.config, seed=args.seed, client=args.client, **extra)


def _load_posts(path):
    from .corpus import read_posts

    corpus = read_posts(path)
    for err in corpus.errors:
        log.warning("%s:%d: %s", path, err.line, err.message)
    return list(corpus.posts)


def _windows(posts, apps, radius):
    from .corpus import load_catalog, window_text

    catalog = load_catalog()
    allow = apps or catalog.default_allowlist
    out = []
    for p in posts:
        hit = catalog.first_mention(p.text, allow)
        if hit is None:
            log.warning("post %s mentions no allowlisted app; skipped", p.id)
            continue
        out.append(window_text(p, hit[1], radius))
    return out


def cmd_ingest(args) -> int:
    from .corpus import filter_corpus, load_catalog, read_posts, serialize_posts

    cfg = _cfg(args)
    corpus = read_posts(args.posts)
    for err in corpus.errors:
        print(f"{args.posts}:{err.line}: {err.message}", file=sys.stderr)
    catalog = load_catalog()
    kept = filter_corpus(corpus, args.apps or cfg.apps or catalog.default_allowlist, cfg.min_date, catalog)
    atomic_write(_out(args) / "posts.jsonl", serialize_posts(sorted(kept.posts, key=lambda p: p.id)))
    print(f"read {len(corpus.posts)} posts ({len(corpus.errors)} bad lines), kept {len(kept.posts)}")
    return 0


def cmd_cluster(args) -> int:
    from .community import agglomerate, cut_at_gap, read_memberships, write_cluster_report

    d = agglomerate(read_memberships(args.memberships), args.linkage)
    clusters = cut_at_gap(d, args.gap_factor)
    out = _out(args)
    write_cluster_report(out / "clusters.json", d, clusters, args.gap_factor)
    atomic_write(out / "dendrogram.dot", d.to_dot())
    for c in clusters:
        print(f"{c.name}\t{len(c.members)}")
    return 0


def _label(args, categorize: bool) -> int:
    from .classify import LabelCache, label_posts
    from .pipeline import make_clients

    cfg = _cfg(args)
    if cfg.client == "http":
        cfg.validate()
    detector, categorizer, _ = make_clients(cfg)
    windows = _windows(_load_posts(args.posts), cfg.apps, cfg.window_radius)
    out = _out(args)
    name = "labels.jsonl" if categorize else "detections.jsonl"
    cache = LabelCache(out / f".{name}.cache") if args.resume else None
    records, failures = label_posts(windows, detector, categorizer if categorize else None, cache=cache)
    atomic_write(out / name, "".join(r.to_json() + "\n" for r in records))
    for f in failures:
        print(f"failed {f.post_id}: {f.stage}: {f.error}", file=sys.stderr)
    print(f"labelled {len(records)} posts, {sum(r.is_concern for r in records)} concerns, {len(failures)} failures")
    return 1 if failures else 0


def cmd_detect(args) -> int:
    return _label(args, categorize=False)


def cmd_categorize(args) -> int:
    return _label(args, categorize=True)


def cmd_themes(args) -> int:
    from .report import rows_csv
    from .themes import ThemeScorer

    scorer = ThemeScorer()
    rows = []
    for p in _load_posts(args.posts):
        s = scorer.score(p.id, p.text)
        rows.append({"post_id": p.id, "harm": f"{s.harm:.10g}", "negativity": f"{s.negativity:.10g}",
                     "children": f"{s.children:.10g}"})
    atomic_write(_out(args) / "themes.csv", rows_csv(rows, ("post_id", "harm", "negativity", "children")))
    return 0


def cmd_sentiment(args) -> int:
    from .pipeline import make_clients
    from .report import rows_csv
    from .sentiment import TOXICITY_ATTRIBUTES, toxicity, valence

    cfg = _cfg(args)
    _, _, provider = make_clients(cfg)
    rows = []
    for p in _load_posts(args.posts):
        t = toxicity(p.text, provider)
        row = {"post_id": p.id, "compound": f"{valence(p.text).compound:.10g}"}
        row.update({a: f"{getattr(t, a):.10g}" for a in TOXICITY_ATTRIBUTES})
        rows.append(row)
    atomic_write(_out(args) / "sentiment.csv", rows_csv(rows, ("post_id", "compound", *TOXICITY_ATTRIBUTES)))
    return 0


def _pipeline_upto(args, **extra):
    from .pipeline import run_pipeline

    cfg = _cfg(args, **extra)
    res = run_pipeline(cfg, args.out)
    print(json.dumps({"run_id": res.manifest.run_id, "status": res.manifest.status,
                      "failed_stage": res.manifest.failed_stage}))
    return 0 if res.ok else 1


def cmd_prioritize(args) -> int:
    extra = {"weights": Path(args.weights)} if args.weights else {}
    if args.posts:
        extra["posts"] = Path(args.posts)
    return _pipeline_upto(args, **extra)


def cmd_tune(args) -> int:
    from .priority import (
        FeatureNorms,
        build_features,
        feature_matrix,
        grid_search,
        read_truth,
    )
    from .pipeline import make_clients
    from .sentiment import toxicity, valence
    from .themes import ThemeScorer

    truth = read_truth(args.truth)
    posts = [p for p in _load_posts(args.posts) if p.id in truth]
    if len(posts) < args.folds:
        raise ConfigError(f"only {len(posts)} posts have ground truth; need >= {args.folds}")
    cfg = _cfg(args)
    _, _, provider = make_clients(cfg)
    scorer = ThemeScorer()
    feats, _ = build_features(posts, {p.id: scorer.score(p.id, p.text) for p in posts},
                              {p.id: toxicity(p.text, provider) for p in posts},
                              {p.id: valence(p.text) for p in posts})
    x = feature_matrix(feats, FeatureNorms.fit(feats))
    res = grid_search(x, [f.post_id for f in feats], [f.created_utc for f in feats], truth,
                      grid=cfg.grid, k=args.k, folds=args.folds, seed=cfg.seed, free=cfg.free,
                      relevance_threshold=cfg.relevance_threshold)
    out = _out(args)
    atomic_write(out / "weights.toml", res.best.to_toml())
    print(f"best {res.best.as_tuple()} precision@{args.k}={res.metrics.precision_at_k:.3f} "
          f"recall@{args.k}={res.metrics.recall_at_k:.3f} (candidates {res.n_candidates}, "
          f"degenerate folds {res.metrics.degenerate_folds})")
    return 0


def cmd_eval(args) -> int:
    import csv

    from .priority import precision_recall_at_k, read_truth

    truth = read_truth(args.truth)
    with open(args.ranked, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(line for line in f if not line.startswith("#")))
    ids = [r["post_id"] for r in sorted(rows, key=lambda r: int(r["rank"])) if r["post_id"] in truth]
    m = precision_recall_at_k(ids, truth, args.k, args.threshold)
    print(json.dumps({"k": m.k, "precision_at_k": m.precision_at_k, "recall_at_k": m.recall_at_k,
                      "n_relevant": m.n_relevant}, sort_keys=True))
    return 0


def cmd_timeline(args) -> int:
    from .classify import LabelRecord
    from .report import rows_csv
    from .timeline import (
        TIMELINE_COLUMNS,
        classify_outliers,
        fit_baseline,
        fit_seasonal,
        timeline_rows,
        timeline_svg,
        weekly_frequencies,
    )

    posts = _load_posts(args.posts)
    with open(args.labels, encoding="utf-8") as f:
        labels = {r.post_id: r.is_concern for r in (LabelRecord(**json.loads(line)) for line in f if line.strip())}
    first = min(p.created for p in posts).date()
    last = max(p.created for p in posts).date()
    series = weekly_frequencies(posts, labels, first, last)
    model = fit_baseline(series, args.max_order, args.criterion) if args.model == "baseline" else fit_seasonal(series)
    flags = classify_outliers(series, model.forecasts)
    out = _out(args)
    atomic_write(out / "timeline.csv", rows_csv(timeline_rows(series, model.forecasts, flags), TIMELINE_COLUMNS))
    atomic_write(out / "timeline.svg", timeline_svg(series, model.forecasts, flags))
    strong = sum(f.flag.value == "Strong" for f in flags)
    weak = sum(f.flag.value == "Weak" for f in flags)
    print(f"{len(series)} weeks, {strong} strong and {weak} weak outliers")
    return 0


def cmd_events(args) -> int:
    from .timeline import event_summary, rank_events, read_events

    events = read_events(args.events)
    s = event_summary(events, args.threshold)
    for e in rank_events(events, args.threshold):
        print(f"{e.date.isoformat()}\t{e.total}\t{e.name}")
    print(f"{s.n_selected} of {s.n_events} events above {s.threshold}; totals {s.min_total}..{s.max_total}, "
          f"median {s.median_total:g}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    return _pipeline_upto(args)


def cmd_run(args) -> int:
    return _pipeline_upto(args)


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # flags accepted before or after the subcommand; the subcommand copy must
    # not overwrite values given before it, hence SUPPRESS defaults there
    def d(v):
        return argparse.SUPPRESS if suppress else v

    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=d(None), help="pipeline TOML")
    g.add_argument("--seed", type=int, default=d(None))
    g.add_argument("--out", default=d("out"), help="output directory")
    g.add_argument("--client", choices=("stub", "http"), default=d(None))
    g.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="concernkit", parents=[_global_flags(suppress=False)],
                                description="Mine, rank and track ethical concerns in community posts.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="validate and filter a JSONL corpus")
    s.add_argument("--posts", required=True)
    s.add_argument("--apps", nargs="*")
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("cluster", parents=[common], help="cluster subreddits into communities")
    s.add_argument("--memberships", required=True)
    s.add_argument("--linkage", default="average", choices=("average", "complete", "single"))
    s.add_argument("--gap-factor", type=float, default=2.0)
    s.set_defaults(fn=cmd_cluster)

    for name, fn, text in (("detect", cmd_detect, "flag posts that voice an ethical concern"),
                           ("categorize", cmd_categorize, "detect and categorize concerns")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--posts", required=True)
        s.add_argument("--resume", action="store_true", help="reuse and extend a per-post label cache")
        s.set_defaults(fn=fn)

    s = sub.add_parser("themes", parents=[common], help="score harm / negativity / children themes")
    s.add_argument("--posts", required=True)
    s.set_defaults(fn=cmd_themes)

    s = sub.add_parser("sentiment", parents=[common], help="valence and toxicity attributes")
    s.add_argument("--posts", required=True)
    s.set_defaults(fn=cmd_sentiment)

    s = sub.add_parser("prioritize", parents=[common], help="rank concern posts (runs the pipeline)")
    s.add_argument("--posts")
    s.add_argument("--weights")
    s.set_defaults(fn=cmd_prioritize)

    s = sub.add_parser("tune", parents=[common], help="grid-search weights against ground truth")
    s.add_argument("--posts", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--folds", type=int, default=10)
    s.set_defaults(fn=cmd_tune)

    s = sub.add_parser("eval", parents=[common], help="precision@k / recall@k of a ranked CSV")
    s.add_argument("--ranked", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--threshold", type=float, default=4.0)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("timeline", parents=[common], help="weekly series, forecast bands and outliers")
    s.add_argument("--posts", required=True)
    s.add_argument("--labels", required=True, help="JSONL from detect/categorize")
    s.add_argument("--model", choices=("seasonal", "baseline"), default="seasonal")
    s.add_argument("--max-order", type=int, default=5)
    s.add_argument("--criterion", choices=("aic", "bic"), default="bic")
    s.set_defaults(fn=cmd_timeline)

    s = sub.add_parser("events", parents=[common], help="select rater-scored world events")
    s.add_argument("--events", required=True)
    s.add_argument("--threshold", type=int, default=8)
    s.set_defaults(fn=cmd_events)

    s = sub.add_parser("report", parents=[common], help="frequency tables and charts (runs the pipeline)")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("run", parents=[common], help="run the whole pipeline from --config")
    s.set_defaults(fn=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConcernKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
