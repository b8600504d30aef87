"""Weekly concern frequencies, seasonal and AR baselines, outliers and world events."""
from __future__ import annotations

import calendar
import csv
import logging
import math
import statistics
from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone
from enum import Enum
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from ._io import data_path, load_toml
from .corpus import RawPost
from .errors import FitError, ValidationError

log = logging.getLogger(__name__)

WEEKS_PER_YEAR = 52.18
Z85 = 1.4395
Z95 = 1.9600
MIN_SEASONAL_WEEKS = 104


def week_start(d: date | datetime) -> date:
    """Monday of the (UTC) week containing `d`."""
    if isinstance(d, datetime):
        d = d.astimezone(timezone.utc).date() if d.tzinfo else d.date()
    return d - timedelta(days=d.weekday())


@dataclass(frozen=True)
class WeeklyPoint:
    week_start: date
    ethical_count: int
    total_count: int

    def __post_init__(self):
        if not 0 <= self.ethical_count <= self.total_count:
            raise ValueError(f"{self.week_start}: need 0 <= ethical <= total")

    @property
    def frequency(self) -> float | None:
        if self.total_count == 0:
            return None
        return self.ethical_count / self.total_count


def weekly_frequencies(posts: Iterable[RawPost], flagged: Mapping[str, bool] | set,
                       start: date, end: date) -> list[WeeklyPoint]:
    """One point per Monday-starting week from start's week to end's week, inclusive.

    Posts dated outside the span are ignored; weeks without posts keep a
    missing frequency.
    """
    first, last = week_start(start), week_start(end)
    if last < first:
        raise ValueError("empty span")
    n_weeks = (last - first).days // 7 + 1
    ethical = [0] * n_weeks
    total = [0] * n_weeks
    is_flagged = flagged.__contains__ if isinstance(flagged, (set, frozenset)) else (
        lambda pid: bool(flagged.get(pid)))
    for p in posts:
        i = (week_start(p.created) - first).days // 7
        if 0 <= i < n_weeks:
            total[i] += 1
            ethical[i] += bool(is_flagged(p.id))
    return [WeeklyPoint(first + timedelta(weeks=i), ethical[i], total[i]) for i in range(n_weeks)]


# -- holidays ------------------------------------------------------------------


@dataclass(frozen=True)
class Holiday:
    name: str
    month: int
    day: int | None = None
    weekday: int | None = None  # 0 = Monday
    nth: int | None = None  # 1-based; -1 = last

    def __post_init__(self):
        fixed = self.day is not None
        floating = self.weekday is not None and self.nth is not None
        if fixed == floating:
            raise ValidationError(f"holiday {self.name!r} needs either day or weekday+nth")

    def on(self, year: int) -> date:
        if self.day is not None:
            return date(year, self.month, self.day)
        days = [d for d in calendar.Calendar().itermonthdates(year, self.month)
                if d.month == self.month and d.weekday() == self.weekday]
        return days[self.nth - 1] if self.nth > 0 else days[self.nth]


@dataclass(frozen=True)
class HolidayCalendar:
    holidays: tuple[Holiday, ...]

    def weeks(self, holiday: Holiday, first: date, last: date) -> set[date]:
        out = set()
        for year in range(first.year - 1, last.year + 2):
            out.add(week_start(holiday.on(year)))
        return {w for w in out if first <= w <= last}


def load_holidays(path=None) -> HolidayCalendar:
    raw = load_toml(path or data_path("holidays.toml"))
    return HolidayCalendar(tuple(Holiday(**h) for h in raw["holiday"]))


# -- forecasts -----------------------------------------------------------------


@dataclass(frozen=True)
class ForecastPoint:
    week_start: date
    yhat: float
    lo85: float
    hi85: float
    lo95: float
    hi95: float
    trend: float
    seasonal: float = 0.0
    holiday: float = 0.0
    ar: float = 0.0


def _bands(week, yhat, sigma, trend, seasonal=0.0, holiday=0.0, ar=0.0) -> ForecastPoint:
    return ForecastPoint(week, yhat, yhat - Z85 * sigma, yhat + Z85 * sigma,
                         yhat - Z95 * sigma, yhat + Z95 * sigma, trend, seasonal, holiday, ar)


def _collinear(x: np.ndarray, names: Sequence[str]) -> list[str]:
    # columns that add no rank over the ones before them
    bad, kept = [], []
    for j in range(x.shape[1]):
        trial = x[:, kept + [j]]
        if np.linalg.matrix_rank(trial) < len(kept) + 1:
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


@dataclass(frozen=True)
class SeasonalModel:
    columns: tuple[str, ...]
    coef: Mapping[str, float]
    sigma: float
    n_obs: int
    seasonality: bool
    forecasts: tuple[ForecastPoint, ...]


def fit_seasonal(series: Sequence[WeeklyPoint], holidays: HolidayCalendar | None = None,
                 fourier_order: int = 3, period: float = WEEKS_PER_YEAR) -> SeasonalModel:
    """Least-squares trend + Fourier yearly seasonality + holiday-week indicators.

    t counts weeks from the first point. Intervals are yhat +/- z * sigma with
    sigma the residual standard error. Missing weeks are not fitted but still
    receive a forecast.
    """
    if not series:
        raise FitError("empty series")
    holidays = holidays if holidays is not None else load_holidays()
    weeks = [p.week_start for p in series]
    t = np.array([(w - weeks[0]).days / 7 for w in weeks], dtype=float)
    y = np.array([np.nan if p.frequency is None else p.frequency for p in series])
    obs = ~np.isnan(y)
    n_obs = int(obs.sum())

    names = ["intercept", "trend"]
    cols = [np.ones_like(t), t]
    seasonality = n_obs >= MIN_SEASONAL_WEEKS
    if seasonality:
        for k in range(1, fourier_order + 1):
            names += [f"sin{k}", f"cos{k}"]
            cols += [np.sin(2 * math.pi * k * t / period), np.cos(2 * math.pi * k * t / period)]
    else:
        log.warning("only %d observed weeks (< %d); yearly seasonality disabled", n_obs, MIN_SEASONAL_WEEKS)
    fitted_weeks = {w for w, o in zip(weeks, obs) if o}
    for h in holidays.holidays:
        hw = holidays.weeks(h, weeks[0], weeks[-1])
        if not hw & fitted_weeks:
            log.warning("holiday %r never falls in an observed week; column dropped", h.name)
            continue
        names.append(f"holiday:{h.name}")
        cols.append(np.array([w in hw for w in weeks], dtype=float))
    x = np.column_stack(cols)
    xo, yo = x[obs], y[obs]
    if np.linalg.matrix_rank(xo) < x.shape[1]:
        raise FitError(f"design matrix is rank deficient; collinear columns: {_collinear(xo, names)}")
    dof = n_obs - x.shape[1]
    if dof <= 0:
        raise FitError(f"{n_obs} observed weeks cannot fit {x.shape[1]} parameters")
    beta, *_ = np.linalg.lstsq(xo, yo, rcond=None)
    resid = yo - xo @ beta
    sigma = math.sqrt(float(resid @ resid) / dof)

    is_season = np.array([n.startswith(("sin", "cos")) for n in names])
    is_hol = np.array([n.startswith("holiday:") for n in names])
    is_trend = ~(is_season | is_hol)
    forecasts = []
    for i, w in enumerate(weeks):
        trend = float(x[i, is_trend] @ beta[is_trend])
        seas = float(x[i, is_season] @ beta[is_season])
        hol = float(x[i, is_hol] @ beta[is_hol])
        forecasts.append(_bands(w, trend + seas + hol, sigma, trend, seas, hol))
    return SeasonalModel(tuple(names), dict(zip(names, (float(b) for b in beta))), sigma, n_obs,
                         seasonality, tuple(forecasts))


@dataclass(frozen=True)
class BaselineModel:
    order: int
    criterion: str
    scores: Mapping[int, float]
    coef: Mapping[str, float]
    sigma: float
    forecasts: tuple[ForecastPoint, ...]


def _ar_design(y: np.ndarray, p: int, start: int) -> np.ndarray:
    rows = np.arange(start, len(y))
    cols = [np.ones(len(rows)), rows.astype(float)]
    cols += [y[rows - lag] for lag in range(1, p + 1)]
    return np.column_stack(cols)


def fit_baseline(series: Sequence[WeeklyPoint], max_order: int = 5,
                 criterion: str = "bic") -> BaselineModel:
    """AR(p) with intercept and drift; p in 0..max_order picked by information criterion.

    Missing weeks are skipped (observed weeks are treated as consecutive).
    All orders are compared on the same sample, starting at index max_order;
    the chosen order is then refitted on every row it can use. Forecasts are
    one step ahead and in sample.
    """
    if criterion not in ("aic", "bic"):
        raise ValueError("criterion must be 'aic' or 'bic'")
    pts = [p for p in series if p.frequency is not None]
    if len(pts) < max_order + 2:
        raise FitError(f"need at least {max_order + 2} observed weeks, got {len(pts)}")
    y = np.array([p.frequency for p in pts])
    m = len(y) - max_order
    scores = {}
    for p in range(max_order + 1):
        x = _ar_design(y, p, max_order)
        if m <= x.shape[1]:
            continue
        beta, *_ = np.linalg.lstsq(x, y[max_order:], rcond=None)
        r = y[max_order:] - x @ beta
        rss = max(float(r @ r), np.finfo(float).tiny)
        k = x.shape[1] + 1  # + noise variance
        penalty = 2 * k if criterion == "aic" else k * math.log(m)
        scores[p] = m * math.log(rss / m) + penalty
    if not scores:
        raise FitError("series too short for any AR order")
    order = min(scores, key=lambda p: (scores[p], p))

    x = _ar_design(y, order, order)
    beta, *_ = np.linalg.lstsq(x, y[order:], rcond=None)
    r = y[order:] - x @ beta
    dof = len(r) - x.shape[1]
    sigma = math.sqrt(float(r @ r) / dof) if dof > 0 else 0.0
    names = ["intercept", "drift"] + [f"lag{i}" for i in range(1, order + 1)]
    forecasts = []
    for row, i in zip(x, range(order, len(y))):
        trend = float(row[:2] @ beta[:2])
        ar = float(row[2:] @ beta[2:])
        forecasts.append(_bands(pts[i].week_start, trend + ar, sigma, trend, ar=ar))
    return BaselineModel(order, criterion, scores, dict(zip(names, (float(b) for b in beta))), sigma,
                         tuple(forecasts))


# -- outliers ------------------------------------------------------------------


class OutlierFlag(Enum):
    NoFlag = "None"
    Weak = "Weak"
    Strong = "Strong"


@dataclass(frozen=True)
class Outlier:
    week_start: date
    observed: float
    flag: OutlierFlag
    magnitude: float


def classify_point(observed: float, f: ForecastPoint) -> OutlierFlag:
    if observed < f.lo95 or observed > f.hi95:
        return OutlierFlag.Strong
    if observed < f.lo85 or observed > f.hi85:
        return OutlierFlag.Weak
    return OutlierFlag.NoFlag


def classify_outliers(series: Sequence[WeeklyPoint], forecasts: Sequence[ForecastPoint]) -> list[Outlier]:
    """Flag each observed week that has a forecast; magnitude is |observed - trend|."""
    by_week = {f.week_start: f for f in forecasts}
    out = []
    for p in series:
        f = by_week.get(p.week_start)
        if f is None or p.frequency is None:
            continue
        out.append(Outlier(p.week_start, p.frequency, classify_point(p.frequency, f),
                           abs(p.frequency - f.trend)))
    return out


# -- world events ----------------------------------------------------------------


@dataclass(frozen=True)
class WorldEvent:
    name: str
    date: date
    rater_scores: tuple[int, ...]

    def __post_init__(self):
        bad = [s for s in self.rater_scores if not -2 <= s <= 2]
        if bad:
            raise ValidationError(f"event {self.name!r}: rater scores {bad} outside [-2, 2]")

    @property
    def total(self) -> int:
        return sum(self.rater_scores)


def read_events(path) -> list[WorldEvent]:
    """CSV with name,date,score_1..score_n (ISO dates, integer scores)."""
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(line for line in f if not line.startswith("#"))
        score_cols = [c for c in reader.fieldnames or [] if c.startswith("score_")]
        if "name" not in (reader.fieldnames or []) or "date" not in reader.fieldnames or not score_cols:
            raise ValidationError("events CSV needs name, date and score_* columns")
        for lineno, row in enumerate(reader, 2):
            try:
                scores = tuple(int(row[c]) for c in score_cols if row[c] not in ("", None))
                when = date.fromisoformat(row["date"])
            except ValueError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
            out.append(WorldEvent(row["name"], when, scores))
    return out


def rank_events(events: Iterable[WorldEvent], threshold: int = 8) -> list[WorldEvent]:
    """Events whose score total is strictly above `threshold`, by date then name."""
    return sorted((e for e in events if e.total > threshold), key=lambda e: (e.date, e.name))


@dataclass(frozen=True)
class EventSummary:
    n_events: int
    min_total: int
    max_total: int
    median_total: float
    n_selected: int
    threshold: int


def event_summary(events: Sequence[WorldEvent], threshold: int = 8) -> EventSummary:
    if not events:
        raise ValueError("no events")
    totals = [e.total for e in events]
    return EventSummary(len(events), min(totals), max(totals), statistics.median(totals),
                        len(rank_events(events, threshold)), threshold)


@dataclass(frozen=True)
class EventAlignment:
    event: WorldEvent
    week_start: date | None
    outlier: Outlier | None
    note: str


def align_events(series: Sequence[WeeklyPoint], outliers: Sequence[Outlier],
                 events: Iterable[WorldEvent], window: int = 5) -> list[EventAlignment]:
    """Pair each event with its week and the nearest flagged week within +/- window weeks.

    Equal distances resolve to the earlier week. Events outside the series span
    are reported unaligned.
    """
    weeks = {p.week_start for p in series}
    flagged = sorted((o for o in outliers if o.flag is not OutlierFlag.NoFlag), key=lambda o: o.week_start)
    out = []
    for e in sorted(events, key=lambda e: (e.date, e.name)):
        w = week_start(e.date)
        if w not in weeks:
            out.append(EventAlignment(e, None, None, "outside series span"))
            continue
        near = [o for o in flagged if abs((o.week_start - w).days) <= 7 * window]
        if not near:
            out.append(EventAlignment(e, w, None, "no aligned outlier"))
            continue
        best = min(near, key=lambda o: (abs((o.week_start - w).days), o.week_start))
        lag = (best.week_start - w).days // 7
        out.append(EventAlignment(e, w, best, f"{best.flag.value} outlier at {lag:+d} weeks"))
    return out


# -- outputs -------------------------------------------------------------------


def timeline_rows(series: Sequence[WeeklyPoint], forecasts: Sequence[ForecastPoint],
                  outliers: Sequence[Outlier]) -> list[dict]:
    fc = {f.week_start: f for f in forecasts}
    fl = {o.week_start: o for o in outliers}
    rows = []
    for p in series:
        f, o = fc.get(p.week_start), fl.get(p.week_start)
        row = {
            "week_start": p.week_start.isoformat(),
            "ethical_count": p.ethical_count,
            "total_count": p.total_count,
            "frequency": "" if p.frequency is None else f"{p.frequency:.6f}",
        }
        for name in ("yhat", "lo85", "hi85", "lo95", "hi95", "trend", "seasonal", "holiday", "ar"):
            row[name] = "" if f is None else f"{getattr(f, name):.6f}"
        row["flag"] = o.flag.value if o else ""
        row["magnitude"] = f"{o.magnitude:.6f}" if o else ""
        rows.append(row)
    return rows


TIMELINE_COLUMNS = ("week_start", "ethical_count", "total_count", "frequency", "yhat", "lo85", "hi85",
                    "lo95", "hi95", "trend", "seasonal", "holiday", "ar", "flag", "magnitude")

_FLAG_COLOR = {OutlierFlag.Weak: "#e69f00", OutlierFlag.Strong: "#d55e00"}


def timeline_svg(series: Sequence[WeeklyPoint], forecasts: Sequence[ForecastPoint],
                 outliers: Sequence[Outlier], alignments: Sequence[EventAlignment] = (),
                 run_id: str | None = None, width: int = 900, height: int = 360,
                 title: str = "Weekly ethical concern frequency") -> str:
    """Line chart with 85/95% bands, outlier dots sized by magnitude, and event markers."""
    pad_l, pad_r, pad_t, pad_b = 50, 20, 30, 40
    weeks = [p.week_start for p in series]
    if not weeks:
        raise ValueError("empty series")
    fc = [f for f in forecasts if f.week_start >= weeks[0]]
    vals = [p.frequency for p in series if p.frequency is not None]
    vals += [f.lo95 for f in fc] + [f.hi95 for f in fc]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    span = max((weeks[-1] - weeks[0]).days, 1)

    def px(w: date) -> float:
        return pad_l + (w - weeks[0]).days / span * (width - pad_l - pad_r)

    def py(v: float) -> float:
        return pad_t + (hi - v) / (hi - lo) * (height - pad_t - pad_b)

    def band(lo_attr, hi_attr):
        upper = [f"{px(f.week_start):.2f},{py(getattr(f, hi_attr)):.2f}" for f in fc]
        lower = [f"{px(f.week_start):.2f},{py(getattr(f, lo_attr)):.2f}" for f in reversed(fc)]
        return " ".join(upper + lower)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
    ]
    if run_id:
        parts.append(f"<metadata>run_id={escape(run_id)}</metadata>")
    parts.append(f'<text x="{pad_l}" y="18" font-family="sans-serif" font-size="13">{escape(title)}</text>')
    if fc:
        parts.append(f'<polygon points="{band("lo95", "hi95")}" fill="#56b4e9" fill-opacity="0.2"/>')
        parts.append(f'<polygon points="{band("lo85", "hi85")}" fill="#56b4e9" fill-opacity="0.35"/>')
        line = " ".join(f"{px(f.week_start):.2f},{py(f.yhat):.2f}" for f in fc)
        parts.append(f'<polyline points="{line}" fill="none" stroke="#0072b2" stroke-width="1.5"/>')
    obs = " ".join(f"{px(p.week_start):.2f},{py(p.frequency):.2f}" for p in series if p.frequency is not None)
    parts.append(f'<polyline points="{obs}" fill="none" stroke="#333333" stroke-width="0.8"/>')
    mags = [o.magnitude for o in outliers if o.flag is not OutlierFlag.NoFlag]
    top = max(mags) if mags else 1.0
    for o in outliers:
        if o.flag is OutlierFlag.NoFlag:
            continue
        r = 2.0 + 4.0 * (o.magnitude / top if top > 0 else 0.0)
        parts.append(f'<circle cx="{px(o.week_start):.2f}" cy="{py(o.observed):.2f}" r="{r:.2f}" '
                     f'fill="{_FLAG_COLOR[o.flag]}"><title>{o.week_start} {o.flag.value}</title></circle>')
    for a in alignments:
        if a.week_start is None:
            continue
        x = px(a.week_start)
        parts.append(f'<line x1="{x:.2f}" y1="{pad_t}" x2="{x:.2f}" y2="{height - pad_b}" '
                     f'stroke="#009e73" stroke-dasharray="3,3"><title>{escape(a.event.name)}</title></line>')
    parts.append(f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="#000"/>')
    parts.append(f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="#000"/>')
    for v in (lo, (lo + hi) / 2, hi):
        parts.append(f'<text x="{pad_l - 4}" y="{py(v) + 4:.2f}" font-family="sans-serif" font-size="10" '
                     f'text-anchor="end">{v:.3f}</text>')
    for w in (weeks[0], weeks[len(weeks) // 2], weeks[-1]):
        parts.append(f'<text x="{px(w):.2f}" y="{height - pad_b + 16}" font-family="sans-serif" '
                     f'font-size="10" text-anchor="middle">{w.isoformat()}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
