"""Likert aggregates and quadratic-weighted multi-rater agreement.

The agreement statistic is a weighted Fleiss-style kappa over a matrix of
ordinal ratings::

            P_o - P_e
    kappa = ---------
             1 - P_e

where P_o is the mean, over items with at least two ratings, of the mean
quadratic weight w(a, b) = 1 - (a - b)^2 / (k - 1)^2 across all unordered
pairs of ratings on that item, and P_e = sum_ab p_a p_b w(a, b) with p the
category proportions pooled over every non-missing cell.  Under identity
weights this reduces to the classic Fleiss kappa.  A second variant
("cohen_mean", the mean of pairwise weighted Cohen's kappas with per-rater
marginals) is provided for sensitivity checks.

Confidence intervals come from a percentile bootstrap that resamples items
(each item keeps its full rater vector).  Randomness uses numpy's PCG64;
iteration ``i`` draws from the child stream ``SeedSequence(seed).spawn(n)[i]``,
so results are bit-identical regardless of worker count.
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Mapping, Sequence

import numpy as np

from .criteria import DEFAULT_CATALOG, CriteriaCatalog

LIKERT_CATEGORIES = 5
DEGENERACY_EPS = 1e-12

RATINGS_CSV_HEADER = ["dialogue_id", "criterion_id", "rater_id", "score", "comment", "timestamp"]


class StatsError(Exception):
    """Base class for agreement-engine failures."""


class DegenerateMarginals(StatsError):
    """Pooled marginals are concentrated on one category (1 - P_e < eps)."""


class NoContributingItems(StatsError):
    """No item carries the two or more ratings needed for observed agreement."""


class TooManyDegenerateResamples(StatsError):
    """Bootstrap discarded more than 10x the requested iterations."""


class UnknownCriterion(StatsError):
    def __init__(self, criterion_id: str):
        super().__init__(f"unknown criterion id: {criterion_id!r}")
        self.criterion_id = criterion_id


@dataclass(frozen=True)
class RatingRecord:
    """One Likert judgment of one dialogue on one criterion by one rater."""

    dialogue_id: str
    criterion_id: str
    rater_id: str
    score: int
    comment: str | None = None
    timestamp: datetime | None = None

    def __post_init__(self):
        if not isinstance(self.score, int) or isinstance(self.score, bool):
            raise ValueError(f"score must be an integer, got {self.score!r}")
        if not 1 <= self.score <= LIKERT_CATEGORIES:
            raise ValueError(f"score must be in [1, {LIKERT_CATEGORIES}], got {self.score}")
        if not self.rater_id:
            raise ValueError("rater_id must be non-empty")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.dialogue_id, self.criterion_id, self.rater_id)


@dataclass(frozen=True)
class RatingMatrix:
    """Items x raters score grid; 0 marks a missing cell.

    ``items`` are (dialogue_id, criterion_id) keys in a fixed order; the
    bootstrap resamples item rows, so item order is part of the seeded
    reproducibility contract.
    """

    items: tuple[tuple[str, str], ...]
    raters: tuple[str, ...]
    cells: np.ndarray  # shape (len(items), len(raters)), int, 0 = missing
    k: int = LIKERT_CATEGORIES

    def __post_init__(self):
        if self.cells.shape != (len(self.items), len(self.raters)):
            raise ValueError("cells shape does not match items x raters")
        if self.cells.size and (self.cells.min() < 0 or self.cells.max() > self.k):
            raise ValueError(f"scores must be 0 (missing) or in [1, {self.k}]")

    def category_counts(self) -> np.ndarray:
        """Per-item counts of each category, shape (n_items, k)."""
        counts = np.zeros((len(self.items), self.k), dtype=np.int64)
        for c in range(1, self.k + 1):
            counts[:, c - 1] = (self.cells == c).sum(axis=1)
        return counts

    def subset(self, row_idx: Sequence[int]) -> "RatingMatrix":
        idx = list(row_idx)
        return RatingMatrix(
            items=tuple(self.items[i] for i in idx),
            raters=self.raters,
            cells=self.cells[idx, :],
            k=self.k,
        )


def quadratic_weight(a: int, b: int, k: int = LIKERT_CATEGORIES) -> float:
    """w(a, b) = 1 - (a - b)^2 / (k - 1)^2 for categories in 1..k."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if not (1 <= a <= k and 1 <= b <= k):
        raise ValueError(f"categories must lie in [1, {k}], got ({a}, {b})")
    return 1.0 - ((a - b) ** 2) / ((k - 1) ** 2)


def weight_grid(k: int = LIKERT_CATEGORIES) -> np.ndarray:
    cats = np.arange(1, k + 1, dtype=np.float64)
    diff = cats[:, None] - cats[None, :]
    return 1.0 - (diff**2) / ((k - 1) ** 2)


def _kappa_from_counts(counts: np.ndarray, w: np.ndarray) -> float:
    """Kappa from a per-item category-count table (pooled-marginal form)."""
    n_ratings = counts.sum(axis=1)
    total = n_ratings.sum()
    if total == 0:
        raise NoContributingItems("matrix has no ratings")
    p = counts.sum(axis=0) / total
    p_e = float(p @ w @ p)
    if 1.0 - p_e < DEGENERACY_EPS:
        raise DegenerateMarginals(f"1 - P_e = {1.0 - p_e:.3e} < {DEGENERACY_EPS}")

    contributing = n_ratings >= 2
    if not contributing.any():
        raise NoContributingItems("no item has two or more ratings")
    c = counts[contributing].astype(np.float64)
    n = n_ratings[contributing].astype(np.float64)
    # sum over unordered pairs of w equals (c W c^T - n) / 2 since w(a,a) = 1
    quad = np.einsum("ij,jk,ik->i", c, w, c)
    per_item = (quad - n) / (n * (n - 1.0))
    p_o = float(per_item.mean())
    return (p_o - p_e) / (1.0 - p_e)


def _kappa_cohen_mean(m: RatingMatrix, w: np.ndarray) -> float:
    """Mean of pairwise weighted Cohen's kappas, per-rater marginals."""
    kappas = []
    n_raters = len(m.raters)
    for i in range(n_raters):
        for j in range(i + 1, n_raters):
            both = (m.cells[:, i] > 0) & (m.cells[:, j] > 0)
            if not both.any():
                continue
            a = m.cells[both, i]
            b = m.cells[both, j]
            p_o = float(w[a - 1, b - 1].mean())
            pa = np.bincount(a, minlength=m.k + 1)[1:] / len(a)
            pb = np.bincount(b, minlength=m.k + 1)[1:] / len(b)
            p_e = float(pa @ w @ pb)
            if 1.0 - p_e < DEGENERACY_EPS:
                continue
            kappas.append((p_o - p_e) / (1.0 - p_e))
    if not kappas:
        raise DegenerateMarginals("no rater pair with non-degenerate marginals")
    return float(np.mean(kappas))


def weighted_kappa(m: RatingMatrix, variant: str = "fleiss_pooled") -> float:
    """Chance-corrected agreement over the matrix.

    ``fleiss_pooled`` (default): pairwise observed agreement per item,
    expected agreement from marginals pooled over all non-missing cells.
    ``cohen_mean``: sensitivity-check variant, see module docstring.
    """
    if variant == "fleiss_pooled":
        return _kappa_from_counts(m.category_counts(), weight_grid(m.k))
    if variant == "cohen_mean":
        if not ((m.cells > 0).sum(axis=1) >= 2).any():
            raise NoContributingItems("no item has two or more ratings")
        return _kappa_cohen_mean(m, weight_grid(m.k))
    raise ValueError(f"unknown kappa variant: {variant!r}")


@dataclass(frozen=True)
class BootstrapResult:
    low: float
    high: float
    discarded: int


def bootstrap_ci(
    m: RatingMatrix,
    iterations: int,
    seed: int,
    level: float = 0.95,
    variant: str = "fleiss_pooled",
    unit: str = "items",
    workers: int = 1,
) -> BootstrapResult:
    """Percentile bootstrap interval for :func:`weighted_kappa`.

    Items are resampled with replacement (rater vectors intact); with
    ``unit="dialogues"`` whole dialogue groups are resampled instead.
    Degenerate resamples are redrawn and counted; more than ``10 *
    iterations`` total discards raises :class:`TooManyDegenerateResamples`.
    Bounds are linear-interpolated quantiles of the sorted resample kappas.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if unit not in ("items", "dialogues"):
        raise ValueError(f"unknown resampling unit: {unit!r}")

    w = weight_grid(m.k)
    counts = m.category_counts()
    if unit == "dialogues":
        groups: dict[str, list[int]] = {}
        for idx, (dialogue_id, _) in enumerate(m.items):
            groups.setdefault(dialogue_id, []).append(idx)
        group_rows = [np.array(rows) for rows in groups.values()]
    else:
        group_rows = []

    n_items = counts.shape[0]
    discard_cap = 10 * iterations
    children = np.random.SeedSequence(seed).spawn(iterations)

    def one_iteration(i: int) -> tuple[float, int]:
        rng = np.random.Generator(np.random.PCG64(children[i]))
        discards = 0
        while True:
            if unit == "dialogues":
                picks = rng.integers(0, len(group_rows), size=len(group_rows))
                rows = np.concatenate([group_rows[g] for g in picks])
            else:
                rows = rng.integers(0, n_items, size=n_items)
            try:
                stat = _kappa_from_counts_variant(counts, rows, m, w, variant)
            except (DegenerateMarginals, NoContributingItems):
                discards += 1
                if discards > discard_cap:
                    raise TooManyDegenerateResamples(
                        f"iteration {i} discarded {discards} resamples"
                    ) from None
                continue
            return stat, discards

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one_iteration, range(iterations)))
    else:
        outcomes = [one_iteration(i) for i in range(iterations)]

    stats = np.sort(np.array([s for s, _ in outcomes]))
    discarded = int(sum(d for _, d in outcomes))
    if discarded > discard_cap:
        raise TooManyDegenerateResamples(f"discarded {discarded} > {discard_cap} resamples")
    alpha = 1.0 - level
    low = float(np.quantile(stats, alpha / 2.0, method="linear"))
    high = float(np.quantile(stats, 1.0 - alpha / 2.0, method="linear"))
    return BootstrapResult(low=low, high=high, discarded=discarded)


def _kappa_from_counts_variant(
    counts: np.ndarray,
    rows: np.ndarray,
    m: RatingMatrix,
    w: np.ndarray,
    variant: str,
) -> float:
    if variant == "fleiss_pooled":
        return _kappa_from_counts(counts[rows], w)
    resampled = RatingMatrix(
        items=tuple(m.items[r] for r in rows),
        raters=m.raters,
        cells=m.cells[rows, :],
        k=m.k,
    )
    return weighted_kappa(resampled, variant=variant)


# ---------------------------------------------------------------------------
# Likert aggregates and the combined report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LikertSummary:
    mean: float
    count: int
    pct_ge4: float
    histogram: Mapping[int, int]

    def as_dict(self) -> dict:
        return {
            "mean": self.mean,
            "count": self.count,
            "pct_ge4": self.pct_ge4,
            "histogram": {str(c): self.histogram[c] for c in sorted(self.histogram)},
        }


@dataclass(frozen=True)
class KappaEstimate:
    point: float
    ci_low: float
    ci_high: float
    discarded: int = 0

    def as_dict(self) -> dict:
        return {
            "point": self.point,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "discarded_resamples": self.discarded,
        }


@dataclass(frozen=True)
class StatsConfig:
    iterations: int = 1000
    seed: int = 0
    level: float = 0.95
    variant: str = "fleiss_pooled"
    unit: str = "items"


@dataclass(frozen=True)
class AgreementReport:
    per_criterion: Mapping[str, LikertSummary]
    per_category: Mapping[str, LikertSummary]
    kappa_overall: KappaEstimate | None
    kappa_per_category: Mapping[str, KappaEstimate | None]
    kappa_notes: Mapping[str, str] = field(default_factory=dict)
    config: StatsConfig = field(default_factory=StatsConfig)
    n_records: int = 0

    def as_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "per_criterion": {k: v.as_dict() for k, v in sorted(self.per_criterion.items())},
            "per_category": {k: v.as_dict() for k, v in sorted(self.per_category.items())},
            "kappa": {
                "overall": self.kappa_overall.as_dict() if self.kappa_overall else None,
                "per_category": {
                    k: (v.as_dict() if v else None)
                    for k, v in sorted(self.kappa_per_category.items())
                },
                "notes": dict(sorted(self.kappa_notes.items())),
            },
            "bootstrap": {
                "iterations": self.config.iterations,
                "seed": self.config.seed,
                "level": self.config.level,
                "variant": self.config.variant,
                "unit": self.config.unit,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def _summarize(scores: Sequence[int]) -> LikertSummary:
    hist = {c: 0 for c in range(1, LIKERT_CATEGORIES + 1)}
    for s in scores:
        hist[s] += 1
    count = len(scores)
    mean = sum(scores) / count if count else float("nan")
    ge4 = sum(1 for s in scores if s >= 4)
    pct = 100.0 * ge4 / count if count else float("nan")
    return LikertSummary(mean=mean, count=count, pct_ge4=pct, histogram=hist)


def likert_summary(
    records: Iterable[RatingRecord],
    catalog: CriteriaCatalog = DEFAULT_CATALOG,
) -> tuple[dict[str, LikertSummary], dict[str, LikertSummary]]:
    """Per-criterion and per-category score summaries.

    Means are arithmetic over all non-missing scores; ``pct_ge4`` is the
    share of judgments scored 4 or 5.  Both the per-criterion and the
    pooled per-category views are returned.
    """
    by_criterion: dict[str, list[int]] = {}
    by_category: dict[str, list[int]] = {}
    for rec in records:
        criterion = catalog.get(rec.criterion_id)
        if criterion is None:
            raise UnknownCriterion(rec.criterion_id)
        by_criterion.setdefault(rec.criterion_id, []).append(rec.score)
        by_category.setdefault(criterion.category, []).append(rec.score)
    per_criterion = {cid: _summarize(scores) for cid, scores in by_criterion.items()}
    per_category = {cat: _summarize(scores) for cat, scores in by_category.items()}
    return per_criterion, per_category


def matrix_from_records(
    records: Iterable[RatingRecord],
    k: int = LIKERT_CATEGORIES,
) -> RatingMatrix:
    """Pivot records into an items x raters matrix.

    Items are (dialogue_id, criterion_id) pairs sorted lexicographically,
    raters sorted by id; a duplicate (item, rater) key is an error.
    """
    seen: dict[tuple[str, str, str], int] = {}
    for rec in records:
        if rec.key in seen:
            raise ValueError(f"duplicate rating key: {rec.key}")
        seen[rec.key] = rec.score
    items = sorted({(d, c) for d, c, _ in seen})
    raters = sorted({r for _, _, r in seen})
    cells = np.zeros((len(items), len(raters)), dtype=np.int64)
    item_idx = {it: i for i, it in enumerate(items)}
    rater_idx = {r: j for j, r in enumerate(raters)}
    for (d, c, r), score in seen.items():
        cells[item_idx[(d, c)], rater_idx[r]] = score
    return RatingMatrix(items=tuple(items), raters=tuple(raters), cells=cells, k=k)


def split_by_category(
    m: RatingMatrix,
    catalog: CriteriaCatalog = DEFAULT_CATALOG,
) -> dict[str, RatingMatrix]:
    partitions: dict[str, list[int]] = {cat: [] for cat in catalog.categories()}
    for idx, (_, criterion_id) in enumerate(m.items):
        criterion = catalog.get(criterion_id)
        if criterion is None:
            raise UnknownCriterion(criterion_id)
        partitions[criterion.category].append(idx)
    return {cat: m.subset(rows) for cat, rows in partitions.items()}


def category_kappas(
    m: RatingMatrix,
    catalog: CriteriaCatalog = DEFAULT_CATALOG,
    config: StatsConfig = StatsConfig(),
) -> tuple[dict[str, KappaEstimate | None], dict[str, str]]:
    """Kappa with CI per criteria category; errors surface as notes."""
    estimates: dict[str, KappaEstimate | None] = {}
    notes: dict[str, str] = {}
    for cat, sub in split_by_category(m, catalog).items():
        try:
            point = weighted_kappa(sub, variant=config.variant)
            ci = bootstrap_ci(
                sub, config.iterations, config.seed, config.level,
                variant=config.variant, unit=config.unit,
            )
        except StatsError as exc:
            estimates[cat] = None
            notes[cat] = type(exc).__name__
            continue
        estimates[cat] = KappaEstimate(point, ci.low, ci.high, ci.discarded)
    return estimates, notes


def full_report(
    records: Sequence[RatingRecord],
    catalog: CriteriaCatalog = DEFAULT_CATALOG,
    config: StatsConfig = StatsConfig(),
) -> AgreementReport:
    """Complete report: Likert aggregates plus overall and per-category kappa."""
    records = list(records)
    per_criterion, per_category = likert_summary(records, catalog)
    notes: dict[str, str] = {}
    kappa_overall: KappaEstimate | None = None
    per_cat_kappa: dict[str, KappaEstimate | None] = {}
    if records:
        m = matrix_from_records(records)
        try:
            point = weighted_kappa(m, variant=config.variant)
            ci = bootstrap_ci(
                m, config.iterations, config.seed, config.level,
                variant=config.variant, unit=config.unit,
            )
            kappa_overall = KappaEstimate(point, ci.low, ci.high, ci.discarded)
        except StatsError as exc:
            notes["overall"] = type(exc).__name__
        per_cat_kappa, cat_notes = category_kappas(m, catalog, config)
        notes.update(cat_notes)
    return AgreementReport(
        per_criterion=per_criterion,
        per_category=per_category,
        kappa_overall=kappa_overall,
        kappa_per_category=per_cat_kappa,
        kappa_notes=notes,
        config=config,
        n_records=len(records),
    )


def format_report_table(report: AgreementReport, catalog: CriteriaCatalog = DEFAULT_CATALOG) -> str:
    """Human-readable rendering of a report for terminal output."""
    lines = []
    lines.append(f"{'criterion':<28} {'n':>4} {'mean':>6} {'%>=4':>6}  histogram 1..5")
    for cid in sorted(report.per_criterion):
        s = report.per_criterion[cid]
        crit = catalog.get(cid)
        name = f"{cid} {crit.name}" if crit else cid
        hist = " ".join(str(s.histogram[c]) for c in range(1, LIKERT_CATEGORIES + 1))
        lines.append(f"{name:<28} {s.count:>4} {s.mean:>6.2f} {s.pct_ge4:>6.1f}  [{hist}]")
    lines.append("")
    for cat in sorted(report.per_category):
        s = report.per_category[cat]
        lines.append(f"{cat:<28} {s.count:>4} {s.mean:>6.2f} {s.pct_ge4:>6.1f}")
    lines.append("")
    if report.kappa_overall:
        k = report.kappa_overall
        lines.append(
            f"kappa overall: {k.point:.4f}  "
            f"[{k.ci_low:.4f}, {k.ci_high:.4f}] ({report.config.level:.0%} CI)"
        )
    for cat in sorted(report.kappa_per_category):
        k = report.kappa_per_category[cat]
        if k is None:
            lines.append(f"kappa {cat}: n/a ({report.kappa_notes.get(cat, 'unavailable')})")
        else:
            lines.append(f"kappa {cat}: {k.point:.4f}  [{k.ci_low:.4f}, {k.ci_high:.4f}]")
    if "overall" in report.kappa_notes:
        lines.append(f"kappa overall: n/a ({report.kappa_notes['overall']})")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Ratings file I/O (CSV per RFC 4180, columns fixed)
# ---------------------------------------------------------------------------


def write_ratings_csv(records: Iterable[RatingRecord], stream: io.TextIOBase) -> int:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(RATINGS_CSV_HEADER)
    n = 0
    for rec in sorted(records, key=lambda r: r.key):
        ts = rec.timestamp.isoformat() if rec.timestamp else ""
        writer.writerow(
            [rec.dialogue_id, rec.criterion_id, rec.rater_id, rec.score, rec.comment or "", ts]
        )
        n += 1
    return n


def ratings_to_csv(records: Iterable[RatingRecord]) -> str:
    buf = io.StringIO()
    write_ratings_csv(records, buf)
    return buf.getvalue()


def read_ratings_csv(stream: io.TextIOBase) -> list[RatingRecord]:
    reader = csv.DictReader(stream)
    missing = set(RATINGS_CSV_HEADER[:4]) - set(reader.fieldnames or [])
    if missing:
        raise ValueError(f"ratings CSV is missing columns: {sorted(missing)}")
    records = []
    for row in reader:
        ts = None
        if row.get("timestamp"):
            ts = datetime.fromisoformat(row["timestamp"])
            if ts.tzinfo is None:
                ts = ts.replace(tzinfo=timezone.utc)
        records.append(
            RatingRecord(
                dialogue_id=row["dialogue_id"],
                criterion_id=row["criterion_id"],
                rater_id=row["rater_id"],
                score=int(row["score"]),
                comment=row.get("comment") or None,
                timestamp=ts,
            )
        )
    return records
