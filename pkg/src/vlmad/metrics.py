"""Evaluation metrics: image AUROC / AP, pixel AUROC, and AUPRO.

AUROC follows the Mann-Whitney statistic (ties count half). AP is the
step-wise ranked-list form with ties broken by stable sort on descending
score then ascending index. AUPRO sweeps every distinct score value
(quantile-capped for huge maps), measures the mean per-region overlap of
4-connected ground-truth components against the global false-positive rate,
and integrates the curve by trapezoid up to a configurable FPR cap.

Undefined metrics raise instead of returning sentinels so reports can never
silently average garbage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import InputError, UndefinedMetricError

DEFAULT_FPR_CAP = 0.3
MAX_THRESHOLDS = 5000
CONNECTIVITY = 4  # ground-truth components use 4-connected neighborhoods

_METRIC_NAMES = ("cls_auroc", "cls_ap", "seg_auroc", "seg_aupro")


@dataclass
class ScoreRecord:
    """Scores and ground truth for a single test image."""

    image_id: str
    image_score: float
    image_label: int
    pixel_scores: np.ndarray | None = None
    pixel_mask: np.ndarray | None = None
    category: str | None = None
    defect: str | None = None

    def __post_init__(self) -> None:
        if self.image_label not in (0, 1):
            raise InputError(f"image_label must be 0 or 1, got {self.image_label}")
        if (self.pixel_scores is None) != (self.pixel_mask is None):
            raise InputError(f"record {self.image_id}: pixel scores and mask must come together")
        if self.pixel_scores is not None:
            scores = np.asarray(self.pixel_scores, dtype=np.float64)
            mask = np.asarray(self.pixel_mask) > 0
            if scores.shape != mask.shape:
                raise InputError(f"record {self.image_id}: pixel grids disagree on shape")
            self.pixel_scores = scores
            self.pixel_mask = mask

    @property
    def has_pixels(self) -> bool:
        return self.pixel_scores is not None


def _validate_binary(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise InputError("labels must be binary")
    return labels.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: (concordant + 0.5 * tied pairs) / (n_pos * n_neg)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _validate_binary(labels)
    if scores.shape != labels.shape:
        raise InputError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise AP over the ranked list; ties resolved by original index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _validate_binary(labels)
    if scores.shape != labels.shape:
        raise InputError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision_at = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision_at[hits].sum() / n_pos)


def _threshold_index(values: np.ndarray, thresholds_desc: np.ndarray) -> np.ndarray:
    """First sweep position (descending thresholds) at which each value is predicted."""
    asc = thresholds_desc[::-1]
    # number of thresholds strictly greater than the value
    return thresholds_desc.size - np.searchsorted(asc, values, side="right")


def _integrate_to_cap(fprs: np.ndarray, pros: np.ndarray, cap: float) -> float:
    """Trapezoid area of the curve up to fpr = cap, normalized by cap.

    Points arrive in threshold order (fpr and pro both non-decreasing); the
    segment straddling the cap is linearly interpolated.
    """
    last = int(np.searchsorted(fprs, cap, side="right")) - 1
    xs = list(fprs[: last + 1])
    ys = list(pros[: last + 1])
    if xs[-1] < cap:
        span = fprs[last + 1] - fprs[last]
        t = (cap - fprs[last]) / span
        xs.append(cap)
        ys.append(pros[last] + t * (pros[last + 1] - pros[last]))
    return float(np.trapezoid(ys, xs) / cap)


def aupro(
    records,
    fpr_cap: float = DEFAULT_FPR_CAP,
    max_thresholds: int = MAX_THRESHOLDS,
) -> float:
    """Area under the per-region-overlap vs. FPR curve, normalized by the cap.

    At each threshold the prediction is ``score >= t``; the PRO value is the
    mean over every 4-connected ground-truth component (pooled across records)
    of the covered fraction of that component, and the FPR pools false
    positives over all records.
    """
    if not 0 < fpr_cap <= 1:
        raise InputError(f"fpr_cap must lie in (0, 1], got {fpr_cap}")
    records = [r for r in records]
    if not records or not all(r.has_pixels for r in records):
        raise InputError("AUPRO requires pixel scores and masks on every record")
    score_blocks = [r.pixel_scores.ravel() for r in records]
    all_scores = np.concatenate(score_blocks)
    offsets = np.cumsum([0] + [b.size for b in score_blocks])
    components: list[np.ndarray] = []  # flat global indices per component
    neg_chunks: list[np.ndarray] = []
    for rec, offset in zip(records, offsets):
        mask = rec.pixel_mask
        labeled, n_comp = ndimage.label(mask)  # default structure = 4-connectivity
        flat_labels = labeled.ravel()
        for comp in range(1, n_comp + 1):
            components.append(np.flatnonzero(flat_labels == comp) + offset)
        neg_chunks.append(np.flatnonzero(~mask.ravel()) + offset)
    if not components:
        raise UndefinedMetricError("AUPRO needs at least one anomalous region")
    negatives = np.concatenate(neg_chunks)
    if negatives.size == 0:
        raise UndefinedMetricError("AUPRO needs at least one normal pixel")

    uniq = np.unique(all_scores)
    if uniq.size > max_thresholds:
        keep = np.unique(np.round(np.linspace(0, uniq.size - 1, max_thresholds)).astype(int))
        uniq = uniq[keep]
    thresholds = uniq[::-1]
    m = thresholds.size

    # curve position 0 is the virtual +inf threshold: empty prediction
    fp_hist = np.bincount(_threshold_index(all_scores[negatives], thresholds), minlength=m)
    fprs = np.concatenate([[0.0], np.cumsum(fp_hist) / negatives.size])
    overlap_total = np.zeros(m)
    for comp in components:
        hist = np.bincount(_threshold_index(all_scores[comp], thresholds), minlength=m)
        overlap_total += np.cumsum(hist) / comp.size
    pros = np.concatenate([[0.0], overlap_total / len(components)])
    return _integrate_to_cap(fprs, pros, fpr_cap)


# ----- reports ---------------------------------------------------------------


@dataclass
class CategoryMetrics:
    cls_auroc: float
    cls_ap: float
    seg_auroc: float | None
    seg_aupro: float | None
    n_images: int


@dataclass
class EvalReport:
    """Per-category metric records plus their unweighted averages."""

    per_category: dict[str, CategoryMetrics]
    averages: CategoryMetrics
    meta: dict = field(default_factory=dict)


def _check_unique_ids(records) -> None:
    seen: set[str] = set()
    for rec in records:
        if rec.image_id in seen:
            raise InputError(f"duplicate image_id {rec.image_id!r}")
        seen.add(rec.image_id)


def evaluate_category(records, aupro_cap: float = DEFAULT_FPR_CAP) -> CategoryMetrics:
    """Compute all four metrics for one category's score records."""
    records = list(records)
    if not records:
        raise InputError("cannot evaluate an empty record list")
    _check_unique_ids(records)
    scores = np.array([r.image_score for r in records])
    labels = np.array([r.image_label for r in records])
    cls_auroc = auroc(scores, labels)
    cls_ap = average_precision(scores, labels)
    with_pixels = [r for r in records if r.has_pixels]
    if with_pixels and len(with_pixels) != len(records):
        raise InputError("either all records or none must carry pixel data")
    seg_auroc = seg_aupro = None
    if with_pixels:
        pix_scores = np.concatenate([r.pixel_scores.ravel() for r in with_pixels])
        pix_labels = np.concatenate([r.pixel_mask.ravel().astype(int) for r in with_pixels])
        seg_auroc = auroc(pix_scores, pix_labels)
        seg_aupro = aupro(with_pixels, fpr_cap=aupro_cap)
    return CategoryMetrics(
        cls_auroc=cls_auroc,
        cls_ap=cls_ap,
        seg_auroc=seg_auroc,
        seg_aupro=seg_aupro,
        n_images=len(records),
    )


def _mean_or_none(values: list[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    if len(present) != len(values) or not present:
        return None if not present else float(np.mean(present))
    return float(np.mean(present))


def build_report(per_category: dict[str, CategoryMetrics], meta: dict | None = None) -> EvalReport:
    """Assemble a report; averages are unweighted arithmetic means over categories."""
    if not per_category:
        raise InputError("report needs at least one category")
    ordered = dict(sorted(per_category.items()))
    averages = CategoryMetrics(
        cls_auroc=float(np.mean([m.cls_auroc for m in ordered.values()])),
        cls_ap=float(np.mean([m.cls_ap for m in ordered.values()])),
        seg_auroc=_mean_or_none([m.seg_auroc for m in ordered.values()]),
        seg_aupro=_mean_or_none([m.seg_aupro for m in ordered.values()]),
        n_images=int(sum(m.n_images for m in ordered.values())),
    )
    return EvalReport(per_category=ordered, averages=averages, meta=dict(meta or {}))


def merge_reports(reports) -> EvalReport:
    """Union disjoint per-category maps and recompute the averages.

    Categories, not partial statistics, are the unit of exchange, so merging
    in any partition order yields identical results.
    """
    merged: dict[str, CategoryMetrics] = {}
    meta: dict = {}
    for report in reports:
        for name, metrics in report.per_category.items():
            if name in merged:
                raise InputError(f"category {name!r} appears in more than one report")
            merged[name] = metrics
        for key, value in report.meta.items():
            if key in meta and meta[key] != value:
                raise InputError(f"reports disagree on meta key {key!r}: {meta[key]!r} vs {value!r}")
            meta[key] = value
    return build_report(merged, meta)


def _fmt(value: float | None) -> str:
    return "   n/a" if value is None else f"{value:.4f}"


def report_to_text(report: EvalReport) -> str:
    """Tabular text rendering: one row per category plus an average row."""
    lines = []
    cap = report.meta.get("aupro_cap", DEFAULT_FPR_CAP)
    lines.append(f"# aupro_cap={cap} connectivity={CONNECTIVITY}")
    for key in sorted(report.meta):
        if key != "aupro_cap":
            lines.append(f"# {key}={report.meta[key]}")
    width = max([len("category")] + [len(name) for name in report.per_category])
    header = f"{'category':<{width}}  cls_auroc  cls_ap  seg_auroc  seg_aupro  n_images"
    lines.append(header)
    lines.append("-" * len(header))
    rows = list(report.per_category.items()) + [("average", report.averages)]
    for name, m in rows:
        lines.append(
            f"{name:<{width}}  {_fmt(m.cls_auroc):>9}  {_fmt(m.cls_ap):>6}  "
            f"{_fmt(m.seg_auroc):>9}  {_fmt(m.seg_aupro):>9}  {m.n_images:>8}"
        )
    return "\n".join(lines) + "\n"


def report_to_json(report: EvalReport) -> str:
    payload = {
        "meta": {"connectivity": CONNECTIVITY, **report.meta},
        "per_category": {name: asdict(m) for name, m in report.per_category.items()},
        "averages": asdict(report.averages),
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def report_from_json(text: str) -> EvalReport:
    payload = json.loads(text)
    per_category = {
        name: CategoryMetrics(**values) for name, values in payload["per_category"].items()
    }
    meta = dict(payload.get("meta", {}))
    meta.pop("connectivity", None)
    return build_report(per_category, meta)


def load_report(path: str | Path) -> EvalReport:
    return report_from_json(Path(path).read_text())


def per_defect_auroc(records) -> dict[tuple[str, str], float]:
    """Image AUROC per (category, defect): that defect's images vs the good ones."""
    records = list(records)
    _check_unique_ids(records)
    goods: dict[str, list[ScoreRecord]] = {}
    defects: dict[tuple[str, str], list[ScoreRecord]] = {}
    for rec in records:
        if rec.category is None:
            raise InputError(f"record {rec.image_id!r} lacks a category for the defect breakdown")
        if rec.image_label == 0:
            goods.setdefault(rec.category, []).append(rec)
        else:
            if rec.defect is None:
                raise InputError(f"anomalous record {rec.image_id!r} lacks a defect name")
            defects.setdefault((rec.category, rec.defect), []).append(rec)
    out: dict[tuple[str, str], float] = {}
    for (category, defect), recs in sorted(defects.items()):
        base = goods.get(category)
        if not base:
            raise UndefinedMetricError(f"no good images for category {category!r}")
        scores = np.array([r.image_score for r in base + recs])
        labels = np.array([r.image_label for r in base + recs])
        out[(category, defect)] = auroc(scores, labels)
    return out
