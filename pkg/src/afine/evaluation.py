"""2AFC accuracy of quality metrics over annotated pair manifests.

A pair (x, y, z) asks which of y and z looks better given reference x.  Pairs
that compare a test image against its own reference encode the reference as
``z`` (``z_id == reference_id``), so each metric is judged through its own
self-score D(x, x).
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .data import read_manifest, write_manifest
from .errors import DataError
from .model import psnr, ssim_global

log = logging.getLogger(__name__)

PREFERENCES = ("y", "z", "tie")
PAIR_COLUMNS = ("reference_id", "y_id", "z_id", "human_preference", "subset_tag")
TIE_BREAK_WARN_FRACTION = 0.01
OVERALL = "overall"


class DegenerateMetricWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EvalPair:
    reference_id: str
    y_id: str
    z_id: str
    human_preference: str
    subset_tag: str = "all"

    def __post_init__(self):
        if self.y_id == self.z_id:
            raise DataError(f"pair compares {self.y_id!r} with itself")
        if self.human_preference not in PREFERENCES:
            raise DataError(f"human_preference must be one of {PREFERENCES}, got {self.human_preference!r}")

    def swapped(self) -> "EvalPair":
        flip = {"y": "z", "z": "y", "tie": "tie"}[self.human_preference]
        return EvalPair(self.reference_id, self.z_id, self.y_id, flip, self.subset_tag)


# ---------------------------------------------------------------- metrics


class Metric:
    """Full-reference metric on CHW tensors. Subclasses set ``name`` and ``lower_is_better``."""

    name = "metric"
    lower_is_better = True
    checkpoint_id = None

    def __call__(self, ref: torch.Tensor, test: torch.Tensor) -> float:
        raise NotImplementedError

    def score_pair(self, ref, y, z) -> tuple[float, float]:
        return self(ref, y), self(ref, z)


class AfineMetric(Metric):
    name = "afine"
    lower_is_better = True

    def __init__(self, model, checkpoint_id=None):
        self.model = model
        self.checkpoint_id = checkpoint_id

    def _dtype(self):
        return next(self.model.parameters()).dtype

    def __call__(self, ref, test):
        with torch.no_grad():
            return float(self.model(ref.unsqueeze(0).to(self._dtype()), test.unsqueeze(0).to(self._dtype()))[0])

    def score_pair(self, ref, y, z):
        dt = self._dtype()
        with torch.no_grad():
            d = self.model(torch.stack([ref, ref]).to(dt), torch.stack([y, z]).to(dt))
        return float(d[0]), float(d[1])


def _hwc(t: torch.Tensor):
    return t.detach().double().numpy().transpose(1, 2, 0)


class PSNRMetric(Metric):
    name = "psnr"
    lower_is_better = False

    def __call__(self, ref, test):
        return psnr(_hwc(ref), _hwc(test))


class SSIMMetric(Metric):
    name = "ssim"
    lower_is_better = False

    def __call__(self, ref, test):
        return ssim_global(_hwc(ref), _hwc(test))


# ---------------------------------------------------------------- judging


def judge_scores(s_y: float, s_z: float, y_id: str, z_id: str, lower_is_better: bool = True):
    """Return (choice, tie_broken). Exact ties go to the lexicographically first id."""
    if s_y == s_z:
        return ("y" if y_id < z_id else "z"), True
    y_better = s_y < s_z if lower_is_better else s_y > s_z
    return ("y" if y_better else "z"), False


def judge_pair(metric: Metric, ref, y, z, y_id: str = "y", z_id: str = "z"):
    s_y, s_z = metric.score_pair(ref, y, z)
    return judge_scores(s_y, s_z, y_id, z_id, metric.lower_is_better)


@dataclass
class SubsetResult:
    count: int = 0
    correct: int = 0
    ties: int = 0
    tie_breaks: int = 0

    @property
    def accuracy(self) -> float | None:
        """Percentage of judged pairs predicted correctly; None when nothing was judged."""
        return 100.0 * self.correct / self.count if self.count else None

    def add(self, other: "SubsetResult") -> None:
        self.count += other.count
        self.correct += other.correct
        self.ties += other.ties
        self.tie_breaks += other.tie_breaks


@dataclass
class EvalReport:
    metric: str
    subsets: dict[str, SubsetResult] = field(default_factory=dict)
    checkpoint_id: str | None = None
    degenerate: bool = False

    @property
    def overall(self) -> SubsetResult:
        total = SubsetResult()
        for r in self.subsets.values():
            total.add(r)
        return total

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "checkpoint_id": self.checkpoint_id,
            "degenerate": self.degenerate,
            "subsets": {k: {**asdict(v), "accuracy": v.accuracy} for k, v in sorted(self.subsets.items())},
            "overall": {**asdict(self.overall), "accuracy": self.overall.accuracy},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        subsets = {
            k: SubsetResult(v["count"], v["correct"], v["ties"], v["tie_breaks"]) for k, v in d["subsets"].items()
        }
        return cls(d["metric"], subsets, d.get("checkpoint_id"), d.get("degenerate", False))


def evaluate(metric: Metric, pairs, store, subsets=None) -> EvalReport:
    """2AFC accuracy per subset tag; ground-truth ties are counted but not judged."""
    pairs = [p for p in pairs if subsets is None or p.subset_tag in subsets]
    missing = store.missing({i for p in pairs for i in (p.reference_id, p.y_id, p.z_id)})
    if missing:
        raise DataError(f"unresolvable image ids: {', '.join(missing[:20])}")
    results: dict[str, SubsetResult] = defaultdict(SubsetResult)
    for pair in pairs:
        res = results[pair.subset_tag]
        if pair.human_preference == "tie":
            res.ties += 1
            continue
        choice, broke = judge_pair(metric, store[pair.reference_id], store[pair.y_id], store[pair.z_id],
                                   pair.y_id, pair.z_id)
        res.count += 1
        res.correct += choice == pair.human_preference
        res.tie_breaks += broke
    report = EvalReport(metric.name, dict(results), getattr(metric, "checkpoint_id", None))
    overall = report.overall
    if overall.count and overall.tie_breaks > TIE_BREAK_WARN_FRACTION * overall.count:
        report.degenerate = True
        warnings.warn(
            f"metric {metric.name!r} tied on {overall.tie_breaks}/{overall.count} judgments; "
            "accuracy reflects the tie-break rule",
            DegenerateMetricWarning,
            stacklevel=2,
        )
    return report


# ---------------------------------------------------------------- output


def _fmt_acc(acc):
    return "NA" if acc is None else f"{acc:.4f}"


def report_rows(report: EvalReport):
    rows = [(report.metric, tag, r.count, _fmt_acc(r.accuracy)) for tag, r in sorted(report.subsets.items())]
    rows.append((report.metric, OVERALL, report.overall.count, _fmt_acc(report.overall.accuracy)))
    return rows


def write_report_csv(path, reports) -> None:
    if isinstance(reports, EvalReport):
        reports = [reports]
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "subset", "count", "accuracy"])
            for rep in reports:
                w.writerows(report_rows(rep))
    except OSError as exc:
        raise DataError(f"cannot write report {path}: {exc}") from None


def write_report_json(path, report: EvalReport) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write report {path}: {exc}") from None


def read_report_json(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def plot_reports(path, reports) -> None:
    """Grouped bar chart: one group per subset, one bar per metric."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    if isinstance(reports, EvalReport):
        reports = [reports]
    tags = sorted({t for r in reports for t in r.subsets}) + [OVERALL]
    x = np.arange(len(tags))
    width = 0.8 / len(reports)
    fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(tags)), 3.5))
    for i, rep in enumerate(reports):
        vals = []
        for t in tags:
            r = rep.overall if t == OVERALL else rep.subsets.get(t)
            vals.append(r.accuracy if r is not None and r.accuracy is not None else 0.0)
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=rep.metric)
    ax.set_xticks(x, tags)
    ax.set_ylim(0, 100)
    ax.set_ylabel("2AFC accuracy (%)")
    ax.legend()
    fig.tight_layout()
    try:
        fig.savefig(path, format=Path(path).suffix.lstrip(".") or "png")
    except OSError as exc:
        raise DataError(f"cannot write plot {path}: {exc}") from None
    finally:
        plt.close(fig)


def emit_report(report: EvalReport, csv_path=None, json_path=None, plot_path=None) -> None:
    if csv_path is not None:
        write_report_csv(csv_path, report)
    if json_path is not None:
        write_report_json(json_path, report)
    if plot_path is not None:
        plot_reports(plot_path, report)


def write_pairs(path, pairs) -> None:
    write_manifest(path, "pairs", PAIR_COLUMNS,
                   ((p.reference_id, p.y_id, p.z_id, p.human_preference, p.subset_tag) for p in pairs))


def read_pairs(path) -> list[EvalPair]:
    return [EvalPair(*row) for row in read_manifest(path, "pairs", PAIR_COLUMNS)]


def pairs_from_triplets(triplets, subset_of=None) -> list[EvalPair]:
    """Evaluation pairs from ranking triplets (p = 1 -> y, 0 -> z, 0.5 -> tie)."""
    pref = {1.0: "y", 0.0: "z", 0.5: "tie"}
    out = []
    for t in triplets:
        tag = subset_of(t) if subset_of else "all"
        out.append(EvalPair(t.reference_id, t.y_id, t.z_id, pref[t.p], tag))
    return out
