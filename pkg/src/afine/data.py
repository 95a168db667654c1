"""Vote aggregation, triplet construction and content-independent splits.

File formats (all UTF-8, comma separated, parsed with :mod:`csv`):

* votes: ``reference_path,test_path,vote,subject_id`` per line; an optional
  first line naming those columns is skipped.  ``vote`` grades the test image
  against its reference.
* labels / triplets / MOS / contents manifests: one header line
  ``# kind=<kind> format_version=1 columns=<c1>,<c2>,...`` followed by rows.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DataError
from .ranking import ranking_label

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
VOTE_COLUMNS = ("reference_path", "test_path", "vote", "subject_id")


class Grade(str, Enum):
    WORSE = "worse"
    SIMILAR = "similar"
    BETTER = "better"
    OUTLIER = "outlier"

    @property
    def order(self) -> int:
        return _ORDER[self]


_ORDER = {Grade.WORSE: 0, Grade.SIMILAR: 1, Grade.BETTER: 2}
_REF_AS_TEST_P = {Grade.BETTER: 1.0, Grade.SIMILAR: 0.5, Grade.WORSE: 0.0}
TRIPLET_MODES = ("ref-as-test", "cross-test", "both")


def parse_vote(text: str) -> Grade:
    try:
        g = Grade(text.strip().lower())
    except ValueError:
        raise DataError(f"unknown vote {text!r}; expected worse, similar or better") from None
    if g is Grade.OUTLIER:
        raise DataError("'outlier' is an aggregation result, not a vote")
    return g


@dataclass(frozen=True)
class PairAnnotation:
    reference_id: str
    test_id: str
    votes: tuple[Grade, ...]


@dataclass(frozen=True)
class AggregatedLabel:
    reference_id: str
    test_id: str
    label: Grade


@dataclass(frozen=True)
class Triplet:
    reference_id: str
    y_id: str
    z_id: str
    p: float

    def __post_init__(self):
        if self.y_id == self.z_id:
            raise DataError(f"triplet compares {self.y_id!r} with itself")
        if self.p not in (0.0, 0.5, 1.0):
            raise DataError(f"triplet label {self.p} not in {{0, 0.5, 1}}")


def aggregate_votes(ann: PairAnnotation) -> AggregatedLabel:
    """Strict-majority label over the vote multiset; no majority -> outlier."""
    if not isinstance(ann, PairAnnotation):
        raise DataError(f"aggregate_votes expects raw PairAnnotation votes, got {type(ann).__name__}")
    if not ann.votes:
        raise DataError(f"pair ({ann.reference_id}, {ann.test_id}) has no votes")
    grade, count = Counter(ann.votes).most_common(1)[0]
    label = grade if 2 * count > len(ann.votes) else Grade.OUTLIER
    return AggregatedLabel(ann.reference_id, ann.test_id, label)


def aggregate_all(annotations) -> list[AggregatedLabel]:
    return [aggregate_votes(a) for a in annotations]


def remove_outliers(labels) -> list[AggregatedLabel]:
    return [lab for lab in labels if lab.label is not Grade.OUTLIER]


def dataset_statistics(labels) -> dict:
    counts = Counter(lab.label for lab in labels)
    total = sum(counts.values())
    out = {"total": total}
    for g in Grade:
        out[g.value] = counts.get(g, 0)
    out["fractions"] = {g.value: (counts.get(g, 0) / total if total else 0.0) for g in Grade}
    return out


def _check_images(triplets, store):
    if store is None:
        return
    ids = {i for t in triplets for i in (t.reference_id, t.y_id, t.z_id)}
    missing = store.missing(ids)
    if missing:
        raise DataError(f"{len(missing)} image(s) missing from corpus: {', '.join(missing[:10])}")


def build_triplets(labels, mode: str = "both", store=None) -> list[Triplet]:
    """Turn aggregated labels into training triplets.

    ``ref-as-test`` compares each test with its own reference (z = x).
    ``cross-test`` compares two tests of the same reference by their grades;
    equal grades give p = 0.5.  When ``store`` is given, every referenced image
    must exist.
    """
    if mode not in TRIPLET_MODES:
        raise DataError(f"mode must be one of {TRIPLET_MODES}, got {mode!r}")
    labels = list(labels)
    outliers = [lab for lab in labels if lab.label is Grade.OUTLIER]
    if outliers:
        raise DataError(f"{len(outliers)} outlier label(s) present; remove them before building triplets")
    out: list[Triplet] = []
    if mode in ("ref-as-test", "both"):
        for lab in labels:
            out.append(Triplet(lab.reference_id, lab.test_id, lab.reference_id, _REF_AS_TEST_P[lab.label]))
    if mode in ("cross-test", "both"):
        by_ref = defaultdict(dict)
        for lab in labels:
            by_ref[lab.reference_id][lab.test_id] = lab.label
        for ref in sorted(by_ref):
            tests = sorted(by_ref[ref].items())
            for i, (y, gy) in enumerate(tests):
                for z, gz in tests[i + 1 :]:
                    out.append(Triplet(ref, y, z, ranking_label(gy.order, gz.order)))
    _check_images(out, store)
    return out


def build_mos_triplets(records, store=None) -> list[Triplet]:
    """Triplets from ``(reference_id, test_id, mos)`` records; only same-reference pairs are formed."""
    by_ref = defaultdict(list)
    for ref, test, mos in records:
        by_ref[ref].append((test, float(mos)))
    out = []
    for ref in sorted(by_ref):
        tests = sorted(by_ref[ref])
        for i, (y, qy) in enumerate(tests):
            for z, qz in tests[i + 1 :]:
                out.append(Triplet(ref, y, z, ranking_label(qy, qz)))
    _check_images(out, store)
    return out


def parse_ratios(text: str) -> tuple[float, ...]:
    """'7:1:2' -> (0.7, 0.1, 0.2)."""
    try:
        parts = [float(p) for p in text.split(":")]
    except ValueError:
        raise DataError(f"bad ratios {text!r}; expected e.g. 7:1:2") from None
    if len(parts) != 3 or any(p <= 0 for p in parts):
        raise DataError(f"bad ratios {text!r}; need three positive parts")
    s = sum(parts)
    return tuple(p / s for p in parts)


def split_dataset(contents, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> tuple[list[str], list[str], list[str]]:
    """Partition content ids into (train, val, test) by a seeded shuffle.

    Split sizes use largest-remainder rounding of ``n * ratio``.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {sum(ratios)}")
    ids = sorted(set(contents))
    n = len(ids)
    if n < len(ratios):
        raise DataError(f"need at least {len(ratios)} contents to split, got {n}")
    raw = [n * r for r in ratios]
    sizes = [math.floor(x + 1e-9) for x in raw]
    for i in sorted(range(3), key=lambda i: sizes[i] - raw[i])[: n - sum(sizes)]:
        sizes[i] += 1
    for i in range(3):
        if sizes[i] == 0:
            donor = max(range(3), key=lambda j: sizes[j])
            sizes[donor] -= 1
            sizes[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


# ---------------------------------------------------------------- file IO


def _header(kind: str, columns) -> str:
    return f"# kind={kind} format_version={MANIFEST_VERSION} columns={','.join(columns)}"


def _parse_header(line: str, path) -> dict:
    if not line.startswith("#"):
        raise DataError(f"{path}: missing manifest header line")
    fields = dict(tok.split("=", 1) for tok in line[1:].split() if "=" in tok)
    if fields.get("format_version") != str(MANIFEST_VERSION):
        raise DataError(f"{path}: unsupported manifest format_version {fields.get('format_version')!r}")
    return fields


def write_manifest(path, kind: str, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_header(kind, columns) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        for row in rows:
            writer.writerow(row)


def read_manifest(path, kind: str, columns) -> list[list[str]]:
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    with fh:
        header = _parse_header(fh.readline().rstrip("\n"), path)
        if header.get("kind") != kind:
            raise DataError(f"{path}: expected a {kind} manifest, found kind={header.get('kind')!r}")
        rows = []
        for lineno, row in enumerate(csv.reader(fh), start=2):
            if not row:
                continue
            if len(row) != len(columns):
                raise DataError(f"{path}:{lineno}: expected {len(columns)} fields, got {len(row)}")
            rows.append(row)
    return rows


def read_votes(path) -> list[PairAnnotation]:
    """Group vote lines by (reference, test) in order of first appearance."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"votes file not found: {path}") from None
    groups: dict[tuple[str, str], list[Grade]] = {}
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if row[0].startswith("#"):
                raise DataError(f"{path}:{lineno}: this is an afine manifest, not a raw votes file")
            if lineno == 1 and tuple(c.strip() for c in row) == VOTE_COLUMNS:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            ref, test, vote, _subject = (c.strip() for c in row)
            try:
                grade = parse_vote(vote)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            groups.setdefault((ref, test), []).append(grade)
    return [PairAnnotation(r, t, tuple(v)) for (r, t), v in groups.items()]


def write_labels(path, labels) -> None:
    write_manifest(path, "labels", ("reference_id", "test_id", "label"),
                   ((lab.reference_id, lab.test_id, lab.label.value) for lab in labels))


def read_labels(path) -> list[AggregatedLabel]:
    rows = read_manifest(path, "labels", ("reference_id", "test_id", "label"))
    try:
        return [AggregatedLabel(r, t, Grade(g)) for r, t, g in rows]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_triplets(path, triplets) -> None:
    write_manifest(path, "triplets", ("reference_id", "y_id", "z_id", "p"),
                   ((t.reference_id, t.y_id, t.z_id, repr(t.p)) for t in triplets))


def read_triplets(path) -> list[Triplet]:
    rows = read_manifest(path, "triplets", ("reference_id", "y_id", "z_id", "p"))
    try:
        return [Triplet(r, y, z, float(p)) for r, y, z, p in rows]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def read_mos(path) -> list[tuple[str, str, float]]:
    rows = read_manifest(path, "mos", ("reference_id", "test_id", "mos"))
    try:
        return [(r, t, float(m)) for r, t, m in rows]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_contents(path, contents) -> None:
    write_manifest(path, "contents", ("content_id",), ([c] for c in contents))


def read_contents(path) -> list[str]:
    """Content ids, either from a contents manifest or a plain one-id-per-line file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"contents file not found: {path}") from None
    if text.startswith("#"):
        return [r[0] for r in read_manifest(path, "contents", ("content_id",))]
    return [line.strip() for line in text.splitlines() if line.strip()]
