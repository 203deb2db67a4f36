"""Gesture samples, spatial resampling, normalization, dataset I/O and splits.

A gesture is stored feature-major: ``points`` has shape ``(N, L)`` where ``N``
is the number of feature dimensions and ``L`` the number of time steps.  On
disk the JSON-lines records are time-major (one ``[x, y, ...]`` list per step).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

DEFAULT_LENGTH = 64
SPLIT_FRACTIONS = (0.5, 0.2, 0.3)


@dataclass(frozen=True)
class Gesture:
    points: np.ndarray
    class_id: int
    subject_id: int = 0
    id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise DataError(f"gesture {self.id!r}: points must be a non-empty N x L matrix, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataError(f"gesture {self.id!r}: non-finite coordinates")
        if self.class_id < 0 or self.subject_id < 0:
            raise DataError(f"gesture {self.id!r}: class and subject ids must be >= 0")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def dims(self) -> int:
        return self.points.shape[0]

    @property
    def length(self) -> int:
        return self.points.shape[1]

    def with_points(self, points: np.ndarray) -> "Gesture":
        return Gesture(points, self.class_id, self.subject_id, self.id)

    def __eq__(self, other):
        if not isinstance(other, Gesture):
            return NotImplemented
        return (
            self.class_id == other.class_id
            and self.subject_id == other.subject_id
            and self.id == other.id
            and self.points.shape == other.points.shape
            and np.array_equal(self.points, other.points)
        )

    __hash__ = None


def _as_points(g) -> np.ndarray:
    return g.points if isinstance(g, Gesture) else np.asarray(g, dtype=np.float64)


def resample(raw, length: int = DEFAULT_LENGTH) -> np.ndarray:
    """Resample a polyline to ``length`` points equidistant along its arc length.

    ``raw`` is an ``(N, M)`` array (feature-major, like :attr:`Gesture.points`).
    The first and last input points are kept exactly.  A target falling exactly
    on a vertex is interpolated on the earlier segment.
    """
    pts = np.asarray(raw, dtype=np.float64)
    if pts.ndim != 2:
        raise DataError(f"expected an N x M point matrix, got shape {pts.shape}")
    if length < 2:
        raise DataError("resample length must be >= 2")
    if pts.shape[1] < 2:
        raise DataError("cannot resample a gesture with fewer than 2 points")
    seg = np.linalg.norm(np.diff(pts, axis=1), axis=0)
    keep = np.concatenate(([True], seg > 0))
    pts = pts[:, keep]
    seg = seg[seg > 0]
    total = seg.sum()
    if not total > 0 or not np.isfinite(total):
        raise DataError("cannot resample a gesture with zero arc length")

    cum = np.concatenate(([0.0], np.cumsum(seg)))
    targets = total * np.arange(length) / (length - 1)
    idx = np.searchsorted(cum, targets, side="left") - 1
    idx = np.clip(idx, 0, len(seg) - 1)
    frac = (targets - cum[idx]) / seg[idx]
    out = pts[:, idx] + frac * (pts[:, idx + 1] - pts[:, idx])
    out[:, 0] = pts[:, 0]
    out[:, -1] = pts[:, -1]
    return out


def vector_path(g) -> np.ndarray:
    """Consecutive displacement vectors, shape ``(N, L - 1)``."""
    pts = _as_points(g)
    if pts.shape[1] < 2:
        raise DataError("vector path needs at least 2 points")
    return np.diff(pts, axis=1)


def mean_segment_length(g) -> float:
    return float(np.linalg.norm(vector_path(g), axis=0).mean())


def normalize(g: Gesture) -> Gesture:
    """Move the centroid to the origin and scale uniformly into ``[-1, 1]``.

    The scale factor maps the largest absolute centered coordinate to 1, so the
    aspect ratio is kept and the result fits the generator's tanh output range.
    """
    pts = _as_points(g)
    centered = pts - pts.mean(axis=1, keepdims=True)
    extent = np.abs(centered).max()
    if not extent > 0:
        raise DataError(f"gesture {getattr(g, 'id', '')!r} has zero spatial extent")
    out = np.clip(centered / extent, -1.0, 1.0)
    return g.with_points(out) if isinstance(g, Gesture) else out


def is_prepared(g, length: int = DEFAULT_LENGTH, tol: float = 1e-9) -> bool:
    """True for ``length`` points with the centroid at the origin and max |coordinate| of 1."""
    pts = _as_points(g)
    if pts.shape[1] != length:
        return False
    return bool(np.abs(pts.mean(axis=1)).max() <= tol and abs(np.abs(pts).max() - 1.0) <= tol)


def prepare_gesture(g: Gesture, length: int = DEFAULT_LENGTH) -> Gesture:
    """Resample then normalize; the resampling survives the uniform scale.

    Arc-length resampling cuts corners that fall between samples, so running
    it twice drifts slightly.  Already prepared input is therefore only
    passed through, which keeps preparation idempotent.
    """
    if is_prepared(g, length):
        return g
    return normalize(g.with_points(resample(g.points, length)))


@dataclass
class Dataset:
    gestures: list
    class_count: int = 0
    class_map: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.class_count:
            self.class_count = 1 + max((g.class_id for g in self.gestures), default=-1)
        dims = {g.dims for g in self.gestures}
        if len(dims) > 1:
            raise DataError(f"inconsistent feature dimensions across gestures: {sorted(dims)}")

    def __len__(self):
        return len(self.gestures)

    def __iter__(self):
        return iter(self.gestures)

    @property
    def subjects(self) -> list:
        return sorted({g.subject_id for g in self.gestures})

    @property
    def dims(self) -> int:
        return self.gestures[0].dims

    @property
    def length(self) -> int:
        lengths = {g.length for g in self.gestures}
        if len(lengths) != 1:
            raise DataError(f"gestures are not resampled to a common length: {sorted(lengths)}")
        return lengths.pop()

    def by_class(self) -> dict:
        groups = {c: [] for c in range(self.class_count)}
        for g in self.gestures:
            groups[g.class_id].append(g)
        return groups

    def class_counts(self) -> dict:
        return {c: len(v) for c, v in self.by_class().items()}

    def subset(self, subjects: Iterable[int]) -> "Dataset":
        keep = set(subjects)
        return Dataset([g for g in self.gestures if g.subject_id in keep], self.class_count, dict(self.class_map))

    def prepared(self, length: int = DEFAULT_LENGTH) -> "Dataset":
        return Dataset([prepare_gesture(g, length) for g in self.gestures], self.class_count, dict(self.class_map))


def remap_classes(gestures: Sequence[Gesture]) -> tuple:
    """Map class ids onto ``0..C-1`` preserving order; returns ``(gestures, mapping)``."""
    original = sorted({g.class_id for g in gestures})
    mapping = {c: i for i, c in enumerate(original)}
    if any(c != i for c, i in mapping.items()):
        log.warning("class ids remapped to a contiguous range: %s", mapping)
        gestures = [Gesture(g.points, mapping[g.class_id], g.subject_id, g.id) for g in gestures]
    return list(gestures), mapping


def _record_to_gesture(rec: dict, where: str) -> Gesture:
    try:
        pts = np.asarray(rec["points"], dtype=np.float64)
        if pts.ndim != 2:
            raise DataError("points must be a list of equal-length coordinate lists")
        return Gesture(pts.T.copy(), int(rec["class"]), int(rec["subject"]), str(rec["id"]))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{where}: malformed gesture record ({e})") from None


def gesture_to_record(g: Gesture) -> dict:
    return {"id": g.id, "class": g.class_id, "subject": g.subject_id, "points": g.points.T.tolist()}


def read_jsonl(path) -> list:
    gestures = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: malformed gesture record (not an object)")
            gestures.append(_record_to_gesture(rec, f"{path}:{lineno}"))
    return gestures


def read_csv(path) -> list:
    """Import point logs with columns ``id,class,subject,t,x,y[,z]``.

    Rows are grouped by ``id`` and ordered by ``t`` (stable for equal stamps).
    """
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        missing = {"id", "class", "subject", "t", "x", "y"} - set(fields)
        if missing:
            raise DataError(f"{path}:1: missing CSV columns {sorted(missing)}")
        coords = ["x", "y"] + (["z"] if "z" in fields else [])
        for row in reader:
            lineno = reader.line_num
            try:
                key = row["id"]
                meta = (int(row["class"]), int(row["subject"]))
                point = [float(row[c]) for c in coords]
                t = float(row["t"])
            except (TypeError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: malformed CSV row ({e})") from None
            entry = rows.setdefault(key, {"meta": meta, "pts": [], "line": lineno})
            if entry["meta"] != meta:
                raise DataError(f"{path}:{lineno}: gesture {key!r} changes class/subject mid-stream")
            entry["pts"].append((t, point))
    gestures = []
    for key, entry in rows.items():
        pts = [p for _, p in sorted(entry["pts"], key=lambda tp: tp[0])]
        try:
            gestures.append(Gesture(np.asarray(pts).T, entry["meta"][0], entry["meta"][1], key))
        except DataError as e:
            raise DataError(f"{path}:{entry['line']}: {e}") from None
    return gestures


def load_dataset(path, format: str = "jsonl", remap: bool = True) -> Dataset:
    """Read a gesture file.  Class ids are made contiguous unless ``remap`` is off
    (generated samples keep the ids of the model that produced them)."""
    path = Path(path)
    if format == "jsonl":
        gestures = read_jsonl(path)
    elif format == "csv":
        gestures = read_csv(path)
    else:
        raise DataError(f"unknown dataset format {format!r}")
    if not gestures:
        raise DataError(f"{path}: no gestures found")
    if not remap:
        top = max(g.class_id for g in gestures)
        return Dataset(gestures, top + 1, {c: c for c in range(top + 1)})
    gestures, mapping = remap_classes(gestures)
    return Dataset(gestures, len(mapping), mapping)


def save_dataset(d: Dataset, path) -> None:
    with open(path, "w") as fh:
        for g in d.gestures:
            fh.write(json.dumps(gesture_to_record(g)) + "\n")


@dataclass(frozen=True)
class SplitSpec:
    train: frozenset
    validation: frozenset
    test: frozenset
    fractions: tuple = SPLIT_FRACTIONS
    seed: int = 0

    def partitions(self) -> tuple:
        return self.train, self.validation, self.test


def _largest_remainder(n: int, fractions: Sequence[float]) -> list:
    fr = np.asarray(fractions, dtype=np.float64)
    quotas = n * fr / fr.sum()
    sizes = np.floor(quotas).astype(int)
    order = np.argsort(-(quotas - sizes), kind="stable")
    for k in order[: n - sizes.sum()]:
        sizes[k] += 1
    # every partition gets at least one subject; borrow from the largest
    for k in range(len(sizes)):
        if sizes[k] == 0:
            donor = int(np.argmax(sizes))
            sizes[donor] -= 1
            sizes[k] += 1
    return sizes.tolist()


def split_subject_independent(d, fractions=SPLIT_FRACTIONS, seed: int = 0) -> SplitSpec:
    """Partition subjects into train/validation/test so no subject spans two sets.

    ``d`` may be a :class:`Dataset` or an iterable of subject ids.
    """
    subjects = d.subjects if isinstance(d, Dataset) else sorted(set(d))
    if len(fractions) != 3:
        raise DataError("expected three split fractions")
    if len(subjects) < len(fractions):
        raise DataError(f"need at least {len(fractions)} subjects to split, got {len(subjects)}")
    sizes = _largest_remainder(len(subjects), fractions)
    order = np.random.default_rng(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return SplitSpec(
        frozenset(shuffled[:a]), frozenset(shuffled[a:b]), frozenset(shuffled[b:]), tuple(fractions), seed
    )
