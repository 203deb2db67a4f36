"""Augmentation experiments with a 1-nearest-neighbour DTW recognizer.

Protocol per augmenter: build the training set (real samples plus synthetic
ones for anything but the baseline), select the recognizer's tunables on the
validation subjects, then report the error on the test subjects.  Subjects
never cross partitions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np

from .gestures import Dataset, Gesture, SplitSpec
from .sdtw import CostKind, dtw_classic_many

BASELINE = "baseline"
NOISE = "noise"
RESULT_FIELDS = ("dataset", "recognizer", "augmenter", "seed", "error", "n_train_real", "n_train_synth")


def knn1_dtw_classify(templates, query, kind=CostKind.ED) -> int:
    """Class of the template nearest to ``query`` under classic DTW (ties: lowest index)."""
    templates = list(templates)
    if not templates:
        raise ValueError("no templates to match against")
    dists = dtw_classic_many(query, templates, kind)
    return templates[int(np.argmin(dists))].class_id


class Recognizer(Protocol):
    name: str

    def fit(self, train: list, validation: list) -> "Recognizer": ...

    def predict(self, query: Gesture) -> int: ...


@dataclass
class Knn1Dtw:
    """1-NN DTW; the cost kind is the tunable picked on the validation set."""

    kinds: tuple = (CostKind.ED, CostKind.COS)
    name: str = "1nn-dtw"
    templates: list = field(default_factory=list)
    kind: CostKind = CostKind.ED

    def fit(self, train, validation):
        self.templates = list(train)
        if len(self.kinds) > 1 and validation:
            errs = [error_rate(self.templates, validation, k) for k in self.kinds]
            self.kind = self.kinds[int(np.argmin(errs))]
        else:
            self.kind = self.kinds[0]
        return self

    def predict(self, query):
        return knn1_dtw_classify(self.templates, query, self.kind)


def error_rate(templates, queries, kind=CostKind.ED) -> float:
    queries = list(queries)
    wrong = sum(knn1_dtw_classify(templates, q, kind) != q.class_id for q in queries)
    return wrong / len(queries)


def bounding_box_extent(g: Gesture) -> np.ndarray:
    """Per-feature extent (max - min over time), shape ``(N,)``."""
    return g.points.max(axis=1) - g.points.min(axis=1)


def noise_augment(train, magnitude_fraction: float = 0.02, per_class_count=None, rng=None) -> list:
    """Jittered copies of real samples.

    Each synthetic sample is a real sample of the class plus i.i.d. Gaussian
    noise per point whose standard deviation is ``magnitude_fraction`` times that
    sample's per-feature bounding-box extent.  Sources are drawn by cycling
    through a shuffled class roster.  ``per_class_count`` defaults to the real
    count of each class.
    """
    train = list(train)
    if not train:
        raise ValueError("noise augmentation needs a non-empty training set")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    groups = {}
    for g in train:
        groups.setdefault(g.class_id, []).append(g)
    out = []
    for c in sorted(groups):
        members = groups[c]
        count = len(members) if per_class_count is None else int(per_class_count)
        order = rng.permutation(len(members))
        for k in range(count):
            src = members[order[k % len(members)]]
            sigma = magnitude_fraction * bounding_box_extent(src)
            pts = src.points + rng.standard_normal(src.points.shape) * sigma[:, None]
            out.append(Gesture(pts, c, src.subject_id, f"noise-{src.id}-{k}"))
    return out


def generator_augmenter(params, length: int = 64) -> Callable:
    """Augmenter that samples a trained generator, matching each class's real count."""
    from .trainer import generate

    def augment(train, rng):
        counts = {}
        for g in train:
            counts[g.class_id] = counts.get(g.class_id, 0) + 1
        out = []
        for c in sorted(counts):
            seed = int(rng.integers(2**31))
            out += generate(params, c, counts[c], seed, length)
        return out

    return augment


@dataclass
class ExperimentResult:
    dataset: str
    recognizer: str
    augmenter: str
    seed: int
    error: float
    n_train_real: int
    n_train_synth: int

    def __post_init__(self):
        if not 0.0 <= self.error <= 1.0:
            raise ValueError("error rate must lie in [0, 1]")


def audit_split(data: Dataset, split: SplitSpec) -> None:
    """Fail loudly if a subject sits in two partitions or is unassigned."""
    parts = split.partitions()
    for i in range(3):
        for j in range(i + 1, 3):
            shared = parts[i] & parts[j]
            if shared:
                raise AssertionError(f"subjects {sorted(shared)} appear in two partitions")
    missing = set(data.subjects) - set().union(*parts)
    if missing:
        raise AssertionError(f"subjects {sorted(missing)} are in no partition")


def run_experiment(data: Dataset, split: SplitSpec, augmenters: dict, recognizer_factory=Knn1Dtw,
                   dataset_name: str = "dataset", seed: int | None = None) -> list:
    """One result per augmenter; ``augmenters`` maps name -> ``f(train, rng) -> synthetic``.

    ``None`` as a callable (or the name ``baseline``) means no augmentation.
    """
    audit_split(data, split)
    seed = split.seed if seed is None else seed
    train = data.subset(split.train).gestures
    validation = data.subset(split.validation).gestures
    test = data.subset(split.test).gestures
    if not train or not test:
        raise ValueError("split leaves the training or test partition empty")
    results = []
    for k, (name, fn) in enumerate(augmenters.items()):
        rng = np.random.default_rng([seed, k])
        synth = [] if fn is None or name == BASELINE else list(fn(train, rng))
        rec = recognizer_factory().fit(train + synth, validation)
        wrong = sum(rec.predict(q) != q.class_id for q in test)
        results.append(ExperimentResult(dataset_name, rec.name, name, seed, wrong / len(test), len(train), len(synth)))
    return results


# ----------------------------------------------------------------- scoring


@dataclass
class ScoreTable:
    scores: dict
    wins: dict = field(default_factory=dict)  # group key -> list of winning generators

    def to_json(self) -> str:
        return json.dumps({"scores": self.scores, "wins": {"|".join(map(str, k)): v for k, v in self.wins.items()}},
                          indent=2, sort_keys=True)

    def to_text(self) -> str:
        names = sorted(self.scores)
        width = max([len(n) for n in names] + [9])
        lines = [f"{'generator':<{width}}  score"]
        lines += [f"{n:<{width}}  {self.scores[n]:>5d}" for n in names]
        return "\n".join(lines)


def group_results(results, key=("dataset", "recognizer", "seed")) -> dict:
    groups = {}
    for r in results:
        groups.setdefault(tuple(getattr(r, k) for k in key), []).append(r)
    return groups


def score_generators(groups) -> ScoreTable:
    """Cumulative generator scores over experiment groups.

    Within a group a generator scores one point when its error is below both the
    baseline and the noise augmenter and no other generator does strictly
    better; tied best generators each score under the same condition.
    """
    if not isinstance(groups, dict):
        groups = group_results(groups)
    scores, wins = {}, {}
    for key, rows in groups.items():
        by_name = {r.augmenter: r.error for r in rows}
        if BASELINE not in by_name or NOISE not in by_name:
            raise ValueError(f"group {key} lacks a baseline or noise row")
        gens = {n: e for n, e in by_name.items() if n not in (BASELINE, NOISE)}
        for n in gens:
            scores.setdefault(n, 0)
        if not gens:
            continue
        best = min(gens.values())
        winners = sorted(
            n for n, e in gens.items() if e == best and e < by_name[BASELINE] and e < by_name[NOISE]
        )
        for n in winners:
            scores[n] += 1
        wins[key] = winners
    return ScoreTable(scores, wins)


def write_results_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow({k: v for k, v in asdict(r).items()})


def read_results_csv(path) -> list:
    with open(path, newline="") as fh:
        return [
            ExperimentResult(row["dataset"], row["recognizer"], row["augmenter"], int(row["seed"]),
                             float(row["error"]), int(row["n_train_real"]), int(row["n_train_synth"]))
            for row in csv.DictReader(fh)
        ]
