"""Training loop: class-aware quads, loss and gradient, BPTT, Adam, checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import NumericError
from .generator import (
    DEFAULT_HIDDEN,
    LATENT_DIM,
    GeneratorParams,
    forward_batch,
    generator_backward,
    init_params,
    load_checkpoint,
    make_latents,
    save_checkpoint,
)
from .gestures import Dataset, Gesture
from .loss import COST_KINDS, BatchQuad, LossBreakdown, deepnag_evaluate
from .sdtw import SdtwBatch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    batch_size: int = 64
    gamma: float = 0.1
    alpha: float = 1e3
    max_steps: int = 1000
    seed: int = 0
    latent_dim: int = LATENT_DIM
    length: int = 64
    hidden_sizes: tuple = DEFAULT_HIDDEN
    classes_per_step: int = 0  # 0 = as many as the batch can split into halves of >= 2
    checkpoint_every: int = 100
    keep_checkpoints: int = 3
    parallel: bool = False
    workers: int = 0  # 0 = NAG_WORKERS or all numba threads

    def __post_init__(self):
        self.hidden_sizes = tuple(self.hidden_sizes)

    def validate(self) -> list:
        """All problems at once, as human-readable strings."""
        errors = []
        for name in ("learning_rate", "eps", "gamma", "batch_size", "latent_dim", "checkpoint_every", "keep_checkpoints"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be positive")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                errors.append(f"{name} must lie in [0, 1)")
        if self.alpha < 0:
            errors.append("alpha must be non-negative")
        if self.batch_size % 2 or self.batch_size < 4:
            errors.append("batch_size must be even and >= 4")
        if self.max_steps < 0:
            errors.append("max_steps must be >= 0")
        if self.length < 2:
            errors.append("length must be >= 2")
        if not self.hidden_sizes or any(int(h) <= 0 for h in self.hidden_sizes):
            errors.append("hidden_sizes must be a non-empty list of positive integers")
        if self.classes_per_step < 0 or 4 * self.classes_per_step > self.batch_size:
            errors.append("classes_per_step must be in [0, batch_size / 4]")
        if self.workers < 0:
            errors.append("workers must be >= 0")
        return errors

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: GeneratorParams) -> "AdamState":
        arrays = params.arrays()
        return cls({k: np.zeros_like(a) for k, a in arrays.items()}, {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(params: GeneratorParams, grads: dict, state: AdamState, config: TrainConfig):
    """Bias-corrected Adam update, in place.  Non-finite gradients abort before any write."""
    arrays = params.arrays()
    for name, g in grads.items():
        if g.shape != arrays[name].shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, parameter has {arrays[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}; step {state.t + 1} aborted")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in arrays.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return params, state


# ------------------------------------------------------------------- quads


@dataclass
class StepBatch:
    """Quads for one step plus the generator tape of every generated sample."""

    quads: list
    tape: object
    fake1_rows: list  # per quad, the rows of the tape holding its fake1 members


def _sampling_plan(by_class: dict, config: TrainConfig, rng):
    eligible = [c for c in sorted(by_class) if len(by_class[c]) >= 2]
    if not eligible:
        raise ValueError("no class has the two real samples needed to form a quad")
    k = config.classes_per_step or config.batch_size // 4
    k = min(k, len(eligible))
    classes = eligible if k == len(eligible) else sorted(rng.choice(eligible, size=k, replace=False).tolist())
    return classes, config.batch_size // (2 * k)


def _assemble(by_class: dict, params: GeneratorParams, config: TrainConfig, latent_rng, sample_rng, keep_tape=True):
    classes, half = _sampling_plan(by_class, config, sample_rng)
    reals, class_ids = [], []
    for c in classes:
        members = by_class[c]
        perm = sample_rng.permutation(len(members))
        hr = min(half, len(members) // 2)
        reals.append((perm[:hr], perm[hr : 2 * hr]))
        class_ids += [c] * (2 * half)
    Z = make_latents(class_ids, params.class_count, config.length, params.latent_dim, latent_rng)
    fakes, tape = forward_batch(params, Z, keep_tape)

    quads, rows = [], []
    for k, c in enumerate(classes):
        base = 2 * half * k
        r1 = np.arange(base, base + half)
        r2 = np.arange(base + half, base + 2 * half)
        members = by_class[c]
        i1, i2 = reals[k]
        q = BatchQuad(
            fakes[r1],
            fakes[r2],
            np.stack([members[i].points for i in i1]),
            np.stack([members[i].points for i in i2]),
            c,
            {"fake1": Z[r1], "fake2": Z[r2], "real1": i1, "real2": i2},
            by_class.real_values(c, i1, i2) if isinstance(by_class, RealPool) else {},
        )
        quads.append(q)
        rows.append(r1)
    return StepBatch(quads, tape, rows)


def _class_groups(data) -> dict:
    gestures = data.gestures if isinstance(data, Dataset) else list(data)
    groups = {}
    for g in gestures:
        groups.setdefault(g.class_id, []).append(g)
    for c, members in sorted(groups.items()):
        if len(members) < 2:
            log.warning("class %d has %d real sample(s); excluded from training quads", c, len(members))
    return groups


class RealPool(dict):
    """Real training samples by class, with a lazily filled real-vs-real soft-DTW table.

    The real half-batches are drawn from a fixed pool, so their pairwise values
    are computed once per class and cost kind and then sliced per step.
    """

    def __init__(self, data, gamma: float):
        super().__init__(_class_groups(data))
        self.gamma = gamma
        self._tables = {}

    def real_values(self, c, i1, i2) -> dict:
        out = {}
        for kind in COST_KINDS:
            key = (c, kind)
            if key not in self._tables:
                stack = np.stack([g.points for g in self[c]])
                n = len(stack)
                ia, ib = np.divmod(np.arange(n * n), n)
                self._tables[key] = SdtwBatch(stack, stack, ia, ib, kind, self.gamma).values.reshape(n, n)
            out[kind] = self._tables[key][np.ix_(i1, i2)]
        return out


def assemble_quads(data, params: GeneratorParams, rng, config: TrainConfig) -> list:
    """Class-aware quads for one mini-batch.

    ``batch_size`` counts generated samples: with ``k`` classes in the step each
    quad gets generated halves of ``batch_size // (2k)`` and real halves of the
    same size (fewer if the class is small).  The two real halves never share a
    sample.  ``rng`` drives both latents and sampling.
    """
    return _assemble(_class_groups(data), params, config, rng, rng, keep_tape=False).quads


# ---------------------------------------------------------------- training


def _streams(seed: int):
    init, latents, sampling = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(latents), np.random.default_rng(sampling)


@dataclass
class TrainState:
    params: GeneratorParams
    adam: AdamState
    latent_rng: np.random.Generator
    sample_rng: np.random.Generator
    step: int = 0
    best_total: float = math.inf
    best_params: GeneratorParams | None = None
    history: list = field(default_factory=list)


def init_state(dataset: Dataset, config: TrainConfig) -> TrainState:
    init_rng, latent_rng, sample_rng = _streams(config.seed)
    params = init_params(config.hidden_sizes, dataset.dims, init_rng, config.latent_dim, dataset.class_count)
    params.seed = config.seed
    return TrainState(params, AdamState.zeros_like(params), latent_rng, sample_rng, best_params=params.copy())


def step_gradients(batch: StepBatch, config: TrainConfig):
    """Loss of every quad and the summed parameter gradient (through ``fake1`` only)."""
    parts, upstream = [], []
    for q in batch.quads:
        breakdown, g = deepnag_evaluate(q, config.gamma, config.alpha, parallel=config.parallel,
                                        workers=config.workers or None)
        parts.append(breakdown)
        upstream.append(g)
    rows = np.concatenate(batch.fake1_rows)
    grads = generator_backward(batch.tape.rows(rows), np.concatenate(upstream))
    return LossBreakdown.combine(parts), grads


def train_step(state: TrainState, by_class: dict, config: TrainConfig) -> LossBreakdown:
    batch = _assemble(by_class, state.params, config, state.latent_rng, state.sample_rng)
    loss, grads = step_gradients(batch, config)
    if not math.isfinite(loss.total):
        raise NumericError(f"non-finite loss at step {state.step + 1}")
    if loss.total < state.best_total:
        state.best_total = loss.total
        state.best_params = state.params.copy()
    adam_step(state.params, grads, state.adam, config)
    state.step += 1
    state.history.append(loss.to_record(state.step))
    return loss


def save_state(path, state: TrainState, config: TrainConfig) -> None:
    extra = {}
    for name in state.adam.m:
        extra[f"adam_m/{name}"] = state.adam.m[name]
        extra[f"adam_v/{name}"] = state.adam.v[name]
    for name, arr in state.best_params.arrays().items():
        extra[f"best/{name}"] = arr
    meta = {
        "adam_t": state.adam.t,
        "best_total": state.best_total if math.isfinite(state.best_total) else None,
        "latent_rng": state.latent_rng.bit_generator.state,
        "sample_rng": state.sample_rng.bit_generator.state,
        "config": config.to_dict(),
    }
    save_checkpoint(path, state.params, state.step, extra, meta)


def load_state(path) -> TrainState:
    params, header, extra = load_checkpoint(path)
    meta = header["meta"]
    names = list(params.arrays())
    adam = AdamState({n: extra[f"adam_m/{n}"] for n in names}, {n: extra[f"adam_v/{n}"] for n in names}, meta["adam_t"])
    best = params.copy()
    for n, arr in best.arrays().items():
        arr[...] = extra[f"best/{n}"]
    latent_rng, sample_rng = np.random.default_rng(), np.random.default_rng()
    latent_rng.bit_generator.state = meta["latent_rng"]
    sample_rng.bit_generator.state = meta["sample_rng"]
    best_total = meta["best_total"] if meta["best_total"] is not None else math.inf
    return TrainState(params, adam, latent_rng, sample_rng, header["step"], best_total, best)


@dataclass
class TrainResult:
    params: GeneratorParams  # lowest-loss parameters seen
    history: list
    final: TrainState


def train(dataset: Dataset, config: TrainConfig, state: TrainState | None = None, out_dir=None, on_step=None):
    """Minimize the loss over ``config.max_steps`` total steps.

    Resumes from ``state`` when given.  Checkpoints land in ``out_dir`` every
    ``checkpoint_every`` steps (the newest ``keep_checkpoints`` are kept);
    ``on_step(record)`` receives each step's log record.
    """
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    by_class = RealPool(dataset, config.gamma)
    state = state or init_state(dataset, config)
    out_dir = Path(out_dir) if out_dir is not None else None
    written = []
    while state.step < config.max_steps:
        try:
            train_step(state, by_class, config)
        except NumericError as e:
            kept = written[-1] if written else "none"
            raise NumericError(f"{e}; last good checkpoint: {kept}") from None
        if on_step is not None:
            on_step(state.history[-1])
        if out_dir is not None and state.step % config.checkpoint_every == 0:
            path = out_dir / f"checkpoint-{state.step:07d}.npz"
            save_state(path, state, config)
            written.append(path)
            while len(written) > config.keep_checkpoints:
                written.pop(0).unlink(missing_ok=True)
    return TrainResult(state.best_params, state.history, state)


def generate(params: GeneratorParams, class_id: int, count: int, seed: int = 0, length: int = 64) -> list:
    """``count`` samples of ``class_id`` from fresh latents; deterministic in ``seed``."""
    if not 0 <= class_id < params.class_count:
        raise ValueError(f"class {class_id} out of range for {params.class_count} classes")
    if count <= 0:
        return []
    rng = np.random.default_rng(seed)
    Z = make_latents([class_id] * count, params.class_count, length, params.latent_dim, rng)
    pts, _ = forward_batch(params, Z, keep_tape=False)
    return [Gesture(p, class_id, 0, f"gen-c{class_id}-s{seed}-{i}") for i, p in enumerate(pts)]
