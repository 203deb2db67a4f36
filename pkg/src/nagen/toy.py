"""Synthetic 2D stroke data (lines, circles, zigzags) for desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .gestures import DEFAULT_LENGTH, Dataset, Gesture

TOY_CLASSES = ("line", "circle", "zigzag")


def _line(rng, n):
    t = np.linspace(0.0, 1.0, n)
    bend = rng.uniform(-0.08, 0.08)
    return np.stack([t, bend * np.sin(np.pi * t)])


def _circle(rng, n):
    start = rng.uniform(-0.4, 0.4)
    sweep = rng.uniform(1.8, 2.0) * np.pi
    a = start + np.linspace(0.0, sweep, n)
    aspect = rng.uniform(0.8, 1.2)
    return np.stack([np.cos(a), aspect * np.sin(a)])


def _zigzag(rng, n):
    teeth = 4
    xs = np.linspace(0.0, 1.0, 2 * teeth + 1)
    amp = rng.uniform(0.15, 0.3)
    ys = amp * (np.arange(2 * teeth + 1) % 2) * 2 - amp
    t = np.linspace(0.0, 1.0, n)
    return np.stack([np.interp(t, xs, xs), np.interp(t, xs, ys)])


_SHAPES = (_line, _circle, _zigzag)


def toy_raw_gestures(per_class: int = 32, subjects: int = 8, seed: int = 0) -> list:
    """Unprepared strokes with a per-subject slant and scale plus point jitter."""
    rng = np.random.default_rng(seed)
    styles = [(rng.uniform(-0.25, 0.25), rng.uniform(0.7, 1.4)) for _ in range(subjects)]
    out = []
    for c, shape in enumerate(_SHAPES):
        for k in range(per_class):
            subject = k % subjects
            slant, scale = styles[subject]
            pts = shape(rng, int(rng.integers(40, 90)))
            rot = slant + rng.normal(0.0, 0.08)
            R = np.array([[np.cos(rot), -np.sin(rot)], [np.sin(rot), np.cos(rot)]])
            pts = scale * (R @ pts) + rng.normal(0.0, 0.004, size=pts.shape)
            out.append(Gesture(100.0 * pts, c, subject, f"{TOY_CLASSES[c]}-{k:03d}"))
    return out


def toy_dataset(per_class: int = 32, subjects: int = 8, seed: int = 0, length: int = DEFAULT_LENGTH) -> Dataset:
    """Resampled and normalized toy dataset (``3 * per_class`` gestures)."""
    return Dataset(toy_raw_gestures(per_class, subjects, seed), len(TOY_CLASSES)).prepared(length)
