"""Non-adversarial training objective over soft-DTW.

For one gesture class the objective compares two generated half-batches
``fake1``/``fake2`` with two real half-batches ``real1``/``real2``::

    L_f   = AHD(fake1, real1) + |AHD(fake1, fake2) - AHD(real1, real2)|
    total = L_ED + L_COS + alpha * mean_{g in fake1} resample_loss(g)

where AHD is the average Hausdorff distance with soft-DTW as the element
dissimilarity.  Only ``d total / d fake1`` is ever produced; the other three
sets are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gestures import Gesture
from .sdtw import CostKind, SdtwBatch, sdtw_forward

COST_KINDS = (CostKind.ED, CostKind.COS)


def avg_hausdorff(A, B, d) -> float:
    """Average Hausdorff distance between two sets under dissimilarity ``d``.

    ``d`` is called as ``d(a, b)`` for the A-to-B half and ``d(b, a)`` for the
    B-to-A half, so asymmetric dissimilarities are honoured.
    """
    A, B = list(A), list(B)
    if not A or not B:
        raise ValueError("average Hausdorff distance needs two non-empty sets")
    ab = np.mean([min(d(a, b) for b in B) for a in A])
    ba = np.mean([min(d(b, a) for a in A) for b in B])
    return float(ab + ba)


def _ahd_matrix(M: np.ndarray) -> float:
    # M[a, b] = d(a, b) = d(b, a) for a symmetric dissimilarity
    return float(M.min(axis=1).mean() + M.min(axis=0).mean())


def _ahd_weights(M: np.ndarray) -> np.ndarray:
    """d AHD / d M with the min selections frozen; ties go to the lowest index."""
    W = np.zeros_like(M)
    na, nb = M.shape
    W[np.arange(na), M.argmin(axis=1)] += 1.0 / na
    W[M.argmin(axis=0), np.arange(nb)] += 1.0 / nb
    return W


def _stack(members) -> tuple:
    if isinstance(members, np.ndarray):
        arr = np.asarray(members, dtype=np.float64)
        return (arr if arr.ndim == 3 else arr[None]), set()
    members = list(members)
    if not members:
        return np.empty((0, 1, 1)), set()
    classes = {m.class_id for m in members if isinstance(m, Gesture)}
    return np.stack([np.asarray(getattr(m, "points", m), dtype=np.float64) for m in members]), classes


@dataclass
class BatchQuad:
    """Generated and real half-batches of one class, each ``(count, N, L)``."""

    fake1: np.ndarray
    fake2: np.ndarray
    real1: np.ndarray
    real2: np.ndarray
    class_id: int = 0
    latents: dict = field(default_factory=dict, repr=False)
    # optional precomputed soft-DTW values real1 x real2 per cost kind
    real_values: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        seen = set()
        for name in ("fake1", "fake2", "real1", "real2"):
            arr, classes = _stack(getattr(self, name))
            if arr.shape[0] == 0:
                raise ValueError(f"{name} is empty")
            setattr(self, name, arr)
            seen |= classes
        if seen - {self.class_id}:
            raise ValueError(f"quad for class {self.class_id} holds members of classes {sorted(seen)}")
        shapes = {getattr(self, n).shape[1:] for n in ("fake1", "fake2", "real1", "real2")}
        if len(shapes) != 1:
            raise ValueError(f"quad members disagree in shape: {sorted(shapes)}")


@dataclass
class CostTerms:
    similarity: float
    variation: float
    signed_variation: float

    @property
    def total(self) -> float:
        return self.similarity + self.variation


@dataclass
class LossBreakdown:
    ed: CostTerms
    cos: CostTerms
    resample: float
    alpha: float

    @property
    def similarity(self) -> float:
        return self.ed.similarity + self.cos.similarity

    @property
    def variation(self) -> float:
        return self.ed.variation + self.cos.variation

    @property
    def total(self) -> float:
        return self.ed.total + self.cos.total + self.alpha * self.resample

    def to_record(self, step: int) -> dict:
        return {"step": step, "ed": self.ed.total, "cos": self.cos.total, "resample": self.resample, "total": self.total}

    @staticmethod
    def combine(parts) -> "LossBreakdown":
        """Sum breakdowns of several class quads into one step record."""
        parts = list(parts)
        add = lambda attr, kind: sum(getattr(getattr(p, kind), attr) for p in parts)
        terms = {
            kind: CostTerms(add("similarity", kind), add("variation", kind), add("signed_variation", kind))
            for kind in ("ed", "cos")
        }
        return LossBreakdown(terms["ed"], terms["cos"], sum(p.resample for p in parts), parts[0].alpha)


# ------------------------------------------------------------ resample term


def resample_loss(g) -> float:
    """Mean squared deviation of segment lengths from the gesture's own mean length."""
    pts = np.asarray(getattr(g, "points", g), dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=1), axis=0)
    return float(np.mean((seg - seg.mean()) ** 2))


def resample_loss_grad(points: np.ndarray) -> np.ndarray:
    # the mean-length term drops out of the derivative since sum(seg - mean) = 0
    v = np.diff(points, axis=1)
    seg = np.linalg.norm(v, axis=0)
    k = seg.size
    safe = np.where(seg > 0, seg, 1.0)
    dv = (2.0 / k) * (seg - seg.mean()) * np.where(seg > 0, 1.0 / safe, 0.0) * v
    g = np.zeros_like(points)
    g[:, 1:] += dv
    g[:, :-1] -= dv
    return g


# ------------------------------------------------------------- full loss


def _cross(na, nb):
    ia, ib = np.meshgrid(np.arange(na), np.arange(nb), indexing="ij")
    return ia.ravel(), ib.ravel()


def _kind_term(q: BatchQuad, kind, gamma, need_grad, parallel, workers):
    a, nr1, nf2, nr2 = len(q.fake1), len(q.real1), len(q.fake2), len(q.real2)
    fr = SdtwBatch(q.fake1, q.real1, *_cross(a, nr1), kind, gamma, parallel, workers)
    ff = SdtwBatch(q.fake1, q.fake2, *_cross(a, nf2), kind, gamma, parallel, workers)
    M_rr = q.real_values.get(kind)
    if M_rr is None:
        M_rr = SdtwBatch(q.real1, q.real2, *_cross(nr1, nr2), kind, gamma, parallel, workers).values.reshape(nr1, nr2)
    M_fr = fr.values.reshape(a, nr1)
    M_ff = ff.values.reshape(a, nf2)
    similarity = _ahd_matrix(M_fr)
    u = _ahd_matrix(M_ff) - _ahd_matrix(M_rr)
    terms = CostTerms(similarity, abs(u), u)
    if not need_grad:
        return terms, None

    grad = np.zeros_like(q.fake1)
    for batch, W, cols in ((fr, _ahd_weights(M_fr), nr1), (ff, np.sign(u) * _ahd_weights(M_ff), nf2)):
        sel = np.flatnonzero(W.ravel())
        if sel.size == 0:
            continue
        G = batch.gradients(sel)
        w = W.ravel()[sel]
        np.add.at(grad, sel // cols, w[:, None, None] * G)
    return terms, grad


def deepnag_evaluate(q: BatchQuad, gamma=0.1, alpha=1e3, need_grad=True, kinds=COST_KINDS, parallel=False, workers=None):
    """Loss breakdown and, if requested, ``d total / d fake1`` of shape ``fake1.shape``."""
    terms = {}
    grad = np.zeros_like(q.fake1) if need_grad else None
    for kind in (CostKind.ED, CostKind.COS):
        if kind not in kinds:
            terms[kind] = CostTerms(0.0, 0.0, 0.0)
            continue
        terms[kind], g = _kind_term(q, kind, gamma, need_grad, parallel, workers)
        if need_grad:
            grad += g
    res = float(np.mean([resample_loss(g) for g in q.fake1]))
    breakdown = LossBreakdown(terms[CostKind.ED], terms[CostKind.COS], res, float(alpha))
    if need_grad and alpha:
        grad += (alpha / len(q.fake1)) * np.stack([resample_loss_grad(g) for g in q.fake1])
    return breakdown, grad


def deepnag_term(q: BatchQuad, kind=CostKind.ED, gamma=0.1, dissimilarity=None) -> float:
    """``L_f`` for one cost kind; ``dissimilarity(a, b)`` replaces soft-DTW when given."""
    if dissimilarity is None:
        terms, _ = _kind_term(q, kind, gamma, False, False, None)
        return terms.total
    ahd = lambda A, B: avg_hausdorff(A, B, dissimilarity)
    return ahd(q.fake1, q.real1) + abs(ahd(q.fake1, q.fake2) - ahd(q.real1, q.real2))


def deepnag_total(q: BatchQuad, gamma=0.1, alpha=1e3) -> LossBreakdown:
    return deepnag_evaluate(q, gamma, alpha, need_grad=False)[0]


def deepnag_gradient(q: BatchQuad, gamma=0.1, alpha=1e3) -> np.ndarray:
    return deepnag_evaluate(q, gamma, alpha, need_grad=True)[1]


# --------------------------------------------------------------- VAE terms


def kl_diag_gaussian(mu, sigma) -> float:
    """KL divergence of ``N(mu, diag(sigma^2))`` from the standard normal."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    return float(np.sum(0.5 * (mu**2 + sigma**2 - 1.0 - np.log(sigma**2))))


def vae_loss(x, x_rec, mu, sigma, kind=CostKind.ED, gamma=0.1) -> float:
    """Soft-DTW reconstruction term plus the latent KL regularizer."""
    return sdtw_forward(x, x_rec, kind, gamma)[0] + kl_diag_gaussian(mu, sigma)
