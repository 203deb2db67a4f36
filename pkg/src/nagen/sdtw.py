"""Classic and soft dynamic time warping with an exact backward pass.

Sequences are passed feature-major, ``(N, L)``, like :attr:`Gesture.points`.
Two point costs are supported:

* ``ED``  squared Euclidean distance between time steps,
* ``COS`` ``1 - cos`` between the direction vectors of the two vector paths
  (so a length-``L`` gesture is aligned as ``L - 1`` displacement vectors).

The DP matrix ``R`` carries a boundary row and column: ``R[0, 0] = 0`` and the
rest of the boundary is ``+inf``.  Cell ``(i, j)`` holds the soft-min of its
three predecessors plus the cost of matching step ``i - 1`` to ``j - 1``.

Every batch kernel exists in two flavours that perform the same floating point
operations per cell: a row-major serial loop and an anti-diagonal wavefront
(cells on one diagonal are independent).  The parallel flavour distributes
pairs across numba threads, or the cells of a diagonal when the batch is
smaller than the worker count, so serial and parallel results agree bit for
bit.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .errors import NumericError

# the bundled TBB is too old for numba; fall back silently
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

INF = np.inf
_ZERO_NORM = 1e-12
_CELL_PARALLEL_MIN_LENGTH = 32


class CostKind(str, enum.Enum):
    ED = "ED"
    COS = "COS"


def _kind(kind) -> CostKind:
    return kind if isinstance(kind, CostKind) else CostKind(str(kind).upper())


def _points(x) -> np.ndarray:
    pts = getattr(x, "points", x)
    return np.asarray(pts, dtype=np.float64)


def default_workers() -> int:
    env = os.environ.get("NAG_WORKERS")
    if env:
        return max(1, int(env))
    return numba.config.NUMBA_NUM_THREADS


# ---------------------------------------------------------------- scalar ops


def point_cost(kind, a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if _kind(kind) is CostKind.ED:
        return float(np.sum((a - b) ** 2))
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= _ZERO_NORM or nb <= _ZERO_NORM:
        return 1.0
    return float(1.0 - np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def softmin(values, gamma: float) -> float:
    """``-gamma * log(sum(exp(-v / gamma)))`` with a max shift; ``+inf`` entries weigh 0."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmin of an empty sequence")
    m = v.min()
    if m == INF:
        return INF
    return float(m - gamma * np.log(np.sum(np.exp(-(v - m) / gamma))))


# ------------------------------------------------------------- numba kernels


@njit(cache=True)
def _softmin3(a, b, c, gamma):
    # the minimum contributes exp(0) = 1, so only the other two need an exp
    if a <= b and a <= c:
        m, p, q = a, b, c
    elif b <= c:
        m, p, q = b, a, c
    else:
        m, p, q = c, a, b
    if m == INF:
        return INF
    return m - gamma * math.log(1.0 + math.exp((m - p) / gamma) + math.exp((m - q) / gamma))


@njit(cache=True)
def _cost_matrix(x, y, cos, out):
    n, dims = x.shape
    m = y.shape[0]
    if cos:
        nx = np.empty(n)
        ny = np.empty(m)
        for i in range(n):
            s = 0.0
            for k in range(dims):
                s += x[i, k] * x[i, k]
            nx[i] = math.sqrt(s)
        for j in range(m):
            s = 0.0
            for k in range(dims):
                s += y[j, k] * y[j, k]
            ny[j] = math.sqrt(s)
        for i in range(n):
            for j in range(m):
                if nx[i] <= _ZERO_NORM or ny[j] <= _ZERO_NORM:
                    out[i, j] = 1.0
                else:
                    s = 0.0
                    for k in range(dims):
                        s += x[i, k] * y[j, k]
                    # rounding can push |cos| past 1; keep the cost inside [0, 2]
                    out[i, j] = 1.0 - min(1.0, max(-1.0, s / (nx[i] * ny[j])))
    else:
        for i in range(n):
            for j in range(m):
                s = 0.0
                for k in range(dims):
                    t = x[i, k] - y[j, k]
                    s += t * t
                out[i, j] = s


@njit(cache=True)
def _init_r(R):
    R[:, :] = INF
    R[0, 0] = 0.0


@njit(cache=True)
def _forward_rows(D, gamma, R):
    n, m = D.shape
    _init_r(R)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            R[i, j] = D[i - 1, j - 1] + _softmin3(R[i - 1, j], R[i, j - 1], R[i - 1, j - 1], gamma)


@njit(cache=True)
def _forward_wave(D, gamma, R):
    n, m = D.shape
    _init_r(R)
    for d in range(2, n + m + 1):
        for i in range(max(1, d - m), min(n, d - 1) + 1):
            j = d - i
            R[i, j] = D[i - 1, j - 1] + _softmin3(R[i - 1, j], R[i, j - 1], R[i - 1, j - 1], gamma)


@njit(parallel=True, cache=True)
def _forward_wave_cells(D, gamma, R):
    n, m = D.shape
    _init_r(R)
    for d in range(2, n + m + 1):
        lo = max(1, d - m)
        hi = min(n, d - 1)
        for i in prange(lo, hi + 1):
            j = d - i
            R[i, j] = D[i - 1, j - 1] + _softmin3(R[i - 1, j], R[i, j - 1], R[i - 1, j - 1], gamma)


@njit(cache=True)
def _e_cell(R, D, E, i, j, gamma):
    # E[i, j] = d R[n, m] / d R[i+1, j+1], gathered from the three successors
    n, m = D.shape
    r = R[i + 1, j + 1]
    e = 0.0
    if i + 1 < n:
        e += E[i + 1, j] * math.exp((R[i + 2, j + 1] - D[i + 1, j] - r) / gamma)
    if j + 1 < m:
        e += E[i, j + 1] * math.exp((R[i + 1, j + 2] - D[i, j + 1] - r) / gamma)
    if i + 1 < n and j + 1 < m:
        e += E[i + 1, j + 1] * math.exp((R[i + 2, j + 2] - D[i + 1, j + 1] - r) / gamma)
    return e


@njit(cache=True)
def _backward_rows(R, D, gamma, E):
    n, m = D.shape
    E[n - 1, m - 1] = 1.0
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if i == n - 1 and j == m - 1:
                continue
            E[i, j] = _e_cell(R, D, E, i, j, gamma)


@njit(cache=True)
def _backward_wave(R, D, gamma, E):
    n, m = D.shape
    E[n - 1, m - 1] = 1.0
    for d in range(n + m - 3, -1, -1):
        for i in range(max(0, d - m + 1), min(n - 1, d) + 1):
            E[i, d - i] = _e_cell(R, D, E, i, d - i, gamma)


@njit(parallel=True, cache=True)
def _backward_wave_cells(R, D, gamma, E):
    n, m = D.shape
    E[n - 1, m - 1] = 1.0
    for d in range(n + m - 3, -1, -1):
        lo = max(0, d - m + 1)
        hi = min(n - 1, d)
        for i in prange(lo, hi + 1):
            E[i, d - i] = _e_cell(R, D, E, i, d - i, gamma)


@njit(cache=True)
def _grad_seq(E, x, y, cos, out):
    """Chain ``dvalue/dD = E`` into the gradient w.r.t. the first sequence."""
    n, dims = x.shape
    m = y.shape[0]
    out[:, :] = 0.0
    if not cos:
        for i in range(n):
            for j in range(m):
                w = 2.0 * E[i, j]
                for k in range(dims):
                    out[i, k] += w * (x[i, k] - y[j, k])
        return
    # x, y are vector paths here; out is the gradient w.r.t. the points (n + 1 rows)
    for i in range(n):
        su = 0.0
        for k in range(dims):
            su += x[i, k] * x[i, k]
        nu = math.sqrt(su)
        if nu <= _ZERO_NORM:
            continue
        for j in range(m):
            sv = 0.0
            dot = 0.0
            for k in range(dims):
                sv += y[j, k] * y[j, k]
                dot += x[i, k] * y[j, k]
            nv = math.sqrt(sv)
            if nv <= _ZERO_NORM:
                continue
            for k in range(dims):
                g = -E[i, j] * (y[j, k] / (nu * nv) - dot * x[i, k] / (nu * nu * nu * nv))
                out[i + 1, k] += g
                out[i, k] -= g


@njit(cache=True)
def _batch_forward_serial(XS, YS, ia, ib, gamma, cos, D, R, vals):
    for p in range(ia.shape[0]):
        _cost_matrix(XS[ia[p]], YS[ib[p]], cos, D[p])
        _forward_rows(D[p], gamma, R[p])
        vals[p] = R[p, D.shape[1], D.shape[2]]


@njit(parallel=True, cache=True)
def _batch_forward_pairs(XS, YS, ia, ib, gamma, cos, D, R, vals):
    for p in prange(ia.shape[0]):
        _cost_matrix(XS[ia[p]], YS[ib[p]], cos, D[p])
        _forward_wave(D[p], gamma, R[p])
        vals[p] = R[p, D.shape[1], D.shape[2]]


@njit(cache=True)
def _batch_forward_cells(XS, YS, ia, ib, gamma, cos, D, R, vals):
    for p in range(ia.shape[0]):
        _cost_matrix(XS[ia[p]], YS[ib[p]], cos, D[p])
        _forward_wave_cells(D[p], gamma, R[p])
        vals[p] = R[p, D.shape[1], D.shape[2]]


@njit(cache=True)
def _batch_backward_serial(XS, YS, ia, ib, sel, gamma, cos, D, R, E, G):
    for q in range(sel.shape[0]):
        p = sel[q]
        _backward_rows(R[p], D[p], gamma, E[q])
        _grad_seq(E[q], XS[ia[p]], YS[ib[p]], cos, G[q])


@njit(parallel=True, cache=True)
def _batch_backward_pairs(XS, YS, ia, ib, sel, gamma, cos, D, R, E, G):
    for q in prange(sel.shape[0]):
        p = sel[q]
        _backward_wave(R[p], D[p], gamma, E[q])
        _grad_seq(E[q], XS[ia[p]], YS[ib[p]], cos, G[q])


@njit(cache=True)
def _batch_backward_cells(XS, YS, ia, ib, sel, gamma, cos, D, R, E, G):
    for q in range(sel.shape[0]):
        p = sel[q]
        _backward_wave_cells(R[p], D[p], gamma, E[q])
        _grad_seq(E[q], XS[ia[p]], YS[ib[p]], cos, G[q])


@njit(cache=True)
def _dtw_hard(x, y, cos):
    n = x.shape[0]
    m = y.shape[0]
    D = np.empty((n, m))
    _cost_matrix(x, y, cos, D)
    R = np.empty((n + 1, m + 1))
    _init_r(R)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            R[i, j] = D[i - 1, j - 1] + min(R[i - 1, j], min(R[i, j - 1], R[i - 1, j - 1]))
    return R[n, m]


@njit(parallel=True, cache=True)
def _dtw_hard_many(q, TS, cos, out):
    for t in prange(TS.shape[0]):
        out[t] = _dtw_hard(q, TS[t], cos)


# ------------------------------------------------------------- python layer


def _kernel_seq(points: np.ndarray, kind: CostKind) -> np.ndarray:
    """Feature-major points -> time-major rows the kernels consume."""
    seq = np.ascontiguousarray(points.T)
    if kind is CostKind.COS:
        if seq.shape[0] < 2:
            raise ValueError("COS cost needs sequences of length >= 2")
        seq = np.ascontiguousarray(np.diff(seq, axis=0))
    return seq


def _kernel_stack(stack: np.ndarray, kind: CostKind) -> np.ndarray:
    seq = np.ascontiguousarray(np.transpose(stack, (0, 2, 1)))
    if kind is CostKind.COS:
        if seq.shape[1] < 2:
            raise ValueError("COS cost needs sequences of length >= 2")
        seq = np.ascontiguousarray(np.diff(seq, axis=1))
    return seq


def dtw_classic(X, Y, kind=CostKind.ED) -> float:
    """Hard-min DTW value ``R[n, m]``."""
    kind = _kind(kind)
    x, y = _points(X), _points(Y)
    if x.shape[0] != y.shape[0]:
        raise ValueError("sequences must share the feature dimension")
    return float(_dtw_hard(_kernel_seq(x, kind), _kernel_seq(y, kind), kind is CostKind.COS))


def dtw_classic_many(query, templates, kind=CostKind.ED) -> np.ndarray:
    """DTW from one query to each template, evaluated in parallel over templates."""
    kind = _kind(kind)
    q = _kernel_seq(_points(query), kind)
    ts = _kernel_stack(np.stack([_points(t) for t in templates]), kind)
    out = np.empty(len(ts))
    _dtw_hard_many(q, ts, kind is CostKind.COS, out)
    return out


@dataclass
class AlignmentTape:
    R: np.ndarray
    costs: np.ndarray
    gamma: float
    kind: CostKind
    x: np.ndarray
    y: np.ndarray

    @property
    def value(self) -> float:
        return float(self.R[-1, -1])


def sdtw_forward(X, Y, kind=CostKind.ED, gamma: float = 0.1):
    """Soft-DTW value and the tape needed by :func:`sdtw_backward`."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    kind = _kind(kind)
    x, y = _points(X), _points(Y)
    if x.shape[0] != y.shape[0]:
        raise ValueError("sequences must share the feature dimension")
    xs, ys = _kernel_seq(x, kind), _kernel_seq(y, kind)
    D = np.empty((xs.shape[0], ys.shape[0]))
    _cost_matrix(xs, ys, kind is CostKind.COS, D)
    R = np.empty((D.shape[0] + 1, D.shape[1] + 1))
    _forward_rows(D, float(gamma), R)
    if not np.all(np.isfinite(R[1:, 1:])):
        raise NumericError("soft-DTW produced non-finite values; check gamma and input scaling")
    return float(R[-1, -1]), AlignmentTape(R, D, float(gamma), kind, x, y)


def sdtw_backward(tape: AlignmentTape) -> np.ndarray:
    """Gradient of the soft-DTW value w.r.t. the first sequence, shape ``(N, L)``."""
    cos = tape.kind is CostKind.COS
    xs, ys = _kernel_seq(tape.x, tape.kind), _kernel_seq(tape.y, tape.kind)
    E = np.zeros_like(tape.costs)
    _backward_rows(tape.R, tape.costs, tape.gamma, E)
    G = np.empty((tape.x.shape[1], tape.x.shape[0]))
    _grad_seq(E, xs, ys, cos, G)
    return G.T.copy()


class SdtwBatch:
    """Forward results for many pairs drawn from two stacks, with lazy gradients.

    ``A`` and ``B`` are ``(count, N, L)`` stacks; pair ``p`` aligns
    ``A[ia[p]]`` against ``B[ib[p]]``.  Gradients are w.r.t. the ``A`` member.
    """

    def __init__(self, A, B, ia, ib, kind=CostKind.ED, gamma=0.1, parallel=False, workers=None):
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        self.kind = _kind(kind)
        self.gamma = float(gamma)
        self.parallel = parallel
        self.workers = workers or default_workers()
        A = np.asarray(A, dtype=np.float64)
        B = np.asarray(B, dtype=np.float64)
        if A.shape[1] != B.shape[1]:
            raise ValueError("sequences must share the feature dimension")
        self.shape = A.shape[1:]
        self.ia = np.ascontiguousarray(ia, dtype=np.int64)
        self.ib = np.ascontiguousarray(ib, dtype=np.int64)
        self._xs = _kernel_stack(A, self.kind)
        self._ys = _kernel_stack(B, self.kind)
        P = len(self.ia)
        n, m = self._xs.shape[1], self._ys.shape[1]
        self.D = np.empty((P, n, m))
        self.R = np.empty((P, n + 1, m + 1))
        self.values = np.empty(P)
        if P == 0:
            return
        cos = self.kind is CostKind.COS
        with _threads(self.workers if parallel else None):
            fn = self._pick(_batch_forward_serial, _batch_forward_pairs, _batch_forward_cells, P, max(n, m))
            fn(self._xs, self._ys, self.ia, self.ib, self.gamma, cos, self.D, self.R, self.values)
        bad = np.flatnonzero(~np.isfinite(self.values))
        if bad.size:
            raise NumericError(f"soft-DTW produced a non-finite value for pair {int(bad[0])}")

    def _pick(self, serial, pairs, cells, count, length):
        if not self.parallel:
            return serial
        if count < self.workers and length >= _CELL_PARALLEL_MIN_LENGTH:
            return cells
        return pairs

    def gradients(self, sel=None) -> np.ndarray:
        """Gradients for the selected pair indices, shape ``(len(sel), N, L)``."""
        sel = np.arange(len(self.ia)) if sel is None else np.ascontiguousarray(sel, dtype=np.int64)
        N, L = self.shape
        n, m = self.D.shape[1:]
        E = np.zeros((len(sel), n, m))
        G = np.empty((len(sel), L, N))
        if len(sel):
            cos = self.kind is CostKind.COS
            with _threads(self.workers if self.parallel else None):
                fn = self._pick(_batch_backward_serial, _batch_backward_pairs, _batch_backward_cells, len(sel), max(n, m))
                fn(self._xs, self._ys, self.ia, self.ib, sel, self.gamma, cos, self.D, self.R, E, G)
        bad = np.flatnonzero(~np.all(np.isfinite(G.reshape(len(sel), -1)), axis=1))
        if bad.size:
            raise NumericError(f"soft-DTW gradient is non-finite for pair {int(sel[bad[0]])}")
        return np.ascontiguousarray(np.transpose(G, (0, 2, 1)))


class _threads:
    def __init__(self, workers):
        self.workers = workers

    def __enter__(self):
        self.prev = numba.get_num_threads()
        if self.workers is not None:
            numba.set_num_threads(max(1, min(self.workers, numba.config.NUMBA_NUM_THREADS)))

    def __exit__(self, *exc):
        numba.set_num_threads(self.prev)


def sdtw_batch(pairs, kind=CostKind.ED, gamma: float = 0.1, parallel: bool = False, workers=None):
    """Evaluate soft-DTW value and first-argument gradient for every ``(X, Y)`` pair."""
    pairs = list(pairs)
    if not pairs:
        return []
    A = np.stack([_points(x) for x, _ in pairs])
    B = np.stack([_points(y) for _, y in pairs])
    idx = np.arange(len(pairs))
    try:
        batch = SdtwBatch(A, B, idx, idx, kind, gamma, parallel, workers)
        grads = batch.gradients()
    except NumericError as e:
        raise NumericError(f"sdtw_batch: {e}") from None
    return [(float(v), g) for v, g in zip(batch.values, grads)]
