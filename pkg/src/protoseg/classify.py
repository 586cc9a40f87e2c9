"""Label assignment: cosine nearest prototype, thresholding, test-time
logistic regression, and feature concatenation for ensembling."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

from . import tensor_io
from .errors import ConvergenceError, DimensionError, ManifestError, NumericError
from .prototype_bank import PrototypeBank

log = logging.getLogger(__name__)

CHUNK_ROWS = 4096
BIAS_SCALE = 10.0
MODEL_VERSION = 1


@dataclass(frozen=True)
class ScoredLabels:
    classes: np.ndarray  # (N,) class id per point
    subclasses: np.ndarray  # (N,) subclass id per point
    scores: np.ndarray  # (N,) winning cosine or decision value


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def _chunked(fn, n_rows: int, threads: int):
    # fixed chunk boundaries keep results independent of the thread count
    bounds = [(s, min(s + CHUNK_ROWS, n_rows)) for s in range(0, n_rows, CHUNK_ROWS)]
    if threads <= 1 or len(bounds) <= 1:
        return [fn(s, e) for s, e in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))


def _check_points(points, dims: int) -> np.ndarray:
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[1] != dims:
        raise DimensionError(f"point features have shape {points.shape}, expected (N, {dims})")
    return points


def nn_classify(points, bank: PrototypeBank, threads: int = 1) -> ScoredLabels:
    """Assign each point the subclass of its most cosine-similar prototype.

    Point rows are renormalized first. Ties go to the lowest bank row.
    """
    if len(bank) == 0:
        raise DimensionError("prototype bank is empty")
    points = _check_points(points, bank.dims)
    # identical prototype rows must score identically, whatever the BLAS kernel does
    uniq, inverse = np.unique(bank.prototypes.astype(np.float64), axis=0, return_inverse=True)
    inverse = inverse.ravel()

    def work(s, e):
        scores = (_unit_rows(points[s:e]) @ uniq.T)[:, inverse]
        best = scores.argmax(axis=1)
        return best, scores[np.arange(e - s), best]

    parts = _chunked(work, len(points), threads)
    rows = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, np.int64)
    scores = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
    sub = bank.subclass_of[rows]
    return ScoredLabels(bank.class_of_subclass[sub], sub, scores)


def threshold_retrieve(points, prototype, tau: float) -> np.ndarray:
    """Boolean mask of points whose dot product with ``prototype`` is >= tau."""
    prototype = np.asarray(prototype, dtype=np.float64).ravel()
    points = _check_points(points, len(prototype))
    return points.astype(np.float64) @ prototype >= tau


def threshold_classify(points, bank: PrototypeBank, tau: float, threads: int = 1) -> ScoredLabels:
    """Nearest-prototype labels, with points scoring below ``tau`` set to ignore."""
    out = nn_classify(points, bank, threads)
    keep = out.scores >= tau
    ignore = int(bank.ignore_id)
    return ScoredLabels(
        np.where(keep, out.classes, ignore),
        np.where(keep, out.subclasses, ignore),
        out.scores,
    )


# ---------------------------------------------------------------------------
# logistic regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearClassifier:
    weights: np.ndarray  # (S, D)
    biases: np.ndarray  # (S,)
    class_of_subclass: np.ndarray
    C: float
    multinomial: bool = False
    classes: tuple[str, ...] = ()
    subclass_names: tuple[str, ...] = ()
    ignore_id: int = tensor_io.DEFAULT_IGNORE_ID
    # per subclass (one entry for the multinomial fit): objective value per iterate
    trace: tuple = field(default=(), compare=False, repr=False)

    @property
    def dims(self) -> int:
        return self.weights.shape[1]

    def decision(self, points) -> np.ndarray:
        points = _check_points(points, self.dims)
        return points.astype(np.float64) @ self.weights.T + self.biases

    def save(self, path) -> Path:
        """Write ``[W | b]`` to ``path`` and metadata to the ``.json`` sibling."""
        path = Path(path)
        tensor_io.write_feature_matrix(np.hstack([self.weights, self.biases[:, None]]), path)
        meta = path.with_suffix(".json")
        doc = {
            "version": MODEL_VERSION,
            "C": self.C,
            "multinomial": self.multinomial,
            "classes": list(self.classes),
            "ignore_id": self.ignore_id,
            "subclass_names": list(self.subclass_names),
            "class_of_subclass": [int(c) for c in self.class_of_subclass],
            "features": path.name,
        }
        tensor_io._atomic_write(meta, (json.dumps(doc, indent=1) + "\n").encode())
        return meta

    @classmethod
    def load(cls, path) -> LinearClassifier:
        path = Path(path)
        meta = path if path.suffix == ".json" else path.with_suffix(".json")
        try:
            doc = json.loads(meta.read_text())
            wb = tensor_io.read_feature_matrix(meta.parent / doc["features"]).astype(np.float64)
            cos = np.asarray(doc["class_of_subclass"], dtype=np.int64)
            if len(cos) != len(wb):
                raise DimensionError("model rows and class map disagree", meta)
            return cls(
                weights=wb[:, :-1],
                biases=wb[:, -1],
                class_of_subclass=cos,
                C=float(doc["C"]),
                multinomial=bool(doc.get("multinomial", False)),
                classes=tuple(doc.get("classes", ())),
                subclass_names=tuple(doc.get("subclass_names", ())),
                ignore_id=int(doc.get("ignore_id", tensor_io.DEFAULT_IGNORE_ID)),
            )
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid model JSON: {exc.msg}", meta, exc.pos) from None
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DimensionError):
                raise
            raise ManifestError(f"malformed model metadata: {exc!r}", meta) from None


def _augment(x: np.ndarray, bias_scale: float) -> np.ndarray:
    return np.hstack([x, np.full((len(x), 1), bias_scale)])


def _binary_objective(w, X, y, C):
    z = y * (X @ w)
    return 0.5 * w @ w - C * log_expit(z).sum(), z


def _fit_binary(X, y, C, tol, max_iter):
    """Newton's method with Armijo backtracking for
    ``0.5 |w|^2 + C sum log(1 + exp(-y_r w.x_r))``."""
    n, d = X.shape
    w = np.zeros(d)
    f, z = _binary_objective(w, X, y, C)
    trace = [f]
    for it in range(max_iter + 1):
        s = expit(-z)  # sigma(-y w.x)
        g = w - C * (X.T @ (y * s))
        gnorm = np.abs(g).max()
        if gnorm <= tol:
            return w, trace, gnorm
        if it == max_iter:
            break
        # H = I + A^T A with A = sqrt(C s (1 - s)) X; Woodbury when n < d
        A = np.sqrt(C * s * (1.0 - s))[:, None] * X
        if n < d:
            inner = np.eye(n) + A @ A.T
            step = -(g - A.T @ np.linalg.solve(inner, A @ g))
        else:
            step = -np.linalg.solve(np.eye(d) + A.T @ A, g)
        slope = g @ step
        t = 1.0
        while True:
            w_new = w + t * step
            f_new, z_new = _binary_objective(w_new, X, y, C)
            if f_new <= f + 1e-4 * t * slope:
                break
            # at the rounding floor the full Newton step is accepted if it does not increase f
            if t == 1.0 and f_new <= f + 4 * np.finfo(float).eps * abs(f) and -slope < 1e-20 + 1e-14 * abs(f):
                break
            t *= 0.5
            if t < 1e-12:
                raise ConvergenceError("line search failed", gnorm, it)
        w, f, z = w_new, f_new, z_new
        trace.append(f)
    raise ConvergenceError("Newton solver did not converge", gnorm, max_iter)


def _softmax_objective(W, X, Y, C):
    Z = X @ W.T
    return 0.5 * (W * W).sum() + C * (logsumexp(Z, axis=1) - (Z * Y).sum(axis=1)).sum(), Z


def _fit_softmax(X, labels, S, C, tol, max_iter):
    """Newton-CG on the multinomial objective
    ``0.5 |W|_F^2 + C sum_r (logsumexp(W x_r) - w_{y_r} . x_r)``."""
    n, d = X.shape
    Y = np.zeros((n, S))
    Y[np.arange(n), labels] = 1.0
    W = np.zeros((S, d))
    f, Z = _softmax_objective(W, X, Y, C)
    trace = [f]
    for it in range(max_iter + 1):
        P = softmax(Z, axis=1)
        G = W + C * (P - Y).T @ X
        gnorm = np.abs(G).max()
        if gnorm <= tol:
            return W, trace, gnorm

        if it == max_iter:
            break

        def hess(V):
            Zv = X @ V.T
            PZ = P * Zv
            R = PZ - P * PZ.sum(axis=1, keepdims=True)
            return V + C * R.T @ X

        # conjugate gradient on H p = -G
        p = np.zeros_like(W)
        r = -G.copy()
        q = r.copy()
        rr = (r * r).sum()
        cg_tol = min(0.5, np.sqrt(np.sqrt(rr))) * np.sqrt(rr)
        for _ in range(10 * S * d):
            if np.sqrt(rr) <= cg_tol:
                break
            Hq = hess(q)
            alpha = rr / (q * Hq).sum()
            p += alpha * q
            r -= alpha * Hq
            rr_new = (r * r).sum()
            q = r + (rr_new / rr) * q
            rr = rr_new
        slope = (G * p).sum()
        t = 1.0
        while True:
            W_new = W + t * p
            f_new, Z_new = _softmax_objective(W_new, X, Y, C)
            if f_new <= f + 1e-4 * t * slope:
                break
            if t == 1.0 and f_new <= f + 4 * np.finfo(float).eps * abs(f) and -slope < 1e-20 + 1e-14 * abs(f):
                break
            t *= 0.5
            if t < 1e-12:
                raise ConvergenceError("line search failed", gnorm, it)
        W, f, Z = W_new, f_new, Z_new
        trace.append(f)
    raise ConvergenceError("Newton-CG solver did not converge", gnorm, max_iter)


def fit_lr(
    bank: PrototypeBank,
    C: float = 1.0,
    *,
    multinomial: bool = False,
    threads: int = 1,
    tol: float = 1e-8,
    max_iter: int = 100,
    bias_scale: float = BIAS_SCALE,
) -> LinearClassifier:
    """Fit a logistic-regression classifier on the prototype rows.

    Labels are subclass ids. The default is one-vs-rest: for each subclass
    an independent L2-regularized binary problem over every bank row. The
    bias is learned through a constant feature of value ``bias_scale``.
    """
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    S = bank.num_subclasses
    if S < 2:
        raise NumericError("logistic regression needs at least two subclasses")
    present = np.bincount(bank.subclass_of, minlength=S)
    if (present == 0).any():
        missing = [bank.subclass_names[i] for i in np.flatnonzero(present == 0)]
        raise NumericError(f"subclasses without prototype rows: {missing}")
    X = _augment(bank.prototypes.astype(np.float64), bias_scale)

    if multinomial:
        Wa, trace, gnorm = _fit_softmax(X, bank.subclass_of, S, C, tol, max_iter)
        traces = (tuple(trace),)
        log.debug("softmax fit: %d iterations, grad %.2e", len(trace) - 1, gnorm)
    else:

        def one(s):
            y = np.where(bank.subclass_of == s, 1.0, -1.0)
            return _fit_binary(X, y, C, tol, max_iter)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(one, range(S)))
        else:
            results = [one(s) for s in range(S)]
        Wa = np.array([r[0] for r in results])
        traces = tuple(tuple(r[1]) for r in results)
        log.debug("one-vs-rest fit: max %d iterations", max(len(t) for t in traces) - 1)

    return LinearClassifier(
        weights=Wa[:, :-1],
        biases=Wa[:, -1] * bias_scale,
        class_of_subclass=bank.class_of_subclass,
        C=float(C),
        multinomial=multinomial,
        classes=bank.classes,
        subclass_names=bank.subclass_names,
        ignore_id=bank.ignore_id,
        trace=traces,
    )


def lr_classify(points, model: LinearClassifier, threads: int = 1) -> ScoredLabels:
    """Argmax of the per-subclass decision values; ties go to the lowest subclass."""
    points = _check_points(points, model.dims)

    def work(s, e):
        d = model.decision(points[s:e])
        best = d.argmax(axis=1)
        return best, d[np.arange(e - s), best]

    parts = _chunked(work, len(points), threads)
    sub = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, np.int64)
    scores = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
    return ScoredLabels(model.class_of_subclass[sub], sub, scores)


def concat_features(a, b, renormalize: bool = False) -> np.ndarray:
    """Row-wise concatenation of two feature spaces.

    With unit-norm inputs the dot product of concatenated rows is the sum of
    the per-space cosines; ``renormalize`` rescales rows to unit norm so it
    becomes their mean.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or len(a) != len(b):
        raise DimensionError(f"cannot concatenate features of shapes {a.shape} and {b.shape}")
    out = np.hstack([a.astype(np.float64), b.astype(np.float64)])
    if renormalize:
        out = _unit_rows(out)
    return out.astype(np.float32)
