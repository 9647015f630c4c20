"""Homography math and the downstream evaluation metrics.

Error metric everywhere is the symmetric transfer error: the average of the
forward (A->B) and backward (B->A) reprojection distances in pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import DegenerateGeometry, InvalidInput

_W_EPS = 1e-12


def _to_h(pts: np.ndarray) -> np.ndarray:
    return np.hstack([pts, np.ones((len(pts), 1))])


def apply_h(h: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Projective action with perspective division.

    Returns ``(projected, valid)``; points mapping too close to the plane at
    infinity (|w| <= 1e-12) are flagged invalid and filled with nan.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    q = _to_h(pts) @ np.asarray(h, dtype=np.float64).T
    w = q[:, 2]
    valid = np.abs(w) > _W_EPS
    out = np.full_like(pts, np.nan)
    out[valid] = q[valid, :2] / w[valid, None]
    return out, valid


def project(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """``apply_h`` for callers that know no point degenerates."""
    out, valid = apply_h(h, pts)
    if not valid.all():
        raise InvalidInput("point projected to the plane at infinity")
    return out


def symmetric_errors(h: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """(M, N) matrix of symmetric transfer errors between two point sets."""
    h = np.asarray(h, dtype=np.float64)
    try:
        h_inv = np.linalg.inv(h)
    except np.linalg.LinAlgError as exc:
        raise InvalidInput("homography is singular") from exc
    fwd_a, ok_a = apply_h(h, pts_a)  # (M, 2) in B frame
    bwd_b, ok_b = apply_h(h_inv, pts_b)  # (N, 2) in A frame
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    d_fwd = np.linalg.norm(fwd_a[:, None, :] - pts_b[None, :, :], axis=-1)
    d_bwd = np.linalg.norm(pts_a[:, None, :] - bwd_b[None, :, :], axis=-1)
    err = 0.5 * (d_fwd + d_bwd)
    bad = ~ok_a[:, None] | ~ok_b[None, :]
    err[bad] = np.inf
    return err


def pair_errors(h: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """Symmetric transfer error for aligned point pairs (same length)."""
    h = np.asarray(h, dtype=np.float64)
    h_inv = np.linalg.inv(h)
    fwd, ok_f = apply_h(h, pts_a)
    bwd, ok_b = apply_h(h_inv, pts_b)
    err = 0.5 * (np.linalg.norm(fwd - np.asarray(pts_b, dtype=np.float64), axis=-1)
                 + np.linalg.norm(bwd - np.asarray(pts_a, dtype=np.float64), axis=-1))
    err[~(ok_f & ok_b)] = np.inf
    return err


# ---------------------------------------------------------------------------
# DLT
# ---------------------------------------------------------------------------


def _hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return (_to_h(pts) @ t.T)[:, :2], t


def dlt(pts_a: np.ndarray, pts_b: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """(Weighted) normalized direct linear transform.

    Minimizes the weighted algebraic error via the smallest right singular
    vector of the design matrix, with Hartley normalization of both point
    sets.  Unit weights give the plain DLT; exact data is recovered exactly.
    """
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    k = len(pts_a)
    if k < 4 or len(pts_b) != k:
        raise InvalidInput(f"need >= 4 aligned pairs, got {k} and {len(pts_b)}")
    if weights is None:
        weights = np.ones(k)
    weights = np.asarray(weights, dtype=np.float64)
    pa, ta = _hartley_normalize(pts_a)
    pb, tb = _hartley_normalize(pts_b)
    x, y = pa[:, 0], pa[:, 1]
    u, v = pb[:, 0], pb[:, 1]
    zero, one = np.zeros(k), np.ones(k)
    rows_a = np.column_stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u])
    rows_b = np.column_stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v])
    a = np.empty((2 * k, 9))
    a[0::2] = rows_a * weights[:, None]
    a[1::2] = rows_b * weights[:, None]
    # full_matrices so vt always has all 9 right singular vectors (the minimal
    # 4-pair system is 8x9 and its solution is the null-space vector).
    _, s, vt = np.linalg.svd(a, full_matrices=True)
    if s[7] <= 1e-9 * max(s[0], 1e-300):
        raise DegenerateGeometry("design matrix is rank deficient (degenerate configuration)")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(tb) @ hn @ ta
    if abs(h[2, 2]) > _W_EPS:
        h = h / h[2, 2]
    return h


def algebraic_residual(h: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray,
                       weights: np.ndarray | None = None) -> float:
    """Weighted algebraic error of ``h`` in the Hartley-normalized frame."""
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    k = len(pts_a)
    if weights is None:
        weights = np.ones(k)
    pa, ta = _hartley_normalize(pts_a)
    pb, tb = _hartley_normalize(pts_b)
    hn = tb @ np.asarray(h, dtype=np.float64) @ np.linalg.inv(ta)
    hn = hn / np.linalg.norm(hn)
    q = _to_h(pa) @ hn.T
    res_u = pb[:, 0] * q[:, 2] - q[:, 0]
    res_v = pb[:, 1] * q[:, 2] - q[:, 1]
    return float(np.sum((weights ** 2) * (res_u ** 2 + res_v ** 2)))


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------


@dataclass
class RansacResult:
    success: bool
    h: np.ndarray | None
    inliers: np.ndarray  # boolean mask over input pairs
    num_hypotheses: int


def ransac_h(pts_a: np.ndarray, pts_b: np.ndarray, threshold: float = 3.0,
             iterations: int = 1000, rng: np.random.Generator | None = None) -> RansacResult:
    """Plain RANSAC with 4-point DLT hypotheses and symmetric-error scoring.

    When the number of 4-subsets is within the iteration budget, every subset
    is tried in lexicographic order (deterministic exhaustive mode); otherwise
    subsets are drawn from ``rng``.  The returned mask is the support of the
    winning minimal hypothesis; ``h`` is refit by DLT on that support.
    """
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    k = len(pts_a)
    empty = np.zeros(k, dtype=bool)
    if k < 4:
        return RansacResult(False, None, empty, 0)
    n_combos = k * (k - 1) * (k - 2) * (k - 3) // 24
    if n_combos <= iterations:
        subsets = combinations(range(k), 4)
    else:
        rng = rng or np.random.default_rng(0)
        subsets = (rng.choice(k, size=4, replace=False) for _ in range(iterations))
    best_count = 0
    best_mask = empty
    tried = 0
    for idx in subsets:
        idx = np.asarray(idx)
        tried += 1
        try:
            h = dlt(pts_a[idx], pts_b[idx])
        except DegenerateGeometry:
            continue
        err = pair_errors(h, pts_a, pts_b)
        mask = err < threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_count < 4:
        return RansacResult(False, None, empty, tried)
    try:
        h_fit = dlt(pts_a[best_mask], pts_b[best_mask])
    except DegenerateGeometry:
        return RansacResult(False, None, empty, tried)
    return RansacResult(True, h_fit, best_mask, tried)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def corner_error(h_est: np.ndarray | None, h_true: np.ndarray,
                 frame: tuple[int, int]) -> float:
    """Mean reprojection distance of the four frame corners (inf on failure)."""
    if h_est is None:
        return float("inf")
    w, hgt = frame
    corners = np.array([[0.0, 0.0], [w, 0.0], [w, hgt], [0.0, hgt]])
    est, ok_e = apply_h(h_est, corners)
    true, ok_t = apply_h(h_true, corners)
    if not (ok_e.all() and ok_t.all()):
        return float("inf")
    return float(np.linalg.norm(est - true, axis=1).mean())


def error_auc(errors: np.ndarray, threshold: float) -> float:
    """Area under the recall-vs-threshold curve up to ``threshold``, in [0, 1].

    The recall curve of a finite population is a step function, so the
    integral has the closed form ``mean(max(0, 1 - e/threshold))``.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        return 0.0
    return float(np.mean(np.clip(1.0 - errors / threshold, 0.0, None)))


@dataclass
class PrResult:
    precision: float
    recall: float
    num_predicted: int
    num_gt: int
    precision_undefined: bool = False


def match_pr(pairs: np.ndarray, gt, pts_a: np.ndarray, pts_b: np.ndarray,
             radius: float = 3.0) -> PrResult:
    """Precision/recall of predicted pairs against ground truth.

    Precision: fraction of predictions whose symmetric reprojection error
    under the true homography is below ``radius``.  Recall: fraction of
    ground-truth pairs recovered exactly.  ``gt`` needs ``.h`` and ``.pairs``.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    gt_pairs = np.asarray(gt.pairs, dtype=np.int64).reshape(-1, 2)
    num_gt = len(gt_pairs)
    if len(pairs) == 0:
        return PrResult(0.0, 0.0 if num_gt else 1.0, 0, num_gt, precision_undefined=True)
    err = pair_errors(gt.h, pts_a[pairs[:, 0]], pts_b[pairs[:, 1]])
    precision = float((err < radius).mean())
    if num_gt == 0:
        recall = 1.0
    else:
        gt_set = {(int(i), int(j)) for i, j in gt_pairs}
        hits = sum((int(i), int(j)) in gt_set for i, j in pairs)
        recall = hits / num_gt
    return PrResult(precision, recall, len(pairs), num_gt)


def nn_mutual_matches(desc_a: np.ndarray, desc_b: np.ndarray) -> np.ndarray:
    """Nearest-neighbor matching with mutual check (cosine similarity)."""
    if len(desc_a) == 0 or len(desc_b) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    a = desc_a / np.maximum(np.linalg.norm(desc_a, axis=1, keepdims=True), 1e-12)
    b = desc_b / np.maximum(np.linalg.norm(desc_b, axis=1, keepdims=True), 1e-12)
    sim = a @ b.T
    fwd = sim.argmax(axis=1)
    bwd = sim.argmax(axis=0)
    rows = np.nonzero(bwd[fwd] == np.arange(len(desc_a)))[0]
    return np.stack([rows, fwd[rows]], axis=1)


@dataclass
class EvalReport:
    """Aggregate evaluation over a population of image pairs."""

    precision: float
    recall: float
    auc_ransac: dict[float, float]
    auc_dlt: dict[float, float]
    num_pairs: int
    mean_matches: float
    mean_exit_layer: float
    per_pair: list[dict] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "auc_ransac": {str(k): v for k, v in self.auc_ransac.items()},
            "auc_dlt": {str(k): v for k, v in self.auc_dlt.items()},
            "num_pairs": self.num_pairs,
            "mean_matches": self.mean_matches,
            "mean_exit_layer": self.mean_exit_layer,
        }
