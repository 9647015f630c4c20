"""Correspondence head: pairwise scores, matchability, soft assignment.

The head can be attached to the states of any layer.  The soft partial
assignment combines a row-softmax and a column-softmax of the pairwise score
matrix with per-point matchability gates; everything is kept in the log
domain so the training loss never evaluates log(0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .backbone import HeadParams
from .errors import FileFormatError, InvalidInput
from .numcore import Tensor

DEFAULT_TAU = 0.1


def score_matrix(xa: Tensor, xb: Tensor, hp: HeadParams) -> tuple[Tensor, Tensor, Tensor]:
    """Pairwise scores plus matchability logits for both images.

    Returns ``(S, za, zb)`` where ``S[i, j]`` is the affinity of pair (i, j)
    and ``sigmoid(z)`` is the per-point matchability.
    """
    with nc.flops.phase("head"):
        pa = nc.linear(xa, hp.wa, hp.ba)  # (M, d)
        pb = nc.linear(xb, hp.wb, hp.bb)  # (N, d)
        s = nc.matmul(pa, nc.transpose(pb, (1, 0)))  # (M, N)
        za = nc.reshape(nc.linear(xa, hp.wsig, hp.bsig), (-1,))  # (M,)
        zb = nc.reshape(nc.linear(xb, hp.wsig, hp.bsig), (-1,))  # (N,)
    return s, za, zb


def matchability(x: Tensor, hp: HeadParams) -> Tensor:
    """Per-point probability of having any correspondent (sigmoid gate).

    FLOPs land in whatever phase the caller has active: the assignment head
    counts it as head work, the pruning rule as adaptivity-control work.
    """
    z = nc.reshape(nc.linear(x, hp.wsig, hp.bsig), (-1,))
    return nc.sigmoid(z)


def log_assignment(s: Tensor, za: Tensor, zb: Tensor) -> Tensor:
    """Log of the soft partial assignment.

    ``P_ij = sigma_i^A * sigma_j^B * colsoftmax(S)_ij * rowsoftmax(S)_ij``,
    assembled as a sum of log-sigmoids and log-softmaxes.
    """
    if s.shape != (za.shape[0], zb.shape[0]):
        raise InvalidInput(f"shape mismatch: S {s.shape} vs sigma {za.shape}/{zb.shape}")
    ls_rows = nc.log_softmax(s, axis=1)  # over candidates in B
    ls_cols = nc.log_softmax(s, axis=0)  # over candidates in A
    ga = nc.reshape(nc.log_sigmoid(za), (za.shape[0], 1))
    gb = nc.reshape(nc.log_sigmoid(zb), (1, zb.shape[0]))
    return nc.add(nc.add(ls_rows, ls_cols), nc.add(ga, gb))


@dataclass
class AssignmentScores:
    """Detached (plain-array) head outputs for one layer."""

    s: np.ndarray  # (M, N)
    sigma_a: np.ndarray  # (M,)
    sigma_b: np.ndarray  # (N,)
    log_p: np.ndarray  # (M, N)


def assignment_scores(xa: Tensor, xb: Tensor, hp: HeadParams) -> AssignmentScores:
    s, za, zb = score_matrix(xa, xb, hp)
    log_p = log_assignment(s, za, zb)
    sig = nc.sigmoid
    return AssignmentScores(s.data, sig(za).data, sig(zb).data, log_p.data)


@dataclass
class MatchResult:
    """Extracted correspondences plus adaptive-inference statistics."""

    pairs: np.ndarray  # (K, 2) original indices, sorted by first column
    scores: np.ndarray  # (K,) assignment probabilities
    match_a: np.ndarray  # (M,) index into B or -1
    match_b: np.ndarray  # (N,) index into A or -1
    exit_layer: int = 0  # 1-based; 0 means no layer ran
    num_layers: int = 0
    active_counts: list[tuple[int, int]] = field(default_factory=list)
    prune_layer_a: np.ndarray | None = None  # 1-based layer a point was pruned at, -1 if kept
    prune_layer_b: np.ndarray | None = None
    prune_sigma_a: np.ndarray | None = None  # matchability recorded at pruning time
    prune_sigma_b: np.ndarray | None = None

    @property
    def num_matches(self) -> int:
        return len(self.pairs)


def extract_matches(log_p: np.ndarray, tau: float = DEFAULT_TAU) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Mutual-argmax pairs with assignment probability above ``tau``.

    Returns ``(pairs, scores, match_a, match_b)``.  A row or column whose
    maximum is attained more than once yields no match (exact ties are
    ambiguous); surviving pairs are emitted in ascending (i, j) order.
    """
    if not (0.0 < tau < 1.0):
        raise InvalidInput(f"tau must be in (0, 1), got {tau}")
    m, n = log_p.shape
    match_a = np.full(m, -1, dtype=np.int64)
    match_b = np.full(n, -1, dtype=np.int64)
    if m == 0 or n == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0), match_a, match_b
    row_arg = log_p.argmax(axis=1)
    col_arg = log_p.argmax(axis=0)
    row_max = log_p[np.arange(m), row_arg]
    col_max = log_p[col_arg, np.arange(n)]
    row_unique = (log_p == row_max[:, None]).sum(axis=1) == 1
    col_unique = (log_p == col_max[None, :]).sum(axis=0) == 1
    mutual = col_arg[row_arg] == np.arange(m)
    keep = mutual & row_unique & col_unique[row_arg] & (row_max > np.log(tau))
    rows = np.nonzero(keep)[0]
    cols = row_arg[rows]
    match_a[rows] = cols
    match_b[cols] = rows
    pairs = np.stack([rows, cols], axis=1)
    scores = np.exp(log_p[rows, cols])
    return pairs, scores, match_a, match_b


# ---------------------------------------------------------------------------
# Match file I/O
# ---------------------------------------------------------------------------

_MATCH_HEADER = "# glowmatch matches v1"


def write_matches(result: MatchResult, path) -> None:
    """Text format: commented header with run statistics, then `i j score`."""
    lines = [
        _MATCH_HEADER,
        f"# exit_layer {result.exit_layer} num_layers {result.num_layers}",
        f"# num_a {len(result.match_a)} num_b {len(result.match_b)} num_matches {result.num_matches}",
        "# active_counts " + " ".join(f"{a},{b}" for a, b in result.active_counts),
    ]
    for (i, j), s in zip(result.pairs, result.scores):
        lines.append(f"{i} {j} {float(s)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_matches(path) -> MatchResult:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _MATCH_HEADER:
        raise FileFormatError(f"{path}: not a glowmatch match file", offset=0)
    meta: dict[str, str] = {}
    body_start = 0
    for k, ln in enumerate(lines):
        if not ln.startswith("#"):
            body_start = k
            break
        body_start = k + 1
        toks = ln[1:].split()
        for key, val in zip(toks[0::2], toks[1::2]):
            meta.setdefault(key, val)
    try:
        num_a = int(meta["num_a"])
        num_b = int(meta["num_b"])
        exit_layer = int(meta["exit_layer"])
        num_layers = int(meta["num_layers"])
    except (KeyError, ValueError) as exc:
        raise FileFormatError(f"{path}: malformed match header: {exc}") from exc
    active = []
    for tok in lines[3][len("# active_counts"):].split():
        a, b = tok.split(",")
        active.append((int(a), int(b)))
    pairs, scores = [], []
    for ln in lines[body_start:]:
        if not ln:
            continue
        i, j, s = ln.split()
        pairs.append((int(i), int(j)))
        scores.append(float(s))
    pairs_arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    match_a = np.full(num_a, -1, dtype=np.int64)
    match_b = np.full(num_b, -1, dtype=np.int64)
    if len(pairs_arr):
        match_a[pairs_arr[:, 0]] = pairs_arr[:, 1]
        match_b[pairs_arr[:, 1]] = pairs_arr[:, 0]
    return MatchResult(pairs_arr, np.asarray(scores, dtype=np.float64), match_a, match_b,
                       exit_layer=exit_layer, num_layers=num_layers, active_counts=active)
