"""Adaptive-depth (early exit) and adaptive-width (point pruning) inference.

After every layer but the last, a per-point confidence classifier estimates
whether that point's prediction is already final.  Inference halts once the
confident fraction of all points exceeds ``alpha``; otherwise points that are
confidently unmatchable (high confidence, matchability below ``beta``) are
physically removed from all subsequent computation.  With both mechanisms
disabled the driver runs the exact same operation sequence as the plain
full-depth pass, bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .backbone import ClassifierParams, ModelParams, PairState, init_states, run_layer_states
from .features import FeatureSet
from .head import (AssignmentScores, MatchResult, assignment_scores, extract_matches,
                   matchability, score_matrix, log_assignment, DEFAULT_TAU)
from .numcore import Tensor

DEFAULT_ALPHA = 0.95
DEFAULT_BETA = 0.01


@dataclass
class AdaptiveConfig:
    """Inference-time knobs; defaults reproduce the standard adaptive run."""

    depth_enabled: bool = True
    width_enabled: bool = True
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    tau: float = DEFAULT_TAU
    keep_trace: bool = False

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not (0.0 < self.beta < 1.0):
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")


@dataclass
class LayerRecord:
    """Diagnostics captured for one executed layer."""

    layer: int  # 1-based
    idx_a: np.ndarray
    idx_b: np.ndarray
    states_a: np.ndarray
    states_b: np.ndarray
    confidence_a: np.ndarray | None
    confidence_b: np.ndarray | None
    scores: AssignmentScores | None


@dataclass
class LayerTrace:
    records: list[LayerRecord] = field(default_factory=list)


def exit_threshold(layer: int, num_layers: int) -> float:
    """Confidence threshold, exponentially decayed over depth (1-based layer)."""
    return 0.8 + 0.1 * math.exp(-4.0 * layer / num_layers)


def confidence(x, cls: ClassifierParams) -> nc.Tensor:
    """Per-point confidence that the current prediction is final.

    The classifier reads the states but its training gradients never flow
    back into them, so callers pass detached states during training.
    """
    with nc.flops.phase("classifier"):
        z = nc.reshape(nc.linear(x, cls.w, cls.b), (-1,))
    return nc.sigmoid(z)


def should_exit(conf_a: np.ndarray, conf_b: np.ndarray, pruned_count: int,
                total_points: int, layer: int, num_layers: int, alpha: float) -> bool:
    """Eq.-style halt test: strict > against the decayed threshold and alpha.

    Previously pruned points count as confident — they were removed exactly
    because the classifier was confident about them.
    """
    lam = exit_threshold(layer, num_layers)
    confident = int((conf_a > lam).sum()) + int((conf_b > lam).sum()) + pruned_count
    return confident / total_points > alpha


def unmatchable_mask(conf: np.ndarray, sigma: np.ndarray, layer: int, num_layers: int,
                     beta: float) -> np.ndarray:
    """Points that are confidently unmatchable: c > lambda_layer and sigma < beta."""
    lam = exit_threshold(layer, num_layers)
    return (conf > lam) & (sigma < beta)


def prune_points(state: PairState, drop_a: np.ndarray, drop_b: np.ndarray) -> PairState:
    """Physically compact pruned rows out of both images' states and caches."""
    keep_a, keep_b = ~drop_a, ~drop_b
    return PairState(
        xa=Tensor(state.xa.data[keep_a]),
        xb=Tensor(state.xb.data[keep_b]),
        cache_a=state.cache_a.take(keep_a),
        cache_b=state.cache_b.take(keep_b),
        idx_a=state.idx_a[keep_a],
        idx_b=state.idx_b[keep_b],
        n_orig_a=state.n_orig_a,
        n_orig_b=state.n_orig_b,
    )


def _empty_result(m: int, n: int, num_layers: int) -> MatchResult:
    return MatchResult(
        pairs=np.zeros((0, 2), dtype=np.int64),
        scores=np.zeros(0),
        match_a=np.full(m, -1, dtype=np.int64),
        match_b=np.full(n, -1, dtype=np.int64),
        exit_layer=0,
        num_layers=num_layers,
        active_counts=[],
    )


def adaptive_forward(fs_a: FeatureSet, fs_b: FeatureSet, params: ModelParams,
                     config: AdaptiveConfig | None = None) -> tuple[MatchResult, LayerTrace | None]:
    """Run the matcher end to end; indices in the result are original ones."""
    config = config or AdaptiveConfig()
    trace = LayerTrace() if config.keep_trace else None
    num_layers = params.layers_count
    m, n = fs_a.n, fs_b.n
    if m == 0 or n == 0:
        return _empty_result(m, n, num_layers), trace

    state = init_states(fs_a, fs_b, params)
    total = m + n
    prune_layer_a = np.full(m, -1, dtype=np.int64)
    prune_layer_b = np.full(n, -1, dtype=np.int64)
    prune_sigma_a = np.full(m, np.nan)
    prune_sigma_b = np.full(n, np.nan)
    active_counts: list[tuple[int, int]] = []
    exit_layer = num_layers

    for i in range(num_layers):
        layer = i + 1
        lp = params.layers[i]
        active_counts.append((len(state.idx_a), len(state.idx_b)))
        xa, xb = run_layer_states(state.xa, state.xb, state.cache_a, state.cache_b, lp, params.h)
        state = PairState(xa, xb, state.cache_a, state.cache_b,
                          state.idx_a, state.idx_b, m, n)
        is_last = layer == num_layers
        need_conf = (config.depth_enabled or config.width_enabled or config.keep_trace) and not is_last
        conf_a = conf_b = None
        if need_conf and lp.classifier is not None:
            conf_a = confidence(state.xa, lp.classifier).data
            conf_b = confidence(state.xb, lp.classifier).data
        if trace is not None:
            trace.records.append(LayerRecord(
                layer=layer, idx_a=state.idx_a.copy(), idx_b=state.idx_b.copy(),
                states_a=state.xa.data.copy(), states_b=state.xb.data.copy(),
                confidence_a=None if conf_a is None else conf_a.copy(),
                confidence_b=None if conf_b is None else conf_b.copy(),
                scores=assignment_scores(state.xa, state.xb, lp.head),
            ))
        if is_last:
            break
        pruned_so_far = total - len(state.idx_a) - len(state.idx_b)
        if config.depth_enabled and should_exit(conf_a, conf_b, pruned_so_far, total,
                                                layer, num_layers, config.alpha):
            exit_layer = layer
            break
        if config.width_enabled and conf_a is not None:
            with nc.flops.phase("classifier"):  # adaptivity-control compute
                sigma_a = matchability(state.xa, lp.head).data
                sigma_b = matchability(state.xb, lp.head).data
            drop_a = unmatchable_mask(conf_a, sigma_a, layer, num_layers, config.beta)
            drop_b = unmatchable_mask(conf_b, sigma_b, layer, num_layers, config.beta)
            if drop_a.any() or drop_b.any():
                for orig, sig in zip(state.idx_a[drop_a], sigma_a[drop_a]):
                    prune_layer_a[orig] = layer
                    prune_sigma_a[orig] = sig
                for orig, sig in zip(state.idx_b[drop_b], sigma_b[drop_b]):
                    prune_layer_b[orig] = layer
                    prune_sigma_b[orig] = sig
                state = prune_points(state, drop_a, drop_b)
                if len(state.idx_a) == 0 or len(state.idx_b) == 0:
                    exit_layer = layer
                    break

    result = _finalize(state, params, config, exit_layer, num_layers, active_counts,
                       prune_layer_a, prune_layer_b, prune_sigma_a, prune_sigma_b)
    return result, trace


def _finalize(state: PairState, params: ModelParams, config: AdaptiveConfig, exit_layer: int,
              num_layers: int, active_counts, prune_layer_a, prune_layer_b,
              prune_sigma_a, prune_sigma_b) -> MatchResult:
    """Head at the exit layer on surviving states; map back to original ids."""
    m, n = state.n_orig_a, state.n_orig_b
    match_a = np.full(m, -1, dtype=np.int64)
    match_b = np.full(n, -1, dtype=np.int64)
    if len(state.idx_a) and len(state.idx_b):
        hp = params.layers[exit_layer - 1].head
        s, za, zb = score_matrix(state.xa, state.xb, hp)
        log_p = log_assignment(s, za, zb).data
        pairs_c, scores, _, _ = extract_matches(log_p, config.tau)
        rows = state.idx_a[pairs_c[:, 0]]
        cols = state.idx_b[pairs_c[:, 1]]
        match_a[rows] = cols
        match_b[cols] = rows
        pairs = np.stack([rows, cols], axis=1)
    else:
        pairs = np.zeros((0, 2), dtype=np.int64)
        scores = np.zeros(0)
    return MatchResult(
        pairs=pairs, scores=scores, match_a=match_a, match_b=match_b,
        exit_layer=exit_layer, num_layers=num_layers, active_counts=active_counts,
        prune_layer_a=prune_layer_a, prune_layer_b=prune_layer_b,
        prune_sigma_a=prune_sigma_a, prune_sigma_b=prune_sigma_b,
    )


def reference_forward(fs_a: FeatureSet, fs_b: FeatureSet, params: ModelParams,
                      tau: float = DEFAULT_TAU) -> MatchResult:
    """Straight-line full-depth pass used as the adaptivity-off oracle."""
    m, n = fs_a.n, fs_b.n
    num_layers = params.layers_count
    if m == 0 or n == 0:
        return _empty_result(m, n, num_layers)
    state = init_states(fs_a, fs_b, params)
    xa, xb = state.xa, state.xb
    counts = []
    for lp in params.layers:
        counts.append((m, n))
        xa, xb = run_layer_states(xa, xb, state.cache_a, state.cache_b, lp, params.h)
    hp = params.layers[-1].head
    s, za, zb = score_matrix(xa, xb, hp)
    log_p = log_assignment(s, za, zb).data
    pairs, scores, match_a, match_b = extract_matches(log_p, tau)
    return MatchResult(pairs=pairs, scores=scores, match_a=match_a, match_b=match_b,
                       exit_layer=num_layers, num_layers=num_layers, active_counts=counts,
                       prune_layer_a=np.full(m, -1, dtype=np.int64),
                       prune_layer_b=np.full(n, -1, dtype=np.int64),
                       prune_sigma_a=np.full(m, np.nan), prune_sigma_b=np.full(n, np.nan))
