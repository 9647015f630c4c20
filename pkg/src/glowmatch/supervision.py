"""Ground-truth labeling, training losses, and the two-stage training loop.

Stage 1 trains the backbone and heads with the deep-supervised assignment
loss (negative log-likelihood of ground-truth pairs at every layer plus
matchability penalties on unmatchable points).  Stage 2 freezes everything
and trains only the per-layer confidence classifiers to predict whether each
layer's match decision already agrees with the final layer's.

Checkpoints are weights files with an appended optimizer-state section, so a
resumed run continues bit-exactly where the interrupted one stopped.
"""

from __future__ import annotations

import csv
import logging
import struct
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import numcore as nc
from .backbone import (ModelParams, forward_layers, init_model, init_states,
                       _parse_model, model_to_bytes)
from .errors import FileFormatError, InvalidInput, TrainingDiverged
from .geometry import match_pr, symmetric_errors
from .head import extract_matches, log_assignment, score_matrix
from .numcore import Tape, Tensor

logger = logging.getLogger("glowmatch")

INLIER_RADIUS = 3.0  # px: symmetric reprojection error below this is a match
OUTLIER_RADIUS = 5.0  # px: error above this against everything marks a point unmatchable

# Domain codes for stateless per-pair seeding.
DOMAIN_TRAIN = 0
DOMAIN_VAL = 1
DOMAIN_TEST = 2
DOMAIN_STAGE2 = 3
DOMAIN_BENCH = 4


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------


@dataclass
class GroundTruth:
    """Inlier pairs and unmatchable points for one image pair."""

    pairs: np.ndarray  # (K, 2) indices into A and B
    unmatch_a: np.ndarray  # (ka,) indices into A
    unmatch_b: np.ndarray  # (kb,)
    h: np.ndarray  # (3, 3), normalized so h[2, 2] == 1 when finite

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.unmatch_a = np.asarray(self.unmatch_a, dtype=np.int64).reshape(-1)
        self.unmatch_b = np.asarray(self.unmatch_b, dtype=np.int64).reshape(-1)
        self.h = np.asarray(self.h, dtype=np.float64).reshape(3, 3)
        if abs(self.h[2, 2]) > 1e-12:
            self.h = self.h / self.h[2, 2]
        if len(np.unique(self.pairs[:, 0])) != len(self.pairs) or \
           len(np.unique(self.pairs[:, 1])) != len(self.pairs):
            raise InvalidInput("ground-truth pairing is not one-to-one")
        if np.intersect1d(self.pairs[:, 0], self.unmatch_a).size or \
           np.intersect1d(self.pairs[:, 1], self.unmatch_b).size:
            raise InvalidInput("a point cannot be both matched and unmatchable")


def label_pairs(pts_a: np.ndarray, pts_b: np.ndarray, h: np.ndarray,
                r_in: float = INLIER_RADIUS, r_out: float = OUTLIER_RADIUS) -> GroundTruth:
    """Geometric labeling under a known homography.

    Inliers are mutually-closest pairs with symmetric reprojection error
    below ``r_in``; a point whose error to every counterpart exceeds
    ``r_out`` is unmatchable; points in between carry no label.
    """
    h = np.asarray(h, dtype=np.float64)
    if abs(np.linalg.det(h)) < 1e-12:
        raise InvalidInput("homography is singular")
    m, n = len(pts_a), len(pts_b)
    if m == 0 or n == 0:
        return GroundTruth(np.zeros((0, 2), dtype=np.int64),
                           np.arange(m), np.arange(n), h)
    err = symmetric_errors(h, pts_a, pts_b)
    row_arg = err.argmin(axis=1)
    col_arg = err.argmin(axis=0)
    rows = np.arange(m)
    mutual = col_arg[row_arg] == rows
    close = err[rows, row_arg] < r_in
    sel = mutual & close
    pairs = np.stack([rows[sel], row_arg[sel]], axis=1)
    unmatch_a = np.nonzero(err.min(axis=1) > r_out)[0]
    unmatch_b = np.nonzero(err.min(axis=0) > r_out)[0]
    return GroundTruth(pairs, unmatch_a, unmatch_b, h)


_GT_HEADER = "# glowmatch gt v1"


def write_ground_truth(gt: GroundTruth, path) -> None:
    """Text format: homography (9 floats row-major), inlier pairs, then the
    unmatchable index lists for each image."""
    lines = [_GT_HEADER, "H " + " ".join(repr(float(v)) for v in gt.h.reshape(-1))]
    lines.append(f"M {len(gt.pairs)}")
    lines.extend(f"{i} {j}" for i, j in gt.pairs)
    lines.append(f"UA {len(gt.unmatch_a)}")
    lines.append(" ".join(str(i) for i in gt.unmatch_a))
    lines.append(f"UB {len(gt.unmatch_b)}")
    lines.append(" ".join(str(i) for i in gt.unmatch_b))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ground_truth(path) -> GroundTruth:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _GT_HEADER:
        raise FileFormatError(f"{path}: not a glowmatch ground-truth file", offset=0)
    try:
        hvals = [float(v) for v in lines[1].split()[1:]]
        h = np.asarray(hvals, dtype=np.float64).reshape(3, 3)
        k = int(lines[2].split()[1])
        pairs = [tuple(int(v) for v in lines[3 + i].split()) for i in range(k)]
        pos = 3 + k
        ka = int(lines[pos].split()[1])
        ua = [int(v) for v in lines[pos + 1].split()] if ka else []
        kb = int(lines[pos + 2].split()[1])
        ub = [int(v) for v in lines[pos + 3].split()] if kb else []
        if len(ua) != ka or len(ub) != kb:
            raise ValueError("unmatchable count mismatch")
    except (ValueError, IndexError) as exc:
        raise FileFormatError(f"{path}: malformed ground-truth file: {exc}") from exc
    return GroundTruth(np.asarray(pairs, dtype=np.int64).reshape(-1, 2),
                       np.asarray(ua, dtype=np.int64), np.asarray(ub, dtype=np.int64), h)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def layer_head_outputs(per_layer_states, params: ModelParams):
    """Assignment head applied to every layer's states (tape-connected)."""
    outs = []
    for (xa, xb), lp in zip(per_layer_states, params.layers):
        s, za, zb = score_matrix(xa, xb, lp.head)
        outs.append((log_assignment(s, za, zb), za, zb))
    return outs


def assignment_loss(per_layer, gt: GroundTruth):
    """Deep-supervised correspondence loss, averaged over layers.

    Per layer: mean log-assignment over ground-truth pairs plus half the mean
    log(1 - sigma) over each image's unmatchable set; empty sets contribute
    zero.  Returns ``(loss, per_layer_values)`` or ``(None, [])`` when there
    is no supervision signal at all.
    """
    mi, mj = gt.pairs[:, 0], gt.pairs[:, 1]
    ua, ub = gt.unmatch_a, gt.unmatch_b
    if len(mi) == 0 and len(ua) == 0 and len(ub) == 0:
        return None, []
    num_layers = len(per_layer)
    total = None
    per_vals = []
    for log_p, za, zb in per_layer:
        term = None
        if len(mi):
            term = nc.mean_all(nc.take_pairs(log_p, mi, mj))
        if len(ua):
            neg_a = nc.mul(nc.mean_all(nc.log_sigmoid(nc.mul(nc.take_rows(za, ua), -1.0))), 0.5)
            term = neg_a if term is None else nc.add(term, neg_a)
        if len(ub):
            neg_b = nc.mul(nc.mean_all(nc.log_sigmoid(nc.mul(nc.take_rows(zb, ub), -1.0))), 0.5)
            term = neg_b if term is None else nc.add(term, neg_b)
        layer_loss = nc.mul(term, -1.0)
        per_vals.append(float(layer_loss.data))
        total = layer_loss if total is None else nc.add(total, layer_loss)
    return nc.mul(total, 1.0 / num_layers), per_vals


def layer_decisions(per_layer_logp: list[np.ndarray], tau: float):
    """Per-layer match decisions (index into the other image, or -1)."""
    dec_a, dec_b = [], []
    for log_p in per_layer_logp:
        _, _, ma, mb = extract_matches(log_p, tau)
        dec_a.append(ma)
        dec_b.append(mb)
    return dec_a, dec_b


def classifier_labels(dec_a: list[np.ndarray], dec_b: list[np.ndarray]):
    """1 where a layer's decision equals the final layer's, per point."""
    final_a, final_b = dec_a[-1], dec_b[-1]
    labels_a = [(d == final_a).astype(np.float64) for d in dec_a[:-1]]
    labels_b = [(d == final_b).astype(np.float64) for d in dec_b[:-1]]
    return labels_a, labels_b


def classifier_loss(per_layer_states_np, labels_a, labels_b, params: ModelParams):
    """Mean binary cross-entropy of the confidence classifiers, layers 1..L-1.

    States arrive as plain arrays (detached): classifier gradients must not
    flow into the backbone.
    """
    total = None
    count = 0
    for i, ((xa, xb), ya, yb) in enumerate(zip(per_layer_states_np, labels_a, labels_b)):
        cls = params.layers[i].classifier
        for x, y in ((xa, ya), (xb, yb)):
            z = nc.reshape(nc.linear(Tensor(np.asarray(x)), cls.w, cls.b), (-1,))
            y_t = np.asarray(y, dtype=x.dtype if hasattr(x, "dtype") else np.float64)
            bce = nc.mul(nc.add(nc.mul(nc.log_sigmoid(z), y_t),
                                nc.mul(nc.log_sigmoid(nc.mul(z, -1.0)), 1.0 - y_t)), -1.0)
            s = nc.sum_all(bce)
            total = s if total is None else nc.add(total, s)
            count += len(y)
    return nc.mul(total, 1.0 / count)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Per-parameter moment-scaled gradient steps with bias correction."""

    def __init__(self, names: list[str], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.names = list(names)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def ensure_state(self, tensors: dict[str, Tensor]):
        for name in self.names:
            if name not in self.m:
                self.m[name] = np.zeros_like(tensors[name].data)
                self.v[name] = np.zeros_like(tensors[name].data)

    def step(self, tensors: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float):
        self.ensure_state(tensors)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in self.names:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            tensors[name].data = tensors[name].data - lr * update.astype(tensors[name].dtype)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(np.sum(np.square(g.astype(np.float64))))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for name, g in grads.items():
            if g is not None:
                grads[name] = g * scale
    return norm


# ---------------------------------------------------------------------------
# Training configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 0
    layers: int = 5
    d: int = 64
    h: int = 4
    d_in: int = 8
    n_points: int = 512
    train_pairs: int = 20000
    stage2_pairs: int = 4000
    batch: int = 8
    lr: float = 4e-4
    lr_stage2: float = 1e-3
    warmup_steps: int = 50
    decay_start: int = 1200
    decay_gamma: float = 0.85
    decay_interval: int = 250
    clip_norm: float = 10.0
    inlier_ratio_range: tuple[float, float] = (0.3, 0.95)
    noise_range: tuple[float, float] = (0.1, 0.5)
    tau: float = 0.1
    dtype: str = "float32"
    eval_every: int = 250
    eval_pairs: int = 32
    checkpoint_every: int = 500
    jobs: int = 1

    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def stage1_steps(self) -> int:
        return self.train_pairs // self.batch

    @property
    def stage2_steps(self) -> int:
        return self.stage2_pairs // self.batch


def make_train_pair(cfg: TrainConfig, domain: int, index: int):
    """One training pair with difficulty sampled uniformly over both axes."""
    from .synthgen import generate_pair, pair_rng

    rng = pair_rng(cfg.seed, domain, index)
    lo, hi = cfg.inlier_ratio_range
    ir = rng.uniform(lo, hi)
    nlo, nhi = cfg.noise_range
    noise = rng.uniform(nlo, nhi)
    return generate_pair(rng, cfg.n_points, ir, noise, d_in=cfg.d_in)


def make_eval_pair(cfg: TrainConfig, domain: int, index: int, preset: str = "medium"):
    from .synthgen import generate_preset_pair

    return generate_preset_pair(cfg.seed, domain, index, cfg.n_points, preset, d_in=cfg.d_in)


# ---------------------------------------------------------------------------
# Gradient computation
# ---------------------------------------------------------------------------


def stage1_pair_gradients(params: ModelParams, pair, cfg: TrainConfig):
    """Loss and parameter gradients of the assignment loss for one pair."""
    tensors = params.tensor_dict()
    with Tape() as tape:
        state = init_states(pair.fs_a, pair.fs_b, params)
        per_layer = forward_layers(state, params)
        heads = layer_head_outputs(per_layer, params)
        loss, per_vals = assignment_loss(heads, pair.gt)
        if loss is None:
            logger.warning("pair with no supervision labels skipped")
            return None, None, []
        tape.backward(loss)
    grads = {}
    for name, t in tensors.items():
        if t.grad is not None:
            grads[name] = t.grad
            t.grad = None
    return float(loss.data), grads, per_vals


def stage2_pair_gradients(params: ModelParams, pair, cfg: TrainConfig):
    """Confidence-classifier BCE gradients for one pair (backbone frozen)."""
    state = init_states(pair.fs_a, pair.fs_b, params)
    per_layer = forward_layers(state, params)
    logps = []
    for (xa, xb), lp in zip(per_layer, params.layers):
        s, za, zb = score_matrix(xa, xb, lp.head)
        logps.append(log_assignment(s, za, zb).data)
    dec_a, dec_b = layer_decisions(logps, cfg.tau)
    labels_a, labels_b = classifier_labels(dec_a, dec_b)
    states_np = [(xa.data, xb.data) for xa, xb in per_layer[:-1]]
    tensors = params.tensor_dict()
    with Tape() as tape:
        loss = classifier_loss(states_np, labels_a, labels_b, params)
        tape.backward(loss)
    grads = {}
    for name, t in tensors.items():
        if t.grad is not None:
            grads[name] = t.grad
            t.grad = None
    return float(loss.data), grads, []


_WORKER_CFG: TrainConfig | None = None


def _pool_init(cfg_dict: dict):
    global _WORKER_CFG
    _WORKER_CFG = TrainConfig(**cfg_dict)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(1)
    except Exception:
        pass


def _pool_pair_grads(args):
    blob, stage, domain, index = args
    cfg = _WORKER_CFG
    params, _ = _parse_model(blob)
    if stage == 1:
        pair = make_train_pair(cfg, domain, index)
        return stage1_pair_gradients(params, pair, cfg)
    pair = make_train_pair(cfg, domain, index)
    return stage2_pair_gradients(params, pair, cfg)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"GLCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, opt: Adam, stage: int, step: int, path) -> None:
    """Weights file plus an appended optimizer/progress section.

    Moments are stored for every parameter in serialization order; groups the
    optimizer does not own are written as zeros (their true Adam state).
    """
    blob = model_to_bytes(params)
    opt.ensure_state({n: t for n, t in params.named_tensors() if n in opt.names})
    dtype = np.dtype(params.dtype).newbyteorder("<")
    ext = struct.pack("<IIQQ", CHECKPOINT_VERSION, stage, step, opt.t)
    zeros = {n: np.zeros_like(t.data) for n, t in params.named_tensors() if n not in opt.m}
    body = b"".join(np.ascontiguousarray(opt.m.get(n, zeros.get(n)), dtype=dtype).tobytes()
                    + np.ascontiguousarray(opt.v.get(n, zeros.get(n)), dtype=dtype).tobytes()
                    for n, _ in params.named_tensors())
    ext += body
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(CHECKPOINT_MAGIC)
        fh.write(ext)
        fh.write(struct.pack("<I", zlib.crc32(ext) & 0xFFFFFFFF))


def load_checkpoint(path) -> tuple[ModelParams, dict, int, int]:
    """Returns (params, optimizer state dict, stage, step)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    params, offset = _parse_model(raw)
    if raw[offset:offset + 4] != CHECKPOINT_MAGIC:
        raise FileFormatError("no checkpoint section after weights", offset=offset)
    offset += 4
    version, stage, step, adam_t = struct.unpack("<IIQQ", raw[offset:offset + 24])
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(f"unsupported checkpoint version {version}", offset=offset)
    body_start = offset
    offset += 24
    dtype = np.dtype(params.dtype)
    m, v = {}, {}
    names = [n for n, _ in params.named_tensors()]
    tensors = params.tensor_dict()
    for n in names:
        size = tensors[n].data.size
        nbytes = size * dtype.itemsize
        m[n] = np.frombuffer(raw, dtype.newbyteorder("<"), count=size, offset=offset).reshape(
            tensors[n].data.shape).astype(dtype)
        offset += nbytes
        v[n] = np.frombuffer(raw, dtype.newbyteorder("<"), count=size, offset=offset).reshape(
            tensors[n].data.shape).astype(dtype)
        offset += nbytes
    (crc_stored,) = struct.unpack("<I", raw[offset:offset + 4])
    if crc_stored != (zlib.crc32(raw[body_start:offset]) & 0xFFFFFFFF):
        raise FileFormatError("checkpoint checksum mismatch", offset=offset)
    return params, {"m": m, "v": v, "t": adam_t}, stage, step


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------


def final_layer_matches(params: ModelParams, pair, tau: float):
    """Full-depth forward plus extraction at the last layer (no adaptivity)."""
    state = init_states(pair.fs_a, pair.fs_b, params)
    per_layer = forward_layers(state, params)
    xa, xb = per_layer[-1]
    s, za, zb = score_matrix(xa, xb, params.layers[-1].head)
    log_p = log_assignment(s, za, zb).data
    return extract_matches(log_p, tau)


def evaluate_pr(params: ModelParams, cfg: TrainConfig, n_pairs: int,
                domain: int = DOMAIN_VAL, preset: str = "medium") -> tuple[float, float]:
    """Mean precision/recall at the final layer over held-out pairs."""
    ps, rs = [], []
    for k in range(n_pairs):
        pair = make_eval_pair(cfg, domain, k, preset)
        pairs, _, _, _ = extract_matches_logp(params, pair, cfg.tau)
        pr = match_pr(pairs, pair.gt, pair.fs_a.points, pair.fs_b.points)
        ps.append(pr.precision)
        rs.append(pr.recall)
    return float(np.mean(ps)), float(np.mean(rs))


def extract_matches_logp(params, pair, tau):
    return final_layer_matches(params, pair, tau)


def heldout_layer_terms(params: ModelParams, cfg: TrainConfig, n_pairs: int,
                        domain: int = DOMAIN_VAL, preset: str = "medium") -> np.ndarray:
    """Mean per-layer assignment-loss terms on held-out pairs (no gradients)."""
    acc = np.zeros(params.layers_count)
    for k in range(n_pairs):
        pair = make_eval_pair(cfg, domain, k, preset)
        state = init_states(pair.fs_a, pair.fs_b, params)
        per_layer = forward_layers(state, params)
        heads = layer_head_outputs(per_layer, params)
        _, per_vals = assignment_loss(heads, pair.gt)
        acc += np.asarray(per_vals)
    return acc / n_pairs


def mean_exit_layer(params: ModelParams, cfg: TrainConfig, n_pairs: int,
                    domain: int = DOMAIN_VAL, preset: str = "medium") -> float:
    from .adaptive import AdaptiveConfig, adaptive_forward

    layers = []
    for k in range(n_pairs):
        pair = make_eval_pair(cfg, domain, k, preset)
        result, _ = adaptive_forward(pair.fs_a, pair.fs_b, params, AdaptiveConfig(tau=cfg.tau))
        layers.append(result.exit_layer)
    return float(np.mean(layers))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    metrics_path: str
    checkpoint_path: str
    history: list[dict] = field(default_factory=list)


def _lr_at(cfg: TrainConfig, step: int, stage: int) -> float:
    base = cfg.lr if stage == 1 else cfg.lr_stage2
    warm = min(1.0, (step + 1) / max(1, cfg.warmup_steps)) if stage == 1 else 1.0
    decay = 1.0
    if stage == 1 and step > cfg.decay_start:
        decay = cfg.decay_gamma ** ((step - cfg.decay_start) / cfg.decay_interval)
    return base * warm * decay


def _stage_param_names(params: ModelParams, stage: int) -> list[str]:
    names = [n for n, _ in params.named_tensors()]
    if stage == 1:
        return [n for n in names if ".cls." not in n]
    return [n for n in names if ".cls." in n]


def train(cfg: TrainConfig, out_dir, resume: str | None = None,
          progress=None) -> TrainResult:
    """Two-stage training; emits metrics CSV and resumable checkpoints."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    ckpt_path = out_dir / "checkpoint.glwt"

    if resume is not None:
        params, opt_state, stage, step = load_checkpoint(resume)
        if params.dtype != cfg.np_dtype():
            raise InvalidInput(
                f"checkpoint dtype {params.dtype} != configured {cfg.dtype}")
        opt = Adam(_stage_param_names(params, stage))
        opt.ensure_state(params.tensor_dict())
        opt.m.update(opt_state["m"])
        opt.v.update(opt_state["v"])
        opt.t = opt_state["t"]
    else:
        params = init_model(np.random.default_rng(cfg.seed), cfg.layers, cfg.d, cfg.h,
                            cfg.d_in, dtype=cfg.np_dtype())
        stage, step = 1, 0
        opt = Adam(_stage_param_names(params, 1))
        if not metrics_path.exists():
            with open(metrics_path, "w", newline="") as fh:
                csv.writer(fh).writerow(
                    ["epoch", "stage", "loss", "precision", "recall", "mean_exit_layer"])

    pool = None
    if cfg.jobs > 1:
        import multiprocessing as mp

        pool = mp.get_context("fork").Pool(cfg.jobs, _pool_init, (asdict(cfg),))

    history: list[dict] = []
    try:
        if stage == 1:
            step = _run_stage(params, opt, cfg, stage=1, start_step=step,
                              total_steps=cfg.stage1_steps, pool=pool,
                              metrics_path=metrics_path, ckpt_path=ckpt_path,
                              history=history, progress=progress)
            stage = 2
            step = 0
            opt = Adam(_stage_param_names(params, 2))
            save_checkpoint(params, opt, stage, step, ckpt_path)
        _run_stage(params, opt, cfg, stage=2, start_step=step,
                   total_steps=cfg.stage2_steps, pool=pool,
                   metrics_path=metrics_path, ckpt_path=ckpt_path,
                   history=history, progress=progress)
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    save_checkpoint(params, opt, 2, cfg.stage2_steps, ckpt_path)
    return TrainResult(params, str(metrics_path), str(ckpt_path), history)


def _run_stage(params, opt, cfg, stage, start_step, total_steps, pool,
               metrics_path, ckpt_path, history, progress):
    domain = DOMAIN_TRAIN if stage == 1 else DOMAIN_STAGE2
    grad_fn = stage1_pair_gradients if stage == 1 else stage2_pair_gradients
    for step in range(start_step, total_steps):
        indices = [step * cfg.batch + k for k in range(cfg.batch)]
        results = []
        if pool is not None:
            blob = model_to_bytes(params)
            results = pool.map(_pool_pair_grads,
                               [(blob, stage, domain, i) for i in indices])
        else:
            for i in indices:
                pair = make_train_pair(cfg, domain, i)
                results.append(grad_fn(params, pair, cfg))
        acc: dict[str, np.ndarray] = {}
        losses = []
        for loss_val, grads, _ in results:
            if loss_val is None:
                continue
            losses.append(loss_val)
            for name, g in grads.items():
                if name in acc:
                    acc[name] += g
                else:
                    acc[name] = g.copy()
        if not losses:
            continue
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            diag = str(ckpt_path) + ".diverged"
            save_checkpoint(params, opt, stage, step, diag)
            raise TrainingDiverged(
                f"non-finite loss {mean_loss} at stage {stage} step {step}", diag)
        inv_batch = 1.0 / len(losses)
        for name in acc:
            acc[name] *= inv_batch
        norm = clip_gradients(acc, cfg.clip_norm)
        if not np.isfinite(norm):
            diag = str(ckpt_path) + ".diverged"
            save_checkpoint(params, opt, stage, step, diag)
            raise TrainingDiverged(
                f"non-finite gradient norm at stage {stage} step {step}", diag)
        opt.step(params.tensor_dict(), acc, _lr_at(cfg, step, stage))

        done = step + 1
        if done % cfg.checkpoint_every == 0 or done == total_steps:
            save_checkpoint(params, opt, stage, done, ckpt_path)
        if done % cfg.eval_every == 0 or done == total_steps:
            precision, recall = evaluate_pr(params, cfg, cfg.eval_pairs)
            mel = mean_exit_layer(params, cfg, min(cfg.eval_pairs, 16)) if stage == 2 \
                else float(params.layers_count)
            row = {"epoch": done // cfg.eval_every, "stage": stage, "step": done,
                   "loss": mean_loss, "precision": precision, "recall": recall,
                   "mean_exit_layer": mel}
            history.append(row)
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh).writerow([row["epoch"], stage, repr(mean_loss),
                                         repr(precision), repr(recall), repr(mel)])
            if progress is not None:
                progress(row)
    return total_steps
