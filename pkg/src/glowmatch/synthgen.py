"""Image-free synthetic training data: homographies, keypoints, descriptors.

A pair is built from a random homography (sampled by perturbing the four
frame corners, one per image quarter, with convexity enforced), a set of
latent scene points visible in both frames, and per-image outlier points.
Descriptors are unit vectors: covisible points share one latent descriptor
observed under independent additive Gaussian noise, outliers get fresh ones.
Difficulty is controlled by the inlier ratio and the descriptor noise level.

All sampling is a pure function of the numpy Generator handed in, so a seed
fully determines a pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GenerationError, InvalidInput
from .features import FeatureSet
from .geometry import dlt, project
from .supervision import GroundTruth

FRAME = (640, 480)
DESC_DIM = 8
MIN_SEPARATION = 8.0  # px, within each image; keeps geometric labels unambiguous
OUTLIER_CLEARANCE = 6.0  # px symmetric error an outlier must keep from every counterpart
JITTER_RADIUS = 0.5  # px, reprojection jitter of covisible points


@dataclass(frozen=True)
class Difficulty:
    """Geometric warp magnitudes for homography sampling."""

    perspective: float = 0.25  # corner perturbation, fraction of a half-frame
    rotation: float = 0.15  # max |angle| in radians
    translation: float = 0.03  # max shift, fraction of frame size

    def __post_init__(self):
        if not (0.0 <= self.perspective <= 1.0):
            raise InvalidInput(f"perspective must be in [0, 1], got {self.perspective}")
        if self.rotation < 0 or self.translation < 0:
            raise InvalidInput("rotation/translation magnitudes must be non-negative")


@dataclass(frozen=True)
class Preset:
    inlier_ratio: float
    noise: float


PRESETS = {
    "easy": Preset(0.95, 0.10),
    "medium": Preset(0.60, 0.30),
    "hard": Preset(0.30, 0.50),
}


@dataclass
class HomographySample:
    h: np.ndarray  # (3, 3), maps source-frame to target-frame coordinates
    src_quad: np.ndarray  # (4, 2)
    tgt_quad: np.ndarray  # (4, 2)
    attempts: int  # total quad draws including rejections


def _sample_quad(rng: np.random.Generator, frame, difficulty: Difficulty,
                 max_attempts: int) -> tuple[np.ndarray, int]:
    """One corner per image quarter, then a rotation+translation that keeps
    the quad inside the frame; rejection-sampled until convex and in-frame."""
    w, h = frame
    half = np.array([w / 2.0, h / 2.0])
    corners = np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])
    inward = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
    for attempt in range(1, max_attempts + 1):
        u = rng.uniform(0.0, 1.0, size=(4, 2))
        quad = corners + inward * u * half[None, :] * difficulty.perspective
        ang = rng.uniform(-difficulty.rotation, difficulty.rotation)
        shift = rng.uniform(-1.0, 1.0, size=2) * np.array([w, h]) * difficulty.translation
        c, s = np.cos(ang), np.sin(ang)
        rot = np.array([[c, -s], [s, c]])
        center = quad.mean(axis=0)
        quad = (quad - center) @ rot.T + center + shift
        inside = (quad[:, 0] >= 0) & (quad[:, 0] <= w) & (quad[:, 1] >= 0) & (quad[:, 1] <= h)
        if inside.all() and _is_convex(quad):
            return quad, attempt
    raise GenerationError(f"no convex in-frame quad found in {max_attempts} attempts")


def _is_convex(quad: np.ndarray) -> bool:
    crosses = []
    for k in range(4):
        a, b, c = quad[k], quad[(k + 1) % 4], quad[(k + 2) % 4]
        u, v = b - a, c - b
        crosses.append(u[0] * v[1] - u[1] * v[0])
    crosses = np.array(crosses)
    return bool(np.all(crosses > 0) or np.all(crosses < 0))


def sample_homography(rng: np.random.Generator, difficulty: Difficulty = Difficulty(),
                      frame=FRAME, max_attempts: int = 1000) -> HomographySample:
    """Random homography mapping a source corner quad onto a target quad."""
    src, tries_a = _sample_quad(rng, frame, difficulty, max_attempts)
    tgt, tries_b = _sample_quad(rng, frame, difficulty, max_attempts)
    h = dlt(src, tgt)
    return HomographySample(h, src, tgt, tries_a + tries_b)


@dataclass
class SynthPair:
    fs_a: FeatureSet
    fs_b: FeatureSet
    gt: GroundTruth
    meta: dict


def _unit_vectors(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    v = rng.normal(size=(count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _observe(rng: np.random.Generator, latent: np.ndarray, noise: float) -> np.ndarray:
    """Noisy renormalized view of latent descriptors; noise is the RMS
    perturbation norm relative to the unit signal."""
    if len(latent) == 0:
        return latent.copy()
    dim = latent.shape[1]
    eps = rng.normal(size=latent.shape) * (noise / np.sqrt(dim))
    obs = latent + eps
    return obs / np.linalg.norm(obs, axis=1, keepdims=True)


def generate_pair(rng: np.random.Generator, n_points: int, inlier_ratio: float,
                  noise: float, d_in: int = DESC_DIM, frame=FRAME,
                  difficulty: Difficulty = Difficulty(), max_attempts: int = 200) -> SynthPair:
    """Build one fully labeled synthetic pair with n_points per image.

    Exactly ``ceil(inlier_ratio * n_points)`` latent points are covisible;
    outliers are placed so their symmetric reprojection error to every
    counterpart exceeds the unmatchable threshold, which makes the
    construction labels coincide with geometric relabeling.
    """
    if n_points < 8:
        raise InvalidInput(f"need at least 8 points, got {n_points}")
    if not (0.0 < inlier_ratio <= 1.0):
        raise InvalidInput(f"inlier ratio must be in (0, 1], got {inlier_ratio}")
    w, h = frame
    sample = sample_homography(rng, difficulty, frame)
    hm = sample.h
    h_inv = np.linalg.inv(hm)
    n_in = int(np.ceil(inlier_ratio * n_points))
    n_out = n_points - n_in
    margin = JITTER_RADIUS + 0.1

    # Incrementally filled position buffers plus the projections needed for
    # the clearance tests: fwd_a[i] = H(a_i), bwd_b[j] = H^-1(b_j).
    pts_a_arr = np.empty((n_points, 2))
    pts_b_arr = np.empty((n_points, 2))
    fwd_a = np.empty((n_points, 2))
    bwd_b = np.empty((n_points, 2))
    ca = cb = 0

    def _project_one(mat, p):
        q = mat @ np.array([p[0], p[1], 1.0])
        return q[:2] / q[2]

    def _sep_ok(p, buf, count):
        if count == 0:
            return True
        return float(np.min(np.linalg.norm(buf[:count] - p[None, :], axis=1))) >= MIN_SEPARATION

    # Covisible latents: position in A, projected+jittered position in B.
    for _ in range(n_in):
        for attempt in range(max_attempts):
            p = rng.uniform([0, 0], [w, h])
            q = _project_one(hm, p)
            if not (margin <= q[0] <= w - margin and margin <= q[1] <= h - margin):
                continue
            if not (_sep_ok(p, pts_a_arr, ca) and _sep_ok(q, pts_b_arr, cb)):
                continue
            r = JITTER_RADIUS * np.sqrt(rng.uniform())
            ang = rng.uniform(0, 2 * np.pi)
            b = q + r * np.array([np.cos(ang), np.sin(ang)])
            pts_a_arr[ca] = p
            fwd_a[ca] = _project_one(hm, p)
            ca += 1
            pts_b_arr[cb] = b
            bwd_b[cb] = _project_one(h_inv, b)
            cb += 1
            break
        else:
            raise GenerationError("could not place covisible point; frame too crowded")

    # Outliers: independent positions per image, kept geometrically unmatchable.
    for _ in range(n_out):
        for attempt in range(max_attempts):
            p = rng.uniform([0, 0], [w, h])
            if not _sep_ok(p, pts_a_arr, ca):
                continue
            if cb:
                err = 0.5 * (np.linalg.norm(pts_b_arr[:cb] - _project_one(hm, p)[None, :], axis=1)
                             + np.linalg.norm(bwd_b[:cb] - p[None, :], axis=1))
                if err.min() <= OUTLIER_CLEARANCE:
                    continue
            pts_a_arr[ca] = p
            fwd_a[ca] = _project_one(hm, p)
            ca += 1
            break
        else:
            raise GenerationError("could not place outlier in image A")
    for _ in range(n_out):
        for attempt in range(max_attempts):
            q = rng.uniform([0, 0], [w, h])
            if not _sep_ok(q, pts_b_arr, cb):
                continue
            if ca:
                err = 0.5 * (np.linalg.norm(fwd_a[:ca] - q[None, :], axis=1)
                             + np.linalg.norm(pts_a_arr[:ca] - _project_one(h_inv, q)[None, :], axis=1))
                if err.min() <= OUTLIER_CLEARANCE:
                    continue
            pts_b_arr[cb] = q
            bwd_b[cb] = _project_one(h_inv, q)
            cb += 1
            break
        else:
            raise GenerationError("could not place outlier in image B")

    latents = _unit_vectors(rng, n_in, d_in)
    out_a = _unit_vectors(rng, n_out, d_in)
    out_b = _unit_vectors(rng, n_out, d_in)
    desc_a = _observe(rng, np.vstack([latents, out_a]) if n_out else latents, noise)
    desc_b = _observe(rng, np.vstack([latents, out_b]) if n_out else latents, noise)

    perm_a = rng.permutation(n_points)
    perm_b = rng.permutation(n_points)
    inv_a = np.argsort(perm_a)
    inv_b = np.argsort(perm_b)

    fs_a = FeatureSet(frame, pts_a_arr[perm_a], desc_a[perm_a])
    fs_b = FeatureSet(frame, pts_b_arr[perm_b], desc_b[perm_b])
    pairs = np.stack([inv_a[:n_in], inv_b[:n_in]], axis=1)
    unmatch_a = np.sort(inv_a[n_in:])
    unmatch_b = np.sort(inv_b[n_in:])
    gt = GroundTruth(pairs=pairs, unmatch_a=unmatch_a, unmatch_b=unmatch_b, h=hm)
    meta = {
        "n_points": n_points,
        "inlier_ratio": float(inlier_ratio),
        "noise": float(noise),
        "d_in": d_in,
        "quad_attempts": sample.attempts,
    }
    return SynthPair(fs_a, fs_b, gt, meta)


def pair_rng(seed: int, domain: int, index: int) -> np.random.Generator:
    """Stateless per-pair generator: (seed, domain, index) fixes the stream."""
    return np.random.default_rng(np.random.SeedSequence([seed, domain, index]))


def generate_preset_pair(seed: int, domain: int, index: int, n_points: int,
                         preset: str, d_in: int = DESC_DIM) -> SynthPair:
    p = PRESETS[preset]
    rng = pair_rng(seed, domain, index)
    sp = generate_pair(rng, n_points, p.inlier_ratio, p.noise, d_in=d_in)
    sp.meta["preset"] = preset
    sp.meta["seed"] = [seed, domain, index]
    return sp
