"""Command-line entry points: gen, train, match, eval, bench.

Every command reads an optional flat key=value config file (``#`` comments),
applies command-line overrides on top, rejects unknown keys, and logs the
fully resolved configuration.  The ``GLOW_SEED`` environment variable
overrides the seed everywhere.  Exit codes: 0 success, 2 bad input or
configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import numcore as nc
from .adaptive import AdaptiveConfig, adaptive_forward
from .backbone import analytic_attention_flops, init_model, load_model
from .errors import GlowError, InvalidInput, TrainingDiverged, GenerationError
from .features import read_features, write_features
from .geometry import (EvalReport, corner_error, dlt, error_auc, match_pr, ransac_h)
from .head import read_matches, write_matches
from .supervision import (TrainConfig, read_ground_truth, train, write_ground_truth)
from .synthgen import PRESETS, generate_pair, generate_preset_pair, pair_rng

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUNTIME = 3

NETWORK_PHASES = ("self_attention", "cross_attention", "head", "projection", "update_mlp")


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------


def parse_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(open(path), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInput(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def resolve_config(args: argparse.Namespace, known: dict[str, type]) -> dict:
    """defaults < config file < CLI flags < GLOW_SEED, with key validation."""
    resolved: dict = {}
    if getattr(args, "config", None):
        for key, val in parse_config_file(args.config).items():
            if key not in known:
                raise InvalidInput(f"unknown config key {key!r} (known: {sorted(known)})")
            resolved[key] = _coerce(val, known[key], key)
    for key in known:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    env_seed = os.environ.get("GLOW_SEED")
    if env_seed is not None and "seed" in known:
        resolved["seed"] = int(env_seed)
    return resolved


def _coerce(val: str, typ: type, key: str):
    try:
        if typ is bool:
            if val.lower() in ("1", "true", "yes", "on"):
                return True
            if val.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(val)
        return typ(val)
    except ValueError as exc:
        raise InvalidInput(f"config key {key!r}: cannot parse {val!r} as {typ.__name__}") from exc


def log_config(cmd: str, resolved: dict, out_dir: Path | None = None):
    lines = [f"command = {cmd}"] + [f"{k} = {resolved[k]}" for k in sorted(resolved)]
    print("# resolved configuration")
    for line in lines:
        print(line)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out_dir / "config.resolved", "\n".join(lines) + "\n")


def atomic_write_text(path, text: str):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_file(path, writer):
    tmp = Path(str(path) + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

GEN_KEYS = {"out": str, "pairs": int, "points": int, "preset": str, "inlier_ratio": float,
            "noise": float, "d_in": int, "seed": int, "domain": int}


def cmd_gen(args) -> int:
    cfg = {"pairs": 10, "points": 512, "preset": "medium", "d_in": 8, "seed": 0, "domain": 2}
    cfg.update(resolve_config(args, GEN_KEYS))
    if "out" not in cfg:
        raise InvalidInput("gen requires out=<directory>")
    use_preset = "inlier_ratio" not in cfg and "noise" not in cfg
    if not use_preset and ("inlier_ratio" not in cfg or "noise" not in cfg):
        raise InvalidInput("set both inlier_ratio and noise, or neither (preset used)")
    if use_preset and cfg["preset"] not in PRESETS:
        raise InvalidInput(f"unknown preset {cfg['preset']!r} (choose from {sorted(PRESETS)})")
    out = Path(cfg["out"])
    pairs_dir = out / "pairs"
    pairs_dir.mkdir(parents=True, exist_ok=True)
    log_config("gen", cfg, out)
    rows = []
    for idx in range(cfg["pairs"]):
        if use_preset:
            sp = generate_preset_pair(cfg["seed"], cfg["domain"], idx, cfg["points"],
                                      cfg["preset"], d_in=cfg["d_in"])
        else:
            rng = pair_rng(cfg["seed"], cfg["domain"], idx)
            sp = generate_pair(rng, cfg["points"], cfg["inlier_ratio"], cfg["noise"],
                               d_in=cfg["d_in"])
        name = f"{idx:06d}"
        _atomic_file(pairs_dir / f"{name}_a.glfm", lambda p: write_features(sp.fs_a, p))
        _atomic_file(pairs_dir / f"{name}_b.glfm", lambda p: write_features(sp.fs_b, p))
        _atomic_file(pairs_dir / f"{name}.gt", lambda p: write_ground_truth(sp.gt, p))
        rows.append(f"{idx} pairs/{name}_a.glfm pairs/{name}_b.glfm pairs/{name}.gt")
    header = (f"# glowmatch manifest v1\n# seed {cfg['seed']} domain {cfg['domain']} "
              f"points {cfg['points']} d_in {cfg['d_in']} pairs {cfg['pairs']}\n")
    atomic_write_text(out / "manifest.txt", header + "\n".join(rows) + ("\n" if rows else ""))
    print(f"wrote {cfg['pairs']} pairs to {out}")
    return EXIT_OK


def read_manifest(path) -> list[tuple[int, Path, Path, Path]]:
    base = Path(path).parent
    rows = []
    for raw in open(path):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        idx, fa, fb, gt = line.split()
        rows.append((int(idx), base / fa, base / fb, base / gt))
    return rows


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_KEYS = {"out": str, "seed": int, "layers": int, "d": int, "h": int, "d_in": int,
              "points": int, "train_pairs": int, "stage2_pairs": int, "batch": int,
              "lr": float, "lr_stage2": float, "warmup_steps": int, "decay_start": int,
              "decay_gamma": float, "decay_interval": int, "clip_norm": float,
              "tau": float, "dtype": str, "eval_every": int, "eval_pairs": int,
              "checkpoint_every": int, "jobs": int, "resume": str}


def cmd_train(args) -> int:
    resolved = resolve_config(args, TRAIN_KEYS)
    if "out" not in resolved:
        raise InvalidInput("train requires out=<directory>")
    out = Path(resolved.pop("out"))
    resume = resolved.pop("resume", None)
    points = resolved.pop("points", None)
    if points is not None:
        resolved["n_points"] = points
    cfg = TrainConfig(**resolved)
    if resume == "auto":
        ckpt = out / "checkpoint.glwt"
        resume = str(ckpt) if ckpt.exists() else None
    log_config("train", {**resolved, "out": str(out), "resume": resume or ""}, out)

    def progress(row):
        print(f"stage {row['stage']} step {row['step']}: loss {row['loss']:.4f} "
              f"precision {row['precision']:.3f} recall {row['recall']:.3f} "
              f"mean_exit {row['mean_exit_layer']:.2f}", flush=True)

    result = train(cfg, out, resume=resume, progress=progress)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# match
# ---------------------------------------------------------------------------

MATCH_KEYS = {"weights": str, "features_a": str, "features_b": str, "manifest": str,
              "out": str, "alpha": float, "beta": float, "tau": float,
              "no_early_exit": bool, "no_pruning": bool, "trace": bool, "jobs": int,
              "layers": int, "d": int, "h": int, "d_in": int, "seed": int}


def _match_config(cfg, params) -> AdaptiveConfig:
    for key, actual in (("layers", params.layers_count), ("d", params.d),
                        ("h", params.h), ("d_in", params.d_in)):
        if key in cfg and cfg[key] != actual:
            raise InvalidInput(
                f"hyperparameter mismatch: flag {key}={cfg[key]} but weights have {key}={actual}")
    return AdaptiveConfig(
        depth_enabled=not cfg.get("no_early_exit", False),
        width_enabled=not cfg.get("no_pruning", False),
        alpha=cfg.get("alpha", 0.95),
        beta=cfg.get("beta", 0.01),
        tau=cfg.get("tau", 0.1),
        keep_trace=cfg.get("trace", False),
    )


def _match_one(job):
    fa, fb, out_path, params, acfg = job
    fs_a = read_features(fa)
    fs_b = read_features(fb)
    result, _ = adaptive_forward(fs_a, fs_b, params, acfg)
    _atomic_file(out_path, lambda p: write_matches(result, p))
    return result.num_matches, result.exit_layer


def cmd_match(args) -> int:
    cfg = resolve_config(args, MATCH_KEYS)
    if "weights" not in cfg:
        raise InvalidInput("match requires weights=<file>")
    params = load_model(cfg["weights"])
    acfg = _match_config(cfg, params)
    if "manifest" in cfg:
        if "out" not in cfg:
            raise InvalidInput("match with a manifest requires out=<directory>")
        out_dir = Path(cfg["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        log_config("match", cfg, out_dir)
        jobs = []
        for idx, fa, fb, _ in read_manifest(cfg["manifest"]):
            jobs.append((fa, fb, out_dir / f"{idx:06d}.match", params, acfg))
        if cfg.get("jobs", 1) > 1:
            import multiprocessing as mp

            with mp.get_context("fork").Pool(cfg["jobs"]) as pool:
                stats = pool.map(_match_one, jobs)
        else:
            stats = [_match_one(j) for j in jobs]
        total = sum(s[0] for s in stats)
        mean_exit = float(np.mean([s[1] for s in stats])) if stats else 0.0
        print(f"matched {len(jobs)} pairs: {total} matches, mean exit layer {mean_exit:.2f}")
        return EXIT_OK
    if "features_a" not in cfg or "features_b" not in cfg or "out" not in cfg:
        raise InvalidInput("match requires features_a, features_b and out (or manifest)")
    log_config("match", cfg)
    n, exit_layer = _match_one((cfg["features_a"], cfg["features_b"], Path(cfg["out"]),
                                params, acfg))
    print(f"{n} matches, exit layer {exit_layer}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

EVAL_KEYS = {"manifest": str, "matches": str, "out": str, "ransac_threshold": float,
             "ransac_iters": int, "pr_radius": float, "seed": int, "jobs": int}


def _eval_one(job):
    (idx, fa, fb, gt_path, match_path, thr, iters, radius, seed) = job
    fs_a = read_features(fa)
    fs_b = read_features(fb)
    gt = read_ground_truth(gt_path)
    result = read_matches(match_path)
    pr = match_pr(result.pairs, gt, fs_a.points, fs_b.points, radius=radius)
    frame = fs_a.image_size
    if len(result.pairs) >= 4:
        pa = fs_a.points[result.pairs[:, 0]]
        pb = fs_b.points[result.pairs[:, 1]]
        rres = ransac_h(pa, pb, threshold=thr, iterations=iters,
                        rng=np.random.default_rng(seed + idx))
        err_ransac = corner_error(rres.h if rres.success else None, gt.h, frame)
        try:
            h_dlt = dlt(pa, pb, weights=result.scores)
            err_dlt = corner_error(h_dlt, gt.h, frame)
        except GlowError:
            err_dlt = float("inf")
    else:
        err_ransac = err_dlt = float("inf")
    return {"pair": idx, "precision": pr.precision, "recall": pr.recall,
            "num_matches": int(len(result.pairs)), "exit_layer": result.exit_layer,
            "corner_err_ransac": err_ransac, "corner_err_dlt": err_dlt,
            "precision_undefined": pr.precision_undefined}


def evaluate_matches(manifest, matches_dir, ransac_threshold=3.0, ransac_iters=1000,
                     pr_radius=3.0, seed=0, jobs=1) -> EvalReport:
    rows = read_manifest(manifest)
    matches_dir = Path(matches_dir)
    jobs_list = []
    for idx, fa, fb, gt in rows:
        match_path = matches_dir / f"{idx:06d}.match"
        if not match_path.exists():
            raise InvalidInput(f"missing match file {match_path}")
        jobs_list.append((idx, fa, fb, gt, match_path, ransac_threshold, ransac_iters,
                          pr_radius, seed))
    if jobs > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(jobs) as pool:
            per_pair = pool.map(_eval_one, jobs_list)
    else:
        per_pair = [_eval_one(j) for j in jobs_list]
    err_r = np.array([row["corner_err_ransac"] for row in per_pair])
    err_d = np.array([row["corner_err_dlt"] for row in per_pair])
    return EvalReport(
        precision=float(np.mean([r["precision"] for r in per_pair])),
        recall=float(np.mean([r["recall"] for r in per_pair])),
        auc_ransac={1.0: error_auc(err_r, 1.0), 5.0: error_auc(err_r, 5.0)},
        auc_dlt={1.0: error_auc(err_d, 1.0), 5.0: error_auc(err_d, 5.0)},
        num_pairs=len(per_pair),
        mean_matches=float(np.mean([r["num_matches"] for r in per_pair])),
        mean_exit_layer=float(np.mean([r["exit_layer"] for r in per_pair])),
        per_pair=per_pair,
    )


def cmd_eval(args) -> int:
    cfg = {"ransac_threshold": 3.0, "ransac_iters": 1000, "pr_radius": 3.0, "seed": 0,
           "jobs": 1}
    cfg.update(resolve_config(args, EVAL_KEYS))
    for key in ("manifest", "matches", "out"):
        if key not in cfg:
            raise InvalidInput(f"eval requires {key}=...")
    log_config("eval", cfg)
    report = evaluate_matches(cfg["manifest"], cfg["matches"], cfg["ransac_threshold"],
                              cfg["ransac_iters"], cfg["pr_radius"], cfg["seed"], cfg["jobs"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    header = ["pair", "precision", "recall", "num_matches", "exit_layer",
              "corner_err_ransac", "corner_err_dlt"]
    lines = [",".join(header)]
    for row in report.per_pair:
        lines.append(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                              for k in header))
    atomic_write_text(str(out) + ".csv", "\n".join(lines) + "\n")
    atomic_write_text(str(out) + ".json", json.dumps(report.to_json_dict(), indent=2) + "\n")
    print(json.dumps(report.to_json_dict(), indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

BENCH_KEYS = {"weights": str, "out": str, "sizes": str, "pairs_per_size": int,
              "seed": int, "layers": int, "d": int, "h": int, "d_in": int,
              "alpha": float, "beta": float, "tau": float}


def _forward_flops(fs_a, fs_b, params, acfg):
    nc.flops.reset()
    start = time.perf_counter()
    with nc.flops.counting():
        result, _ = adaptive_forward(fs_a, fs_b, params, acfg)
    wall_ms = (time.perf_counter() - start) * 1e3
    counts = dict(nc.flops.counts)
    network = sum(counts.get(p, 0) for p in NETWORK_PHASES)
    return counts, network, wall_ms, result


def cmd_bench(args) -> int:
    cfg = {"sizes": "256,512,1024,2048,4096", "pairs_per_size": 2, "seed": 0,
           "layers": 5, "d": 64, "h": 4, "d_in": 8, "alpha": 0.95, "beta": 0.01,
           "tau": 0.1}
    cfg.update(resolve_config(args, BENCH_KEYS))
    sizes = [int(s) for s in cfg["sizes"].split(",")]
    log_config("bench", cfg)
    if "weights" in cfg:
        params = load_model(cfg["weights"])
    else:
        params = init_model(np.random.default_rng(cfg["seed"]), cfg["layers"], cfg["d"],
                            cfg["h"], cfg["d_in"], dtype=np.float32)
    base = AdaptiveConfig(depth_enabled=False, width_enabled=False, tau=cfg["tau"])
    adap = AdaptiveConfig(alpha=cfg["alpha"], beta=cfg["beta"], tau=cfg["tau"])
    rows = []
    attn_by_size = {}
    for size in sizes:
        for k in range(cfg["pairs_per_size"]):
            sp = generate_preset_pair(cfg["seed"], 4, 1000 * size + k, size, "medium",
                                      d_in=params.d_in)
            counts_b, net_b, wall_b, res_b = _forward_flops(sp.fs_a, sp.fs_b, params, base)
            counts_a, net_a, wall_a, res_a = _forward_flops(sp.fs_a, sp.fs_b, params, adap)
            attn = counts_b.get("self_attention", 0) + counts_b.get("cross_attention", 0)
            attn_by_size.setdefault(size, []).append(attn)
            if net_a > net_b:
                raise GlowError(
                    f"adaptive network FLOPs exceed non-adaptive at size {size}")
            rows.append({"size": size, "pair": k,
                         "flops_nonadaptive": net_b, "flops_adaptive": net_a,
                         "attention_flops": attn, "classifier_flops": counts_a.get("classifier", 0),
                         "wall_ms_nonadaptive": wall_b, "wall_ms_adaptive": wall_a,
                         "exit_layer": res_a.exit_layer})
            expected = analytic_attention_flops(size, size, params.d, params.h,
                                                params.layers_count)
            total_expected = expected["self_attention"] + expected["cross_attention"]
            if abs(attn - total_expected) > 0.01 * total_expected:
                raise GlowError(f"attention FLOPs deviate from the analytic count at {size}")
    mean_attn = {s: float(np.mean(v)) for s, v in attn_by_size.items()}
    fit_sizes = [s for s in (256, 512, 1024, 2048) if s in mean_attn]
    exponent = float("nan")
    if len(fit_sizes) >= 2:
        exponent = float(np.polyfit(np.log([s for s in fit_sizes]),
                                    np.log([mean_attn[s] for s in fit_sizes]), 1)[0])
        if not (1.9 <= exponent <= 2.1):
            raise GlowError(f"attention FLOP scaling exponent {exponent:.3f} outside [1.9, 2.1]")
    if 1024 in mean_attn and 2048 in mean_attn:
        ratio = mean_attn[2048] / mean_attn[1024]
        if not (3.6 <= ratio <= 4.4):
            raise GlowError(f"FLOPs(2k)/FLOPs(1k) = {ratio:.2f} outside [3.6, 4.4]")
    # bidirectional vs naive cross-similarity accounting at the smallest size
    from glowmatch.backbone import cross_attention_unit, init_states

    sp = generate_preset_pair(cfg["seed"], 4, 1, sizes[0], "medium", d_in=params.d_in)
    state = init_states(sp.fs_a, sp.fs_b, params)
    sim_macs = params.h * sizes[0] * sizes[0] * params.d_head
    msg_macs = 2 * params.h * sizes[0] * sizes[0] * params.d_head

    def cross_count(bidirectional):
        nc.flops.reset()
        with nc.flops.counting():
            cross_attention_unit(state.xa, state.xb, params.layers[0].cross_attn, params.h,
                                 bidirectional=bidirectional)
        return nc.flops.get("cross_attention")

    bi = cross_count(True) - msg_macs
    naive = cross_count(False) - msg_macs
    if naive != 2 * bi or bi != sim_macs:
        raise GlowError(f"bidirectional similarity accounting broken: {bi} vs naive {naive}")
    print(f"attention FLOP scaling exponent: {exponent:.3f}")
    print(f"bidirectional cross-similarity MACs: {bi} (naive two-matrix: {naive})")
    header = list(rows[0].keys())
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(f"{row[k]:.3f}" if isinstance(row[k], float) else str(row[k])
                              for k in header))
    table = "\n".join(lines)
    print(table)
    if "out" in cfg:
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(cfg["out"], table + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glow",
        description="Sparse keypoint matching with adaptive inference: synthetic data "
                    "generation, training, matching, evaluation, FLOP benchmarking.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys, fn in (("gen", GEN_KEYS, cmd_gen), ("train", TRAIN_KEYS, cmd_train),
                           ("match", MATCH_KEYS, cmd_match), ("eval", EVAL_KEYS, cmd_eval),
                           ("bench", BENCH_KEYS, cmd_bench)):
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value config file")
        for key, typ in keys.items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None)
            else:
                p.add_argument(flag, dest=key, type=typ, default=None)
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (InvalidInput, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingDiverged, GenerationError, GlowError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
