"""Command-line entry point: ``stereopose <command> [options]``.

Exit codes: 0 ok, 2 usage, 3 I/O or corrupt data, 4 data mismatch,
5 degenerate math input, 6 check failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, attention, checks, scenegen, stereo_network
from .evalmetrics import DEFAULT_TAUS, aggregate_disparity, evaluate_disparity, evaluate_pose
from .numkernel.io import load_tensor, save_checkpoint
from .numkernel.layers import flatten_params
from .numkernel.optim import cyclic_lr
from .numkernel.tensor import as_tensor, no_grad
from .pose_pipeline import (
    DegenerateConfigurationError, OracleOffsets, PoseConfig, cloud_from_sample, direct_monte_carlo,
    estimate_pose, fit_pose, fit_residual, train_pose_head,
)
from .rigid import Pose
from .stereo_geometry import read_pfm

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MISMATCH, EXIT_DEGENERATE, EXIT_CHECK = 0, 2, 3, 4, 5, 6
THREADS_ENV = "STEREOPOSE_THREADS"
PRESETS = {
    "desk": {"width": 160, "height": 120, "n": scenegen.DESK_SAMPLES},
    "paper": {"width": 1280, "height": 960, "n": 39600},
}

log = logging.getLogger("stereopose")


class MismatchError(RuntimeError):
    """Predictions and reference data describe different samples."""


class InputFileError(RuntimeError):
    """An input file exists but cannot be parsed."""


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _write_csv(path, rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    fh = sys.stdout if str(path) == "-" else open(path, "w", newline="")
    try:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if fh is not sys.stdout:
            fh.close()


def _log_config(args) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    log.info("resolved config: %s", json.dumps(cfg, default=str, sort_keys=True))


# ---------------------------------------------------------------- gen

def cmd_gen(args) -> int:
    preset = PRESETS[args.preset]
    n = args.n if args.n is not None else preset["n"]
    if n < 10:
        print(f"error: --n must be at least 10 (got {n})", file=sys.stderr)
        return EXIT_USAGE
    config = scenegen.DatasetConfig(width=args.width or preset["width"], height=args.height or preset["height"],
                                    focal=args.focal, baseline=args.baseline,
                                    depth_range=(args.z_min, args.z_max))
    manifest = scenegen.generate_dataset(args.out, n, args.seed, config, workers=args.threads)
    digest = scenegen.tree_digest(args.out)
    print(f"samples: {manifest['n_samples']}")
    print(f"split: train={manifest['split_counts']['train']} test={manifest['split_counts']['test']}")
    print("illumination: " + " ".join(f"{k}={v}" for k, v in manifest["illumination_counts"].items()))
    print("noise: " + " ".join(f"{k}={v}" for k, v in manifest["noise_counts"].items()))
    print(f"tree sha256: {digest}")
    if args.verify_rerun:
        with tempfile.TemporaryDirectory() as tmp:
            scenegen.generate_dataset(tmp, n, args.seed, config, workers=args.threads)
            same = scenegen.tree_digest(tmp) == digest
        print(f"byte-identical rerun: {'yes' if same else 'NO'}")
        if not same:
            return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------- eval-disparity

def _load_prediction(pred_root: Path, sid: str) -> np.ndarray:
    for candidate in (pred_root / sid / "disp.f64", pred_root / f"{sid}.f64"):
        if candidate.exists():
            return load_tensor(candidate)
    for candidate in (pred_root / sid / "disp.pfm", pred_root / f"{sid}.pfm"):
        if candidate.exists():
            return read_pfm(candidate)
    raise MismatchError(f"no prediction for sample {sid}")


def _prediction_ids(pred_root: Path) -> set[str]:
    ids = set()
    for p in pred_root.iterdir():
        if p.is_dir() and any((p / f).exists() for f in ("disp.f64", "disp.pfm")):
            ids.add(p.name)
        elif p.suffix in (".pfm", ".f64"):
            ids.add(p.stem)
    return ids


def cmd_eval_disparity(args) -> int:
    pred_root = Path(args.pred)
    if not pred_root.is_dir():
        raise FileNotFoundError(f"prediction directory {pred_root} not found")
    samples = list(scenegen.read_dataset(args.gt, split=args.split))
    gt_ids = {s.sample_id for s in samples}
    pred_ids = _prediction_ids(pred_root)
    if pred_ids != gt_ids:
        missing, extra = sorted(gt_ids - pred_ids), sorted(pred_ids - gt_ids)
        raise MismatchError(f"sample sets differ: missing {missing[:5]} extra {extra[:5]}")
    rows, reports = [], []
    for s in samples:
        pred = _load_prediction(pred_root, s.sample_id)
        if pred.shape != s.disparity.values.shape:
            raise MismatchError(f"sample {s.sample_id}: prediction shape {pred.shape} != {s.disparity.values.shape}")
        rep = evaluate_disparity(pred, s.disparity.values, s.mask, args.taus)
        reports.append(rep)
        rows.append({"id": s.sample_id, **rep.as_record()})
    agg = aggregate_disparity(reports)
    rows.append({"id": "ALL", **agg.as_record()})
    _write_csv(args.out, rows)
    print(f"[aggregate over {len(reports)} samples]")
    print(agg.text())
    return EXIT_OK


# ---------------------------------------------------------------- eval-pose

def _load_pose_predictions(path) -> dict[str, Pose]:
    doc = json.loads(Path(path).read_text())
    return {sid: Pose.from_dict(p) for sid, p in doc.items()}


def cmd_eval_pose(args) -> int:
    samples = list(scenegen.read_dataset(args.dataset, split=args.split))
    if args.pred is None and args.oracle_sigma is None:
        print("error: give --pred or --oracle-sigma", file=sys.stderr)
        return EXIT_USAGE
    mc_rows = None
    if args.pred is not None:
        preds = _load_pose_predictions(args.pred)
    else:
        manifest = scenegen.load_manifest(args.dataset)
        model = scenegen.build_target(scenegen.TargetParams.from_dict(manifest["target"]))
        preds, mc_rows = {}, []
        mc_rng = np.random.default_rng([args.seed, 1])
        for i, s in enumerate(samples):
            est = estimate_pose(s, model.keypoints, OracleOffsets(args.oracle_sigma),
                                PoseConfig(bandwidth=args.bandwidth, seed=args.seed * 100003 + i))
            preds[s.sample_id] = est.pose
            mc_rows.append(direct_monte_carlo(model.keypoints, s.pose, args.oracle_sigma, est.n_points, mc_rng))
        if args.write_pred:
            Path(args.write_pred).write_text(json.dumps({k: p.to_dict() for k, p in preds.items()},
                                                        indent=1, sort_keys=True) + "\n")
    ids = {s.sample_id for s in samples}
    if set(preds) != ids:
        raise MismatchError(f"pose ids differ: missing {sorted(ids - set(preds))[:5]} "
                            f"extra {sorted(set(preds) - ids)[:5]}")
    rows = []
    for s in samples:
        p = preds[s.sample_id]
        rep = evaluate_pose(s.pose.R, s.pose.t, p.R, p.t)
        rows.append({"id": s.sample_id, "e_t": rep.e_t, "e_R": rep.e_R, "e_R_deg": rep.e_R_deg,
                     "illumination": s.illumination, "noise": s.noise})
    _write_csv(args.out, rows)
    mean_t = float(np.mean([r["e_t"] for r in rows]))
    mean_r = float(np.mean([r["e_R"] for r in rows]))
    print(f"samples: {len(rows)}")
    print(f"mean e_t (m): {mean_t:.6g}")
    print(f"mean e_R (rad): {mean_r:.6g}  ({np.degrees(mean_r):.6g} deg)")
    if mc_rows is not None:
        mc_t = float(np.mean([r.e_t for r in mc_rows]))
        mc_r = float(np.mean([r.e_R for r in mc_rows]))
        print(f"monte carlo mean e_t (m): {mc_t:.6g}  ratio {mean_t / mc_t:.4f}")
        print(f"monte carlo mean e_R (rad): {mc_r:.6g}  ratio {mean_r / mc_r:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- fit

def _read_correspondences(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        doc = json.loads(text)
        obj, cam = np.array(doc["object"], dtype=np.float64), np.array(doc["camera"], dtype=np.float64)
    else:
        rows = [r for r in csv.reader(text.splitlines()) if r and not r[0].lstrip().startswith("#")]
        try:
            data = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
        except ValueError:
            data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != 6:
            raise ValueError("correspondence CSV needs 6 columns: x_obj,y_obj,z_obj,x_cam,y_cam,z_cam")
        obj, cam = data[:, :3], data[:, 3:]
    if obj.shape != cam.shape or obj.ndim != 2 or obj.shape[1] != 3:
        raise ValueError("object and camera point arrays must both be N x 3")
    return obj, cam


def cmd_fit(args) -> int:
    try:
        obj, cam = _read_correspondences(args.input)
    except (ValueError, KeyError) as exc:
        raise InputFileError(f"{args.input}: {exc}") from exc
    pose = fit_pose(obj, cam)
    res = fit_residual(obj, cam, pose)
    print(json.dumps({"pose": pose.to_dict(), "residual": res, "n": int(len(obj))}, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    seeds = args.seeds if args.seeds is not None else [args.seed]
    rows, seconds = checks.timed_gradchecks(args.module, seeds, args.max_probes)
    table = [{"module": r.module, "op": r.op, "seed": r.seed, "max_rel_err": r.max_rel_err,
              "tol": r.tol, "pass": int(r.passed)} for r in rows]
    _write_csv(args.out, table)
    worst = max(rows, key=lambda r: r.max_rel_err / r.tol)
    failed = [r for r in rows if not r.passed]
    print(f"checked {len(rows)} cases in {seconds:.1f} s; worst {worst.module}/{worst.op} "
          f"seed {worst.seed}: {worst.max_rel_err:.3g} (tol {worst.tol:g})", file=sys.stderr)
    if failed:
        print(f"FAILED: {len(failed)} case(s); worst op {worst.module}/{worst.op}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------- bench-attn

def fit_exponent(n, values) -> float:
    """Slope of the least-squares line through (log n, log value)."""
    return float(np.polyfit(np.log(np.asarray(n, dtype=np.float64)), np.log(np.asarray(values, dtype=np.float64)), 1)[0])


def bench_attention(n_values, d: int, repeats: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    p_e, p_v = attention.init_ecaa(rng, d), attention.init_vanilla_block(rng, d)
    rows = []
    for n in n_values:
        fs, ft = as_tensor(rng.standard_normal((n, d))), as_tensor(rng.standard_normal((n, d)))
        times = {}
        for name, fn in (("vanilla", lambda: attention.vanilla_block(fs, ft, p_v)),
                         ("ecaa", lambda: attention.ecaa(fs, ft, p_e))):
            best = np.inf
            with no_grad():
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    fn()
                    best = min(best, time.perf_counter() - t0)
            times[name] = best
        rows.append({"n": n, "vanilla_flops": attention.flop_count("vanilla", n, d),
                     "ecaa_flops": attention.flop_count("ecaa", n, d),
                     "vanilla_seconds": times["vanilla"], "ecaa_seconds": times["ecaa"]})
    return rows


def cmd_bench_attn(args) -> int:
    if min(args.n) < 1 or args.d < 1:
        print("error: n and d must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    rows = bench_attention(args.n, args.d, args.repeats, args.seed)
    _write_csv(args.out, rows)
    ns = [r["n"] for r in rows]
    if len(ns) >= 2:
        print(f"flop exponent vanilla: {fit_exponent(ns, [r['vanilla_flops'] for r in rows]):.3f}")
        print(f"flop exponent ecaa: {fit_exponent(ns, [r['ecaa_flops'] for r in rows]):.3f}")
    last = rows[-1]
    print(f"n={last['n']}: flop ratio {last['vanilla_flops'] / last['ecaa_flops']:.3f}, "
          f"wall-time ratio {last['vanilla_seconds'] / last['ecaa_seconds']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- train-toy

def _pose_batches(dataset, max_points: int, seed: int) -> list[dict]:
    manifest = scenegen.load_manifest(dataset)
    model = scenegen.build_target(scenegen.TargetParams.from_dict(manifest["target"]))
    rng = np.random.default_rng(seed)
    batches = []
    for s in scenegen.read_dataset(dataset, split="train"):
        cloud = cloud_from_sample(s)
        idx = np.arange(len(cloud))
        if len(idx) > max_points:
            idx = np.sort(rng.choice(len(idx), size=max_points, replace=False))
        batches.append({"points": cloud.points[idx], "colors": cloud.extra["colors"][idx],
                        "kp_cam": s.pose.apply(model.keypoints.points), "center_cam": s.pose.t.copy(),
                        "labels": cloud.labels[idx]})
    if not batches:
        raise scenegen.DatasetError("no training samples in dataset")
    return batches


def cmd_train_toy(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.model == "pose-head":
        if args.dataset is None:
            print("error: --dataset is required for --model pose-head", file=sys.stderr)
            return EXIT_USAGE
        batches = _pose_batches(args.dataset, 128, args.seed)
        res = train_pose_head(batches, args.steps, seed=args.seed, lr=args.lr,
                              directions=attention.FusionDirections.from_label(args.fusion))
        rows = [{"step": i, "loss": v} for i, v in enumerate(res.losses)]
        save_checkpoint(out / "checkpoint", flatten_params(res.params))
        summary = {"model": "pose-head", "initial_loss": res.losses[0], "final_loss": res.losses[-1],
                   "scale": res.scale}
    else:
        cfg = stereo_network.TSCAConfig(channels=args.channels, d_max=args.d_max, iters=args.iters,
                                        use_ta=not args.no_ta, use_seca=not args.no_seca)
        # keep the largest disparity representable and well inside the crop
        d_hi = min(40.0, 0.7 * cfg.max_disparity, 0.625 * args.size)
        pairs = stereo_network.textured_plane_pairs(n=args.pairs, size=args.size, d_range=(4.0, d_hi),
                                                    seed=args.seed)
        init = stereo_network.init_tsca(cfg, args.seed)
        epe0 = stereo_network.evaluate_epe(init, cfg, pairs)
        lrs = []
        schedule_lr = lambda step: (cyclic_lr(step, args.steps, args.lr_low, args.lr_high)
                                    if args.lr_schedule == "cyclic" else args.lr)
        res = stereo_network.train_toy(pairs, cfg, args.steps, seed=args.seed, lr=args.lr, batch=args.batch,
                                       schedule=args.lr_schedule, lr_low=args.lr_low, lr_high=args.lr_high,
                                       params=init, log=lambda s, l, e: lrs.append(schedule_lr(s)))
        epe1 = stereo_network.evaluate_epe(res.params, cfg, pairs)
        rows = [{"step": i, "lr": lrs[i], "loss": l, "epe": e} for i, (l, e) in enumerate(zip(res.losses, res.epes))]
        save_checkpoint(out / "checkpoint", flatten_params(res.params))
        summary = {"model": "stereo", "config": asdict(cfg), "initial_epe": epe0, "final_epe": epe1,
                   "epe_ratio": epe1 / epe0, "final_loss": res.losses[-1] if res.losses else None}
    _write_csv(out / "losses.csv", rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    for k, v in summary.items():
        if k != "config":
            print(f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stereopose", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=_default_threads(),
                        help=f"worker count (default from ${THREADS_ENV}, else 1)")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("-q", "--quiet", action="store_true", help="suppress the resolved-config log line")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="render a synthetic stereo dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--focal", type=float, default=200.0)
    p.add_argument("--baseline", type=float, default=1.0)
    p.add_argument("--z-min", type=float, default=10.0)
    p.add_argument("--z-max", type=float, default=50.0)
    p.add_argument("--verify-rerun", action="store_true", help="regenerate to a temp dir and compare hashes")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("eval-disparity", parents=[common], help="score predicted disparities")
    p.add_argument("--pred", required=True, help="dir of NNNNN/disp.pfm (or .f64) or NNNNN.pfm files")
    p.add_argument("--gt", required=True, help="dataset directory")
    p.add_argument("--taus", type=_float_list, default=list(DEFAULT_TAUS))
    p.add_argument("--split", choices=("train", "test"), default=None)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_eval_disparity)

    p = sub.add_parser("eval-pose", parents=[common], help="score pose predictions or run the oracle chain")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pred", default=None, help="JSON {id: pose} file")
    p.add_argument("--oracle-sigma", type=float, default=None, help="run the voting chain with noisy GT offsets")
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--write-pred", default=None)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_eval_pose)

    p = sub.add_parser("fit", parents=[common], help="least-squares rigid fit of 3-D correspondences")
    p.add_argument("--input", required=True, help="JSON {object, camera} or 6-column CSV")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--module", choices=checks.MODULES + ("all",), default="all")
    p.add_argument("--seeds", type=_int_list, default=None, help="overrides --seed")
    p.add_argument("--max-probes", type=int, default=6)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-attn", parents=[common], help="FLOP and wall-time scaling of attention")
    p.add_argument("--n", type=_int_list, default=[256, 512, 1024, 2048, 4096])
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_bench_attn)

    p = sub.add_parser("train-toy", parents=[common], help="overfit the stereo network or the pose head")
    p.add_argument("--model", choices=("stereo", "pose-head"), default="stereo")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", default=None, help="dataset directory (pose-head)")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--lr-schedule", choices=("constant", "cyclic"), default="constant")
    p.add_argument("--lr-low", type=float, default=1e-5)
    p.add_argument("--lr-high", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--pairs", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--d-max", type=int, default=16)
    p.add_argument("--iters", type=int, default=4)
    p.add_argument("--no-ta", action="store_true")
    p.add_argument("--no-seca", action="store_true")
    p.add_argument("--fusion", choices=attention.FUSION_CONFIGS, default="both")
    p.set_defaults(func=cmd_train_toy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    _log_config(args)
    try:
        return args.func(args)
    except DegenerateConfigurationError as exc:
        print(f"degenerate input: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except MismatchError as exc:
        print(f"mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, scenegen.DatasetError, InputFileError, json.JSONDecodeError, KeyError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
