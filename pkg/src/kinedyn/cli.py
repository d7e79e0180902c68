"""Command-line pipeline: synthesize, window, train, filter, evaluate, plot.

Subcommands: synth, prep, train, run, eval, ablate, plot. Exit codes:
0 success, 2 configuration/usage error, 3 numeric failure (divergence).
Sequence-level work runs in a thread pool sized by KINEDYN_THREADS
(default 1); results are collected by input index, so outputs are
identical at any thread count.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (SyntheticPlantConfig, load_sequence, preprocess,
                   save_sequence, synthesize)
from .gainnet import GainNet, load_checkpoint, save_checkpoint
from .metrics import (aggregate_reports, compute_report, expand_foot_points,
                      reports_to_csv)
from .pipeline import NumericError, RunConfig, run_sequence
from .skeleton import fk
from .training import (LossWeights, TrainConfig, TrainingDiverged,
                       generate_contact_labels, train)

PREDICTION_VERSION = 1


# ---------------------------------------------------------------------------
# small utilities

def thread_count():
    raw = os.environ.get("KINEDYN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"KINEDYN_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ValueError("KINEDYN_THREADS must be >= 1")
    return n


def parallel_map(fn, items):
    """Order-preserving map over a thread pool (size KINEDYN_THREADS)."""
    n = thread_count()
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def load_config_file(path):
    """key = value structured text; # starts a comment; values are JSON
    scalars when they parse, bare strings otherwise."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        val = val.strip()
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def apply_config_defaults(top, sub, args_ns, argv):
    """Overlay config-file values under explicit command-line flags.

    Values become the subcommand's defaults and the argv is reparsed, so
    anything typed on the command line still wins.
    """
    if not getattr(args_ns, "config", None):
        return args_ns
    cfg = load_config_file(args_ns.config)
    known = {a.dest for a in sub._actions}
    unknown = set(cfg) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    sub.set_defaults(**cfg)
    return top.parse_args(argv)


def keypoints_of_states(char, q, lengths=None):
    return np.stack([
        np.asarray(fk(char, q[t], ad.rotvec_to_quat(q[t, 3:6]),
                      lengths=lengths, with_motion=False).keypoints)
        for t in range(q.shape[0])])


def save_prediction(path, seq, q_est, keypoints, mode, diag=None):
    meta = {"version": PREDICTION_VERSION, "kind": "prediction",
            "mode": mode, "fps": seq.fps, "character": seq.character.name}
    payload = {"q_est": np.asarray(q_est), "keypoints": np.asarray(keypoints)}
    if diag:
        steps = diag.get("steps") or []
        if steps and steps[0].get("gain_diag") is not None:
            payload["gain_diag"] = np.stack([s["gain_diag"] for s in steps])
        if steps and steps[0].get("rho") is not None:
            payload["rho"] = np.stack([s["rho"] for s in steps])
        if steps:
            payload["torque_norm"] = np.asarray(
                [s["torque_norm"] for s in steps])
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.frombuffer(
            json.dumps(meta).encode(), dtype=np.uint8), **payload)


def load_prediction(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("kind") != "prediction":
            raise ValueError(f"{path} is not a prediction file")
        if meta.get("version") != PREDICTION_VERSION:
            raise ValueError(
                f"unsupported prediction version {meta.get('version')!r}")
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return meta, arrays


def run_config_from_args(args):
    return RunConfig(
        mode=args.mode, dt=args.dt, ratio=args.ratio,
        obs_cov=args.obs_cov, median_window=args.median_window,
        gaussian_sigma=args.gaussian_sigma,
        pd_damping_sign=args.damping_sign,
        jacobian_transpose=not args.no_jacobian_transpose,
        qdot_limit=args.qdot_limit,
        collect_diagnostics=getattr(args, "diagnostics", False))


def net_for(args, char):
    if getattr(args, "checkpoint", None):
        return load_checkpoint(char, args.checkpoint)
    if args.mode == "osd":
        raise ValueError("mode osd requires --checkpoint")
    return None


def load_windows(paths):
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(p.glob("*.json")) + sorted(p.glob("*.npz")))
        else:
            files.append(p)
    if not files:
        raise ValueError("no sequence files found")
    return [load_sequence(f) for f in files]


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    params = {}
    for kv in args.param or ():
        key, _, val = kv.partition("=")
        if not _:
            raise ValueError(f"--param expects key=value, got {kv!r}")
        params[key] = json.loads(val)
    cfg = SyntheticPlantConfig(
        kind=args.kind, sigma=args.sigma, burst_count=args.burst_count,
        burst_offset=args.burst_offset, burst_duration=args.burst_duration,
        seed=args.seed, fps=args.fps, params=params)
    seq = synthesize(cfg, args.duration)
    save_sequence(seq, args.out)
    print(f"synth: {seq.n_frames} frames of {args.kind} "
          f"({seq.character.name}, nq={seq.character.nq}) -> {args.out}")
    return 0


def cmd_prep(args):
    seq = load_sequence(args.input)
    windows = preprocess(seq, target_fps=args.target_fps, window=args.window)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = "npz" if args.format == "npz" else "json"
    for i, w in enumerate(windows):
        save_sequence(w, out / f"window_{i:03d}.{ext}")
    print(f"prep: {len(windows)} windows of {args.window} frames "
          f"at {args.target_fps} Hz -> {out}")
    return 0


def cmd_train(args):
    windows = load_windows(args.data)
    char = windows[0].character
    for w in windows[1:]:
        if w.character.nq != char.nq or w.character.name != char.name:
            raise ValueError("training windows disagree on character")
    weights = LossWeights()
    cfg = TrainConfig(
        epochs=args.epochs, base_lr=args.base_lr, batch=args.batch,
        window=args.window, dt=args.dt, seed=args.seed, weights=weights,
        pd_damping_sign=args.damping_sign,
        jacobian_transpose=not args.no_jacobian_transpose,
        qdot_limit=args.qdot_limit, grad_clip=args.grad_clip)
    net = GainNet.init(char, seed=args.seed)
    try:
        history = train(net, windows, cfg, log_path=args.log)
    except TrainingDiverged as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return 3
    save_checkpoint(net, args.checkpoint_out)
    print(f"train: {len(windows)} windows, {cfg.epochs} epochs, "
          f"final loss {history[-1]['loss']:.6g} -> {args.checkpoint_out}")
    return 0


def cmd_run(args):
    seq = load_sequence(args.input)
    cfg = run_config_from_args(args)
    net = net_for(args, seq.character)
    try:
        q_est, keypoints, diag = run_sequence(seq, cfg, net=net)
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    save_prediction(args.out, seq, q_est, keypoints, args.mode,
                    diag if args.diagnostics else None)
    print(f"run: mode {args.mode}, {q_est.shape[0]} frames -> {args.out}")
    if args.diagnostics and diag.get("steps"):
        gd = np.stack([s["gain_diag"] for s in diag["steps"]]) \
            if diag["steps"][0].get("gain_diag") is not None else None
        tn = [s["torque_norm"] for s in diag["steps"]]
        if gd is not None:
            print(f"  mean gain diagonal {float(gd.mean()):.4f}")
        print(f"  mean torque norm {float(np.mean(tn)):.4f}")
    return 0


def _report_for(seq, keypoints):
    seq.require_gt()
    feet = seq.character.foot_bodies()
    t = keypoints.shape[0]
    labels = seq.contacts
    if labels is None and feet:
        labels = generate_contact_labels(seq.p_gt, feet,
                                         ground_height=seq.ground_height)
    return compute_report(keypoints, seq.p_gt[:t],
                          None if labels is None else labels[:t],
                          feet, seq.fps, ground_height=seq.ground_height)


_TABLE_COLS = ("mpjpe", "mpjpe_g", "mpjpe_pa", "grp", "accel", "gd", "gp",
               "foot_skate", "pck", "cps")


def format_table(rows):
    """rows: list of (name, MetricReport). Fixed-width text table."""
    head = ["variant"] + list(_TABLE_COLS)
    lines = [" ".join(f"{h:>11}" for h in head)]
    for name, rep in rows:
        cells = [f"{name:>11}"]
        for c in _TABLE_COLS:
            v = getattr(rep, c)
            cells.append(f"{v:11.2f}" if np.isfinite(v) else f"{'nan':>11}")
        lines.append(" ".join(cells))
    return "\n".join(lines)


def cmd_eval(args):
    if len(args.gt) != len(args.pred):
        raise ValueError(f"{len(args.gt)} ground-truth files vs "
                         f"{len(args.pred)} predictions")
    out = Path(args.out_dir)
    (out / "figures").mkdir(parents=True, exist_ok=True)

    def one(pair):
        gt_path, pred_path = pair
        seq = load_sequence(gt_path)
        meta, arrays = load_prediction(pred_path)
        if meta["character"] != seq.character.name:
            raise ValueError(f"{pred_path}: character {meta['character']!r} "
                             f"does not match {seq.character.name!r}")
        return seq, meta, arrays, _report_for(seq, arrays["keypoints"])

    results = parallel_map(one, list(zip(args.gt, args.pred)))
    reports = [r[3] for r in results]
    agg = aggregate_reports(reports)
    names = [Path(p).stem for p in args.pred]

    (out / "report.json").write_text(json.dumps(
        {"sequences": {n: r.to_dict() for n, r in zip(names, reports)},
         "aggregate": agg.to_dict()}, indent=2) + "\n")
    (out / "report.csv").write_text(
        reports_to_csv(reports + [agg], names + ["aggregate"]))

    from . import plots
    seq, meta, arrays, _ = results[0]
    t = arrays["keypoints"].shape[0]
    root_z = {"estimate": arrays["keypoints"][:, 0, 2],
              "ground truth": seq.p_gt[:t, 0, 2]}
    plots.plot_trajectories(
        str(out / "figures" / "root_height.png"),
        {k: v[:, None] for k, v in root_z.items()},
        coords=[0], labels={0: "root z [m]"}, dt=1.0 / seq.fps)
    if "gain_diag" in arrays:
        plots.plot_gain_diag_bars(str(out / "figures" / "gain_diag.png"),
                                  arrays["gain_diag"])
    table = format_table(list(zip(names, reports)) + [("aggregate", agg)])
    print(table)
    print(f"eval: {len(reports)} sequences -> {out}")
    return 0


_ABLATION_RATIOS = (100.0, 10.0, 1.0, 0.1, 0.01)


def cmd_ablate(args):
    seqs = load_windows(args.data)
    for s in seqs:
        s.require_gt()
    char = seqs[0].character
    net = load_checkpoint(char, args.checkpoint) if args.checkpoint else None

    variants = [("osd", {"mode": "osd"})] if net is not None else []
    variants += [(f"ckf_{r:g}", {"mode": "classical_kf", "ratio": r})
                 for r in _ABLATION_RATIOS]
    variants += [("pd_only", {"mode": "pd_only"}),
                 ("median", {"mode": "median"}),
                 ("gaussian", {"mode": "gaussian"}),
                 ("passthrough", {"mode": "passthrough"})]

    def run_variant(spec):
        name, kw = spec
        cfg = RunConfig(dt=args.dt, pd_damping_sign=args.damping_sign,
                        jacobian_transpose=not args.no_jacobian_transpose,
                        qdot_limit=args.qdot_limit, **kw)
        reports = []
        failures = 0
        for seq in seqs:
            try:
                _, keypoints, _ = run_sequence(seq, cfg, net=net)
            except NumericError:
                failures += 1
                continue
            reports.append(_report_for(seq, keypoints))
        if not reports:
            return name, None, failures
        return name, aggregate_reports(reports), failures

    rows = parallel_map(run_variant, variants)
    table_rows = []
    for name, rep, failures in rows:
        if rep is None:
            print(f"ablate: variant {name} diverged on every sequence",
                  file=sys.stderr)
            continue
        label = name if not failures else f"{name}*{failures}"
        table_rows.append((label, rep))
    table = format_table(table_rows)
    print(table)
    if args.out:
        outp = Path(args.out)
        outp.parent.mkdir(parents=True, exist_ok=True)
        outp.write_text(reports_to_csv(
            [r for _, r in table_rows], [n for n, _ in table_rows]))
        print(f"ablate: table -> {outp}")
    return 0


def cmd_plot(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from . import plots
    made = []
    if args.history:
        history = [json.loads(line)
                   for line in Path(args.history).read_text().splitlines()
                   if line.strip()]
        made.append(plots.plot_loss_curves(str(out / "loss_curves.png"),
                                           history))
    if args.pred:
        meta, arrays = load_prediction(args.pred)
        series = {"estimate": arrays["keypoints"][:, 0, :]}
        if args.gt:
            seq = load_sequence(args.gt)
            t = arrays["keypoints"].shape[0]
            series["ground truth"] = seq.p_gt[:t, 0, :]
            series["observation"] = keypoints_of_states(
                seq.character, seq.obs[:t])[:, 0, :]
        made.append(plots.plot_trajectories(
            str(out / "root_trajectory.png"), series, coords=[0, 1, 2],
            labels={0: "x [m]", 1: "y [m]", 2: "z [m]"},
            dt=1.0 / meta["fps"]))
        if "gain_diag" in arrays:
            made.append(plots.plot_gain_diag_bars(
                str(out / "gain_diag.png"), arrays["gain_diag"]))
    if args.checkpoint:
        if not args.gt and not args.pred:
            raise ValueError("--checkpoint needs --gt for the character")
        seq = load_sequence(args.gt)
        net = load_checkpoint(seq.character, args.checkpoint)
        gain = zero_input_gain(net)
        made.append(plots.plot_gain_heatmap(str(out / "gain_heatmap.png"),
                                            gain))
    if not made:
        raise ValueError("nothing to plot: pass --history, --pred, or "
                         "--checkpoint")
    for p in made:
        print(f"plot: {p}")
    return 0


def zero_input_gain(net):
    """Full gain matrix of a network at zero inputs (reference structure)."""
    from .filtering import DynamicsFeatures
    nq = net.nq
    zero = np.zeros(nq)
    feats = DynamicsFeatures(d_evolution=zero, d_update=zero,
                             d_innovation=zero, d_observation=zero)
    bundle, _ = net.forward_step(
        zero, zero, np.zeros(6), np.zeros(6), feats,
        np.zeros(net.config.gru_hidden), params=net.numpy_params())
    return np.asarray(ad.value(bundle.gain))


# ---------------------------------------------------------------------------
# argument parsing

def _add_common_run_flags(p):
    p.add_argument("--mode", default="osd",
                   choices=("osd", "pd_only", "classical_kf", "median",
                            "gaussian", "passthrough"))
    p.add_argument("--checkpoint", help="trained parameter file")
    p.add_argument("--dt", type=float, default=0.02)
    p.add_argument("--ratio", type=float, default=1.0,
                   help="classical_kf process/measurement ratio")
    p.add_argument("--obs-cov", type=float, default=0.01)
    p.add_argument("--median-window", type=int, default=5)
    p.add_argument("--gaussian-sigma", type=float, default=2.0)
    p.add_argument("--damping-sign", default="paper",
                   choices=("paper", "classical"))
    p.add_argument("--no-jacobian-transpose", action="store_true")
    p.add_argument("--qdot-limit", type=float, default=None)


def build_parser():
    top = argparse.ArgumentParser(
        prog="kinedyn",
        description="physics-constrained motion estimation pipeline")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sequence")
    p.add_argument("--config")
    p.add_argument("--kind", default="keyframed_walk",
                   choices=("pendulum", "double_pendulum", "floating_chain",
                            "keyframed_walk"))
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--burst-count", type=int, default=0)
    p.add_argument("--burst-offset", type=float, default=0.2)
    p.add_argument("--burst-duration", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fps", type=float, default=100.0)
    p.add_argument("--param", action="append",
                   help="plant parameter key=json, repeatable")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("prep", help="resample and window a sequence")
    p.add_argument("--config")
    p.add_argument("--input", required=True)
    p.add_argument("--target-fps", type=float, default=50.0)
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--format", default="json", choices=("json", "npz"))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_prep)

    p = sub.add_parser("train", help="train the estimator end to end")
    p.add_argument("--config")
    p.add_argument("--data", nargs="+", required=True,
                   help="window files or directories")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--base-lr", type=float, default=5e-4)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--dt", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--damping-sign", default="paper",
                   choices=("paper", "classical"))
    p.add_argument("--no-jacobian-transpose", action="store_true")
    p.add_argument("--qdot-limit", type=float, default=None)
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--log", help="per-epoch history JSONL path")
    p.add_argument("--checkpoint-out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("run", help="filter one sequence")
    p.add_argument("--config")
    p.add_argument("--input", required=True)
    _add_common_run_flags(p)
    p.add_argument("--diagnostics", action="store_true",
                   help="record per-step gain diagonal, contact "
                        "probabilities, torque norms")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", help="metric report for predictions")
    p.add_argument("--config")
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="variant sweep over a sequence set")
    p.add_argument("--config")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--dt", type=float, default=0.02)
    p.add_argument("--damping-sign", default="paper",
                   choices=("paper", "classical"))
    p.add_argument("--no-jacobian-transpose", action="store_true")
    p.add_argument("--qdot-limit", type=float, default=None)
    p.add_argument("--out", help="CSV table path")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("plot", help="export figures")
    p.add_argument("--config")
    p.add_argument("--history", help="training history JSONL")
    p.add_argument("--pred", help="prediction file")
    p.add_argument("--gt", help="sequence file for overlays")
    p.add_argument("--checkpoint", help="gain heatmap source")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_plot)

    return top


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        args = apply_config_defaults(parser, sub, args, argv)
        return args.fn(args)
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    except TrainingDiverged as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return 3
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
