"""Command-line entry points.

Subcommands:
  phantom-gen  synthesize a phantom cloud + landmarks + manifest
  plan         plan a path on a cloud and write it as CSV/JSON
  run          full experiment: register, plan, follow, report, plots
  replay       recompute metrics from a persisted trial directory
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .environment import (
    PhantomSpec,
    fit_plane,
    load_cloud,
    load_landmarks,
    save_cloud,
    save_landmarks,
    synth_phantom,
)
from .errors import SimError
from .experiment import emit_plots, load_spec, replay_trial, run_experiment
from .figures import render_figures
from .planner import PlannerConfig, path_to_csv, plan


def _cmd_phantom_gen(args) -> int:
    params = {}
    if args.params:
        params = json.loads(Path(args.params).read_text())
    spec = PhantomSpec.from_dict(params)
    phantom = synth_phantom(spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(phantom.cloud, out / "cloud.csv")
    save_landmarks(phantom.landmarks, out / "landmarks.json")
    (out / "manifest.json").write_text(
        json.dumps(phantom.manifest, indent=2, sort_keys=True) + "\n"
    )
    print(f"wrote {phantom.manifest['point_count']} points to {out / 'cloud.csv'}")
    return 0


def _cmd_plan(args) -> int:
    cloud = load_cloud(args.cloud)
    landmarks = load_landmarks(args.landmarks)
    plane = fit_plane(landmarks)
    cfg_kwargs = {}
    if args.config:
        cfg_kwargs = json.loads(Path(args.config).read_text()).get("planner", {})
    if args.seed is not None:
        cfg_kwargs["seed"] = args.seed
    cfg = PlannerConfig.from_dict(cfg_kwargs)
    path = plan(cloud, plane, landmarks.start, landmarks.target, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    path_to_csv(path, out)
    out.with_suffix(".json").write_text(json.dumps(
        {"waypoints": [[float(v) for v in w] for w in path.waypoints]},
        indent=2,
    ) + "\n")
    print(f"planned {len(path)} waypoints, length {path.length():.2f} mm -> {out}")
    return 0


def _cmd_run(args) -> int:
    spec = load_spec(
        args.config,
        seed=args.seed,
        trials=args.trials,
        out_dir=args.out,
        cloud_path=args.phantom,
        landmarks_path=args.landmarks,
    )
    report = run_experiment(spec)
    emit_plots(report, spec.out_dir)
    if not args.no_figures:
        render_figures(spec.out_dir)
    ok = report["success_count"] >= 1
    mean = report["mean_rmse_mm"]
    mean_txt = f"{mean:.3f} mm" if mean is not None else "n/a"
    print(f"{report['success_count']}/{report['trial_count']} trials succeeded, "
          f"mean RMSE {mean_txt}; report in {spec.out_dir}/report.json")
    if not ok:
        for r in report["trials"]:
            print(f"  trial {r['trial']}: {r.get('error')}", file=sys.stderr)
    return 0 if ok else 1


def _cmd_replay(args) -> int:
    metrics = replay_trial(args.log)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    report_path = Path(args.log).parent / "report.json"
    if report_path.exists():
        report = json.loads(report_path.read_text())
        trial_name = Path(args.log).name
        for r in report["trials"]:
            if f"trial_{r['trial']:03d}" == trial_name and r["success"]:
                if abs(r["rmse_mm"] - metrics["rmse_mm"]) > 1e-9:
                    print("re-computed RMSE disagrees with report.json", file=sys.stderr)
                    return 1
                print("matches report.json")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="endosim",
        description="Closed-loop flexible-endoscope navigation simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("phantom-gen", help="generate a synthetic phantom")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--params", help="JSON file of generator parameters")
    p_gen.set_defaults(func=_cmd_phantom_gen)

    p_plan = sub.add_parser("plan", help="plan a path through a cloud")
    p_plan.add_argument("--cloud", required=True, help="cloud CSV")
    p_plan.add_argument("--landmarks", required=True, help="landmark JSON")
    p_plan.add_argument("--out", required=True, help="output path CSV")
    p_plan.add_argument("--seed", type=int, default=None)
    p_plan.add_argument("--config", help="JSON config (planner section)")
    p_plan.set_defaults(func=_cmd_plan)

    p_run = sub.add_parser("run", help="run the closed-loop experiment")
    p_run.add_argument("--config", help="JSON config file")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--trials", type=int, default=None)
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--phantom", default=None, help="cloud CSV instead of synthesis")
    p_run.add_argument("--landmarks", default=None, help="landmark JSON for --phantom")
    p_run.add_argument("--no-figures", action="store_true",
                       help="skip PNG rendering, keep CSV plot data only")
    p_run.set_defaults(func=_cmd_run)

    p_replay = sub.add_parser("replay", help="recompute metrics from a trial dir")
    p_replay.add_argument("log", help="trial directory (contains trajectory.csv)")
    p_replay.set_defaults(func=_cmd_replay)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SimError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
