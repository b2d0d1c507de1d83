"""Single-binary CLI: generate / bench / train / gradcheck / data.

Exit codes: 0 success, 1 usage error, 2 numeric failure. Failures print one
machine-parsable line to stderr: ``error[usage]: <reason>`` or
``error[numeric]: <reason>``.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from .config import ConfigError, load_config
from .container import ContainerError, write_container
from .denoiser import ToyCausalDiT
from .pipeline import PipelineConfig, generate
from .schedule import NoiseSchedule
from .step_planner import CostModel, parse_schedule, simulate
from .synthetic_data import MovingDotDataset, make_clip
from .trainer import LossWeights, TrainerConfig, run_training


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # map argparse failures to exit code 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="diagdenoise", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run the diagonal denoising pipeline")
    g.add_argument("--schedule", default="4322222", help="digits, steps per chunk")
    g.add_argument("--chunks", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--forcing-t", type=int, default=None)
    g.add_argument("--window", type=int, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--config", default=None, help="JSON config file")
    g.add_argument("--no-mix", action="store_true")
    g.add_argument("--cyclic", action="store_true",
                   help="extend the schedule cyclically to --chunks")

    b = sub.add_parser("bench", help="NFE / latency / throughput accounting")
    b.add_argument("--schedules", required=True, help="comma-separated digit strings")
    b.add_argument("--cost", type=float, default=1.0)
    b.add_argument("--frames-per-chunk", type=int, default=3)
    b.add_argument("--nfe-multiplier", type=int, default=2)
    b.add_argument("--csv", nargs="?", const="-", default=None,
                   help="emit CSV; with a path, also renders a figure alongside")
    b.add_argument("--no-figure", action="store_true")

    t = sub.add_parser("train", help="distillation training loop")
    t.add_argument("--mode", choices=("gaussian", "toy"), default="gaussian")
    t.add_argument("--strategy", choices=("teacher", "diffusion", "self", "diagonal"),
                   default="diagonal")
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--weights", default="4,4,1", help="lambda_spatial,lambda_flow,gamma")
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--log", default=None, help="CSV log path")
    t.add_argument("--config", default=None, help="JSON config file")
    t.add_argument("--no-figure", action="store_true")

    c = sub.add_parser("gradcheck", help="certify analytic gradients vs finite differences")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--tolerance", type=float, default=1e-4)

    d = sub.add_parser("data", help="emit moving-dot clips in a DIAGLAT1 container")
    d.add_argument("--clips", type=int, default=64)
    d.add_argument("--velocity", default="1,0", help="dx,dy per frame")
    d.add_argument("--frames", type=int, default=12)
    d.add_argument("--seed", type=int, default=None)
    d.add_argument("--out", required=True)
    return p


def _resolved_seed(arg_seed, cfg) -> int:
    return cfg["seed"] if arg_seed is None else arg_seed


def _cmd_generate(args) -> int:
    cfg = load_config(args.config)
    seed = _resolved_seed(args.seed, cfg)
    if args.forcing_t is not None:
        cfg["forcing_t"] = args.forcing_t
    if args.window is not None:
        cfg["window_chunks"] = args.window
    sched = parse_schedule(args.schedule)
    if args.cyclic:
        from .step_planner import StepSchedule
        sched = StepSchedule(sched.steps_per_chunk, cyclic_extension=True)
    noise = NoiseSchedule(shift_k=cfg["shift_k"], horizon_T=cfg["horizon_T"],
                          warp_enabled=cfg["warp_enabled"])
    model = ToyCausalDiT(d_model=cfg["d_model"], layers=cfg["layers"], heads=cfg["heads"],
                         frames_per_chunk=cfg["frames_per_chunk"], channels=cfg["channels"],
                         height=cfg["height"], width=cfg["width"],
                         model_seed=cfg["model_seed"])
    pipe_cfg = PipelineConfig(
        step_schedule=sched, chunks=args.chunks, forcing_t=cfg["forcing_t"],
        window_chunks=cfg["window_chunks"], base_phase_chunks=cfg["base_phase_chunks"],
        auto_phase=cfg["auto_phase"], seed=seed,
        mix_outputs=cfg["mix_outputs"] and not args.no_mix, mix_last=cfg["mix_last"],
        forcing_vp_form=cfg["forcing_vp_form"],
        strict_noisy_cache=cfg["strict_noisy_cache"],
        deterministic_renoise=cfg["deterministic_renoise"],
        timestep_policy=cfg["timestep_policy"])
    cond = np.zeros(model.cond_dim)
    result = generate(pipe_cfg, model, noise, cond)
    header = {
        "kind": "generation",
        "seed": seed,
        "schedule": args.schedule,
        "chunks": len(result.chunks),
        "forcing_t": cfg["forcing_t"],
        "window_chunks": cfg["window_chunks"],
        "mix_outputs": pipe_cfg.mix_outputs,
        "timesteps": [list(log.timesteps) for log in result.logs],
    }
    write_container(args.out, header, result.chunks)
    print(f"wrote {len(result.chunks)} chunks to {args.out}")
    return 0


def _cmd_bench(args) -> int:
    digits = [s.strip() for s in args.schedules.split(",") if s.strip()]
    if not digits:
        raise UsageError("no schedules given")
    cost = CostModel(cost_per_forward=args.cost, frames_per_chunk=args.frames_per_chunk,
                     nfe_multiplier=args.nfe_multiplier)
    reports = sorted((simulate(parse_schedule(d), cost) for d in digits),
                     key=lambda r: r.schedule)
    rows = [(r.schedule, r.nfe, f"{r.first_chunk_latency:.6g}",
             f"{r.in_flight_latency:.6g}", f"{r.throughput:.6g}") for r in reports]
    headers = ("schedule", "nfe", "first_latency", "in_flight", "throughput")
    if args.csv == "-":
        w = csv.writer(sys.stdout)
        w.writerow(headers)
        w.writerows(rows)
    else:
        widths = [max(len(h), max(len(str(row[i])) for row in rows))
                  for i, h in enumerate(headers)]
        print("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
        for row in rows:
            print("  ".join(str(v).ljust(w) for v, w in zip(row, widths)))
        if args.csv:
            with open(args.csv, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(headers)
                w.writerows(rows)
            if not args.no_figure:
                from .report import figure_path_for, render_bench_figure
                fig = render_bench_figure(reports, figure_path_for(args.csv))
                print(f"wrote {args.csv} and {fig}")
            else:
                print(f"wrote {args.csv}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = _resolved_seed(args.seed, cfg)
    try:
        parts = [float(v) for v in args.weights.split(",")]
        lam_sp, lam_fl, gamma = parts
    except ValueError as exc:
        raise UsageError(f"--weights must be three comma-separated numbers: {exc}")
    weights = LossWeights(lambda_spatial=lam_sp, lambda_flow=lam_fl, gamma=gamma)
    kwargs = {}
    if args.lr is not None:
        kwargs["lr"] = args.lr
    elif args.mode == "toy":
        kwargs["lr"] = 10.0   # per-entry-mean losses need a hotter rate at clip scale
    if args.batch is not None:
        kwargs["batch"] = args.batch
    elif args.mode == "toy":
        kwargs["batch"] = 8
    tcfg = TrainerConfig(mode=args.mode, strategy=args.strategy, seed=seed,
                         steps=args.steps, forcing_t=cfg["forcing_t"],
                         frames_per_chunk=cfg["frames_per_chunk"],
                         channels=cfg["channels"], height=cfg["height"],
                         width=cfg["width"], c_mid=cfg["c_mid"],
                         c_feat=cfg["c_feat"], ema_mu=cfg["ema_mu"],
                         flow_repr=cfg["flow_repr"], **kwargs)
    state, rows = run_training(tcfg, weights)
    columns = ["step", "L_DMD", "L_reg", "L_DMD_flow", "L_reg_flow", "total"]
    if args.mode == "gaussian":
        columns.append("|b-m|")
    if args.log:
        with open(args.log, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for r in rows:
                row = [r["step"], r["L_DMD"], r["L_reg"], r["L_DMD_flow"],
                       r["L_reg_flow"], r["total"]]
                if args.mode == "gaussian":
                    row.append(r["bias_gap"])
                w.writerow(row)
        if not args.no_figure:
            from .report import figure_path_for, render_train_figure
            fig = render_train_figure(rows, figure_path_for(args.log))
            print(f"wrote {args.log} and {fig}")
        else:
            print(f"wrote {args.log}")
    last = rows[-1]
    summary = (f"step {last['step']}: total {last['total']:.6g}"
               + (f", |b-m| {last['bias_gap']:.6g}" if args.mode == "gaussian" else ""))
    print(summary)
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import CHECKS, max_rel_err, run_gradcheck
    rows = run_gradcheck(seeds=args.seeds)
    for name, _ in CHECKS:
        errs = [r.rel_err for r in rows if r.check == name]
        print(f"{name}: max rel err {max(errs):.3e} over {len(errs)} seeds")
    worst = max_rel_err(rows)
    print(f"overall max relative error: {worst:.3e} (tolerance {args.tolerance:g})")
    if not np.isfinite(worst) or worst >= args.tolerance:
        raise FloatingPointError(f"gradient check failed: {worst:.3e} >= {args.tolerance:g}")
    return 0


def _cmd_data(args) -> int:
    cfg = load_config(None)
    seed = _resolved_seed(args.seed, cfg)
    try:
        dx, dy = (float(v) for v in args.velocity.split(","))
    except ValueError as exc:
        raise UsageError(f"--velocity must be dx,dy: {exc}")
    ds = MovingDotDataset(velocity=(dx, dy), frames=args.frames, seed=seed)
    clips = [make_clip(ds, i) for i in range(args.clips)]
    header = {"kind": "clips", "seed": seed, "velocity": [dx, dy],
              "frames": args.frames, "clips": args.clips}
    write_container(args.out, header, clips)
    print(f"wrote {args.clips} clips to {args.out}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "bench": _cmd_bench,
    "train": _cmd_train,
    "gradcheck": _cmd_gradcheck,
    "data": _cmd_data,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError, ContainerError, ValueError) as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
