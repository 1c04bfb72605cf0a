"""Command-line entry point. Exit codes: 0 success, 1 stage failure, 2 usage error."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ARTIFACT_ENV, ConfigFileError, PipelineConfig, load_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class Failure(RuntimeError):
    """A stage or invariant failure (exit code 1)."""


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "set", None):
        cfg = cfg.with_overrides(args.set)
    return cfg


def _arch(args):
    from .model import ArchConfig, BlockKind

    return ArchConfig(BlockKind(args.block.upper()), args.bypass, args.gamma)


def cmd_gen_data(args) -> int:
    from . import data as D

    seeds = list(range(args.seed * 100_000, args.seed * 100_000 + args.sequences))
    m = D.generate_synthetic_dataset(seeds, args.frames, args.out)
    parts = list(D.split_dataset(m, seed=args.seed))
    if args.balance_cap < 1.0:
        parts[2] = D.balance_split(parts[2], args.balance_cap, seed=args.seed)
    merged = D.merge_manifests(*parts)
    D.write_manifest(merged)
    D.write_histogram(merged.split("test"), Path(args.out) / "test_yaw_histogram.csv")
    print(f"{len(merged)} frames in {len(merged.sequences)} sequences -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_manifest
    from .model import build_model
    from .nn import save_checkpoint
    from .train import train

    cfg = _config(args)
    if not Path(args.data).exists():
        raise Failure(f"dataset {args.data} not found; run gen-data first")
    m = load_manifest(args.data)
    graph = build_model(cfg.arch_config())
    res = train(graph, m.split("train"), m.split("val"), cfg.loss_config(), cfg.optim_config(),
                cfg.augment_config(), seed=cfg.seed, out_dir=args.out, log=print)
    save_checkpoint(res.params, Path(args.out) / "model.ckpt")
    print(f"best epoch {res.best_epoch}; checkpoint {Path(args.out) / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_manifest
    from .model import build_model
    from .nn import load_checkpoint
    from .train import evaluate_metrics, trivial_baselines

    m = load_manifest(args.data)
    part = m.split(args.split) if args.split != "all" else m
    if len(part) == 0:
        raise Failure(f"split {args.split!r} is empty")
    graph = build_model(_config(args).arch_config())
    met = evaluate_metrics(graph, load_checkpoint(args.ckpt), part, args.threshold)
    print(json.dumps({"rmse": met.rmse, "accuracy": met.accuracy, "n": met.n,
                      "baselines": trivial_baselines(part)}, indent=2))
    return EXIT_OK


def cmd_baselines(args) -> int:
    from .data import load_manifest
    from .train import trivial_baselines

    m = load_manifest(args.data)
    part = m.split(args.split) if args.split != "all" else m
    if len(part) == 0:
        raise Failure(f"split {args.split!r} is empty")
    print(json.dumps(trivial_baselines(part), indent=2))
    return EXIT_OK


def cmd_quantize(args) -> int:
    from .data import load_manifest
    from .model import build_model
    from .nn import load_checkpoint
    from .quant import compare_fp32_int8, quantize_from_images, save_quantized

    m = load_manifest(args.data)
    graph = build_model(_config(args).arch_config())
    params = load_checkpoint(args.ckpt)
    qg = quantize_from_images(graph, params, m.split("train").images()[: args.calib], args.calib)
    save_quantized(qg, args.out)
    test = m.split("test")
    report = {"size": qg.size_report()}
    if len(test):
        yaw, coll = test.labels()
        report["comparison"] = compare_fp32_int8(graph, params, qg, test.images(), yaw, coll)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_plan(args) -> int:
    from .deploy import GAP8, check_plan, generate_report, plan_tiling
    from .model import build_model
    from .quant import load_quantized

    graph = load_quantized(args.model).graph if args.model else build_model(_arch(args))
    plan = plan_tiling(graph, GAP8)
    problems = check_plan(plan, GAP8)
    if problems:
        raise Failure("tiling plan violates constraints:\n  " + "\n  ".join(problems))
    rep = generate_report(graph, GAP8)
    print(rep.table())
    if args.jsonl:
        Path(args.jsonl).write_text(rep.to_jsonl())
    if args.plan_out:
        Path(args.plan_out).write_text("".join(json.dumps(r) + "\n" for r in plan.to_records()))
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .sim import (ConstantPolicy, ControlConfig, ImagePolicy, OraclePolicy, PilotConfig,
                      build_upath_world, evaluate_episode, run_episode, success_table)
    from .sim.episode import plot_episodes

    world = build_upath_world()
    fps = args.fps
    if args.policy == "oracle":
        policy = OraclePolicy(PilotConfig(v_target=args.speed))
    elif args.policy == "constant":
        policy = ConstantPolicy(args.yaw, args.p_coll)
    elif args.policy == "int8":
        from .deploy import generate_report
        from .quant import load_quantized, quantized_predictor

        if not args.model:
            raise Failure("--policy int8 needs --model FILE.tdqm")
        qg = load_quantized(args.model)
        policy = ImagePolicy(quantized_predictor(qg))
        fps = fps or generate_report(qg.graph).fps["mp"]
    else:
        from .model import build_model
        from .nn import load_checkpoint
        from .train import float_predictor

        if not args.ckpt:
            raise Failure("--policy float needs --ckpt FILE")
        graph = build_model(_config(args).arch_config())
        policy = ImagePolicy(float_predictor(graph, load_checkpoint(args.ckpt)))
    cfg = ControlConfig(v_target=args.speed, cnn_fps=fps or 139.0)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    logs, results = [], []
    for k in range(args.episodes):
        log = run_episode(world, policy, cfg, seed=args.seed + k)
        res = evaluate_episode(log, world)
        logs.append(log)
        results.append(res)
        print(f"episode {k}: {log.outcome:<8} segments={'/'.join(res.segments)} "
              f"v_avg={'N/A' if res.v_avg is None else f'{res.v_avg:.3f}'} t={log.end_time:.2f}s")
        if out:
            log.to_jsonl(out / f"episode{k}.jsonl", {"segments": list(res.segments), "v_avg": res.v_avg})
    summary = success_table(results)
    print(json.dumps(summary))
    if out:
        plot_episodes(world, logs, out / "trajectories.png", f"{args.policy} @ {args.speed} m/s")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .model import human
    from .pipeline import sweep_gamma

    rows = sweep_gamma(args.block.upper(), args.bypass)
    print(f"{'gamma':>5} {'params':>8} {'MACs':>8} {'size[B]':>8} {'cycles':>8} {'MAC/cyc':>8} "
          f"{'fps':>7} {'E_ee[mJ]':>9} {'E_mp[mJ]':>9}")
    for r in rows:
        print(f"{r['gamma']:>5} {human(r['params']):>8} {human(r['macs']):>8} {human(r['size_bytes']):>8} "
              f"{human(r['cycles']):>8} {r['mac_per_cycle']:>8.2f} {r['fps_mp']:>7.1f} "
              f"{r['energy_ee_mj']:>9.2f} {r['energy_mp_mj']:>9.2f}")
    if args.jsonl:
        Path(args.jsonl).write_text("".join(json.dumps(r) + "\n" for r in rows))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .pipeline import STAGES, run_pipeline

    cfg = _config(args)
    stages = args.stages.split(",") if args.stages else STAGES
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigFileError(f"unknown stages {unknown}; choose from {','.join(STAGES)}")
    run = run_pipeline(cfg, stages, log=print)
    print(f"artifacts: {run}")
    return EXIT_OK


def cmd_fit_cycles(args) -> int:
    from .deploy import CYCLE_MODEL_PATH, fit_cycle_model

    m = fit_cycle_model()
    path = Path(args.out) if args.out else CYCLE_MODEL_PATH
    path.write_text(m.to_json())
    print(m.to_json(), end="")
    return EXIT_OK


def cmd_config(args) -> int:
    print(_config(args).to_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tinydronet", description="Tiny navigation CNN toolkit: data, training, "
                                "int8 quantization, deployment planning and closed-loop simulation.",
                                epilog=f"Artifact root defaults to ${ARTIFACT_ENV} or ./artifacts.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def with_config(sp):
        sp.add_argument("--config", help="key=value pipeline config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    def with_arch(sp):
        sp.add_argument("--block", default="DP", choices=["RB", "DP", "IRLB", "rb", "dp", "irlb"])
        sp.add_argument("--bypass", action="store_true", help="keep the 1x1 bypass branches")
        sp.add_argument("--gamma", type=int, default=8, choices=[1, 2, 4, 8])

    sp = sub.add_parser("gen-data", help="synthesize a labeled dataset with the oracle pilot")
    sp.add_argument("--out", required=True)
    sp.add_argument("--sequences", type=int, default=120)
    sp.add_argument("--frames", type=int, default=45, help="frames per sequence")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--balance-cap", type=float, default=0.3, help="max zero-yaw share in the test split")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model on a generated dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="RMSE/accuracy of a checkpoint plus trivial baselines")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    sp.add_argument("--threshold", type=float, default=0.5)
    with_config(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("baselines", help="trivial predictors (always-zero yaw, constant collision)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    sp.set_defaults(func=cmd_baselines)

    sp = sub.add_parser("quantize", help="post-training int8 quantization of a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--calib", type=int, default=512)
    with_config(sp)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("plan", help="tiling plan and cycle/fps/energy report")
    with_arch(sp)
    sp.add_argument("--model", help="quantized model file (overrides --block/--gamma)")
    sp.add_argument("--jsonl", help="write the report as line-delimited JSON")
    sp.add_argument("--plan-out", help="write the per-layer tiles as line-delimited JSON")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", help="closed-loop episodes on the U-shaped path")
    sp.add_argument("--policy", choices=["oracle", "constant", "float", "int8"], default="oracle")
    sp.add_argument("--speed", type=float, default=0.5)
    sp.add_argument("--episodes", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--fps", type=float, default=None, help="CNN rate; defaults to the deploy estimate")
    sp.add_argument("--ckpt")
    sp.add_argument("--model")
    sp.add_argument("--yaw", type=float, default=0.0)
    sp.add_argument("--p-coll", type=float, default=0.0)
    sp.add_argument("--out")
    with_config(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep-gamma", help="params/MACs/size/cycles/fps/energy for gamma in {1,2,4,8}")
    sp.add_argument("--block", default="DP", choices=["RB", "DP", "IRLB", "rb", "dp", "irlb"])
    sp.add_argument("--bypass", action="store_true")
    sp.add_argument("--jsonl")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("pipeline", help="run every stage under one seed-stamped artifact directory")
    with_config(sp)
    sp.add_argument("--stages", help="comma list, default all: data,train,eval,quantize,plan,simulate")
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("fit-cycles", help="refit the cycle-model constants")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fit_cycles)

    sp = sub.add_parser("config", help="print the effective pipeline config")
    with_config(sp)
    sp.set_defaults(func=cmd_config)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
