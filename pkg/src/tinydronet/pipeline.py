"""End-to-end orchestration: data -> train -> eval -> quantize -> plan -> simulate."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Optional


from . import data as D
from .config import PipelineConfig, save_config
from .deploy import GAP8, generate_report
from .model import build_model, count_macs, count_params
from .nn import load_checkpoint, save_checkpoint
from .quant import compare_fp32_int8, load_quantized, quantize_from_images, quantized_predictor, save_quantized
from .sim import ImagePolicy, build_upath_world, evaluate_episode, run_episode, success_table
from .sim.episode import plot_episodes
from .train import evaluate_metrics, train, trivial_baselines

STAGES = ("data", "train", "eval", "quantize", "plan", "simulate")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def stage_data(cfg: PipelineConfig, run: Path) -> D.DatasetManifest:
    root = run / "dataset"
    seeds = [cfg.seed * 100_000 + i for i in range(cfg.n_sequences)]
    manifest = D.generate_synthetic_dataset(seeds, cfg.frames_per_run, root, cfg.gen_config())
    parts = list(D.split_dataset(manifest, cfg.fractions, seed=cfg.seed))
    for i, name in enumerate(D.SPLITS):
        if name in cfg.balance_split_names:
            parts[i] = D.balance_split(parts[i], cfg.zero_yaw_cap, seed=cfg.seed)
    merged = D.merge_manifests(*parts)
    D.write_manifest(merged)
    D.write_histogram(merged.split("test"), run / "test_yaw_histogram.csv")
    return merged


def load_dataset(run: Path) -> D.DatasetManifest:
    path = run / "dataset" / D.MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest {path} missing; run the data stage first")
    return D.load_manifest(path)


def stage_train(cfg: PipelineConfig, run: Path, log: Optional[Callable[[str], None]] = None):
    manifest = load_dataset(run)
    graph = build_model(cfg.arch_config())
    res = train(graph, manifest.split("train"), manifest.split("val"), cfg.loss_config(), cfg.optim_config(),
                cfg.augment_config(), seed=cfg.seed, out_dir=run / "train", log=log)
    save_checkpoint(res.params, run / "model.ckpt")
    return graph, res


def stage_eval(cfg: PipelineConfig, run: Path) -> dict:
    manifest = load_dataset(run)
    graph = build_model(cfg.arch_config())
    params = load_checkpoint(run / "model.ckpt")
    test = manifest.split("test")
    m = evaluate_metrics(graph, params, test)
    out = {"rmse": m.rmse, "accuracy": m.accuracy, "n": m.n, "baselines": trivial_baselines(test)}
    _dump(run / "eval.json", out)
    return out


def stage_quantize(cfg: PipelineConfig, run: Path) -> dict:
    manifest = load_dataset(run)
    graph = build_model(cfg.arch_config())
    params = load_checkpoint(run / "model.ckpt")
    calib = manifest.split("train")
    imgs = calib.images()[: cfg.calib_samples]
    qg = quantize_from_images(graph, params, imgs, cfg.calib_samples)
    save_quantized(qg, run / "model.tdqm")
    test = manifest.split("test")
    yaw, coll = test.labels()
    report = {"size": qg.size_report(), "comparison": compare_fp32_int8(graph, params, qg, test.images(), yaw, coll)}
    _dump(run / "quant_report.json", report)
    return report


def stage_plan(cfg: PipelineConfig, run: Path):
    graph = build_model(cfg.arch_config())
    rep = generate_report(graph, GAP8)
    (run / "deploy_report.txt").write_text(rep.table() + "\n")
    (run / "deploy_report.jsonl").write_text(rep.to_jsonl())
    return rep


def stage_simulate(cfg: PipelineConfig, run: Path, fps: Optional[float] = None) -> dict:
    qg = load_quantized(run / "model.tdqm")
    if fps is None:
        fps = generate_report(qg.graph, GAP8).fps[cfg.hw_config]
    world = build_upath_world()
    policy = ImagePolicy(quantized_predictor(qg))
    ep_dir = run / "episodes"
    ep_dir.mkdir(exist_ok=True)
    summary = {"cnn_fps": fps}
    for v in cfg.speed_list:
        logs, results = [], []
        for k in range(cfg.episodes):
            seed = cfg.seed * 1000 + k
            log = run_episode(world, policy, cfg.control_config(v, fps), seed)
            res = evaluate_episode(log, world)
            log.to_jsonl(ep_dir / f"v{v:.1f}_ep{k}.jsonl",
                         {"segments": list(res.segments), "v_avg": res.v_avg})
            logs.append(log)
            results.append(res)
        summary[f"v={v:.1f}"] = success_table(results)
        plot_episodes(world, logs, ep_dir / f"v{v:.1f}.png", f"v_target = {v:.1f} m/s")
    _dump(run / "sim_summary.json", summary)
    return summary


def run_pipeline(cfg: PipelineConfig, stages=STAGES, log: Optional[Callable[[str], None]] = None) -> Path:
    """Run the requested stages in order under one seed-stamped artifact directory."""
    cfg.validate()
    run = cfg.run_dir()
    run.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run / "config.txt")
    say = log or (lambda s: None)
    for stage in STAGES:
        if stage not in stages:
            continue
        say(f"[{stage}]")
        try:
            if stage == "data":
                m = stage_data(cfg, run)
                say(f"  {len(m)} frames in {len(m.sequences)} sequences")
            elif stage == "train":
                stage_train(cfg, run, log=lambda s: say("  " + s))
            elif stage == "eval":
                say("  " + json.dumps(stage_eval(cfg, run)))
            elif stage == "quantize":
                say("  " + json.dumps(stage_quantize(cfg, run)["size"]))
            elif stage == "plan":
                say(stage_plan(cfg, run).table())
            elif stage == "simulate":
                say("  " + json.dumps(stage_simulate(cfg, run)))
        except Exception as exc:  # noqa: BLE001
            raise StageError(stage, exc) from exc
    return run


def sweep_gamma(block_kind: str = "DP", use_bypass: bool = False, gammas=(1, 2, 4, 8)) -> list[dict]:
    from .model import ArchConfig, BlockKind

    rows = []
    for g in gammas:
        graph = build_model(ArchConfig(BlockKind(block_kind), use_bypass, g))
        rep = generate_report(graph, GAP8)
        rows.append({"gamma": g, "params": count_params(graph), "macs": count_macs(graph),
                     "size_bytes": count_params(graph), "cycles": rep.total_cycles,
                     "mac_per_cycle": rep.mac_per_cycle, "fps_mp": rep.fps["mp"],
                     "energy_ee_mj": rep.energy_mj["ee"], "energy_mp_mj": rep.energy_mj["mp"]})
    return rows
