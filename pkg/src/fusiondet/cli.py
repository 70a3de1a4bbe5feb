"""Command-line entry point: dataset generation, toy training, inference,
evaluation, the robustness suite, gradient checks and kernel benchmarks.

Every command is driven by one JSON config (strictly validated before any
filesystem access) and is deterministic under a fixed config + seed. Exit
codes: 0 success, 2 config error, 1 any other failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .bench import KERNELS, BenchError, bench_kernel
from .config import ConfigError, RunConfig
from .decoder import decode
from .gradsuite import run_suite
from .metrics import evaluate_detections, write_bins_csv, write_report_json
from .params import (
    CheckpointError,
    init_model_params,
    load_checkpoint,
    restore_into,
    save_checkpoint,
)
from .scenesim import (
    ScenarioSpec,
    SimError,
    apply_scenario,
    dataset_hash,
    generate_scene,
    load_dataset,
    load_manifest,
    write_dataset,
)
from .train import run_inference, train_loop

CONFIG_EXIT = 2
ERROR_EXIT = 1


class CliError(RuntimeError):
    pass


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig()
        cfg.validate()
    for item in args.override or []:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        cfg.apply_override(dotted, raw)
    if args.seed is not None:
        cfg.sim.seed = args.seed
        cfg.train.seed = args.seed
        cfg.scenario.seed = args.seed
    cfg.validate()
    return cfg


def _report_extra(cfg: RunConfig, **kw) -> dict:
    extra = {"config_hash": cfg.hash(), "version": __version__}
    extra.update(kw)
    return extra


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise CliError(f"output dir {out} is not empty (use --force to overwrite)")
    scenes = [generate_scene(cfg.model, cfg.sim, i) for i in range(cfg.sim.num_scenes)]
    write_dataset(out, cfg, scenes)
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


def _check_dataset(cfg: RunConfig, dataset_dir: str):
    manifest = load_manifest(dataset_dir)
    want = dataset_hash(cfg)
    have = manifest.get("dataset_hash")
    if have != want:
        raise CliError(
            f"dataset hash mismatch: dataset {have}, config {want} "
            "(model/sim sections differ)"
        )


def _load_params(cfg: RunConfig, checkpoint: str | None):
    store = init_model_params(cfg.model, seed=cfg.train.seed)
    step = 0
    optimizer: dict = {}
    if checkpoint:
        tensors, step, ck_hash, optimizer = load_checkpoint(checkpoint)
        restore_into(store, tensors)
    return store, step, optimizer


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _check_dataset(cfg, args.dataset)
    scenes = load_dataset(args.dataset)
    store, start_step, velocity = _load_params(cfg, args.resume)
    log_path = args.out + ".log.jsonl"
    mode = "a" if args.resume else "w"
    with open(log_path, mode, encoding="utf-8") as log_fh:
        def log_fn(rec):
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")

        train_loop(cfg, scenes, store, start_step=start_step, log_fn=log_fn,
                   velocity=velocity)
    save_checkpoint(args.out, store, cfg.train.steps, cfg.hash(), optimizer=velocity)
    print(f"trained to step {cfg.train.steps}; checkpoint at {args.out}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    _check_dataset(cfg, args.dataset)
    scenes = load_dataset(args.dataset)
    store, _, _ = _load_params(cfg, args.checkpoint)
    preds, _ = run_inference(
        cfg, scenes, store, fusion=args.fusion,
        oracle_uncertainty=args.oracle_uncertainty,
    )
    doc = {
        "scenes": [
            {"scene_id": sc.scene_id, "boxes": [b.to_dict() for b in pb]}
            for sc, pb in zip(scenes, preds)
        ],
        **_report_extra(cfg),
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
    print(f"wrote predictions for {len(scenes)} scenes to {args.out}")
    return 0


def _evaluate(cfg: RunConfig, scenes, store, fusion, oracle_uncertainty):
    preds, gts = run_inference(
        cfg, scenes, store, fusion=fusion, oracle_uncertainty=oracle_uncertainty
    )
    return evaluate_detections(
        preds, gts, cfg.model.num_classes,
        thresholds=tuple(cfg.eval.thresholds),
        tp_threshold=cfg.eval.tp_threshold,
        bins=tuple(cfg.eval.bins),
    )


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    _check_dataset(cfg, args.dataset)
    scenes = load_dataset(args.dataset)
    store, _, _ = _load_params(cfg, args.checkpoint)
    report = _evaluate(cfg, scenes, store, args.fusion, args.oracle_uncertainty)
    write_report_json(
        args.out, report,
        _report_extra(cfg, fusion=args.fusion, scenario="clean"),
    )
    write_bins_csv(os.path.splitext(args.out)[0] + "_bins.csv", report)
    print(f"mAP {report.map_value:.4f}  NDS {report.nds_value:.4f} -> {args.out}")
    return 0


def cmd_robustness(args) -> int:
    cfg = _load_config(args)
    _check_dataset(cfg, args.dataset)
    scenes = load_dataset(args.dataset)
    store, _, _ = _load_params(cfg, args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    scenario_names = args.scenario or [
        "fov_limited", "object_failure", "front_occlusion", "stuck",
    ]
    summary = {"fusion": args.fusion, "scenarios": {}, **_report_extra(cfg)}

    clean = _evaluate(cfg, scenes, store, args.fusion, args.oracle_uncertainty)
    write_report_json(
        os.path.join(args.out, f"clean_{args.fusion}.json"), clean,
        _report_extra(cfg, fusion=args.fusion, scenario="clean"),
    )
    summary["clean"] = {"map": clean.map_value, "nds": clean.nds_value}

    for name in scenario_names:
        spec = ScenarioSpec.from_config(cfg.scenario)
        spec.kind = name
        corrupted = [apply_scenario(sc, spec, cfg.model, cfg.sim) for sc in scenes]
        report = _evaluate(cfg, corrupted, store, args.fusion, args.oracle_uncertainty)
        write_report_json(
            os.path.join(args.out, f"{name}_{args.fusion}.json"), report,
            _report_extra(cfg, fusion=args.fusion, scenario=name),
        )
        summary["scenarios"][name] = {
            "map": report.map_value,
            "nds": report.nds_value,
            "nds_drop": clean.nds_value - report.nds_value,
        }
    with open(os.path.join(args.out, f"summary_{args.fusion}.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    print(json.dumps(summary["scenarios"], sort_keys=True, indent=1))
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(num_seeds=args.seeds)
    doc = {"results": results, "version": __version__}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)
    ok = True
    for name, res in results.items():
        print(f"{name:22s} max_rel={res['max_rel_error']:.3e} "
              f"{'PASS' if res['passed'] else 'FAIL'}")
        ok &= res["passed"]
    return 0 if ok else ERROR_EXIT


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    kernels = [args.kernel] if args.kernel else list(KERNELS)
    reports = [bench_kernel(k, cfg, args.reps) for k in kernels]
    doc = {"reports": [r.to_dict() for r in reports], **_report_extra(cfg)}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)
    for r in reports:
        print(f"{r.kernel:14s} p50 {r.p50_ms:7.3f} ms  p90 {r.p90_ms:7.3f} ms  "
              f"{r.queries_per_s:9.0f} q/s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusiondet", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=False, checkpoint=False, out_required=True):
        sp.add_argument("--config", help="JSON config path (defaults apply if omitted)")
        sp.add_argument("--seed", type=int, help="override sim/train/scenario seeds")
        sp.add_argument("--override", "-O", action="append", metavar="KEY=VALUE",
                        help="override a config leaf via dotted path")
        if dataset:
            sp.add_argument("--dataset", required=True, help="dataset directory")
        if checkpoint:
            sp.add_argument("--checkpoint", help="checkpoint file")
        sp.add_argument("--out", required=out_required, help="output path")

    sp = sub.add_parser("generate", help="write a synthetic scene dataset")
    common(sp)
    sp.add_argument("--force", action="store_true", help="overwrite non-empty dir")
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("train", help="toy training run")
    common(sp, dataset=True)
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("infer", help="decode a dataset to predictions JSON")
    common(sp, dataset=True, checkpoint=True)
    sp.add_argument("--fusion", choices=["uaf", "equal"], default="uaf")
    sp.add_argument("--oracle-uncertainty", action="store_true")
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(sp, dataset=True, checkpoint=True)
    sp.add_argument("--fusion", choices=["uaf", "equal"], default="uaf")
    sp.add_argument("--oracle-uncertainty", action="store_true")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("robustness", help="clean + sensor-failure scenario reports")
    common(sp, dataset=True, checkpoint=True)
    sp.add_argument("--fusion", choices=["uaf", "equal"], default="uaf")
    sp.add_argument("--oracle-uncertainty", action="store_true")
    sp.add_argument("--scenario", action="append",
                    choices=["fov_limited", "object_failure", "front_occlusion", "stuck"],
                    help="scenario(s) to run (default: all)")
    sp.set_defaults(fn=cmd_robustness)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--out", help="JSON report path")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("bench", help="kernel micro-benchmarks")
    common(sp, out_required=False)
    sp.add_argument("--kernel", choices=list(KERNELS))
    sp.add_argument("--reps", type=int, default=50)
    sp.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_EXIT
    except (CliError, SimError, CheckpointError, BenchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ERROR_EXIT


if __name__ == "__main__":
    sys.exit(main())
