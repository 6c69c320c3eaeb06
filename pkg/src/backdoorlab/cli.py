"""Command-line front end.

Verbs: train-clean, attack, defend, report. Exit codes: 0 success, 2 config
error, 3 runtime failure. Config errors are raised before any run directory
is created, so a failed invocation leaves no partial artifacts.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import attention, defenses, injection, metrics, trigger
from .config import ExperimentConfig
from .data import (ImageDataset, TriggerSpec, apply_trigger, derive_seed,
                   load_dataset, make_synthetic, resize_dataset)
from .errors import BackdoorLabError, ConfigError
from .models import (ModelHandle, TrainHyper, build_victim, evaluate,
                     load_checkpoint, save_checkpoint, set_determinism, train_clean)
from .runs import RunPaths, new_run_id, open_run

log = logging.getLogger("backdoorlab")

OUT_ENV = "BACKDOORLAB_OUT"


def _resolve_out_root(cfg: ExperimentConfig, args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path(cfg.out_root)


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "mask", None):
        cfg.attack.mask_strategy = args.mask
        cfg.attack.validate()
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    cfg.validate()
    return cfg


def _build_datasets(cfg: ExperimentConfig) -> tuple[ImageDataset, ImageDataset]:
    ds = cfg.dataset
    if ds.format == "synthetic":
        train = make_synthetic(ds.n_train, ds.height, ds.width, ds.channels,
                               ds.num_classes, cfg.seed, "train", ds.name)
        test = make_synthetic(ds.n_test, ds.height, ds.width, ds.channels,
                              ds.num_classes, cfg.seed, "test", ds.name)
    else:
        train = load_dataset(ds.path, ds.format)
        if ds.test_path:
            test = load_dataset(ds.test_path, ds.format)
            test.split = "test"
        else:
            # deterministic 80/20 holdout when no test path is given
            n = len(train)
            cut = int(n * 0.8)
            test = train.subset(range(cut, n), split="test")
            train = train.subset(range(cut))
        train.split = "train"
    if cfg.input_size:
        train = resize_dataset(train, cfg.input_size, cfg.input_size)
        test = resize_dataset(test, cfg.input_size, cfg.input_size)
    return train, test


def _model_input_shape(cfg: ExperimentConfig) -> tuple[int, int, int]:
    side = cfg.input_size or cfg.dataset.height
    side_w = cfg.input_size or cfg.dataset.width
    return (side, side_w, cfg.dataset.channels)


def _stage_clean(cfg: ExperimentConfig, paths: RunPaths, train, test) -> ModelHandle:
    if paths.stage_done("clean"):
        log.info("clean stage already done, loading checkpoint")
        return load_checkpoint(paths.clean_model)
    handle = build_victim(cfg.arch, cfg.dataset.num_classes, _model_input_shape(cfg),
                          derive_seed(cfg.seed, "victim-init"), **cfg.model_params)
    hyper = TrainHyper(cfg.train.epochs, cfg.train.lr, cfg.train.batch_size,
                       derive_seed(cfg.seed, "victim-train"))
    train_clean(handle, train, hyper)
    acc = evaluate(handle, test)
    metrics.append_records(
        [metrics.MetricRecord("clean_test_accuracy", acc, cfg.dataset.name, cfg.arch)],
        paths.metrics_csv, paths.metrics_jsonl)
    save_checkpoint(handle, paths.clean_model)
    paths.mark_stage("clean")
    log.info("clean model test accuracy %.4f", acc)
    return handle


def _stage_ran(cfg: ExperimentConfig, paths: RunPaths, train) -> ModelHandle:
    if paths.stage_done("ran"):
        return load_checkpoint(paths.ran_model)
    # the attention network always trains at the native dataset resolution
    native = train
    if cfg.input_size and train.image_shape[0] != cfg.dataset.height:
        native = make_synthetic(cfg.dataset.n_train, cfg.dataset.height,
                                cfg.dataset.width, cfg.dataset.channels,
                                cfg.dataset.num_classes, cfg.seed, "train",
                                cfg.dataset.name) \
            if cfg.dataset.format == "synthetic" else train
    hyper = TrainHyper(cfg.ran_train.epochs, cfg.ran_train.lr, cfg.ran_train.batch_size,
                       derive_seed(cfg.seed, "ran-train"))
    ran = attention.train_ran(native, hyper)
    save_checkpoint(ran, paths.ran_model)
    paths.mark_stage("ran")
    return ran


def _make_mask(cfg: ExperimentConfig, paths: RunPaths, train, ran) -> attention.Mask:
    ac = cfg.attack
    hw = (_model_input_shape(cfg)[0], _model_input_shape(cfg)[1])
    if ac.mask_strategy == "attention":
        native = train if ran.input_shape[:2] == train.image_shape[:2] else None
        if native is None:
            # maps are extracted at the attention network's native resolution
            native = make_synthetic(cfg.dataset.n_train, cfg.dataset.height,
                                    cfg.dataset.width, cfg.dataset.channels,
                                    cfg.dataset.num_classes, cfg.seed, "train",
                                    cfg.dataset.name)
        mask = attention.target_class_mask(ran, native, ac.target_label, ac.trigger_side,
                                           ac.map_samples, derive_seed(cfg.seed, "mask"),
                                           map_hw=hw)
    elif ac.mask_strategy == "corner":
        mask = attention.baseline_mask(hw, ac.trigger_side, "corner")
    else:
        mask = attention.baseline_mask(hw, ac.trigger_side, "random",
                                       derive_seed(cfg.seed, "random-mask"))
    mask.save(paths.mask)
    return mask


def cmd_train_clean(args) -> int:
    cfg = _load_config(args)
    out_root = _resolve_out_root(cfg, args)
    if cfg.deterministic:
        set_determinism(cfg.seed)
    train, test = _build_datasets(cfg)
    if args.resume:
        paths = open_run(out_root, args.resume)
    else:
        paths = RunPaths(out_root / new_run_id(cfg.dataset.name, cfg.arch, cfg.seed)).create()
        cfg.save(paths.config)
    _stage_clean(cfg, paths, train, test)
    if cfg.attack.mask_strategy == "attention":
        _stage_ran(cfg, paths, train)
    print(paths.run_id)
    return 0


def cmd_attack(args) -> int:
    cfg = _load_config(args)
    out_root = _resolve_out_root(cfg, args)
    if cfg.deterministic:
        set_determinism(cfg.seed)
    train, test = _build_datasets(cfg)
    if args.resume:
        paths = open_run(out_root, args.resume)
    else:
        if not args.train_first:
            raise ConfigError("attack needs --resume <run> with a clean checkpoint "
                              "or --train-first")
        paths = RunPaths(out_root / new_run_id(cfg.dataset.name, cfg.arch, cfg.seed)).create()
        cfg.save(paths.config)
    clean = _stage_clean(cfg, paths, train, test)
    ran = _stage_ran(cfg, paths, train) if cfg.attack.mask_strategy == "attention" else None

    if args.variant == "ablation":
        if paths.stage_done("attack"):
            log.info("attack stage already done")
            return 0
        attn_mask = _make_mask(cfg, paths, train, ran) \
            if cfg.attack.mask_strategy == "attention" else None
        rows = injection.run_ablation(train, cfg.attack, injection.ABLATION_VARIANTS,
                                      clean, attn_mask, test)
        with open(paths.ablation, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "asr", "cda", "mask"])
            for r in rows:
                writer.writerow([r.variant, f"{r.asr:.4f}", f"{r.cda:.4f}",
                                 r.mask_provenance])
        paths.mark_stage("attack")
        for r in rows:
            print(f"{r.variant}: ASR={r.asr:.4f} CDA={r.cda:.4f}")
        return 0

    if paths.stage_done("attack"):
        log.info("attack stage already done")
        result_trigger = TriggerSpec.load(paths.trigger)
        model = load_checkpoint(paths.backdoored_model)
        final_asr = metrics.asr(model, test, result_trigger, cfg.attack.target_label)
        final_cda = metrics.cda(model, test)
    else:
        mask = _make_mask(cfg, paths, train, ran)
        result = injection.co_optimize(clean, train, cfg.attack, mask, test)
        result.trigger.save(paths.trigger)
        save_checkpoint(result.model, paths.backdoored_model)
        result.save_trace(paths.trace)
        model, result_trigger = result.model, result.trigger
        final_asr = result.trace[result.best_iteration - 1].asr
        final_cda = result.trace[result.best_iteration - 1].cda
        paths.mark_stage("attack")

    sample = test.images[: min(256, len(test))]
    mean_ssim = float(np.mean([
        metrics.ssim(img, apply_trigger(img, result_trigger)) for img in sample]))
    recs = [
        metrics.MetricRecord("asr", final_asr, cfg.dataset.name, cfg.arch, "final"),
        metrics.MetricRecord("cda", final_cda, cfg.dataset.name, cfg.arch, "final"),
        metrics.MetricRecord("ssim", mean_ssim, cfg.dataset.name, cfg.arch, "final"),
    ]
    if cfg.arch == "cnn_small":
        clean_model = load_checkpoint(paths.clean_model)
        proxy = metrics.lpips_proxy(sample, apply_trigger(sample, result_trigger),
                                    metrics.conv_feature_fn(clean_model))
        recs.append(metrics.MetricRecord("lpips_proxy", proxy, cfg.dataset.name,
                                         cfg.arch, "final"))
    metrics.append_records(recs, paths.metrics_csv, paths.metrics_jsonl)
    print(f"ASR={final_asr:.4f} CDA={final_cda:.4f} SSIM={mean_ssim:.4f}")
    print(paths.run_id)
    return 0


def cmd_defend(args) -> int:
    cfg = _load_config(args)
    out_root = _resolve_out_root(cfg, args)
    if cfg.deterministic:
        set_determinism(cfg.seed)
    paths = open_run(out_root, args.run or args.resume)
    if not paths.stage_done("attack"):
        raise ConfigError(f"run {paths.run_id} has no completed attack stage")
    wanted = [d.strip() for d in (args.defenses or ",".join(cfg.defenses)).split(",") if d.strip()]
    train, test = _build_datasets(cfg)
    model = load_checkpoint(paths.backdoored_model)
    trig = TriggerSpec.load(paths.trigger)
    y_t = cfg.attack.target_label
    paths.defenses_dir.mkdir(exist_ok=True)
    paths.plots_dir.mkdir(exist_ok=True)
    seed = derive_seed(cfg.seed, "defend")

    for name in wanted:
        stage = f"defend:{name}"
        if paths.stage_done(stage):
            log.info("%s already done", stage)
            continue
        if name == "strip":
            samples = test.images[: min(200, len(test) // 2)]
            pool = test.images[len(test) // 2 :]
            report = defenses.strip_analyze(model, samples, pool, trigger=trig, seed=seed)
            _write_entropy_csv(report, paths.plots_dir / "entropy_hist.csv")
        elif name == "prune":
            report = defenses.prune_sweep(model, test, trig, y_t)
            report.save_curve("curve", paths.plots_dir / "prune_curve.csv",
                              ["fraction_pruned", "asr", "cda"])
        elif name == "nc":
            report = defenses.nc_scan(model, test.subset(range(min(256, len(test)))),
                                      budget=200, seed=seed)
        elif name == "nad":
            rng = np.random.default_rng(derive_seed(cfg.seed, "nad-subset"))
            idx = rng.choice(len(train), size=max(1, len(train) // 10), replace=False)
            _, report = defenses.nad_distill(model, train.subset(idx), test,
                                             trig, y_t, seed=seed)
        elif name == "patch":
            report = defenses.patch_process_defense(model, test, 0.1, 0.1, trig, y_t,
                                                    seed=seed)
        else:
            raise ConfigError(f"unknown defense {name!r}")
        report.save(paths.defenses_dir / f"{name}.json")
        paths.mark_stage(stage)
        print(f"{name}: {json.dumps(defenses._jsonable(report.verdict))}")
    return 0


def _write_entropy_csv(report: defenses.DefenseReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    clean = report.data["clean_entropies"]
    trig = report.data.get("triggered_entropies")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "entropy"])
        for v in clean:
            writer.writerow(["clean", f"{v:.6f}"])
        for v in (trig if trig is not None else []):
            writer.writerow(["triggered", f"{v:.6f}"])


def cmd_report(args) -> int:
    cfg = _load_config(args)
    out_root = _resolve_out_root(cfg, args)
    paths = open_run(out_root, args.run or args.resume)
    report = _collect_report(paths)
    paths.report_json.write_text(json.dumps(report, indent=2))
    lines = [f"run {paths.run_id}"]
    for m in report["metrics"]:
        lines.append(f"  {m['name']}: {m['value']:.4f}")
    for name, verdict in report["defenses"].items():
        lines.append(f"  defense {name}: {json.dumps(verdict)}")
    lines.append("  artifacts: " + ", ".join(report["artifacts"]))
    paths.report_txt.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if args.compare:
        other = _collect_report(open_run(out_root, args.compare))
        mine = {m["name"]: m["value"] for m in report["metrics"]}
        theirs = {m["name"]: m["value"] for m in other["metrics"]}
        print(f"compare {paths.run_id} vs {args.compare}")
        for name in sorted(set(mine) & set(theirs)):
            print(f"  {name}: {mine[name]:.4f} vs {theirs[name]:.4f} "
                  f"(delta {mine[name] - theirs[name]:+.4f})")
    return 0


def _collect_report(paths: RunPaths) -> dict:
    recs = []
    if paths.metrics_jsonl.exists():
        for line in paths.metrics_jsonl.read_text().splitlines():
            recs.append(json.loads(line))
    defense_reports = {}
    if paths.defenses_dir.is_dir():
        for f in sorted(paths.defenses_dir.glob("*.json")):
            defense_reports[f.stem] = json.loads(f.read_text())["verdict"]
    artifacts = sorted(
        str(p.relative_to(paths.root))
        for p in paths.root.rglob("*")
        if p.is_file() and ".stages" not in p.parts
    )
    ablation = None
    if paths.ablation.exists():
        with open(paths.ablation, newline="") as fh:
            ablation = list(csv.DictReader(fh))
    return {"run_id": paths.run_id, "metrics": recs, "defenses": defense_reports,
            "ablation": ablation, "artifacts": artifacts}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="backdoorlab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment YAML")
        p.add_argument("--out", help="output root (overrides env and config)")
        p.add_argument("--resume", help="existing run id to resume")
        p.add_argument("--deterministic", action="store_true",
                       help="force deterministic mode")

    p = sub.add_parser("train-clean", help="train the clean victim (and attention net)")
    common(p)
    p.set_defaults(func=cmd_train_clean)

    p = sub.add_parser("attack", help="run the full attack pipeline")
    common(p)
    p.add_argument("--mask", choices=["attention", "corner", "random"])
    p.add_argument("--variant", choices=["full", "ablation"], default="full")
    p.add_argument("--train-first", action="store_true",
                   help="train the clean model if no checkpoint exists")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", help="evaluate defenses against a finished attack")
    common(p)
    p.add_argument("--run", help="run id holding the attack artifacts")
    p.add_argument("--defenses", help="comma list: strip,prune,nc,nad,patch")
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("report", help="consolidated report for a run")
    common(p)
    p.add_argument("--run", help="run id")
    p.add_argument("--compare", help="second run id to diff against")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except BackdoorLabError as e:
        print(f"[{args.command}] failed: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001 - stable exit-code contract for CI
        print(f"[{args.command}] unexpected failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
