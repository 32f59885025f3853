"""Command-line entry point: ``r2upp {train,predict,evaluate,params,graph,synth}``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 shape error,
5 checkpoint mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, arch_values, load_run_config
from .data import ImageSample, extract_patches, load_mask, load_pgm, load_samples, read_manifest, save_pgm, synth_dataset, write_samples
from .errors import ConfigError, R2UppError, ShapeError
from .graph import PRESETS, ArchitectureConfig, NestedUNet, build_plan, count_parameters, dump_plan, parameter_table
from .metrics import METRIC_NAMES, all_metrics, binarize, report_csv
from .trainer import fit, history_csv, predict_image, summarize

log = logging.getLogger("r2upp")


def model_label(arch: ArchitectureConfig) -> str:
    name = {
        ("simple", "plain"): "U-NET",
        ("simple", "rrcl"): "R2U-NET",
        ("dense", "plain"): "U-NET++",
        ("dense", "rrcl"): "R2U++",
    }[(arch.skip_style, arch.block_kind)]
    return f"{name} t={arch.t}" if arch.block_kind == "rrcl" else name


def _config_from_args(args, require_data: bool = False) -> RunConfig:
    extra = {}
    if getattr(args, "seed", None) is not None:
        extra["trainer.seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        extra["trainer.trials"] = args.trials
    if getattr(args, "deep_supervision", None) is not None:
        extra["trainer.deep_supervision"] = args.deep_supervision == "on"
    return load_run_config(args.config, args.set or (), extra, require_data=require_data)


def _as_patches(samples: Sequence[ImageSample], size: int, stride: int, edge: bool) -> list[ImageSample]:
    out = []
    for s in samples:
        grid, imgs = extract_patches(s.image, size, stride, edge)
        _, masks = extract_patches(s.mask, size, stride, edge)
        out += [ImageSample(imgs[k], masks[k], f"{s.id}@{r},{c}") for k, (r, c) in enumerate(grid.anchors)]
    return out


def _load_split(cfg: RunConfig, key: str) -> list[ImageSample]:
    return load_samples(cfg[key], cfg.get("data.crop"), cfg.get("data.resize"))


def _checkpoint_extra(cfg: RunConfig, kind: str, best_epoch: int) -> dict:
    return {
        "kind": kind,
        "best_epoch": best_epoch,
        "patch": {"size": cfg.get("patch.size"), "stride": cfg.get("patch.stride")},
        "data": {"crop": cfg.get("data.crop"), "resize": cfg.get("data.resize")},
        "trainer": cfg.trainer().to_dict(),
    }


def run_training(cfg: RunConfig, out_dir: Path) -> dict:
    """Train once with ``cfg`` and write best/final checkpoints plus history."""
    arch, tc = cfg.arch(), cfg.trainer()
    train = _load_split(cfg, "data.train_manifest")
    val = _load_split(cfg, "data.val_manifest") if cfg.get("data.val_manifest") else train
    size = cfg.get("patch.size")
    if size is not None:
        stride = cfg.get("patch.stride") or size
        edge = cfg.get("patch.edge_anchored_train")
        train = _as_patches(train, size, stride, edge)
        val = _as_patches(val, size, stride, edge)
    model = NestedUNet(arch, seed=tc.seed)
    model.check_input(np.zeros((1, arch.in_channels) + train[0].image.shape))
    result = fit(model, train, val, tc)

    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "best.ckpt", model, _checkpoint_extra(cfg, "best", result.best_epoch))
    model.load_state(result.final_state)
    save_checkpoint(out_dir / "final.ckpt", model, _checkpoint_extra(cfg, "final", result.best_epoch))
    model.load_state(result.best_state)
    (out_dir / "history.csv").write_text(history_csv(result.history))
    return {"best_epoch": result.best_epoch, "epochs": len(result.history)}


def cmd_train(args) -> int:
    cfg = _config_from_args(args, require_data=True)
    trials = cfg["trainer.trials"]
    out_root = Path(cfg["output_dir"])
    for k in range(trials):
        trial_cfg = cfg.with_overrides({"trainer.seed": cfg["trainer.seed"] + k}) if trials > 1 else cfg
        out_dir = out_root / f"trial_{k}" if trials > 1 else out_root
        info = run_training(trial_cfg, out_dir)
        print(f"{out_dir}: {info['epochs']} epochs, best epoch {info['best_epoch']}")
    return 0


def _parse_mode(mode: str, arch: ArchitectureConfig) -> str | int:
    if mode == "ensemble":
        return "ensemble"
    if mode.startswith("L") and mode[1:].isdigit():
        q = int(mode[1:])
        if not 1 <= q <= arch.depth:
            raise ConfigError(f"--mode {mode}: depth must be in L1..L{arch.depth}")
        if arch.skip_style != "dense" and q != arch.depth:
            raise ConfigError(f"--mode {mode}: only dense models embed lower depths")
        return q
    raise ConfigError(f"--mode must be 'ensemble' or L1..L{arch.depth}, got {mode!r}")


def _open_checkpoint(args) -> tuple[NestedUNet, dict]:
    expect = _config_from_args(args).arch() if args.config or args.set else None
    return load_checkpoint(args.checkpoint, expect=expect)


def _patch_settings(args, header: dict) -> tuple[int | None, int | None]:
    stored = header.get("extra", {}).get("patch", {})
    size = args.patch_size if args.patch_size is not None else stored.get("size")
    stride = args.stride if args.stride is not None else stored.get("stride")
    return size, stride


def _prepare_image(image: np.ndarray, header: dict) -> np.ndarray:
    from .data import crop, resize

    prep = header.get("extra", {}).get("data", {})
    if prep.get("crop"):
        r0, r1, c0, c1 = prep["crop"]
        image = crop(image, (r0, r1), (c0, c1))
    if prep.get("resize"):
        image = resize(image, prep["resize"][0], prep["resize"][1], "bilinear")
    return image


def cmd_predict(args) -> int:
    model, header = _open_checkpoint(args)
    mode = _parse_mode(args.mode, model.config)
    size, stride = _patch_settings(args, header)
    image = _prepare_image(load_pgm(args.image), header)
    prob = predict_image(model, image, mode, size, stride)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    mask = binarize(prob, 0.5)
    save_pgm(mask.astype(np.float64), f"{prefix}_mask.pgm")
    save_pgm(prob, f"{prefix}_prob.pgm")
    np.save(f"{prefix}_prob.npy", prob)
    print(f"wrote {prefix}_mask.pgm, {prefix}_prob.pgm, {prefix}_prob.npy")
    return 0


def cmd_evaluate(args) -> int:
    entries = read_manifest(args.manifest)
    dataset = args.dataset or Path(args.manifest).stem
    if args.predictions:
        preds = {e.id: e.mask_path for e in read_manifest(args.predictions)}
        model_name = args.model or "predictions"
        header: dict = {}
        model = None
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint or --predictions")
        model, header = _open_checkpoint(args)
        mode = _parse_mode(args.mode, model.config)
        size, stride = _patch_settings(args, header)
        model_name = args.model or model_label(model.config)

    rows = []
    for e in entries:
        gt = load_mask(e.mask_path)
        if model is None:
            if e.id not in preds:
                raise ConfigError(f"no prediction listed for {e.id}")
            pred = load_mask(preds[e.id])
        else:
            gt = (_prepare_image(gt.astype(np.float64), header) >= 0.5).astype(np.uint8)
            prob = predict_image(model, _prepare_image(load_pgm(e.image_path), header), mode, size, stride)
            pred = binarize(prob, 0.5)
        if pred.shape != gt.shape:
            raise ShapeError(f"{e.id}: prediction {pred.shape} vs ground truth {gt.shape}")
        row = {"dataset": f"{dataset}/{e.id}", "model": model_name}
        row.update(all_metrics(gt, pred))
        rows.append(row)
    mean, sd = summarize(rows)
    rows.append({"dataset": dataset, "model": model_name, **mean})
    text = report_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    for k in METRIC_NAMES:
        print(f"{k}: {mean[k]:.4f} +- {sd[k]:.4f}", file=sys.stderr)
    return 0


def params_report(cfg: RunConfig | None) -> dict:
    presets = []
    for key, (name, arch, ref) in PRESETS.items():
        n = count_parameters(arch)
        presets.append({
            "key": key,
            "name": name,
            "t": arch.t if arch.block_kind == "rrcl" else None,
            "params": n,
            "reference": ref,
            "config": arch_values(arch),
        })
    report = {"presets": presets}
    if cfg is not None:
        arch = cfg.arch()
        rows = parameter_table(arch)
        report["config"] = {
            "config": arch_values(arch),
            "components": [{"name": k, "params": v} for k, v in rows],
            "total": count_parameters(arch),
        }
    return report


def cmd_params(args) -> int:
    cfg = _config_from_args(args) if (args.config or args.set) else None
    report = params_report(cfg)
    if args.json:
        print(json.dumps(report, indent=2))
        return 0
    print(f"{'network':<10} {'t':>2} {'params':>12} {'table':>8} {'delta':>8}")
    for p in report["presets"]:
        t = "-" if p["t"] is None else str(p["t"])
        delta = p["params"] / p["reference"] - 1
        print(f"{p['name']:<10} {t:>2} {p['params']:>12,d} {p['reference'] / 1e6:>7.1f}M {delta:>+8.2%}")
    if "config" in report:
        print()
        for row in report["config"]["components"]:
            print(f"{row['name']:<22} {row['params']:>12,d}")
        print(f"{'total':<22} {report['config']['total']:>12,d}")
    return 0


def cmd_graph(args) -> int:
    cfg = _config_from_args(args)
    sys.stdout.write(dump_plan(build_plan(cfg.arch())))
    return 0


def cmd_synth(args) -> int:
    samples = synth_dataset(args.seed, args.count, args.size)
    manifest = write_samples(args.out, samples)
    print(f"wrote {len(samples)} samples to {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="r2upp", description="Nested recurrent-residual U-Net toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_opts(p, with_train=False):
        p.add_argument("--config", help="flat JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        if with_train:
            p.add_argument("--seed", type=int)
            p.add_argument("--trials", type=int)
            p.add_argument("--deep-supervision", choices=("on", "off"))

    p = sub.add_parser("train", help="train a model from a manifest")
    config_opts(p, with_train=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment one PGM image")
    config_opts(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mode", default="ensemble", help="ensemble or L1..L4")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metric report over a manifest")
    config_opts(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictions", help="manifest whose mask column holds predicted masks")
    p.add_argument("--mode", default="ensemble")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--dataset")
    p.add_argument("--model")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("params", help="parameter counts of the reference presets")
    config_opts(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("graph", help="dump the node plan")
    config_opts(p)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except R2UppError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
