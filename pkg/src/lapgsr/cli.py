"""Command line: ``lapgsr {synth,pyramid,train,eval,infer,report,grid}``.

Each command prints its resolved configuration (including the seed) as a
``config`` JSON line first, and every command that writes files also writes
a sidecar JSON holding that configuration.  Precedence for training
settings is defaults < ``--config`` file < explicit flags.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from lapgsr.errors import LapGSRError

BICUBIC = "bicubic"


def _emit_config(config: dict) -> None:
    print("config " + json.dumps(config, sort_keys=True), flush=True)


def _sidecar(path, config: dict, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"config": config, **(extra or {})}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    from lapgsr.data import synth_generate

    config = {"command": "synth", "n": args.n, "seed": args.seed, "out": str(args.out),
              "width": args.width, "height": args.height}
    _emit_config(config)
    manifest = synth_generate(args.n, args.seed, args.out, (args.height, args.width))
    print(f"manifest {manifest}")
    return 0


# ---------------------------------------------------------------- pyramid

def cmd_pyramid(args) -> int:
    from lapgsr.data import decode_image, encode_image
    from lapgsr.plotting import pyramid_panels
    from lapgsr.pyramid import build_modified_pyramid, decompose, grayscale, to_display

    config = {"command": "pyramid", "image": str(args.image), "thermal": args.thermal and str(args.thermal),
              "out": str(args.out), "figure": args.figure, "seed": None}
    _emit_config(config)
    image = decode_image(args.image)[None]
    if image.shape[1] == 3:
        image = grayscale(image).data
    l3, l2, g2 = decompose(image)
    out = Path(args.out)
    written = [
        encode_image(out / "L3.png", to_display(l3.data[0, 0])),
        encode_image(out / "L2.png", to_display(l2.data[0, 0])),
        encode_image(out / "residual.png", g2.data[0]),
    ]
    panels = {"L3": to_display(l3.data[0, 0]), "L2": to_display(l2.data[0, 0]),
              "residual": np.round(np.clip(g2.data[0, 0], 0, 1) * 255)}
    if args.thermal:
        thermal = decode_image(args.thermal)[None]
        if thermal.shape[1] == 3:
            thermal = grayscale(thermal).data
        levels = build_modified_pyramid(image, thermal)
        written += [
            encode_image(out / "modified_L3.png", to_display(levels.L3.data[0, 0])),
            encode_image(out / "modified_L2.png", to_display(levels.L2.data[0, 0])),
            encode_image(out / "modified_L1.png", levels.L1.data[0]),
        ]
        panels["L1 (thermal)"] = np.round(levels.L1.data[0, 0] * 255)
    if args.figure:
        written.append(pyramid_panels(panels, out / "panels.png"))
    _sidecar(out / "pyramid.json", config, {"files": [p.name for p in written]})
    for p in written:
        print(f"wrote {p}")
    return 0


# ---------------------------------------------------------------- train

TRAIN_FLAGS = {
    "epochs": "epochs", "seed": "seed", "lam": "lam", "lr_g": "lr_g", "lr_d": "lr_d",
    "batch": "batch", "shift_limit": "shift_limit", "flip_prob": "flip_prob",
    "gan_variant": "gan_variant", "checkpoint_every": "checkpoint_every",
    "max_steps_per_epoch": "max_steps_per_epoch",
}


def resolve_train_config(args):
    from lapgsr.model import GeneratorConfig
    from lapgsr.training import TrainConfig

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {field: getattr(args, flag) for flag, field in TRAIN_FLAGS.items()
                 if getattr(args, flag) is not None}
    gen_over = {}
    if args.blocks is not None:
        gen_over.update(zip(("blocks_ltb", "blocks_mtb", "blocks_htb"), _check_triple(args.blocks, "--blocks")))
    if args.channels is not None:
        gen_over["channels"] = args.channels
    if gen_over:
        overrides["generator"] = GeneratorConfig.from_dict({**cfg.generator.to_dict(), **gen_over})
    return replace(cfg, **overrides)


def _check_triple(values, flag):
    if len(values) != 3:
        raise ValueError(f"{flag} takes three comma-separated values, got {values}")
    return values


def cmd_train(args) -> int:
    from lapgsr.data import load_dataset
    from lapgsr.metrics import bicubic_predictor, evaluate
    from lapgsr.plotting import training_curves
    from lapgsr.training import train_loop

    cfg = resolve_train_config(args)
    config = {"command": "train", "data": str(args.data), "out": str(args.out),
              "resume": args.resume and str(args.resume), "train": cfg.to_dict(), "seed": cfg.seed}
    _emit_config(config)
    mode = "gray" if cfg.generator.channels == 1 else "color"
    dataset = load_dataset(args.data, mode)
    out = Path(args.out)
    _sidecar(out / "config.json", config)
    result = train_loop(dataset, cfg, out, resume=args.resume, progress=print)
    baseline = evaluate(bicubic_predictor, dataset.val).mean_psnr if dataset.val else None
    fig = training_curves(result.log_path, out / "training_curves.png", baseline)
    print(f"log {result.log_path}")
    print(f"best {result.best_path}")
    print(f"last {result.last_path}")
    print(f"figure {fig}")
    return 0


# ---------------------------------------------------------------- eval

def _predictor(ckpt):
    from lapgsr.checkpoint import load_generator
    from lapgsr.metrics import bicubic_predictor, generator_predictor

    if str(ckpt) == BICUBIC:
        return bicubic_predictor, None
    gen = load_generator(ckpt)
    return generator_predictor(gen), gen.cfg


def _report_csv(report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "psnr", "ssim"])
    for sid, p, s in zip(report.ids, report.psnr, report.ssim):
        writer.writerow([sid, "inf" if np.isinf(p) else f"{p:.6f}", f"{s:.6f}"])
    return buf.getvalue()


def cmd_eval(args) -> int:
    from lapgsr.data import load_dataset
    from lapgsr.metrics import bicubic_predictor, evaluate
    from lapgsr.plotting import eval_scores

    predictor, gen_cfg = _predictor(args.ckpt)
    mode = args.mode or ("gray" if gen_cfg is None or gen_cfg.channels == 1 else "color")
    config = {"command": "eval", "ckpt": str(args.ckpt), "data": str(args.data), "split": args.split,
              "mode": mode, "generator": gen_cfg and gen_cfg.to_dict(), "seed": None}
    _emit_config(config)
    samples = load_dataset(args.data, mode).split(args.split)
    report = evaluate(predictor, samples, config)
    print(_report_csv(report), end="")
    print(f"summary {report.format()}")
    if args.out:
        out = Path(args.out)
        stem = f"eval_{args.split}"
        report.write_csv(out / f"{stem}.csv")
        report.write_json(out / f"{stem}.json")
        baseline = None if gen_cfg is None else evaluate(bicubic_predictor, samples)
        extra = {"summary": report.summary()}
        if baseline is not None:
            extra["bicubic"] = baseline.summary()
            print(f"bicubic {baseline.format()}")
        fig = eval_scores(report, out / f"{stem}.png", baseline)
        _sidecar(out / f"{stem}.run.json", config, extra)
        print(f"figure {fig}")
    return 0


# ---------------------------------------------------------------- infer

def cmd_infer(args) -> int:
    from lapgsr.checkpoint import load_generator
    from lapgsr.data import decode_image, encode_image
    from lapgsr.pyramid import grayscale

    gen = load_generator(args.ckpt)
    config = {"command": "infer", "ckpt": str(args.ckpt), "rgb": str(args.rgb),
              "thermal": str(args.thermal), "out": str(args.out),
              "generator": gen.cfg.to_dict(), "seed": None}
    _emit_config(config)
    guide = decode_image(args.rgb)[None]
    thermal = decode_image(args.thermal)[None]
    if gen.cfg.channels == 1:
        if guide.shape[1] == 3:
            guide = grayscale(guide).data
        if thermal.shape[1] == 3:
            thermal = grayscale(thermal).data
    pred = gen(guide, thermal).y.data[0]
    out = encode_image(args.out, pred)
    _sidecar(Path(args.out).with_suffix(".json"), config,
             {"output_extents": [int(pred.shape[2]), int(pred.shape[1])]})
    print(f"wrote {out} ({pred.shape[2]}x{pred.shape[1]})")
    return 0


# ---------------------------------------------------------------- report

def cmd_report(args) -> int:
    from lapgsr.model import REPORTED_BLOCK_ABLATION, GeneratorConfig, count_params, estimate_flops
    from lapgsr.plotting import cost_report
    from lapgsr.training import TrainConfig

    base = GeneratorConfig()
    if args.config:
        raw = json.loads(Path(args.config).read_text()) if Path(args.config).exists() else None
        if raw is None:
            raise FileNotFoundError(f"config file not found: {args.config}")
        base = TrainConfig.from_dict(raw).generator if "generator" in raw or "lam" in raw \
            else GeneratorConfig.from_dict(raw)
    over = base.to_dict()
    if args.blocks is not None:
        over.update(zip(("blocks_ltb", "blocks_mtb", "blocks_htb"), _check_triple(args.blocks, "--blocks")))
    if args.widths is not None:
        over.update(zip(("width_ltb", "width_mtb", "width_htb"), _check_triple(args.widths, "--widths")))
    if args.channels is not None:
        over["channels"] = args.channels
    cfg = GeneratorConfig.from_dict(over)
    hw = (args.hr_height, args.hr_width)
    config = {"command": "report", "generator": cfg.to_dict(), "hr_width": args.hr_width,
              "hr_height": args.hr_height, "ablation": args.ablation, "seed": None}
    _emit_config(config)

    def label(c):
        return f"{c.blocks_ltb}-{c.blocks_mtb}-{c.blocks_htb}"

    rows = [(label(cfg), count_params(cfg), estimate_flops(cfg, hw), "", "")]
    if args.ablation:
        for blocks, (params, gflops) in sorted(REPORTED_BLOCK_ABLATION.items()):
            c = GeneratorConfig.from_dict({**cfg.to_dict(), "blocks_ltb": blocks[0],
                                           "blocks_mtb": blocks[1], "blocks_htb": blocks[2]})
            rows.append((label(c), count_params(c), estimate_flops(c, hw), params, gflops))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["blocks", "params", "gflops", "reported_params", "reported_gflops"])
    for name, n, f, rp, rf in rows:
        writer.writerow([name, n, f"{f:.4f}", rp, rf])
    print(buf.getvalue(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(buf.getvalue())
        fig = cost_report([(r[0], r[1], r[2]) for r in rows], out / "report.png")
        _sidecar(out / "report.json", config, {"rows": [list(r) for r in rows]})
        print(f"figure {fig}")
    return 0


# ---------------------------------------------------------------- grid

def cmd_grid(args) -> int:
    from lapgsr.data import SPLITS, decode_image, encode_image, load_dataset
    from lapgsr.metrics import bicubic_predictor
    from lapgsr.plotting import comparison_strip

    predictor, gen_cfg = _predictor(args.ckpt)
    mode = "gray" if gen_cfg is None or gen_cfg.channels == 1 else "color"
    config = {"command": "grid", "ckpt": str(args.ckpt), "data": str(args.data), "ids": args.ids,
              "out": str(args.out), "columns": ["rgb", "ground_truth", "prediction", "bicubic"],
              "seed": None}
    _emit_config(config)
    dataset = load_dataset(args.data, mode)
    located = {s.id: (split, s) for split in SPLITS for s in dataset.split(split)}
    out = Path(args.out)
    written = []
    for sid in args.ids:
        if sid not in located:
            raise LapGSRError(f"id {sid!r} not found under {args.data}")
        split, s = located[sid]
        rgb = decode_image(Path(args.data) / split / "rgb" / f"{sid}.png")
        pred = predictor(s.guide[None], s.thermal_lr[None])[0]
        base = bicubic_predictor(None, s.thermal_lr[None])[0]
        written.append(encode_image(out / f"{sid}.png", comparison_strip([rgb, s.thermal_hr, pred, base])))
    _sidecar(out / "grid.json", config, {"files": [p.name for p in written]})
    for p in written:
        print(f"wrote {p}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lapgsr", description="Laplacian-pyramid guided thermal super-resolution.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic RGB/thermal corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pyramid", help="write pyramid levels of an image")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--thermal", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--figure", action="store_true", help="also write a panels.png overview")
    p.set_defaults(func=cmd_pyramid)

    p = sub.add_parser("train", help="train a generator")
    p.add_argument("--config", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--lr-g", dest="lr_g", type=float)
    p.add_argument("--lr-d", dest="lr_d", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--shift-limit", dest="shift_limit", type=float)
    p.add_argument("--flip-prob", dest="flip_prob", type=float)
    p.add_argument("--gan-variant", dest="gan_variant", choices=["lsgan", "vanilla", "wgan", "hinge"])
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--max-steps-per-epoch", dest="max_steps_per_epoch", type=int)
    p.add_argument("--blocks", type=_int_list)
    p.add_argument("--channels", type=int, choices=[1, 3])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint (or 'bicubic') on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--mode", choices=["gray", "color"])
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="super-resolve one thermal image")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--rgb", type=Path, required=True)
    p.add_argument("--thermal", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="parameter count and GFLOPs of a config")
    p.add_argument("--config", type=Path)
    p.add_argument("--hr-width", dest="hr_width", type=int, default=320)
    p.add_argument("--hr-height", dest="hr_height", type=int, default=240)
    p.add_argument("--blocks", type=_int_list)
    p.add_argument("--widths", type=_int_list)
    p.add_argument("--channels", type=int, choices=[1, 3])
    p.add_argument("--ablation", action="store_true", help="add the block-count ablation rows")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("grid", help="write rgb | truth | prediction | bicubic strips")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ids", type=lambda s: s.split(","), required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (LapGSRError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
