"""Command-line surface for the whole pipeline.

Subcommands: gen-data, make-gt, train, eval, infer, gradcheck.  Machine
readable results go to stdout as JSON; progress and human summaries go
to stderr.  Exit codes: 0 success, 2 I/O or usage, 3 data integrity,
4 checkpoint, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import config_snapshot, load_config
from .errors import CheckpointError, DataError, NumericalError
from .fileio import (
    content_hash,
    read_annotations,
    read_checkpoint,
    read_dmap,
    read_image,
    write_annotations,
    write_checkpoint,
    write_dmap,
    write_image,
    write_manifest,
)
from .gradcheck import check_model_gradients
from .groundtruth import (
    downsample_sum,
    generate_density_map,
    make_seg_mask,
    resize_dims,
)
from .metrics import evaluate_counts, predicted_count, psnr, ssim
from .model import ModelConfig, config_from_params, init_params, tiny_config
from .synthetic import SceneSpec, synth_scene
from .training import (
    TrainConfig,
    build_sample,
    evaluate_model,
    infer,
    train,
    write_history_csv,
)

EXIT_OK = 0
EXIT_IO = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_NUMERICAL = 5


def _log(msg):
    print(msg, file=sys.stderr)


def _emit(payload):
    print(json.dumps(payload, sort_keys=True))


def _parse_size(text):
    h, _, w = text.lower().partition("x")
    return int(h), int(w)


def _parse_range(text):
    a, _, b = text.partition(":")
    return int(a), int(b)


def _load_dataset(data_dir):
    data_dir = Path(data_dir)
    ann_path = data_dir / "annotations.json"
    if not ann_path.exists():
        raise DataError(f"missing annotation file {ann_path}")
    images = {}
    sizes = {}
    for png in sorted(data_dir.glob("*.png")):
        if png.name.endswith(".seg.png"):
            continue
        img = read_image(png)
        images[png.name] = img
        sizes[png.name] = img.shape[:2]
    entries = read_annotations(ann_path, sizes)
    annotated = {name for name, _ in entries}
    for name in images:
        if name not in annotated:
            raise DataError(f"image {name!r} has no annotation entry")
    return data_dir, images, entries


def cmd_gen_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SceneSpec(size=_parse_size(args.size), count_range=_parse_range(args.count_range))
    entries = []
    outputs = []
    for i in range(args.scenes):
        image, ann = synth_scene(spec, rng_seed=[args.seed, i])
        name = f"scene_{i:04d}.png"
        write_image(out / name, image)
        entries.append((name, ann))
        outputs.append(name)
    write_annotations(out / "annotations.json", entries)
    outputs.append("annotations.json")
    write_manifest(
        out / "manifest.json",
        command="gen-data",
        seed=args.seed,
        config={
            "scenes": args.scenes,
            "size": list(spec.size),
            "count_range": list(spec.count_range),
        },
        inputs_hash=content_hash([]),
        outputs=outputs,
    )
    _log(f"wrote {args.scenes} scenes to {out}")
    return EXIT_OK


def cmd_make_gt(args):
    data_dir, images, entries = _load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, ann in entries:
        dmap = generate_density_map(ann, sigma=args.sigma)
        d4 = downsample_sum(dmap, 4)
        d8 = downsample_sum(dmap, 8)
        mask = make_seg_mask(d4, args.tau)
        stem = Path(name).stem
        for suffix, payload in ((".dmap", dmap), (".q4.dmap", d4), (".q8.dmap", d8)):
            write_dmap(out / f"{stem}{suffix}", payload)
            outputs.append(f"{stem}{suffix}")
        write_image(out / f"{stem}.seg.png", mask)
        outputs.append(f"{stem}.seg.png")
    inputs = [data_dir / "annotations.json"] + [data_dir / n for n in images]
    write_manifest(
        out / "manifest.json",
        command="make-gt",
        seed=0,
        config={"sigma": args.sigma, "tau": args.tau},
        inputs_hash=content_hash(inputs),
        outputs=outputs,
    )
    _log(f"wrote ground truth for {len(entries)} images to {out}")
    return EXIT_OK


def cmd_train(args):
    model_cfg, train_cfg = load_config(args.config) if args.config else (
        ModelConfig(), TrainConfig())
    data_dir, images, entries = _load_dataset(args.data)
    samples = [
        build_sample(images[name], ann, sigma=train_cfg.sigma) for name, ann in entries
    ]
    params = init_params(model_cfg, train_cfg.seed)
    params, history = train(params, model_cfg, samples, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_checkpoint(out / "checkpoint.ifnw", params)
    write_history_csv(out / "history.csv", history)
    inputs = [data_dir / "annotations.json"] + [data_dir / n for n in images]
    if args.config:
        inputs.append(Path(args.config))
    write_manifest(
        out / "manifest.json",
        command="train",
        seed=train_cfg.seed,
        config=config_snapshot(model_cfg, train_cfg),
        inputs_hash=content_hash(inputs),
        outputs=["checkpoint.ifnw", "history.csv"],
    )
    final = history[-1]["loss_total"] if history else float("nan")
    _log(f"trained {train_cfg.epochs} epochs; final mean loss {final:.6f}")
    _emit({"final_loss": final, "epochs": train_cfg.epochs})
    return EXIT_OK


def _eval_oracle(entries, sigma):
    preds, gts, psnrs, ssims = [], [], [], []
    for name, ann in entries:
        dmap4 = downsample_sum(generate_density_map(ann, sigma=sigma), 4)
        preds.append(predicted_count(dmap4.values))
        gts.append(ann.count)
        if ann.count > 0 and min(dmap4.values.shape) >= 11:
            psnrs.append(psnr(dmap4, dmap4))
            ssims.append(ssim(dmap4, dmap4))
    mae, mse = evaluate_counts(preds, gts)
    return {
        "mae": mae,
        "mse": mse,
        "psnr": float(np.mean(psnrs)) if psnrs else float("nan"),
        "ssim": float(np.mean(ssims)) if ssims else float("nan"),
    }


def cmd_eval(args):
    data_dir, images, entries = _load_dataset(args.data)
    if args.oracle:
        report = _eval_oracle(entries, args.sigma)
    else:
        if not args.ckpt:
            raise ValueError("--ckpt is required unless --oracle is given")
        params = read_checkpoint(args.ckpt)
        model_cfg = config_from_params(params)
        pairs = [(images[name], ann) for name, ann in entries]
        report = evaluate_model(params, model_cfg, pairs, sigma=args.sigma).as_dict()
    _log(
        f"images={len(entries)} mae={report['mae']:.4f} mse={report['mse']:.4f} "
        f"psnr={report['psnr']:.2f} ssim={report['ssim']:.4f}"
    )
    _emit(report)
    return EXIT_OK


def cmd_infer(args):
    params = read_checkpoint(args.ckpt)
    model_cfg = config_from_params(params)
    image = read_image(args.image)
    density, count, mask = infer(image, params, model_cfg)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    write_dmap(out, density)
    mask_path = out.with_suffix(out.suffix + ".mask.png")
    write_image(mask_path, mask)
    write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"),
        command="infer",
        seed=0,
        config={"image": str(args.image), "ckpt": str(args.ckpt)},
        inputs_hash=content_hash([args.image, args.ckpt]),
        outputs=[out.name, mask_path.name],
    )
    _log(f"wrote {out} and {mask_path}")
    _emit({"count": count})
    return EXIT_OK


def cmd_gradcheck(args):
    if args.config:
        model_cfg, _ = load_config(args.config)
    else:
        model_cfg = tiny_config()
    err = check_model_gradients(model_cfg, size=args.size)
    _emit({"max_rel_error": err})
    if not err < args.tolerance:
        _log(f"FAIL: max_rel_error {err:.3e} >= {args.tolerance:g}")
        return EXIT_NUMERICAL
    _log(f"ok: max_rel_error {err:.3e} < {args.tolerance:g}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fusioncount",
        description="Crowd counting with cross-column information fusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--size", default="64x64")
    p.add_argument("--count-range", default="3:12")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("make-gt", help="build density maps and masks")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--tau", type=float, default=1e-3)
    p.set_defaults(func=cmd_make_gt)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself (sanity check)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run a checkpoint on one image")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--config", default=None)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_IO
    except DataError as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except CheckpointError as exc:
        _log(f"checkpoint error: {exc}")
        return EXIT_CHECKPOINT
    except NumericalError as exc:
        _log(f"numerical error: {exc}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
