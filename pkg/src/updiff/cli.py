"""Command-line entry points: synth-data, train-ae, train-diff, sample,
evaluate, serve. Every command reads an optional YAML/JSON config file and
applies flag overrides on top; --seed is available everywhere.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import data as data_mod
from .autoencoder import train_autoencoder
from .config import ModelConfig, model_config_from_dict
from .pipeline import (
    TrainConfig,
    evaluate_model,
    load_autoencoder,
    load_bundle,
    sample,
    save_autoencoder,
    train_diffusion,
)


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    if path.endswith((".yaml", ".yml")):
        return yaml.safe_load(text) or {}
    return json.loads(text)


def _model_config(file_cfg: dict, args: argparse.Namespace) -> ModelConfig:
    section = dict(file_cfg.get("model", {}))
    if getattr(args, "resolution", None) is not None:
        section["resolution"] = args.resolution
    if getattr(args, "timesteps", None) is not None:
        section.setdefault("schedule", {})
        section["schedule"] = dict(section["schedule"], steps=args.timesteps)
    return model_config_from_dict(section)


def _train_config(file_cfg: dict, args: argparse.Namespace) -> TrainConfig:
    section = dict(file_cfg.get("train", {}))
    for key, attr in (
        ("learning_rate", "lr"),
        ("max_steps", "steps"),
        ("batch_size", "batch_size"),
        ("warmup_steps", "warmup"),
        ("freeze_mode", "freeze_mode"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            section[key] = value
    if args.seed is not None:
        section["seed"] = args.seed
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in section.items() if k in known})


def _load_image_tensor(path: str) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"))
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1)


def _save_image_tensor(tensor: torch.Tensor, path: str) -> None:
    arr = ((tensor.permute(1, 2, 0).numpy() + 1.0) * 127.5).round().clip(0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def cmd_synth_data(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    counts = {"train": args.n, "val": args.val_n, "test": args.test_n}
    for i, (split, n) in enumerate(counts.items()):
        if n <= 0:
            continue
        triplets = data_mod.generate_synthetic(n, resolution=args.resolution, seed=seed + i)
        manifest = data_mod.write_dataset(triplets, args.out, split)
        print(f"wrote {manifest.count} triplets to {args.out}/{split} at {manifest.resolution}px")
    return 0


def cmd_train_ae(args: argparse.Namespace) -> int:
    file_cfg = load_config_file(args.config)
    model_cfg = _model_config(file_cfg, args)
    train_cfg = dict(file_cfg.get("ae_train", {}))
    if args.steps is not None:
        train_cfg["steps"] = args.steps
    if args.lr is not None:
        train_cfg["learning_rate"] = args.lr
    if args.batch_size is not None:
        train_cfg["batch_size"] = args.batch_size
    seed = args.seed if args.seed is not None else 0

    train = data_mod.load_cd_dataset(args.data, "train")
    val = data_mod.load_cd_dataset(args.data, "val")
    images = torch.stack([img for t in train for img in (t.pre, t.post)])
    val_images = torch.stack([img for t in val for img in (t.pre, t.post)])
    result = train_autoencoder(
        images, val_images, model_cfg.autoencoder, seed=seed, log_every=args.log_every, **train_cfg
    )
    save_autoencoder(args.out, result.model, model_cfg, seed=seed, step=result.steps)
    print(
        f"stage-1 done in {result.seconds:.1f}s: val loss "
        f"{result.initial_val_loss:.5f} -> {result.final_val_loss:.5f}; saved to {args.out}"
    )
    return 0


def cmd_train_diff(args: argparse.Namespace) -> int:
    file_cfg = load_config_file(args.config)
    model_cfg = _model_config(file_cfg, args)
    train_cfg = _train_config(file_cfg, args)
    if args.log_every:
        train_cfg.log_every = args.log_every
    ae, _ = load_autoencoder(args.ae)
    train = data_mod.load_cd_dataset(args.data, "train")
    val = data_mod.load_cd_dataset(args.data, "val")
    result = train_diffusion(
        list(train), ae, model_cfg, train_cfg, val_dataset=list(val), checkpoint_dir=args.out
    )
    print(
        f"stage-2 done in {result.seconds:.1f}s: val loss "
        f"{result.initial_val_loss:.4f} -> {result.final_val_loss:.4f}; saved to {args.out}"
    )
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.checkpoint)
    pre = _load_image_tensor(args.pre)
    with Image.open(args.mask) as img:
        mask_arr = np.asarray(img.convert("L"))
    mask = torch.from_numpy((mask_arr >= 128).astype(np.float32)).unsqueeze(0)
    seed = args.seed if args.seed is not None else 0
    out = sample(pre, mask, bundle, seed=seed, sampler_variant=args.variant)
    _save_image_tensor(out, args.out)
    print(f"wrote {args.out} (seed {seed})")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.checkpoint)
    triplets = list(data_mod.load_cd_dataset(args.data, args.split))
    if args.limit:
        triplets = triplets[: args.limit]
    seed = args.seed if args.seed is not None else 0
    report = evaluate_model(triplets, bundle, seed=seed, sampler_variant=args.variant)
    text = report.render()
    out_path = Path(args.out) if args.out else Path(args.checkpoint) / f"eval-{args.split}.txt"
    out_path.write_text(text)
    print(text, end="")
    print(f"report written to {out_path}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(checkpoint=args.checkpoint, sessions_dir=args.sessions)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="updiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="YAML/JSON config file")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth-data", help="generate a synthetic triplet dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--val-n", dest="val_n", type=int, default=64)
    p.add_argument("--test-n", dest="test_n", type=int, default=64)
    p.add_argument("--resolution", type=int, default=64)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-ae", help="stage-1 reconstruction training")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--log-every", dest="log_every", type=int, default=0)
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("train-diff", help="stage-2 diffusion training")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ae", required=True, help="stage-1 checkpoint directory")
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--timesteps", type=int, default=None, help="schedule steps T")
    p.add_argument("--steps", type=int, default=None, help="optimizer steps")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--freeze-mode", dest="freeze_mode", default=None)
    p.add_argument("--log-every", dest="log_every", type=int, default=0)
    p.set_defaults(func=cmd_train_diff)

    p = sub.add_parser("sample", help="one conditional generation")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pre", required=True, help="pre-change image PNG")
    p.add_argument("--mask", required=True, help="change map PNG")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="beta", choices=["beta", "sqrt_beta"])
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--variant", default="beta", choices=["beta", "sqrt_beta"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--sessions", default="sessions")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
