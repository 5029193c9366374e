"""Command-line entry point.

One config file drives everything; subcommands run the pipeline stages:

    augsal generate-data  -c cfg.yaml            # synthetic train/val splits
    augsal train-backbone -c cfg.yaml            # denoising backbone
    augsal train-readouts -c cfg.yaml            # property + class heads
    augsal train-saliency -c cfg.yaml [--augment]
    augsal edit           -c cfg.yaml --kind contrast_increase --alpha 1.8
    augsal augment        -c cfg.yaml --n 10     # pre-generate edit cache
    augsal evaluate       -c cfg.yaml --split val

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
Every run is reproducible from (config, seed); outputs carry the config hash.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .augmentor import AugmentationEngine, sample_step
from .backbone import BackboneConfig, TinyBackbone, train_tiny_backbone
from .config import RunConfig, load_config
from .core import EditSpec, ImageTensor, SaliencyMap, resize_bilinear
from .data import (generate_synthetic, load_dataset, load_examples,
                   load_image_png, load_saliency, save_image_png)
from .editor import (IDENTITY_ALPHA, compute_gamma, run_edit_pipeline,
                     save_edit_result)
from .errors import ConfigError, DataError, NumericalError, ValidationError
from .metrics import evaluate, format_report_table
from .objectives import LossWeights
from .photometrics import PopulationStats, population_stats
from .core import PropertyVector
from .readouts import (SaliencyPredictor, build_heads, train_readouts,
                       train_saliency)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _train_examples(cfg: RunConfig):
    manifest = load_dataset(cfg.dataset.root, cfg.dataset.train_split)
    return load_examples(manifest, num_classes=cfg.dataset.num_classes)


def _build_backbone(cfg: RunConfig) -> TinyBackbone:
    bb_cfg = dataclasses.replace(cfg.backbone, seed=cfg.seed)
    if bb_cfg.implementation != "tiny":
        raise ConfigError("the CLI drives the tiny backbone; pretrained adapters "
                          "are wired in programmatically")
    return TinyBackbone(bb_cfg)


def _load_backbone(cfg: RunConfig) -> TinyBackbone:
    backbone = _build_backbone(cfg)
    arrays, _ = ckpt.load_checkpoint(cfg.out / "backbone")
    backbone.load_state_arrays(arrays)
    return backbone


def _load_readout_stage(cfg: RunConfig, backbone: TinyBackbone):
    arrays, _ = ckpt.load_checkpoint(cfg.out / "readouts")
    torch.manual_seed(cfg.seed + 1)
    llfr, hlfr, _ = build_heads(backbone.config, cfg.readouts)
    ckpt.load_module_arrays(llfr, arrays, "llfr.")
    ckpt.load_module_arrays(hlfr, arrays, "hlfr.")
    ckpt.load_module_arrays(backbone.aggregation, arrays, "aggregation.")
    stats = PopulationStats(mean=PropertyVector.from_array(arrays["stats.mean"]),
                            std=PropertyVector.from_array(arrays["stats.std"]))
    return llfr, hlfr, stats


def _load_saliency_stage(cfg: RunConfig, backbone: TinyBackbone):
    arrays, _ = ckpt.load_checkpoint(cfg.out / "saliency")
    torch.manual_seed(cfg.seed + 2)
    _, _, sr = build_heads(backbone.config, cfg.readouts)
    ckpt.load_module_arrays(sr, arrays, "sr.")
    ckpt.load_module_arrays(backbone.aggregation, arrays, "aggregation.")
    return sr


def _gamma_for(cfg: RunConfig, backbone: TinyBackbone):
    fit = backbone.approximate_decoder_matrix(
        n_fit=cfg.edit.decoder_fit_samples, seed=cfg.seed)
    return compute_gamma(fit.matrix)


# -- subcommands ---------------------------------------------------------------

def _cmd_generate_data(cfg: RunConfig, args) -> int:
    d = cfg.dataset
    generate_synthetic(d.root, d.synthetic_n_train, seed=cfg.seed,
                       split=d.train_split, dims=d.synthetic_dims,
                       n_fixations=d.synthetic_fixations,
                       max_objects=d.synthetic_max_objects)
    generate_synthetic(d.root, d.synthetic_n_val, seed=cfg.seed + 1,
                       split=d.val_split, dims=d.synthetic_dims,
                       n_fixations=d.synthetic_fixations,
                       max_objects=d.synthetic_max_objects)
    _write_json(Path(d.root) / "generated.json",
                {"config_hash": cfg.config_hash(),
                 "splits": {d.train_split: d.synthetic_n_train,
                            d.val_split: d.synthetic_n_val}})
    print(f"generated {d.synthetic_n_train}+{d.synthetic_n_val} images under {d.root}")
    return EXIT_OK


def _cmd_train_backbone(cfg: RunConfig, args) -> int:
    examples = _train_examples(cfg)
    backbone = _build_backbone(cfg)
    if args.resume:
        arrays, _ = ckpt.load_checkpoint(cfg.out / "backbone")
        backbone.load_state_arrays(arrays)
    steps = args.steps if args.steps is not None else cfg.training.backbone_steps
    log = train_tiny_backbone(backbone, [e.image for e in examples],
                              [e.caption for e in examples], steps=steps,
                              lr=cfg.training.backbone_lr,
                              batch_size=cfg.training.batch_size, seed=cfg.seed)
    ckpt.save_checkpoint(cfg.out / "backbone", backbone.state_arrays(),
                         meta={"stage": "backbone", "config_hash": cfg.config_hash(),
                               "steps": steps})
    _write_csv(cfg.out / "logs" / "backbone.csv",
               ("step", "phase", "loss", "loss_denoise", "loss_recon"), log)
    _write_json(cfg.out / "logs" / "backbone.meta.json",
                {"config_hash": cfg.config_hash(), "steps": steps})
    print(f"trained backbone for {steps} denoiser steps; final loss "
          f"{log[-1][2]:.5f}" if log else "trained backbone (0 steps)")
    return EXIT_OK


def _cmd_train_readouts(cfg: RunConfig, args) -> int:
    examples = _train_examples(cfg)
    backbone = _load_backbone(cfg)
    torch.manual_seed(cfg.seed + 1)
    llfr, hlfr, _ = build_heads(backbone.config, cfg.readouts)
    if args.resume:
        llfr, hlfr, _stats = _load_readout_stage(cfg, backbone)
    steps = args.steps if args.steps is not None else cfg.training.readout_steps
    result = train_readouts(examples, backbone, llfr, hlfr, cfg.readouts,
                            steps=steps, lr_features=cfg.training.lr_features,
                            lr_readouts=cfg.training.lr_readouts,
                            batch_size=cfg.training.batch_size, seed=cfg.seed + 1,
                            weights=cfg.loss_weights)
    stats = population_stats([e.image for e in examples],
                             cfg.edit.stats_patches_per_image, seed=cfg.seed,
                             min_frac=cfg.edit.stats_patch_frac[0],
                             max_frac=cfg.edit.stats_patch_frac[1])
    arrays = {}
    arrays.update(ckpt.module_arrays(llfr, "llfr."))
    arrays.update(ckpt.module_arrays(hlfr, "hlfr."))
    arrays.update(ckpt.module_arrays(backbone.aggregation, "aggregation."))
    arrays["stats.mean"] = stats.mean.as_array()
    arrays["stats.std"] = stats.std.as_array()
    ckpt.save_checkpoint(cfg.out / "readouts", arrays,
                         meta={"stage": "readouts", "config_hash": cfg.config_hash(),
                               "steps": steps})
    _write_csv(cfg.out / "logs" / "readouts.csv", result.header, result.log)
    _write_json(cfg.out / "logs" / "readouts.meta.json",
                {"config_hash": cfg.config_hash(), "steps": steps})
    print(f"trained readouts for {steps} steps")
    return EXIT_OK


def _cmd_train_saliency(cfg: RunConfig, args) -> int:
    examples = _train_examples(cfg)
    backbone = _load_backbone(cfg)
    llfr, _hlfr, stats = _load_readout_stage(cfg, backbone)
    torch.manual_seed(cfg.seed + 2)
    _, _, sr = build_heads(backbone.config, cfg.readouts)
    if args.resume:
        sr = _load_saliency_stage(cfg, backbone)
    engine = None
    if args.augment:
        engine = AugmentationEngine(cfg.augmentor, backbone, llfr, stats,
                                    _gamma_for(cfg, backbone),
                                    pivot=cfg.edit.pivot,
                                    max_halvings=cfg.edit.max_halvings)
    steps = args.steps if args.steps is not None else cfg.training.saliency_steps
    result = train_saliency(examples, backbone, sr, steps=steps,
                            lr_features=cfg.training.lr_features,
                            lr_readouts=cfg.training.lr_readouts,
                            batch_size=cfg.training.batch_size, seed=cfg.seed + 2,
                            weights=cfg.loss_weights, augment_engine=engine)
    arrays = {}
    arrays.update(ckpt.module_arrays(sr, "sr."))
    arrays.update(ckpt.module_arrays(backbone.aggregation, "aggregation."))
    ckpt.save_checkpoint(cfg.out / "saliency", arrays,
                         meta={"stage": "saliency", "config_hash": cfg.config_hash(),
                               "steps": steps, "augmented": bool(args.augment)})
    name = "saliency_augmented" if args.augment else "saliency"
    _write_csv(cfg.out / "logs" / f"{name}.csv", result.header, result.log)
    _write_json(cfg.out / "logs" / f"{name}.meta.json",
                {"config_hash": cfg.config_hash(), "steps": steps,
                 "augmented": bool(args.augment)})
    print(f"trained saliency head for {steps} steps"
          + (" with augmentation" if args.augment else ""))
    return EXIT_OK


def _edit_inputs(cfg: RunConfig, args):
    if args.image is not None:
        if args.caption is None or args.saliency is None:
            raise ConfigError("--image needs --caption and --saliency")
        image = load_image_png(args.image)
        saliency = load_saliency(args.saliency)
        return image, saliency, args.caption, Path(args.image).stem
    manifest = load_dataset(cfg.dataset.root, cfg.dataset.train_split)
    examples = load_examples(manifest, num_classes=cfg.dataset.num_classes)
    if not 0 <= args.index < len(examples):
        raise DataError(f"--index {args.index} out of range for "
                        f"{len(examples)} images")
    ex = examples[args.index]
    if ex.saliency is None:
        raise DataError("selected image has no saliency ground truth")
    return ex.image, ex.saliency, ex.caption, f"im{args.index:05d}"


def _to_rgb_block(arr: np.ndarray) -> np.ndarray:
    return np.repeat(np.clip(arr, 0.0, 1.0)[:, :, None], 3, axis=2)


def _grid_image(panels) -> ImageTensor:
    sep = np.ones((panels[0].shape[0], 2, 3))
    row = []
    for i, p in enumerate(panels):
        if i:
            row.append(sep)
        row.append(p)
    return ImageTensor(np.concatenate(row, axis=1))


def _cmd_edit(cfg: RunConfig, args) -> int:
    image, saliency, caption, name = _edit_inputs(cfg, args)
    backbone = _load_backbone(cfg)
    llfr, _hlfr, stats = _load_readout_stage(cfg, backbone)
    gamma = _gamma_for(cfg, backbone)
    spec = EditSpec(kind=args.kind, alpha=args.alpha, target_color=args.color)
    result = run_edit_pipeline(image, caption, saliency, spec, backbone, llfr,
                               stats, gamma, max_halvings=cfg.edit.max_halvings,
                               pivot=cfg.edit.pivot)
    out_dir = cfg.out / "edits" / f"{args.kind}_{name}"
    save_edit_result(result, out_dir,
                     extra_meta={"config_hash": cfg.config_hash(),
                                 "kind": args.kind, "requested_alpha": args.alpha,
                                 "caption": caption,
                                 "target_color": args.color})

    # Side-by-side panel: original | mask | edit at the configured intensities.
    identity = IDENTITY_ALPHA[args.kind]
    panels = [np.asarray(image.data),
              _to_rgb_block(resize_bilinear(result.mask,
                                            (image.height, image.width)))]
    for scale in cfg.edit.intensities:
        alpha_s = identity + (args.alpha - identity) * scale
        spec_s = EditSpec(kind=args.kind, alpha=max(alpha_s, identity),
                          target_color=args.color)
        res_s = run_edit_pipeline(image, caption, saliency, spec_s, backbone,
                                  llfr, stats, gamma,
                                  max_halvings=cfg.edit.max_halvings,
                                  pivot=cfg.edit.pivot)
        panels.append(np.asarray(res_s.edited_image.data))
    save_image_png(_grid_image(panels), out_dir / "grid.png")
    print(f"edit written to {out_dir} (applied alpha {result.applied_alpha}, "
          f"token {result.selected_token_index}, "
          f"constrained={result.constraint_triggered})")
    return EXIT_OK


def _cmd_augment(cfg: RunConfig, args) -> int:
    examples = _train_examples(cfg)
    backbone = _load_backbone(cfg)
    llfr, _hlfr, stats = _load_readout_stage(cfg, backbone)
    # The cache holds edits only: force the original-sample probability to 0.
    aug_cfg = dataclasses.replace(cfg.augmentor, p=0.0)
    engine = AugmentationEngine(aug_cfg, backbone, llfr, stats,
                                _gamma_for(cfg, backbone), pivot=cfg.edit.pivot,
                                max_halvings=cfg.edit.max_halvings)
    rng = np.random.default_rng(aug_cfg.seed)
    cache_root = cfg.out / "augment_cache"
    for n in range(args.n):
        i = n % len(examples)
        ex = examples[i]
        decision = engine.sample_step(rng)
        sample = engine.augmented_batch(ex.image, ex.saliency, ex.caption, decision)
        save_edit_result(sample.edit, cache_root / f"edit_{n:05d}",
                         extra_meta={"config_hash": cfg.config_hash(),
                                     "image_index": i, "kind": decision.kind,
                                     "requested_alpha": decision.alpha,
                                     "target_color": decision.color})
    print(f"wrote {args.n} edit directories under {cache_root}")
    return EXIT_OK


def _cmd_evaluate(cfg: RunConfig, args) -> int:
    manifest = load_dataset(cfg.dataset.root, args.split)
    examples = load_examples(manifest, num_classes=cfg.dataset.num_classes)
    if args.predictor == "gt":
        model = lambda rec: rec.saliency  # noqa: E731 - fixture predictor
        label = "ground-truth"
    else:
        backbone = _load_backbone(cfg)
        sr = _load_saliency_stage(cfg, backbone)
        model = SaliencyPredictor(backbone, sr)
        label = "augsal"
    report = evaluate(model, examples,
                      n_shuffle_images=cfg.metrics.sauc_shuffle_images,
                      shuffle_seed=cfg.metrics.sauc_seed,
                      eps=cfg.loss_weights.eps)
    payload = {"config_hash": cfg.config_hash(), "split": args.split,
               "predictor": args.predictor}
    payload.update(report.as_dict())
    _write_json(cfg.out / "evaluate" / f"report_{args.split}_{args.predictor}.json",
                payload)
    print(format_report_table(report, label=label))
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="augsal",
        description="Saliency prediction with readout heads over a denoising "
                    "backbone, plus saliency-guided photometric edit augmentation.",
        epilog="Exit codes: 0 success, 2 config error, 3 data error, "
               "4 numerical failure.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("-c", "--config", required=True, help="run config YAML")
        p.set_defaults(func=func)
        return p

    add("generate-data", _cmd_generate_data,
        help="render the synthetic train/val splits to disk")

    for name, func in (("train-backbone", _cmd_train_backbone),
                       ("train-readouts", _cmd_train_readouts),
                       ("train-saliency", _cmd_train_saliency)):
        p = add(name, func, help=f"run the {name.split('-')[1]} training stage")
        p.add_argument("--steps", type=int, default=None,
                       help="override the configured step count")
        p.add_argument("--resume", action="store_true",
                       help="initialize from the existing stage checkpoint")
        if name == "train-saliency":
            p.add_argument("--augment", action="store_true",
                           help="train with the edit augmentation sampler")

    p = add("edit", _cmd_edit, help="run one edit and write its artifact directory")
    p.add_argument("--kind", required=True,
                   choices=("contrast_increase", "brightness_increase", "color_change"))
    p.add_argument("--alpha", type=float, required=True, help="edit strength")
    p.add_argument("--color", default=None, help="target color word (color edits)")
    p.add_argument("--index", type=int, default=0,
                   help="train-split image index (default 0)")
    p.add_argument("--image", default=None, help="explicit image PNG path")
    p.add_argument("--caption", default=None, help="caption for --image")
    p.add_argument("--saliency", default=None, help="saliency map for --image")

    p = add("augment", _cmd_augment, help="pre-generate an edit cache")
    p.add_argument("--n", type=int, required=True, help="number of edits to write")

    p = add("evaluate", _cmd_evaluate, help="evaluate a predictor on a split")
    p.add_argument("--split", default="val")
    p.add_argument("--predictor", choices=("model", "gt"), default="model",
                   help="trained model or the ground-truth fixture")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(1)  # keeps reruns bit-identical
    try:
        cfg = load_config(args.config)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ValidationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
