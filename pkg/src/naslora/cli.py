"""Command-line surface.

Subcommands: train, eval, merge, verify-merge, analyze, gen-data.
Shared flags: --config PATH (text config), --seed N (overrides the config's
training seed), --out DIR. Exit codes: 0 success, 2 invalid config,
3 training divergence, 1 other package errors. All file writes are atomic
(temp file + rename). Every command is deterministic given config + seed.
"""
from __future__ import annotations

import argparse
import os
import sys
import tempfile

import numpy as np

from .adapters import merge, verify_merge
from .autodiff import Tensor
from .cell import CANDIDATE_ORDER
from .cell import op_proportions as cell_proportions
from .checkpoint import (read_checkpoint, restore_state, save_training_state,
                         write_checkpoint)
from .config import RunConfig, load_config, parse_config, to_text
from .data import SynthProvider, dump_sample, generate_sample
from .errors import ConfigError, NasLoraError, TrainingDiverged
from .model import SegModel, mean_attention_distance
from .optim import AdamState
from .train import evaluate, headline, stage_wise_train


def _atomic_write_text(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    return cfg


def _build_model(cfg: RunConfig) -> SegModel:
    return SegModel(cfg.model, seed=cfg.train.seed)


def _load_trained(path):
    """Rebuild (cfg, model, opt_w, opt_a, epoch) from a checkpoint file."""
    text, tensors = read_checkpoint(path)
    cfg = parse_config(text)
    model = _build_model(cfg)
    opt_w, opt_a, epoch = restore_state(model, tensors)
    return cfg, model, opt_w, opt_a, epoch


def _model_for(args):
    """Model from --checkpoint when given, otherwise fresh from config."""
    if getattr(args, "checkpoint", None):
        cfg, model, _, _, _ = _load_trained(args.checkpoint)
        if getattr(args, "seed", None) is not None:
            raise ConfigError("--seed cannot override a checkpointed run")
        return cfg, model
    cfg = _run_config(args)
    return cfg, _build_model(cfg)


def _out_dir(args, cfg: RunConfig) -> str:
    return args.out or os.path.join(cfg.out_dir, cfg.name)


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    if args.resume:
        if args.seed is not None:
            raise ConfigError("--seed cannot override a resumed run")
        cfg, model, opt_w, opt_a, start_epoch = _load_trained(args.resume)
        print(f"resumed from {args.resume} at epoch {start_epoch}")
    else:
        cfg = _run_config(args)
        model = _build_model(cfg)
        opt_w, opt_a = AdamState(), AdamState()
        start_epoch = 0

    out = _out_dir(args, cfg)
    os.makedirs(out, exist_ok=True)
    provider = SynthProvider(cfg.data)
    cfg_text = to_text(cfg)
    interval = cfg.train.checkpoint_interval

    def on_epoch(epoch, mdl, history, ow, oa):
        if interval and epoch % interval == 0:
            save_training_state(os.path.join(out, f"epoch{epoch:03d}.ckpt"),
                                cfg_text, mdl, ow, oa, epoch)

    history = stage_wise_train(model, provider, cfg.train,
                               opt_w=opt_w, opt_a=opt_a,
                               start_epoch=start_epoch,
                               on_epoch=on_epoch, log=print)

    final = os.path.join(out, "final.ckpt")
    save_training_state(final, cfg_text, model, opt_w, opt_a, cfg.train.epochs)
    _atomic_write_text(os.path.join(out, "metrics.log"),
                       "\n".join(history.log_lines()) + "\n")
    last = history.final
    print(f"done: {final}  val_iou={last.val_iou:.4f} val_dice={last.val_dice:.4f}")
    return 0


# -- eval ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg, model = _model_for(args)
    provider = SynthProvider(cfg.data)
    report = evaluate(model, provider, split=args.split, batch=cfg.train.batch)
    iou, dice = headline(report, cfg.model.num_classes)
    print(report.summary())
    print(f"split={args.split} headline iou={iou:.4f} dice={dice:.4f}")
    return 0


# -- merge / verify-merge -----------------------------------------------------

_KIND_CODE = {"dense": 0.0, "conv": 1.0, "composite": 2.0}


def _adapted_projections(model: SegModel):
    for (layer, proj), ad in sorted(model.adapters.items()):
        frozen = model.blocks[layer - 1]["w" + proj]
        yield f"block{layer}/{proj}", ad, frozen


def cmd_merge(args) -> int:
    cfg, model = _model_for(args)
    tensors: dict[str, np.ndarray] = {}
    composites = 0
    for name, ad, frozen in _adapted_projections(model):
        m = merge(ad, frozen)
        tensors[f"{name}/kind"] = np.asarray(_KIND_CODE[m.kind])
        if m.kind == "dense":
            tensors[f"{name}/dense"] = m.weight
            print(f"{name}  kind=dense   shape={m.weight.shape}")
        elif m.kind == "conv":
            tensors[f"{name}/kernel"] = m.kernel
            print(f"{name}  kind=conv    shape={m.kernel.shape}")
        else:
            composites += 1
            print(f"{name}  kind=composite  maxpool_weight={m.maxpool_weight:.6g} "
                  "(live fallback, not exported)")
    if not tensors:
        print("no adapted projections (variant=none)")
        return 0
    out = args.out or "merged.ckpt"
    if os.path.isdir(out):
        out = os.path.join(out, "merged.ckpt")
    write_checkpoint(out, to_text(cfg), tensors)
    print(f"wrote {out}  ({len(tensors)} tensors, {composites} composite)")
    return 0


def cmd_verify_merge(args) -> int:
    cfg, model = _model_for(args)
    rows = list(_adapted_projections(model))
    if not rows:
        print("no adapted projections (variant=none)")
        return 0
    all_ok = True
    for name, ad, frozen in rows:
        rep = verify_merge(ad, frozen, trials=args.trials, seed=args.probe_seed)
        if rep.composite:
            m = merge(ad, frozen)
            print(f"{name:<12} kind=composite  maxpool_weight={m.maxpool_weight:.6g}  "
                  f"max_rel_err={rep.max_rel_err:.3e}  live fallback (reported, "
                  "not a failure)")
            continue
        all_ok = all_ok and rep.passed
        verdict = "PASS" if rep.passed else "FAIL"
        print(f"{name:<12} max_rel_err={rep.max_rel_err:.3e}  tol={rep.tol:.0e}  "
              f"trials={rep.trials}  {verdict}")
    print(f"overall: {'PASS' if all_ok else 'FAIL'}")
    return 0 if all_ok else 1


# -- analyze ------------------------------------------------------------------

def _collect_images(provider, split: str, count: int, batch: int) -> np.ndarray:
    chunks, seen = [], 0
    while seen < count:
        for images, _ in provider.batches(split, batch, augment=False):
            chunks.append(images)
            seen += images.shape[0]
            if seen >= count:
                break
    return np.concatenate(chunks)[:count]


def _layer_distances(model: SegModel, images: np.ndarray, batch: int) -> np.ndarray:
    g = model.cfg.grid
    sums = np.zeros(model.cfg.depth)
    n = 0
    for lo in range(0, images.shape[0], batch):
        part = images[lo:lo + batch]
        _, maps = model.encoder_forward(Tensor(part), keep_attention=True)
        for i, attn in enumerate(maps):
            sums[i] += mean_attention_distance(attn, g, g) * part.shape[0]
        n += part.shape[0]
    return sums / n


def cmd_analyze(args) -> int:
    cfg, model = _model_for(args)
    provider = SynthProvider(cfg.data)

    cells = model.cells()
    if cells:
        props = cell_proportions(cells)
        print("op proportions (mean softmax blend weight per candidate):")
        for kind, p in zip(CANDIDATE_ORDER, props):
            print(f"  {kind.name.lower():<10} {p:.6f}")
        print(f"  sum = {props.sum():.12f}")
    else:
        print(f"op proportions: no cells (variant={cfg.model.variant})")

    images = _collect_images(provider, args.split, args.samples, cfg.train.batch)
    trained = _layer_distances(model, images, cfg.train.batch)
    reference = _layer_distances(_build_model(cfg), images, cfg.train.batch)
    print(f"mean attention distance (patch units, {images.shape[0]} samples):")
    print("  layer   trained   untrained   delta")
    for i in range(cfg.model.depth):
        print(f"  {i + 1:<5}   {trained[i]:7.4f}   {reference[i]:9.4f}   "
              f"{trained[i] - reference[i]:+7.4f}")

    report = evaluate(model, provider, split=args.split, batch=cfg.train.batch)
    iou, dice = headline(report, cfg.model.num_classes)
    print(report.summary())
    print(f"split={args.split} headline iou={iou:.4f} dice={dice:.4f}")
    return 0


# -- gen-data -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _run_config(args)
    out = args.out or os.path.join(cfg.out_dir, cfg.name, "samples")
    written = []
    for i in range(args.count):
        sample = generate_sample(cfg.data, args.split, i)
        written += dump_sample(sample, out, f"{args.split}_{i:04d}")
    print(f"wrote {len(written)} PGM files to {out}")
    return 0


# -- argument parsing ---------------------------------------------------------

def _common(sub):
    sub.add_argument("--config", help="path to a run config text file")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the config's training seed")
    sub.add_argument("--out", default=None, help="output directory or file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="naslora",
        description="Adapter training, merging and analysis toolkit.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train", help="stage-wise training run")
    _common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="metrics on a data split")
    _common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("merge", help="fold adapters into frozen weights")
    _common(p)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_merge)

    p = subs.add_parser("verify-merge", help="probe merged vs live forwards")
    _common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--probe-seed", type=int, default=0)
    p.set_defaults(func=cmd_verify_merge)

    p = subs.add_parser("analyze", help="op proportions, attention distance, metrics")
    _common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--samples", type=int, default=100)
    p.set_defaults(func=cmd_analyze)

    p = subs.add_parser("gen-data", help="dump synthetic samples as PGM files")
    _common(p)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--count", type=int, default=8)
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    except NasLoraError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
