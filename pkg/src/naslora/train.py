"""Stage-wise two-optimizer training loop.

Each epoch runs Stage 1 (one full pass updating the w-group: adapter
projections, op kernels, decoder; architecture logits fixed, their gradients
discarded) and, once the warm-up is over, Stage 2 (a second full pass
updating only the architecture logits, w fixed). Two independent
adaptive-moment states persist across epochs and resume from checkpoints.
All shuffling and augmentation derive from (seed, epoch, stage), so any
epoch replays exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradTape, Tensor, backward
from .cell import NUM_CANDIDATES, op_proportions
from .errors import TrainingDiverged, ValueCheckError
from .losses import cls_loss, segmentation_loss, total_loss
from .metrics import compute_metrics
from .model import SegModel, params_checksum, semantic_inference
from .optim import AdamState, adam_step, zero_grads


@dataclass
class TrainConfig:
    epochs: int = 40
    arch_warmup: int = 10
    lr_w: float = 1e-4
    wd_w: float = 1e-4
    lr_alpha: float = 1e-3
    wd_alpha: float = 1e-3
    lambda_seg: float = 1.0
    lambda_cls: float = 2.0
    batch: int = 4
    flip_augment: bool = True
    seed: int = 0
    checkpoint_interval: int = 20

    def __post_init__(self):
        if not 0 <= self.arch_warmup <= self.epochs:
            raise ValueCheckError(
                f"TrainConfig: arch warm-up {self.arch_warmup} outside "
                f"0..{self.epochs}")
        if self.batch < 1:
            raise ValueCheckError("TrainConfig: batch must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    stage_w: int
    stage_a: int
    loss: float                    # mean Stage 1 loss
    loss_arch: float | None        # mean Stage 2 loss, when Stage 2 ran
    val_iou: float
    val_dice: float
    blend: np.ndarray              # mean candidate proportions (8,)
    alpha_start: str
    alpha_mid: str                 # after Stage 1: must equal alpha_start
    alpha_end: str
    w_start: str
    w_mid: str
    w_end: str                     # after Stage 2: must equal w_mid
    frozen: str

    def log_line(self) -> str:
        blend = ",".join(f"{v:.4f}" for v in self.blend)
        return (f"epoch={self.epoch:02d} stage_w={self.stage_w} "
                f"stage_a={self.stage_a} loss={self.loss:.6f} "
                f"val_iou={self.val_iou:.4f} val_dice={self.val_dice:.4f} "
                f"blend={blend}")


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def log_lines(self) -> list[str]:
        return [r.log_line() for r in self.records]

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]


def _epoch_pass(model: SegModel, provider, cfg: TrainConfig, epoch: int,
                stage: int, opt: AdamState, group: dict, lr: float,
                wd: float, num_classes: int) -> float:
    """One full pass over the training split updating a single group."""
    total, batches = 0.0, 0
    w_group = model.weight_params()
    a_group = model.alpha_params()
    for images, labels in provider.batches(
            "train", cfg.batch, epoch=epoch, stage=stage,
            augment=cfg.flip_augment):
        with GradTape() as tape:
            mask_logits, class_logits = model.forward(Tensor(images))
            bce, dice, target_idx = segmentation_loss(mask_logits, labels,
                                                      num_classes)
            cls = cls_loss(class_logits, target_idx)
            loss = total_loss(bce, dice, cls, cfg.lambda_seg, cfg.lambda_cls)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(epoch, f"non-finite loss at epoch {epoch}")
        backward(loss, tape=tape)
        tape.clear()
        adam_step(opt, group, lr, wd)
        zero_grads(w_group)
        zero_grads(a_group)
        total += value
        batches += 1
    return total / max(batches, 1)


def evaluate(model: SegModel, provider, split: str = "val", batch: int = 4):
    """Global-confusion metrics over one split via semantic inference."""
    k = provider.num_classes()
    preds, trues = [], []
    for images, labels in provider.batches(split, batch, augment=False):
        mask_logits, class_logits = model.forward(Tensor(images))
        _, labs = semantic_inference(mask_logits, class_logits, k)
        preds.append(labs)
        trues.append(labels)
    report = compute_metrics(np.concatenate(preds), np.concatenate(trues), k)
    return report


def headline(report, num_classes: int) -> tuple[float, float]:
    """(IoU, Dice) headline pair: foreground class for binary, means above."""
    if num_classes == 1:
        return float(report.iou[1]), float(report.dice[1])
    return float(report.miou), float(report.dice.mean())


def stage_wise_train(model: SegModel, provider, cfg: TrainConfig,
                     opt_w: AdamState | None = None,
                     opt_a: AdamState | None = None,
                     start_epoch: int = 0,
                     on_epoch=None, log=None) -> History:
    """Run epochs start_epoch+1 .. cfg.epochs; returns the epoch history.

    ``on_epoch(epoch, model, history, opt_w, opt_a)`` runs after each epoch
    (checkpoint hook); ``log(line)`` receives one formatted line per epoch.
    """
    opt_w = opt_w or AdamState()
    opt_a = opt_a or AdamState()
    num_classes = provider.num_classes()
    history = History()
    w_group = model.weight_params()
    a_group = model.alpha_params()
    frozen_sum = params_checksum(model.frozen_params())

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        alpha_start = params_checksum(a_group)
        w_start = params_checksum(w_group)

        loss_w = _epoch_pass(model, provider, cfg, epoch, stage=0,
                             opt=opt_w, group=w_group, lr=cfg.lr_w,
                             wd=cfg.wd_w, num_classes=num_classes)
        alpha_mid = params_checksum(a_group)
        w_mid = params_checksum(w_group)

        loss_a = None
        stage_a = 1 if (epoch > cfg.arch_warmup and a_group) else 0
        if stage_a:
            loss_a = _epoch_pass(model, provider, cfg, epoch, stage=1,
                                 opt=opt_a, group=a_group, lr=cfg.lr_alpha,
                                 wd=cfg.wd_alpha, num_classes=num_classes)
        alpha_end = params_checksum(a_group)
        w_end = params_checksum(w_group)

        report = evaluate(model, provider, "val", cfg.batch)
        val_iou, val_dice = headline(report, num_classes)
        cells = model.cells()
        blend = op_proportions(cells) if cells else np.zeros(NUM_CANDIDATES)

        rec = EpochRecord(
            epoch=epoch, stage_w=1, stage_a=stage_a, loss=loss_w,
            loss_arch=loss_a, val_iou=val_iou, val_dice=val_dice, blend=blend,
            alpha_start=alpha_start, alpha_mid=alpha_mid, alpha_end=alpha_end,
            w_start=w_start, w_mid=w_mid, w_end=w_end,
            frozen=params_checksum(model.frozen_params()))
        assert rec.frozen == frozen_sum
        history.records.append(rec)
        if log is not None:
            log(rec.log_line())
        if on_epoch is not None:
            on_epoch(epoch, model, history, opt_w, opt_a)
    return history
