"""Estimator facade: fit/predict over in-memory image and label arrays.

NasLoraSegmenter follows the scikit-learn parameter conventions
(constructor stores hyperparameters verbatim, get_params/set_params/clone
work, fitted state lives in trailing-underscore attributes), so it can sit
inside pipelines and grid searches. Heavy lifting stays in the library
modules; here we only adapt arrays to the provider protocol.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .autodiff import Tensor
from .data import _FLIP_STREAM, _SHUFFLE_STREAM
from .errors import ShapeError, ValueCheckError
from .metrics import compute_metrics
from .model import ModelConfig, SegModel, semantic_inference
from .optim import AdamState
from .train import TrainConfig, headline, stage_wise_train


def check_image_batch(X, image_size: int | None = None) -> np.ndarray:
    """(N, 3, S, S) float array with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 3 or X.shape[2] != X.shape[3]:
        raise ShapeError(
            f"check_image_batch: need (N, 3, S, S), got {X.shape}")
    if image_size is not None and X.shape[2] != image_size:
        raise ShapeError(
            f"check_image_batch: expected side {image_size}, got {X.shape[2]}")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueCheckError(
            f"check_image_batch: values outside [0, 1]: "
            f"[{X.min()}, {X.max()}]")
    return X


def check_label_batch(y, image_size: int | None = None,
                      num_classes: int | None = None) -> np.ndarray:
    """(N, S, S) integer label maps, 0 = background, 1..K = classes."""
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueCheckError(
            f"check_label_batch: need integer labels, got dtype {y.dtype}")
    y = y.astype(np.int64)
    if y.ndim != 3 or y.shape[1] != y.shape[2]:
        raise ShapeError(f"check_label_batch: need (N, S, S), got {y.shape}")
    if image_size is not None and y.shape[1] != image_size:
        raise ShapeError(
            f"check_label_batch: expected side {image_size}, got {y.shape[1]}")
    if y.size and y.min() < 0:
        raise ValueCheckError("check_label_batch: negative labels")
    if num_classes is not None and y.size and y.max() > num_classes:
        raise ValueCheckError(
            f"check_label_batch: label {y.max()} exceeds {num_classes} classes")
    return y


class ArrayProvider:
    """Provider protocol over arrays already in memory.

    All three splits serve the same arrays; training batches get the
    stateless shuffle and joint horizontal flips keyed by (seed, epoch,
    stage), matching the synthetic provider's replay semantics.
    """

    def __init__(self, X: np.ndarray, y: np.ndarray, num_classes: int,
                 seed: int = 0):
        self.X = X
        self.y = y
        self._num_classes = num_classes
        self.seed = seed

    def size(self, split: str) -> int:
        return self.X.shape[0]

    def num_classes(self) -> int:
        return self._num_classes

    def batches(self, split: str, batch: int, epoch: int = 0, stage: int = 0,
                augment: bool | None = None):
        if batch < 1:
            raise ValueCheckError("batches: batch size must be >= 1")
        n = self.X.shape[0]
        if augment is None:
            augment = split == "train"
        order = np.arange(n)
        if split == "train":
            shuffle_rng = np.random.default_rng(
                [self.seed, _SHUFFLE_STREAM, epoch, stage])
            order = shuffle_rng.permutation(n)
        flip_rng = np.random.default_rng(
            [self.seed, _FLIP_STREAM, epoch, stage])
        flips = flip_rng.random(n) < 0.5 if augment else np.zeros(n, dtype=bool)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            images = self.X[idx].copy()
            labels = self.y[idx].copy()
            for j, i in enumerate(idx):
                if flips[i]:
                    images[j] = images[j, :, :, ::-1]
                    labels[j] = labels[j, :, ::-1]
            yield images, labels


class NasLoraSegmenter(BaseEstimator):
    """Semantic segmentation with candidate-op adapter cells on a small ViT.

    fit(X, y) expects images (N, 3, S, S) in [0, 1] and integer label maps
    (N, S, S) with 0 as background; the number of foreground classes is
    inferred from y. predict returns label maps, predict_scores the
    per-class score volumes, and score the headline IoU.
    """

    def __init__(self, variant="nas_pc_lora", rank=3, channel_ratio=2.0 / 3.0,
                 image_size=64, patch_size=8, embed_dim=64, depth=4, heads=4,
                 num_queries=8, epochs=40, arch_warmup=10, lr=1e-4,
                 weight_decay=1e-4, arch_lr=1e-3, arch_weight_decay=1e-3,
                 seg_weight=1.0, cls_weight=2.0, batch_size=4,
                 flip_augment=True, random_state=0):
        self.variant = variant
        self.rank = rank
        self.channel_ratio = channel_ratio
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.num_queries = num_queries
        self.epochs = epochs
        self.arch_warmup = arch_warmup
        self.lr = lr
        self.weight_decay = weight_decay
        self.arch_lr = arch_lr
        self.arch_weight_decay = arch_weight_decay
        self.seg_weight = seg_weight
        self.cls_weight = cls_weight
        self.batch_size = batch_size
        self.flip_augment = flip_augment
        self.random_state = random_state

    # -- fitting ---------------------------------------------------------

    def fit(self, X, y):
        X = check_image_batch(X, image_size=self.image_size)
        y = check_label_batch(y, image_size=self.image_size)
        if X.shape[0] != y.shape[0]:
            raise ShapeError(
                f"fit: {X.shape[0]} images but {y.shape[0]} label maps")
        if X.shape[0] == 0:
            raise ValueCheckError("fit: empty training set")
        n_classes = int(y.max())
        if n_classes < 1:
            raise ValueCheckError(
                "fit: labels contain no foreground class (all zeros)")

        model_cfg = ModelConfig(
            image_size=self.image_size, patch_size=self.patch_size,
            embed_dim=self.embed_dim, depth=self.depth, heads=self.heads,
            num_queries=self.num_queries, num_classes=n_classes,
            variant=self.variant, adapter_layers=tuple(range(1, self.depth + 1)),
            rank=self.rank, channel_ratio=self.channel_ratio)
        train_cfg = TrainConfig(
            epochs=self.epochs, arch_warmup=self.arch_warmup,
            lr_w=self.lr, wd_w=self.weight_decay,
            lr_alpha=self.arch_lr, wd_alpha=self.arch_weight_decay,
            lambda_seg=self.seg_weight, lambda_cls=self.cls_weight,
            batch=self.batch_size, flip_augment=self.flip_augment,
            seed=self.random_state)

        model = SegModel(model_cfg, seed=self.random_state)
        provider = ArrayProvider(X, y, n_classes, seed=self.random_state)
        history = stage_wise_train(model, provider, train_cfg,
                                   opt_w=AdamState(), opt_a=AdamState())

        self.n_classes_ = n_classes
        self.model_ = model
        self.config_ = model_cfg
        self.history_ = history
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "NasLoraSegmenter instance is not fitted yet; call fit first")

    # -- inference ---------------------------------------------------------

    def _forward_batches(self, X):
        for lo in range(0, X.shape[0], self.batch_size):
            yield self.model_.forward(Tensor(X[lo:lo + self.batch_size]))

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_image_batch(X, image_size=self.image_size)
        out = []
        for mask_logits, class_logits in self._forward_batches(X):
            _, labels = semantic_inference(mask_logits, class_logits,
                                           self.n_classes_)
            out.append(labels)
        return np.concatenate(out)

    def predict_scores(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_image_batch(X, image_size=self.image_size)
        out = []
        for mask_logits, class_logits in self._forward_batches(X):
            scores, _ = semantic_inference(mask_logits, class_logits,
                                           self.n_classes_)
            out.append(scores)
        return np.concatenate(out)

    def score(self, X, y) -> float:
        """Headline IoU of predictions against integer label maps."""
        self._check_fitted()
        y = check_label_batch(y, image_size=self.image_size,
                              num_classes=self.n_classes_)
        pred = self.predict(X)
        report = compute_metrics(pred, y, self.n_classes_)
        iou, _ = headline(report, self.n_classes_)
        return iou
