"""Low-rank adapters around frozen channel projections, and exact merging.

An adapter adds a trainable low-rank update to a frozen 1x1 channel map:
down-project to rank r, optionally pass through a candidate-operation cell,
up-project back. Merging collapses the whole branch into the frozen weight:
a dense matrix when the branch is a plain matrix product, a 9x9 convolution
kernel when a cell sits in between, or a composite (direct evaluation)
fallback when the max-pool candidate makes the branch nonlinear.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add
from .cell import (
    ChannelMask,
    NasCell,
    cell_forward,
    fold_cell,
    make_channel_mask,
    _kaiming_uniform,
)
from .convolution import conv2d, project_channels
from .errors import ShapeError, ValueCheckError

ADAPTER_VARIANTS = ("none", "lora", "nas_lora", "nas_pc_lora")

DENSE_MERGE_TOL = 1e-12
CONV_MERGE_TOL = 1e-6


class FrozenProjection:
    """A bias-free (C_out, C_in) channel map whose weight never trains."""

    def __init__(self, weight):
        w = Tensor(weight)
        if w.ndim != 2:
            raise ShapeError(f"FrozenProjection: weight must be 2-D, got {w.shape}")
        self.weight = w

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return project_channels(x, self.weight)


class Adapter:
    """Trainable low-rank branch attached to one frozen projection.

    variant "none" carries no parameters and leaves the projection untouched;
    "lora" is the bare W_d @ W_e update; "nas_lora" routes the rank-r bottleneck
    through a cell over all r channels; "nas_pc_lora" masks the cell to a
    seeded subset of floor(ratio*r + 0.5) channels, the rest passing through.
    W_e starts Kaiming-uniform, W_d starts at zero so the update is zero at
    step 0.
    """

    def __init__(self, variant: str, c_in: int, c_out: int, rank: int,
                 ratio=1.0, rng: np.random.Generator | None = None,
                 mask_seed=0):
        if variant not in ADAPTER_VARIANTS:
            raise ValueCheckError(f"Adapter: unknown variant {variant!r}")
        self.variant = variant
        self.c_in = c_in
        self.c_out = c_out
        self.rank = rank
        self.cell: NasCell | None = None
        self.w_enc: Tensor | None = None
        self.w_dec: Tensor | None = None
        if variant == "none":
            return
        if rank < 1 or 2 * rank >= min(c_in, c_out):
            raise ValueCheckError(
                f"Adapter: rank {rank} not in [1, min({c_in}, {c_out})/2)")
        if rng is None:
            rng = np.random.default_rng(0)
        self.w_enc = Tensor(_kaiming_uniform(rng, (rank, c_in), c_in),
                            requires_grad=True)
        self.w_dec = Tensor(np.zeros((c_out, rank)), requires_grad=True)
        if variant == "nas_lora":
            mask = ChannelMask(selected=tuple(range(rank)), width=rank)
            self.cell = NasCell(rank, mask, rng)
        elif variant == "nas_pc_lora":
            mask = make_channel_mask(rank, ratio, mask_seed)
            self.cell = NasCell(rank, mask, rng)

    def named_params(self) -> dict[str, Tensor]:
        """Trainable tensors keyed by role; empty for variant "none"."""
        if self.variant == "none":
            return {}
        out = {"w_enc": self.w_enc, "w_dec": self.w_dec}
        if self.cell is not None:
            for name, t in self.cell.named_op_params().items():
                out[f"cell/{name}"] = t
        return out

    def num_trainable(self) -> int:
        n = sum(t.size for t in self.named_params().values())
        if self.cell is not None:
            n += self.cell.alpha.size
        return n


def adapter_forward(adapter: Adapter, frozen: FrozenProjection, x: Tensor) -> Tensor:
    """Frozen projection plus the adapter's low-rank update.

    (B, C_in, H, W) -> (B, C_out, H, W). The cell, when present, runs on the
    rank-r bottleneck between the down- and up-projections.
    """
    if x.ndim != 4 or x.shape[1] != frozen.c_in:
        raise ShapeError(f"adapter_forward: input {x.shape} does not carry "
                         f"{frozen.c_in} channels")
    if adapter.variant != "none" and (adapter.c_in != frozen.c_in
                                      or adapter.c_out != frozen.c_out):
        raise ShapeError("adapter_forward: adapter/projection extents disagree")
    base = frozen.forward(x)
    if adapter.variant == "none":
        return base
    z = project_channels(x, adapter.w_enc)
    if adapter.cell is not None:
        z = cell_forward(adapter.cell, z)
    return add(base, project_channels(z, adapter.w_dec))


@dataclass
class MergedProjection:
    """Frozen projection with the adapter folded in.

    kind "dense": apply ``weight`` (C_out, C_in) as a channel map.
    kind "conv": apply ``kernel`` (C_out, C_in, 9, 9) with padding 4; the
    frozen weight sits at the kernel center.
    kind "composite": the branch could not be folded (max-pool weight above
    threshold); forward evaluates the live adapter directly.
    """

    kind: str
    weight: np.ndarray | None = None
    kernel: np.ndarray | None = None
    adapter: Adapter | None = None
    frozen: FrozenProjection | None = None
    maxpool_weight: float = 0.0

    def forward(self, x: Tensor) -> Tensor:
        if self.kind == "dense":
            return project_channels(x, Tensor(self.weight))
        if self.kind == "conv":
            pad = self.kernel.shape[-1] // 2
            return conv2d(x, Tensor(self.kernel), padding=pad)
        return adapter_forward(self.adapter, self.frozen, x)


def merge(adapter: Adapter, frozen: FrozenProjection) -> MergedProjection:
    """Fold the adapter into the frozen weight.

    Plain low-rank branches give W0 + W_d @ W_e. Cell variants fold to a 9x9
    kernel with W0 added at the center, unless the max-pool blend weight makes
    the branch nonlinear, in which case a composite is returned.
    """
    w0 = frozen.weight.data
    if adapter.variant == "none":
        return MergedProjection(kind="dense", weight=w0.copy())
    if adapter.variant == "lora":
        return MergedProjection(
            kind="dense", weight=w0 + adapter.w_dec.data @ adapter.w_enc.data)
    res = fold_cell(adapter.cell, adapter.w_enc.data, adapter.w_dec.data)
    if res.composite:
        return MergedProjection(kind="composite", adapter=adapter, frozen=frozen,
                                maxpool_weight=res.maxpool_weight)
    ker = res.kernel
    ctr = ker.shape[-1] // 2
    ker = ker.copy()
    ker[:, :, ctr, ctr] += w0
    return MergedProjection(kind="conv", kernel=ker,
                            maxpool_weight=res.maxpool_weight)


@dataclass
class MergeReport:
    max_rel_err: float
    passed: bool
    trials: int
    tol: float
    composite: bool = False


def verify_merge(adapter: Adapter, frozen: FrozenProjection,
                 merged: MergedProjection | None = None, trials: int = 50,
                 tol: float | None = None, seed=0, spatial: int = 7,
                 batch: int = 2) -> MergeReport:
    """Compare merged and live forwards on random inputs.

    Per trial the error is max|merged - live| / max(tiny, max|live|); the
    report carries the worst trial. tol defaults to 1e-12 for dense merges
    and 1e-6 for folded kernels.
    """
    if merged is None:
        merged = merge(adapter, frozen)
    if tol is None:
        tol = DENSE_MERGE_TOL if merged.kind == "dense" else CONV_MERGE_TOL
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = Tensor(rng.normal(size=(batch, frozen.c_in, spatial, spatial)))
        live = adapter_forward(adapter, frozen, x).data
        got = merged.forward(x).data
        scale = max(np.abs(live).max(), 1e-30)
        worst = max(worst, float(np.abs(got - live).max() / scale))
    return MergeReport(max_rel_err=worst, passed=worst <= tol, trials=trials,
                       tol=tol, composite=merged.kind == "composite")
