"""Differentiable candidate-operation cell with optional partial channel connection.

The cell sits between the adapter's down- and up-projections. Eight candidate
operations in a fixed order are blended by softmax weights over one logit
vector. With partial connection, a static seeded channel mask selects
round(ratio * r) of the r cell channels; candidate kernels are sized to the
selected width, selected channels are replaced by the blended op output, and
unselected channels pass through untouched. ratio 1 is the plain cell;
ratio 0 degenerates to the bare low-rank adapter.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, scale_by, softmax_lastdim, take, put
from .convolution import conv2d, pool2d, project_channels
from .errors import ShapeError, ValueCheckError

FOLD_KERNEL_SIZE = 9   # widest receptive field: 5-tap kernel at dilation 2
FOLD_TAU = 1e-6        # max-pool blend weight above this refuses exact folding


class CandidateOpKind(enum.IntEnum):
    """The eight candidates, in fixed blend-index order."""

    SEP_CONV3 = 0
    SEP_CONV5 = 1
    DIL_CONV3 = 2
    DIL_CONV5 = 3
    AVG_POOL3 = 4
    MAX_POOL3 = 5
    SKIP = 6
    ZERO = 7


CANDIDATE_ORDER: tuple[CandidateOpKind, ...] = tuple(CandidateOpKind)
NUM_CANDIDATES = len(CANDIDATE_ORDER)


@dataclass
class CandidateOpParams:
    """Kernels for one parametric candidate at the cell's connected width.

    Separable convs hold a depthwise (c,1,k,k) stage and a pointwise (c,c)
    mix; dilated convs hold one full (c,c,k,k) kernel applied at rate 2.
    Pool/skip/zero candidates carry no parameters.
    """

    kind: CandidateOpKind
    depthwise: Tensor | None = None
    pointwise: Tensor | None = None
    kernel: Tensor | None = None

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        if self.depthwise is not None:
            out["depthwise"] = self.depthwise
        if self.pointwise is not None:
            out["pointwise"] = self.pointwise
        if self.kernel is not None:
            out["kernel"] = self.kernel
        return out


@dataclass(frozen=True)
class ChannelMask:
    """Static binary selection over the r cell channels."""

    selected: tuple[int, ...]
    width: int

    def __post_init__(self):
        if any(i < 0 or i >= self.width for i in self.selected):
            raise ShapeError(f"ChannelMask: index out of range for width {self.width}")
        if len(set(self.selected)) != len(self.selected):
            raise ShapeError("ChannelMask: duplicate indices")

    @property
    def count(self) -> int:
        return len(self.selected)

    @property
    def ratio(self) -> float:
        return self.count / self.width

    @property
    def unselected(self) -> tuple[int, ...]:
        chosen = set(self.selected)
        return tuple(i for i in range(self.width) if i not in chosen)

    def as_array(self) -> np.ndarray:
        m = np.zeros(self.width)
        m[list(self.selected)] = 1.0
        return m


def make_channel_mask(width: int, ratio, seed) -> ChannelMask:
    """Draw round(ratio * width) distinct channels with a seeded generator."""
    r = float(ratio)
    if not 0.0 <= r <= 1.0:
        raise ValueCheckError(f"make_channel_mask: ratio {ratio} outside [0, 1]")
    count = int(math.floor(r * width + 0.5))
    rng = np.random.default_rng(seed)
    chosen = tuple(sorted(rng.choice(width, size=count, replace=False).tolist()))
    return ChannelMask(selected=chosen, width=width)


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


ALPHA_INIT_SCALE = 1e-3


class NasCell:
    """One candidate-operation cell over r channels.

    All parametric candidates are allocated at construction (even those whose
    blend weight is near zero) so gradients can flow to every kernel. The
    average-pool candidate is realized as a constant depthwise 1/9 kernel with
    zero padding: a fixed denominator keeps the op translation invariant,
    which exact folding requires. The max-pool candidate uses pool2d and
    therefore cannot be folded.
    """

    def __init__(self, width: int, mask: ChannelMask, rng: np.random.Generator):
        if width < 1:
            raise ShapeError(f"NasCell: width must be >= 1, got {width}")
        if mask.width != width:
            raise ShapeError(f"NasCell: mask width {mask.width} != cell width {width}")
        self.width = width
        self.mask = mask
        self.alpha = Tensor(rng.standard_normal(NUM_CANDIDATES) * ALPHA_INIT_SCALE,
                            requires_grad=True)
        c = mask.count
        self.ops: dict[CandidateOpKind, CandidateOpParams] = {}
        if c > 0:
            for kind, k in ((CandidateOpKind.SEP_CONV3, 3), (CandidateOpKind.SEP_CONV5, 5)):
                dw = Tensor(_kaiming_uniform(rng, (c, 1, k, k), k * k), requires_grad=True)
                pw = Tensor(_kaiming_uniform(rng, (c, c), c), requires_grad=True)
                self.ops[kind] = CandidateOpParams(kind, depthwise=dw, pointwise=pw)
            for kind, k in ((CandidateOpKind.DIL_CONV3, 3), (CandidateOpKind.DIL_CONV5, 5)):
                ker = Tensor(_kaiming_uniform(rng, (c, c, k, k), c * k * k), requires_grad=True)
                self.ops[kind] = CandidateOpParams(kind, kernel=ker)
            avg = np.zeros((c, 1, 3, 3))
            avg[:] = 1.0 / 9.0
            self._avg_kernel = Tensor(avg)
        else:
            self._avg_kernel = None

    def named_op_params(self) -> dict[str, Tensor]:
        out = {}
        for kind, params in self.ops.items():
            for name, t in params.tensors().items():
                out[f"{kind.name.lower()}/{name}"] = t
        return out

    def num_trainable(self) -> int:
        n = self.alpha.size
        for params in self.ops.values():
            n += sum(t.size for t in params.tensors().values())
        return n


def blend_weights(alpha: Tensor) -> Tensor:
    """Softmax over the eight architecture logits."""
    if alpha.shape != (NUM_CANDIDATES,):
        raise ShapeError(f"blend_weights: alpha shape {alpha.shape} != ({NUM_CANDIDATES},)")
    if not np.isfinite(alpha.data).all():
        raise ValueCheckError("blend_weights: non-finite alpha")
    return softmax_lastdim(alpha)


def apply_candidate(kind: CandidateOpKind, params: CandidateOpParams | None,
                    feat: Tensor, avg_kernel: Tensor | None = None) -> Tensor:
    """Run one candidate on a (B, c, H, W) feature tensor, shape preserved."""
    if kind == CandidateOpKind.SKIP:
        return feat
    if kind == CandidateOpKind.ZERO:
        return Tensor(np.zeros(feat.shape))
    if kind == CandidateOpKind.MAX_POOL3:
        return pool2d(feat, "max", 3, 1, 1)
    if kind == CandidateOpKind.AVG_POOL3:
        if avg_kernel is None:
            raise ValueCheckError("apply_candidate: AVG_POOL3 needs its constant kernel")
        return conv2d(feat, avg_kernel, groups=feat.shape[1], padding=1)
    if params is None:
        raise ValueCheckError(f"apply_candidate: {kind.name} needs parameters")
    c = feat.shape[1]
    if kind in (CandidateOpKind.SEP_CONV3, CandidateOpKind.SEP_CONV5):
        k = params.depthwise.shape[-1]
        dw = conv2d(feat, params.depthwise, groups=c, padding=k // 2)
        return project_channels(dw, params.pointwise)
    if kind in (CandidateOpKind.DIL_CONV3, CandidateOpKind.DIL_CONV5):
        k = params.kernel.shape[-1]
        return conv2d(feat, params.kernel, dilation=2, padding=k - 1)
    raise ValueCheckError(f"apply_candidate: unknown kind {kind}")


def cell_forward(cell: NasCell, feat: Tensor) -> Tensor:
    """Blend the candidates over the selected channels.

    Unselected channels pass through unchanged; selected channels are replaced
    by sum_i blend_weights(alpha)_i * O_i(selected part). The zero candidate
    contributes nothing directly (its logit still shapes the softmax).
    """
    if feat.ndim != 4 or feat.shape[1] != cell.width:
        raise ShapeError(f"cell_forward: feature shape {feat.shape} does not carry "
                         f"{cell.width} channels")
    if cell.mask.count == 0:
        return feat
    weights = blend_weights(cell.alpha)
    sel = list(cell.mask.selected)
    x = take(feat, sel, axis=1) if cell.mask.count != cell.width else feat
    acc = None
    for kind in CANDIDATE_ORDER:
        if kind == CandidateOpKind.ZERO:
            continue
        y = apply_candidate(kind, cell.ops.get(kind), x, cell._avg_kernel)
        term = scale_by(y, take(weights, [int(kind)], axis=0))
        acc = term if acc is None else add(acc, term)
    if cell.mask.count == cell.width:
        return acc
    return put(feat, sel, acc, axis=1)


def op_proportions(cells: list[NasCell]) -> np.ndarray:
    """Mean softmax blend weight per candidate across cells. Sums to 1."""
    if not cells:
        raise ValueCheckError("op_proportions: no cells supplied")
    total = np.zeros(NUM_CANDIDATES)
    for cell in cells:
        a = cell.alpha.data
        ex = np.exp(a - a.max())
        total += ex / ex.sum()
    return total / len(cells)


@dataclass
class FoldResult:
    """Either a dense (C_out, C_in, 9, 9) equivalent kernel or a refusal.

    ``composite`` is True when the max-pool blend weight exceeds FOLD_TAU, in
    which case the cell is not linear and must be evaluated directly.
    """

    kernel: np.ndarray | None
    composite: bool
    maxpool_weight: float


def fold_cell(cell: NasCell, w_enc: np.ndarray, w_dec: np.ndarray) -> FoldResult:
    """Collapse decoder @ cell @ encoder into one 9x9 convolution kernel.

    w_enc: (r, C_in) down-projection; w_dec: (C_out, r) up-projection. The
    result satisfies conv2d(x, kernel, padding=4) == w_dec @ cell(w_enc @ x)
    for every input, channel passthrough included, whenever folding is exact.
    """
    if w_enc.ndim != 2 or w_dec.ndim != 2:
        raise ShapeError("fold_cell: projections must be 2-D")
    if w_enc.shape[0] != cell.width or w_dec.shape[1] != cell.width:
        raise ShapeError(f"fold_cell: projections {w_enc.shape}/{w_dec.shape} do not "
                         f"match cell width {cell.width}")
    a = cell.alpha.data
    ex = np.exp(a - a.max())
    weights = ex / ex.sum()
    mp = float(weights[CandidateOpKind.MAX_POOL3])
    # With no connected channels the cell is the identity; the blend never
    # runs, so a large max-pool weight cannot make the fold inexact.
    if mp > FOLD_TAU and cell.mask.count > 0:
        return FoldResult(kernel=None, composite=True, maxpool_weight=mp)

    c_in = w_enc.shape[1]
    c_out = w_dec.shape[0]
    ker = np.zeros((c_out, c_in, FOLD_KERNEL_SIZE, FOLD_KERNEL_SIZE))
    ctr = FOLD_KERNEL_SIZE // 2

    unsel = list(cell.mask.unselected)
    if unsel:
        ker[:, :, ctr, ctr] += w_dec[:, unsel] @ w_enc[unsel, :]
    sel = list(cell.mask.selected)
    if not sel:
        return FoldResult(kernel=ker, composite=False, maxpool_weight=mp)

    we = w_enc[sel, :]            # (c, C_in)
    wd = w_dec[:, sel]            # (C_out, c)

    ker[:, :, ctr, ctr] += weights[CandidateOpKind.SKIP] * (wd @ we)

    dense = wd @ we
    ker[:, :, ctr - 1:ctr + 2, ctr - 1:ctr + 2] += (
        weights[CandidateOpKind.AVG_POOL3] * dense[:, :, None, None] * (1.0 / 9.0))

    for kind in (CandidateOpKind.SEP_CONV3, CandidateOpKind.SEP_CONV5):
        p = cell.ops[kind]
        k = p.depthwise.shape[-1]
        h = k // 2
        # y_u = sum_v pw[u,v] (dw_v * x_v)  =>  tap[o,i,v,:,:] weight
        contrib = np.einsum("ov,vi,vab->oiab", wd @ p.pointwise.data, we,
                            p.depthwise.data[:, 0], optimize=True)
        ker[:, :, ctr - h:ctr + h + 1, ctr - h:ctr + h + 1] += weights[kind] * contrib

    for kind in (CandidateOpKind.DIL_CONV3, CandidateOpKind.DIL_CONV5):
        p = cell.ops[kind]
        k = p.kernel.shape[-1]
        contrib = np.einsum("ou,uvab,vi->oiab", wd, p.kernel.data, we, optimize=True)
        h = k // 2
        for a_i in range(k):
            for b_i in range(k):
                ker[:, :, ctr + 2 * (a_i - h), ctr + 2 * (b_i - h)] += (
                    weights[kind] * contrib[:, :, a_i, b_i])

    return FoldResult(kernel=ker, composite=False, maxpool_weight=mp)
