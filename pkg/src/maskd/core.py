"""Receptive-token masks, Dice diversity, mask weighting and masked feature distillation.

Feature maps may be passed per image (``(C, H, W)``, masks ``(T, H*W)``) or as
a batch (``(N, C, H, W)``, masks ``(N, T, H*W)``). Batched losses are the mean
of the per-image losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nets import Conv, Module

MASK_EPS = 1e-6
ORIGINS = ("teacher", "student", "customized")


class DegenerateInputError(ValueError):
    """Raised when a quantity is undefined for the given input (e.g. 0/0 Dice)."""


# ---------------------------------------------------------------------------
# types

class ReceptiveTokens(Module):
    """Learnable token embedding E of shape (T, C) for one feature stage."""

    def __init__(self, n_tokens: int, channels: int, rng: np.random.Generator | None = None,
                 stage_id: str = "0", E: np.ndarray | None = None):
        if n_tokens < 1:
            raise ValueError("need at least one token")
        if E is None:
            rng = rng or np.random.default_rng(0)
            E = rng.normal(0.0, 1.0 / math.sqrt(channels), size=(n_tokens, channels))
        E = np.asarray(E, dtype=ad.get_default_dtype())
        if E.shape != (n_tokens, channels):
            raise ShapeError(f"token embedding must be ({n_tokens}, {channels}), got {E.shape}")
        self.E = Tensor(E, requires_grad=True)
        self.stage_id = str(stage_id)

    @property
    def n_tokens(self) -> int:
        return self.E.shape[0]

    @property
    def channels(self) -> int:
        return self.E.shape[1]

    def named_parameters(self):
        return {"E": self.E}


@dataclass
class MaskSet:
    M: Tensor
    origin: str = "teacher"

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown mask origin {self.origin!r}")
        if self.M.ndim not in (2, 3):
            raise ShapeError(f"masks must be (T, HW) or (N, T, HW), got {self.M.shape}")

    @property
    def n_masks(self) -> int:
        return self.M.shape[-2]

    def __len__(self):
        return self.n_masks


class WeightingNet(Module):
    """3x3 conv + ReLU, global average pool, then a 1x1 conv to T importance logits."""

    def __init__(self, channels: int, n_tokens: int, rng: np.random.Generator):
        self.conv3 = Conv(channels, channels, 3, rng)
        self.head = Conv(channels, n_tokens, 1, None, zero=True)

    @property
    def n_tokens(self) -> int:
        return self.head.c_out

    def named_parameters(self):
        return {"conv3.weight": self.conv3.weight, "conv3.bias": self.conv3.bias,
                "head.weight": self.head.weight, "head.bias": self.head.bias}

    def logits(self, F: Tensor) -> Tensor:
        h = ad.relu(self.conv3(F))
        pooled = ad.global_avg_pool(h)  # (C,) or (N, C)
        spatial = pooled.shape + (1, 1)
        out = self.head(ad.reshape(pooled, spatial))
        return ad.reshape(out, out.shape[:-2])


class Projector(Module):
    """Per-pixel linear map (1x1 conv) from student to teacher channels."""

    def __init__(self, c_student: int, c_teacher: int, rng: np.random.Generator):
        w = rng.normal(0.0, math.sqrt(1.0 / c_student), size=(c_teacher, c_student, 1, 1))
        self.proj = Conv(c_student, c_teacher, 1, None)
        self.proj.weight.data[...] = w

    @property
    def out_channels(self) -> int:
        return self.proj.c_out

    def named_parameters(self):
        return {"proj.weight": self.proj.weight, "proj.bias": self.proj.bias}

    def __call__(self, F_s: Tensor) -> Tensor:
        return self.proj(F_s)


# ---------------------------------------------------------------------------
# helpers

def flatten_spatial(F: Tensor) -> Tensor:
    """(C, H, W) -> (C, H*W), (N, C, H, W) -> (N, C, H*W)."""
    if F.ndim == 3:
        C, H, W = F.shape
        return ad.reshape(F, (C, H * W))
    if F.ndim == 4:
        N, C, H, W = F.shape
        return ad.reshape(F, (N, C, H * W))
    raise ShapeError(f"expected a feature map, got shape {F.shape}")


def _as_flat_feature(F: Tensor, batched: bool) -> Tensor:
    """Accept (C, P)/(C, H, W) per image or (N, C, P)/(N, C, H, W) batched."""
    F = ad._as_tensor(F)
    if batched:
        if F.ndim == 4:
            return flatten_spatial(F)
        if F.ndim == 3:
            return F
    else:
        if F.ndim == 3:
            return flatten_spatial(F)
        if F.ndim == 2:
            return F
    raise ShapeError(f"feature of shape {F.shape} does not match {'batched' if batched else 'single'} masks")


def _weights_tensor(w, n_tokens: int, lead: tuple) -> Tensor:
    w = ad._as_tensor(w)
    if w.shape == (n_tokens,) and lead:
        w = Tensor(np.broadcast_to(w.data, lead + (n_tokens,)).copy(), requires_grad=False) \
            if not w.requires_grad else w
    if w.shape != lead + (n_tokens,):
        raise ShapeError(f"weights must have length {n_tokens} per image, got shape {w.shape}")
    return w


# ---------------------------------------------------------------------------
# masks

def compute_masks(tokens: ReceptiveTokens, F: Tensor, origin: str = "teacher") -> MaskSet:
    """M = sigmoid(E F) for a flattened feature (C, HW), or a batch (N, C, HW)."""
    F = ad._as_tensor(F)
    if F.ndim == 4:
        F = flatten_spatial(F)
    if F.ndim not in (2, 3):
        raise ShapeError(f"compute_masks: expected (C, HW) or (N, C, HW), got {F.shape}")
    if F.shape[-2] != tokens.channels:
        raise ShapeError(f"feature has {F.shape[-2]} channels, tokens expect {tokens.channels}")
    return MaskSet(ad.sigmoid(ad.matmul(tokens.E, F)), origin)


def masked_feature(masks: MaskSet, F: Tensor, w=None) -> Tensor:
    """F_hat = sum_i w_i (M_i * F); w defaults to all ones. Returns the flattened shape."""
    M = masks.M
    batched = M.ndim == 3
    F = _as_flat_feature(F, batched)
    if F.shape[-1] != M.shape[-1]:
        raise ShapeError(f"masks cover {M.shape[-1]} pixels, feature has {F.shape[-1]}")
    if batched and F.shape[0] != M.shape[0]:
        raise ShapeError("batch sizes of masks and feature differ")
    T = M.shape[-2]
    if w is None:
        combined = ad.reduce(M, "sum", -2)
    else:
        w = _weights_tensor(w, T, M.shape[:-2])
        if batched:
            combined = ad.reshape(ad.matmul(ad.reshape(w, (M.shape[0], 1, T)), M), (M.shape[0], M.shape[-1]))
        else:
            combined = ad.reshape(ad.matmul(ad.reshape(w, (1, T)), M), (M.shape[-1],))
    return ad.hadamard(F, combined)


# ---------------------------------------------------------------------------
# Dice

def dice(a, b) -> Tensor:
    """2 sum(a*b) / (sum(a^2) + sum(b^2)) for two vectors."""
    a, b = ad._as_tensor(a), ad._as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dice: expected two vectors of equal length, got {a.shape} and {b.shape}")
    den = ad.add(ad.reduce(a * a), ad.reduce(b * b))
    if not den.data > 0:
        raise DegenerateInputError("dice: both inputs are all-zero")
    return ad.div(ad.reduce(a * b) * 2.0, den)


def pairwise_dice(M: Tensor) -> Tensor:
    """(T, P) -> (T, T) Dice matrix; (N, T, P) -> (N, T, T)."""
    M = ad._as_tensor(M)
    T = M.shape[-2]
    gram = ad.matmul(M, ad.swap_last(M))
    # squared norms are read off the gram diagonal (not summed separately) so that
    # identical masks give a dice of exactly 1
    eye = ad.tensor(np.broadcast_to(np.eye(T), gram.shape).copy())
    sq = ad.reduce(gram * eye, "sum", -1)  # (..., T)
    if np.any(sq.data[..., :, None] + sq.data[..., None, :] <= 0):
        raise DegenerateInputError("dice: a pair of masks is all-zero")
    ones_row = ad.ones((1, T))
    ones_col = ad.ones((T, 1))
    lead = sq.shape[:-1]
    col = ad.reshape(sq, lead + (T, 1))
    row = ad.reshape(sq, lead + (1, T))
    den = ad.add(ad.matmul(col, ones_row), ad.matmul(ones_col, row))
    return ad.div(gram * 2.0, den)


def diversity_loss(masks: MaskSet) -> Tensor:
    """(1/T^2) sum_ij dice(M_i, M_j), diagonal included; batch-averaged."""
    if masks.n_masks < 1:
        raise ValueError("diversity_loss: need at least one mask")
    return ad.reduce(pairwise_dice(masks.M), "mean")


def max_offdiag_dice(masks: MaskSet) -> float:
    """Largest Dice between two distinct masks (batch-averaged first). 0 when T == 1."""
    with ad.no_grad():
        D = pairwise_dice(masks.M).data
    if D.ndim == 3:
        D = D.mean(axis=0)
    T = D.shape[0]
    if T < 2:
        return 0.0
    return float(D[~np.eye(T, dtype=bool)].max())


def token_loss(task, div, mu: float = 1.0) -> Tensor:
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    return ad.add(task, ad.mul(div, float(mu)))


# ---------------------------------------------------------------------------
# weighting

def mask_weights(net: WeightingNet, F: Tensor) -> Tensor:
    """Softmax-normalized per-image mask importances, shape (T,) or (N, T)."""
    F = ad._as_tensor(F)
    if F.ndim not in (3, 4):
        raise ShapeError(f"mask_weights: expected (C,H,W) or (N,C,H,W), got {F.shape}")
    if F.shape[-3] != net.conv3.c_in:
        raise ShapeError(f"mask_weights: feature has {F.shape[-3]} channels, module expects {net.conv3.c_in}")
    return ad.softmax(net.logits(F), axis=-1)


# ---------------------------------------------------------------------------
# distillation losses

def _check_pair(F_t: Tensor, proj: Tensor) -> None:
    if F_t.shape != proj.shape:
        if F_t.shape[-2:] != proj.shape[-2:]:
            raise ShapeError(f"spatial extents differ: teacher {F_t.shape}, student {proj.shape}")
        raise ShapeError(f"projected student {proj.shape} does not match teacher {F_t.shape}")


def mimic_loss(F_t: Tensor, F_s: Tensor, phi: Projector) -> Tensor:
    """(1/(HWC)) ||F_t - phi(F_s)||^2, batch-averaged."""
    F_t, F_s = ad._as_tensor(F_t), ad._as_tensor(F_s)
    if F_t.shape[-2:] != F_s.shape[-2:]:
        raise ShapeError(f"spatial extents differ: teacher {F_t.shape}, student {F_s.shape}")
    proj = phi(F_s)
    _check_pair(F_t, proj)
    diff = ad.sub(F_t, proj)
    return ad.reduce(diff * diff, "mean")


def _weighted_region_loss(M: Tensor, w: Tensor, F_t: Tensor, proj: Tensor) -> Tensor:
    """sum_i w_i / (C (sum_j M_ij + eps)) * ||M_i * (F_t - proj)||^2, batch-averaged."""
    batched = M.ndim == 3
    Ft = _as_flat_feature(F_t, batched)
    P = _as_flat_feature(proj, batched)
    if Ft.shape[-1] != M.shape[-1]:
        raise ShapeError(f"masks cover {M.shape[-1]} pixels, feature has {Ft.shape[-1]}")
    C = Ft.shape[-2]
    T = M.shape[-2]
    diff = ad.sub(Ft, P)
    per_pixel = ad.reduce(diff * diff, "sum", -2)  # (..., HW)
    col_shape = per_pixel.shape + (1,)
    per_mask = ad.matmul(M * M, ad.reshape(per_pixel, col_shape))  # (..., T, 1)
    per_mask = ad.reshape(per_mask, per_mask.shape[:-1])
    area = ad.add(ad.reduce(M, "sum", -1), MASK_EPS)
    terms = ad.div(ad.hadamard(w, per_mask), ad.mul(area, float(C)))
    per_image = ad.reduce(terms, "sum", -1)
    return ad.reduce(per_image, "mean") if batched else per_image


def _prepare(masks: MaskSet, F_t, F_s, phi):
    F_t, F_s = ad._as_tensor(F_t), ad._as_tensor(F_s)
    if F_t.shape[-2:] != F_s.shape[-2:]:
        raise ShapeError(f"spatial extents differ: teacher {F_t.shape}, student {F_s.shape}")
    proj = phi(F_s)
    _check_pair(F_t, proj)
    return F_t, proj


def region_loss(masks: MaskSet, F_t: Tensor, F_s: Tensor, phi: Projector) -> Tensor:
    """Mask-separated feature reconstruction averaged over the K masks."""
    F_t, proj = _prepare(masks, F_t, F_s, phi)
    K = masks.n_masks
    w = Tensor(np.full(masks.M.shape[:-1], 1.0 / K))
    return _weighted_region_loss(masks.M, w, F_t, proj)


def weighted_maskd_loss(masks: MaskSet, w, F_t: Tensor, F_s: Tensor, phi: Projector) -> Tensor:
    """Region loss with per-mask importance weights instead of 1/K."""
    F_t, proj = _prepare(masks, F_t, F_s, phi)
    w = _weights_tensor(w, masks.n_masks, masks.M.shape[:-2])
    return _weighted_region_loss(masks.M, w, F_t, proj)


def customize_masks(tokens: ReceptiveTokens, F_s_projected: Tensor, M_t: MaskSet) -> MaskSet:
    """M_r = sigmoid(E phi(F_s)) * M_t, with the student mask held constant."""
    if M_t.origin != "teacher":
        raise ValueError(f"customize_masks: expected teacher masks, got origin {M_t.origin!r}")
    P = ad._as_tensor(F_s_projected)
    batched = M_t.M.ndim == 3
    P = _as_flat_feature(P, batched)
    with ad.no_grad():
        M_s = compute_masks(tokens, ad.stop_gradient(P), origin="student").M
    if M_s.shape != M_t.M.shape:
        raise ShapeError(f"student masks {M_s.shape} do not match teacher masks {M_t.M.shape}")
    return MaskSet(ad.hadamard(ad.stop_gradient(M_s), M_t.M), "customized")


def maskd_loss(tokens: ReceptiveTokens, F_t: Tensor, F_s: Tensor, phi: Projector,
               weighting: WeightingNet, customize: bool = True) -> Tensor:
    """Weighted masked distillation; with ``customize`` the teacher masks are gated by the student's.

    Teacher features, tokens and the weighting module are treated as constants.
    """
    F_t, F_s = ad._as_tensor(F_t), ad._as_tensor(F_s)
    if F_t.ndim not in (3, 4):
        raise ShapeError(f"maskd_loss: expected (C,H,W) or (N,C,H,W) features, got {F_t.shape}")
    if weighting is None:
        raise ValueError("maskd_loss: a weighting module is required")
    F_t = ad.stop_gradient(F_t)
    with ad.no_grad():
        M_t = compute_masks(tokens, flatten_spatial(F_t))
        w = mask_weights(weighting, F_t)
    M_t = MaskSet(ad.stop_gradient(M_t.M), "teacher")
    w = ad.stop_gradient(w)
    if F_t.shape[-2:] != F_s.shape[-2:]:
        raise ShapeError(f"spatial extents differ: teacher {F_t.shape}, student {F_s.shape}")
    proj = phi(F_s)
    _check_pair(F_t, proj)
    masks = customize_masks(tokens, proj, M_t) if customize else M_t
    return _weighted_region_loss(masks.M, w, F_t, proj)


def multi_stage_maskd_loss(stages, customize: bool = True) -> Tensor:
    """Sum of :func:`maskd_loss` over (tokens, F_t, F_s, phi, weighting) tuples, one per stage."""
    total = None
    for tokens, F_t, F_s, phi, weighting in stages:
        term = maskd_loss(tokens, F_t, F_s, phi, weighting, customize)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("multi_stage_maskd_loss: no stages given")
    return total


def student_total_loss(task, distill, aux=None, lambda1: float = 1.0, lambda2: float = 1.0) -> Tensor:
    """task + lambda1 * distill + lambda2 * aux (aux defaults to zero)."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss factors must be nonnegative")
    total = ad.add(task, ad.mul(distill, float(lambda1)))
    if aux is not None:
        total = ad.add(total, ad.mul(aux, float(lambda2)))
    return total
