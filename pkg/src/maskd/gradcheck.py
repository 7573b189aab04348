"""Randomized finite-difference checks for every primitive and every loss.

Each case builds fresh random inputs from a generator and returns
``(f, inputs)`` with ``f(*inputs)`` a scalar. Non-scalar primitives are
contracted against a fixed random cotangent so every output entry is exercised.

The comparison is elementwise relative, so an entry whose true derivative
cancels to nearly zero is swamped by the finite-difference roundoff (about
1e-11 absolute at h=1e-5 for an O(1) loss). Inputs are therefore drawn so each
derivative is a sum of one-signed terms (positive cotangents, nonnegative
features, scale-separated masks) and so no rectifier input sits near its kink.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import core
from .autodiff import Tensor
from .core import MaskSet, Projector, ReceptiveTokens, WeightingNet

DEFAULT_TOL = 1e-5


def _leaf(rng, *shape, low=None, high=None):
    if low is not None:
        return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _away_from_zero(rng, *shape, margin=0.05):
    x = rng.normal(size=shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)
    return Tensor(x, requires_grad=True)


def _contract(out: Tensor, r: np.ndarray) -> Tensor:
    return ad.reduce(ad.mul(out, Tensor(r)))


def _out_shape(op, *xs) -> tuple:
    with ad.no_grad():
        return op(*xs).shape


def _cotangent(rng, shape) -> np.ndarray:
    return rng.uniform(0.5, 1.5, size=shape)


def _unary(op, make=None):
    def build(rng):
        x = make(rng) if make else _leaf(rng, 3, 4)
        r = _cotangent(rng, _out_shape(op, x))
        return (lambda x: _contract(op(x), r)), [x]
    return build


def _binary(op, make_b=None):
    def build(rng):
        a = _leaf(rng, 3, 4)
        b = make_b(rng) if make_b else _leaf(rng, 3, 4)
        r = _cotangent(rng, a.shape)
        return (lambda a, b: _contract(op(a, b), r)), [a, b]
    return build


def _hadamard_mask(rng):
    F, M = _leaf(rng, 2, 3, 5), _leaf(rng, 2, 5)
    r = _cotangent(rng, F.shape)
    return (lambda F, M: _contract(ad.hadamard(F, M), r)), [F, M]


def _mul_scalar(rng):
    x, s = _leaf(rng, 3, 4), float(rng.normal())
    r = _cotangent(rng, x.shape)
    return (lambda x: _contract(ad.mul(x, s), r)), [x]


def _reduce(kind, axes):
    def build(rng):
        x = _leaf(rng, 2, 3, 4)
        r = _cotangent(rng, _out_shape(lambda x: ad.reduce(x, kind, axes), x))
        return (lambda x: _contract(ad.reduce(x, kind, axes), r)), [x]
    return build


def _matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    r = _cotangent(rng, (3, 2))
    return (lambda a, b: _contract(ad.matmul(a, b), r)), [a, b]


def _matmul_batched(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 2)
    r = _cotangent(rng, (2, 3, 2))
    return (lambda a, b: _contract(ad.matmul(a, b), r)), [a, b]


def _conv(k):
    def build(rng):
        # positive input and weights with a positive cotangent: no cancelling sums
        x, w = _leaf(rng, 2, 2, 4, 5, low=0.1, high=1.0), _leaf(rng, 3, 2, k, k, low=0.1, high=1.0)
        b = _leaf(rng, 3)
        r = _cotangent(rng, (2, 3, 4, 5))
        return (lambda x, w, b: _contract(ad.conv2d(x, w, b), r)), [x, w, b]
    return build


def _global_avg_pool(rng):
    x = _leaf(rng, 2, 3, 4, 4)
    r = _cotangent(rng, (2, 3))
    return (lambda x: _contract(ad.global_avg_pool(x), r)), [x]


def _softmax(rng):
    # the gradient is s_k (r_k - s.r); a 0/1 cotangent with two ones per row and
    # moderate logits keeps s.r well inside (0, 1), so no entry nears zero
    x = Tensor(rng.normal(scale=0.5, size=(3, 4)), requires_grad=True)
    r = rng.permuted(np.tile([1.0, 1.0, 0.0, 0.0], (3, 1)), axis=1)
    return (lambda x: _contract(ad.softmax(x), r)), [x]


def _cross_entropy(rng):
    z = _leaf(rng, 2, 4, 3, 3)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    return (lambda z: ad.pixel_cross_entropy(z, labels)), [z]


# -- composite losses --------------------------------------------------------

KINK_MARGIN = 1e-3


def _clear_of_kinks(weighting: WeightingNet, F: np.ndarray) -> bool:
    """True when no rectifier input in the weighting module sits within reach of a step."""
    with ad.no_grad():
        pre = weighting.conv3(Tensor(F)).data
    return bool(np.min(np.abs(pre)) > KINK_MARGIN)


def _setup(rng, T=3, C=3, Cs=2, H=2, W=3, N=2, condition=False):
    # central differences are meaningless across a ReLU kink, so such draws are redrawn;
    # teacher features are rectified outputs in the pipeline, hence nonnegative here
    while True:
        tokens = ReceptiveTokens(T, C, rng)
        F_t = Tensor(np.abs(rng.normal(size=(N, C, H, W))))
        F_s = Tensor(rng.normal(size=(N, Cs, H, W)), requires_grad=True)
        phi = Projector(Cs, C, rng)
        phi.proj.bias.data[...] = rng.normal(size=C)
        weighting = WeightingNet(C, T, rng)
        weighting.head.weight.data[...] = rng.normal(size=weighting.head.weight.shape)
        weighting.head.bias.data[...] = rng.normal(size=T)
        if condition:
            _condition_weighting(rng, weighting, F_t.data)
            tokens.E.data[1] = -tokens.E.data[0]  # complementary masks
        if _clear_of_kinks(weighting, F_t.data):
            return tokens, F_t, F_s, phi, weighting


def _mask_generation(rng):
    tokens, F_t, *_ = _setup(rng)
    tokens.E.data[...] = np.abs(tokens.E.data)  # with nonnegative features, no cancelling sums
    F = Tensor(F_t.data, requires_grad=True)
    r = _cotangent(rng, _out_shape(lambda F: core.compute_masks(tokens, F).M, F))
    return (lambda E, F: _contract(core.compute_masks(tokens, F).M, r)), [tokens.E, F]


def _residual_pair(rng, N=2, C=3, Cs=2, H=2, W=3):
    """Nonnegative student, positive projector and a teacher offset by a residual in [0.9, 1.1].

    Every feature-loss derivative is then a sum of one-signed terms, and the
    mask derivative of the region normalisation, 2 M_p r_p^2 S - sum M^2 r^2,
    stays positive for masks drawn from [0.8, 1].
    """
    phi = Projector(Cs, C, rng)
    phi.proj.weight.data[...] = rng.uniform(0.2, 1.0, size=phi.proj.weight.shape)
    phi.proj.bias.data[...] = rng.uniform(0.0, 0.5, size=C)
    F_s = Tensor(np.abs(rng.normal(size=(N, Cs, H, W))), requires_grad=True)
    with ad.no_grad():
        proj = phi(F_s).data
    F_t = Tensor(proj + rng.uniform(0.9, 1.1, size=proj.shape))
    return F_t, F_s, phi


def _mimic(rng):
    F_t, F_s, phi = _residual_pair(rng)
    F_t.requires_grad = True
    return (lambda F_t, F_s, W, b: core.mimic_loss(F_t, F_s, phi)), [F_t, F_s, phi.proj.weight, phi.proj.bias]


def _region(rng):
    F_t, F_s, phi = _residual_pair(rng)
    M = _leaf(rng, 2, 3, 6, low=0.8, high=1.0)
    return (lambda M, F_s, W: core.region_loss(MaskSet(M), F_t, F_s, phi)), [M, F_s, phi.proj.weight]


# d dice / d a_k is proportional to b_k - dice * a_k, which crosses zero for look-alike
# vectors. A 20x scale gap between the two masks keeps every derivative one-signed.
def _scale_separated(rng, *shape):
    big = rng.uniform(0.8, 1.0, size=shape)
    small = 0.05 * rng.uniform(0.8, 1.0, size=shape)
    return Tensor(big, requires_grad=True), Tensor(small, requires_grad=True)


def _diversity(rng):
    big, small = _scale_separated(rng, 2, 1, 8)
    M = Tensor(np.concatenate([big.data, small.data], axis=1), requires_grad=True)
    return (lambda M: core.diversity_loss(MaskSet(M))), [M]


def _dice(rng):
    a, b = _scale_separated(rng, 12)
    return core.dice, [a, b]


def _condition_weighting(rng, weighting: WeightingNet, F: np.ndarray) -> None:
    """Two tokens with mirrored head rows, a positive conv and logits level at ``F``.

    With nonnegative features every weighting-path gradient is then a sum of
    same-signed terms, and the softmax sits at its steepest point, so no entry
    shrinks down into the roundoff floor.
    """
    weighting.conv3.weight.data[...] = rng.uniform(0.1, 0.5, size=weighting.conv3.weight.shape)
    weighting.conv3.bias.data[...] = rng.uniform(0.5, 1.0, size=weighting.conv3.bias.shape)
    u = rng.uniform(0.5, 1.0, size=weighting.head.weight.shape[1:]) * rng.choice([-1.0, 1.0])
    weighting.head.weight.data[0] = u
    weighting.head.weight.data[1] = -u
    weighting.head.bias.data[...] = 0.0
    with ad.no_grad():
        level = weighting.logits(Tensor(F)).data.reshape(-1, 2).mean(axis=0)
    weighting.head.bias.data[...] = -level


def _token(rng):
    tokens, F_t, _, _, weighting = _setup(rng, T=2, N=1, condition=True)
    head = ad.tensor(rng.normal(size=(3, 3, 1, 1)), requires_grad=True)
    labels = rng.integers(0, 3, size=(1, 2, 3))
    mu = float(rng.uniform(0.5, 2.0))

    def f(E, Wh, head_w, head_b):
        masks = core.compute_masks(tokens, core.flatten_spatial(F_t))
        w = core.mask_weights(weighting, F_t)
        F_hat = ad.reshape(core.masked_feature(masks, core.flatten_spatial(F_t), w), F_t.shape)
        task = ad.pixel_cross_entropy(ad.conv2d(F_hat, Wh), labels)
        return core.token_loss(task, core.diversity_loss(masks), mu)

    # the weighting conv sits behind a cancelling sum here; the mask_weights case covers it
    return f, [tokens.E, head, weighting.head.weight, weighting.head.bias]


def _mask_weights(rng):
    _, F_t, _, _, weighting = _setup(rng, T=2, condition=True)
    F = Tensor(F_t.data, requires_grad=True)
    # weights sum to one, so a centered cotangent loses nothing and keeps |f| small
    r = np.array([[1.0, -1.0], [1.0, -1.0]]) * rng.choice([-1.0, 1.0])
    return (lambda F, *p: _contract(core.mask_weights(weighting, F), r)), [F] + weighting.parameters()


def _weighted(rng):
    F_t, F_s, phi = _residual_pair(rng)
    M = _leaf(rng, 2, 3, 6, low=0.8, high=1.0)
    w = _leaf(rng, 2, 3, low=0.05, high=1.0)
    return (lambda M, w, F_s, W, b: core.weighted_maskd_loss(MaskSet(M), w, F_t, F_s, phi)), \
        [M, w, F_s, phi.proj.weight, phi.proj.bias]


def _customized(rng):
    # the student mask is a stop-gradient constant: hold it at its value at the evaluation point
    tokens, _, _, _, weighting = _setup(rng)
    F_t, F_s, phi = _residual_pair(rng)
    with ad.no_grad():
        M_t = core.compute_masks(tokens, core.flatten_spatial(F_t))
        M_r = core.customize_masks(tokens, phi(F_s), M_t)
        w = core.mask_weights(weighting, F_t)
    return (lambda F_s, W, b: core.weighted_maskd_loss(M_r, w, F_t, F_s, phi)), [F_s, phi.proj.weight, phi.proj.bias]


def _student_total(rng):
    tokens, F_t, F_s, phi, weighting = _setup(rng)
    head = ad.tensor(rng.normal(size=(3, 2, 1, 1)), requires_grad=True)
    labels = rng.integers(0, 3, size=(2, 2, 3))
    l1, l2 = rng.uniform(0.1, 2.0, size=2)

    def f(F_s, Wh, W):
        task = ad.pixel_cross_entropy(ad.conv2d(F_s, Wh), labels)
        dist = core.maskd_loss(tokens, F_t, F_s, phi, weighting, customize=False)
        aux = core.mimic_loss(F_t, F_s, phi)
        return core.student_total_loss(task, dist, aux, float(l1), float(l2))

    return f, [F_s, head, phi.proj.weight]


PRIMITIVES: dict[str, Callable] = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "neg": _unary(ad.neg),
    "mul": _binary(ad.mul),
    "mul_scalar": _mul_scalar,
    "hadamard": _hadamard_mask,
    "div": _binary(ad.div, lambda rng: _leaf(rng, 3, 4, low=0.5, high=2.0)),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, lambda rng: _leaf(rng, 3, 4, low=0.2, high=3.0)),
    "relu": _unary(ad.relu, lambda rng: _away_from_zero(rng, 3, 4)),
    "sigmoid": _unary(ad.sigmoid, lambda rng: Tensor(rng.normal(size=(3, 4)) * 2, requires_grad=True)),
    "reshape": _unary(lambda x: ad.reshape(x, (4, 3))),
    "transpose": _unary(ad.transpose),
    "swap_last": _unary(lambda x: ad.swap_last(x)),
    "sum": _reduce("sum", None),
    "sum_axis": _reduce("sum", (0, 2)),
    "mean": _reduce("mean", None),
    "mean_axis": _reduce("mean", (1,)),
    "global_avg_pool": _global_avg_pool,
    "softmax": _softmax,
    "matmul": _matmul,
    "matmul_batched": _matmul_batched,
    "conv2d_3x3": _conv(3),
    "conv2d_1x1": _conv(1),
    "pixel_cross_entropy": _cross_entropy,
}

LOSSES: dict[str, Callable] = {
    "mask_generation": _mask_generation,
    "mimic_loss": _mimic,
    "region_loss": _region,
    "diversity_loss": _diversity,
    "dice": _dice,
    "token_loss": _token,
    "mask_weights": _mask_weights,
    "weighted_maskd_loss": _weighted,
    "customized_maskd_loss": _customized,
    "student_total_loss": _student_total,
}

CASES = {**PRIMITIVES, **LOSSES}


def run(names=None, trials: int = 5, seed: int = 0, h: float = 1e-5) -> list[dict]:
    """Worst relative error per case over ``trials`` random draws (float64)."""
    names = list(CASES) if names is None else list(names)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck case(s): {', '.join(unknown)}")
    rows = []
    for name in names:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(trials):
            f, inputs = CASES[name](rng)
            worst = max(worst, ad.grad_check(f, inputs, h))
        rows.append({"op": name, "max_rel_err": worst, "trials": trials, "seconds": time.perf_counter() - t0})
    return rows
