"""Two-stage masked distillation on the synthetic segmentation task.

Stage 1 learns receptive tokens and the weighting module against a frozen
teacher; Stage 2 trains a student with one of several feature-distillation
losses. Every random draw comes from a named sub-stream of the run seed.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import core
from .autodiff import Tensor
from .core import MaskSet, Projector, ReceptiveTokens, WeightingNet
from .data import ToySample, gen_dataset, gt_masks, rng_for, stack
from .io import MetricsLog
from .nets import SGD, Adam, ToyNet, cosine_lr, poly_lr

log = logging.getLogger(__name__)

MODES = ("none", "mimic", "region_random", "region_learned", "weighted", "customized", "gt_masks")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ToyConfig:
    """Data, network sizes and teacher training."""
    H: int = 64
    W: int = 64
    n_classes: int = 4
    noise: float = 0.08
    n_train: int = 256
    n_val: int = 64
    data_seed: int = 0
    teacher_widths: tuple = (16, 32, 32)
    student_widths: tuple = (16, 16)
    teacher_iters: int = 3000
    teacher_lr: float = 0.003
    teacher_batch: int = 8
    teacher_seed: int = 0

    def __post_init__(self):
        self.teacher_widths = tuple(int(w) for w in self.teacher_widths)
        self.student_widths = tuple(int(w) for w in self.student_widths)
        if self.teacher_widths[-1] <= self.student_widths[-1]:
            raise ValueError("teacher feature width must exceed the student's")


@dataclass
class DistillConfig:
    T: int = 6
    mu: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    stage1_iters: int = 2000
    stage1_lr: float = 0.01
    stage1_weight_decay: float = 1e-3
    stage2_iters: int = 4000
    stage2_lr: float = 0.02
    stage2_momentum: float = 0.9
    stage2_weight_decay: float = 1e-4
    warmup_fraction: float = 0.2
    batch_size: int = 8
    seed: int = 0
    mode: str = "customized"
    n_evals: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.T < 0:
            raise ValueError("T must be nonnegative")
        if self.mu < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss factors must be nonnegative")

    @property
    def warmup_iters(self) -> int:
        return int(round(self.warmup_fraction * self.stage2_iters))


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# data plumbing

@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_samples(cls, samples: list[ToySample]) -> "Split":
        x, y = stack(samples)
        return cls(x, y)


@dataclass
class Dataset:
    train: Split
    val: Split
    n_classes: int


def build_dataset(toy: ToyConfig) -> Dataset:
    samples = gen_dataset(toy.data_seed, toy.n_train + toy.n_val, toy.H, toy.W, toy.n_classes, toy.noise)
    return Dataset(Split.from_samples(samples[: toy.n_train]),
                   Split.from_samples(samples[toy.n_train:]), toy.n_classes)


class BatchStream:
    """Endless reshuffled minibatch indices from a named shuffle stream."""

    def __init__(self, n: int, batch: int, seed: int, stream: str = "shuffle"):
        if n < 1:
            raise ValueError("empty training set")
        self.n, self.batch = n, min(batch, n)
        self.rng = rng_for(seed, stream)
        self.perm = self.rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return np.sort(idx)


def make_teacher(toy: ToyConfig) -> ToyNet:
    return ToyNet(list(toy.teacher_widths), toy.n_classes, rng_for(toy.teacher_seed, "init_teacher"), role="teacher")


def make_student(toy: ToyConfig, seed: int) -> ToyNet:
    return ToyNet(list(toy.student_widths), toy.n_classes, rng_for(seed, "init_student"), role="student")


def make_projector(toy: ToyConfig, seed: int) -> Projector:
    return Projector(toy.student_widths[-1], toy.teacher_widths[-1], rng_for(seed, "init_projector"))


# ---------------------------------------------------------------------------
# evaluation

def confusion_matrix(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    idx = labels.reshape(-1).astype(np.int64) * n_classes + pred.reshape(-1).astype(np.int64)
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def metrics_from_confusion(cm: np.ndarray) -> dict:
    """Pixel accuracy, per-class IoU and their mean (classes absent from both sides are skipped)."""
    tp = np.diag(cm).astype(float)
    union = cm.sum(0) + cm.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)
    total = cm.sum()
    return {
        "pixel_accuracy": float(tp.sum() / total) if total else float("nan"),
        "mIoU": float(np.nanmean(iou)) if np.any(union > 0) else float("nan"),
        "per_class_IoU": [float(v) for v in iou],
    }


def evaluate(net, data: Split, n_classes: int | None = None, batch: int = 16, workers: int = 1) -> dict:
    """Confusion-matrix metrics of ``net`` (any callable images -> logits) on a split."""
    if n_classes is None:
        n_classes = getattr(net, "n_classes")
    starts = list(range(0, len(data), batch))

    def run(s):
        with ad.no_grad():
            logits = net(Tensor(data.images[s:s + batch])).data
        return confusion_matrix(logits.argmax(axis=1), data.labels[s:s + batch], n_classes)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            cms = list(ex.map(run, starts))
    else:
        cms = [run(s) for s in starts]
    cm = np.sum(cms, axis=0) if cms else np.zeros((n_classes, n_classes), dtype=np.int64)
    return metrics_from_confusion(cm)


def teacher_features(teacher: ToyNet, images: np.ndarray, batch: int = 16) -> np.ndarray:
    with ad.no_grad():
        return np.concatenate([teacher.features(Tensor(images[s:s + batch])).data
                               for s in range(0, len(images), batch)])


def _check_finite(value: float, what: str, it: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"{what} became non-finite at iteration {it}")


def _eval_points(iters: int, n_evals: int) -> set:
    if iters <= 0:
        return set()
    n = max(1, min(n_evals, iters))
    return {int(round(iters * (k + 1) / n)) - 1 for k in range(n)}


# ---------------------------------------------------------------------------
# teacher

@dataclass
class TrainResult:
    net: ToyNet
    metrics: dict
    log: MetricsLog


def train_teacher(data: Dataset, net: ToyNet, iters: int, lr: float, batch: int = 8, seed: int = 0,
                  n_evals: int = 10, workers: int = 1) -> TrainResult:
    """Minimize pixel cross-entropy with Adam; returns validation accuracy and IoU."""
    if net.role != "teacher":
        raise ValueError("train_teacher expects a network with role 'teacher'")
    net.unfreeze()
    opt = Adam(net.parameters(), lr=lr)
    stream = BatchStream(len(data.train), batch, seed, "shuffle_teacher")
    evals = _eval_points(iters, n_evals)
    mlog = MetricsLog()
    for it in range(iters):
        idx = stream.next()
        x = Tensor(data.train.images[idx])
        opt.zero_grad()
        loss = ad.pixel_cross_entropy(net(x), data.train.labels[idx])
        _check_finite(loss.item(), "teacher loss", it)
        ad.backward(loss)
        step_lr = cosine_lr(it, iters, lr)
        opt.step(step_lr)
        if it in evals:
            m = evaluate(net, data.val, data.n_classes, workers=workers)
            mlog.append(it, task=loss.item(), lr=step_lr, accuracy=m["pixel_accuracy"], mIoU=m["mIoU"])
            log.info("teacher it=%d loss=%.4f acc=%.4f mIoU=%.4f", it, loss.item(), m["pixel_accuracy"], m["mIoU"])
    net.freeze()
    return TrainResult(net, evaluate(net, data.val, data.n_classes, workers=workers), mlog)


# ---------------------------------------------------------------------------
# stage 1

class MaskedTeacher:
    """Teacher whose head sees the weighted masked feature instead of the raw one."""

    def __init__(self, teacher: ToyNet, tokens: ReceptiveTokens, weighting: WeightingNet | None):
        self.teacher, self.tokens, self.weighting = teacher, tokens, weighting
        self.n_classes = teacher.n_classes

    def masked(self, F: Tensor) -> tuple[Tensor, MaskSet]:
        N, C, H, W = F.shape
        masks = core.compute_masks(self.tokens, core.flatten_spatial(F))
        w = core.mask_weights(self.weighting, F) if self.weighting is not None else None
        F_hat = core.masked_feature(masks, F, w)
        return ad.reshape(F_hat, (N, C, H, W)), masks

    def __call__(self, x: Tensor) -> Tensor:
        F_hat, _ = self.masked(self.teacher.features(x))
        return self.teacher.classify(F_hat)


@dataclass
class TokenResult:
    tokens: ReceptiveTokens
    weighting: WeightingNet
    trace: list = field(default_factory=list)  # (iteration, task, div)
    log: MetricsLog = field(default_factory=MetricsLog)


def learn_tokens(teacher: ToyNet, data: Dataset, cfg: DistillConfig, features: np.ndarray | None = None,
                 workers: int = 1) -> TokenResult:
    """Stage 1: fit tokens and weighting module through the frozen teacher head."""
    if not teacher.frozen:
        raise ValueError("learn_tokens requires a frozen teacher")
    if cfg.T < 1:
        raise ValueError("learn_tokens needs T >= 1")
    if features is None:
        features = teacher_features(teacher, data.train.images)
    C = features.shape[1]
    tokens = ReceptiveTokens(cfg.T, C, rng_for(cfg.seed, "init_tokens"))
    weighting = WeightingNet(C, cfg.T, rng_for(cfg.seed, "init_weighting"))
    params = tokens.parameters() + weighting.parameters()
    opt = Adam(params, lr=cfg.stage1_lr, weight_decay=cfg.stage1_weight_decay)
    stream = BatchStream(len(data.train), cfg.batch_size, cfg.seed, "shuffle_tokens")
    masked_teacher = MaskedTeacher(teacher, tokens, weighting)
    evals = _eval_points(cfg.stage1_iters, cfg.n_evals)
    result = TokenResult(tokens, weighting)
    for it in range(cfg.stage1_iters):
        idx = stream.next()
        F = Tensor(features[idx])
        opt.zero_grad()
        F_hat, masks = masked_teacher.masked(F)
        task = ad.pixel_cross_entropy(teacher.classify(F_hat), data.train.labels[idx])
        div = core.diversity_loss(masks)
        loss = core.token_loss(task, div, cfg.mu)
        _check_finite(loss.item(), "token loss", it)
        ad.backward(loss)
        lr = cosine_lr(it, cfg.stage1_iters, cfg.stage1_lr)
        opt.step(lr)
        result.trace.append((it, task.item(), div.item()))
        if it in evals:
            m = evaluate(masked_teacher, data.val, data.n_classes, workers=workers)
            result.log.append(it, task=task.item(), div=div.item(), lr=lr,
                              accuracy=m["pixel_accuracy"], mIoU=m["mIoU"])
            log.info("stage1 it=%d task=%.4f div=%.4f acc=%.4f", it, task.item(), div.item(), m["pixel_accuracy"])
    tokens.freeze()
    weighting.freeze()
    return result


def learned_masks(tokens: ReceptiveTokens, features: np.ndarray) -> MaskSet:
    with ad.no_grad():
        return core.compute_masks(tokens, core.flatten_spatial(Tensor(features)))


# ---------------------------------------------------------------------------
# stage 2

@dataclass
class DistillResult:
    student: ToyNet
    phi: Projector
    metrics: dict
    log: MetricsLog


def _param_fingerprint(modules) -> bytes:
    import hashlib
    h = hashlib.sha256()
    for m in modules:
        if m is None:
            continue
        for name, p in sorted(m.named_parameters().items()):
            h.update(name.encode())
            h.update(p.data.tobytes())
    return h.digest()


def distill(teacher: ToyNet, tokens: ReceptiveTokens | None, weighting: WeightingNet | None,
            student: ToyNet, phi: Projector, cfg: DistillConfig, data: Dataset,
            features: np.ndarray | None = None, workers: int = 1) -> DistillResult:
    """Stage 2: train ``student`` (and ``phi``) with task loss plus the mode's distillation loss."""
    mode = cfg.mode
    if not teacher.frozen:
        raise ValueError("distill requires a frozen teacher")
    if mode in ("region_learned", "weighted", "customized") and tokens is None:
        raise ValueError(f"mode {mode!r} needs learned tokens (run learn-masks first)")
    if mode in ("weighted", "customized") and weighting is None:
        raise ValueError(f"mode {mode!r} needs a weighting module (run learn-masks first)")
    for m in (tokens, weighting):
        if m is not None and not m.frozen:
            raise ValueError("tokens and weighting module must be frozen during distillation")
    if mode == "region_random":
        C = teacher.feature_channels
        tokens = ReceptiveTokens(max(cfg.T, 1), C, rng_for(cfg.seed, "random_tokens"))
        tokens.freeze()
    if features is None and mode != "none":
        features = teacher_features(teacher, data.train.images)
    frozen_before = _param_fingerprint([teacher, tokens, weighting])

    student.unfreeze()
    params = student.parameters() + (phi.parameters() if mode != "none" else [])
    if mode != "none":
        phi.unfreeze()
    opt = SGD(params, lr=cfg.stage2_lr, momentum=cfg.stage2_momentum, weight_decay=cfg.stage2_weight_decay)
    stream = BatchStream(len(data.train), cfg.batch_size, cfg.seed, "shuffle_student")
    evals = _eval_points(cfg.stage2_iters, cfg.n_evals)
    warmup = cfg.warmup_iters
    mlog = MetricsLog()
    for it in range(cfg.stage2_iters):
        idx = stream.next()
        x = Tensor(data.train.images[idx])
        labels = data.train.labels[idx]
        opt.zero_grad()
        F_s = student.features(x)
        task = ad.pixel_cross_entropy(student.classify(F_s), labels)
        dist = distill_term(mode, it, warmup, F_s, features[idx] if features is not None else None,
                            labels, phi, tokens, weighting, data.n_classes)
        total = core.student_total_loss(task, dist, None, cfg.lambda1, cfg.lambda2) if dist is not None else task
        _check_finite(total.item(), f"student loss ({mode})", it)
        ad.backward(total)
        lr = poly_lr(it, cfg.stage2_iters, cfg.stage2_lr)
        opt.step(lr)
        if it in evals:
            m = evaluate(student, data.val, data.n_classes, workers=workers)
            mlog.append(it, task=task.item(), distill=dist.item() if dist is not None else 0.0, lr=lr,
                        accuracy=m["pixel_accuracy"], mIoU=m["mIoU"])
            log.info("stage2[%s] it=%d task=%.4f distill=%.4f acc=%.4f", mode, it, task.item(),
                     dist.item() if dist is not None else 0.0, m["pixel_accuracy"])
    student.freeze()
    phi.freeze()
    if _param_fingerprint([teacher, tokens, weighting]) != frozen_before:
        raise RuntimeError("frozen parameters changed during distillation")
    return DistillResult(student, phi, evaluate(student, data.val, data.n_classes, workers=workers), mlog)


def distill_term(mode, it, warmup, F_s, F_t_np, labels, phi, tokens, weighting, n_classes):
    """Distillation loss for one batch, or None for mode 'none'."""
    if mode == "none":
        return None
    F_t = Tensor(F_t_np)
    if mode == "mimic":
        return core.mimic_loss(F_t, F_s, phi)
    if mode in ("region_random", "region_learned"):
        return core.region_loss(learned_masks(tokens, F_t_np), F_t, F_s, phi)
    if mode == "gt_masks":
        return core.region_loss(gt_masks(labels, n_classes), F_t, F_s, phi)
    if mode == "weighted":
        return core.maskd_loss(tokens, F_t, F_s, phi, weighting, customize=False)
    if mode == "customized":
        return core.maskd_loss(tokens, F_t, F_s, phi, weighting, customize=it >= warmup)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# experiments

@dataclass
class Lab:
    """A dataset plus a trained, frozen teacher and its cached training features."""
    toy: ToyConfig
    data: Dataset
    teacher: ToyNet
    features: np.ndarray
    teacher_metrics: dict


def prepare_lab(toy: ToyConfig, teacher: ToyNet | None = None, workers: int = 1) -> Lab:
    data = build_dataset(toy)
    if teacher is None:
        res = train_teacher(data, make_teacher(toy), toy.teacher_iters, toy.teacher_lr, toy.teacher_batch,
                            toy.teacher_seed, workers=workers)
        teacher = res.net
    teacher.freeze()
    metrics = evaluate(teacher, data.val, data.n_classes, workers=workers)
    return Lab(toy, data, teacher, teacher_features(teacher, data.train.images), metrics)


def run_student(lab: Lab, cfg: DistillConfig, tokens=None, weighting=None, workers: int = 1) -> DistillResult:
    student = make_student(lab.toy, cfg.seed)
    phi = make_projector(lab.toy, cfg.seed)
    return distill(lab.teacher, tokens, weighting, student, phi, cfg, lab.data, lab.features, workers)


def ablate(lab: Lab, cfg: DistillConfig, seeds, modes=MODES, workers: int = 1) -> dict:
    """Final student accuracy per mode and seed; tokens are learned once per seed."""
    results = {m: [] for m in modes}
    for seed in seeds:
        scfg = replace(cfg, seed=seed)
        stage1 = None
        if any(m in ("region_learned", "weighted", "customized") for m in modes):
            stage1 = learn_tokens(lab.teacher, lab.data, scfg, lab.features, workers)
        for mode in modes:
            mcfg = replace(scfg, mode=mode)
            res = run_student(lab, mcfg, stage1.tokens if stage1 else None,
                              stage1.weighting if stage1 else None, workers)
            results[mode].append(res.metrics)
            log.info("ablate seed=%d mode=%s acc=%.4f", seed, mode, res.metrics["pixel_accuracy"])
    return results


def summarize(results: dict, key: str = "pixel_accuracy") -> list[dict]:
    rows = []
    for mode, runs in results.items():
        vals = np.array([r[key] for r in runs])
        rows.append({"mode": mode, "mean": float(vals.mean()), "std": float(vals.std()), "values": vals.tolist()})
    return rows


def token_sweep(lab: Lab, cfg: DistillConfig, T_values, seeds=(0,), workers: int = 1) -> list[dict]:
    """Student accuracy per token count; T=0 is plain mimic distillation."""
    rows = []
    for T in T_values:
        if T < 0:
            raise ValueError("token counts must be nonnegative")
        accs = []
        for seed in seeds:
            if T == 0:
                res = run_student(lab, replace(cfg, seed=seed, mode="mimic"), workers=workers)
            else:
                scfg = replace(cfg, seed=seed, T=T)
                st1 = learn_tokens(lab.teacher, lab.data, scfg, lab.features, workers)
                res = run_student(lab, scfg, st1.tokens, st1.weighting, workers)
            accs.append(res.metrics["pixel_accuracy"])
        rows.append({"T": int(T), "accuracy": float(np.mean(accs)), "values": accs})
    return rows


def config_dict(toy: ToyConfig, cfg: DistillConfig) -> dict:
    return {"data": {k: v for k, v in asdict(toy).items()}, "distill": asdict(cfg)}
