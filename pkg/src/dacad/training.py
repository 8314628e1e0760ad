"""Pre-training, pseudo-labelling and the alternating class-conditional alignment loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import AugmentConfig, LabeledDataset, UnlabeledDataset, augment
from .model import (ModelParams, classifier_backward, classifier_forward, encode,
                    encode_backward, forward, predict_labels)
from .numerics import AdamState, DivergenceError, adam_step, softmax_cross_entropy
from .swd import (ProjectionSet, SampleSizeError, SwdConfig, sample_unit_directions,
                  subseed, swd_backward, swd_estimate)

log = logging.getLogger(__name__)

# stream ids for subseed(); keeping them apart makes the classification updates
# consume identical randomness whether or not alignment steps run
_PRETRAIN, _CE, _SUBSAMPLE, _DIRECTIONS, _AUGMENT = range(5)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    tau: float = 0.99
    itr: int = 30
    alt: int = 10
    batch_per_class: int | None = 32      # None: every pseudo-labelled point
    ce_batch_size: int | None = 64        # None: full source batch
    lr: float = 1e-3
    # step size of the alignment update; None reuses lr. Adam is invariant to
    # rescaling its gradient, so lam alone barely changes the alignment step
    swd_lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pretrain_epochs: int = 20
    pretrain_batch_size: int = 64
    # False: the classification update (b) leaves the encoder frozen
    cotrain_encoder: bool = True
    # False: source embeddings act as fixed anchors in the alignment update
    align_source_grad: bool = True
    seed: int = 0
    swd: SwdConfig = field(default_factory=SwdConfig)
    augment: AugmentConfig | None = None

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.itr < 1:
            raise ValueError(f"itr must be >= 1, got {self.itr}")
        if self.alt < 1:
            raise ValueError(f"alt must be >= 1, got {self.alt}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("batch_per_class", "ce_batch_size"):
            val = getattr(self, name)
            if val is not None and val < 1:
                raise ValueError(f"{name} must be >= 1 or None, got {val}")

    def adam(self, params, lr: float | None = None) -> AdamState:
        return AdamState.zeros_like(params, lr=self.lr if lr is None else lr,
                                    beta1=self.beta1, beta2=self.beta2, eps=self.eps)


@dataclass
class PseudoLabelSet:
    indices: np.ndarray       # into the target set
    labels: np.ndarray
    confidences: np.ndarray

    def __len__(self):
        return self.indices.size

    def counts(self, k: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=k)


@dataclass
class IterationRecord:
    iteration: int
    ce_loss: float
    swd_loss: float
    source_acc: float
    target_acc: float | None
    pl_counts: np.ndarray
    pl_correct: int | None = None
    swd_steps: int = 0
    ce_steps: int = 0


@dataclass
class TrainLog:
    records: list[IterationRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def pl_totals(self) -> list[int]:
        return [int(r.pl_counts.sum()) for r in self.records]


@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray     # nan for classes absent from the data
    support: np.ndarray
    n: int


def evaluate(params: ModelParams, dataset: LabeledDataset) -> EvalResult:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits, probs = forward(params, dataset.x)
    pred, _ = predict_labels(probs)
    k = max(logits.shape[1], int(dataset.y.max()) + 1)
    hit = pred == dataset.y
    support = np.bincount(dataset.y, minlength=k)
    correct = np.bincount(dataset.y, weights=hit, minlength=k)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, correct / np.maximum(support, 1), np.nan)
    return EvalResult(float(hit.mean()), per_class, support, len(dataset))


def ce_loss_and_grads(params: ModelParams, x, y):
    """Source cross entropy through classifier and encoder: (loss, grads_v, grads_w)."""
    z, enc_cache = encode(params.v, x)
    logits, clf_cache = classifier_forward(params.w, z)
    loss, dlogits = softmax_cross_entropy(logits, y)
    gw, dz = classifier_backward(params.w, clf_cache, dlogits)
    gv, _ = encode_backward(params.v, enc_cache, dz)
    return loss, gv, gw


def _source_batch(source: LabeledDataset, size: int | None, rng, cfg: TrainConfig, step: int):
    if size is None or size >= len(source):
        idx = np.arange(len(source))
    else:
        idx = rng.choice(len(source), size, replace=False)
    x = source.x[idx]
    if cfg.augment is not None and source.image_shape is not None:
        x = augment(x, cfg.augment, subseed(cfg.seed, _AUGMENT, step), source.image_shape)
    return x, source.y[idx]


def _ce_update(params, opt, x, y, train_encoder: bool, where: str):
    loss, gv, gw = ce_loss_and_grads(params, x, y)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite cross entropy at {where}")
    if not train_encoder:
        gv = [np.zeros_like(g) for g in gv]
    new, opt = adam_step(params.all(), [*gv, *gw], opt)
    nv = len(params.v)
    return ModelParams(new[:nv], new[nv:]), opt, loss


def pretrain(source: LabeledDataset, params: ModelParams, cfg: TrainConfig,
             callback: Callable[[int, float, ModelParams], None] | None = None) -> ModelParams:
    """Minibatch Adam on source cross entropy only, ``cfg.pretrain_epochs`` passes."""
    if len(source) == 0:
        raise ValueError("empty source dataset")
    rng = np.random.default_rng(subseed(cfg.seed, _PRETRAIN))
    opt = cfg.adam(params.all())
    n = len(source)
    bs = min(cfg.pretrain_batch_size, n)
    step = 0
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            x = source.x[idx]
            if cfg.augment is not None and source.image_shape is not None:
                x = augment(x, cfg.augment, subseed(cfg.seed, _PRETRAIN, _AUGMENT, step),
                            source.image_shape)
            params, opt, loss = _ce_update(params, opt, x, source.y[idx], True,
                                           f"pretraining epoch {epoch} step {step}")
            losses.append(loss)
            step += 1
        if callback is not None:
            callback(epoch, float(np.mean(losses)), params)
    return params


def build_pseudo_labels(params: ModelParams, target_x, tau: float) -> PseudoLabelSet:
    """Target points whose top softmax probability strictly exceeds ``tau``."""
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    _, probs = forward(params, target_x)
    labels, conf = predict_labels(probs)
    keep = np.flatnonzero(conf > tau)
    return PseudoLabelSet(keep, labels[keep], conf[keep])


@dataclass
class ConditionalSwd:
    loss: float
    grads: list[np.ndarray]     # w.r.t. encoder parameters
    per_class: np.ndarray
    active: list[int]           # classes that contributed


def class_batches(source: LabeledDataset, target_x: np.ndarray, pl: PseudoLabelSet, k: int,
                  batch_per_class: int | None, rng) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Equal-count per-class samples: n_j = min(source n_j, pseudo n_j, batch_per_class)."""
    src, tgt = [], []
    for j in range(k):
        s_idx = np.flatnonzero(source.y == j)
        t_idx = pl.indices[pl.labels == j]
        n_j = min(s_idx.size, t_idx.size)
        if batch_per_class is not None:
            n_j = min(n_j, batch_per_class)
        if n_j == 0:
            src.append(source.x[:0])
            tgt.append(target_x[:0])
            continue
        s_pick = s_idx if n_j == s_idx.size else rng.choice(s_idx, n_j, replace=False)
        t_pick = t_idx if n_j == t_idx.size else rng.choice(t_idx, n_j, replace=False)
        src.append(source.x[s_pick])
        tgt.append(target_x[t_pick])
    return src, tgt


def conditional_swd_loss(v: Sequence[np.ndarray], source_by_class: Sequence[np.ndarray],
                         target_by_class: Sequence[np.ndarray], cfg: SwdConfig,
                         projections: ProjectionSet | None = None,
                         source_grad: bool = True) -> ConditionalSwd:
    """Sum over classes of the SWD between source and pseudo-labelled target embeddings.

    Classes with no target samples contribute zero. When no class is active the
    loss is 0 with zero gradients and ``active`` is empty, which callers treat
    as "skip this update".
    """
    k = len(source_by_class)
    if len(target_by_class) != k:
        raise ValueError(f"{k} source classes but {len(target_by_class)} target classes")
    active = [j for j in range(k) if len(target_by_class[j]) > 0]
    per_class = np.zeros(k)
    if not active:
        return ConditionalSwd(0.0, [np.zeros_like(p) for p in v], per_class, [])
    for j in active:
        if len(source_by_class[j]) != len(target_by_class[j]):
            raise SampleSizeError(f"class {j}: {len(source_by_class[j])} source vs "
                                  f"{len(target_by_class[j])} target samples")

    # one encoder pass over every sample, then slice per class
    parts = [source_by_class[j] for j in active] + [target_by_class[j] for j in active]
    z, cache = encode(v, np.vstack(parts))
    if projections is None:
        projections = sample_unit_directions(cfg.num_projections, z.shape[1], cfg.seed)
    dz = np.zeros_like(z)
    offsets = np.cumsum([0] + [len(p) for p in parts])
    m = len(active)
    for a, j in enumerate(active):
        ss = slice(offsets[a], offsets[a + 1])
        ts = slice(offsets[m + a], offsets[m + a + 1])
        est = swd_estimate(z[ss], z[ts], cfg, projections)
        gs, gt = swd_backward(est, z[ss], z[ts], cfg)
        per_class[j] = est.value
        if source_grad:
            dz[ss] += gs
        dz[ts] += gt
    grads, _ = encode_backward(v, cache, dz)
    return ConditionalSwd(float(per_class.sum()), grads, per_class, active)


def _check_source(source: LabeledDataset):
    if len(source) == 0:
        raise ValueError("empty source dataset")


def _train_loop(source: LabeledDataset, target: UnlabeledDataset | None, params: ModelParams,
                cfg: TrainConfig, align: bool, eval_target: LabeledDataset | None,
                callback) -> tuple[ModelParams, TrainLog]:
    _check_source(source)
    k = params.w[-1].shape[0]
    rng_ce = np.random.default_rng(subseed(cfg.seed, _CE))
    rng_sub = np.random.default_rng(subseed(cfg.seed, _SUBSAMPLE))
    opt_ce = cfg.adam(params.all())
    opt_swd = cfg.adam(params.v, cfg.swd_lr)
    trainlog = TrainLog()
    step = 0
    for itr in range(1, cfg.itr + 1):
        if align:
            pl = build_pseudo_labels(params, target.x, cfg.tau)
        else:
            empty = np.zeros(0, np.int64)
            pl = PseudoLabelSet(empty, empty, np.zeros(0))
        ce_losses, swd_losses = [], []
        swd_steps = 0
        for alt in range(1, cfg.alt + 1):
            if align:
                src, tgt = class_batches(source, target.x, pl, k, cfg.batch_per_class, rng_sub)
                if any(len(t) for t in tgt):
                    f = params.v[-2].shape[1] if params.v else source.dim
                    proj = sample_unit_directions(cfg.swd.num_projections, f,
                                                  subseed(cfg.seed, _DIRECTIONS, cfg.swd.seed,
                                                          itr, alt))
                    res = conditional_swd_loss(params.v, src, tgt, cfg.swd, proj,
                                               cfg.align_source_grad)
                    if not np.isfinite(res.loss):
                        raise DivergenceError(f"non-finite alignment loss at iteration {itr}",
                                              itr)
                    grads = [cfg.lam * g for g in res.grads]
                    new_v, opt_swd = adam_step(params.v, grads, opt_swd)
                    params = ModelParams(new_v, params.w)
                    swd_losses.append(res.loss)
                    swd_steps += 1
            x, y = _source_batch(source, cfg.ce_batch_size, rng_ce, cfg, step)
            try:
                params, opt_ce, loss = _ce_update(params, opt_ce, x, y, cfg.cotrain_encoder,
                                                  f"iteration {itr}")
            except DivergenceError as exc:
                raise DivergenceError(str(exc), itr) from None
            if not params.is_finite():
                raise DivergenceError(f"non-finite parameters at iteration {itr}", itr)
            ce_losses.append(loss)
            step += 1

        tgt_acc = None
        pl_correct = None
        if eval_target is not None:
            tgt_acc = evaluate(params, eval_target).accuracy
            pl_correct = int(np.sum(eval_target.y[pl.indices] == pl.labels))
        rec = IterationRecord(
            iteration=itr,
            ce_loss=float(np.mean(ce_losses)),
            swd_loss=float(np.mean(swd_losses)) if swd_losses else 0.0,
            source_acc=evaluate(params, source).accuracy,
            target_acc=tgt_acc,
            pl_counts=pl.counts(k),
            pl_correct=pl_correct,
            swd_steps=swd_steps,
            ce_steps=len(ce_losses),
        )
        trainlog.records.append(rec)
        log.debug("itr %d ce %.4f swd %.4f pl %d target %s", itr, rec.ce_loss, rec.swd_loss,
                  rec.pl_counts.sum(), tgt_acc)
        if callback is not None:
            callback(rec, params, pl)
    return params, trainlog


def dacad_train(source: LabeledDataset, target: UnlabeledDataset, params: ModelParams,
                cfg: TrainConfig, eval_target: LabeledDataset | None = None,
                callback: Callable[[IterationRecord, ModelParams, PseudoLabelSet], None] | None = None,
                ) -> tuple[ModelParams, TrainLog]:
    """Alternate class-conditional alignment and source classification updates.

    Each outer iteration rebuilds the pseudo-label set from the current model.
    Each inner alternation takes one Adam step on ``lam * conditional SWD``
    w.r.t. the encoder only (skipped when no class has pseudo-labels), then one
    Adam step on a source cross-entropy batch. ``eval_target`` is used for
    logging only.
    """
    if isinstance(target, LabeledDataset):
        target = target.unlabeled()
    if target.dim != source.dim:
        raise ValueError(f"source dim {source.dim} != target dim {target.dim}")
    return _train_loop(source, target, params, cfg, True, eval_target, callback)


def source_only_train(source: LabeledDataset, params: ModelParams, cfg: TrainConfig,
                      eval_target: LabeledDataset | None = None,
                      callback=None) -> tuple[ModelParams, TrainLog]:
    """The same loop with alignment removed: ``itr * alt`` classification steps."""
    return _train_loop(source, None, params, cfg, False, eval_target, callback)
