"""Masked pretraining, classification fine-tuning and the alert logistic model."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .metrics import auc
from .model import (Forward, ModelConfig, ModelParams, init_params, load_backbone,
                    predict_proba, pretrain_loss)
from .patchmask import generate_mask, patch_windows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    mask_ratio: float = 0.4
    lr: float = 1e-4
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 100
    patience: int = 10
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1:
            raise ValueError("epochs and patience must be at least 1")


def tile_windows(corpus, context_len):
    """Cut every recording into consecutive non-overlapping windows.

    Returns ``(fhr, uc, ids)`` with ``fhr``/``uc`` of shape (W, L); the
    trailing partial window of each recording is dropped.
    """
    fhr, uc, ids = [], [], []
    for rec in corpus:
        for k in range(len(rec) // context_len):
            s = k * context_len
            fhr.append(rec.fhr_norm[s:s + context_len])
            uc.append(rec.uc_norm[s:s + context_len])
            ids.append(f"{rec.id}#{k}")
    if not fhr:
        raise ValueError(f"no recording is at least {context_len} samples long")
    return np.array(fhr), np.array(uc), ids


def _draw_masks(count, n, ratio, rng):
    return np.stack([generate_mask(n, ratio, rng).masked for _ in range(count)])


def _grads(fw: Forward, loss):
    names = list(fw.leaves)
    return dict(zip(names, T.backward(loss, [fw.leaves[k] for k in names])))


def pretrain_step(params: ModelParams, fhr_patches, uc_patches, masks, state, rng):
    """One Adam step on the masked-FHR reconstruction loss; returns the loss."""
    fw = Forward(params, "train", rng, track=True)
    masked_input = fhr_patches.copy()
    masked_input[masks] = 0.0
    f, u = fw.channels(masked_input, uc_patches)
    loss = pretrain_loss(fw.reconstruct(f, u), fhr_patches, masks)
    T.adam_step(params.tensors, _grads(fw, loss), state)
    return float(loss.data)


def pretrain(corpus, mcfg: ModelConfig, pcfg: PretrainConfig, init: ModelParams | None = None):
    """Masked pretraining over tiled windows.

    Returns ``(params, history)`` where ``history`` holds the epoch-mean
    loss.  Randomness (init, shuffling, masks, dropout) comes from
    independent streams spawned from ``pcfg.seed``.
    """
    if not corpus:
        raise ValueError("empty pretraining corpus")
    if mcfg.head_type != "reconstruction":
        raise ValueError("pretraining needs a reconstruction head")
    fhr_w, uc_w, _ = tile_windows(corpus, mcfg.context_len)
    fhr_p = patch_windows(fhr_w, mcfg.patch_len, mcfg.stride)
    uc_p = patch_windows(uc_w, mcfg.patch_len, mcfg.stride)
    init_ss, shuffle_ss, mask_ss, drop_ss = np.random.SeedSequence(pcfg.seed).spawn(4)
    params = init.copy() if init is not None else init_params(mcfg, init_ss)
    shuffle_rng, mask_rng, drop_rng = (np.random.default_rng(s) for s in (shuffle_ss, mask_ss, drop_ss))
    state = T.OptimizerState(lr=pcfg.lr)
    history = []
    for epoch in range(pcfg.epochs):
        order = shuffle_rng.permutation(len(fhr_p))
        total = 0.0
        for s in range(0, len(order), pcfg.batch_size):
            batch = order[s:s + pcfg.batch_size]
            masks = _draw_masks(len(batch), mcfg.n_patches, pcfg.mask_ratio, mask_rng)
            total += len(batch) * pretrain_step(params, fhr_p[batch], uc_p[batch], masks, state, drop_rng)
        history.append(total / len(order))
        log.info("pretrain epoch %d loss %.6f", epoch + 1, history[-1])
    return params, history


def masked_reconstruction_error(params: ModelParams, fhr_windows, uc_windows, masks):
    """Per-window masked-patch loss in inference mode, shape (W,)."""
    cfg = params.config
    fhr_p = patch_windows(fhr_windows, cfg.patch_len, cfg.stride)
    uc_p = patch_windows(uc_windows, cfg.patch_len, cfg.stride)
    masks = np.asarray(masks, dtype=bool)
    inp = fhr_p.copy()
    inp[masks] = 0.0
    fw = Forward(params)
    pred = fw.reconstruct(*fw.channels(inp, uc_p)).data
    err = ((pred - fhr_p) ** 2).sum(axis=-1)
    return (err * masks).sum(axis=-1) / masks.sum(axis=-1)


@dataclass(frozen=True, eq=False)
class LabeledWindows:
    ids: list
    fhr: np.ndarray     # (B, L) normalized
    uc: np.ndarray      # (B, L) normalized
    labels: np.ndarray  # (B,) bool

    def __len__(self):
        return len(self.ids)

    def subset(self, idx):
        return LabeledWindows([self.ids[i] for i in idx], self.fhr[idx], self.uc[idx], self.labels[idx])


def terminal_windows(recordings, labels, context_len) -> LabeledWindows:
    """The last ``context_len`` samples of each recording with its label.

    ``labels`` maps recording id to a boolean; recordings without a label
    are skipped.
    """
    ids, fhr, uc, ys = [], [], [], []
    for rec in recordings:
        if rec.id not in labels:
            continue
        if len(rec) < context_len:
            raise ValueError(f"recording {rec.id} is shorter than the {context_len}-sample context")
        ids.append(rec.id)
        fhr.append(rec.fhr_norm[-context_len:])
        uc.append(rec.uc_norm[-context_len:])
        ys.append(bool(labels[rec.id]))
    return LabeledWindows(ids, np.array(fhr).reshape(-1, context_len),
                          np.array(uc).reshape(-1, context_len), np.array(ys, dtype=bool))


def augment_positive(train: LabeledWindows, extra, context_len) -> LabeledWindows:
    """Append recordings whose second stage lasted zero seconds as positives.

    ``extra`` is a list of ``(CleanRecording, stage2_duration_s)`` pairs;
    a ``None`` duration means the field is missing and the recording is
    skipped with a warning.  Only the training set is touched.
    """
    added = []
    for rec, stage2 in extra:
        if stage2 is None:
            warnings.warn(f"{rec.id}: no stage-2 duration, skipped for augmentation", stacklevel=2)
            continue
        if stage2 == 0:
            if len(rec) < context_len:
                warnings.warn(f"{rec.id}: shorter than the context window, skipped", stacklevel=2)
                continue
            added.append(rec)
    if not added:
        return train
    more = terminal_windows(added, {r.id: True for r in added}, context_len)
    return LabeledWindows(train.ids + more.ids, np.concatenate([train.fhr, more.fhr]),
                          np.concatenate([train.uc, more.uc]),
                          np.concatenate([train.labels, more.labels]))


class FinetuneResult(NamedTuple):
    params: ModelParams
    best_epoch: int
    val_auc: list
    train_loss: list


def window_probabilities(params: ModelParams, windows: LabeledWindows):
    cfg = params.config
    return predict_proba(params, patch_windows(windows.fhr, cfg.patch_len, cfg.stride),
                         patch_windows(windows.uc, cfg.patch_len, cfg.stride))


def _binary_nll(labels, prob):
    p = np.clip(prob, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(np.where(labels, np.log(p), np.log1p(-p))))


def finetune(backbone: ModelParams | None, train: LabeledWindows, val: LabeledWindows,
             fcfg: FinetuneConfig, mcfg: ModelConfig | None = None) -> FinetuneResult:
    """Cross-entropy fine-tuning with AdamW and early stopping on validation AUC.

    With ``backbone`` the encoder starts from its weights and only the
    head is fresh; with ``backbone=None`` everything is initialized from
    ``mcfg``.  The returned parameters are a snapshot from ``best_epoch``
    (1-based), the epoch with the highest validation AUC; among epochs
    tied on AUC the one with the lowest validation cross-entropy wins.
    """
    if val.labels.all() or not val.labels.any():
        raise ValueError("validation set must contain both classes for AUC")
    if len(train) == 0:
        raise ValueError("empty training set")
    init_ss, shuffle_ss, drop_ss = np.random.SeedSequence(fcfg.seed).spawn(3)
    if backbone is not None:
        cfg = replace(mcfg or backbone.config, head_type="classification")
        params = load_backbone(backbone, cfg, init_ss)
    else:
        if mcfg is None:
            raise ValueError("need a model config when fine-tuning from scratch")
        params = init_params(replace(mcfg, head_type="classification"), init_ss)
    cfg = params.config
    fhr_p = patch_windows(train.fhr, cfg.patch_len, cfg.stride)
    uc_p = patch_windows(train.uc, cfg.patch_len, cfg.stride)
    y = train.labels.astype(np.int64)
    shuffle_rng, drop_rng = np.random.default_rng(shuffle_ss), np.random.default_rng(drop_ss)
    state = T.OptimizerState(lr=fcfg.lr, weight_decay=fcfg.weight_decay)

    best, best_epoch, best_params, wait = (-np.inf, np.inf), 0, params.copy(), 0
    val_hist, loss_hist = [], []
    for epoch in range(1, fcfg.epochs + 1):
        order = shuffle_rng.permutation(len(train))
        total = 0.0
        for s in range(0, len(order), fcfg.batch_size):
            batch = order[s:s + fcfg.batch_size]
            fw = Forward(params, "train", drop_rng, track=True)
            loss = T.cross_entropy(fw.classify_logits(*fw.channels(fhr_p[batch], uc_p[batch])), y[batch])
            T.adamw_step(params.tensors, _grads(fw, loss), state)
            total += len(batch) * float(loss.data)
        loss_hist.append(total / len(order))
        prob = window_probabilities(params, val)
        score = auc(val.labels, prob)
        val_hist.append(score)
        log.info("finetune epoch %d loss %.5f val AUC %.4f", epoch, loss_hist[-1], score)
        # equal AUC (common once validation is perfectly ranked) falls back to validation loss
        nll = _binary_nll(val.labels, prob)
        if score > best[0] or (score == best[0] and nll < best[1]):
            best, best_epoch, best_params, wait = (score, nll), epoch, params.copy(), 0
        else:
            wait += 1
            if wait >= fcfg.patience:
                break
    return FinetuneResult(best_params, best_epoch, val_hist, loss_hist)


# --- alert classifier --------------------------------------------------------

FEATURE_NAMES = ("length", "max", "cumsum", "weighted_integral")


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


@dataclass(frozen=True, eq=False)
class LogisticModel:
    """Logistic regression on standardized segment features."""

    weights: np.ndarray
    intercept: float
    mean: np.ndarray
    scale: np.ndarray  # 0 marks a constant feature, which is ignored

    def standardize(self, features):
        x = np.atleast_2d(np.asarray(features, dtype=np.float64)) - self.mean
        safe = np.where(self.scale > 0, self.scale, 1.0)
        return np.where(self.scale > 0, x / safe, 0.0)

    def predict_proba(self, features):
        return _sigmoid(self.standardize(features) @ self.weights + self.intercept)

    def to_dict(self):
        return {"features": list(FEATURE_NAMES), "weights": self.weights.tolist(),
                "intercept": self.intercept, "mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["weights"], float), float(d["intercept"]),
                   np.asarray(d["mean"], float), np.asarray(d["scale"], float))


def logistic_loss(w, b, x, y, l2):
    z = x @ w + b
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * w @ w)


def fit_logistic(features, labels, l2=1e-4, step=0.1, tol=1e-6, max_iter=100_000,
                 loss_trace=None) -> LogisticModel:
    """Full-batch gradient descent on the L2-penalized mean logistic loss.

    Features are standardized first; a zero-variance feature keeps a zero
    coefficient.  The intercept is not penalized.  ``loss_trace``, when a
    list, receives the loss before every step.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be (n, k) aligned with labels")
    if y.all() or not y.any():
        raise ValueError("need at least one example of each class")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-12 * np.maximum(1.0, np.abs(mean)), scale, 0.0)
    model = LogisticModel(np.zeros(x.shape[1]), 0.0, mean, scale)
    xs = model.standardize(x)
    live = scale > 0
    w, b = np.zeros(x.shape[1]), 0.0
    for _ in range(max_iter):
        if loss_trace is not None:
            loss_trace.append(logistic_loss(w, b, xs, y, l2))
        r = _sigmoid(xs @ w + b) - y
        gw = xs.T @ r / len(y) + l2 * w
        gw[~live] = 0.0
        gb = r.mean()
        if np.sqrt(gw @ gw + gb * gb) < tol:
            break
        w = w - step * gw
        b = b - step * gb
    return LogisticModel(w, float(b), mean, scale)
