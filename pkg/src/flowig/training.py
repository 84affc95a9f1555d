"""Class-weighted cross-entropy training with seeded Adam and early stopping."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import encoder
from .encoder import EncoderConfig, Params
from .errors import ConfigError, DataError, NumericError
from .evaluation import confusion, metrics, predict_labels
from .flow_data import COARSE_LABELS, CoarseLabel
from .tokenizer import TokenizedExample


@dataclass(frozen=True)
class ClassWeights:
    w: tuple[float, float, float]            # after clipping
    unclipped: tuple[float, float, float]    # mean-normalized 1/sqrt(n_c)
    clip_lo: float
    clip_hi: float

    def weight_of(self, label: CoarseLabel) -> float:
        return self.w[label.value]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs, batch_size and learning_rate must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_macro_f1: float
    val_accuracy: float


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_macro_f1: float = -1.0
    stopped_early: bool = False


def class_weights(
    counts: tuple[int, int, int], clip: tuple[float, float] = (0.25, 10.0)
) -> ClassWeights:
    """w_c proportional to 1/sqrt(n_c), mean-normalized to 1, then clipped."""
    lo, hi = clip
    arr = np.asarray(counts, dtype=np.float64)
    if (arr <= 0).any():
        missing = [COARSE_LABELS[i].name for i in np.where(arr <= 0)[0]]
        raise DataError(f"class absent from training data: {', '.join(missing)}")
    inv = 1.0 / np.sqrt(arr)
    w = inv / inv.mean()
    clipped = np.clip(w, lo, hi)
    return ClassWeights(
        w=tuple(float(v) for v in clipped),
        unclipped=tuple(float(v) for v in w),
        clip_lo=lo,
        clip_hi=hi,
    )


def weighted_cross_entropy(
    logits: np.ndarray, label: CoarseLabel, weights: ClassWeights
) -> tuple[float, np.ndarray]:
    """Stabilized -w * log softmax(logits)[label] and its logit gradient."""
    z = np.asarray(logits, dtype=np.float64)
    w = weights.weight_of(label)
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    loss = w * (lse - z[label.value])
    p = np.exp(z - lse)
    grad = w * p
    grad[label.value] -= w
    return float(loss), grad


def _batch_loss(
    logits: np.ndarray, labels: np.ndarray, w: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean weighted CE over a batch; returns (loss, dloss/dlogits)."""
    B = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    logp = logits - lse
    wl = w[labels]
    loss = float(-(wl * logp[np.arange(B), labels]).mean())
    grad = np.exp(logp) * wl[:, None]
    grad[np.arange(B), labels] -= wl
    return loss, grad / B


def _stack(examples: list[TokenizedExample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids = np.array([e.ids for e in examples], dtype=np.int64)
    mask = np.array([e.attention_mask for e in examples], dtype=np.float64)
    labels = np.array([e.label.value for e in examples], dtype=np.int64)
    return ids, mask, labels


def evaluate_examples(
    params: Params,
    config: EncoderConfig,
    examples: list[TokenizedExample],
    chunk: int = 256,
) -> tuple[np.ndarray, list[CoarseLabel]]:
    """Eval-mode logits and argmax predictions for a list of examples."""
    ids, mask, _ = _stack(examples)
    out = []
    for start in range(0, len(examples), chunk):
        logits, _ = encoder.forward_batch(
            params, config, ids[start : start + chunk], mask[start : start + chunk]
        )
        out.append(logits)
    logits = np.concatenate(out, axis=0)
    return logits, predict_labels(logits)


def train(
    params: Params,
    config: EncoderConfig,
    train_examples: list[TokenizedExample],
    val_examples: list[TokenizedExample],
    weights: ClassWeights,
    train_config: TrainConfig = TrainConfig(),
) -> tuple[Params, TrainingLog]:
    """Adam training; returns the checkpoint with best validation macro-F1.

    Class weights enter the loss only; validation metrics are unweighted.
    """
    if not train_examples:
        raise DataError("training split is empty")
    params = {k: v.copy() for k, v in params.items()}
    w_arr = np.asarray(weights.w)
    rng = np.random.default_rng(train_config.seed)
    m_state = encoder.zero_grads_like(params)
    v_state = encoder.zero_grads_like(params)
    keys = sorted(params)
    t = 0

    log = TrainingLog()
    best_params = copy.deepcopy(params)
    since_best = 0

    ids_all, mask_all, labels_all = _stack(train_examples)
    n = len(train_examples)

    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(n)
        dropout_rng = np.random.default_rng(
            np.random.SeedSequence([train_config.seed, epoch])
        )
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, train_config.batch_size):
            sel = order[start : start + train_config.batch_size]
            ids, mask, labels = ids_all[sel], mask_all[sel], labels_all[sel]
            logits, trace = encoder.forward_batch(
                params, config, ids, mask, training=True, dropout_rng=dropout_rng
            )
            loss, dlogits = _batch_loss(logits, labels, w_arr)
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}"
                )
            grads, demb = encoder.backward(params, trace, dlogits)
            encoder.accumulate_embedding_grads(grads, config, ids, demb)
            t += 1
            lr = train_config.learning_rate
            for k in keys:
                g = grads[k]
                m_state[k] = train_config.beta1 * m_state[k] + (1 - train_config.beta1) * g
                v_state[k] = train_config.beta2 * v_state[k] + (1 - train_config.beta2) * g * g
                mhat = m_state[k] / (1 - train_config.beta1**t)
                vhat = v_state[k] / (1 - train_config.beta2**t)
                if train_config.weight_decay > 0:
                    params[k] -= lr * train_config.weight_decay * params[k]
                params[k] -= lr * mhat / (np.sqrt(vhat) + train_config.adam_eps)
            epoch_loss += loss
            n_batches += 1

        _, preds = evaluate_examples(params, config, val_examples)
        val_labels = [e.label for e in val_examples]
        report = metrics(confusion(preds, val_labels))
        record = EpochRecord(
            epoch=epoch,
            train_loss=epoch_loss / max(n_batches, 1),
            val_macro_f1=report.macro_f1,
            val_accuracy=report.accuracy,
        )
        log.epochs.append(record)

        if report.macro_f1 > log.best_val_macro_f1:
            log.best_val_macro_f1 = report.macro_f1
            log.best_epoch = epoch
            best_params = copy.deepcopy(params)
            since_best = 0
        else:
            since_best += 1
            if since_best >= train_config.patience:
                log.stopped_early = True
                break

    return best_params, log
