"""Supervised fine-tuning: classifier head, stain-matrix head and their combined loss.

The classifier is three fully connected layers (d -> h1 -> h2 -> 2) with
squareplus activations and dropout after each hidden layer. The auxiliary head
is one linear layer d -> 6 that regresses the flattened 3x2 stain matrix of the
(HED-augmented) input. The combined objective is ``L_cl - eta * L_aux``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import encoder
from .augment import AugmentPipeline, apply_pipeline
from .checkpoint import Checkpoint
from .data import ImageSet
from .encoder import Adam, EncoderConfig
from .errors import ConfigError, NumericalError
from .losses import class_alpha
from .metrics import confusion, scores_from_confusion
from .stain import StainConfig, StainModel, estimate_stains, hed_augment, rgb_to_od

log = logging.getLogger(__name__)

SIGN_MODES = ("reversal", "literal")
WEIGHT_POLICIES = ("uniform", "inverse_class_frequency")
HEAD_NAMES = ("cls1.w", "cls1.b", "cls2.w", "cls2.b", "cls3.w", "cls3.b", "aux.w", "aux.b")
# Seed-stream tag for the fine-tune stage (contrastive stages use 0 and 1).
STAGE_TAG = 2


@dataclass
class FinetuneConfig:
    eta: float = 0.5
    dropout_p: float = 0.5
    learning_rate: float = 2e-5
    epochs: int = 20
    batch_size: int = 8
    hidden: tuple[int, int] = (64, 16)
    class_weights: str = "inverse_class_frequency"
    aux_sign_mode: str = "reversal"
    hed_strength: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ValueError("hidden must hold two positive widths")
        if self.class_weights not in WEIGHT_POLICIES:
            raise ValueError(f"class_weights must be one of {WEIGHT_POLICIES}")
        if self.aux_sign_mode not in SIGN_MODES:
            raise ValueError(f"aux_sign_mode must be one of {SIGN_MODES}")
        if not 0.0 <= self.hed_strength <= 1.0:
            raise ValueError("hed_strength must lie in [0, 1]")


def init_head_params(embed_dim: int, hidden, rng: np.random.Generator, aux_bias=None) -> dict[str, np.ndarray]:
    """Fan-in uniform classifier layers.

    The auxiliary layer starts at zero weights with bias ``aux_bias`` (the
    mean stain matrix of the training set), so the reversed gradient reaching
    the encoder is zero until the head has learned something to defeat.
    """
    dims = [embed_dim, *hidden, 2]
    head = {}
    for k in range(3):
        bound = np.sqrt(6.0 / dims[k])
        head[f"cls{k + 1}.w"] = rng.uniform(-bound, bound, (dims[k], dims[k + 1]))
        head[f"cls{k + 1}.b"] = np.zeros(dims[k + 1])
    head["aux.w"] = np.zeros((embed_dim, 6))
    head["aux.b"] = np.zeros(6) if aux_bias is None else np.asarray(aux_bias, dtype=np.float64).copy()
    return head


def _squareplus(x):
    # Shifted to pass through the origin; a constant offset would be scaled by dropout.
    root = np.sqrt(x * x + 4.0)
    return 0.5 * (x + root) - 1.0, 0.5 * (1.0 + x / root)


def dropout_mask(shape, p: float, rng: np.random.Generator | None, train: bool) -> np.ndarray:
    """Inverted dropout mask; evaluation mode (or p == 0) is the identity."""
    if not train or p == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def head_forward(head, z, dropout_p=0.0, rng=None, train=False):
    """Returns ``(logits, w_hat, cache)``."""
    cache = {"z": z}
    x = z
    for k in (1, 2):
        pre = x @ head[f"cls{k}.w"] + head[f"cls{k}.b"]
        act, slope = _squareplus(pre)
        mask = dropout_mask(act.shape, dropout_p, rng, train)
        cache[f"in{k}"], cache[f"slope{k}"], cache[f"mask{k}"] = x, slope, mask
        x = act * mask
    cache["in3"] = x
    logits = x @ head["cls3.w"] + head["cls3.b"]
    w_hat = z @ head["aux.w"] + head["aux.b"]
    return logits, w_hat, cache


def head_backward(head, cache, dlogits, dw_hat_head, dw_hat_encoder):
    """Head gradients and the gradient reaching the embedding.

    The auxiliary head is updated from ``dw_hat_head`` while the embedding
    receives ``dw_hat_encoder``; the two differ under gradient reversal.
    """
    grads = {}
    grads["cls3.w"] = cache["in3"].T @ dlogits
    grads["cls3.b"] = dlogits.sum(axis=0)
    dx = dlogits @ head["cls3.w"].T
    for k in (2, 1):
        dpre = dx * cache[f"mask{k}"] * cache[f"slope{k}"]
        grads[f"cls{k}.w"] = cache[f"in{k}"].T @ dpre
        grads[f"cls{k}.b"] = dpre.sum(axis=0)
        dx = dpre @ head[f"cls{k}.w"].T
    z = cache["z"]
    grads["aux.w"] = z.T @ dw_hat_head
    grads["aux.b"] = dw_hat_head.sum(axis=0)
    dz = dx + dw_hat_encoder @ head["aux.w"].T
    return {name: grads[name] for name in HEAD_NAMES}, dz


def classification_loss(logits, labels, class_weights):
    """Mean over samples of ``w[y_i] * CE_i``; returns ``(loss, dloss/dlogits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ValueError("logits must have shape (B, 2)")
    weights = np.asarray(class_weights, dtype=np.float64)[labels]
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_prob = shifted[np.arange(b), labels] - log_norm
    loss = float(np.sum(-weights * log_prob) / b)
    prob = np.exp(shifted - log_norm[:, None])
    onehot = np.zeros_like(prob)
    onehot[np.arange(b), labels] = 1.0
    grad = weights[:, None] * (prob - onehot) / b
    return loss, grad


def auxiliary_loss(predicted_w, true_w):
    """Batch mean of squared Euclidean distances; gradient ``2 (W_hat - W) / B``."""
    pred = np.atleast_2d(np.asarray(predicted_w, dtype=np.float64))
    true = np.atleast_2d(np.asarray(true_w, dtype=np.float64))
    if pred.shape != true.shape or pred.shape[1] != 6:
        raise ValueError("stain matrices must be flattened to 6 values per sample")
    diff = pred - true
    b = pred.shape[0]
    return float(np.sum(diff * diff) / b), 2.0 * diff / b


def total_finetune_loss(cl: float, aux: float, eta: float) -> float:
    if eta < 0:
        raise ValueError("eta must be >= 0")
    return cl - eta * aux


def aux_gradients(daux, eta: float, sign_mode: str):
    """Split ``dL_aux/dW_hat`` into (head update, encoder update) directions."""
    if sign_mode == "reversal":
        return eta * daux, -eta * daux
    if sign_mode == "literal":
        return -eta * daux, -eta * daux
    raise ValueError(f"unknown aux_sign_mode {sign_mode!r}")


def class_weight_vector(labels, policy: str) -> np.ndarray:
    """Per-class weights (benign, malignant) from the training labels."""
    labels = np.asarray(labels, dtype=int)
    alpha = class_alpha(labels, policy)
    out = np.ones(2)
    for c in (0, 1):
        if np.any(labels == c):
            out[c] = alpha[labels == c][0]
    return out


def finetune_step(params, head, images, labels, targets, enc_cfg, cfg, weights, rng, train=True, impl=None):
    """Loss values and gradients for one batch.

    Returns ``(total, cl, aux, encoder_grads, head_grads, logits)``.
    """
    z, cache = encoder.forward(params, images, enc_cfg, impl)
    logits, w_hat, hcache = head_forward(head, z, cfg.dropout_p, rng, train)
    cl, dlogits = classification_loss(logits, labels, weights)
    aux, daux = auxiliary_loss(w_hat, targets)
    to_head, to_encoder = aux_gradients(daux, cfg.eta, cfg.aux_sign_mode)
    head_grads, dz = head_backward(head, hcache, dlogits, to_head, to_encoder)
    enc_grads, _ = encoder.backward(params, cache, dz, impl)
    return total_finetune_loss(cl, aux, cfg.eta), cl, aux, enc_grads, head_grads, logits


def predict(params, head, images, enc_cfg: EncoderConfig, batch_size: int = 64) -> np.ndarray:
    """Argmax class (0 benign, 1 malignant) in evaluation mode."""
    out = []
    for start in range(0, len(images), batch_size):
        z, _ = encoder.forward(params, images[start : start + batch_size], enc_cfg)
        logits, _, _ = head_forward(head, z)
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def stain_target(image, stain_cfg: StainConfig) -> np.ndarray:
    return estimate_stains(rgb_to_od(image), stain_cfg).w.reshape(-1)


def augment_for_finetune(image, model: StainModel, cfg, pipeline, stain_cfg, rng):
    """HED first, then the remaining augmentations; returns ``(view, stain target)``."""
    view = hed_augment(image, stain_cfg, cfg.hed_strength, rng, model=model)
    view = apply_pipeline(pipeline.without("hed"), view, rng)
    return view, stain_target(view, stain_cfg)


def finetune(
    train: ImageSet,
    init: Checkpoint,
    cfg: FinetuneConfig,
    pipeline: AugmentPipeline,
    stain_cfg: StainConfig | None = None,
    val: ImageSet | None = None,
    metrics_path=None,
) -> Checkpoint:
    """Fine-tune encoder and heads from a relax-stage checkpoint."""
    if init.stage != "relax":
        raise ConfigError(f"fine-tuning needs a relax-stage checkpoint, got stage {init.stage!r}")
    if len(train) == 0:
        raise ConfigError("training set is empty")
    stain_cfg = stain_cfg or StainConfig(max_iterations=30)
    enc_cfg = init.encoder_config
    params = init.encoder_params()
    weights = class_weight_vector(train.labels, cfg.class_weights)
    models = [estimate_stains(rgb_to_od(img), stain_cfg) for img in train.images]
    head = init.head_params() or init_head_params(
        enc_cfg.embed_dim,
        cfg.hidden,
        np.random.default_rng([cfg.rng_seed, STAGE_TAG, 99]),
        aux_bias=np.mean([m.w.reshape(-1) for m in models], axis=0),
    )
    # Separate optimizers so each keeps its own step count.
    opt, head_opt = Adam(cfg.learning_rate), Adam(cfg.learning_rate)
    rows = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.rng_seed, STAGE_TAG, epoch]).permutation(len(train))
        totals, correct = [], 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            rng = np.random.default_rng([cfg.rng_seed, STAGE_TAG, epoch, b])
            views, targets = zip(
                *(augment_for_finetune(train.images[i], models[i], cfg, pipeline, stain_cfg, rng) for i in idx)
            )
            labels = train.labels[idx]
            total, cl, aux, g_enc, g_head, logits = finetune_step(
                params, head, np.stack(views), labels, np.stack(targets), enc_cfg, cfg, weights, rng
            )
            if not np.isfinite(total):
                raise NumericalError(f"non-finite fine-tune loss at epoch {epoch + 1}, batch {b}")
            opt.step(params, g_enc)
            head_opt.step(head, g_head)
            totals.append(total)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
        row = {"epoch": epoch + 1, "loss": float(np.mean(totals)), "train_acc": correct / len(train)}
        if val is not None and len(val):
            pred = predict(params, head, val.images, enc_cfg)
            s = scores_from_confusion(*confusion(val.labels, pred))
            row.update(val_acc=s.accuracy, val_balanced_acc=s.balanced_accuracy)
        log.info("finetune epoch %d: %s", epoch + 1, row)
        rows.append(row)
    if metrics_path is not None:
        _write_rows(metrics_path, rows)
    tensors = dict(params)
    tensors.update(head)
    meta = {"history": rows, "class_weights": weights.tolist()}
    return Checkpoint("finetune", cfg.epochs, cfg.rng_seed, enc_cfg, tensors, meta)


def _write_rows(path, rows):
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in r.items()})
