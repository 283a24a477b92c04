"""Contrastive losses on unit-norm embeddings, with exact gradients.

Every loss here has the per-anchor form

    l_i = -sum_k num[i, k] * s_ik + log sum_k den[i, k] * exp(s_ik),   s = z z^T / tau

so one routine evaluates the value and the gradient for all of them; the
losses differ only in the numerator and denominator weight matrices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .pairs import PairSets, check_unit_rows

log = logging.getLogger(__name__)

TERMS = ("sup", "elim", "self")
# Table of loss-term membership for the ablation combinations.
COMBINATIONS: dict[str, tuple[str, ...]] = {
    "comb1": ("sup",),
    "comb2": ("elim",),
    "comb3": ("self",),
    "comb4": ("sup", "elim"),
    "comb5": ("sup", "self"),
    "comb6": ("elim", "self"),
    "comb7": ("sup", "elim", "self"),
}
ALPHA_MODES = ("uniform", "inverse_class_frequency")


@dataclass
class EmbeddingBatch:
    z: np.ndarray  # (2N, d)
    labels: np.ndarray
    source_index: np.ndarray
    patient_ids: np.ndarray | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.source_index = np.asarray(self.source_index)
        m = self.z.shape[0]
        if self.labels.shape != (m,) or self.source_index.shape != (m,):
            raise ValueError("labels and source_index must have one entry per row")

    def partners(self) -> np.ndarray:
        """Index of each row's augmented partner (the other row with the same source)."""
        src = self.source_index
        same = src[:, None] == src[None, :]
        np.fill_diagonal(same, False)
        counts = same.sum(axis=1)
        if np.any(counts != 1):
            bad = int(np.flatnonzero(counts != 1)[0])
            raise ValueError(f"row {bad} does not have exactly one augmented partner")
        return same.argmax(axis=1)


@dataclass
class LossConfig:
    tau: float = 0.01
    lambda_neg: float = 2.0
    alpha_mode: str = "inverse_class_frequency"
    combination: frozenset = field(default_factory=lambda: frozenset({"modified"}))

    def __post_init__(self):
        if isinstance(self.combination, str):
            self.combination = parse_combination(self.combination)
        self.combination = frozenset(self.combination)
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.lambda_neg < 0:
            raise ValueError("lambda_neg must be >= 0")
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {ALPHA_MODES}")
        if not self.combination:
            raise ValueError("loss combination must be non-empty")
        if "modified" in self.combination and len(self.combination) > 1:
            raise ValueError("'modified' cannot be combined with other terms")
        unknown = self.combination - set(TERMS) - {"modified"}
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")


def parse_combination(name: str) -> frozenset:
    name = name.strip().lower()
    if name == "modified":
        return frozenset({"modified"})
    if name in COMBINATIONS:
        return frozenset(COMBINATIONS[name])
    return frozenset(t.strip() for t in name.replace("+", ",").split(",") if t.strip())


def combination_name(combination) -> str:
    combination = frozenset(combination)
    if combination == {"modified"}:
        return "modified"
    for name, terms in COMBINATIONS.items():
        if frozenset(terms) == combination:
            return name
    return "+".join(sorted(combination))


def class_alpha(labels, alpha_mode: str = "inverse_class_frequency") -> np.ndarray:
    """Per-row weights ``B / (2 * count(label_i))`` so each class carries equal total weight."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("class_alpha needs at least one label")
    if alpha_mode == "uniform":
        return np.ones(labels.size)
    if alpha_mode != "inverse_class_frequency":
        raise ValueError(f"unknown alpha_mode {alpha_mode!r}")
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    return labels.size / (2.0 * counts[inverse])


def _softmax_contrast(z, num, den, alpha, tau, validate):
    """Mean over active anchors of alpha_i * l_i and its gradient w.r.t. z."""
    z = np.asarray(z, dtype=np.float64)
    if validate:
        check_unit_rows(z)
    active = num.sum(axis=1) > 0
    n_active = int(active.sum())
    if n_active == 0:
        raise ValueError("no positive pairs in batch")
    skipped = num.shape[0] - n_active
    if skipped:
        log.debug("skipped %d anchors with no positives", skipped)

    s = (z @ z.T) / tau
    support = den > 0
    shift = np.max(np.where(support, s, -np.inf), axis=1)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = np.where(support, den * np.exp(s - shift[:, None]), 0.0)
    total = e.sum(axis=1)
    safe_total = np.where(active, total, 1.0)
    log_den = shift + np.log(safe_total)
    per_anchor = -(num * s).sum(axis=1) + log_den

    weights = np.where(active, alpha, 0.0) / n_active
    loss = float(np.sum(weights[active] * per_anchor[active]))
    coef = weights[:, None] * (e / safe_total[:, None] - num)
    grad = (coef @ z + coef.T @ z) / tau
    return loss, grad


def _alpha(batch: EmbeddingBatch, cfg: LossConfig) -> np.ndarray:
    return class_alpha(batch.labels, cfg.alpha_mode)


def _mean_positive_weights(pairs: PairSets) -> np.ndarray:
    pos = pairs.positive.astype(np.float64)
    counts = pos.sum(axis=1, keepdims=True)
    return np.divide(pos, counts, out=np.zeros_like(pos), where=counts > 0)


def _all_but_self(m: int) -> np.ndarray:
    return 1.0 - np.eye(m)


def _partner_onehot(batch: EmbeddingBatch) -> np.ndarray:
    m = batch.z.shape[0]
    onehot = np.zeros((m, m))
    onehot[np.arange(m), batch.partners()] = 1.0
    return onehot


def modified_supcon_loss(batch: EmbeddingBatch, pairs: PairSets, cfg: LossConfig, validate=True):
    """Supervised contrastive loss with negatives weighted by ``lambda_neg``.

    Denominator per anchor: positives plus ``lambda_neg`` times negatives. Rows
    in neither set (pruned by relaxing) are left out entirely.
    """
    num = _mean_positive_weights(pairs)
    den = pairs.positive + cfg.lambda_neg * pairs.negative
    return _softmax_contrast(batch.z, num, den, _alpha(batch, cfg), cfg.tau, validate)


def self_loss(batch: EmbeddingBatch, cfg: LossConfig, validate=True):
    m = batch.z.shape[0]
    return _softmax_contrast(
        batch.z, _partner_onehot(batch), _all_but_self(m), _alpha(batch, cfg), cfg.tau, validate
    )


def sup_loss(batch: EmbeddingBatch, pairs: PairSets, cfg: LossConfig, validate=True):
    m = batch.z.shape[0]
    num = _mean_positive_weights(pairs)
    return _softmax_contrast(batch.z, num, _all_but_self(m), _alpha(batch, cfg), cfg.tau, validate)


def elim_loss(batch: EmbeddingBatch, pairs: PairSets, cfg: LossConfig, validate=True):
    # Denominator: the partner term plus every k != i outside P(i).
    m = batch.z.shape[0]
    onehot = _partner_onehot(batch)
    den = _all_but_self(m) * (~pairs.positive) * (1.0 - onehot) + onehot
    return _softmax_contrast(batch.z, onehot, den, _alpha(batch, cfg), cfg.tau, validate)


def combined_loss(batch: EmbeddingBatch, pairs: PairSets, cfg: LossConfig, validate=True):
    if cfg.combination == {"modified"}:
        return modified_supcon_loss(batch, pairs, cfg, validate)
    loss = 0.0
    grad = np.zeros_like(batch.z)
    for term in TERMS:
        if term not in cfg.combination:
            continue
        if term == "self":
            value, g = self_loss(batch, cfg, validate)
        elif term == "sup":
            value, g = sup_loss(batch, pairs, cfg, validate)
        else:
            value, g = elim_loss(batch, pairs, cfg, validate)
        loss += value
        grad += g
    return loss, grad
