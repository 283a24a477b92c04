"""Contrastive training loop shared by the pretrain and relax stages."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import encoder
from .augment import AugmentPipeline, make_positive_pair
from .checkpoint import Checkpoint
from .data import ImageSet
from .encoder import Adam, EncoderConfig, TrainConfig
from .errors import ConfigError, NumericalError
from .losses import EmbeddingBatch, LossConfig, combined_loss
from .pairs import PairSets, build_pair_sets, compute_similarity_matrix, restrict_to_batch

log = logging.getLogger(__name__)

STAGE_TAGS = {"pretrain": 0, "relax": 1}


def batch_rng(seed: int, stage: str, epoch: int, batch: int) -> np.random.Generator:
    """Independent stream per (seed, stage, epoch, batch) so batches can be built in any order."""
    return np.random.default_rng([seed, STAGE_TAGS[stage], epoch, batch])


def epoch_order(seed: int, stage: str, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, STAGE_TAGS[stage], epoch]).permutation(n)


def build_batch(images, idx, pipeline: AugmentPipeline, rng):
    """Two views per image; rows are ``[first views, second views]``."""
    first, second = zip(*(make_positive_pair(pipeline, images[i], rng) for i in idx))
    views = np.stack(first + second)
    source = np.tile(np.arange(len(idx)), 2)
    return views, source


def _dump_batch(dump_dir, stage, epoch, batch, views, z):
    path = Path(dump_dir) / f"nan_{stage}_e{epoch}_b{batch}.npz"
    np.savez(path, views=views, z=z)
    return path


def train_contrastive(
    data: ImageSet,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    pipeline: AugmentPipeline,
    stage: str = "pretrain",
    init_params: dict | None = None,
    dataset_pairs: PairSets | None = None,
    dump_dir=None,
) -> Checkpoint:
    """Train the encoder with a contrastive loss and return a stage checkpoint.

    Batch P/Q come from labels, or from ``dataset_pairs`` (indexed by position
    in ``data``) when relaxed sets are supplied. Views of the same image are
    always positives of each other.
    """
    if stage not in STAGE_TAGS:
        raise ConfigError(f"contrastive stage must be one of {tuple(STAGE_TAGS)}")
    if len(data) == 0:
        raise ConfigError("training set is empty")
    if len(np.unique(data.labels)) < 2:
        raise ConfigError("training set must contain both classes")
    if dataset_pairs is not None and dataset_pairs.size != len(data):
        raise ConfigError("dataset pair sets do not match the training set")
    seed = train_cfg.rng_seed
    if init_params is None:
        params = encoder.init_params(enc_cfg, np.random.default_rng([seed, 99]))
    else:
        params = {k: v.copy() for k, v in init_params.items()}
    opt = Adam(train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    history = []
    for epoch in range(train_cfg.epochs):
        order = epoch_order(seed, stage, epoch, len(data))
        losses = []
        for b, start in enumerate(range(0, len(order), train_cfg.batch_size)):
            idx = order[start : start + train_cfg.batch_size]
            rng = batch_rng(seed, stage, epoch, b)
            views, source = build_batch(data.images, idx, pipeline, rng)
            labels = np.tile(data.labels[idx], 2)
            if dataset_pairs is None:
                pairs = build_pair_sets(labels, source)
            else:
                pairs = restrict_to_batch(dataset_pairs, np.tile(idx, 2), source)
            z, cache = encoder.forward(params, views, enc_cfg)
            loss, dz = combined_loss(EmbeddingBatch(z, labels, source), pairs, loss_cfg)
            if not np.isfinite(loss) or not np.all(np.isfinite(dz)):
                where = f"stage {stage}, epoch {epoch + 1}, batch {b}"
                if dump_dir is not None:
                    where += f" (dumped to {_dump_batch(dump_dir, stage, epoch + 1, b, views, z)})"
                raise NumericalError(f"non-finite contrastive loss at {where}")
            grads, _ = encoder.backward(params, cache, dz)
            opt.step(params, grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("%s epoch %d: loss %.6f", stage, epoch + 1, history[-1])
    meta = {"loss_history": history}
    return Checkpoint(stage, train_cfg.epochs, seed, enc_cfg, params, meta)


def training_similarity(params, data: ImageSet, enc_cfg: EncoderConfig) -> np.ndarray:
    """Cosine similarities between the un-augmented training images."""
    return compute_similarity_matrix(encoder.embed(params, data.images, enc_cfg))
