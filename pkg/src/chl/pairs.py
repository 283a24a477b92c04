"""Positive/negative pair sets, cosine similarity matrix and similarity-based relaxing."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

SIM_MAGIC = b"CHLSIM\x00\x00"
SIM_VERSION = 1
DEFAULT_THRESHOLD = 0.5


@dataclass
class PairSets:
    """Boolean masks: ``positive[i, k]`` means k is in P(i), ``negative[i, k]`` k in Q(i).

    ``source_index`` marks rows that are views of the same source image; those
    partner pairs are regenerated every batch and never relaxed away.
    """

    positive: np.ndarray
    negative: np.ndarray
    source_index: np.ndarray | None = None

    def __post_init__(self):
        self.positive = np.asarray(self.positive, dtype=bool)
        self.negative = np.asarray(self.negative, dtype=bool)
        m = self.positive.shape[0]
        if self.positive.shape != (m, m) or self.negative.shape != (m, m):
            raise ValueError("pair masks must be square and equally sized")
        if np.any(np.diag(self.positive)) or np.any(np.diag(self.negative)):
            raise ValueError("an anchor cannot be its own pair")
        if np.any(self.positive & self.negative):
            raise ValueError("P(i) and Q(i) must be disjoint")

    @property
    def size(self) -> int:
        return self.positive.shape[0]

    def P(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.positive[i])

    def Q(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.negative[i])

    def partner_mask(self) -> np.ndarray:
        m = self.size
        if self.source_index is None:
            return np.zeros((m, m), dtype=bool)
        src = np.asarray(self.source_index)
        mask = src[:, None] == src[None, :]
        np.fill_diagonal(mask, False)
        return mask


@dataclass
class RelaxReport:
    removed_positive: np.ndarray  # per-anchor counts
    removed_negative: np.ndarray
    threshold: float
    removed_positive_mask: np.ndarray
    removed_negative_mask: np.ndarray

    @property
    def total_removed(self) -> tuple[int, int]:
        return int(self.removed_positive.sum()), int(self.removed_negative.sum())


def build_pair_sets(labels, source_index=None) -> PairSets:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    positive = same.copy()
    np.fill_diagonal(positive, False)
    negative = ~same
    if not negative.any():
        log.info("single-class batch: every negative set is empty")
    src = None if source_index is None else np.asarray(source_index)
    return PairSets(positive, negative, src)


def check_unit_rows(z: np.ndarray, atol: float = 1e-6) -> None:
    norms = np.linalg.norm(z, axis=1)
    if not np.all(np.abs(norms - 1.0) <= atol):
        raise ValueError("embedding rows must have unit Euclidean norm")


def compute_similarity_matrix(embeddings: np.ndarray, block_rows: int = 1024) -> np.ndarray:
    """Cosine similarities of unit-norm rows, assembled from row blocks."""
    z = np.asarray(embeddings, dtype=np.float64)
    check_unit_rows(z)
    m = z.shape[0]
    sim = np.empty((m, m))
    for start in range(0, m, block_rows):
        sim[start : start + block_rows] = z[start : start + block_rows] @ z.T
    return np.clip(sim, -1.0, 1.0)


def relax_pair_sets(
    pairs: PairSets, sim: np.ndarray, threshold: float = DEFAULT_THRESHOLD
) -> tuple[PairSets, RelaxReport]:
    """Drop positives below ``threshold`` and negatives above it.

    Values exactly at the threshold survive on both sides. Augmentation
    partners are exempt.
    """
    if not -1.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (-1, 1)")
    sim = np.asarray(sim)
    if sim.shape != (pairs.size, pairs.size):
        raise ValueError("similarity matrix does not cover the pair sets")
    exempt = pairs.partner_mask()
    drop_pos = pairs.positive & (sim < threshold) & ~exempt
    drop_neg = pairs.negative & (sim > threshold) & ~exempt
    relaxed = PairSets(pairs.positive & ~drop_pos, pairs.negative & ~drop_neg, pairs.source_index)
    report = RelaxReport(
        drop_pos.sum(axis=1), drop_neg.sum(axis=1), float(threshold), drop_pos, drop_neg
    )
    return relaxed, report


def restrict_to_batch(
    dataset_pairs: PairSets, item_ids, source_index
) -> PairSets:
    """Batch-level P/Q from dataset-level sets indexed by training-item position.

    Rows sharing a source image are always positives of each other.
    """
    ids = np.asarray(item_ids)
    src = np.asarray(source_index)
    partner = src[:, None] == src[None, :]
    np.fill_diagonal(partner, False)
    same_item = ids[:, None] == ids[None, :]
    pos = dataset_pairs.positive[np.ix_(ids, ids)] | partner
    neg = dataset_pairs.negative[np.ix_(ids, ids)] & ~same_item
    return PairSets(pos, neg, src)


def write_similarity_cache(path, sim: np.ndarray, checkpoint_hash: str) -> None:
    sim = np.asarray(sim, dtype="<f4")
    m = sim.shape[0]
    digest = bytes.fromhex(checkpoint_hash)
    if len(digest) != 32:
        raise ValueError("checkpoint hash must be a sha256 hex digest")
    with open(path, "wb") as fh:
        fh.write(SIM_MAGIC)
        fh.write(struct.pack("<IQ", SIM_VERSION, m))
        fh.write(digest)
        fh.write(np.ascontiguousarray(sim).tobytes())


def read_similarity_cache(path) -> tuple[np.ndarray, str]:
    with open(path, "rb") as fh:
        if fh.read(8) != SIM_MAGIC:
            raise DataError(f"{path}: not a similarity cache file")
        version, m = struct.unpack("<IQ", fh.read(12))
        if version != SIM_VERSION:
            raise DataError(f"{path}: unsupported cache version {version}")
        digest = fh.read(32)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != m * m:
        raise DataError(f"{path}: truncated similarity cache")
    return data.reshape(m, m).astype(np.float64), digest.hex()


def write_pairs_file(path, report: RelaxReport, item_ids) -> None:
    """JSON listing, per item id, which positives and negatives were removed."""
    ids = list(item_ids)
    items = []
    for i, item in enumerate(ids):
        items.append(
            {
                "id": item,
                "removed_positive": [ids[k] for k in np.flatnonzero(report.removed_positive_mask[i])],
                "removed_negative": [ids[k] for k in np.flatnonzero(report.removed_negative_mask[i])],
            }
        )
    payload = {
        "threshold": report.threshold,
        "removed_positive_total": int(report.removed_positive.sum()),
        "removed_negative_total": int(report.removed_negative.sum()),
        "items": items,
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def read_pairs_file(path, labels, item_ids) -> PairSets:
    """Rebuild relaxed dataset-level pair sets from labels and a pairs file."""
    payload = json.loads(Path(path).read_text())
    index = {item: k for k, item in enumerate(item_ids)}
    pairs = build_pair_sets(labels)
    pos, neg = pairs.positive.copy(), pairs.negative.copy()
    for entry in payload["items"]:
        i = index[entry["id"]]
        for other in entry["removed_positive"]:
            pos[i, index[other]] = False
        for other in entry["removed_negative"]:
            neg[i, index[other]] = False
    return PairSets(pos, neg)
