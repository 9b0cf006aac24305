"""Retrieval evaluation: features, cosine distances, CMC and mAP under the
general, same-clothing and clothing-change protocols."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import ProtocolError

logger = logging.getLogger(__name__)

MODES = ("general", "same-clothing", "clothing-change")
MODE_ALIASES = {"general": "general", "sc": "same-clothing", "cc": "clothing-change",
                "same-clothing": "same-clothing", "clothing-change": "clothing-change"}


@dataclass
class EvalRecord:
    feature: np.ndarray
    identity: int
    clothing: int
    camera: int


@dataclass(frozen=True)
class EvalProtocol:
    mode: str = "general"
    exclude_same_camera: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            object.__setattr__(self, "mode", MODE_ALIASES.get(self.mode, self.mode))
        if self.mode not in MODES:
            raise ValueError(f"unknown evaluation mode {self.mode!r}")


@dataclass
class EvalResult:
    mode: str
    cmc: np.ndarray
    mAP: float
    evaluable: int
    excluded: int
    ap: np.ndarray = field(repr=False, default=None)

    def rank(self, k: int) -> float:
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "rank1": self.rank(1),
            "rank5": self.rank(5),
            "rank10": self.rank(10),
            "mAP": self.mAP,
            "evaluable-queries": self.evaluable,
            "excluded-queries": self.excluded,
        }


@torch.no_grad()
def extract_features(model, images: torch.Tensor, masked: torch.Tensor | None, labels: Sequence[tuple[int, int, int]], batch_size: int = 64) -> list[EvalRecord]:
    """Pooled, L2-normalized identity features for each image, in input order.

    ``labels`` holds (identity, clothing, camera) per image.
    """
    if len(labels) == 0:
        return []
    was_training = model.training
    model.eval()
    feats = []
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        out = model(images[sl], None if masked is None else masked[sl])
        feats.append(torch.nn.functional.normalize(out["feature"], dim=1).double().numpy())
    model.train(was_training)
    feats = np.concatenate(feats)
    return [EvalRecord(f, int(i), int(c), int(cam)) for f, (i, c, cam) in zip(feats, labels)]


def _stack(records: Sequence[EvalRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    feats = np.stack([r.feature for r in records]) if records else np.zeros((0, 0))
    ids = np.array([r.identity for r in records], dtype=np.int64)
    cloth = np.array([r.clothing for r in records], dtype=np.int64)
    cams = np.array([r.camera for r in records], dtype=np.int64)
    return feats, ids, cloth, cams


def distance_matrix(query: Sequence[EvalRecord], gallery: Sequence[EvalRecord]) -> np.ndarray:
    qf = _stack(query)[0]
    gf = _stack(gallery)[0]
    if len(query) and len(gallery) and qf.shape[1] != gf.shape[1]:
        raise ValueError(f"feature dimensions differ: {qf.shape[1]} vs {gf.shape[1]}")
    return 1.0 - qf @ gf.T if len(query) and len(gallery) else np.zeros((len(query), len(gallery)))


def valid_gallery_mask(q: EvalRecord, gallery: Sequence[EvalRecord], protocol: EvalProtocol) -> tuple[np.ndarray, np.ndarray]:
    """(valid, positive) flags per gallery item for one query."""
    _, gid, gcl, gcam = _stack(gallery)
    same_id = gid == q.identity
    valid = np.ones(len(gallery), dtype=bool)
    if protocol.exclude_same_camera:
        valid &= ~(same_id & (gcam == q.camera))
    if protocol.mode == "same-clothing":
        valid &= ~(same_id & (gcl != q.clothing))
    elif protocol.mode == "clothing-change":
        valid &= ~(same_id & (gcl == q.clothing))
    return valid, valid & same_id


def cmc_map(distmat: np.ndarray, query: Sequence[EvalRecord], gallery: Sequence[EvalRecord], protocol: EvalProtocol) -> EvalResult:
    distmat = np.asarray(distmat, dtype=np.float64)
    if len(query) == 0 or len(gallery) == 0:
        raise ProtocolError("need at least one query and one gallery item")
    if distmat.shape != (len(query), len(gallery)):
        raise ValueError(f"distance matrix {distmat.shape} does not match {len(query)}x{len(gallery)}")
    hits = np.zeros(len(gallery))
    aps = []
    excluded = 0
    for qi, q in enumerate(query):
        valid, positive = valid_gallery_mask(q, gallery, protocol)
        if not positive.any():
            excluded += 1
            continue
        cand = np.flatnonzero(valid)
        order = cand[np.argsort(distmat[qi, cand], kind="stable")]
        matches = positive[order]
        first = int(np.argmax(matches))
        hits[first:] += 1
        hit_pos = np.flatnonzero(matches)
        precision = np.arange(1, len(hit_pos) + 1) / (hit_pos + 1)
        aps.append(precision.mean())
    if not aps:
        raise ProtocolError(f"no evaluable queries under {protocol.mode} mode")
    if excluded:
        logger.info("%s mode: %d of %d queries have no valid positive", protocol.mode, excluded, len(query))
    n = len(aps)
    return EvalResult(protocol.mode, hits / n, float(np.mean(aps)), n, excluded, np.array(aps))


def evaluate(query: Sequence[EvalRecord], gallery: Sequence[EvalRecord], modes: Sequence[str] = MODES, exclude_same_camera: bool = True) -> list[EvalResult]:
    dist = distance_matrix(query, gallery)
    return [cmc_map(dist, query, gallery, EvalProtocol(m, exclude_same_camera)) for m in modes]
