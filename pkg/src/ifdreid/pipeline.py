"""End-to-end helpers: load the splits named in a config, train a variant,
evaluate it."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .datamodel import DatasetIndex, RegionVocabulary, default_vocabulary, load_dataset, load_vocabulary
from .errors import ProtocolError
from .evaluation import MODES, EvalProtocol, EvalRecord, EvalResult, cmc_map, distance_matrix, extract_features
from .network import IFDNetwork
from .training import MetricsLog, TensorSet, TrainState, prepare_tensors, train

logger = logging.getLogger(__name__)


@dataclass
class Splits:
    train: DatasetIndex
    query: DatasetIndex
    gallery: DatasetIndex
    vocab: RegionVocabulary


def vocabulary_for(config: RunConfig) -> RegionVocabulary:
    if config.data.vocabulary:
        return load_vocabulary(Path(config.data.root) / config.data.vocabulary)
    return default_vocabulary()


def load_splits(config: RunConfig) -> Splits:
    root = Path(config.data.root)
    parts = [load_dataset(root, root / getattr(config.data, name)) for name in ("train", "query", "gallery")]
    return Splits(*parts, vocabulary_for(config))


def tensors_for(index: DatasetIndex, config: RunConfig, vocab: RegionVocabulary) -> TensorSet:
    return prepare_tensors(index, vocab, config.backbone.output_stride, config.data.fill)


def run_training(config: RunConfig, splits: Splits, log_path: str | Path | None = None, state: TrainState | None = None) -> TrainState:
    data = tensors_for(splits.train, config, splits.vocab)
    logger.info("training %s on %d images, %d identities", config.train.variant, len(data), len(data.id_list))
    return train(config, splits.train, data, MetricsLog(log_path), state)


def evaluate_records(qr: list[EvalRecord], gr: list[EvalRecord], modes=MODES) -> list[EvalResult | str]:
    """Results per mode; a mode with no evaluable query yields an error string."""
    dist = distance_matrix(qr, gr)
    out = []
    for mode in modes:
        try:
            out.append(cmc_map(dist, qr, gr, EvalProtocol(mode)))
        except ProtocolError as exc:
            out.append(str(exc))
    return out


def evaluate_model(model: IFDNetwork, config: RunConfig, splits: Splits, modes=MODES) -> list[EvalResult | str]:
    q = tensors_for(splits.query, config, splits.vocab)
    g = tensors_for(splits.gallery, config, splits.vocab)
    needs_masked = model.has_attention
    qr = extract_features(model, q.images, q.masked if needs_masked else None, q.meta)
    gr = extract_features(model, g.images, g.masked if needs_masked else None, g.meta)
    return evaluate_records(qr, gr, modes)


def oracle_records(index: DatasetIndex, id_list: list[int]) -> list[EvalRecord]:
    """One-hot identity features: a perfect model, for checking the evaluation path."""
    pos = {ident: k for k, ident in enumerate(id_list)}
    out = []
    for s in index:
        f = np.zeros(len(id_list))
        f[pos[s.identity]] = 1.0
        out.append(EvalRecord(f, s.identity, s.clothing, s.camera))
    return out


@torch.no_grad()
def attention_maps(model: IFDNetwork, masked: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    """W_I for each masked image, N x h x w at feature resolution."""
    if not model.has_attention:
        raise ValueError(f"variant {model.variant.name!r} has no attention stream")
    was = model.training
    model.eval()
    maps = [model.ikt(model.forward_attention(masked[s : s + batch_size])["feat_a"])[:, 0] for s in range(0, len(masked), batch_size)]
    model.train(was)
    return torch.cat(maps) if maps else torch.zeros(0)
