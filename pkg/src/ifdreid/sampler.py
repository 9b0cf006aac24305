"""Identity-balanced batch sampling.

``pk`` picks B samples uniformly per identity. ``proportional-ras`` splits
each identity's budget B across its appearances in proportion to how many
images each appearance has (largest-remainder apportionment), so no outfit is
starved or oversampled relative to its share of the data.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import DatasetIndex
from .errors import ConfigError

MODES = ("pk", "proportional-ras")


@dataclass
class SamplerConfig:
    P: int = 4
    B: int = 4
    mode: str = "proportional-ras"
    seed: int = 0

    def __post_init__(self):
        if self.P < 2 or self.B < 2:
            raise ConfigError(f"sampler needs P >= 2 and B >= 2, got P={self.P} B={self.B}")
        if self.mode not in MODES:
            raise ConfigError(f"sampler mode must be one of {MODES}, got {self.mode!r}")

    @property
    def batch_size(self) -> int:
        return self.P * self.B


def allocate_proportional(sizes: Sequence[int], budget: int) -> list[int]:
    """Largest-remainder split of ``budget`` proportional to ``sizes``.

    Remainder ties go to the lower index. Afterwards, any appearance whose
    ideal share is at least 0.5 but received nothing takes a seat from the
    most over-allocated appearance holding two or more, when one exists.
    """
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise ValueError("need at least one appearance")
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    if min(sizes) < 1:
        raise ValueError(f"appearance sizes must be positive, got {sizes}")
    total = sum(sizes)
    # exact rational arithmetic: ideal_k = budget * s_k / total
    numer = [budget * s for s in sizes]
    counts = [n // total for n in numer]
    rema = [n % total for n in numer]
    left = budget - sum(counts)
    order = sorted(range(len(sizes)), key=lambda k: (-rema[k], k))
    for k in order[:left]:
        counts[k] += 1

    while True:
        starving = [k for k in range(len(sizes)) if counts[k] == 0 and 2 * numer[k] >= total]
        donors = [k for k in range(len(sizes)) if counts[k] >= 2]
        if not starving or not donors:
            break
        # over-allocation count_k - ideal_k, compared as count_k*total - numer_k
        donor = max(donors, key=lambda k: (counts[k] * total - numer[k], -k))
        counts[donor] -= 1
        counts[starving[0]] += 1
    return counts


def _fit_to_buckets(counts: list[int], sizes: Sequence[int]) -> list[int]:
    # move overflow to the buckets with the most spare room; only matters when
    # the identity has fewer images than the budget
    counts = list(counts)
    if sum(sizes) < sum(counts):
        return counts
    for k in range(len(counts)):
        while counts[k] > sizes[k]:
            spare = max(range(len(counts)), key=lambda j: (sizes[j] - counts[j], -j))
            counts[k] -= 1
            counts[spare] += 1
    return counts


def _draw(rng: np.random.Generator, bucket: Sequence[int], n: int) -> list[int]:
    if n == 0:
        return []
    replace = len(bucket) < n
    return [int(bucket[i]) for i in rng.choice(len(bucket), size=n, replace=replace)]


def identity_slots(index: DatasetIndex, identity: int, config: SamplerConfig, rng: np.random.Generator) -> list[int]:
    if config.mode == "pk":
        return _draw(rng, index.by_identity[identity], config.B)
    apps = index.appearances_of(identity)
    sizes = [len(index.by_appearance[a]) for a in apps]
    counts = _fit_to_buckets(allocate_proportional(sizes, config.B), sizes)
    out = []
    for app, n in zip(apps, counts):
        out.extend(_draw(rng, index.by_appearance[app], n))
    return out


def next_batch(index: DatasetIndex, config: SamplerConfig, rng: np.random.Generator, identities: Sequence[int] | None = None) -> list[int]:
    """P*B sample positions for P distinct identities (drawn at random unless given)."""
    ids = index.identities
    if len(ids) < config.P:
        raise ConfigError(f"batch needs {config.P} identities, dataset has {len(ids)}")
    if identities is None:
        identities = [ids[i] for i in rng.choice(len(ids), size=config.P, replace=False)]
    batch = []
    for pid in identities:
        batch.extend(identity_slots(index, pid, config, rng))
    return batch


def epoch_plan(index: DatasetIndex, config: SamplerConfig, epoch: int = 0) -> list[list[int]]:
    """All batches of one epoch; identities are dealt round-robin from shuffled decks."""
    ids = index.identities
    if len(ids) < config.P:
        raise ConfigError(f"batch needs {config.P} identities, dataset has {len(ids)}")
    rng = np.random.default_rng([config.seed, epoch])
    n_batches = len(index) // config.batch_size
    deck: list[int] = []
    plan = []
    for _ in range(n_batches):
        chosen: list[int] = []
        while len(chosen) < config.P:
            if not deck:
                deck = [ids[i] for i in rng.permutation(len(ids))]
            # a reshuffled deck may repeat an identity already in this batch
            pick = next((k for k, pid in enumerate(deck) if pid not in chosen), None)
            if pick is None:
                deck = []
                continue
            chosen.append(deck.pop(pick))
        plan.append(next_batch(index, config, rng, chosen))
    return plan


class BatchSampler:
    """Iterable of per-epoch batch plans, usable as a torch batch_sampler."""

    def __init__(self, index: DatasetIndex, config: SamplerConfig):
        self.index = index
        self.config = config
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __iter__(self):
        return iter(epoch_plan(self.index, self.config, self.epoch))

    def __len__(self) -> int:
        return len(self.index) // self.config.batch_size
