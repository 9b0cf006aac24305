"""Samples, dataset indexing and the on-disk manifest format.

A manifest is a UTF-8 text file with one tab-separated record per line::

    image-path  parsing-path  identity  clothing  camera

Paths are relative to the dataset root. Lines starting with ``#`` are comments.
Clothing labels are scoped per identity; ``(identity, clothing)`` names an
appearance.
"""
from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml
from PIL import Image

from .errors import LoadError, ProtocolError, ValidationError

DEFAULT_LABELS = OrderedDict(
    [
        ("background", 0),
        ("hair", 1),
        ("face", 2),
        ("upper-clothes", 3),
        ("pants", 4),
        ("skirt", 5),
        ("arms", 6),
        ("legs", 7),
        ("shoes", 8),
    ]
)
DEFAULT_CLOTHING = ("upper-clothes", "pants", "skirt")
HEAD_REGIONS = ("hair", "face")


@dataclass(frozen=True)
class RegionVocabulary:
    labels: Mapping[str, int]
    clothing_set: frozenset

    def __post_init__(self):
        codes = set(self.labels.values())
        if len(codes) != len(self.labels):
            raise ValidationError("region codes must be unique")
        if not self.clothing_set:
            raise ValidationError("clothing set is empty")
        if not set(self.clothing_set) < codes:
            raise ValidationError(
                "clothing set must be a strict subset of the region codes, got "
                f"{sorted(self.clothing_set)} for codes {sorted(codes)}"
            )
        for name in HEAD_REGIONS:
            if self.labels.get(name) in self.clothing_set:
                raise ValidationError(f"head region {name!r} cannot be a clothing region")

    @classmethod
    def from_names(cls, labels: Mapping[str, int], clothing: Iterable[str | int]) -> "RegionVocabulary":
        codes = set()
        for item in clothing:
            if isinstance(item, str):
                if item not in labels:
                    raise ValidationError(f"unknown clothing region {item!r}")
                codes.add(int(labels[item]))
            else:
                codes.add(int(item))
        return cls(OrderedDict((k, int(v)) for k, v in labels.items()), frozenset(codes))

    @property
    def codes(self) -> frozenset:
        return frozenset(self.labels.values())

    def codes_for(self, names: Iterable[str]) -> list[int]:
        return [self.labels[n] for n in names if n in self.labels]

    def to_dict(self) -> dict:
        inverse = {v: k for k, v in self.labels.items()}
        return {
            "labels": dict(self.labels),
            "clothing": [inverse[c] for c in sorted(self.clothing_set)],
        }


def default_vocabulary() -> RegionVocabulary:
    return RegionVocabulary.from_names(DEFAULT_LABELS, DEFAULT_CLOTHING)


def load_vocabulary(path: str | os.PathLike) -> RegionVocabulary:
    """Read a vocabulary file (YAML or JSON) with ``labels`` and ``clothing`` keys."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise LoadError(f"cannot read vocabulary {path}: {exc}") from exc
    if not isinstance(raw, dict) or "labels" not in raw or "clothing" not in raw:
        raise ValidationError(f"{path}: vocabulary needs 'labels' and 'clothing' keys")
    return RegionVocabulary.from_names(raw["labels"], raw["clothing"])


def save_vocabulary(vocab: RegionVocabulary, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(vocab.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray
    parsing: np.ndarray
    identity: int
    clothing: int
    camera: int
    image_path: str | None = None
    parsing_path: str | None = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"image must be HxWx3, got {self.image.shape}")
        if self.parsing.shape != self.image.shape[:2]:
            raise ValidationError(
                f"image {self.image.shape[:2]} and parsing {self.parsing.shape} sizes differ"
            )
        for name in ("identity", "clothing", "camera"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")

    @property
    def appearance(self) -> tuple[int, int]:
        return (self.identity, self.clothing)


@dataclass(frozen=True, eq=False)
class DatasetIndex:
    samples: tuple[Sample, ...]
    by_identity: Mapping[int, tuple[int, ...]] = field(init=False)
    by_appearance: Mapping[tuple[int, int], tuple[int, ...]] = field(init=False)

    def __post_init__(self):
        by_id: dict[int, list[int]] = OrderedDict()
        by_app: dict[tuple[int, int], list[int]] = OrderedDict()
        for pos, s in enumerate(self.samples):
            by_id.setdefault(s.identity, []).append(pos)
            by_app.setdefault(s.appearance, []).append(pos)
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "by_identity", {k: tuple(v) for k, v in by_id.items()})
        object.__setattr__(self, "by_appearance", {k: tuple(v) for k, v in by_app.items()})

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, pos: int) -> Sample:
        return self.samples[pos]

    def __iter__(self):
        return iter(self.samples)

    @property
    def identities(self) -> list[int]:
        return list(self.by_identity)

    def appearances_of(self, identity: int) -> list[tuple[int, int]]:
        return [a for a in self.by_appearance if a[0] == identity]

    def appearance_ids(self) -> np.ndarray:
        """Globally unique integer appearance id per sample (dense, first-seen order)."""
        lookup = {a: k for k, a in enumerate(self.by_appearance)}
        return np.array([lookup[s.appearance] for s in self.samples], dtype=np.int64)

    def identity_labels(self) -> tuple[np.ndarray, list[int]]:
        """Contiguous 0..K-1 labels for the identities, plus the original ids."""
        ids = sorted(self.by_identity)
        lookup = {pid: k for k, pid in enumerate(ids)}
        return np.array([lookup[s.identity] for s in self.samples], dtype=np.int64), ids

    def subset(self, positions: Sequence[int]) -> "DatasetIndex":
        return DatasetIndex(tuple(self.samples[p] for p in positions))


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    return np.clip(arr.astype(np.float32), 0.0, 1.0)


def _read_parsing(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            im = im.convert("L")
        return np.asarray(im).astype(np.int64)


def read_manifest(manifest: str | os.PathLike) -> list[tuple[str, str, int, int, int, int]]:
    """Parse manifest rows as (image, parsing, identity, clothing, camera, line-number)."""
    rows = []
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise LoadError(f"{manifest}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
            try:
                labels = [int(x) for x in fields[2:]]
            except ValueError:
                raise LoadError(f"{manifest}:{lineno}: labels must be integers: {fields[2:]}") from None
            if min(labels) < 0:
                raise LoadError(f"{manifest}:{lineno}: labels must be non-negative: {labels}")
            rows.append((fields[0], fields[1], *labels, lineno))
    return rows


def load_dataset(root_path: str | os.PathLike, manifest: str | os.PathLike) -> DatasetIndex:
    root = Path(root_path)
    samples = []
    for img_rel, parse_rel, pid, cloth, cam, lineno in read_manifest(manifest):
        img_path, parse_path = root / img_rel, root / parse_rel
        for p in (img_path, parse_path):
            if not p.is_file():
                raise LoadError(f"{manifest}:{lineno}: missing file {p}")
        image = _read_image(img_path)
        parsing = _read_parsing(parse_path)
        if image.shape[:2] != parsing.shape:
            raise ValidationError(
                f"{manifest}:{lineno}: image {image.shape[:2]} and parsing {parsing.shape} sizes differ"
            )
        samples.append(Sample(image, parsing, pid, cloth, cam, img_rel, parse_rel))
    return DatasetIndex(tuple(samples))


def write_manifest(index: DatasetIndex | Iterable[Sample], manifest: str | os.PathLike, header: str | None = None) -> None:
    """Write sample metadata; every sample must carry its relative paths."""
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    for s in index:
        if s.image_path is None or s.parsing_path is None:
            raise ValidationError("sample has no file paths; save the image first")
        lines.append(f"{s.image_path}\t{s.parsing_path}\t{s.identity}\t{s.clothing}\t{s.camera}")
    Path(manifest).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def save_sample_files(root: str | os.PathLike, image_rel: str, parsing_rel: str, image: np.ndarray, parsing: np.ndarray) -> None:
    root = Path(root)
    for rel in (image_rel, parsing_rel):
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels, mode="RGB").save(root / image_rel)
    Image.fromarray(parsing.astype(np.uint8), mode="L").save(root / parsing_rel)


@dataclass(frozen=True)
class SplitRule:
    """How to divide an index into query and gallery.

    ``by-camera``: samples whose camera is in ``query_cameras`` form the query.
    ``appearance-holdout``: per identity, one appearance (picked with ``seed``)
    forms the query; the identity's other appearances form the gallery.
    """

    kind: str = "by-camera"
    query_cameras: tuple[int, ...] = (0,)
    seed: int = 0


def split_query_gallery(index: DatasetIndex, rule: SplitRule) -> tuple[DatasetIndex, DatasetIndex]:
    if rule.kind == "by-camera":
        cams = set(rule.query_cameras)
        q_pos = [p for p, s in enumerate(index) if s.camera in cams]
    elif rule.kind == "appearance-holdout":
        rng = np.random.default_rng(rule.seed)
        q_pos = []
        for pid in sorted(index.by_identity):
            apps = sorted(index.appearances_of(pid))
            held = apps[int(rng.integers(len(apps)))]
            q_pos.extend(index.by_appearance[held])
        q_pos.sort()
    else:
        raise ValueError(f"unknown split rule {rule.kind!r}")
    q_set = set(q_pos)
    g_pos = [p for p in range(len(index)) if p not in q_set]
    query, gallery = index.subset(q_pos), index.subset(g_pos)
    missing = sorted(set(query.by_identity) - set(gallery.by_identity))
    if missing:
        raise ProtocolError(f"query identities absent from gallery: {missing}")
    return query, gallery
