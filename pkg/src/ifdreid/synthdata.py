"""Deterministic synthetic pedestrians with exact parsing masks.

Identity lives only in the head: a 5x5 binary glyph drawn on the face, a hair
height, a face tone and the width of a dark head contour. Body geometry and
arm colour are the same for everybody. Each outfit (identity, clothing) has an upper-body
colour, a trouser colour and a stripe texture. The last clothing of every
identity is the held-out outfit used for clothing-change queries; it is shot
by camera 1, all other outfits by camera 0.

With probability ``confound`` a training outfit is unique to its identity, so
clothing colour predicts identity on the training set; otherwise it is drawn
from a small pool shared by all identities. A held-out outfit repeats a
training outfit picked uniformly from the whole training set, so clothing
alone points at a random person.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import DEFAULT_LABELS, DatasetIndex, Sample, write_manifest, save_sample_files
from .errors import ConfigError

HAIR, FACE, UPPER, PANTS, ARMS, SHOES = (DEFAULT_LABELS[k] for k in ("hair", "face", "upper-clothes", "pants", "arms", "shoes"))
BACKGROUND_LEVEL = 0.5
SHARED_POOL = 3
STRIPE_MIN, STRIPE_MAX, STRIPE_SHADE = 8, 14, 0.3
GLYPH = 5
GLYPH_SHADE = 0.3  # glyph cells are the face tone scaled by this


@dataclass
class SynthConfig:
    num_identities: int = 8
    clothings_per_identity: int = 3
    images_per_appearance: int = 10
    image_size: tuple[int, int] = (128, 64)
    noise: float = 0.02
    confound: float = 1.0
    jitter: int = 1
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        for name in ("num_identities", "clothings_per_identity", "images_per_appearance"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        h, w = self.image_size
        if h < 32 or w < 16:
            raise ConfigError(f"image size {self.image_size} too small (min 32x16)")
        if not 0.0 <= self.noise <= 1.0 or not 0.0 <= self.confound <= 1.0:
            raise ConfigError("noise and confound must lie in [0, 1]")
        if self.jitter < 0:
            raise ConfigError("jitter must be >= 0")


ARM_SKIN = (0.8, 0.64, 0.54)
TORSO_FRAC = 0.5


@dataclass(frozen=True)
class Person:
    glyph: np.ndarray
    hair_frac: float
    skin: tuple[float, float, float]
    contour: int  # head outline thickness in pixels


@dataclass(frozen=True)
class Outfit:
    upper: tuple[float, float, float]
    pants: tuple[float, float, float]
    stripe_period: int
    stripe_axis: int  # 0 rows, 1 columns, -1 plain


def _people(config: SynthConfig) -> list[Person]:
    rng = np.random.default_rng([config.seed, 1])
    n = config.num_identities
    seen, people = set(), []
    for i in range(n):
        while True:
            glyph = rng.integers(0, 2, size=(GLYPH, GLYPH)).astype(bool)
            key = glyph.tobytes()
            if 6 <= glyph.sum() <= 19 and key not in seen:
                break
        seen.add(key)
        tone = rng.uniform(0.55, 0.9)
        contour = int(rng.integers(1, 4))
        people.append(Person(glyph, float(rng.uniform(0.2, 0.45)), (tone, tone * 0.8, tone * 0.68), contour))
    return people


def _outfit_pool(count: int, rng: np.random.Generator) -> list[Outfit]:
    hues = (np.arange(count) + rng.uniform()) / count
    rng.shuffle(hues)
    out = []
    for h in hues:
        upper = colorsys.hsv_to_rgb(float(h), rng.uniform(0.6, 1.0), rng.uniform(0.65, 1.0))
        pants = colorsys.hsv_to_rgb(float((h + rng.uniform(0.3, 0.7)) % 1), rng.uniform(0.4, 0.9), rng.uniform(0.3, 0.7))
        out.append(Outfit(tuple(upper), tuple(pants), int(rng.integers(STRIPE_MIN, STRIPE_MAX + 1)), int(rng.integers(-1, 2))))
    return out


def outfits(config: SynthConfig) -> dict[tuple[int, int], Outfit]:
    """Outfit of every (identity, clothing)."""
    n, c = config.num_identities, config.clothings_per_identity
    rng = np.random.default_rng([config.seed, 2])
    own = _outfit_pool(n * c, rng)
    shared = _outfit_pool(SHARED_POOL, rng)
    table = {}
    held_out = c - 1 if c >= 2 else None
    for i in range(n):
        for k in range(c):
            if k == held_out:
                continue
            if rng.uniform() < config.confound:
                table[(i, k)] = own[i * c + k]
            else:
                table[(i, k)] = shared[int(rng.integers(SHARED_POOL))]
    if held_out is not None:
        # the held-out outfit repeats a random training outfit of anybody,
        # so its clothing points at a random identity
        trained = sorted(table)
        pick = np.random.default_rng([config.seed, 4])
        for i in range(n):
            table[(i, held_out)] = table[trained[int(pick.integers(len(trained)))]]
    return table


def render(person: Person, outfit: Outfit, size: tuple[int, int], shift: tuple[int, int] = (0, 0)) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free image and parsing of one figure shifted by (dy, dx) pixels."""
    h, w = size
    dy, dx = shift
    image = np.full((h, w, 3), BACKGROUND_LEVEL, dtype=np.float64)
    parsing = np.zeros((h, w), dtype=np.int64)

    def box(y0, y1, x0, x1):
        ys = slice(max(int(round(y0)) + dy, 0), min(int(round(y1)) + dy, h))
        xs = slice(max(int(round(x0)) + dx, 0), min(int(round(x1)) + dx, w))
        return ys, xs

    cx = w / 2
    # head: dark contour, hair band on top, face with the identity glyph below
    head_w, head_top, head_h = 0.4 * w, 0.04 * h, 0.22 * h
    t = person.contour
    ys, xs = box(head_top - t, head_top + head_h + t, cx - head_w / 2 - t, cx + head_w / 2 + t)
    image[ys, xs] = (0.1, 0.08, 0.08)
    parsing[ys, xs] = HAIR
    hair_h = person.hair_frac * head_h
    ys, xs = box(head_top, head_top + hair_h, cx - head_w / 2, cx + head_w / 2)
    image[ys, xs] = (0.15, 0.1, 0.08)
    parsing[ys, xs] = HAIR
    face_top = head_top + hair_h
    ys, xs = box(face_top, head_top + head_h, cx - head_w / 2, cx + head_w / 2)
    image[ys, xs] = person.skin
    parsing[ys, xs] = FACE
    gy = np.linspace(face_top, head_top + head_h, GLYPH + 1)
    gx = np.linspace(cx - head_w / 2, cx + head_w / 2, GLYPH + 1)
    for r in range(GLYPH):
        for q in range(GLYPH):
            if person.glyph[r, q]:
                ys, xs = box(gy[r], gy[r + 1], gx[q], gx[q + 1])
                image[ys, xs] = tuple(GLYPH_SHADE * c for c in person.skin)

    torso_w = TORSO_FRAC * w
    torso_top, torso_bot = 0.28 * h, 0.56 * h
    arm_w = 0.07 * w
    for side in (-1, 1):
        x_in = cx + side * torso_w / 2
        ys, xs = box(torso_top + 0.02 * h, torso_bot, min(x_in, x_in + side * arm_w), max(x_in, x_in + side * arm_w))
        image[ys, xs] = ARM_SKIN
        parsing[ys, xs] = ARMS

    ys, xs = box(torso_top, torso_bot, cx - torso_w / 2, cx + torso_w / 2)
    _paint(image, parsing, ys, xs, outfit.upper, outfit, UPPER)
    legs_w = 0.85 * torso_w
    leg_gap = 0.08 * w
    pants_bot = 0.88 * h
    ys, xs = box(torso_bot, 0.68 * h, cx - legs_w / 2, cx + legs_w / 2)
    _paint(image, parsing, ys, xs, outfit.pants, outfit, PANTS)
    for side in (-1, 1):
        inner, outer = cx + side * leg_gap / 2, cx + side * legs_w / 2
        ys, xs = box(0.68 * h, pants_bot, min(inner, outer), max(inner, outer))
        _paint(image, parsing, ys, xs, outfit.pants, outfit, PANTS)
        ys, xs = box(pants_bot, pants_bot + 0.05 * h, min(inner, outer), max(inner, outer))
        image[ys, xs] = (0.2, 0.2, 0.22)
        parsing[ys, xs] = SHOES
    return image, parsing


def _paint(image, parsing, ys, xs, colour, outfit: Outfit, code: int) -> None:
    if ys.stop <= ys.start or xs.stop <= xs.start:
        return
    patch = np.broadcast_to(np.asarray(colour), (ys.stop - ys.start, xs.stop - xs.start, 3)).copy()
    if outfit.stripe_axis >= 0:
        # stripes anchored at the patch corner so they move with the figure
        n = patch.shape[outfit.stripe_axis]
        dark = (np.arange(n) // outfit.stripe_period) % 2 == 1
        if outfit.stripe_axis == 0:
            patch[dark] *= STRIPE_SHADE
        else:
            patch[:, dark] *= STRIPE_SHADE
    image[ys, xs] = patch
    parsing[ys, xs] = code


def camera_of(config: SynthConfig, clothing: int) -> int:
    return 1 if config.clothings_per_identity >= 2 and clothing == config.clothings_per_identity - 1 else 0


def render_dataset(config: SynthConfig) -> list[Sample]:
    """All samples in (identity, clothing, image) order, in memory."""
    people = _people(config)
    table = outfits(config)
    rng = np.random.default_rng([config.seed, 3])
    samples = []
    for i, person in enumerate(people):
        for k in range(config.clothings_per_identity):
            for m in range(config.images_per_appearance):
                shift = tuple(int(v) for v in rng.integers(-config.jitter, config.jitter + 1, size=2))
                image, parsing = render(person, table[(i, k)], config.image_size, shift)
                noise = rng.normal(0.0, config.noise, size=image.shape) if config.noise > 0 else 0.0
                image = np.where((parsing == 0)[..., None], np.clip(image + noise, 0.0, 1.0), image)
                # quantise to the 8-bit values that land on disk
                image = (np.round(image * 255.0) / 255.0).astype(np.float32)
                name = f"{i:04d}_c{k:02d}_{m:03d}.png"
                samples.append(
                    Sample(image, parsing, i, k, camera_of(config, k), f"images/{name}", f"parsing/{name}")
                )
    return samples


def generate(config: SynthConfig, out: str | Path) -> Path:
    """Render every sample to ``out`` and write ``out/manifest.tsv``."""
    return _write_all(config, render_dataset(config), Path(out))


def _write_all(config: SynthConfig, samples: list[Sample], out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_sample_files(out, s.image_path, s.parsing_path, s.image, s.parsing)
    manifest = out / "manifest.tsv"
    write_manifest(samples, manifest, header=_header(config))
    return manifest


def _header(config: SynthConfig) -> str:
    return "ifdreid synthetic set; fields: image parsing identity clothing camera\n" + repr(config)


def split_samples(config: SynthConfig, samples: list[Sample]) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Train / query / gallery lists.

    Query: every image of each identity's held-out (last) outfit. Gallery: the
    first image of each training outfit. Train: the remaining images of the
    training outfits.
    """
    if config.clothings_per_identity < 2:
        raise ConfigError("a clothing-change split needs at least 2 clothings per identity")
    held = config.clothings_per_identity - 1
    train, query, gallery = [], [], []
    first_seen = set()
    for s in samples:
        if s.clothing == held:
            query.append(s)
        elif s.appearance not in first_seen:
            first_seen.add(s.appearance)
            gallery.append(s)
        else:
            train.append(s)
    return train, query, gallery


def generate_split(config: SynthConfig, out: str | Path) -> tuple[Path, Path, Path]:
    """Render the dataset and write train/query/gallery manifests under ``out``."""
    if config.clothings_per_identity < 2:
        raise ConfigError("a clothing-change split needs at least 2 clothings per identity")
    out = Path(out)
    samples = render_dataset(config)
    _write_all(config, samples, out)
    paths = []
    for name, part in zip(("train", "query", "gallery"), split_samples(config, samples)):
        path = out / f"{name}.tsv"
        write_manifest(part, path, header=_header(config))
        paths.append(path)
    return tuple(paths)


def as_index(samples: list[Sample]) -> DatasetIndex:
    return DatasetIndex(tuple(samples))
