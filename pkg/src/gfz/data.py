"""Deterministic synthetic multi-label image datasets.

Each sample is a textured background with 0..n_classes anti-aliased glyphs
painted on it; label c is 1 iff glyph c was rendered. Class prevalences
are configurable (the default target profile is heavily imbalanced), and a
parametric domain shift (hue rotation, brightness, noise, background swap)
turns the source distribution into a shifted target distribution while
preserving labels. Everything is pure given (spec, seed): samples draw
from index-keyed sub-seeds, so generation order or parallelism cannot
change the data.

Images are float32 in [0, 1], channels-first (N, 3, H, W).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .nn import ConfigError

GLYPH_NAMES = ("circle", "square", "triangle", "cross", "bar", "ring", "wedge")

# one base color per class, jittered per sample
_CLASS_COLORS = np.array([
    [0.92, 0.25, 0.21],
    [0.25, 0.52, 0.96],
    [0.98, 0.75, 0.18],
    [0.22, 0.72, 0.40],
    [0.62, 0.33, 0.88],
    [0.95, 0.45, 0.75],
    [0.20, 0.80, 0.85],
], dtype=np.float64)

# training-set occurrence profile of a heavily imbalanced 7-tool task
IMBALANCED_PREVALENCE = (0.5559, 0.0481, 0.5586, 0.0176, 0.0324, 0.0532, 0.0621)
BALANCED_PREVALENCE = (0.35,) * 7


@dataclass(frozen=True)
class DomainShift:
    """Label-preserving pixel-space shift between source and target.

    background_texture None keeps the dataset's own background family, so
    DomainShift() is the identity.
    """

    hue_degrees: float = 0.0
    brightness: float = 1.0
    noise_sigma: float = 0.0
    background_texture: int | None = None

    def is_identity(self) -> bool:
        return (self.hue_degrees == 0.0 and self.brightness == 1.0
                and self.noise_sigma == 0.0 and self.background_texture is None)


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 32
    class_count: int = 7
    prevalence: tuple[float, ...] = IMBALANCED_PREVALENCE
    cooccurrence: tuple[int, int, float] | None = None  # (class a, class b, extra joint prob)
    shift: DomainShift = field(default_factory=DomainShift)
    sample_count: int = 1000
    seed: int = 0
    background: int = 0
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def validate(self) -> None:
        if self.image_size < 8:
            raise ConfigError("dataset: image_size must be >= 8")
        if not (1 <= self.class_count <= len(GLYPH_NAMES)):
            raise ConfigError(f"dataset: class_count must be 1..{len(GLYPH_NAMES)}")
        if len(self.prevalence) != self.class_count:
            raise ConfigError("dataset: prevalence length must equal class_count")
        for c, p in enumerate(self.prevalence):
            if not (0.0 < p < 1.0):
                raise ConfigError(f"dataset: prevalence[{c}]={p} outside (0,1)")
            if p * self.sample_count < 1.0:
                raise ConfigError(
                    f"dataset: class {c} expects fewer than one positive "
                    f"({p} * {self.sample_count} < 1)")
        if self.cooccurrence is not None:
            a, b, extra = self.cooccurrence
            if not (0 <= a < self.class_count and 0 <= b < self.class_count and a != b):
                raise ConfigError("dataset: cooccurrence classes invalid")
            if not (0.0 <= extra <= 1.0):
                raise ConfigError("dataset: cooccurrence boost outside [0,1]")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"dataset: split fractions must sum to 1, got {self.split}")


def _rng(*entropy) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------- textures

def _texture(tid: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """A (3, size, size) background in [0,1]; tid selects the family."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    t = tid % 4
    if t == 0:
        c0 = np.array([0.18, 0.20, 0.24]) + rng.uniform(-0.03, 0.03, 3)
        c1 = np.array([0.38, 0.40, 0.46]) + rng.uniform(-0.03, 0.03, 3)
        w = yy
    elif t == 1:
        c0 = np.array([0.30, 0.22, 0.16]) + rng.uniform(-0.03, 0.03, 3)
        c1 = np.array([0.55, 0.45, 0.30]) + rng.uniform(-0.03, 0.03, 3)
        phase = rng.uniform(0, 2 * np.pi)
        w = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + yy) + phase)
    elif t == 2:
        c0 = np.array([0.16, 0.26, 0.20]) + rng.uniform(-0.03, 0.03, 3)
        c1 = np.array([0.34, 0.50, 0.40]) + rng.uniform(-0.03, 0.03, 3)
        cell = max(size // 6, 2)
        ox, oy = rng.integers(0, cell, size=2)
        w = ((((yy * (size - 1) + oy) // cell) + ((xx * (size - 1) + ox) // cell)) % 2).astype(np.float64)
    else:
        c0 = np.array([0.22, 0.18, 0.30]) + rng.uniform(-0.03, 0.03, 3)
        c1 = np.array([0.46, 0.40, 0.58]) + rng.uniform(-0.03, 0.03, 3)
        coarse = rng.random((4, 4))
        reps = -(-size // 4)
        w = np.kron(coarse, np.ones((reps, reps)))[:size, :size]
    return (c0[:, None, None] * (1.0 - w) + c1[:, None, None] * w).astype(np.float64)


# ------------------------------------------------------------------ glyphs

def _glyph_sdf(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Signed distance (inside < 0) of the unit-sized glyph at (u, v)."""
    if kind == "circle":
        return np.hypot(u, v) - 1.0
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) - 0.9
    if kind == "triangle":
        sd = None
        for ang in (np.pi / 6, 5 * np.pi / 6, 3 * np.pi / 2):
            d = u * np.cos(ang) + v * np.sin(ang) - 0.55
            sd = d if sd is None else np.maximum(sd, d)
        return sd
    if kind == "cross":
        bar1 = np.maximum(np.abs(u) - 1.0, np.abs(v) - 0.32)
        bar2 = np.maximum(np.abs(v) - 1.0, np.abs(u) - 0.32)
        return np.minimum(bar1, bar2)
    if kind == "bar":
        return np.maximum(np.abs(u) - 1.05, np.abs(v) - 0.3)
    if kind == "ring":
        return np.abs(np.hypot(u, v) - 0.8) - 0.3
    if kind == "wedge":
        rho = np.hypot(u, v)
        return np.maximum(rho - 1.05, (np.abs(v) - u) / np.sqrt(2.0))
    raise ConfigError(f"unknown glyph '{kind}'")


def _paint_glyph(img: np.ndarray, kind: str, cx: float, cy: float, size_px: float,
                 angle: float, color: np.ndarray) -> None:
    h, w = img.shape[1:]
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dx = (xx - cx) / size_px
    dy = (yy - cy) / size_px
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    sd = _glyph_sdf(kind, u, v) * size_px  # back to pixel units for 1px AA
    alpha = np.clip(0.5 - sd, 0.0, 1.0)
    img *= (1.0 - alpha)[None]
    img += color[:, None, None] * alpha[None]


def render_sample(spec: DatasetSpec, labels_row: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    img = _texture(spec.background, size, rng)
    for c in range(spec.class_count):
        # always consume the same rng draws so labels alone decide content
        cx, cy = rng.uniform(0.22 * size, 0.78 * size, size=2)
        radius = rng.uniform(0.16 * size, 0.24 * size)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        jitter = rng.uniform(-0.12, 0.12, size=3)
        if labels_row[c]:
            color = np.clip(_CLASS_COLORS[c] + jitter, 0.0, 1.0)
            _paint_glyph(img, GLYPH_NAMES[c], cx, cy, radius, angle, color)
    return np.clip(img, 0.0, 1.0)


# ----------------------------------------------------------- domain shift

def _hue_rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Linear hue rotation in RGB (standard luma-preserving matrix)."""
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    m = np.array([
        [0.213 + 0.787 * c - 0.213 * s, 0.715 - 0.715 * c - 0.715 * s, 0.072 - 0.072 * c + 0.928 * s],
        [0.213 - 0.213 * c + 0.143 * s, 0.715 + 0.285 * c + 0.140 * s, 0.072 - 0.072 * c - 0.283 * s],
        [0.213 - 0.213 * c - 0.787 * s, 0.715 - 0.715 * c + 0.715 * s, 0.072 + 0.928 * c + 0.072 * s],
    ])
    flat = img.reshape(img.shape[0], 3, -1)
    return np.einsum("rc,ncp->nrp", m, flat).reshape(img.shape)


def apply_domain_shift(images: np.ndarray, shift: DomainShift, seed: int = 0) -> np.ndarray:
    """Shift images pixelwise: hue, brightness, background blend, noise.

    Labels are untouched by construction. The identity shift returns the
    input bit-exact.
    """
    if shift.is_identity():
        return images
    out = images.astype(np.float64)
    if shift.hue_degrees != 0.0:
        out = _hue_rotate(out, shift.hue_degrees)
    if shift.brightness != 1.0:
        out = out * shift.brightness
    if shift.background_texture is not None:
        rng = _rng(seed, 101)
        for i in range(out.shape[0]):
            tex = _texture(shift.background_texture, out.shape[2], rng)
            out[i] = out[i] * 0.65 + tex * 0.35
    if shift.noise_sigma > 0.0:
        rng = _rng(seed, 202)
        out = out + rng.normal(0.0, shift.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ------------------------------------------------------------- generation

def sample_labels(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    labels = (rng.random((spec.sample_count, spec.class_count))
              < np.asarray(spec.prevalence)).astype(np.uint8)
    if spec.cooccurrence is not None:
        a, b, extra = spec.cooccurrence
        boost = rng.random(spec.sample_count) < extra
        labels[boost, a] = 1
        labels[boost, b] = 1
    return labels


def generate_dataset(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render the full dataset; returns (images (N,3,H,W) float32, labels (N,C) uint8)."""
    spec.validate()
    label_rng = _rng(spec.seed, 0)
    labels = sample_labels(spec, label_rng)
    images = np.empty((spec.sample_count, 3, spec.image_size, spec.image_size), dtype=np.float32)
    for i in range(spec.sample_count):
        images[i] = render_sample(spec, labels[i], _rng(spec.seed, 1, i))
    images = apply_domain_shift(images, spec.shift, seed=spec.seed)
    return images, labels


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One label-preserving op drawn uniformly from {identity, flips, right-angle rotations}."""
    if image.shape[1] != image.shape[2]:
        raise ConfigError(f"augment: image must be square, got {image.shape}")
    k = int(rng.integers(0, 6))
    if k == 0:
        return image
    if k == 1:
        return np.ascontiguousarray(image[:, :, ::-1])
    if k == 2:
        return np.ascontiguousarray(image[:, ::-1, :])
    return np.ascontiguousarray(np.rot90(image, k=k - 2, axes=(1, 2)))


def split_dataset(images: np.ndarray, labels: np.ndarray, fractions, seed: int):
    """Seeded shuffle split into len(fractions) disjoint covering parts."""
    fractions = tuple(float(f) for f in fractions)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split: fractions must sum to 1, got {fractions}")
    if any(f < 0 for f in fractions):
        raise ConfigError("split: fractions must be non-negative")
    n = images.shape[0]
    perm = _rng(seed, 7).permutation(n)
    bounds = [0]
    acc = 0.0
    for f in fractions:
        acc += f
        bounds.append(min(int(acc * n + 0.5), n))
    bounds[-1] = n
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        idx = perm[lo:hi]
        parts.append((images[idx], labels[idx]))
    return tuple(parts)


# --------------------------------------------------------- GFZD container

_GFZD_MAGIC = b"GFZD"
_GFZD_VERSION = 1
_GFZD_HEADER = "<4sHIHHBB"  # magic, version, count, height, width, channels, class_count


def save_gfzd(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write the flat binary dataset container (u8 pixels + u8 labels).

    Float images in [0,1] are quantized to u8; pixel bytes are stored
    channel-major (C planes of row-major H*W), little-endian header.
    """
    if images.ndim != 4 or labels.ndim != 2 or images.shape[0] != labels.shape[0]:
        raise ConfigError(f"gfzd: bad array shapes {images.shape}, {labels.shape}")
    n, c, h, w = images.shape
    if images.dtype == np.uint8:
        pix = images
    else:
        pix = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    lab = labels.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(_GFZD_HEADER, _GFZD_MAGIC, _GFZD_VERSION, n, h, w, c, lab.shape[1]))
        for i in range(n):
            fh.write(pix[i].tobytes())
            fh.write(lab[i].tobytes())


def load_gfzd(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a GFZD container; returns (float32 images in [0,1], u8 labels)."""
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize(_GFZD_HEADER))
        magic, version, n, h, w, c, n_classes = struct.unpack(_GFZD_HEADER, header)
        if magic != _GFZD_MAGIC:
            raise ConfigError(f"gfzd: bad magic {magic!r}")
        if version != _GFZD_VERSION:
            raise ConfigError(f"gfzd: unsupported version {version}")
        pix_bytes = c * h * w
        images = np.empty((n, c, h, w), dtype=np.float32)
        labels = np.empty((n, n_classes), dtype=np.uint8)
        for i in range(n):
            buf = fh.read(pix_bytes + n_classes)
            if len(buf) != pix_bytes + n_classes:
                raise ConfigError("gfzd: truncated file")
            images[i] = np.frombuffer(buf, dtype=np.uint8, count=pix_bytes).reshape(c, h, w) / np.float32(255.0)
            labels[i] = np.frombuffer(buf, dtype=np.uint8, offset=pix_bytes)
    return images, labels


def source_spec(**overrides) -> DatasetSpec:
    """Default pretraining task: balanced labels, identity shift."""
    base = DatasetSpec(prevalence=BALANCED_PREVALENCE, sample_count=2400, seed=7001,
                       background=0, shift=DomainShift())
    return replace(base, **overrides) if overrides else base


def target_spec(**overrides) -> DatasetSpec:
    """Default fine-tuning task: imbalanced labels plus a real domain gap."""
    base = DatasetSpec(prevalence=IMBALANCED_PREVALENCE, sample_count=2500, seed=7002,
                       background=0, split=(0.6, 0.2, 0.2),
                       shift=DomainShift(hue_degrees=100.0, brightness=0.9,
                                         noise_sigma=0.03, background_texture=2))
    return replace(base, **overrides) if overrides else base
