"""Datasets, distribution shifts, and image IO.

A :class:`DomainDataset` is an immutable-by-convention bundle of float64
images in [0, 1] (N, C, H, W), integer labels, a human-readable name, and a
provenance record saying where it came from (loaded file, procedural
recipe, synthesized by generator k, or shifted view of another domain).

Shifts are the evaluation benchmark: seven photometric/geometric corruption
families, each with a five-step severity ladder calibrated so that severity
strictly increases the distance from the clean image.  All randomized shifts
draw from their own seeded stream, so a shifted dataset is a pure function
of (input dataset, shift spec).

File formats: the classic big-endian IDX tensor container for image/label
pairs (magic 0x803 / 0x801), plus binary PGM contact sheets for eyeballing
synthesized domains.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .rng import Rng


class FormatError(ValueError):
    """A file does not conform to its declared container format."""


IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

SHIFT_KINDS = ("gaussian_noise", "speckle", "contrast", "brightness",
               "blur", "pixelate", "invert")

# severity ladders, index = severity - 1
_NOISE_STD = (0.04, 0.08, 0.12, 0.18, 0.26)
_SPECKLE_STD = (0.10, 0.20, 0.30, 0.45, 0.60)
_CONTRAST_FACTOR = (0.75, 0.60, 0.45, 0.30, 0.15)
_BRIGHTNESS_OFFSET = (0.08, 0.16, 0.24, 0.32, 0.42)
_BLUR_SIGMA = (0.5, 0.8, 1.1, 1.5, 2.0)
_PIXELATE_BLOCK = (2, 3, 4, 6, 8)
_INVERT_FRACTION = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class ShiftSpec:
    """One corruption: a family, a severity in 1..5, and a noise seed."""

    kind: str
    severity: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}; choose from {SHIFT_KINDS}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def name(self) -> str:
        return f"{self.kind}@{self.severity}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "severity": self.severity, "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "ShiftSpec":
        return ShiftSpec(kind=d["kind"], severity=int(d.get("severity", 3)),
                         seed=int(d.get("seed", 0)))


@dataclass(frozen=True)
class Provenance:
    """Where a dataset came from; carried through shifts and synthesis."""

    kind: str                      # "idx" | "toy" | "synthetic" | "shifted"
    detail: dict = field(default_factory=dict)


@dataclass
class DomainDataset:
    images: np.ndarray             # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray             # (N,) integer
    name: str
    num_classes: int
    provenance: Provenance = field(default_factory=lambda: Provenance("unknown"))

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise TypeError("labels must be integer-typed")
        self.labels = self.labels.astype(np.int64)
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} != ({self.images.shape[0]},)")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels out of range for {self.num_classes} classes")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, index: np.ndarray, name: Optional[str] = None) -> "DomainDataset":
        return DomainDataset(self.images[index].copy(), self.labels[index].copy(),
                             name or self.name, self.num_classes, self.provenance)


# -- procedural toy data ---------------------------------------------------------


@dataclass(frozen=True)
class ToySpec:
    """Recipe for the procedural glyph dataset.

    Eight glyph families painted on a dark canvas with jittered position,
    size and brightness plus mild sensor noise; classes are separable by
    construction.  ``count`` divisible by ``num_classes`` gives exact class
    balance (labels are assigned round-robin).
    """

    num_classes: int = 4
    count: int = 256
    image_hw: tuple = (16, 16)
    noise: float = 0.02

    def __post_init__(self):
        if not 2 <= self.num_classes <= 8:
            raise ValueError(f"num_classes must be in 2..8, got {self.num_classes}")
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        h, w = self.image_hw
        if h < 8 or w < 8:
            raise ValueError(f"images must be at least 8x8, got {self.image_hw}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        object.__setattr__(self, "image_hw", (int(h), int(w)))


def _glyph_masks(cls: int, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    """Soft [0, 1] mask of glyph family ``cls`` on centered coordinates."""
    dist = np.sqrt(dy * dy + dx * dx)
    soft = lambda m: np.clip(m, 0.0, 1.0)
    edge = 1.2  # soft edge half-width in pixels
    inside = lambda d, bound: soft((bound - d) / edge + 0.5)
    band = lambda d, lo, hi: soft(np.minimum((d - lo), (hi - d)) / edge + 0.5)
    box = np.maximum(np.abs(dy), np.abs(dx))
    if cls == 0:    # filled disk
        return inside(dist, r)
    if cls == 1:    # ring
        return band(dist, 0.55 * r, r)
    if cls == 2:    # upright cross
        arm = np.minimum(np.abs(dy), np.abs(dx))
        return soft(inside(arm, 0.28 * r)) * inside(box, r)
    if cls == 3:    # horizontal bars
        phase = np.cos(dy * (2.5 * np.pi / r))
        return soft(phase * 2.0) * inside(box, r)
    if cls == 4:    # box outline
        return band(box, 0.55 * r, r)
    if cls == 5:    # diagonal cross (saltire)
        arm = np.minimum(np.abs(dy - dx), np.abs(dy + dx)) / np.sqrt(2.0)
        return soft(inside(arm, 0.28 * r)) * inside(dist, r)
    if cls == 6:    # vertical bars
        phase = np.cos(dx * (2.5 * np.pi / r))
        return soft(phase * 2.0) * inside(box, r)
    if cls == 7:    # checkerboard
        phase = np.cos(dy * (2.0 * np.pi / r)) * np.cos(dx * (2.0 * np.pi / r))
        return soft(phase * 2.5) * inside(dist, r)
    raise ValueError(f"no glyph family {cls}")


def make_toy_dataset(spec: ToySpec, rng: Rng, name: str = "toy") -> DomainDataset:
    """Procedural glyph domain; a pure function of (spec, rng seed)."""
    h, w = spec.image_hw
    n = spec.count
    labels = np.arange(n, dtype=np.int64) % spec.num_classes
    images = np.zeros((n, 1, h, w))
    centers_y = rng.uniform((n,)) * 0.24 - 0.12   # fraction of height
    centers_x = rng.uniform((n,)) * 0.24 - 0.12
    radii = 0.28 + rng.uniform((n,)) * 0.12       # fraction of min(h, w)
    intensity = 0.75 + rng.uniform((n,)) * 0.25
    noise = rng.normal((n, 1, h, w), std=spec.noise) if spec.noise > 0 else 0.0
    ys = np.arange(h)[:, None] - (h - 1) / 2.0
    xs = np.arange(w)[None, :] - (w - 1) / 2.0
    scale = min(h, w)
    for i in range(n):
        dy = ys - centers_y[i] * h
        dx = xs - centers_x[i] * w
        mask = _glyph_masks(int(labels[i]), dy, dx, radii[i] * scale)
        images[i, 0] = mask * intensity[i]
    images = np.clip(images + noise, 0.0, 1.0)
    prov = Provenance("toy", {"num_classes": spec.num_classes, "count": n,
                              "image_hw": list(spec.image_hw), "noise": spec.noise})
    return DomainDataset(images, labels, name, spec.num_classes, prov)


# -- distribution shifts -----------------------------------------------------------


def apply_shift(ds: DomainDataset, spec: ShiftSpec) -> DomainDataset:
    """Corrupted view of ``ds``; deterministic in (ds, spec), labels shared.

    Output pixels stay in [0, 1].  Severity ladders are calibrated so mean
    pixel distance from the clean images strictly increases with severity
    (see the property tests); ``invert`` achieves this with a growing
    inverted band of rows, so it stays an involution at fixed severity.
    """
    x = ds.images
    s = spec.severity - 1
    rng = Rng(spec.seed).derive("shift", spec.kind, spec.severity)
    if spec.kind == "gaussian_noise":
        out = np.clip(x + rng.normal(x.shape, std=_NOISE_STD[s]), 0.0, 1.0)
    elif spec.kind == "speckle":
        out = np.clip(x * (1.0 + rng.normal(x.shape, std=_SPECKLE_STD[s])), 0.0, 1.0)
    elif spec.kind == "contrast":
        out = 0.5 + _CONTRAST_FACTOR[s] * (x - 0.5)
    elif spec.kind == "brightness":
        out = np.clip(x + _BRIGHTNESS_OFFSET[s], 0.0, 1.0)
    elif spec.kind == "blur":
        out = _gaussian_blur(x, _BLUR_SIGMA[s])
    elif spec.kind == "pixelate":
        out = _pixelate(x, _PIXELATE_BLOCK[s])
    elif spec.kind == "invert":
        out = x.copy()
        rows = int(round(x.shape[2] * _INVERT_FRACTION[s]))
        out[:, :, :rows, :] = 1.0 - out[:, :, :rows, :]
    else:  # pragma: no cover - guarded by ShiftSpec
        raise ValueError(spec.kind)
    prov = Provenance("shifted", {"base": ds.name, "shift": spec.to_dict()})
    return DomainDataset(out, ds.labels.copy(), f"{ds.name}:{spec.name}",
                         ds.num_classes, prov)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _blur_axis(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (radius, radius)
    xp = np.pad(x, pad, mode="reflect")
    out = np.zeros_like(x)
    length = x.shape[axis]
    for i, kv in enumerate(kernel):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(i, i + length)
        out += kv * xp[tuple(sl)]
    return out


def _gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    k = _gaussian_kernel(sigma)
    return np.clip(_blur_axis(_blur_axis(x, k, 2), k, 3), 0.0, 1.0)


def _pixelate(x: np.ndarray, block: int) -> np.ndarray:
    n, c, h, w = x.shape
    hp = (h + block - 1) // block * block
    wp = (w + block - 1) // block * block
    xp = np.pad(x, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)), mode="edge")
    blocks = xp.reshape(n, c, hp // block, block, wp // block, block).mean(axis=(3, 5))
    coarse = np.repeat(np.repeat(blocks, block, axis=2), block, axis=3)
    return coarse[:, :, :h, :w]


def benchmark_suite(seed: int = 0) -> list[ShiftSpec]:
    """Default evaluation grid: every family at severities 1..5, except
    invert, which is only meaningful at full strength (severity 5) where it
    flips the whole image."""
    specs = []
    for kind in SHIFT_KINDS:
        sevs = (5,) if kind == "invert" else (1, 2, 3, 4, 5)
        for sv in sevs:
            specs.append(ShiftSpec(kind=kind, severity=sv, seed=seed))
    return specs


# -- IDX container -------------------------------------------------------------------


def load_idx(images_path, labels_path, limit: Optional[int] = None,
             num_classes: Optional[int] = None, name: Optional[str] = None) -> DomainDataset:
    """Read a big-endian IDX image/label pair into a dataset.

    Validates both magics, dimension counts, and exact payload lengths;
    truncated or oversized files raise FormatError naming the offender.
    ``limit`` keeps only the first ``limit`` items (after validating the
    full container).
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    raw = images_path.read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{images_path}: too short for an IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{images_path}: bad magic {magic:#010x}, want {IMAGE_MAGIC:#010x}")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{images_path}: payload is {len(raw)} bytes, want {expected}")
    lraw = labels_path.read_bytes()
    if len(lraw) < 8:
        raise FormatError(f"{labels_path}: too short for an IDX label header")
    lmagic, lcount = struct.unpack(">II", lraw[:8])
    if lmagic != LABEL_MAGIC:
        raise FormatError(f"{labels_path}: bad magic {lmagic:#010x}, want {LABEL_MAGIC:#010x}")
    if len(lraw) != 8 + lcount:
        raise FormatError(f"{labels_path}: payload is {len(lraw)} bytes, want {8 + lcount}")
    if lcount != count:
        raise FormatError(f"image count {count} != label count {lcount}")

    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, 1, rows, cols)
    labels = np.frombuffer(lraw, dtype=np.uint8, offset=8).astype(np.int64)
    if limit is not None:
        if limit < 1:
            raise ValueError(f"limit must be >= 1, got {limit}")
        pixels, labels = pixels[:limit], labels[:limit]
    m = num_classes if num_classes is not None else (int(labels.max()) + 1 if labels.size else 1)
    prov = Provenance("idx", {"images": str(images_path), "labels": str(labels_path)})
    return DomainDataset(pixels.astype(np.float64) / 255.0, labels,
                         name or images_path.stem, m, prov)


def save_idx(ds: DomainDataset, images_path, labels_path,
             manifest: bool = True) -> None:
    """Write a dataset as an IDX pair (plus a small JSON manifest).

    Images are quantized to uint8 by rounding; a load after save reproduces
    pixel values to within half a quantization step (1/510) and a dataset
    that came from an IDX file round-trips byte-exactly.
    """
    if ds.images.shape[1] != 1:
        raise ValueError(f"IDX stores single-channel images, got {ds.images.shape[1]} channels")
    images_path, labels_path = Path(images_path), Path(labels_path)
    n, _, rows, cols = ds.images.shape
    if ds.labels.size and (ds.labels.min() < 0 or ds.labels.max() > 255):
        raise ValueError("IDX labels must fit in a byte")
    quantized = np.round(ds.images[:, 0] * 255.0).astype(np.uint8)
    images_path.parent.mkdir(parents=True, exist_ok=True)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(quantized.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())
    if manifest:
        meta = {"name": ds.name, "count": n, "rows": rows, "cols": cols,
                "num_classes": ds.num_classes,
                "provenance": {"kind": ds.provenance.kind, "detail": ds.provenance.detail}}
        Path(str(images_path) + ".manifest.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True))


def save_pgm_grid(images: np.ndarray, path, cols: int = 8, gap: int = 2) -> None:
    """Tile images into one binary PGM (P5) contact sheet.

    Multi-channel images are collapsed to grayscale by channel mean.  Raises
    on an empty batch: an empty contact sheet is always a caller bug.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError(f"need a nonempty (N, C, H, W) batch, got {images.shape}")
    n, _, h, w = images.shape
    gray = images.mean(axis=1)
    cols = max(1, min(cols, n))
    rows = (n + cols - 1) // cols
    sheet = np.zeros((rows * h + gap * (rows - 1), cols * w + gap * (cols - 1)))
    for i in range(n):
        r, c = divmod(i, cols)
        sheet[r * (h + gap): r * (h + gap) + h, c * (w + gap): c * (w + gap) + w] = gray[i]
    data = np.round(np.clip(sheet, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def few_shot_index(ds: DomainDataset, shots: int, rng: Rng) -> np.ndarray:
    """Indices of ``shots`` examples per class, sampled without replacement.

    Raises if any class has fewer than ``shots`` examples; a silent short
    class would make few-shot comparisons incomparable across domains.
    """
    if shots < 1:
        raise ValueError(f"shots must be >= 1, got {shots}")
    chosen = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size < shots:
            raise ValueError(f"class {c} has {idx.size} examples, need {shots}")
        perm = rng.derive("class", c).permutation(idx.size)[:shots]
        chosen.append(idx[perm])
    return np.concatenate(chosen)


def few_shot_subset(ds: DomainDataset, shots: int, rng: Rng) -> DomainDataset:
    """``shots`` examples per class, as a dataset; see ``few_shot_index``."""
    index = few_shot_index(ds, shots, rng)
    return ds.subset(index, name=f"{ds.name}:{shots}shot")
