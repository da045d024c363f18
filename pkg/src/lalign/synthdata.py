"""Deterministic synthetic images with exact per-pixel class labels.

Each image is a background canvas overpainted with class-textured
rectangles. Classes are distinguishable by color and stripe frequency,
and a configurable fraction of patches is occluded (texture replaced by
gray noise) while keeping its label, so recovering patch labels requires
context rather than just reading pixels.

On-disk format ("LADS"): little-endian; magic "LADS", format version u32,
length-prefixed spec JSON, sample count u64; then per sample the image as
patch-major float32 pixels and the per-pixel labels as uint16.
"""

from __future__ import annotations

import colorsys
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .probing import PatchLabelSet, build_patch_labels

MAGIC = b"LADS"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SynthSpec:
    grid_rows: int = 8
    grid_cols: int = 8
    patch_size: int = 4
    num_classes: int = 16
    classes_min: int = 2
    classes_max: int = 5
    background_class: int = 0
    occlusion_rate: float = 0.25
    channels: int = 3
    texture_noise: float = 0.05

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not (1 <= self.classes_min <= self.classes_max <= self.num_classes - 1):
            raise ValueError("classes_per_image range must fit the non-background classes")
        if not (0.0 <= self.occlusion_rate <= 1.0):
            raise ValueError("occlusion_rate must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.grid_rows * self.patch_size

    @property
    def width(self) -> int:
        return self.grid_cols * self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass
class SynthSample:
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    pixel_labels: np.ndarray  # (H, W) uint16
    labels: PatchLabelSet


@dataclass
class SynthDataset:
    spec: SynthSpec
    samples: list[SynthSample]

    def __len__(self):
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def local_labels(self) -> np.ndarray:
        return np.stack([s.labels.local for s in self.samples])

    def global_labels(self) -> np.ndarray:
        return np.stack([s.labels.global_ for s in self.samples])

    def pixel_label_maps(self) -> np.ndarray:
        return np.stack([s.pixel_labels for s in self.samples])

    def slice(self, start: int, stop: int) -> "SynthDataset":
        return SynthDataset(self.spec, self.samples[start:stop])


def channel_means(dataset: SynthDataset) -> np.ndarray:
    return dataset.images().mean(axis=(0, 1, 2))


# -- rendering --------------------------------------------------------------


def class_texture(cls: int, spec: SynthSpec, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Deterministic texture for a class at the given pixel coordinates:
    a fixed base color plus oriented stripes whose frequency and phase
    depend on the class id. Values are centered near zero so the dataset
    mean is approximately the zero pixel."""
    if cls == spec.background_class:
        base = np.zeros(3)
        freq, theta, phase = 0.0, 0.0, 0.0
    else:
        hue = (cls * 0.61803398875) % 1.0
        base = np.array(colorsys.hsv_to_rgb(hue, 0.9, 1.0)) - 0.5
        freq = 1.0 + (cls % 4)
        theta = ((cls // 4) % 4) * np.pi / 4.0
        phase = 0.7 * cls
    wave = np.sin(
        2.0 * np.pi * freq * (xs * np.cos(theta) + ys * np.sin(theta)) / spec.patch_size + phase
    )
    out = base[None, :] + 0.25 * wave[:, None]
    return out


def render_image(pixel_labels: np.ndarray, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = pixel_labels.shape
    ys, xs = np.mgrid[0:h, 0:w]
    image = np.zeros((h, w, spec.channels), dtype=np.float64)
    for cls in np.unique(pixel_labels):
        sel = pixel_labels == cls
        image[sel] = class_texture(int(cls), spec, ys[sel].astype(float), xs[sel].astype(float))
    image += rng.normal(0.0, spec.texture_noise, size=image.shape)

    # Occlude whole patches: gray noise in the pixels, labels untouched.
    if spec.occlusion_rate > 0:
        occluded = rng.random(spec.n_patches) < spec.occlusion_rate
        p = spec.patch_size
        for idx in np.nonzero(occluded)[0]:
            r, c = divmod(int(idx), spec.grid_cols)
            block = rng.normal(0.0, 0.15, size=(p, p, spec.channels))
            image[r * p : (r + 1) * p, c * p : (c + 1) * p, :] = block
    return np.clip(image, -1.0, 1.0).astype(np.float32)


def sample_pixel_labels(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Background canvas overpainted with one rectangle per sampled class;
    classes erased entirely by later rectangles are re-stamped so every
    sampled class stays present."""
    h, w, p = spec.height, spec.width, spec.patch_size
    labels = np.full((h, w), spec.background_class, dtype=np.uint16)
    k = int(rng.integers(spec.classes_min, spec.classes_max + 1))
    choices = [c for c in range(spec.num_classes) if c != spec.background_class]
    classes = rng.choice(choices, size=k, replace=False)

    def paint(cls, min_side, max_side):
        rh = int(rng.integers(min_side, max_side + 1))
        rw = int(rng.integers(min_side, max_side + 1))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        labels[top : top + rh, left : left + rw] = cls

    for cls in classes:
        paint(cls, p, max(p, h // 2))
    for _ in range(100):
        missing = [c for c in classes if not (labels == c).any()]
        if not missing:
            break
        for cls in missing:
            paint(cls, p, p)
    return labels


def generate_sample(spec: SynthSpec, seed: int, index: int) -> SynthSample:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
    pixel_labels = sample_pixel_labels(spec, rng)
    image = render_image(pixel_labels, spec, rng)
    labels = build_patch_labels(pixel_labels, (spec.grid_rows, spec.grid_cols), spec.num_classes)
    return SynthSample(image=image, pixel_labels=pixel_labels, labels=labels)


def gen_dataset(spec: SynthSpec, count: int, seed: int) -> SynthDataset:
    """Deterministic dataset: sample i depends only on (spec, seed, i)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return SynthDataset(spec, [generate_sample(spec, seed, i) for i in range(count)])


# -- resizing and cropping ---------------------------------------------------


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers; exact when sizes match."""
    h, w = image.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out.astype(image.dtype, copy=False)


def nearest_resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = labels.shape
    ys = np.minimum((np.arange(out_h) + 0.5) * h // out_h, h - 1).astype(int)
    xs = np.minimum((np.arange(out_w) + 0.5) * w // out_w, w - 1).astype(int)
    return labels[ys][:, xs]


def random_crop_resize(
    image: np.ndarray,
    labels: np.ndarray | None,
    scale_range: tuple[float, float],
    rng: np.random.Generator,
):
    """Crop a square window of area fraction drawn from scale_range, then
    resize back to the input resolution (bilinear pixels, nearest labels)."""
    lo, hi = scale_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError("scale_range must satisfy 0 < lo <= hi <= 1")
    h, w = image.shape[:2]
    area = rng.uniform(lo, hi)
    side_h = max(1, round(h * np.sqrt(area)))
    side_w = max(1, round(w * np.sqrt(area)))
    top = int(rng.integers(0, h - side_h + 1))
    left = int(rng.integers(0, w - side_w + 1))
    crop = image[top : top + side_h, left : left + side_w]
    out_image = crop if (side_h, side_w) == (h, w) else bilinear_resize(crop, h, w)
    if labels is None:
        return out_image, None
    lab_crop = labels[top : top + side_h, left : left + side_w]
    out_labels = lab_crop if (side_h, side_w) == (h, w) else nearest_resize_labels(lab_crop, h, w)
    return out_image, out_labels


# -- on-disk format -----------------------------------------------------------


def _patch_major(image: np.ndarray, spec: SynthSpec) -> np.ndarray:
    p = spec.patch_size
    return (
        image.reshape(spec.grid_rows, p, spec.grid_cols, p, spec.channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(spec.n_patches, p * p * spec.channels)
    )


def _from_patch_major(patches: np.ndarray, spec: SynthSpec) -> np.ndarray:
    p = spec.patch_size
    return (
        patches.reshape(spec.grid_rows, spec.grid_cols, p, p, spec.channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(spec.height, spec.width, spec.channels)
    )


def save_dataset(dataset: SynthDataset, path) -> None:
    spec_json = json.dumps(asdict(dataset.spec), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(spec_json)))
        f.write(spec_json)
        f.write(struct.pack("<Q", len(dataset.samples)))
        for s in dataset.samples:
            f.write(_patch_major(s.image, dataset.spec).astype("<f4").tobytes())
            f.write(s.pixel_labels.astype("<u2").tobytes())


def load_dataset(path) -> SynthDataset:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset format version {version}")
    (spec_len,) = struct.unpack_from("<I", data, 8)
    off = 12
    spec = SynthSpec(**json.loads(data[off : off + spec_len].decode()))
    off += spec_len
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    img_bytes = spec.n_patches * spec.patch_size**2 * spec.channels * 4
    lab_bytes = spec.height * spec.width * 2
    samples = []
    for _ in range(count):
        if off + img_bytes + lab_bytes > len(data):
            raise ValueError(f"{path}: truncated dataset file")
        patches = np.frombuffer(data, dtype="<f4", count=img_bytes // 4, offset=off)
        off += img_bytes
        image = _from_patch_major(
            patches.reshape(spec.n_patches, -1).copy(), spec
        ).astype(np.float32)
        pixel_labels = (
            np.frombuffer(data, dtype="<u2", count=lab_bytes // 2, offset=off)
            .reshape(spec.height, spec.width)
            .copy()
        )
        off += lab_bytes
        labels = build_patch_labels(pixel_labels, (spec.grid_rows, spec.grid_cols), spec.num_classes)
        samples.append(SynthSample(image=image, pixel_labels=pixel_labels, labels=labels))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after last sample")
    return SynthDataset(spec, samples)
