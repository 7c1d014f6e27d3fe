"""Datasets: procedurally rendered shapes and IDX files."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .resize import resize_image

SHAPES = ("disk", "square", "triangle", "cross")
SUPERSAMPLE = 4


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticShapesSpec:
    num_classes: int = 4
    samples_per_class: int = 100
    resolution_range: tuple[int, int] = (32, 32)
    background: tuple[float, float] = (0.0, 0.4)
    foreground: tuple[float, float] = (0.6, 1.0)
    position_jitter: float = 0.15
    scale_range: tuple[float, float] = (0.1, 0.25)
    noise_std: float = 0.05
    min_resolution: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in 1..{len(SHAPES)}")
        lo, hi = self.resolution_range
        if lo < self.min_resolution or hi < lo:
            raise ValueError(
                f"resolution range {self.resolution_range} must lie at or above {self.min_resolution}"
            )
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")


@dataclass(frozen=True)
class ShapeSample:
    label: int
    cx: float
    cy: float
    radius: float
    angle: float
    fg: float
    bg: float
    noise_key: int


def _inside(label, x, y, r):
    shape = SHAPES[label]
    if shape == "disk":
        return x * x + y * y <= r * r
    if shape == "square":
        s = r * 0.8
        return (np.abs(x) <= s) & (np.abs(y) <= s)
    if shape == "triangle":
        # equilateral, circumradius r, apex up
        c30 = np.sqrt(3.0) / 2.0
        return (y <= r * 0.5) & (c30 * x - 0.5 * y <= r * 0.5) & (-c30 * x - 0.5 * y <= r * 0.5)
    arm = r * 0.3
    return ((np.abs(x) <= r) & (np.abs(y) <= arm)) | ((np.abs(y) <= r) & (np.abs(x) <= arm))


def render(sample: ShapeSample, h: int, w: int, noise_std: float = 0.0) -> np.ndarray:
    """Render one sample natively at (h, w) with area-averaged edges. Shape
    geometry is in unit coordinates, so any resolution shows the same scene."""
    s = SUPERSAMPLE
    ys = (np.arange(h * s) + 0.5) / (h * s)
    xs = (np.arange(w * s) + 0.5) / (w * s)
    gx, gy = np.meshgrid(xs - sample.cx, ys - sample.cy)
    ca, sa = np.cos(sample.angle), np.sin(sample.angle)
    lx = ca * gx + sa * gy
    ly = -sa * gx + ca * gy
    mask = _inside(sample.label, lx, ly, sample.radius).astype(np.float64)
    cover = mask.reshape(h, s, w, s).mean(axis=(1, 3))
    img = sample.bg + (sample.fg - sample.bg) * cover
    if noise_std > 0:
        rng = np.random.default_rng((sample.noise_key, h, w))
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return img[:, :, None].astype(np.float32)


@dataclass
class Dataset:
    """Images (each h x w x C, float32) with integer labels.

    Rendered datasets keep their scene parameters so ``at_resolution`` can
    redraw every image natively; loaded datasets are bilinearly resized.
    """

    images: list
    labels: np.ndarray
    samples: list | None = None
    noise_std: float = 0.0
    name: str = "dataset"
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.images[0].shape[2]

    def at_resolution(self, resolution) -> np.ndarray:
        """All images as one (B, h, w, C) float32 array at ``resolution``."""
        h, w = (resolution, resolution) if np.isscalar(resolution) else tuple(resolution)
        key = (h, w)
        if key not in self._cache:
            if self.samples is not None:
                arr = np.stack([render(s, h, w, self.noise_std) for s in self.samples])
            else:
                arr = np.stack([
                    img if img.shape[:2] == (h, w) else resize_image(img.astype(np.float64), (h, w))
                    for img in self.images
                ]).astype(np.float32)
            arr.setflags(write=False)
            self._cache[key] = arr
        return self._cache[key]

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset([self.images[i] for i in idx], self.labels[idx],
                       None if self.samples is None else [self.samples[i] for i in idx],
                       self.noise_std, self.name)


def generate_synthetic(spec: SyntheticShapesSpec) -> Dataset:
    """Balanced shapes dataset, each image rendered at its own resolution
    drawn from ``spec.resolution_range``. Deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    n = spec.num_classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    labels = labels[rng.permutation(n)]
    lo, hi = spec.resolution_range
    samples, images = [], []
    j = spec.position_jitter
    for i, lab in enumerate(labels):
        s = ShapeSample(
            label=int(lab),
            cx=0.5 + rng.uniform(-j, j),
            cy=0.5 + rng.uniform(-j, j),
            radius=rng.uniform(*spec.scale_range),
            angle=rng.uniform(-np.pi / 12, np.pi / 12),
            fg=rng.uniform(*spec.foreground),
            bg=rng.uniform(*spec.background),
            noise_key=int(spec.seed) * 1_000_003 + i,
        )
        res = int(rng.integers(lo, hi + 1))
        samples.append(s)
        images.append(render(s, res, res, spec.noise_std))
    return Dataset(images, labels.astype(np.int64), samples, spec.noise_std, name=f"shapes-seed{spec.seed}")


# IDX: magic = 0x00 0x00 <type> <ndim>, then ndim big-endian u32 dims, then data
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in _IDX_TYPES.items()}


def read_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise FormatError(f"{path}: bad IDX magic {raw[:4].hex()} at byte offset 0")
    dtype, ndim = _IDX_TYPES[raw[2]], raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension list at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload at byte offset {len(raw)}, expected {need} bytes")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    atomic_write(path, header + array.astype(_IDX_TYPES[code]).tobytes())


def load_idx(images_path, labels_path=None) -> Dataset:
    """Images become h x w x C float32 (uint8 scaled by 1/255); labels int64."""
    imgs = read_idx(images_path)
    if imgs.ndim == 3:
        imgs = imgs[..., None]
    elif imgs.ndim != 4:
        raise FormatError(f"{images_path}: expected 3 or 4 dims, got {imgs.ndim}")
    if imgs.dtype == np.uint8:
        imgs = imgs.astype(np.float32) / 255.0
    else:
        imgs = imgs.astype(np.float32)
    if labels_path is None:
        labels = np.zeros(len(imgs), dtype=np.int64)
    else:
        labels = read_idx(labels_path).astype(np.int64).reshape(-1)
        if len(labels) != len(imgs):
            raise FormatError(f"{labels_path}: {len(labels)} labels for {len(imgs)} images")
    return Dataset(list(imgs), labels, name=os.path.basename(str(images_path)))


def save_idx_dataset(dataset: Dataset, images_path, labels_path, resolution) -> None:
    """Write ``dataset`` at one resolution as uint8 images + uint8 labels."""
    arr = dataset.at_resolution(resolution)
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if q.shape[-1] == 1:
        q = q[..., 0]
    write_idx(images_path, q)
    write_idx(labels_path, dataset.labels.astype(np.uint8))


def atomic_write(path, data: bytes | str) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        # mkstemp creates 0600; give the file the usual umask-derived mode
        mask = os.umask(0)
        os.umask(mask)
        os.chmod(tmp, 0o666 & ~mask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
