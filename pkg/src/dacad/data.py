"""Datasets: synthetic domain-shift pairs, IDX image files, resize and augmentation."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class IDXFormatError(ValueError):
    pass


@dataclass
class UnlabeledDataset:
    x: np.ndarray                            # (n, d) float64
    image_shape: tuple[int, int] | None = None

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray                            # (n,) int64
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError(f"x {self.x.shape} and y {self.y.shape} are inconsistent")

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def unlabeled(self) -> UnlabeledDataset:
        """Strip labels; training on the target side only ever sees this."""
        return UnlabeledDataset(self.x, self.image_shape)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.x[idx], self.y[idx], self.image_shape)


@dataclass
class DomainPair:
    source: LabeledDataset
    target: LabeledDataset   # labels are for evaluation only
    shift: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source.dim != self.target.dim:
            raise ValueError(f"feature dims differ: {self.source.dim} vs {self.target.dim}")

    @property
    def num_classes(self) -> int:
        return int(max(self.source.y.max(), self.target.y.max())) + 1


def _rotation(d: int, angle_deg: float) -> np.ndarray:
    """Rotation of the (x0, x1) plane by ``angle_deg``, identity elsewhere."""
    th = np.deg2rad(angle_deg)
    R = np.eye(d)
    R[:2, :2] = [[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]
    return R


def gen_gaussian_shift(n_per_class: int, k: int, d: int, angle: float, seed: int,
                       radius: float = 4.0, std: float = 1.0) -> DomainPair:
    """k isotropic blobs evenly spaced on a circle in the first two coordinates.

    The target draws fresh noise around the same centers rotated by ``angle``
    degrees about the origin.
    """
    if k < 2 or d < 2 or n_per_class < 1 or std <= 0 or radius <= 0:
        raise ValueError(f"degenerate parameters: k={k} d={d} n={n_per_class} "
                         f"radius={radius} std={std}")
    rng = np.random.default_rng(seed)
    phis = 2 * np.pi * np.arange(k) / k
    centers = np.zeros((k, d))
    centers[:, 0] = radius * np.cos(phis)
    centers[:, 1] = radius * np.sin(phis)
    y = np.repeat(np.arange(k), n_per_class)

    xs = centers[y] + std * rng.standard_normal((y.size, d))
    xt = (centers[y] + std * rng.standard_normal((y.size, d))) @ _rotation(d, angle).T
    shift = dict(generator="gaussian_shift", n_per_class=n_per_class, k=k, d=d, angle=angle,
                 radius=radius, std=std, seed=seed)
    return DomainPair(LabeledDataset(xs, y), LabeledDataset(xt, y.copy()), shift)


def _moons(n: int, noise: float, rng) -> tuple[np.ndarray, np.ndarray]:
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0, np.pi, n0)
    t1 = rng.uniform(0, np.pi, n1)
    upper = np.c_[np.cos(t0), np.sin(t0)]
    lower = np.c_[1 - np.cos(t1), 0.5 - np.sin(t1)]
    x = np.vstack([upper, lower]) + noise * rng.standard_normal((n, 2))
    y = np.r_[np.zeros(n0, np.int64), np.ones(n1, np.int64)]
    return x, y


def gen_two_moons_shift(n: int, rotation: float, translation=(0.0, 0.0), seed: int = 0,
                        noise: float = 0.1, center=(0.0, 0.0)) -> DomainPair:
    """Two interleaved half circles; the target is rotated (degrees) about
    `center` (the origin by default) and then translated."""
    if n < 10:
        raise ValueError(f"need n >= 10, got {n}")
    rng = np.random.default_rng(seed)
    xs, ys = _moons(n, noise, rng)
    xt, yt = _moons(n, noise, rng)
    center = np.asarray(center, float)
    xt = (xt - center) @ _rotation(2, rotation).T + center + np.asarray(translation, float)
    shift = dict(generator="two_moons_shift", n=n, rotation=rotation,
                 translation=list(map(float, translation)), noise=noise, seed=seed,
                 center=list(map(float, center)))
    return DomainPair(LabeledDataset(xs, ys), LabeledDataset(xt, yt), shift)


GENERATORS = {
    "gaussian_shift": gen_gaussian_shift,
    "two_moons_shift": gen_two_moons_shift,
}


def generate(name: str, seed: int, **params) -> DomainPair:
    try:
        fn = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}") from None
    if "translation" in params:
        params["translation"] = tuple(params["translation"])
    return fn(seed=seed, **params)


# -- CSV ----------------------------------------------------------------------

def write_csv(dataset: LabeledDataset, path) -> None:
    d = dataset.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *(f"x{i}" for i in range(d))])
        for label, row in zip(dataset.y, dataset.x):
            w.writerow([int(label), *(repr(float(v)) for v in row)])


def read_csv(path) -> LabeledDataset | UnlabeledDataset:
    """Read a sample CSV. A ``label`` column makes the result labeled.

    Files without a header are read as bare numeric rows.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = None
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        header, rows = [h.strip() for h in rows[0]], rows[1:]
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ValueError(f"{path}: ragged rows (widths {sorted(widths)})")
    data = np.array(rows, dtype=np.float64).reshape(len(rows), -1)
    if header is not None and "label" in header:
        j = header.index("label")
        y = data[:, j]
        if np.any(y != np.round(y)) or np.any(y < 0):
            raise ValueError(f"{path}: labels must be non-negative integers")
        return LabeledDataset(np.delete(data, j, axis=1), y.astype(np.int64))
    return UnlabeledDataset(data)


# -- IDX ----------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IDXFormatError(f"{path}: file too short for a header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise IDXFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    count = int(np.prod(dims))
    if len(raw) - hdr != count:
        raise IDXFormatError(f"{path}: payload has {len(raw) - hdr} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=hdr).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    """(n, rows, cols) uint8 array."""
    return _read_idx(path, IDX_IMAGES_MAGIC, 3)


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(path, IDX_LABELS_MAGIC, 1)


def write_idx_images(images: np.ndarray, path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, r, c = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c) + images.tobytes())


def write_idx_labels(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Images scaled to [0, 1] and flattened row-major; ``image_shape`` keeps the grid."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, r, c = images.shape
    return LabeledDataset(images.reshape(n, r * c) / 255.0, labels.astype(np.int64), (r, c))


# -- preprocessing --------------------------------------------------------------

def to_grayscale(images: np.ndarray) -> np.ndarray:
    """(n, h, w, 3) RGB to (n, h, w) luma; 3D input passes through."""
    if images.ndim == 4:
        return images[..., :3] @ np.array([0.299, 0.587, 0.114])
    return images


def pad_to_square(images: np.ndarray) -> np.ndarray:
    n, h, w = images.shape
    s = max(h, w)
    if h == w:
        return images
    out = np.zeros((n, s, s), dtype=images.dtype)
    top, left = (s - h) // 2, (s - w) // 2
    out[:, top:top + h, left:left + w] = images
    return out


def resize_bilinear(images: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of (n, h, w) images to (n, size, size), pixel-center aligned."""
    n, h, w = images.shape

    def axis_weights(src, dst):
        pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
        pos = np.clip(pos, 0, src - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis_weights(h, size)
    c0, c1, fc = axis_weights(w, size)
    top = images[:, r0][:, :, c0] * (1 - fc) + images[:, r0][:, :, c1] * fc
    bot = images[:, r1][:, :, c0] * (1 - fc) + images[:, r1][:, :, c1] * fc
    return top * (1 - fr)[None, :, None] + bot * fr[None, :, None]


def preprocess(dataset: LabeledDataset, target_size: int = 32, subset_n: int | None = None,
               seed: int = 0) -> LabeledDataset:
    """Optional seeded subsample, then grayscale, pad to square and resize."""
    if dataset.image_shape is None:
        raise ValueError("preprocess needs image data (image_shape is unset)")
    idx = np.arange(len(dataset))
    if subset_n is not None:
        if subset_n > len(dataset):
            raise ValueError(f"subset_n={subset_n} exceeds dataset size {len(dataset)}")
        idx = np.sort(np.random.default_rng(seed).choice(len(dataset), subset_n, replace=False))
    images = dataset.x[idx].reshape(len(idx), *dataset.image_shape)
    images = pad_to_square(to_grayscale(images))
    if images.shape[1] != target_size:
        images = resize_bilinear(images, target_size)
    images = np.clip(images, 0.0, 1.0)
    return LabeledDataset(images.reshape(len(idx), -1), dataset.y[idx].copy(),
                          (target_size, target_size))


# -- augmentation ---------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    translation: float = 0.0     # max shift in pixels
    rotation: float = 0.0        # max angle in degrees
    skew: float = 0.0            # max shear factor
    zoom: float = 0.0            # max relative scale change
    gaussian_sigma: float = 0.0
    binomial_p: float = 0.0      # per-pixel probability of flipping to 0 or 1
    invert_p: float = 0.0        # per-image probability of x -> 1 - x

    def __post_init__(self):
        for name, val in vars(self).items():
            if val < 0:
                raise ValueError(f"augment.{name} must be non-negative, got {val}")
        for name in ("binomial_p", "invert_p"):
            if getattr(self, name) > 1:
                raise ValueError(f"augment.{name} is a probability, got {getattr(self, name)}")
        if self.zoom >= 1:
            raise ValueError(f"augment.zoom must be < 1, got {self.zoom}")

    @property
    def geometric(self) -> bool:
        return any((self.translation, self.rotation, self.skew, self.zoom))


# defaults for interactive use: +-2 px, +-15 degrees, sigma 0.1
DEFAULT_AUGMENT = AugmentConfig(translation=2.0, rotation=15.0, skew=0.1, zoom=0.1,
                                gaussian_sigma=0.1, binomial_p=0.0, invert_p=0.0)


def _random_affine(image: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    th = np.deg2rad(rng.uniform(-cfg.rotation, cfg.rotation))
    shear = rng.uniform(-cfg.skew, cfg.skew)
    scale = 1.0 + rng.uniform(-cfg.zoom, cfg.zoom)
    shift = rng.uniform(-cfg.translation, cfg.translation, size=2)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    fwd = scale * rot @ np.array([[1.0, shear], [0.0, 1.0]])
    inv = np.linalg.inv(fwd)
    center = (np.array(image.shape) - 1) / 2.0
    # output pixel o samples input at inv @ (o - center - shift) + center
    offset = center - inv @ (center + shift)
    return ndimage.affine_transform(image, inv, offset=offset, order=1, mode="constant", cval=0.0)


def augment(batch: np.ndarray, cfg: AugmentConfig, seed: int,
            image_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Independently transformed copy of an image batch, clamped to [0, 1].

    ``batch`` is (n, h, w), or (n, h*w) together with ``image_shape``.
    """
    batch = np.asarray(batch, dtype=np.float64)
    flat = batch.ndim == 2
    if flat:
        if image_shape is None or int(np.prod(image_shape)) != batch.shape[1]:
            raise ValueError(f"cannot view rows of width {batch.shape[1]} as images "
                             f"of shape {image_shape}")
        images = batch.reshape(batch.shape[0], *image_shape)
    elif batch.ndim == 3:
        images = batch
    else:
        raise ValueError(f"augment expects image batches, got shape {batch.shape}")

    rng = np.random.default_rng(seed)
    out = images.copy()
    for i in range(out.shape[0]):
        img = out[i]
        if cfg.geometric:
            img = _random_affine(img, cfg, rng)
        if cfg.gaussian_sigma > 0:
            img = img + cfg.gaussian_sigma * rng.standard_normal(img.shape)
        if cfg.binomial_p > 0:
            hit = rng.random(img.shape) < cfg.binomial_p
            img = np.where(hit, (rng.random(img.shape) < 0.5).astype(np.float64), img)
        if cfg.invert_p > 0 and rng.random() < cfg.invert_p:
            img = 1.0 - img
        out[i] = img
    np.clip(out, 0.0, 1.0, out=out)
    return out.reshape(batch.shape) if flat else out
