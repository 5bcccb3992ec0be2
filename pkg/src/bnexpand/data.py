"""Datasets: MNIST IDX ingestion, permuted tasks, synthetic domain pairs, splits."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


@dataclass(frozen=True)
class LabeledDataset:
    """Images in [0, 1] (N x C x H x W or N x D) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: str = ""
    groups: np.ndarray | None = None

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.shape[0] != labels.shape[0]:
            raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if images.size and (images.min() < 0 or images.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        if self.groups is not None:
            groups = np.asarray(self.groups)
            if groups.shape[0] != labels.shape[0]:
                raise ValueError("one group id per sample required")
            object.__setattr__(self, "groups", groups)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        groups = None if self.groups is None else self.groups[index]
        return LabeledDataset(self.images[index], self.labels[index], self.class_count,
                              self.provenance, groups)

    def flat(self) -> "LabeledDataset":
        return replace(self, images=self.images.reshape(len(self), -1))


def concatenate(*parts: LabeledDataset, provenance: str = "") -> LabeledDataset:
    images = np.concatenate([p.images for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    k = max(p.class_count for p in parts)
    return LabeledDataset(images, labels, k, provenance or "+".join(p.provenance for p in parts))


# ---------------------------------------------------------------------------
# MNIST IDX

def _read_bytes(path) -> bytes:
    path = Path(path)
    with (gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")) as fh:
        return fh.read()


def load_mnist_idx(images_path, labels_path) -> LabeledDataset:
    """Read an IDX image/label file pair (optionally gzipped) as N x 1 x H x W in [0, 1]."""
    raw = _read_bytes(images_path)
    if len(raw) >= 4 and struct.unpack(">I", raw[:4])[0] != IMAGE_MAGIC:
        raise ValueError(f"bad image magic {struct.unpack('>I', raw[:4])[0]}, "
                         f"expected {IMAGE_MAGIC}")
    if len(raw) < 16:
        raise ValueError("image file truncated in header")
    _, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if len(raw) - 16 < n * rows * cols:
        raise ValueError(f"image file truncated: need {n * rows * cols} pixel bytes, "
                         f"have {len(raw) - 16}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)

    lraw = _read_bytes(labels_path)
    if len(lraw) < 8:
        raise ValueError("label file truncated in header")
    lmagic, ln = struct.unpack(">II", lraw[:8])
    if lmagic != LABEL_MAGIC:
        raise ValueError(f"bad label magic {lmagic}, expected {LABEL_MAGIC}")
    if len(lraw) - 8 < ln:
        raise ValueError("label file truncated")
    if ln != n:
        raise ValueError(f"{n} images but {ln} labels")
    labels = np.frombuffer(lraw, dtype=np.uint8, count=ln, offset=8)
    images = (pixels.astype(np.float32) / 255.0).reshape(n, 1, rows, cols)
    return LabeledDataset(images, labels, 10, f"mnist:{Path(images_path).name}")


def write_mnist_idx(images_u8: np.ndarray, labels_u8: np.ndarray, images_path,
                    labels_path) -> None:
    """Write uint8 N x H x W images and N labels as an IDX pair (gzipped for ``.gz``)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    img = struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images_u8.tobytes()
    lab = struct.pack(">II", LABEL_MAGIC, labels_u8.shape[0]) + labels_u8.tobytes()
    for path, blob in ((images_path, img), (labels_path, lab)):
        path = Path(path)
        if path.suffix == ".gz":
            with gzip.GzipFile(path, "wb", mtime=0) as fh:
                fh.write(blob)
        else:
            path.write_bytes(blob)


BUNDLED_MNIST = ("mnist10k-images-idx3-ubyte.gz", "mnist10k-labels-idx1-ubyte.gz")


def load_bundled_mnist() -> LabeledDataset:
    """The 10000-digit MNIST subset shipped with the package (see datasets/NOTICE)."""
    root = resources.files("bnexpand") / "datasets"
    with resources.as_file(root / BUNDLED_MNIST[0]) as ip, \
            resources.as_file(root / BUNDLED_MNIST[1]) as lp:
        ds = load_mnist_idx(ip, lp)
    return replace(ds, provenance="mnist10k")


# ---------------------------------------------------------------------------
# permuted tasks

@dataclass(frozen=True)
class PermutationTask:
    permutation: np.ndarray
    seed: int

    @classmethod
    def from_seed(cls, seed: int, size: int) -> "PermutationTask":
        if seed == 0:
            perm = np.arange(size)
        else:
            perm = np.random.default_rng(seed).permutation(size)
        return cls(perm, seed)

    def apply(self, flat: np.ndarray) -> np.ndarray:
        return flat[..., self.permutation]

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.permutation.size)
        return inv


def make_permuted_task(base: LabeledDataset, seed: int) -> LabeledDataset:
    """Apply one pixel permutation to every image; seed 0 is the identity."""
    n = len(base)
    flat = base.images.reshape(n, -1)
    task = PermutationTask.from_seed(seed, flat.shape[1])
    images = task.apply(flat).reshape(base.images.shape)
    return LabeledDataset(images, base.labels, base.class_count,
                          f"{base.provenance}|perm:{seed}", base.groups)


# ---------------------------------------------------------------------------
# synthetic domain pairs

@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Intensity transform ``clip(gain * x + offset + noise)`` emulating a scanner shift."""

    gain: float = 1.0
    offset: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def apply(self, images: np.ndarray) -> np.ndarray:
        out = self.gain * images.astype(np.float64) + self.offset
        if self.noise_sigma > 0:
            rng = np.random.default_rng([self.seed, 0x5CA7])
            out = out + rng.normal(0.0, self.noise_sigma, size=images.shape)
        return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_base_images(n_per_class: int, class_count: int, image_size: int,
                       seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ordinal ring patterns, returned as (images, labels, group ids).

    Class ``k`` is a textured ring whose radius grows with ``k``, so classes
    are ordered and invariant to flips and rotations.  Each sample jitters
    the centre, radius, thickness, brightness, and texture phase.  Every
    four consecutive samples of a class share a group id, standing in for
    multi-view studies.
    """
    if n_per_class < 1 or class_count < 2 or image_size < 8:
        raise ValueError("degenerate synthetic task size")
    rng = np.random.default_rng(seed)
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    c = (s - 1) / 2.0
    images = np.empty((class_count * n_per_class, 1, s, s), dtype=np.float32)
    labels = np.repeat(np.arange(class_count), n_per_class)
    groups = np.empty_like(labels)
    r_lo, r_hi = 0.1 * s, 0.38 * s
    step = (r_hi - r_lo) / (class_count - 1)
    for k in range(class_count):
        for j in range(n_per_class):
            i = k * n_per_class + j
            cx, cy = c + rng.normal(0, s * 0.03, size=2)
            radius = r_lo + step * k + rng.normal(0, step * 0.3)
            width = rng.uniform(0.04, 0.07) * s
            amp = rng.uniform(0.6, 0.9)
            r = np.hypot(xx - cx, yy - cy)
            theta = np.arctan2(yy - cy, xx - cx)
            ring = np.exp(-(r - radius) ** 2 / (2 * width ** 2))
            texture = 0.7 + 0.3 * np.cos(6 * theta + rng.uniform(0, 2 * np.pi))
            img = amp * ring * texture + rng.uniform(0, 0.05, size=(s, s))
            images[i, 0] = np.clip(img, 0, 1)
            groups[i] = k * ((n_per_class + 3) // 4) + j // 4
    return images, labels, groups


def make_synthetic_domain_pair(n_per_class: int, class_count: int, image_size: int,
                               spec_o: SyntheticDomainSpec, spec_t: SyntheticDomainSpec,
                               seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Two datasets rendered from the same base images, differing only in intensity transform."""
    base, labels, groups = render_base_images(n_per_class, class_count, image_size, seed)
    o = LabeledDataset(spec_o.apply(base), labels, class_count,
                       f"synthetic:{seed}:O:{spec_o}", groups)
    t = LabeledDataset(spec_t.apply(base), labels, class_count,
                       f"synthetic:{seed}:T:{spec_t}", groups)
    return o, t


# ---------------------------------------------------------------------------
# splits and augmentation

@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[int, int, int] = (7, 2, 1)
    seed: int = 0


def split(dataset: LabeledDataset, spec: SplitSpec = SplitSpec()
          ) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Seeded shuffle, then contiguous cuts at the cumulative ratios."""
    n = len(dataset)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    total = sum(spec.ratios)
    cut1 = int(round(n * spec.ratios[0] / total))
    cut2 = int(round(n * (spec.ratios[0] + spec.ratios[1]) / total))
    order = np.random.default_rng(spec.seed).permutation(n)
    return (dataset.subset(order[:cut1]), dataset.subset(order[cut1:cut2]),
            dataset.subset(order[cut2:]))


def split_indices(n: int, spec: SplitSpec = SplitSpec()) -> tuple[np.ndarray, ...]:
    total = sum(spec.ratios)
    cut1 = int(round(n * spec.ratios[0] / total))
    cut2 = int(round(n * (spec.ratios[0] + spec.ratios[1]) / total))
    order = np.random.default_rng(spec.seed).permutation(n)
    return order[:cut1], order[cut1:cut2], order[cut2:]


def rotate_image(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Bilinear rotation about the centre with zero fill (C x H x W)."""
    if angle_deg == 0:
        return image.copy()
    return ndimage.rotate(image, angle_deg, axes=(1, 2), reshape=False, order=1,
                          mode="constant", cval=0.0)


def augment(batch: np.ndarray, seed: int, max_angle: float = 45.0) -> np.ndarray:
    """Independent random horizontal flip (p=0.5) and rotation in +-max_angle per image."""
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4:
        raise ValueError(f"augment expects N x C x H x W, got {batch.shape}")
    rng = np.random.default_rng(seed)
    flips = rng.random(batch.shape[0]) < 0.5
    angles = rng.uniform(-max_angle, max_angle, size=batch.shape[0])
    out = np.empty_like(batch)
    for i, img in enumerate(batch):
        if flips[i]:
            img = img[:, :, ::-1]
        out[i] = rotate_image(img, float(angles[i]))
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# raw container: "N,C,H,W,class_count\n" + float32 LE pixels + one byte per label

def save_dataset(dataset: LabeledDataset, path) -> None:
    images = dataset.images
    if images.ndim == 2:
        images = images.reshape(images.shape[0], 1, 1, images.shape[1])
    n, c, h, w = images.shape
    if dataset.class_count > 256:
        raise ValueError("container stores labels as single bytes")
    header = f"{n},{c},{h},{w},{dataset.class_count}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(images.astype("<f4").tobytes())
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def load_dataset(path, provenance: str = "") -> LabeledDataset:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError("missing header line")
    n, c, h, w, k = (int(v) for v in raw[:nl].decode("ascii").split(","))
    body = raw[nl + 1:]
    npix = n * c * h * w
    if len(body) != 4 * npix + n:
        raise ValueError(f"container body has {len(body)} bytes, expected {4 * npix + n}")
    images = np.frombuffer(body, dtype="<f4", count=npix).reshape(n, c, h, w)
    labels = np.frombuffer(body, dtype=np.uint8, count=n, offset=4 * npix)
    return LabeledDataset(images, labels, k, provenance or str(path))

