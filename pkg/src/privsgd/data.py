"""Data ingestion and preprocessing: synthetic generators, IDX files, PCA, L1 normalization.

Training pipelines end with l1_normalize so every feature vector satisfies
||x||_1 <= 1, the precondition of the gradient sensitivity bound.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .model import Sample
from .privacy import RngStream, derive_seed

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Base for IDX parse failures."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    def __init__(self, path: str, offset: int, needed: int):
        super().__init__(f"{path}: truncated at byte {offset}, needed {needed} more")
        self.offset = offset


class CountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    """Feature matrix with labels; rows are samples."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int
    provenance: str = ""
    image_shape: tuple[int, int] | None = None

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.X.shape[0]

    def sample(self, i: int) -> Sample:
        return Sample(self.X[i], int(self.y[i]))

    def subset(self, indices: np.ndarray) -> "Dataset":
        return replace(
            self,
            X=self.X[indices],
            y=self.y[indices],
            provenance=f"subset({self.provenance}, n={len(indices)})",
        )

    def check_l1(self, tol: float = 1e-9) -> None:
        """Assert the sensitivity precondition; call before feeding any trainer."""
        worst = float(np.abs(self.X).sum(axis=1).max(initial=0.0))
        if worst > 1.0 + tol:
            raise ValueError(f"dataset violates ||x||_1 <= 1 (max norm {worst})")


def synth_generate(
    n_classes: int, n_features: int, n: int, class_separation: float, seed: int
) -> Dataset:
    """Spherical Gaussian mixture with unit-vector means scaled by class_separation.

    Labels are drawn uniformly; samples are L1-normalized before return.
    """
    if n_classes < 2 or n_features < 1:
        raise ValueError(f"invalid dimensions C={n_classes}, D={n_features}")
    if n < n_classes:
        raise ValueError(f"need at least {n_classes} samples, got {n}")
    rng = RngStream(seed, 0).generator()
    means = rng.standard_normal((n_classes, n_features))
    means *= class_separation / np.linalg.norm(means, axis=1, keepdims=True)
    y = rng.integers(n_classes, size=n)
    X = means[y] + rng.standard_normal((n, n_features))
    ds = Dataset(X, y.astype(np.int64), n_classes, provenance=f"synthetic(seed={seed})")
    return l1_normalize(ds)


def l1_normalize(dataset: Dataset) -> Dataset:
    """Scale each nonzero row to ||x||_1 = 1; zero rows stay zero."""
    norms = np.abs(dataset.X).sum(axis=1, keepdims=True)
    X = dataset.X / np.where(norms > 0, norms, 1.0)
    return replace(dataset, X=X, provenance=f"l1({dataset.provenance})")


def _read_exact(fh, path: str, n: int) -> bytes:
    offset = fh.tell()
    buf = fh.read(n)
    if len(buf) < n:
        raise TruncatedFileError(path, offset + len(buf), n - len(buf))
    return buf


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse the big-endian IDX pair; pixels scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">iiii", _read_exact(fh, images_path, 16))
        if magic != IDX_IMAGES_MAGIC:
            raise BadMagicError(f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        pixels = np.frombuffer(_read_exact(fh, images_path, n * rows * cols), dtype=np.uint8)
    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">ii", _read_exact(fh, labels_path, 8))
        if magic != IDX_LABELS_MAGIC:
            raise BadMagicError(f"{labels_path}: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(fh, labels_path, n_labels), dtype=np.uint8)
    if n != n_labels:
        raise CountMismatchError(f"{n} images but {n_labels} labels")
    X = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(
        X,
        labels.astype(np.int64),
        n_classes=int(labels.max()) + 1 if n else 0,
        provenance=f"idx({os.path.basename(images_path)})",
        image_shape=(rows, cols),
    )


def save_idx(dataset: Dataset, images_path: str, labels_path: str) -> None:
    """Inverse of load_idx; pixel round-trip is exact because values are 255ths."""
    if dataset.image_shape is None:
        raise ValueError("dataset has no image shape; cannot serialize as IDX images")
    rows, cols = dataset.image_shape
    pixels = np.rint(dataset.X * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, len(dataset), rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, len(dataset)))
        fh.write(dataset.y.astype(np.uint8).tobytes())


@dataclass
class PcaModel:
    """Affine projection onto the top-k covariance eigenvectors (orthonormal rows)."""

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(dataset: Dataset, k: int, tol: float = 1e-8, max_iter: int = 500, seed: int = 7) -> PcaModel:
    """Top-k principal subspace by orthogonal (subspace) iteration on the covariance."""
    d_in = dataset.n_features
    if k > d_in:
        raise ValueError(f"k={k} exceeds input dimension {d_in}")
    if len(dataset) == 0:
        raise ValueError("cannot fit PCA on an empty dataset")
    mean = dataset.X.mean(axis=0)
    centered = dataset.X - mean
    cov = centered.T @ centered / max(len(dataset) - 1, 1)

    rng = RngStream(seed, 0).generator()
    q, _ = np.linalg.qr(rng.standard_normal((d_in, k)))
    for _ in range(max_iter):
        q_next, _ = np.linalg.qr(cov @ q)
        # distance between the spans, invariant to rotations within the subspace
        drift = float(np.linalg.norm(q_next - q @ (q.T @ q_next)))
        q = q_next
        if drift < tol:
            break
    # Rayleigh-Ritz rotation: resolves nearly-degenerate directions inside the
    # converged subspace into individual eigenvectors
    ritz = q.T @ cov @ q
    theta, u = np.linalg.eigh((ritz + ritz.T) / 2)
    order = np.argsort(theta)[::-1]
    return PcaModel(mean=mean, components=(q @ u[:, order]).T, eigenvalues=theta[order])


def pca_transform(model: PcaModel, dataset: Dataset) -> Dataset:
    X = (dataset.X - model.mean) @ model.components.T
    return replace(
        dataset,
        X=X,
        image_shape=None,
        provenance=f"pca(k={model.k}, {dataset.provenance})",
    )


# ---------------------------------------------------------------------------
# Rendered-digit corpus: a seeded stand-in for a handwritten-digit benchmark.
# Ten 7x5 glyphs are warped by random affine maps, thickened, blurred and
# noised onto a 28x28 canvas; a small fraction of labels is flipped so the
# Bayes error is bounded away from zero.

_GLYPHS = [
    "01110 10001 10011 10101 11001 10001 01110",
    "00100 01100 00100 00100 00100 00100 01110",
    "01110 10001 00001 00010 00100 01000 11111",
    "11110 00001 00001 01110 00001 00001 11110",
    "00010 00110 01010 10010 11111 00010 00010",
    "11111 10000 11110 00001 00001 10001 01110",
    "00110 01000 10000 11110 10001 10001 01110",
    "11111 00001 00010 00100 01000 01000 01000",
    "01110 10001 10001 01110 10001 10001 01110",
    "01110 10001 10001 01111 00001 00010 01100",
]


def _glyph_array(spec: str) -> np.ndarray:
    rows = spec.split()
    return np.array([[float(ch) for ch in row] for row in rows])


def _bilinear(img: np.ndarray, r: np.ndarray, c: np.ndarray) -> np.ndarray:
    h, w = img.shape
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    fr, fc = r - r0, c - c0

    def at(rr, cc):
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        return np.where(inside, img[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)], 0.0)

    return (
        at(r0, c0) * (1 - fr) * (1 - fc)
        + at(r0 + 1, c0) * fr * (1 - fc)
        + at(r0, c0 + 1) * (1 - fr) * fc
        + at(r0 + 1, c0 + 1) * fr * fc
    )


def _box_blur(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1)
    acc = np.zeros_like(img)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            acc += padded[dr : dr + img.shape[0], dc : dc + img.shape[1]]
    return acc / 9.0


def render_digit_corpus(
    n: int,
    seed: int,
    side: int = 28,
    max_rotation: float = 0.25,
    max_shear: float = 0.18,
    scale_range: tuple[float, float] = (0.85, 1.15),
    max_shift: float = 0.12,
    pixel_noise: float = 0.12,
    thicken_prob: float = 0.45,
    label_flip: float = 0.04,
) -> tuple[np.ndarray, np.ndarray]:
    """n warped digit images (uint8, n x side x side) with their labels."""
    rng = RngStream(seed, 0).generator()
    glyphs = [np.pad(_glyph_array(g), 1) for g in _GLYPHS]
    thick = [np.pad(_thicken(_glyph_array(g)), 1) for g in _GLYPHS]
    gh, gw = glyphs[0].shape

    # output pixel grid in centered [-1, 1] coordinates
    axis = (np.arange(side) - (side - 1) / 2) / (side / 2)
    vv, uu = np.meshgrid(axis, axis, indexing="ij")
    grid = np.stack([uu.ravel(), vv.ravel()])  # (2, side*side), rows = (u, v)

    images = np.empty((n, side, side), dtype=np.uint8)
    labels = rng.integers(10, size=n)
    for i in range(n):
        theta = rng.uniform(-max_rotation, max_rotation)
        sx, sy = rng.uniform(*scale_range, size=2)
        shear = rng.uniform(-max_shear, max_shear)
        tx, ty = rng.uniform(-max_shift, max_shift, size=2)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        fwd = rot @ np.array([[sx, shear * sx], [0.0, sy]])
        inv = np.linalg.inv(fwd)
        src = inv @ (grid - np.array([[tx], [ty]]))

        base = thick[labels[i]] if rng.random() < thicken_prob else glyphs[labels[i]]
        gc = (src[0] + 1) / 2 * (gw - 1)
        gr = (src[1] + 1) / 2 * (gh - 1)
        canvas = _bilinear(base, gr, gc).reshape(side, side)
        canvas = _box_blur(canvas) * rng.uniform(0.7, 1.0)
        canvas += rng.normal(0.0, pixel_noise, size=canvas.shape)
        images[i] = np.rint(np.clip(canvas, 0.0, 1.0) * 255).astype(np.uint8)

    flips = rng.random(n) < label_flip
    shifted = (labels + rng.integers(1, 10, size=n)) % 10
    labels = np.where(flips, shifted, labels)
    return images, labels.astype(np.int64)


def _thicken(glyph: np.ndarray) -> np.ndarray:
    padded = np.pad(glyph, 1)
    out = glyph.copy()
    for dr, dc in ((0, 1), (2, 1), (1, 0), (1, 2)):
        out = np.maximum(out, padded[dr : dr + glyph.shape[0], dc : dc + glyph.shape[1]])
    return out


def digit_corpus_dataset(n_train: int, n_test: int, seed: int, cache_dir: str | None = None) -> tuple[Dataset, Dataset]:
    """Rendered-digit train/test pair, round-tripped through IDX files.

    The corpus is written as IDX and read back with load_idx, so the on-disk
    path is exercised; files are cached per (seed, sizes).
    """
    import tempfile

    cache_dir = cache_dir or os.path.join(tempfile.gettempdir(), "privsgd-digits")
    os.makedirs(cache_dir, exist_ok=True)
    tag = f"digits_{seed}_{n_train}_{n_test}"
    paths = {kind: os.path.join(cache_dir, f"{tag}-{kind}") for kind in
             ("train-images", "train-labels", "test-images", "test-labels")}
    if not all(os.path.exists(p) for p in paths.values()):
        images, labels = render_digit_corpus(n_train + n_test, seed)
        flat = images.reshape(len(images), -1).astype(np.float64) / 255.0
        full = Dataset(flat, labels, n_classes=10, provenance=f"digits(seed={seed})",
                       image_shape=images.shape[1:])
        save_idx(full.subset(np.arange(n_train)), paths["train-images"], paths["train-labels"])
        save_idx(full.subset(np.arange(n_train, n_train + n_test)),
                 paths["test-images"], paths["test-labels"])
    train = load_idx(paths["train-images"], paths["train-labels"])
    test = load_idx(paths["test-images"], paths["test-labels"])
    # a tiny test split can miss the top class; pin both to the full label range
    train.n_classes = test.n_classes = 10
    return train, test


def random_shards(n: int, n_shards: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Random near-equal partition of range(n) into n_shards index arrays."""
    perm = rng.permutation(n)
    return np.array_split(perm, n_shards)


def finalize(train: Dataset, test: Dataset, pca_dim: int | None, seed: int) -> tuple[Dataset, Dataset]:
    """Shared preprocessing tail: optional PCA fit on train only, then L1 normalize."""
    if pca_dim is not None and pca_dim < train.n_features:
        model = pca_fit(train, pca_dim, seed=derive_seed(seed, "pca"))
        train, test = pca_transform(model, train), pca_transform(model, test)
    train, test = l1_normalize(train), l1_normalize(test)
    train.check_l1()
    test.check_l1()
    return train, test
