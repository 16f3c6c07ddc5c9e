"""Synthetic motion blur and paired sharp/blur dataset generation.

Stands in for captured blur data: kernels are linear-motion streaks,
random walks, or isotropic Gaussians, applied with reflect/replicate
boundary handling. Dataset layout on disk:

    <root>/{train,val,test}/{sharp,blur}/<id>.png
    <root>/manifest.csv   with columns id,split,kernel_kind,kernel_seed
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InvalidArgumentError, NotFoundError

KERNEL_KINDS = ("linear", "random-walk", "gaussian")
BOUNDARY_MODES = {"reflect": "reflect", "replicate": "nearest"}


@dataclass(frozen=True)
class BlurKernel:
    """Normalized non-negative K x K kernel with an odd side length."""

    weights: np.ndarray
    kind: str
    seed: int

    @property
    def size(self) -> int:
        return self.weights.shape[0]


def _derive_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_kernel(kind: str, size: int, extent: float, seed: int) -> BlurKernel:
    """Build a normalized blur kernel, deterministic for a fixed seed.

    `extent` is the streak length / walk length / Gaussian diameter in
    pixels and may not exceed `size`. `size` must be odd.
    """
    if kind not in KERNEL_KINDS:
        raise InvalidArgumentError(f"unknown kernel kind {kind!r}")
    if size < 1 or size % 2 == 0:
        raise InvalidArgumentError(f"kernel size must be odd and >= 1, got {size}")
    if extent > size:
        raise InvalidArgumentError(f"extent {extent} exceeds kernel size {size}")

    if size == 1:
        return BlurKernel(np.ones((1, 1)), kind, seed)

    rng = np.random.default_rng(seed)
    w = np.zeros((size, size))
    c = size // 2

    if kind == "linear":
        angle = rng.uniform(0.0, np.pi)
        half = max(extent - 1.0, 0.0) / 2.0
        # splat sub-pixel points along the segment bilinearly
        n_pts = max(int(np.ceil(extent)) * 8, 8)
        for s in np.linspace(-half, half, n_pts):
            i = c + s * np.sin(angle)
            j = c + s * np.cos(angle)
            i0, j0 = int(np.floor(i)), int(np.floor(j))
            di, dj = i - i0, j - j0
            for oi, oj, wt in (
                (0, 0, (1 - di) * (1 - dj)),
                (0, 1, (1 - di) * dj),
                (1, 0, di * (1 - dj)),
                (1, 1, di * dj),
            ):
                ii, jj = i0 + oi, j0 + oj
                if 0 <= ii < size and 0 <= jj < size:
                    w[ii, jj] += wt
    elif kind == "random-walk":
        i, j = float(c), float(c)
        heading = rng.uniform(0.0, 2 * np.pi)
        steps = max(int(round(extent)), 1)
        for _ in range(steps):
            i0, j0 = int(np.floor(i)), int(np.floor(j))
            di, dj = i - i0, j - j0
            for oi, oj, wt in (
                (0, 0, (1 - di) * (1 - dj)),
                (0, 1, (1 - di) * dj),
                (1, 0, di * (1 - dj)),
                (1, 1, di * dj),
            ):
                ii, jj = i0 + oi, j0 + oj
                if 0 <= ii < size and 0 <= jj < size:
                    w[ii, jj] += wt
            heading += rng.normal(0.0, 0.6)
            i = float(np.clip(i + np.sin(heading), 0, size - 1))
            j = float(np.clip(j + np.cos(heading), 0, size - 1))
    else:  # gaussian
        sigma = max(extent / 4.0, 0.3)
        ax = np.arange(size) - c
        g = np.exp(-(ax**2) / (2 * sigma**2))
        w = np.outer(g, g)

    total = w.sum()
    if total <= 0:  # degenerate draw; fall back to identity
        w = np.zeros((size, size))
        w[c, c] = 1.0
        total = 1.0
    return BlurKernel(w / total, kind, seed)


def apply_blur(x: np.ndarray, kernel: BlurKernel, boundary: str = "reflect") -> np.ndarray:
    """Blur an H x W or H x W x C image in [0,1] with the given kernel.

    Correlation with the kernel weights; the result is clipped to [0,1]
    (a no-op for exact arithmetic since the kernel is a convex combination).
    """
    if boundary not in BOUNDARY_MODES:
        raise InvalidArgumentError(f"boundary must be one of {sorted(BOUNDARY_MODES)}")
    k = kernel.size
    if k > x.shape[0] or k > x.shape[1]:
        raise InvalidArgumentError(
            f"kernel {k}x{k} larger than image {x.shape[0]}x{x.shape[1]}"
        )
    mode = BOUNDARY_MODES[boundary]
    if x.ndim == 2:
        y = ndimage.correlate(x, kernel.weights, mode=mode)
    else:
        y = np.stack(
            [ndimage.correlate(x[..., c], kernel.weights, mode=mode) for c in range(x.shape[-1])],
            axis=-1,
        )
    return np.clip(y, 0.0, 1.0)


@dataclass(frozen=True)
class ImagePair:
    """A blur/sharp pair; the residual is blur minus sharp."""

    sharp: np.ndarray
    blur: np.ndarray
    pair_id: str

    def __post_init__(self):
        if self.sharp.shape != self.blur.shape:
            raise InvalidArgumentError("sharp and blur shapes differ")

    @property
    def residual(self) -> np.ndarray:
        return self.blur - self.sharp


def load_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return arr


def save_image(path, arr: np.ndarray) -> None:
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(path)


def synthesize_sharp_images(out_dir, count: int, size: int = 64, seed: int = 0,
                            channels: int = 3) -> list[Path]:
    """Generate procedural sharp scenes (gradients, shapes, stripes) as PNGs.

    Gives the pipeline something with edges and texture to deblur without
    any external imagery.
    """
    if channels not in (1, 3):
        raise InvalidArgumentError("channels must be 1 or 3")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for idx in range(count):
        rng = np.random.default_rng(_derive_seed(seed, "scene", idx))
        img = _render_scene(rng, size, channels)
        p = out_dir / f"scene_{idx:04d}.png"
        save_image(p, img if channels == 3 else img[..., 0])
        paths.append(p)
    return paths


def _render_scene(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.15, 0.85, channels)
    gx = rng.uniform(-0.4, 0.4, channels)
    gy = rng.uniform(-0.4, 0.4, channels)
    img = base[None, None, :] + gx * xx[..., None] + gy * yy[..., None]

    for _ in range(rng.integers(4, 9)):
        color = rng.uniform(0.0, 1.0, channels)
        kind = rng.integers(0, 3)
        if kind == 0:  # rectangle
            h = rng.integers(size // 8, size // 2)
            w = rng.integers(size // 8, size // 2)
            i = rng.integers(0, size - h)
            j = rng.integers(0, size - w)
            img[i : i + h, j : j + w] = color
        elif kind == 1:  # ellipse
            ci, cj = rng.uniform(0.2, 0.8, 2) * size
            ri, rj = rng.uniform(size / 12, size / 4, 2)
            mask = ((yy * size - ci) / ri) ** 2 + ((xx * size - cj) / rj) ** 2 <= 1.0
            img[mask] = color
        else:  # stripes
            freq = rng.uniform(2, 7)
            phase = rng.uniform(0, 2 * np.pi)
            angle = rng.uniform(0, np.pi)
            wave = 0.5 + 0.5 * np.sin(
                2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase
            )
            alpha = rng.uniform(0.3, 0.8)
            img = (1 - alpha * wave[..., None]) * img + alpha * wave[..., None] * color

    # mild smooth texture so flat regions are not exactly constant
    noise = rng.normal(0.0, 1.0, (size, size, channels))
    noise = np.stack([ndimage.gaussian_filter(noise[..., c], 1.5) for c in range(channels)], axis=-1)
    img = img + 0.08 * noise
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class KernelSpec:
    """Family of kernels a dataset draws from; one draw per image."""

    kinds: tuple = ("linear", "random-walk")
    size: int = 11
    extent_range: tuple = (5.0, 9.0)


@dataclass(frozen=True)
class ManifestRow:
    pair_id: str
    split: str
    kernel_kind: str
    kernel_seed: int


def build_dataset(source_dir, out_root, kernel_spec: KernelSpec,
                  split_ratios=(0.8, 0.1, 0.1), seed: int = 0,
                  boundary: str = "reflect") -> list[ManifestRow]:
    """Blur every source image and lay out train/val/test splits on disk.

    Pure function of (source set, spec, seed): per-image kernel seeds are
    derived from the global seed and the image id, splits from a seeded
    shuffle. Returns the manifest rows, also written to manifest.csv.
    """
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise InvalidArgumentError(f"split ratios must sum to 1, got {split_ratios}")
    source_dir = Path(source_dir)
    sources = sorted(source_dir.glob("*.png")) if source_dir.is_dir() else []
    if not sources:
        raise NotFoundError(f"no source images in {source_dir}")

    out_root = Path(out_root)
    n = len(sources)
    counts = _split_counts(n, split_ratios)
    order = np.random.default_rng(_derive_seed(seed, "split")).permutation(n)
    split_of = {}
    pos = 0
    for split, cnt in zip(("train", "val", "test"), counts):
        for k in order[pos : pos + cnt]:
            split_of[int(k)] = split
        pos += cnt

    rows = []
    for idx, src in enumerate(sources):
        pair_id = src.stem
        split = split_of[idx]
        kseed = _derive_seed(seed, "kernel", pair_id)
        rng = np.random.default_rng(kseed)
        kind = kernel_spec.kinds[rng.integers(0, len(kernel_spec.kinds))]
        extent = rng.uniform(*kernel_spec.extent_range)
        kernel = make_kernel(kind, kernel_spec.size, extent, kseed)

        sharp = load_image(src)
        blur = apply_blur(sharp, kernel, boundary)
        for sub, img in (("sharp", sharp), ("blur", blur)):
            d = out_root / split / sub
            d.mkdir(parents=True, exist_ok=True)
            save_image(d / f"{pair_id}.png", img)
        rows.append(ManifestRow(pair_id, split, kind, kseed))

    with open(out_root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "split", "kernel_kind", "kernel_seed"])
        for r in rows:
            writer.writerow([r.pair_id, r.split, r.kernel_kind, r.kernel_seed])
    return rows


def _split_counts(n: int, ratios) -> list[int]:
    raw = [n * r for r in ratios]
    counts = [int(np.floor(v)) for v in raw]
    # largest remainders absorb the leftover so counts sum to n
    rem = n - sum(counts)
    order = np.argsort([c - v for c, v in zip(counts, raw)])
    for k in order[:rem]:
        counts[k] += 1
    return counts


def read_manifest(root) -> list[ManifestRow]:
    path = Path(root) / "manifest.csv"
    if not path.exists():
        raise NotFoundError(f"missing manifest {path}")
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ManifestRow(rec["id"], rec["split"], rec["kernel_kind"], int(rec["kernel_seed"])))
    return rows


def load_split(root, split: str) -> list[ImagePair]:
    """Load every pair of one split, sorted by id."""
    root = Path(root)
    pairs = []
    for row in read_manifest(root):
        if row.split != split:
            continue
        sharp = load_image(root / split / "sharp" / f"{row.pair_id}.png")
        blur = load_image(root / split / "blur" / f"{row.pair_id}.png")
        if sharp.ndim == 2:
            sharp, blur = sharp[..., None], blur[..., None]
        pairs.append(ImagePair(sharp, blur, row.pair_id))
    return sorted(pairs, key=lambda p: p.pair_id)
