"""Dataset ingestion, pad/crop geometry, augmentation, and synthetic data.

Images are [3, H, W] floats in [0, 1]; masks are binary [1, H, W].  All
randomness comes from explicit generators, consumed in a fixed order, so a
seed pins the full augmented set and every synthetic image.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

__all__ = [
    "AUG_METHODS",
    "SPLITS",
    "FundusSample",
    "PadOffsets",
    "AugmentConfig",
    "ManifestEntry",
    "DatasetManifest",
    "ManifestError",
    "pad_offsets",
    "pad_array",
    "pad_to_target",
    "crop_back",
    "augment",
    "build_augmented_set",
    "split_validation",
    "generate_synthetic_dataset",
    "load_manifest",
    "save_manifest",
    "load_sample",
    "load_image",
    "load_mask",
    "save_image",
    "save_mask",
    "write_overlay",
    "stack_samples",
    "parse_lineage",
]

AUG_METHODS = ("rotate", "gaussian_noise", "color_jitter", "flips")
SPLITS = ("train", "val", "test")
_COPIES_PER_METHOD = 3


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class FundusSample:
    """One image/mask pair with its augmentation lineage."""

    image: np.ndarray
    mask: np.ndarray
    id: str
    fov: Optional[np.ndarray] = None
    lineage: str = "original"

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be [3, H, W], got {self.image.shape}")
        if self.mask.shape != (1,) + self.image.shape[1:]:
            raise ValueError(f"mask shape {self.mask.shape} does not match image {self.image.shape}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask must be binary")
        if self.fov is not None and self.fov.shape != self.mask.shape:
            raise ValueError(f"fov shape {self.fov.shape} does not match mask {self.mask.shape}")


@dataclass(frozen=True)
class PadOffsets:
    top: int
    bottom: int
    left: int
    right: int


def pad_offsets(shape_hw: tuple, target_hw: tuple) -> PadOffsets:
    """Centered zero-pad amounts; odd remainders go to the bottom/right."""
    (h, w), (th, tw) = shape_hw, target_hw
    if th < h or tw < w:
        raise ValueError(f"target {target_hw} smaller than image {shape_hw}")
    dh, dw = th - h, tw - w
    return PadOffsets(top=dh // 2, bottom=dh - dh // 2, left=dw // 2, right=dw - dw // 2)


def pad_array(arr: np.ndarray, off: PadOffsets) -> np.ndarray:
    pad = [(0, 0)] * (arr.ndim - 2) + [(off.top, off.bottom), (off.left, off.right)]
    return np.pad(arr, pad)


def pad_to_target(sample: FundusSample, target_hw: tuple) -> tuple[FundusSample, PadOffsets]:
    off = pad_offsets(sample.image.shape[1:], target_hw)
    padded = replace(
        sample,
        image=pad_array(sample.image, off),
        mask=pad_array(sample.mask, off),
        fov=pad_array(sample.fov, off) if sample.fov is not None else None,
    )
    return padded, off


def crop_back(arr: np.ndarray, off: PadOffsets) -> np.ndarray:
    """Exact inverse of the padding on the two trailing axes."""
    h, w = arr.shape[-2], arr.shape[-1]
    if off.top + off.bottom >= h or off.left + off.right >= w:
        raise ValueError(f"offsets {off} inconsistent with array of size {h}x{w}")
    return arr[..., off.top : h - off.bottom, off.left : w - off.right]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.02
    jitter: float = 0.2


def _rotate_planes(arr: np.ndarray, angle_deg: float, nearest: bool) -> np.ndarray:
    """Rotate [C, H, W] about the image center with zero fill.

    Angle 90 maps pixel (r, c) to (c, H-1-r); bilinear for images, nearest
    neighbor when ``nearest`` (for masks).
    """
    c, h, w = arr.shape
    theta = math.radians(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ry, rx = rr - cy, cc - cx
    sy = math.cos(theta) * ry - math.sin(theta) * rx + cy
    sx = math.sin(theta) * ry + math.cos(theta) * rx + cx
    inside = (sy > -1.0) & (sy < h) & (sx > -1.0) & (sx < w)

    if nearest:
        iy = np.clip(np.rint(sy).astype(int), 0, h - 1)
        ix = np.clip(np.rint(sx).astype(int), 0, w - 1)
        valid = inside & (np.rint(sy) >= 0) & (np.rint(sy) < h) & (np.rint(sx) >= 0) & (np.rint(sx) < w)
        out = arr[:, iy, ix] * valid
        return out.astype(arr.dtype)

    padded = np.pad(arr, ((0, 0), (1, 1), (1, 1)))
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    wy = (sy - y0).astype(arr.dtype)
    wx = (sx - x0).astype(arr.dtype)
    iy0 = np.clip(y0.astype(int) + 1, 0, h + 1)
    ix0 = np.clip(x0.astype(int) + 1, 0, w + 1)
    iy1 = np.clip(iy0 + 1, 0, h + 1)
    ix1 = np.clip(ix0 + 1, 0, w + 1)
    out = (
        padded[:, iy0, ix0] * (1 - wy) * (1 - wx)
        + padded[:, iy0, ix1] * (1 - wy) * wx
        + padded[:, iy1, ix0] * wy * (1 - wx)
        + padded[:, iy1, ix1] * wy * wx
    )
    return (out * inside).astype(arr.dtype)


def _luminance(image: np.ndarray) -> np.ndarray:
    return (0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2])[None]


def augment(
    sample: FundusSample,
    method: str,
    rng: np.random.Generator,
    cfg: AugmentConfig = AugmentConfig(),
) -> list[FundusSample]:
    """Produce exactly three derived samples for one augmentation family.

    Geometric methods transform image and mask (and fov) jointly; photometric
    methods leave the mask untouched.
    """
    out: list[FundusSample] = []
    if method == "rotate":
        for k in range(1, _COPIES_PER_METHOD + 1):
            angle = float(rng.uniform(0.0, 360.0))
            out.append(
                replace(
                    sample,
                    image=_rotate_planes(sample.image, angle, nearest=False),
                    mask=_rotate_planes(sample.mask, angle, nearest=True),
                    fov=_rotate_planes(sample.fov, angle, nearest=True) if sample.fov is not None else None,
                    id=f"{sample.id}-rot{k}",
                    lineage=f"rotate(angle={angle:.2f})<-{sample.id}",
                )
            )
    elif method == "gaussian_noise":
        for k in range(1, _COPIES_PER_METHOD + 1):
            noise = rng.normal(0.0, cfg.noise_sigma, size=sample.image.shape)
            image = np.clip(sample.image + noise, 0.0, 1.0).astype(sample.image.dtype)
            out.append(
                replace(
                    sample,
                    image=image,
                    id=f"{sample.id}-noise{k}",
                    lineage=f"gaussian_noise(sigma={cfg.noise_sigma})<-{sample.id}",
                )
            )
    elif method == "color_jitter":
        for k in range(1, _COPIES_PER_METHOD + 1):
            fb, fc, fs = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter, size=3)
            image = sample.image * fb
            mean = image.mean()
            image = mean + fc * (image - mean)
            gray = _luminance(image)
            image = gray + fs * (image - gray)
            image = np.clip(image, 0.0, 1.0).astype(sample.image.dtype)
            out.append(
                replace(
                    sample,
                    image=image,
                    id=f"{sample.id}-jitter{k}",
                    lineage=f"color_jitter(b={fb:.3f},c={fc:.3f},s={fs:.3f})<-{sample.id}",
                )
            )
    elif method == "flips":
        h, w = sample.image.shape[1:]
        flips = [("horizontal", lambda a: a[..., :, ::-1]), ("vertical", lambda a: a[..., ::-1, :])]
        if h != w:
            raise ValueError("the diagonal flip needs a square sample; pad to square first")
        flips.append(("diagonal", lambda a: np.swapaxes(a, -1, -2)))
        for name, op in flips:
            out.append(
                replace(
                    sample,
                    image=np.ascontiguousarray(op(sample.image)),
                    mask=np.ascontiguousarray(op(sample.mask)),
                    fov=np.ascontiguousarray(op(sample.fov)) if sample.fov is not None else None,
                    id=f"{sample.id}-flip-{name[0]}",
                    lineage=f"flips({name})<-{sample.id}",
                )
            )
    else:
        raise ValueError(f"unknown augmentation method {method!r}")
    return out


def parse_lineage(lineage: str) -> tuple[Optional[str], Optional[str]]:
    """(method, parent id) for an augmented sample, (None, None) for originals."""
    if lineage == "original":
        return None, None
    head, parent = lineage.split("<-", 1)
    return head.split("(", 1)[0], parent


def build_augmented_set(
    originals: list[FundusSample],
    rng: np.random.Generator,
    target_total: int = 256,
    cfg: AugmentConfig = AugmentConfig(),
) -> list[FundusSample]:
    """Originals plus method-by-method augmentations, subsampled to a fixed size.

    Every original is kept; the augmented pool (3 per method per original) is
    uniformly subsampled without replacement to reach exactly
    ``target_total`` samples.
    """
    if not originals:
        raise ValueError("no samples to augment")
    if target_total < len(originals):
        raise ValueError(f"target_total {target_total} below the {len(originals)} originals")
    augmented: list[FundusSample] = []
    for sample in originals:
        for method in AUG_METHODS:
            augmented.extend(augment(sample, method, rng, cfg))
    needed = target_total - len(originals)
    if needed > len(augmented):
        raise ValueError(
            f"cannot reach {target_total} samples: {len(originals)} originals yield only "
            f"{len(augmented)} augmentations"
        )
    chosen = sorted(rng.choice(len(augmented), size=needed, replace=False).tolist())
    return list(originals) + [augmented[i] for i in chosen]


def split_validation(
    samples: list[FundusSample], val_count: int, rng: np.random.Generator
) -> tuple[list[FundusSample], list[FundusSample]]:
    """Disjoint, exhaustive seeded split into (train, val)."""
    if not 0 <= val_count < len(samples):
        raise ValueError(f"val_count {val_count} out of range for {len(samples)} samples")
    perm = rng.permutation(len(samples))
    val_idx = set(perm[:val_count].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


# ---------------------------------------------------------------------------
# synthetic vessel-style data
# ---------------------------------------------------------------------------

_FRACTION_BOUNDS = (0.03, 0.20)


def _disk(radius: float) -> np.ndarray:
    r = int(math.floor(radius))
    if r <= 0:
        return np.ones((1, 1), dtype=bool)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return yy * yy + xx * xx <= radius * radius


def _sample_stroke_mask(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Union of a few quadratic Bezier strokes kept inside the inscribed disk."""
    mask = np.zeros((h, w), dtype=bool)
    n_strokes = int(rng.integers(2, 6))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    reach = 0.42 * min(h, w)
    for _ in range(n_strokes):
        pts = []
        for _ in range(3):
            radius = reach * math.sqrt(rng.random())
            phi = rng.uniform(0.0, 2.0 * math.pi)
            pts.append((cy + radius * math.sin(phi), cx + radius * math.cos(phi)))
        (y0, x0), (y1, x1), (y2, x2) = pts
        t = np.linspace(0.0, 1.0, 4 * max(h, w))
        by = (1 - t) ** 2 * y0 + 2 * (1 - t) * t * y1 + t**2 * y2
        bx = (1 - t) ** 2 * x0 + 2 * (1 - t) * t * x1 + t**2 * x2
        stroke = np.zeros((h, w), dtype=bool)
        stroke[np.clip(np.rint(by).astype(int), 0, h - 1), np.clip(np.rint(bx).astype(int), 0, w - 1)] = True
        width = float(rng.uniform(1.0, 3.0))
        mask |= ndimage.binary_dilation(stroke, structure=_disk(width / 2.0))
    return mask


def _render_image(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Dark, gently graded background with a blurred brightening along the mask."""
    h, w = mask.shape
    rows = np.arange(h)[:, None] / max(h - 1, 1) - 0.5
    cols = np.arange(w)[None, :] / max(w - 1, 1) - 0.5
    base = rng.uniform(0.05, 0.15)
    gy, gx = rng.uniform(-0.1, 0.1, size=2)
    background = base + gy * rows + gx * cols
    boost = rng.uniform(0.35, 0.55)
    signal = ndimage.gaussian_filter(mask.astype(np.float64) * boost, sigma=0.7)
    plane = background + signal + rng.normal(0.0, 0.02, size=(h, w))
    plane = np.clip(plane, 0.0, 1.0)
    channel_gain = np.array([0.9, 1.0, 0.8])
    return np.clip(channel_gain[:, None, None] * plane[None], 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(
    count: int, size: tuple = (64, 64), rng: Optional[np.random.Generator] = None
) -> list[FundusSample]:
    """Vessel-like curves on a dark background, with the positive fraction
    held inside a fixed band so that desk-scale metrics stay meaningful."""
    h, w = size
    if h % 8 or w % 8 or h < 16 or w < 16:
        raise ValueError(f"size must be at least 16 and divisible by 8, got {size}")
    if rng is None:
        rng = np.random.default_rng(0)
    lo, hi = _FRACTION_BOUNDS
    samples = []
    for i in range(count):
        for _ in range(100):
            mask = _sample_stroke_mask(h, w, rng)
            frac = mask.mean()
            if lo <= frac <= hi:
                break
        else:
            raise RuntimeError("synthetic mask generation failed to hit the target density")
        image = _render_image(mask, rng)
        samples.append(
            FundusSample(image=image, mask=mask[None].astype(np.float32), id=f"synth-{i:04d}")
        )
    return samples


def stack_samples(samples: list[FundusSample]) -> tuple[np.ndarray, np.ndarray]:
    """(images [M, 3, H, W], masks [M, 1, H, W]) as float32 stacks."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.float32)
    return images, masks


# ---------------------------------------------------------------------------
# manifest and raster I/O
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str
    fov_path: Optional[str]
    split: str


@dataclass
class DatasetManifest:
    """Line-delimited JSON: a header record, then one record per sample."""

    name: str
    pad_target: tuple
    samples: list[ManifestEntry] = field(default_factory=list)
    base_dir: Optional[Path] = None

    def __post_init__(self):
        th, tw = self.pad_target
        if th % 16 or tw % 16:
            raise ManifestError(f"pad_target must be divisible by 16, got {self.pad_target}")

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.samples if e.split == split]


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    lines = [json.dumps({"name": manifest.name, "pad_target": list(manifest.pad_target)}, sort_keys=True)]
    for e in manifest.samples:
        lines.append(
            json.dumps(
                {"id": e.id, "image": e.image_path, "mask": e.mask_path, "fov": e.fov_path, "split": e.split},
                sort_keys=True,
            )
        )
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ManifestError("empty manifest")
    try:
        header = json.loads(lines[0])
        manifest = DatasetManifest(
            name=header["name"], pad_target=tuple(header["pad_target"]), base_dir=path.parent
        )
        seen = set()
        for ln in lines[1:]:
            rec = json.loads(ln)
            if rec["id"] in seen:
                raise ManifestError(f"duplicate sample id {rec['id']!r}")
            seen.add(rec["id"])
            if rec["split"] not in SPLITS:
                raise ManifestError(f"invalid split tag {rec['split']!r} for sample {rec['id']!r}")
            manifest.samples.append(
                ManifestEntry(
                    id=rec["id"],
                    image_path=rec["image"],
                    mask_path=rec["mask"],
                    fov_path=rec.get("fov"),
                    split=rec["split"],
                )
            )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"malformed manifest record: {exc}") from exc
    if not manifest.samples:
        raise ManifestError("manifest lists no samples")
    return manifest


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr >= 128).astype(np.float32)[None]


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(image, 0.0, 1.0)
    arr = (arr.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask(mask: np.ndarray, path) -> None:
    arr = (np.squeeze(mask, axis=0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def write_overlay(image: np.ndarray, mask: np.ndarray, path) -> None:
    """Input image with the mask painted into the red channel."""
    overlay = image.copy()
    overlay[0] = np.maximum(overlay[0], mask[0])
    save_image(overlay, path)


def load_sample(entry: ManifestEntry, base_dir: Optional[Path]) -> FundusSample:
    base = Path(base_dir) if base_dir is not None else Path(".")
    image_path = base / entry.image_path
    mask_path = base / entry.mask_path
    for p in (image_path, mask_path):
        if not p.exists():
            raise ManifestError(f"sample {entry.id!r} references missing file {p}")
    fov = None
    if entry.fov_path is not None:
        fov_path = base / entry.fov_path
        if not fov_path.exists():
            raise ManifestError(f"sample {entry.id!r} references missing file {fov_path}")
        fov = load_mask(fov_path)
    return FundusSample(image=load_image(image_path), mask=load_mask(mask_path), id=entry.id, fov=fov)
