"""Dataset ingestion, the synthetic desk-scale benchmark, preprocessing,
and out-of-distribution perturbations.

On-disk layout (PNG adapters):
    <root>/<case_id>/image.png
    <root>/<case_id>/annotation_<k>.png   (k = annotator index)
    <root>/<case_id>/annotation_labels.png  (multi-class layout)
    <root>/<case_id>/meta.txt             (optional "spacing: <row> <col>")
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d
from scipy.special import erf


@dataclass
class SegmentationCase:
    image: np.ndarray  # [C, H, W] float32
    annotations: list  # list of [H, W] integer label maps
    case_id: str
    spacing: tuple | None = None

    def __post_init__(self):
        if not self.annotations:
            raise ValueError(f"case {self.case_id}: needs at least one annotation")
        hw = self.image.shape[-2:]
        for k, ann in enumerate(self.annotations):
            if ann.shape != hw:
                raise ValueError(
                    f"case {self.case_id}: annotation {k} shape {ann.shape} "
                    f"does not match image {hw}"
                )


@dataclass
class ToySpec:
    seed: int = 0
    case_count: int = 64
    image_size: int = 32
    ambiguity_rate: float = 0.5
    annotator_count: int = 4
    # per-annotator boundary radius offsets used on ambiguous cases
    radius_offsets: tuple = (-1.0, 0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ValueError(f"ambiguity_rate must be in [0,1], got {self.ambiguity_rate}")
        if len(self.radius_offsets) != self.annotator_count:
            raise ValueError("radius_offsets length must equal annotator_count")


def _disk_mask(size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2).astype(np.int64)


def make_toy_dataset(spec: ToySpec) -> list:
    """Seeded synthetic cases: a soft-edged bright disk on a noisy background.

    Ambiguous cases get annotator-dependent boundary radii; unambiguous
    cases get identical annotations from every annotator. Images are
    quantized to 8-bit so the on-disk round trip is exact.
    """
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    cases = []
    for k in range(spec.case_count):
        base_r = size / 4 + rng.integers(-1, 2)
        jitter = size // 8
        cy = size / 2 + rng.integers(-jitter, jitter + 1)
        cx = size / 2 + rng.integers(-jitter, jitter + 1)
        ambiguous = rng.random() < spec.ambiguity_rate

        yy, xx = np.mgrid[0:size, 0:size]
        rho = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        edge_w = 2.0  # soft-edge half width: the genuinely ambiguous band
        profile = np.clip((base_r + edge_w - rho) / (2 * edge_w), 0.0, 1.0)
        intensity = 0.2 + 0.6 * profile + rng.normal(0.0, 0.04, size=(size, size))
        img8 = np.clip(np.round(255 * intensity), 0, 255).astype(np.uint8)

        offsets = spec.radius_offsets if ambiguous else (0.0,) * spec.annotator_count
        annotations = [_disk_mask(size, cy, cx, base_r + off) for off in offsets]
        cases.append(
            SegmentationCase(
                image=img8.astype(np.float32)[None],
                annotations=annotations,
                case_id=f"case_{k:04d}",
                spacing=(1.0, 1.0),
            )
        )
    return cases


def write_cases(cases, root) -> None:
    root = Path(root)
    for case in cases:
        d = root / case.case_id
        d.mkdir(parents=True, exist_ok=True)
        img = case.image
        if img.shape[0] != 1:
            raise ValueError("PNG writer supports single-channel images only")
        Image.fromarray(np.clip(img[0], 0, 255).astype(np.uint8)).save(d / "image.png")
        for k, ann in enumerate(case.annotations):
            Image.fromarray(ann.astype(np.uint8)).save(d / f"annotation_{k}.png")
        if case.spacing is not None:
            (d / "meta.txt").write_text(
                f"spacing: {case.spacing[0]} {case.spacing[1]}\n"
            )


def _read_meta(path: Path):
    if not path.exists():
        return None
    for line in path.read_text().splitlines():
        key, _, value = line.partition(":")
        if key.strip() == "spacing":
            parts = value.split()
            return (float(parts[0]), float(parts[1]))
    return None


def load_cases(root, layout: str = "multi_annotator"):
    """Yield cases from the documented directory layout in sorted id order."""
    if layout not in ("multi_annotator", "multi_class"):
        raise ValueError(f"unknown layout {layout!r}")
    root = Path(root)
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        img_path = d / "image.png"
        if not img_path.exists():
            raise FileNotFoundError(f"case {d.name}: expected {img_path}")
        image = np.asarray(Image.open(img_path), dtype=np.float32)[None]
        if layout == "multi_class":
            ann_paths = [d / "annotation_labels.png"]
            if not ann_paths[0].exists():
                raise FileNotFoundError(f"case {d.name}: expected {ann_paths[0]}")
        else:
            ann_paths = sorted(d.glob("annotation_[0-9]*.png"))
            if not ann_paths:
                raise FileNotFoundError(
                    f"case {d.name}: expected annotation_<k>.png files in {d}"
                )
        annotations = [np.asarray(Image.open(p), dtype=np.int64) for p in ann_paths]
        yield SegmentationCase(
            image=image,
            annotations=annotations,
            case_id=d.name,
            spacing=_read_meta(d / "meta.txt"),
        )


def preprocess(case: SegmentationCase, input_size, output_size):
    """Resize image (bilinear) to input_size and annotations (nearest) to
    output_size; normalize image intensities to zero mean / unit variance.

    Returns (image [C, h, w] float32, annotations list of [H, W] int64).
    """
    in_h, in_w = input_size
    out_h, out_w = output_size
    img = case.image
    if img.shape[-2:] != (in_h, in_w):
        chans = [
            cv2.resize(c, (in_w, in_h), interpolation=cv2.INTER_LINEAR)
            for c in img
        ]
        img = np.stack(chans)
    img = img.astype(np.float32)
    img = (img - img.mean()) / (img.std() + 1e-8)

    anns = []
    for ann in case.annotations:
        if ann.shape != (out_h, out_w):
            ann = cv2.resize(
                ann.astype(np.int32), (out_w, out_h), interpolation=cv2.INTER_NEAREST
            )
        anns.append(ann.astype(np.int64))
    return img, anns


def _blur_kernel(sigma: float) -> np.ndarray:
    """Pixel-integrated Gaussian kernel, truncated at radius ceil(3*sigma)."""
    radius = math.ceil(3 * sigma)
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    upper = (k + 0.5) / (sigma * math.sqrt(2.0))
    lower = (k - 0.5) / (sigma * math.sqrt(2.0))
    w = 0.5 * (erf(upper) - erf(lower))
    return w / w.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; sigma = 0 is the identity."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return image.copy()
    kernel = _blur_kernel(sigma)
    out = image.astype(np.float64)
    out = correlate1d(out, kernel, axis=-1, mode="reflect")
    out = correlate1d(out, kernel, axis=-2, mode="reflect")
    return out.astype(image.dtype)


def random_patch(image: np.ndarray, ratio: float, rng: np.random.Generator):
    """Stamp a square out-of-range patch of area ratio*H*W at a uniform
    location fully inside bounds; returns (patched image, bool mask [H, W])."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    h, w = image.shape[-2:]
    side = int(round(math.sqrt(ratio * h * w)))
    if side < 1 or side > min(h, w):
        raise ValueError(f"patch side {side} does not fit into {h}x{w}")
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    fill = float(image.max() + 3.0 * image.std())
    out = image.copy()
    out[..., top : top + side, left : left + side] = fill
    mask = np.zeros((h, w), dtype=bool)
    mask[top : top + side, left : left + side] = True
    return out, mask
