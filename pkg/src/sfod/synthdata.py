"""Procedural two-domain detection benchmark.

Scenes are overhead-style: a textured background with axis-aligned
"vehicles" (rectangles with a windshield band) and "airplanes" (an ellipse
fuselage crossed by wings and a tail plane). Domains differ only in
appearance: palette, background texture, a global per-channel affine colour
shift, additive Gaussian noise and blur. Object geometry is drawn by the
same procedure in every domain.

On disk a dataset is::

    <root>/manifest.json
    <root>/images/<id>.png          8-bit RGB
    <root>/annotations/<id>.json    {"boxes": [[x1, y1, x2, y2], ...], "classes": [...]}
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import BoundingBox, LabeledSample, clip_box, iou_matrix

log = logging.getLogger(__name__)

CLASS_NAMES = {1: "vehicle", 2: "airplane"}
BACKGROUND_KINDS = ("flat", "noise", "gradient")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    name: str
    palette: tuple[tuple[float, float, float], ...] = (
        (0.85, 0.85, 0.82),
        (0.80, 0.25, 0.20),
        (0.20, 0.30, 0.75),
        (0.90, 0.80, 0.30),
        (0.15, 0.15, 0.18),
    )
    background: str = "noise"
    background_color: tuple[float, float, float] = (0.40, 0.45, 0.38)
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.0
    blur_radius: float = 0.0

    def validate(self):
        if self.background not in BACKGROUND_KINDS:
            raise ValueError(f"unknown background kind {self.background!r}")
        if not self.palette:
            raise ValueError("palette must not be empty")
        for rgb in (*self.palette, self.background_color):
            if len(rgb) != 3 or not all(0.0 <= v <= 1.0 for v in rgb):
                raise ValueError(f"colour {rgb} must be an RGB triple in [0, 1]")
        if len(self.gain) != 3 or any(g <= 0 for g in self.gain):
            raise ValueError("channel gains must be three positive numbers")
        if len(self.bias) != 3:
            raise ValueError("channel bias must have three entries")
        if not 0.0 <= self.noise_sigma <= 0.2:
            raise ValueError("noise_sigma must lie in [0, 0.2]")
        if self.blur_radius < 0:
            raise ValueError("blur_radius must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["palette"] = tuple(tuple(float(v) for v in c) for c in d["palette"])
        for key in ("background_color", "gain", "bias"):
            d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int] = (128, 128)
    objects_per_image: tuple[int, int] = (2, 8)
    object_kinds: dict = field(default_factory=lambda: {1: "rectangle", 2: "airplane"})
    scale_range: tuple[float, float] = (14.0, 32.0)
    max_overlap_iou: float = 0.3
    seed: int = 0

    def validate(self):
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ValueError("image_size must be at least 32x32")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError("objects_per_image must be an ordered (min, max) pair")
        smin, smax = self.scale_range
        if not 4 <= smin <= smax < min(h, w):
            raise ValueError("scale_range must be ordered and fit inside the image")
        for kind in self.object_kinds.values():
            if kind not in ("rectangle", "airplane"):
                raise ValueError(f"unknown object kind {kind!r}")
        if any(int(k) < 1 for k in self.object_kinds):
            raise ValueError("class ids start at 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["object_kinds"] = {str(k): v for k, v in sorted(self.object_kinds.items())}
        return d


PRESETS: dict[str, DomainSpec] = {
    "source": DomainSpec(name="source", noise_sigma=0.01),
    "target-color": DomainSpec(
        name="target-color", gain=(1.4, 1.0, 0.7), bias=(0.0, 0.0, 0.02), noise_sigma=0.05
    ),
    "target-noise": DomainSpec(name="target-noise", noise_sigma=0.12, blur_radius=0.6),
    "target-style": DomainSpec(
        name="target-style",
        palette=((0.95, 0.95, 0.95), (0.60, 0.10, 0.45), (0.10, 0.55, 0.55), (0.95, 0.55, 0.15)),
        background="gradient",
        background_color=(0.55, 0.50, 0.42),
        noise_sigma=0.03,
        blur_radius=1.0,
    ),
}


def _background(domain: DomainSpec, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    base = np.clip(np.asarray(domain.background_color) + rng.uniform(-0.05, 0.05, 3), 0, 1)
    img = np.broadcast_to(base[:, None, None], (3, h, w)).copy()
    if domain.background == "noise":
        coarse = rng.normal(0.0, 1.0, (8, 8))
        smooth = ndimage.zoom(coarse, (h / 8, w / 8), order=3)[:h, :w]
        smooth = smooth / (np.abs(smooth).max() + 1e-8)
        img += 0.08 * smooth[None] + rng.normal(0.0, 0.015, (1, h, w))
    elif domain.background == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = (np.cos(angle) * xx / w + np.sin(angle) * yy / h)
        ramp = ramp - ramp.mean()
        img += 0.25 * ramp[None]
    return np.clip(img, 0, 1)


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _object_layers(kind: str, size: float, h: int, w: int, cy: float, cx: float,
                   vertical: bool) -> list[tuple[np.ndarray, float]]:
    """(mask, brightness) layers painted in order; the union is the object support."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if vertical:
        yy, xx = xx, yy
        cy, cx = cx, cy
    if kind == "rectangle":
        half_l = size / 2
        half_s = size / 4
        body = (np.abs(xx - cx) <= half_l) & (np.abs(yy - cy) <= half_s)
        band_x = cx + half_l * 0.35
        band = body & (np.abs(xx - band_x) <= max(1.0, size * 0.08))
        return [(body, 1.0), (band, 0.45)]
    # airplane: fuselage along x, wings along y through the middle, tail plane at the rear
    fuselage = _ellipse(yy, xx, cy, cx, max(1.5, size * 0.09), size / 2)
    wings = (np.abs(xx - cx) <= max(1.0, size * 0.08)) & (np.abs(yy - cy) <= size * 0.42)
    tail = (np.abs(xx - (cx - size * 0.40)) <= max(1.0, size * 0.05)) & (np.abs(yy - cy) <= size * 0.17)
    return [(fuselage | wings | tail, 1.0), (fuselage, 0.85)]


def _support_box(mask: np.ndarray) -> Optional[tuple[int, int, int, int]]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def render_scene(domain: DomainSpec, scene: SceneSpec, rng: np.random.Generator):
    """Render one image.

    Returns ``(image, boxes, classes, masks)`` where ``image`` is (3, H, W) in
    [0, 1], ``boxes`` an (n, 4) int array of raster bounds and ``masks`` the
    per-object boolean supports the boxes were taken from.
    """
    h, w = scene.image_size
    img = _background(domain, h, w, rng)
    kinds = sorted(scene.object_kinds.items())
    n_obj = int(rng.integers(scene.objects_per_image[0], scene.objects_per_image[1] + 1))
    boxes: list[tuple[int, int, int, int]] = []
    classes: list[int] = []
    masks: list[np.ndarray] = []
    for _ in range(n_obj):
        for _attempt in range(50):
            cls_id, kind = kinds[int(rng.integers(len(kinds)))]
            size = float(rng.uniform(*scene.scale_range))
            vertical = bool(rng.integers(2))
            cy = float(rng.uniform(size / 2 + 1, h - size / 2 - 1))
            cx = float(rng.uniform(size / 2 + 1, w - size / 2 - 1))
            layers = _object_layers(kind, size, h, w, cy, cx, vertical)
            support = np.logical_or.reduce([m for m, _ in layers])
            box = _support_box(support)
            if box is None:
                continue
            if boxes:
                ious = iou_matrix(np.array([box], float), np.array(boxes, float))[0]
                grown = np.array(boxes, float) + np.array([-2, -2, 2, 2])
                touching = iou_matrix(np.array([box], float), grown)[0] > 0
                if ious.max() > scene.max_overlap_iou or touching.any():
                    continue
            colour = np.asarray(domain.palette[int(rng.integers(len(domain.palette)))])
            colour = np.clip(colour + rng.uniform(-0.05, 0.05, 3), 0, 1)
            for mask, brightness in layers:
                img[:, mask] = (colour * brightness)[:, None]
            boxes.append(box)
            classes.append(int(cls_id))
            masks.append(support)
            break
    img = img * np.asarray(domain.gain)[:, None, None] + np.asarray(domain.bias)[:, None, None]
    if domain.blur_radius > 0:
        img = ndimage.gaussian_filter(img, sigma=(0, domain.blur_radius, domain.blur_radius))
    if domain.noise_sigma > 0:
        img = img + rng.normal(0.0, domain.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    box_arr = np.array(boxes, dtype=np.int64).reshape(-1, 4)
    return img, box_arr, classes, masks


def image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)]))


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def generate_domain(domain: DomainSpec, scene: SceneSpec, n_images: int, out_dir) -> dict:
    """Write ``n_images`` rendered scenes under ``out_dir`` and return the manifest."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    domain.validate()
    scene.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    ids = [f"{i:06d}" for i in range(n_images)]
    for i, image_id in enumerate(ids):
        img, boxes, classes, _ = render_scene(domain, scene, image_rng(scene.seed, i))
        Image.fromarray(_to_uint8(img), mode="RGB").save(out / "images" / f"{image_id}.png")
        ann = {"boxes": [[float(v) for v in b] for b in boxes.tolist()], "classes": classes}
        (out / "annotations" / f"{image_id}.json").write_text(json.dumps(ann) + "\n")
    manifest = {
        "ids": ids,
        "domain": asdict(domain),
        "scene": scene.to_dict(),
        "classes": {str(k): v for k, v in CLASS_NAMES.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest {path}: {exc}") from exc
    if not isinstance(manifest.get("ids"), list):
        raise DatasetError(f"manifest {path} has no 'ids' list")
    return manifest


def read_image(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise DatasetError(f"corrupt image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1) / 255.0


def read_annotation(path: Path, height: int, width: int):
    if not path.is_file():
        raise FileNotFoundError(f"annotation not found: {path}")
    try:
        ann = json.loads(path.read_text())
        raw_boxes, raw_classes = ann["boxes"], ann["classes"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"corrupt annotation {path}: {exc}") from exc
    if len(raw_boxes) != len(raw_classes):
        raise DatasetError(f"annotation {path}: boxes and classes differ in length")
    boxes, classes = [], []
    for coords, cls_id in zip(raw_boxes, raw_classes):
        if len(coords) != 4:
            raise DatasetError(f"annotation {path}: malformed box {coords}")
        x1, y1, x2, y2 = (float(v) for v in coords)
        if x1 >= width or y1 >= height or x2 <= 0 or y2 <= 0:
            raise DatasetError(f"annotation {path}: box {coords} outside {width}x{height} image")
        try:
            box = clip_box(BoundingBox(x1, y1, x2, y2), height, width)
        except ValueError as exc:
            raise DatasetError(f"annotation {path}: {exc}") from exc
        if box is None:
            continue
        boxes.append(box)
        classes.append(int(cls_id))
    return boxes, classes


def load_dataset(root, annotations: bool = True) -> list[LabeledSample]:
    """Load samples in manifest order.

    With ``annotations=False`` only images are read and annotation files are
    never opened (the unlabeled-target path).
    """
    root = Path(root)
    manifest = read_manifest(root)
    samples = []
    for image_id in manifest["ids"]:
        image = read_image(root / "images" / f"{image_id}.png")
        boxes, classes = [], []
        if annotations:
            boxes, classes = read_annotation(root / "annotations" / f"{image_id}.json", image.shape[1], image.shape[2])
        samples.append(LabeledSample(image=image, boxes=tuple(boxes), classes=tuple(classes), name=image_id))
    return samples


def resize_short_edge(sample: LabeledSample, target: int) -> LabeledSample:
    if target < 32:
        raise ValueError("target short edge must be >= 32")
    h, w = sample.height, sample.width
    scale = target / min(h, w)
    if scale == 1.0:
        return sample
    import torch
    import torch.nn.functional as F

    new_h, new_w = int(round(h * scale)), int(round(w * scale))
    t = torch.from_numpy(np.ascontiguousarray(sample.image))[None]
    resized = F.interpolate(t, size=(new_h, new_w), mode="bilinear", align_corners=False)[0]
    image = np.clip(resized.numpy(), 0.0, 1.0)
    boxes = tuple(
        BoundingBox(b.x1 * scale, b.y1 * scale, b.x2 * scale, b.y2 * scale) for b in sample.boxes
    )
    return LabeledSample(image=image, boxes=boxes, classes=sample.classes, weight=sample.weight, name=sample.name)


def channel_means(samples: Sequence[LabeledSample]) -> np.ndarray:
    return np.mean([s.image.reshape(3, -1).mean(axis=1) for s in samples], axis=0)
