"""Synthetic nuclei-like scenes with box annotations, augmentation, and disk I/O.

Targets are filled ellipses in a dark stain colour with texture noise.
Distractors drawn from the same colour distribution (rings and thin streaks)
are not annotated; they are the hard negatives a detector has to reject.
"""
import json
import os
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image

from srpn.geometry import BBox, iou_matrix

ANNOTATION_FIELDS = ("image", "boxes")


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    object_count_range: tuple = (2, 5)
    radius_range: tuple = (4.0, 8.0)
    ellipse_eccentricity_range: tuple = (0.0, 0.75)
    overlap_allowance: float = 0.05
    foreground_color: tuple = (0.36, 0.20, 0.52)
    foreground_color_std: float = 0.06
    background_color: tuple = (0.88, 0.68, 0.80)
    background_color_std: float = 0.04
    pixel_noise: float = 0.04
    clutter_count_range: tuple = (2, 4)
    ring_width: float = 1.6
    max_retries: int = 200

    def __post_init__(self):
        for name in ("object_count_range", "radius_range", "ellipse_eccentricity_range",
                     "clutter_count_range", "foreground_color", "background_color"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        lo, hi = self.radius_range
        if not 1.0 <= lo <= hi or 2 * hi >= self.image_size:
            raise ValueError(f"radius range {self.radius_range} unusable for size {self.image_size}")
        if self.object_count_range[0] < 0 or self.object_count_range[0] > self.object_count_range[1]:
            raise ValueError(f"bad object_count_range {self.object_count_range}")
        e_lo, e_hi = self.ellipse_eccentricity_range
        if not 0.0 <= e_lo <= e_hi < 1.0:
            raise ValueError(f"eccentricity range must lie in [0, 1), got {self.ellipse_eccentricity_range}")


@dataclass
class AnnotatedImage:
    image: np.ndarray               # [3, H, W] in [0, 1]
    boxes: list = field(default_factory=list)
    id: str = ""


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float        # semi-axis along angle
    b: float
    angle: float

    def half_extents(self):
        c, s = np.cos(self.angle), np.sin(self.angle)
        hx = np.sqrt((self.a * c) ** 2 + (self.b * s) ** 2)
        hy = np.sqrt((self.a * s) ** 2 + (self.b * c) ** 2)
        return hx, hy

    def box(self):
        hx, hy = self.half_extents()
        return BBox(self.cx - hx, self.cy - hy, 2 * hy, 2 * hx)

    def radial(self, size):
        """Normalised radius per pixel centre; <= 1 inside the ellipse."""
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        dx, dy = xx - self.cx, yy - self.cy
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = (dx * c + dy * s) / self.a
        v = (-dx * s + dy * c) / self.b
        return np.sqrt(u * u + v * v)


def _sample_ellipse(rng, spec, scale=1.0):
    r = rng.uniform(*spec.radius_range) * scale
    e = rng.uniform(*spec.ellipse_eccentricity_range)
    b = r * np.sqrt(1.0 - e * e)
    angle = rng.uniform(0.0, np.pi)
    probe = Ellipse(0.0, 0.0, r, b, angle)
    hx, hy = probe.half_extents()
    n = spec.image_size
    cx = rng.uniform(hx, n - hx)
    cy = rng.uniform(hy, n - hy)
    return Ellipse(cx, cy, r, b, angle)


def _place(rng, spec, existing, make):
    for _ in range(spec.max_retries):
        shape = make()
        box = np.array([tuple(shape.box())])
        if not existing or iou_matrix(box, np.array(existing)).max() <= spec.overlap_allowance:
            return shape
    raise RuntimeError(
        f"could not place a shape with IoU <= {spec.overlap_allowance} after {spec.max_retries} tries")


def _paint(img, mask, rng, spec):
    color = np.clip(np.asarray(spec.foreground_color) + rng.normal(0, spec.foreground_color_std, 3), 0, 1)
    texture = 1.0 + 0.08 * rng.normal(size=mask.shape)
    for ch in range(3):
        img[ch] = np.where(mask, np.clip(color[ch] * texture, 0, 1), img[ch])


def render_scene(spec, rng, with_objects=True):
    """One image with its target boxes; ``with_objects=False`` draws clutter only."""
    n = spec.image_size
    bg = np.clip(np.asarray(spec.background_color) + rng.normal(0, spec.background_color_std, 3), 0, 1)
    img = np.broadcast_to(bg[:, None, None], (3, n, n)).copy()
    # low-frequency tissue shading
    yy, xx = np.mgrid[0:n, 0:n] / n
    phase = rng.uniform(0, 2 * np.pi, 2)
    img *= 1.0 + 0.05 * np.sin(2 * np.pi * xx + phase[0]) * np.cos(2 * np.pi * yy + phase[1])

    occupied = []
    targets = []
    if with_objects:
        count = int(rng.integers(spec.object_count_range[0], spec.object_count_range[1] + 1))
        for _ in range(count):
            el = _place(rng, spec, occupied, lambda: _sample_ellipse(rng, spec))
            occupied.append(tuple(el.box()))
            targets.append(el)

    clutter = int(rng.integers(spec.clutter_count_range[0], spec.clutter_count_range[1] + 1))
    for _ in range(clutter):
        if rng.random() < 0.6:
            ring = _place(rng, spec, occupied, lambda: _sample_ellipse(rng, spec, scale=1.1))
            occupied.append(tuple(ring.box()))
            rad = ring.radial(n)
            inner = 1.0 - spec.ring_width / min(ring.a, ring.b)
            _paint(img, (rad <= 1.0) & (rad >= inner), rng, spec)
        else:
            length = rng.uniform(2.0, 3.0) * spec.radius_range[1]
            streak = _place(rng, spec, occupied, lambda: Ellipse(
                rng.uniform(0.25 * n, 0.75 * n), rng.uniform(0.25 * n, 0.75 * n),
                length / 2, 1.0, rng.uniform(0, np.pi)))
            occupied.append(tuple(streak.box()))
            _paint(img, streak.radial(n) <= 1.0, rng, spec)

    for el in targets:
        _paint(img, el.radial(n) <= 1.0, rng, spec)

    img += rng.normal(0, spec.pixel_noise, img.shape)
    return np.clip(img, 0.0, 1.0), [el.box() for el in targets], targets


def _image_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate_dataset(spec, n_images, seed, with_objects=True, prefix="img"):
    """``n_images`` scenes; image ``i`` depends only on (spec, seed, i)."""
    out = []
    for i in range(n_images):
        img, boxes, _ = render_scene(spec, _image_rng(seed, i), with_objects)
        out.append(AnnotatedImage(img, boxes, f"{prefix}_{i:05d}"))
    return out


def generate_negatives(spec, n_images, seed):
    """Clutter-only scenes with no annotated objects."""
    return generate_dataset(spec, n_images, seed, with_objects=False, prefix="neg")


# -- augmentation --------------------------------------------------------------

def hflip_box(box, width):
    return BBox(width - box.x - box.w, box.y, box.h, box.w)


def vflip_box(box, height):
    return BBox(box.x, height - box.y - box.h, box.h, box.w)


def color_jitter(image, rng, brightness=0.2, contrast=0.2, saturation=0.2, hue=0.05):
    img = image * rng.uniform(1 - brightness, 1 + brightness)
    mean = img.mean()
    img = (img - mean) * rng.uniform(1 - contrast, 1 + contrast) + mean
    hsv = rgb_to_hsv(np.clip(img, 0, 1).transpose(1, 2, 0))
    hsv[..., 1] = np.clip(hsv[..., 1] * rng.uniform(1 - saturation, 1 + saturation), 0, 1)
    hsv[..., 0] = (hsv[..., 0] + rng.uniform(-hue, hue)) % 1.0
    return np.clip(hsv_to_rgb(hsv).transpose(2, 0, 1), 0.0, 1.0)


def augment(item, seed, flip_prob=0.5, hflip=None, vflip=None, jitter=True):
    """Random horizontal/vertical flips (each with ``flip_prob``) and colour jitter.

    ``hflip`` / ``vflip`` force a flip on or off instead of sampling it.
    """
    rng = np.random.default_rng(seed)
    do_h = rng.random() < flip_prob
    do_v = rng.random() < flip_prob
    do_h = do_h if hflip is None else hflip
    do_v = do_v if vflip is None else vflip
    img = item.image
    _, h, w = img.shape
    boxes = [BBox(*b) for b in item.boxes]
    if do_h:
        img = img[:, :, ::-1]
        boxes = [hflip_box(b, w) for b in boxes]
    if do_v:
        img = img[:, ::-1, :]
        boxes = [vflip_box(b, h) for b in boxes]
    img = color_jitter(img, rng) if jitter else np.ascontiguousarray(img)
    return AnnotatedImage(img, boxes, item.id)


# -- disk I/O ------------------------------------------------------------------

def save_png(path, image):
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_annotations(path, records):
    """Write ``[(image_path, boxes), ...]`` as JSON lines."""
    with open(path, "w", encoding="utf-8") as f:
        for image_path, boxes in records:
            rec = {"image": str(image_path), "boxes": [[float(v) for v in b] for b in boxes]}
            f.write(json.dumps(rec) + "\n")


def load_annotations(path):
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise ValueError(f"{path}:{lineno}: expected an object")
            unknown = sorted(set(rec) - set(ANNOTATION_FIELDS))
            if unknown:
                raise ValueError(f"{path}:{lineno}: unknown field {unknown[0]!r}")
            missing = [k for k in ANNOTATION_FIELDS if k not in rec]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing field {missing[0]!r}")
            if not isinstance(rec["image"], str):
                raise ValueError(f"{path}:{lineno}: 'image' must be a string")
            boxes = []
            for b in rec["boxes"] if isinstance(rec["boxes"], list) else [None]:
                if not (isinstance(b, list) and len(b) == 4
                        and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in b)):
                    raise ValueError(f"{path}:{lineno}: each box must be [x, y, h, w] numbers, got {b!r}")
                boxes.append(BBox(*(float(v) for v in b)))
            records.append((rec["image"], boxes))
    return records


def write_dataset(items, out_dir, annotation_name="annotations.jsonl"):
    """PNG per image under ``out_dir/images`` plus one annotation file."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    records = []
    for item in items:
        rel = os.path.join("images", f"{item.id}.png")
        save_png(os.path.join(out_dir, rel), item.image)
        records.append((rel, item.boxes))
    save_annotations(os.path.join(out_dir, annotation_name), records)
    return records


def read_dataset(data_dir, annotation_name="annotations.jsonl"):
    items = []
    for rel, boxes in load_annotations(os.path.join(data_dir, annotation_name)):
        img = load_png(os.path.join(data_dir, rel))
        items.append(AnnotatedImage(img, boxes, os.path.splitext(os.path.basename(rel))[0]))
    return items
