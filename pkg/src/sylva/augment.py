"""Weak and strong augmentation pipelines plus bounding-box-aware cropping.

Weak augmentation is random horizontal flip plus integer pixel translation.
Strong augmentation follows the learned-policy scheme: for each application a
fixed number of transforms is drawn (transform uniformly, magnitude bin by
its learned weight), and the policy's bin weights are refreshed from how well
the model predicts labelled examples it has distorted.

Images are numpy arrays (H, W, C), float32 in [0, 1]; every transform
preserves shape and the value range after clamping.
"""

from __future__ import annotations

import json
import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

FILL_GRAY = 0.5


@dataclass(frozen=True)
class WeakAugmentConfig:
    flip_prob: float = 0.5
    shift_frac: float = 0.125

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be in [0, 1]")
        if not 0.0 <= self.shift_frac <= 0.5:
            raise ValueError("shift_frac must be in [0, 0.5]")


def weak_augment(image: np.ndarray, config: WeakAugmentConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Random flip-and-shift. Degenerate configs are the identity."""
    out = image
    if config.flip_prob > 0 and rng.random() < config.flip_prob:
        out = out[:, ::-1, :]
    h, w = out.shape[:2]
    my = int(round(config.shift_frac * h))
    mx = int(round(config.shift_frac * w))
    if my or mx:
        dy = int(rng.integers(-my, my + 1)) if my else 0
        dx = int(rng.integers(-mx, mx + 1)) if mx else 0
        if dy or dx:
            shifted = np.zeros_like(out)
            ys, yd = _shift_slices(h, dy)
            xs, xd = _shift_slices(w, dx)
            shifted[yd, xd, :] = out[ys, xs, :]
            out = shifted
    return np.ascontiguousarray(out, dtype=np.float32)


def _shift_slices(size: int, delta: int) -> tuple[slice, slice]:
    if delta >= 0:
        return slice(0, size - delta), slice(delta, size)
    return slice(-delta, size), slice(0, size + delta)


def weak_augment_batch(images: np.ndarray, config: WeakAugmentConfig,
                       rng: np.random.Generator) -> np.ndarray:
    return np.stack([weak_augment(img, config, rng) for img in images])


# strong augmentation ---------------------------------------------------------


def _affine(image, matrix, offset):
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[:, :, c] = ndimage.affine_transform(
            image[:, :, c], matrix, offset=offset, order=1,
            mode="constant", cval=FILL_GRAY,
        )
    return out


def _centered_affine(image, matrix):
    h, w = image.shape[:2]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center
    return _affine(image, matrix, offset)


def _t_identity(image, mag, rng):
    return image


def _t_brightness(image, mag, rng):
    return image * (1.0 - 0.9 * mag)


def _t_contrast(image, mag, rng):
    mean = image.mean()
    return mean + (image - mean) * (1.0 - 0.9 * mag)


def _t_blur_blend(image, mag, rng):
    # sharpness stand-in: blend toward a 3x3 box blur
    blurred = ndimage.uniform_filter(image, size=(3, 3, 1), mode="nearest")
    return image * (1.0 - mag) + blurred * mag


def _t_rotate(image, mag, rng):
    sign = 1.0 if rng.random() < 0.5 else -1.0
    theta = np.deg2rad(sign * 30.0 * mag)
    c, s = np.cos(theta), np.sin(theta)
    return _centered_affine(image, np.array([[c, -s], [s, c]]))


def _t_shear_x(image, mag, rng):
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return _centered_affine(image, np.array([[1.0, sign * 0.3 * mag], [0.0, 1.0]]))


def _t_shear_y(image, mag, rng):
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return _centered_affine(image, np.array([[1.0, 0.0], [sign * 0.3 * mag, 1.0]]))


def _t_translate_x(image, mag, rng):
    sign = 1.0 if rng.random() < 0.5 else -1.0
    dx = sign * 0.3 * mag * image.shape[1]
    return _affine(image, np.eye(2), np.array([0.0, dx]))


def _t_translate_y(image, mag, rng):
    sign = 1.0 if rng.random() < 0.5 else -1.0
    dy = sign * 0.3 * mag * image.shape[0]
    return _affine(image, np.eye(2), np.array([dy, 0.0]))


def _t_solarize(image, mag, rng):
    threshold = 1.0 - mag
    return np.where(image > threshold, 1.0 - image, image)


def _t_cutout(image, mag, rng):
    h, w = image.shape[:2]
    size = int(round(0.5 * mag * min(h, w)))
    if size == 0:
        return image
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    y0, y1 = max(0, cy - size // 2), min(h, cy + (size + 1) // 2)
    x0, x1 = max(0, cx - size // 2), min(w, cx + (size + 1) // 2)
    out = image.copy()
    out[y0:y1, x0:x1, :] = FILL_GRAY
    return out


TRANSFORMS = {
    "identity": _t_identity,
    "brightness": _t_brightness,
    "contrast": _t_contrast,
    "blur_blend": _t_blur_blend,
    "rotate": _t_rotate,
    "shear_x": _t_shear_x,
    "shear_y": _t_shear_y,
    "translate_x": _t_translate_x,
    "translate_y": _t_translate_y,
    "solarize": _t_solarize,
    "cutout": _t_cutout,
}

DEFAULT_TRANSFORMS = (
    "brightness", "contrast", "blur_blend", "rotate", "shear_x", "shear_y",
    "translate_x", "translate_y", "solarize", "cutout",
)


@dataclass(frozen=True)
class AppliedTransform:
    name: str
    bin: int


@dataclass
class CtaPolicy:
    """Learned magnitude-bin weights, one vector per transform.

    Bin b maps to magnitude b/(bins-1). Sampling normalises a transform's
    weights by their max and zeroes bins below `threshold`; the bin weight
    update is a decay toward the prediction-match score.
    """

    transforms: tuple[str, ...] = DEFAULT_TRANSFORMS
    bins: int = 17
    decay: float = 0.99
    threshold: float = 0.8
    depth: int = 2
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        unknown = [t for t in self.transforms if t not in TRANSFORMS]
        if unknown:
            raise ValueError(f"unknown transforms: {unknown}")
        if self.bins < 2:
            raise ValueError("every transform needs at least 2 magnitude bins")
        if self.weights is None:
            self.weights = np.ones((len(self.transforms), self.bins), dtype=np.float64)
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (len(self.transforms), self.bins):
                raise ValueError("weights shape must be (transforms, bins)")
        if np.any(self.weights < 0) or np.any(self.weights > 1):
            raise ValueError("bin weights must lie in [0, 1]")

    def magnitude(self, bin_index: int) -> float:
        return bin_index / (self.bins - 1)

    def sample_bin(self, t_index: int, rng: np.random.Generator) -> int:
        w = self.weights[t_index]
        top = w.max()
        if top <= 0.0:
            log.warning("all-zero bin weights for '%s'; sampling uniformly",
                        self.transforms[t_index])
            p = np.full(self.bins, 1.0 / self.bins)
        else:
            p = w / top
            p[p < self.threshold] = 0.0
            total = p.sum()
            if total <= 0.0:
                log.warning("no bin above threshold for '%s'; sampling uniformly",
                            self.transforms[t_index])
                p = np.full(self.bins, 1.0 / self.bins)
            else:
                p = p / total
        return int(rng.choice(self.bins, p=p))

    def to_json(self) -> str:
        return json.dumps(
            {
                "transforms": list(self.transforms),
                "bins": self.bins,
                "decay": self.decay,
                "threshold": self.threshold,
                "depth": self.depth,
                "weights": self.weights.tolist(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, blob: str) -> "CtaPolicy":
        d = json.loads(blob)
        return cls(
            transforms=tuple(d["transforms"]),
            bins=d["bins"],
            decay=d["decay"],
            threshold=d["threshold"],
            depth=d["depth"],
            weights=np.asarray(d["weights"], dtype=np.float64),
        )


def strong_augment(
    image: np.ndarray, policy: CtaPolicy, rng: np.random.Generator
) -> tuple[np.ndarray, list[AppliedTransform]]:
    """Apply `policy.depth` sampled transforms in order; the record lists
    each (transform, bin) so the policy can be updated later."""
    out = np.asarray(image, dtype=np.float32)
    record: list[AppliedTransform] = []
    for _ in range(policy.depth):
        t_index = int(rng.integers(0, len(policy.transforms)))
        name = policy.transforms[t_index]
        bin_index = policy.sample_bin(t_index, rng)
        out = TRANSFORMS[name](out, policy.magnitude(bin_index), rng)
        record.append(AppliedTransform(name=name, bin=bin_index))
    out = np.clip(out, 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32), record


def strong_augment_batch(images, policy, rng):
    outs, records = [], []
    for img in images:
        out, rec = strong_augment(img, policy, rng)
        outs.append(out)
        records.append(rec)
    return np.stack(outs), records


def cta_update(
    policy: CtaPolicy,
    probs: np.ndarray,
    label_probs: np.ndarray,
    record: list[AppliedTransform],
) -> CtaPolicy:
    """Refresh the bins named in one applied-transform record.

    match = 1 - 0.5 * L1(model probs, one-hot label), clipped to [0, 1];
    new weight = decay * old + (1 - decay) * match. Only recorded bins move.
    """
    match = 1.0 - 0.5 * float(np.abs(np.asarray(probs) - np.asarray(label_probs)).sum())
    match = min(1.0, max(0.0, match))
    index = {name: i for i, name in enumerate(policy.transforms)}
    for applied in record:
        if applied.name not in index:
            raise KeyError(f"record references unknown transform '{applied.name}'")
        t = index[applied.name]
        old = policy.weights[t, applied.bin]
        policy.weights[t, applied.bin] = policy.decay * old + (1.0 - policy.decay) * match
    return policy


# bounding boxes ---------------------------------------------------------------


@dataclass(frozen=True)
class BboxAnnotation:
    image_id: str
    feature_class: str
    xmin: int
    ymin: int
    xmax: int
    ymax: int

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError(
                f"degenerate bbox on '{self.image_id}': "
                f"({self.xmin},{self.ymin},{self.xmax},{self.ymax})"
            )

    def area(self) -> int:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


def parse_voc_xml(path, image_id: str | None = None) -> list[BboxAnnotation]:
    """LabelImg-style VOC XML: object name + bndbox corners."""
    tree = ET.parse(str(path))
    root = tree.getroot()
    if image_id is None:
        node = root.find("filename")
        image_id = node.text.strip() if node is not None and node.text else Path(path).stem
    out = []
    for obj in root.iter("object"):
        name = obj.findtext("name", default="").strip()
        box = obj.find("bndbox")
        if box is None:
            continue
        out.append(
            BboxAnnotation(
                image_id=image_id,
                feature_class=name,
                xmin=int(float(box.findtext("xmin"))),
                ymin=int(float(box.findtext("ymin"))),
                xmax=int(float(box.findtext("xmax"))),
                ymax=int(float(box.findtext("ymax"))),
            )
        )
    return out


def parse_bbox_jsonl(path) -> list[BboxAnnotation]:
    """JSON-lines twin of the VOC form: one object per line with image_id,
    class and pixel corners. Parses to the same annotation set."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                out.append(
                    BboxAnnotation(
                        image_id=str(d["image_id"]),
                        feature_class=str(d["class"]),
                        xmin=int(d["xmin"]),
                        ymin=int(d["ymin"]),
                        xmax=int(d["xmax"]),
                        ymax=int(d["ymax"]),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"bad bbox record at line {line_no}: {exc}") from exc
    return out


@dataclass(frozen=True)
class BboxCropConfig:
    out_hw: tuple[int, int]
    jitter_lo: float = -0.10
    jitter_hi: float = 0.25
    min_coverage: float = 0.8
    max_tries: int = 10


def resize_image(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    h, w = image.shape[:2]
    if (h, w) == tuple(out_hw):
        return np.ascontiguousarray(image, dtype=np.float32)
    zoom = (out_hw[0] / h, out_hw[1] / w, 1.0)
    out = ndimage.zoom(np.asarray(image, dtype=np.float32), zoom, order=1,
                       mode="nearest", grid_mode=True)
    return np.clip(np.ascontiguousarray(out[: out_hw[0], : out_hw[1]],
                                        dtype=np.float32), 0.0, 1.0)


def center_crop_square(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    side = min(h, w)
    y0 = (h - side) // 2
    x0 = (w - side) // 2
    return image[y0 : y0 + side, x0 : x0 + side, :]


def crop_to_bbox(
    image: np.ndarray,
    annotations: list[BboxAnnotation],
    rng: np.random.Generator,
    config: BboxCropConfig,
) -> np.ndarray:
    """Crop around one chosen bbox, each side jittered independently, with
    the crop guaranteed to cover at least min_coverage of the bbox area.
    Without usable annotations falls back to a centered crop."""
    h, w = image.shape[:2]
    usable = []
    for ann in annotations:
        if 0 <= ann.xmin and ann.xmax <= w and 0 <= ann.ymin and ann.ymax <= h:
            usable.append(ann)
        else:
            log.warning("bbox outside image bounds on '%s'; skipped", ann.image_id)
    if not usable:
        return resize_image(center_crop_square(image), config.out_hw)
    ann = usable[int(rng.integers(0, len(usable)))]
    bw = ann.xmax - ann.xmin
    bh = ann.ymax - ann.ymin
    rect = (ann.xmin, ann.ymin, ann.xmax, ann.ymax)
    for _ in range(config.max_tries):
        jit = rng.uniform(config.jitter_lo, config.jitter_hi, size=4)
        x0 = max(0, int(round(ann.xmin - jit[0] * bw)))
        y0 = max(0, int(round(ann.ymin - jit[1] * bh)))
        x1 = min(w, int(round(ann.xmax + jit[2] * bw)))
        y1 = min(h, int(round(ann.ymax + jit[3] * bh)))
        if x1 <= x0 or y1 <= y0:
            continue
        inter = max(0, min(x1, ann.xmax) - max(x0, ann.xmin)) * max(
            0, min(y1, ann.ymax) - max(y0, ann.ymin)
        )
        if inter / ann.area() >= config.min_coverage:
            rect = (x0, y0, x1, y1)
            break
    x0, y0, x1, y1 = rect
    return resize_image(image[y0:y1, x0:x1, :], config.out_hw)
