"""Procedural object images with painted anomalies.

Every sample is a single object (disk or rounded square) on a flat
background. Anomaly samples add one defect inside the object and carry the
full decomposition: whole image, anomaly mask, anomaly part (image times
mask), object mask and background image (image times inverted object mask).
Rasterization is hard-edged so all masks are exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigError, FormatError, GenerationError, PathError
from .maskgen import binary_close, binary_erode, label_components

OBJECT_KINDS = ("disk", "rounded_square")
ANOMALY_TYPES = ("scratch", "spot", "crack", "missing")
NORMAL = "normal"
MAX_ATTEMPTS = 100
MIN_CONTRAST = 0.2
MIN_ANOMALY_AREA = 4
FORMAT_VERSION = 1
FILE_KEYS = ("image", "anomaly_part", "anomaly_mask", "object_mask", "background")
MANIFEST_KEYS = ("image_size", "count", "anomaly_type", "seeds")

Interval = tuple[float, float]


def _rgb(lo: float, hi: float) -> tuple[Interval, Interval, Interval]:
    return ((lo, hi),) * 3


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 64
    object_kind: str = "disk"
    anomaly_type: str = "spot"
    count: int = 8
    rng_seed: int = 0
    background_color: tuple[Interval, ...] = _rgb(0.15, 0.3)
    object_color: tuple[Interval, ...] = _rgb(0.55, 0.8)
    anomaly_color: tuple[Interval, ...] = ((0.6, 0.95), (0.05, 0.3), (0.0, 0.2))

    def validate(self) -> "DatasetSpec":
        n = self.image_size
        if n < 32 or n & (n - 1):
            raise ConfigError(f"image_size must be a power of two >= 32, got {n}")
        if self.object_kind not in OBJECT_KINDS:
            raise ConfigError(f"object_kind must be one of {OBJECT_KINDS}, got {self.object_kind!r}")
        if self.anomaly_type not in ANOMALY_TYPES + (NORMAL,):
            raise ConfigError(f"anomaly_type must be one of {ANOMALY_TYPES}, got {self.anomaly_type!r}")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        for name in ("background_color", "object_color", "anomaly_color"):
            ranges = getattr(self, name)
            if len(ranges) != 3:
                raise ConfigError(f"{name} needs three per-channel intervals")
            for lo, hi in ranges:
                if not 0.0 <= lo <= hi <= 1.0:
                    raise ConfigError(f"{name} interval ({lo}, {hi}) not within [0, 1]")
        return self

    def sample_seeds(self) -> list[int]:
        return [sample_seed(self.rng_seed, i) for i in range(self.count)]


def sample_seed(rng_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([rng_seed, index]).generate_state(1)[0])


@dataclass
class SamplePair:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    anomaly_mask: np.ndarray  # H x W bool
    anomaly_part: np.ndarray
    object_mask: np.ndarray
    background: np.ndarray
    anomaly_type: str
    seed: int = 0
    meta: dict = field(default_factory=dict)


def _draw_color(rng: np.random.Generator, ranges) -> np.ndarray:
    return np.array([rng.uniform(lo, hi) for lo, hi in ranges], dtype=np.float32)


def _contrast(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max())


def _grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(n) + 0.5
    return np.meshgrid(c, c, indexing="ij")  # rows (y), cols (x)


def rasterize_disk(n: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = _grid(n)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def rasterize_rounded_square(n: int, cy: float, cx: float, half: float, corner: float) -> np.ndarray:
    yy, xx = _grid(n)
    dy = np.abs(yy - cy) - (half - corner)
    dx = np.abs(xx - cx) - (half - corner)
    inside_box = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    corner_zone = (dy > 0) & (dx > 0)
    in_corner = dy ** 2 + dx ** 2 <= corner ** 2
    return inside_box & (~corner_zone | in_corner)


def rasterize_ellipse(n: int, cy: float, cx: float, ry: float, rx: float, theta: float) -> np.ndarray:
    yy, xx = _grid(n)
    y, x = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * x + s * y
    v = -s * x + c * y
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def rasterize_polyline(n: int, points: np.ndarray, width: int = 1) -> np.ndarray:
    mask = np.zeros((n, n), dtype=bool)
    for (y0, x0), (y1, x1) in zip(points[:-1], points[1:]):
        steps = int(math.ceil(max(abs(y1 - y0), abs(x1 - x0)) * 3)) + 1
        ys = np.linspace(y0, y1, steps)
        xs = np.linspace(x0, x1, steps)
        iy = np.floor(ys).astype(int)
        ix = np.floor(xs).astype(int)
        ok = (iy >= 0) & (iy < n) & (ix >= 0) & (ix < n)
        mask[iy[ok], ix[ok]] = True
    if width >= 2:
        grown = mask.copy()
        grown[1:, :] |= mask[:-1, :]
        grown[:, 1:] |= mask[:, :-1]
        mask = grown
    return mask


def make_normal_sample(spec: DatasetSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One object on a flat background. Returns (image, object_mask)."""
    spec.validate()
    n = spec.image_size
    for _ in range(MAX_ATTEMPTS):
        bg = _draw_color(rng, spec.background_color)
        fg = _draw_color(rng, spec.object_color)
        if _contrast(bg, fg) >= MIN_CONTRAST:
            break
    else:
        raise GenerationError("object and background colour ranges never reach the minimum contrast")
    cy = n / 2 + rng.uniform(-0.1, 0.1) * n
    cx = n / 2 + rng.uniform(-0.1, 0.1) * n
    r = rng.uniform(0.25, 0.40) * n
    if spec.object_kind == "disk":
        obj = rasterize_disk(n, cy, cx, r)
    else:
        obj = rasterize_rounded_square(n, cy, cx, r, 0.3 * r)
    image = np.empty((n, n, 3), dtype=np.float32)
    image[:] = bg
    image[obj] = fg
    return image, obj


def _random_walk(rng, start, n_seg, seg_len, turn):
    pts = [np.asarray(start, dtype=np.float64)]
    angle = rng.uniform(0, 2 * math.pi)
    for _ in range(n_seg):
        angle += rng.uniform(-turn, turn)
        step = seg_len * rng.uniform(0.6, 1.2)
        pts.append(pts[-1] + step * np.array([math.sin(angle), math.cos(angle)]))
    return np.stack(pts)


def _pick_point(rng, region: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(region)
    i = rng.integers(len(ys))
    return ys[i] + 0.5, xs[i] + 0.5


def _draw_anomaly_mask(kind: str, n: int, rng, obj: np.ndarray, inner: np.ndarray) -> np.ndarray:
    if kind == "spot":
        cy, cx = _pick_point(rng, inner)
        ry = rng.uniform(0.04, 0.10) * n
        rx = rng.uniform(0.04, 0.10) * n
        return rasterize_ellipse(n, cy, cx, ry, rx, rng.uniform(0, math.pi))
    if kind == "scratch":
        start = _pick_point(rng, inner)
        pts = _random_walk(rng, start, int(rng.integers(2, 5)), 0.12 * n, 0.6)
        return rasterize_polyline(n, pts, width=int(rng.integers(1, 3)))
    if kind == "crack":
        start = _pick_point(rng, inner)
        pts = _random_walk(rng, start, int(rng.integers(6, 11)), 0.05 * n, 1.3)
        return rasterize_polyline(n, pts, width=1)
    if kind == "missing":
        # bite centred on the object rim, clipped to the object
        rim = obj & ~binary_erode(obj, 1)
        cy, cx = _pick_point(rng, rim)
        r = rng.uniform(0.08, 0.14) * n
        return rasterize_disk(n, cy, cx, r) & obj
    raise ConfigError(f"unknown anomaly type {kind!r}")


def _acceptable(kind: str, m: np.ndarray, obj: np.ndarray, inner: np.ndarray) -> bool:
    if not m.any():
        return False
    if not np.array_equal(binary_close(m, 1), m):
        return False
    labels, count = label_components(m)
    if np.bincount(labels.ravel())[1:].min() < MIN_ANOMALY_AREA:
        return False
    if kind == "spot" and count != 1:
        return False
    if kind == "missing":
        # the bite must leave most of the object in place
        return bool((m <= obj).all()) and m.sum() < 0.5 * obj.sum()
    return bool((m <= inner).all())


def make_anomaly_sample(spec: DatasetSpec, rng: np.random.Generator, seed: int = 0) -> SamplePair:
    spec.validate()
    if spec.anomaly_type == NORMAL:
        image, obj = make_normal_sample(spec, rng)
        return compose_pair(image, np.zeros_like(obj), obj, NORMAL, seed)
    n = spec.image_size
    image, obj = make_normal_sample(spec, rng)
    inner = binary_erode(obj, 2)
    fg = image[obj][0].copy()
    bg = image[~obj][0].copy()
    for _ in range(MAX_ATTEMPTS):
        m = _draw_anomaly_mask(spec.anomaly_type, n, rng, obj, inner)
        m = binary_close(m, 1)
        if spec.anomaly_type == "missing":
            m &= obj
        if not _acceptable(spec.anomaly_type, m, obj, inner):
            continue
        if spec.anomaly_type == "missing":
            color = bg
        else:
            color = _draw_color(rng, spec.anomaly_color)
            if _contrast(color, fg) < MIN_CONTRAST or color.max() < 0.25:
                continue
        image = image.copy()
        image[m] = color
        return compose_pair(image, m, obj, spec.anomaly_type, seed)
    raise GenerationError(
        f"could not place a {spec.anomaly_type} anomaly after {MAX_ATTEMPTS} attempts"
    )


def compose_pair(image, anomaly_mask, object_mask, anomaly_type, seed=0) -> SamplePair:
    """Build a SamplePair whose derived images hold exactly."""
    image = np.asarray(image, dtype=np.float32)
    anomaly_mask = np.asarray(anomaly_mask, dtype=bool)
    object_mask = np.asarray(object_mask, dtype=bool)
    part = image * anomaly_mask[..., None].astype(np.float32)
    background = image * (~object_mask)[..., None].astype(np.float32)
    return SamplePair(image, anomaly_mask, part, object_mask, background, anomaly_type, seed)


def generate_dataset(spec: DatasetSpec) -> list[SamplePair]:
    spec.validate()
    out = []
    for seed in spec.sample_seeds():
        out.append(make_anomaly_sample(spec, np.random.default_rng(seed), seed))
    return out


def generate_normals(spec: DatasetSpec) -> list[SamplePair]:
    return generate_dataset(replace(spec, anomaly_type=NORMAL))


def flip_pair(pair: SamplePair, horizontal: bool, vertical: bool) -> SamplePair:
    """Apply the same flip to every image and mask of a pair."""

    def f(a):
        if horizontal:
            a = a[:, ::-1]
        if vertical:
            a = a[::-1]
        return np.ascontiguousarray(a)

    return SamplePair(
        f(pair.image), f(pair.anomaly_mask), f(pair.anomaly_part), f(pair.object_mask),
        f(pair.background), pair.anomaly_type, pair.seed, dict(pair.meta),
    )


# ---------------------------------------------------------------- file io

def quantize(x: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)).astype(np.float32) / np.float32(255.0)


def save_rgb(path, image: np.ndarray) -> None:
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path)


def save_gray_mask(path, mask: np.ndarray) -> None:
    PILImage.fromarray(np.asarray(mask, dtype=np.uint8) * 255, mode="L").save(path)


def save_gray(path, image: np.ndarray) -> None:
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="L").save(path)


def load_rgb(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0)


def load_mask(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_dataset(samples: Iterable[SamplePair], directory, extra: dict | None = None) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    samples = list(samples)
    if not samples:
        raise ConfigError("refusing to write an empty dataset")
    for i, s in enumerate(samples):
        save_rgb(directory / f"{i}_image.png", s.image)
        save_rgb(directory / f"{i}_anomaly_part.png", s.anomaly_part)
        save_gray_mask(directory / f"{i}_anomaly_mask.png", s.anomaly_mask)
        save_gray_mask(directory / f"{i}_object_mask.png", s.object_mask)
        save_rgb(directory / f"{i}_background.png", s.background)
    manifest = {
        "format_version": FORMAT_VERSION,
        "image_size": int(samples[0].image.shape[0]),
        "count": len(samples),
        "anomaly_type": samples[0].anomaly_type,
        "seeds": [int(s.seed) for s in samples],
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(directory) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise PathError(f"dataset directory {directory} does not exist")
    path = directory / "manifest.json"
    if not path.exists():
        raise FormatError(f"{directory}: missing manifest.json")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    for key in MANIFEST_KEYS:
        if key not in manifest:
            raise FormatError(f"{path}: missing key {key!r}")
    if len(manifest["seeds"]) != manifest["count"]:
        raise FormatError(f"{path}: 'seeds' has {len(manifest['seeds'])} entries, count is {manifest['count']}")
    return manifest


def read_dataset(directory) -> list[SamplePair]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    count = int(manifest["count"])
    complete = sum(
        all((directory / f"{i}_{k}.png").exists() for k in FILE_KEYS) for i in range(count + 1)
    )
    out = []
    for i in range(count):
        missing = [k for k in FILE_KEYS if not (directory / f"{i}_{k}.png").exists()]
        if missing:
            raise FormatError(
                f"{directory}: manifest lists {count} samples, found {complete} complete; "
                f"sample {i} lacks {', '.join(missing)}"
            )
        out.append(
            SamplePair(
                image=load_rgb(directory / f"{i}_image.png"),
                anomaly_mask=load_mask(directory / f"{i}_anomaly_mask.png"),
                anomaly_part=load_rgb(directory / f"{i}_anomaly_part.png"),
                object_mask=load_mask(directory / f"{i}_object_mask.png"),
                background=load_rgb(directory / f"{i}_background.png"),
                anomaly_type=manifest["anomaly_type"],
                seed=int(manifest["seeds"][i]),
            )
        )
    if complete > count:
        raise FormatError(f"{directory}: manifest lists {count} samples but more are present")
    size = int(manifest["image_size"])
    if out and out[0].image.shape[:2] != (size, size):
        raise FormatError(f"{directory}: images are {out[0].image.shape[:2]}, manifest says {size}")
    return out
