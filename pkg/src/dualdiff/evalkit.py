"""Generation diversity, mask alignment and downstream detection metrics."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import rankdata

from .errors import ConfigError, EvaluationError, UndefinedMetricError
from .maskgen import MaskExtractionConfig, mask_stats, object_mask_from_image

log = logging.getLogger(__name__)


# ---------------------------------------------------------- IC diversity

def pooled_gray_features(image: np.ndarray, size: int = 8) -> np.ndarray:
    """8x8 average-pooled grayscale, mean-subtracted, L2-normalised."""
    img = np.asarray(image, dtype=np.float64)
    gray = img.mean(axis=-1) if img.ndim == 3 else img
    h, w = gray.shape
    if h % size or w % size:
        raise ConfigError(f"image of size {h}x{w} cannot be pooled to {size}x{size}")
    f = gray.reshape(size, h // size, size, w // size).mean(axis=(1, 3)).ravel()
    f = f - f.mean()
    n = np.linalg.norm(f)
    return f / n if n > 0 else f


@dataclass
class FeatureDistance:
    extractor: Callable[[np.ndarray], np.ndarray] = pooled_gray_features

    def features(self, items) -> np.ndarray:
        return np.stack([np.asarray(self.extractor(x), dtype=np.float64).ravel() for x in items])

    def __call__(self, a, b) -> float:
        fa, fb = self.features([a, b])
        return float(np.linalg.norm(fa - fb))


def ic_diversity(generated: Sequence, targets: Sequence, dist: FeatureDistance | None = None) -> float:
    """Mean over target clusters of the mean member-to-target distance.

    Each generated item joins the cluster of its nearest target (ties go to
    the lowest target index). Empty clusters contribute 0.
    """
    if len(generated) == 0:
        raise EvaluationError("ic_diversity needs at least one generated image")
    if len(targets) == 0:
        raise EvaluationError("ic_diversity needs at least one target")
    dist = dist or FeatureDistance()
    fg = dist.features(generated)
    ft = dist.features(targets)
    d = np.linalg.norm(fg[:, None, :] - ft[None, :, :], axis=-1)
    nearest = d.argmin(axis=1)
    per_cluster = []
    for k in range(len(targets)):
        members = d[nearest == k, k]
        per_cluster.append(float(members.mean()) if len(members) else 0.0)
    return float(np.mean(per_cluster))


# ------------------------------------------------------- curve metrics

_EXACT_AP_MAX_GROUPS = 2048

@dataclass(frozen=True)
class CurveMetrics:
    auroc: float
    ap: float
    f1max: float


def binary_curve_metrics(scores, labels) -> CurveMetrics:
    """AUROC (midrank ties), step-wise AP and F1-max over all score thresholds."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise EvaluationError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auroc/ap")

    # twice the midranks are integers, so the rank sum is exact
    ranks2 = np.rint(2.0 * rankdata(scores, method="average")).astype(np.int64)
    u2 = int(ranks2[labels].sum()) - n_pos * (n_pos + 1)
    auroc = u2 / (2 * n_pos * n_neg)

    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp = np.cumsum(l_sorted)[last_of_group]
    fp = np.cumsum(~l_sorted)[last_of_group]
    d_tp = np.diff(np.r_[0, tp])
    if len(tp) <= _EXACT_AP_MAX_GROUPS:
        # rational sum, correctly rounded once
        ap = float(sum(Fraction(int(d) * int(a), int(a + b)) for d, a, b in zip(d_tp, tp, fp) if d)
                   / n_pos)
    else:
        ap = math.fsum((d_tp * (tp / (tp + fp))).tolist()) / n_pos
    f1 = 2 * tp / (2 * tp + fp + (n_pos - tp))
    return CurveMetrics(float(auroc), float(ap), float(f1.max()))


# ------------------------------------------------------- mask alignment

@dataclass(frozen=True)
class AlignmentReport:
    mask_iou_mean: float
    nonempty_mask_fraction: float
    inside_object_fraction_mean: float


def mask_alignment(images: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                   tau: float = MaskExtractionConfig().threshold,
                   object_masks: Sequence[np.ndarray] | None = None) -> AlignmentReport:
    """How well extracted masks sit on visible anomalies of the whole images.

    Alignment of one pair is the fraction of its mask pixels whose whole-image
    colour differs (max over channels) by more than ``tau`` from the median
    normal colour of their region: object pixels outside the mask for mask
    pixels on the object, background pixels outside it otherwise. Mask pixels
    in a region the mask covers completely count as unaligned. Pairs with
    empty masks are skipped in the mean; 0 if every mask is empty.
    """
    if len(images) != len(masks):
        raise EvaluationError(f"{len(images)} images but {len(masks)} masks")
    if object_masks is not None and len(object_masks) != len(images):
        raise EvaluationError("object mask count differs from image count")
    aligned, inside, nonempty = [], [], 0
    for i, (img, m) in enumerate(zip(images, masks)):
        img = np.asarray(img, dtype=np.float64)
        m = np.asarray(m, dtype=bool)
        obj = object_mask_from_image(img) if object_masks is None else np.asarray(object_masks[i], bool)
        inside.append(mask_stats(m, obj).inside_object_fraction)
        if not m.any():
            continue
        nonempty += 1
        hits = 0
        for region in (obj, ~obj):
            sel = m & region
            if not sel.any():
                continue
            normal = region & ~m
            if not normal.any():
                continue  # no normal reference left in this region: nothing can be confirmed
            ref = np.median(img[normal], axis=0)
            hits += int((np.abs(img[sel] - ref).max(axis=-1) > tau).sum())
        aligned.append(hits / int(m.sum()))
    n = len(images)
    return AlignmentReport(
        float(np.mean(aligned)) if aligned else 0.0,
        nonempty / n if n else 0.0,
        float(np.mean(inside)) if inside else 1.0,
    )


# ------------------------------------------------------------- detector

@dataclass
class DetectorConfig:
    base_channels: int = 16
    levels: int = 3
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 16
    repeats: int = 3
    seed: int = 0
    val_fraction: float = 0.2
    flip: bool = True


class _ConvBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(min(8, cout), cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1), nn.GroupNorm(min(8, cout), cout), nn.ReLU(inplace=True),
        )


class SegUNet(nn.Module):
    """Plain encoder/decoder U-Net returning per-pixel logits."""

    def __init__(self, base: int = 16, levels: int = 3, in_ch: int = 3):
        super().__init__()
        chans = [base * 2 ** i for i in range(levels)]
        self.enc = nn.ModuleList()
        c = in_ch
        for ch in chans:
            self.enc.append(_ConvBlock(c, ch))
            c = ch
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for ch in reversed(chans[:-1]):
            self.up.append(nn.ConvTranspose2d(c, ch, 2, stride=2))
            self.dec.append(_ConvBlock(2 * ch, ch))
            c = ch
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x)
            if i < len(self.enc) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for up, dec in zip(self.up, self.dec):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)[:, 0]


@dataclass
class Detector:
    net: SegUNet
    val_ap: float = float("nan")
    run_seed: int = 0
    history: list = field(default_factory=list)

    @torch.no_grad()
    def score(self, images: Sequence[np.ndarray] | np.ndarray, batch: int = 64) -> np.ndarray:
        """Per-pixel anomaly scores in [0, 1], shape (N, H, W)."""
        self.net.eval()
        x = _to_tensor(images)
        out = [torch.sigmoid(self.net(x[i:i + batch])) for i in range(0, len(x), batch)]
        return torch.cat(out).numpy()


def _to_tensor(images) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def _split(n: int, frac: float, rng: np.random.Generator):
    idx = rng.permutation(n)
    n_val = max(1, int(round(frac * n))) if n > 1 else 0
    return idx[n_val:], idx[:n_val]


def _train_once(x, y, train_idx, val_idx, cfg: DetectorConfig, seed: int) -> Detector:
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    net = SegUNet(cfg.base_channels, cfg.levels)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    det = Detector(net, run_seed=seed)
    xt, yt = x[train_idx], y[train_idx]
    for epoch in range(cfg.epochs):
        net.train()
        perm = torch.randperm(len(xt), generator=gen)
        for i in range(0, len(xt), cfg.batch_size):
            sel = perm[i:i + cfg.batch_size]
            xb, yb = xt[sel], yt[sel]
            if cfg.flip:
                hf = torch.rand(len(sel), generator=gen) < 0.5
                vf = torch.rand(len(sel), generator=gen) < 0.5
                xb = torch.where(hf[:, None, None, None], xb.flip(-1), xb)
                yb = torch.where(hf[:, None, None], yb.flip(-1), yb)
                xb = torch.where(vf[:, None, None, None], xb.flip(-2), xb)
                yb = torch.where(vf[:, None, None], yb.flip(-2), yb)
            loss = F.binary_cross_entropy_with_logits(net(xb), yb)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        det.history.append(float(loss.item()))
    if len(val_idx):
        xv = x[val_idx].permute(0, 2, 3, 1).numpy()
        yv = y[val_idx].numpy()
        try:
            det.val_ap = binary_curve_metrics(det.score(xv), yv).ap
        except UndefinedMetricError:
            det.val_ap = float("nan")
    return det


def train_detector(images: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                   normal_images: Sequence[np.ndarray], cfg: DetectorConfig | None = None) -> Detector:
    """Train ``cfg.repeats`` seeded runs and keep the best by validation pixel AP.

    Training data is the anomalous images with their masks plus the normal
    images with empty masks. A deterministic ``val_fraction`` of it is held
    out for selection.
    """
    cfg = cfg or DetectorConfig()
    if len(images) != len(masks):
        raise ConfigError(f"{len(images)} images but {len(masks)} masks")
    if len(masks) == 0 or not any(np.asarray(m).any() for m in masks):
        raise ConfigError("detector training needs a non-empty set of anomaly masks")
    all_images = list(images) + list(normal_images)
    if len(all_images) < 10:
        raise ConfigError(f"detector training needs >= 10 images, got {len(all_images)}")
    h, w = np.asarray(all_images[0]).shape[:2]
    all_masks = [np.asarray(m, dtype=np.float32) for m in masks] + [np.zeros((h, w), np.float32)] * len(normal_images)
    x = _to_tensor(all_images)
    y = torch.from_numpy(np.stack(all_masks))
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = _split(len(x), cfg.val_fraction, rng)
    if cfg.epochs == 0:
        warnings.warn("detector trained for zero epochs; scores are at chance level", RuntimeWarning)
    best = None
    for r in range(cfg.repeats):
        det = _train_once(x, y, train_idx, val_idx, cfg, seed=cfg.seed * 1000 + r)
        log.info("detector run %d: val AP %.4f", r, det.val_ap)
        if best is None or (det.val_ap > best.val_ap) or (math.isnan(best.val_ap) and not math.isnan(det.val_ap)):
            best = det
    return best


@dataclass
class EvalReport:
    ic_diversity: float = float("nan")
    mask_iou_mean: float = float("nan")
    nonempty_mask_fraction: float = float("nan")
    inside_object_fraction_mean: float = float("nan")
    pixel_auroc: float = float("nan")
    pixel_ap: float = float("nan")
    pixel_f1max: float = float("nan")
    image_auroc: float = float("nan")
    image_ap: float = float("nan")
    image_f1max: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        (directory / "report.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        lines = [f"{k:30s} {v:.6f}" for k, v in d.items()]
        (directory / "report.txt").write_text("\n".join(lines) + "\n")


def evaluate(score_fn: Callable[[list], np.ndarray] | Detector, images: Sequence[np.ndarray],
             masks: Sequence[np.ndarray]) -> EvalReport:
    """Pixel metrics pooled over all test pixels; image score is the max pixel score."""
    if isinstance(score_fn, Detector):
        score_fn = score_fn.score
    scores = np.asarray(score_fn(list(images)), dtype=np.float64)
    gt = np.stack([np.asarray(m, dtype=bool) for m in masks])
    if scores.shape != gt.shape:
        raise EvaluationError(f"score maps {scores.shape} do not match masks {gt.shape}")
    pix = binary_curve_metrics(scores.ravel(), gt.ravel())
    report = EvalReport(pixel_auroc=pix.auroc, pixel_ap=pix.ap, pixel_f1max=pix.f1max)
    try:
        img = binary_curve_metrics(scores.reshape(len(scores), -1).max(axis=1), gt.reshape(len(gt), -1).any(axis=1))
    except UndefinedMetricError:
        log.warning("test set has a single image-level class; image metrics left undefined")
        return report
    report.image_auroc, report.image_ap, report.image_f1max = img.auroc, img.ap, img.f1max
    return report
