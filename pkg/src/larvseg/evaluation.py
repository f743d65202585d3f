"""mIoU with base/novel splits, the anchor-pixel grouping probe, and PPM output."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .errors import ContractError, DimensionError, LarvSegError
from .model import Segmenter, predict_mask


class ReportError(LarvSegError):
    """Nothing was evaluated."""


class ConfusionMatrix:
    """C x C pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, gt, ignore_id: int = 255) -> "ConfusionMatrix":
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        if pred.shape != gt.shape:
            raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
        keep = gt != ignore_id
        g, p = gt[keep], pred[keep]
        C = self.num_classes
        if g.size and (g.min() < 0 or g.max() >= C or p.min() < 0 or p.max() >= C):
            raise ContractError(f"category id outside 0..{C - 1}")
        self.counts += np.bincount(g * C + p, minlength=C * C).reshape(C, C)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, gt, ignore_id: int = 255) -> ConfusionMatrix:
    return cm.accumulate(pred, gt, ignore_id)


@dataclass
class MiouReport:
    iou: np.ndarray  # per category, NaN where excluded
    gt_pixels: np.ndarray
    all: float
    base: float
    novel: float
    pixel_acc: float
    extras: dict = field(default_factory=dict)


def _subset_mean(iou: np.ndarray, gt_pixels: np.ndarray, ids) -> float:
    ids = [c for c in ids if gt_pixels[c] > 0]
    return float(np.mean(iou[ids])) if ids else float("nan")


def miou(cm: ConfusionMatrix, base_ids, novel_ids) -> MiouReport:
    """IoU = TP / (TP + FP + FN); subset means use categories with ground-truth pixels."""
    counts = cm.counts
    if counts.sum() == 0:
        raise ReportError("empty evaluation: no pixels accumulated")
    tp = np.diag(counts).astype(np.float64)
    gt_px = counts.sum(axis=1)
    pred_px = counts.sum(axis=0)
    union = gt_px + pred_px - tp
    iou = np.full(cm.num_classes, np.nan)
    seen = union > 0
    iou[seen] = tp[seen] / union[seen]
    every = range(cm.num_classes)
    return MiouReport(
        iou=iou,
        gt_pixels=gt_px,
        all=_subset_mean(iou, gt_px, every),
        base=_subset_mean(iou, gt_px, base_ids),
        novel=_subset_mean(iou, gt_px, novel_ids),
        pixel_acc=float(tp.sum() / counts.sum()),
    )


def evaluate(model: Segmenter, images: np.ndarray, masks: np.ndarray, base_ids, novel_ids,
             ignore_id: int = 255, batch: int = 50) -> MiouReport:
    cm = ConfusionMatrix(model.classifier.num_classes)
    with nc.no_grad():
        for i in range(0, len(images), batch):
            _, sm = model.forward(nc.Tensor._wrap(images[i:i + batch]))
            cm.accumulate(predict_mask(sm), masks[i:i + batch], ignore_id)
    return miou(cm, base_ids, novel_ids)


def write_report(path, report: MiouReport, meta: dict | None = None) -> None:
    """CSV: summary rows first, then one row per category."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for k, v in (meta or {}).items():
            w.writerow([k, v])
        for k in ("all", "base", "novel", "pixel_acc"):
            w.writerow([f"miou_{k}" if k != "pixel_acc" else k, f"{getattr(report, k):.10f}"])
        for c, (iou, n) in enumerate(zip(report.iou, report.gt_pixels)):
            w.writerow([f"iou_{c}", "nan" if np.isnan(iou) else f"{iou:.10f}"])
            w.writerow([f"gt_pixels_{c}", int(n)])


# -- pixel grouping probe ---------------------------------------------------------

def response_map(fm, h: int, w: int) -> np.ndarray:
    """Cosine similarity of the anchor pixel's feature to every pixel of ``fm`` [H, W, D]."""
    f = np.asarray(fm.data if isinstance(fm, nc.Tensor) else fm, dtype=np.float64)
    H, W, _ = f.shape
    if not (0 <= h < H and 0 <= w < W):
        raise ContractError(f"anchor ({h}, {w}) outside {H}x{W}")
    norms = np.maximum(np.linalg.norm(f, axis=-1), nc.COSINE_EPS)
    anchor = f[h, w] / norms[h, w]
    return (f @ anchor) / norms


@dataclass
class GroupingResult:
    base_acc: float
    novel_acc: float
    cm: ConfusionMatrix
    base_miou: float
    novel_miou: float


def pixel_grouping_eval(model: Segmenter, images: np.ndarray, masks: np.ndarray, base_ids,
                        novel_ids, seed: int, ignore_id: int = 255) -> GroupingResult:
    """Classify pixels by the best anchor response; one random anchor per present category.

    Accuracy is measured over pixels whose ground truth is base (resp. novel).
    """
    rng = np.random.default_rng([seed, 4242])
    C = model.classifier.num_classes
    cm = ConfusionMatrix(C)
    with nc.no_grad():
        feats = model.forward(nc.Tensor._wrap(images))[0].data if len(images) else []
    for f, gt in zip(feats, masks):
        cats = [c for c in np.unique(gt) if c != ignore_id]
        if not cats:
            continue
        maps = []
        for c in cats:
            hs, ws = np.nonzero(gt == c)
            k = int(rng.integers(len(hs)))
            maps.append(response_map(f, hs[k], ws[k]))
        pred = np.asarray(cats)[np.argmax(np.stack(maps), axis=0)]
        cm.accumulate(pred, gt, ignore_id)
    counts = cm.counts
    base_m = np.zeros(C, dtype=bool)
    base_m[list(base_ids)] = True
    novel_m = np.zeros(C, dtype=bool)
    novel_m[list(novel_ids)] = True

    def acc(sel):
        rows = counts[sel]
        n = rows.sum()
        return float(np.diag(counts)[sel].sum() / n) if n else float("nan")

    rep = miou(cm, base_ids, novel_ids) if cm.total else None
    return GroupingResult(
        base_acc=acc(base_m), novel_acc=acc(novel_m), cm=cm,
        base_miou=rep.base if rep else float("nan"),
        novel_miou=rep.novel if rep else float("nan"),
    )


# -- PPM rendering ------------------------------------------------------------------

def _palette() -> np.ndarray:
    # deterministic 32-entry palette (PASCAL-style bit interleaving)
    pal = np.zeros((32, 3), dtype=np.uint8)
    for i in range(32):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal[i] = (r, g, b)
    return pal


PALETTE = _palette()


def mask_to_rgb(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=np.int64)
    return PALETTE[m % len(PALETTE)]


def map_to_rgb(values) -> np.ndarray:
    """Linear grey ramp: min -> 0, max -> 255 (constant maps render black)."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    g = np.rint(scaled * 255.0).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def ppm_bytes(rgb: np.ndarray) -> bytes:
    H, W, _ = rgb.shape
    return f"P6\n{W} {H}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def render_mask(data, path=None, kind: str = "mask") -> bytes:
    """P6 bytes for a category mask (palette) or a scalar map (grey ramp)."""
    rgb = mask_to_rgb(data) if kind == "mask" else map_to_rgb(data)
    blob = ppm_bytes(rgb)
    if path is not None:
        Path(path).write_bytes(blob)
    return blob
