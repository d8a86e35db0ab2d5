"""Instance-segmentation metrics and embedding visualization.

Pinned conventions, chosen so every number here is reproducible by a
brute-force pair-counting or matching oracle:

- Instance sets are the ids > 0 of a label grid; id 0 (if present) counts as
  background for instance-level metrics but as an ordinary segment for the
  partition-based ones (VOI, ARAND).
- VOI uses base-2 logarithms: split = H(pred | gt), merge = H(gt | pred).
- ARAND is one minus the F-score of Rand precision/recall over unordered
  same-segment pixel pairs (C(n, 2) counting).
- AJI matches each ground-truth instance to its argmax-Jaccard prediction
  (ties to the lowest prediction id), permits prediction reuse, and counts
  each never-matched prediction once in the denominator.
- Object F1 and PQ match at IoU strictly greater than the threshold (default
  0.5), which makes the matching unique.

All metrics are invariant under bijective relabeling of either side.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .tensors import ContractError, DomainError, EmbeddingMap, LabelMask


@dataclass
class MetricReport:
    sbd: float
    dic_abs: float
    aji: float
    dice: float
    f1_obj: float
    pq: float
    voi_split: float
    voi_merge: float
    voi_total: float
    arand: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class ContingencyTable:
    """Joint label counts between two equally shaped label grids."""

    def __init__(self, pred: LabelMask, gt: LabelMask):
        if pred.shape != gt.shape:
            raise ContractError(f"label shapes differ: {pred.shape} vs {gt.shape}")
        keys = (gt.labels.astype(np.uint64) << np.uint64(32)) | pred.labels.astype(
            np.uint64
        )
        uniq, counts = np.unique(keys.reshape(-1), return_counts=True)
        self.counts: dict[tuple[int, int], int] = {}
        self.gt_sizes: dict[int, int] = {}
        self.pred_sizes: dict[int, int] = {}
        for key, n in zip(uniq.tolist(), counts.tolist()):
            g, p = key >> 32, key & 0xFFFFFFFF
            self.counts[(g, p)] = n
            self.gt_sizes[g] = self.gt_sizes.get(g, 0) + n
            self.pred_sizes[p] = self.pred_sizes.get(p, 0) + n
        self.total = int(pred.labels.size)
        assert sum(self.gt_sizes.values()) == self.total
        assert sum(self.pred_sizes.values()) == self.total


def _instance_overlaps(pred: LabelMask, gt: LabelMask):
    """Sizes and pairwise intersections of the id > 0 instances."""
    table = ContingencyTable(pred, gt)
    inter = {
        (g, p): n for (g, p), n in table.counts.items() if g > 0 and p > 0
    }
    gt_sizes = {g: n for g, n in table.gt_sizes.items() if g > 0}
    pred_sizes = {p: n for p, n in table.pred_sizes.items() if p > 0}
    return gt_sizes, pred_sizes, inter


def sbd(pred: LabelMask, gt: LabelMask) -> float:
    """Symmetric best Dice: min of the two directed best-Dice means."""
    gt_sizes, pred_sizes, inter = _instance_overlaps(pred, gt)
    if not gt_sizes or not pred_sizes:
        return 0.0

    def directed(from_sizes, to_sizes, pairs):
        best = dict.fromkeys(from_sizes, 0.0)
        for (a, b), n in pairs.items():
            dice = 2.0 * n / (from_sizes[a] + to_sizes[b])
            if dice > best[a]:
                best[a] = dice
        return sum(best.values()) / len(best)

    inter_gp = inter
    inter_pg = {(p, g): n for (g, p), n in inter.items()}
    return min(
        directed(pred_sizes, gt_sizes, inter_pg),
        directed(gt_sizes, pred_sizes, inter_gp),
    )


def dic_abs(pred: LabelMask, gt: LabelMask) -> int:
    """Absolute difference in instance counts."""
    if pred.shape != gt.shape:
        raise ContractError(f"label shapes differ: {pred.shape} vs {gt.shape}")
    return abs(len(pred.instance_ids()) - len(gt.instance_ids()))


def aji(pred: LabelMask, gt: LabelMask) -> float:
    """Aggregated Jaccard index with prediction reuse (see module docstring)."""
    gt_sizes, pred_sizes, inter = _instance_overlaps(pred, gt)
    if not gt_sizes:
        raise DomainError("aji requires at least one ground-truth instance")
    numerator = 0
    denominator = 0
    used = set()
    pred_ids = sorted(pred_sizes)
    for g in sorted(gt_sizes):
        best_p, best_jaccard, best_inter = None, -1.0, 0
        for p in pred_ids:
            n = inter.get((g, p), 0)
            jac = n / (gt_sizes[g] + pred_sizes[p] - n)
            if jac > best_jaccard:
                best_p, best_jaccard, best_inter = p, jac, n
        if best_p is None:
            denominator += gt_sizes[g]
            continue
        numerator += best_inter
        denominator += gt_sizes[g] + pred_sizes[best_p] - best_inter
        used.add(best_p)
    for p in pred_ids:
        if p not in used:
            denominator += pred_sizes[p]
    return numerator / denominator if denominator else 1.0


def dice_pixel(pred: LabelMask, gt: LabelMask) -> float:
    """Dice over the binary foreground masks (labels > 0)."""
    if pred.shape != gt.shape:
        raise ContractError(f"label shapes differ: {pred.shape} vs {gt.shape}")
    fg_pred = pred.labels > 0
    fg_gt = gt.labels > 0
    denom = int(fg_pred.sum()) + int(fg_gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((fg_pred & fg_gt).sum()) / denom


def _iou_matches(pred: LabelMask, gt: LabelMask, iou_thresh: float):
    """Greedy descending-IoU one-to-one matching above the threshold."""
    gt_sizes, pred_sizes, inter = _instance_overlaps(pred, gt)
    candidates = []
    for (g, p), n in inter.items():
        iou = n / (gt_sizes[g] + pred_sizes[p] - n)
        if iou > iou_thresh:
            candidates.append((iou, g, p))
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_g, used_p, matches = set(), set(), []
    for iou, g, p in candidates:
        if g in used_g or p in used_p:
            continue
        used_g.add(g)
        used_p.add(p)
        matches.append((iou, g, p))
    return matches, len(gt_sizes), len(pred_sizes)


def f1_obj(pred: LabelMask, gt: LabelMask, iou_thresh: float = 0.5) -> float:
    """Object-level F1 with IoU > iou_thresh matching."""
    matches, n_gt, n_pred = _iou_matches(pred, gt, iou_thresh)
    if n_gt == 0 and n_pred == 0:
        return 1.0
    tp = len(matches)
    return 2.0 * tp / (n_gt + n_pred) if (n_gt + n_pred) else 1.0


def pq(pred: LabelMask, gt: LabelMask, iou_thresh: float = 0.5) -> float:
    """Panoptic quality: summed matched IoU over TP + FP/2 + FN/2."""
    matches, n_gt, n_pred = _iou_matches(pred, gt, iou_thresh)
    if n_gt == 0 and n_pred == 0:
        return 1.0
    tp = len(matches)
    denom = tp + 0.5 * (n_pred - tp) + 0.5 * (n_gt - tp)
    return sum(m[0] for m in matches) / denom if denom else 1.0


def voi(pred: LabelMask, gt: LabelMask) -> tuple[float, float, float]:
    """Variation of information in bits: (split, merge, total).

    Split is H(pred | gt): how much the prediction fragments ground-truth
    segments. Merge is H(gt | pred).
    """
    table = ContingencyTable(pred, gt)
    total = table.total
    split = 0.0
    merge = 0.0
    for (g, p), n in table.counts.items():
        split += (n / total) * np.log2(table.gt_sizes[g] / n)
        merge += (n / total) * np.log2(table.pred_sizes[p] / n)
    return float(split), float(merge), float(split + merge)


def arand(pred: LabelMask, gt: LabelMask) -> float:
    """Adapted Rand error: 1 - F-score over same-segment pixel pairs."""
    table = ContingencyTable(pred, gt)

    def pairs(n):
        return n * (n - 1) // 2

    both = sum(pairs(n) for n in table.counts.values())
    in_pred = sum(pairs(n) for n in table.pred_sizes.values())
    in_gt = sum(pairs(n) for n in table.gt_sizes.values())
    precision = both / in_pred if in_pred else 1.0
    recall = both / in_gt if in_gt else 1.0
    if precision + recall == 0.0:
        return 1.0
    return 1.0 - 2.0 * precision * recall / (precision + recall)


def compute_metric_report(pred: LabelMask, gt: LabelMask) -> MetricReport:
    """Evaluate all metrics of one prediction against ground truth."""
    voi_split, voi_merge, voi_total = voi(pred, gt)
    return MetricReport(
        sbd=sbd(pred, gt),
        dic_abs=float(dic_abs(pred, gt)),
        aji=aji(pred, gt),
        dice=dice_pixel(pred, gt),
        f1_obj=f1_obj(pred, gt),
        pq=pq(pred, gt),
        voi_split=voi_split,
        voi_merge=voi_merge,
        voi_total=voi_total,
        arand=arand(pred, gt),
    )


def mean_report(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise DomainError("cannot average an empty report list")
    values = {
        f.name: float(np.mean([getattr(r, f.name) for r in reports]))
        for f in fields(MetricReport)
    }
    return MetricReport(**values)


def report_to_text(report: MetricReport) -> str:
    lines = [f"{name}: {value:.6f}" for name, value in report.as_dict().items()]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Embedding visualization
# --------------------------------------------------------------------------


def pca_rgb(emap: EmbeddingMap) -> np.ndarray:
    """Project per-pixel embeddings onto the top-3 principal components.

    Each projected channel is min-max scaled to [0, 255]; zero-variance
    channels (and channels missing when D < 3) are filled with 128. Returns
    an H x W x 3 uint8 image.
    """
    data = emap.as64()
    depth, height, width = data.shape
    x = data.reshape(depth, -1).T
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / centered.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][: min(3, depth)]
    image = np.full((height * width, 3), 128, dtype=np.uint8)
    for channel, idx in enumerate(order):
        vec = eigvecs[:, idx]
        pivot = np.argmax(np.abs(vec))
        if vec[pivot] < 0:
            vec = -vec
        proj = centered @ vec
        span = proj.max() - proj.min()
        if span < 1e-12:
            continue
        scaled = np.rint((proj - proj.min()) / span * 255.0)
        image[:, channel] = scaled.astype(np.uint8)
    return image.reshape(height, width, 3)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an H x W x 3 uint8 image as binary PPM (P6)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DomainError(f"PPM writer needs H x W x 3 uint8, got {image.shape} {image.dtype}")
    height, width = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(image.tobytes(order="C"))
