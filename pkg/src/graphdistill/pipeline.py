"""End-to-end inference: image -> embeddings -> affinities -> segmentation."""

from __future__ import annotations

from .affinity import compute_intra_affinity
from .clustering import affinity_cluster
from .metrics import MetricReport, compute_metric_report, mean_report
from .network import ConvNetParams, forward
from .tensors import EmbeddingMap, LabelMask


def predict_segmentation(
    params: ConvNetParams, image, offsets, threshold: float = 0.5
) -> tuple[LabelMask, EmbeddingMap]:
    """Segment one image; also returns the embedding map for visualization."""
    emap = forward(params, image)
    amap = compute_intra_affinity(emap, offsets)
    return affinity_cluster(amap, offsets, threshold), emap


def evaluate_model(
    params: ConvNetParams, dataset, offsets, threshold: float = 0.5
) -> MetricReport:
    """Mean metric report of a model over a list of (image, mask) samples."""
    reports = []
    for image, mask in dataset:
        seg, _ = predict_segmentation(params, image, offsets, threshold)
        reports.append(compute_metric_report(seg, mask))
    return mean_report(reports)
