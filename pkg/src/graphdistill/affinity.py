"""Pixel-affinity graphs and their distillation losses.

An embedding map is converted into a stack of per-offset pixel affinities
(cosine of neighboring embeddings) for intra-image losses, and into a dense
(HW x HW) cross-image affinity matrix for inter-image losses. Every loss here
is a mean squared error over valid entries, and every loss has an analytic
gradient with respect to the student embedding map, verified against finite
differences in the test suite.

Out-of-bounds offset targets are marked invalid and excluded from loss means,
so border pixels do not bias the averages. Embeddings are L2-normalized per
pixel before any dot product, which makes the inter-image matrix coincide with
pairwise cosine.
"""

from __future__ import annotations

import numpy as np

from .tensors import (
    EPS_NORM,
    ContractError,
    DimensionError,
    DomainError,
    EmbeddingMap,
    LabelMask,
    normalize_pixels,
    pack_tensor,
    unpack_tensor,
)

Offset = tuple[int, int]


def make_offsets(pairs) -> tuple[Offset, ...]:
    """Validate an offset list: no duplicates, (0, 0) excluded."""
    offsets = tuple((int(dr), int(dc)) for dr, dc in pairs)
    if not offsets:
        raise DomainError("offset set must be non-empty")
    if (0, 0) in offsets:
        raise DomainError("offset (0, 0) is not allowed")
    if len(set(offsets)) != len(offsets):
        raise DomainError("duplicate offsets")
    return offsets


def default_offsets(strides=(1, 3, 9)) -> tuple[Offset, ...]:
    """Four directions per stride: right, down, down-right, up-right."""
    return make_offsets(
        [off for d in strides for off in [(0, d), (d, 0), (d, d), (-d, d)]]
    )


class AffinityMap:
    """N x H x W affinity stack with a parallel validity mask.

    `values[k, r, c]` is the affinity between pixel (r, c) and pixel
    (r + dr_k, c + dc_k); it is valid only when the partner is in bounds.
    """

    def __init__(self, values: np.ndarray, valid: np.ndarray, offsets=None):
        values = np.asarray(values, dtype=np.float64)
        valid = np.asarray(valid, dtype=bool)
        if values.ndim != 3 or valid.shape != values.shape:
            raise DimensionError(
                f"affinity values/valid shapes inconsistent: {values.shape} vs {valid.shape}"
            )
        self.values = values
        self.valid = valid
        self.offsets = make_offsets(offsets) if offsets is not None else None

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def valid_count(self) -> int:
        return int(self.valid.sum())


class InterAffinityMap:
    """(HW x HW) cosine table between the pixels of two images."""

    def __init__(self, values: np.ndarray, height: int, width: int):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (height * width, height * width):
            raise DimensionError(
                f"inter-affinity must be ({height * width}, {height * width}), got {values.shape}"
            )
        self.values = values
        self.height = height
        self.width = width


def _offset_slices(offset: Offset, height: int, width: int):
    """Source-rectangle bounds for which p + offset stays in the image."""
    dr, dc = offset
    r0, r1 = max(0, -dr), height - max(0, dr)
    c0, c1 = max(0, -dc), width - max(0, dc)
    return r0, r1, c0, c1


def compute_intra_affinity(emap: EmbeddingMap, offsets) -> AffinityMap:
    """Cosine affinity of every pixel with its offset partners."""
    offsets = make_offsets(offsets)
    unit = normalize_pixels(emap.as64())
    _, height, width = unit.shape
    values = np.zeros((len(offsets), height, width))
    valid = np.zeros((len(offsets), height, width), dtype=bool)
    for k, (dr, dc) in enumerate(offsets):
        r0, r1, c0, c1 = _offset_slices((dr, dc), height, width)
        if r0 >= r1 or c0 >= c1:
            continue
        src = unit[:, r0:r1, c0:c1]
        dst = unit[:, r0 + dr : r1 + dr, c0 + dc : c1 + dc]
        values[k, r0:r1, c0:c1] = np.clip(np.sum(src * dst, axis=0), -1.0, 1.0)
        valid[k, r0:r1, c0:c1] = True
    return AffinityMap(values, valid, offsets)


def gt_affinity(mask: LabelMask, offsets) -> AffinityMap:
    """Binary ground-truth affinities: 1 where both pixels share a label.

    Label 0, if present, is treated as one ordinary segment.
    """
    offsets = make_offsets(offsets)
    labels = mask.labels
    height, width = labels.shape
    values = np.zeros((len(offsets), height, width))
    valid = np.zeros((len(offsets), height, width), dtype=bool)
    for k, (dr, dc) in enumerate(offsets):
        r0, r1, c0, c1 = _offset_slices((dr, dc), height, width)
        if r0 >= r1 or c0 >= c1:
            continue
        same = labels[r0:r1, c0:c1] == labels[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
        values[k, r0:r1, c0:c1] = same.astype(np.float64)
        valid[k, r0:r1, c0:c1] = True
    return AffinityMap(values, valid, offsets)


def _check_aligned(a: AffinityMap, b: AffinityMap) -> None:
    if a.shape != b.shape:
        raise ContractError(f"affinity shapes differ: {a.shape} vs {b.shape}")
    if not np.array_equal(a.valid, b.valid):
        raise ContractError("affinity validity masks differ")


def agd_intra_loss(a_student: AffinityMap, a_teacher: AffinityMap) -> float:
    """Mean squared affinity difference over valid entries."""
    _check_aligned(a_student, a_teacher)
    count = a_student.valid_count()
    if count == 0:
        return 0.0
    diff = (a_student.values - a_teacher.values)[a_student.valid]
    return float(np.sum(diff * diff) / count)


def affinity_supervision_loss(a_student: AffinityMap, a_gt: AffinityMap) -> float:
    """Supervised affinity loss against binary ground-truth affinities."""
    return agd_intra_loss(a_student, a_gt)


def affinity_mse_term(emap: EmbeddingMap, target: AffinityMap) -> tuple[float, np.ndarray]:
    """Loss and d(loss)/d(embedding) for an affinity MSE against a fixed target.

    Covers both the teacher-alignment and the ground-truth supervision losses;
    the target (teacher affinities or binary labels) is a constant. The
    gradient flows through per-pixel normalization and into both endpoints of
    every valid pixel pair.
    """
    if target.offsets is None:
        raise ContractError("target affinity map must carry its offset set")
    data = emap.as64()
    depth, height, width = data.shape
    if target.shape[1:] != (height, width) or target.shape[0] != len(target.offsets):
        raise ContractError("target affinity map inconsistent with embedding map")

    norms = np.sqrt(np.sum(data * data, axis=0))
    degenerate = norms < EPS_NORM
    safe = np.where(degenerate, 1.0, norms)
    unit = data / safe
    unit[:, degenerate] = 0.0

    count = target.valid_count()
    grad_unit = np.zeros_like(data)
    loss = 0.0
    if count == 0:
        return 0.0, grad_unit
    for k, (dr, dc) in enumerate(target.offsets):
        r0, r1, c0, c1 = _offset_slices((dr, dc), height, width)
        if r0 >= r1 or c0 >= c1:
            continue
        if not target.valid[k, r0:r1, c0:c1].all():
            raise ContractError("target validity mask disagrees with offset bounds")
        src = unit[:, r0:r1, c0:c1]
        dst = unit[:, r0 + dr : r1 + dr, c0 + dc : c1 + dc]
        aff = np.clip(np.sum(src * dst, axis=0), -1.0, 1.0)
        diff = aff - target.values[k, r0:r1, c0:c1]
        loss += float(np.sum(diff * diff))
        g = (2.0 / count) * diff
        grad_unit[:, r0:r1, c0:c1] += g * (dst - aff * src)
        grad_unit[:, r0 + dr : r1 + dr, c0 + dc : c1 + dc] += g * (src - aff * dst)
    # d(unit)/d(data) for each endpoint is the tangential projector / norm;
    # the projection is already folded in above (dst - aff*src terms), so only
    # the 1/norm factor remains.
    grad = grad_unit / safe
    grad[:, degenerate] = 0.0
    return loss / count, grad


def agd_intra_backward(emap: EmbeddingMap, a_teacher: AffinityMap) -> np.ndarray:
    """d(agd_intra_loss)/d(embedding), teacher side constant."""
    return affinity_mse_term(emap, a_teacher)[1]


def affinity_supervision_backward(emap: EmbeddingMap, a_gt: AffinityMap) -> np.ndarray:
    """d(affinity_supervision_loss)/d(embedding)."""
    return affinity_mse_term(emap, a_gt)[1]


def _unit_rows(emap: EmbeddingMap) -> np.ndarray:
    """Per-pixel-normalized embeddings as an (HW, D) row matrix."""
    unit = normalize_pixels(emap.as64())
    depth = unit.shape[0]
    return unit.reshape(depth, -1).T


def compute_inter_affinity(emap_m: EmbeddingMap, emap_l: EmbeddingMap) -> InterAffinityMap:
    """Dense cosine table between all pixel pairs of two images."""
    if emap_m.shape != emap_l.shape:
        raise ContractError(f"embedding shapes differ: {emap_m.shape} vs {emap_l.shape}")
    rows_m = _unit_rows(emap_m)
    rows_l = _unit_rows(emap_l)
    values = np.clip(rows_m @ rows_l.T, -1.0, 1.0)
    return InterAffinityMap(values, emap_m.height, emap_m.width)


def agd_inter_loss(inter_student: list, inter_teacher: list) -> float:
    """Mean squared difference across matched lists of inter-affinity maps."""
    if len(inter_student) != len(inter_teacher):
        raise ContractError(
            f"list lengths differ: {len(inter_student)} vs {len(inter_teacher)}"
        )
    if not inter_student:
        return 0.0
    total = 0.0
    for a_s, a_t in zip(inter_student, inter_teacher):
        if a_s.values.shape != a_t.values.shape:
            raise ContractError("inter-affinity shapes differ within a pair")
        diff = a_s.values - a_t.values
        total += float(np.mean(diff * diff))
    return total / len(inter_student)


def _chain_pixel_normalization(emap: EmbeddingMap, grad_unit_rows: np.ndarray) -> np.ndarray:
    """Pull an (HW, D) gradient w.r.t. unit rows back to the raw (D, H, W) map."""
    data = emap.as64()
    depth, height, width = data.shape
    norms = np.sqrt(np.sum(data * data, axis=0)).reshape(-1)
    degenerate = norms < EPS_NORM
    safe = np.where(degenerate, 1.0, norms)
    rows = data.reshape(depth, -1).T / safe[:, None]
    rows[degenerate] = 0.0
    inner = np.sum(rows * grad_unit_rows, axis=1, keepdims=True)
    grad_rows = (grad_unit_rows - inner * rows) / safe[:, None]
    grad_rows[degenerate] = 0.0
    return grad_rows.T.reshape(depth, height, width)


def agd_inter_backward(
    emap_student: EmbeddingMap, bank_maps: list, inter_teacher: list
) -> np.ndarray:
    """d(agd_inter_loss)/d(student embedding); bank and teacher maps constant.

    The student inter-affinity maps are recomputed internally from the student
    embedding and each bank map.
    """
    if len(bank_maps) != len(inter_teacher):
        raise ContractError("bank map and teacher inter-affinity counts differ")
    count = len(bank_maps)
    if count == 0:
        return np.zeros(emap_student.shape)
    rows_s = _unit_rows(emap_student)
    pixels = rows_s.shape[0]
    grad_rows = np.zeros_like(rows_s)
    for bank_map, a_t in zip(bank_maps, inter_teacher):
        rows_l = _unit_rows(bank_map)
        diff = rows_s @ rows_l.T - a_t.values
        grad_rows += (2.0 / (count * pixels * pixels)) * (diff @ rows_l)
    return _chain_pixel_normalization(emap_student, grad_rows)


def inter_bank_gram(bank_maps: list) -> np.ndarray:
    """Sum of D x D Gram matrices of the normalized bank maps.

    Precomputable once per iteration and shared across the batch by
    agd_inter_term_fast.
    """
    if not bank_maps:
        raise DomainError("bank map list must be non-empty")
    rows = _unit_rows(bank_maps[0])
    gram = rows.T @ rows
    for bank_map in bank_maps[1:]:
        rows = _unit_rows(bank_map)
        if rows.shape[1] != gram.shape[0]:
            raise ContractError("bank maps disagree on embedding depth")
        gram += rows.T @ rows
    return gram


def agd_inter_term_fast(
    emap_student: EmbeddingMap,
    emap_teacher: EmbeddingMap,
    bank_maps: list,
    gram: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Loss and student gradient for the inter-image affinity alignment.

    Because student and teacher are compared against the same bank maps, the
    squared Frobenius difference of the two (HW x HW) tables collapses to a
    D x D quadratic form, which avoids materializing the tables. Agrees with
    the explicit compute_inter_affinity / agd_inter_loss route to float
    precision (covered by tests).
    """
    count = len(bank_maps)
    if count == 0:
        return 0.0, np.zeros(emap_student.shape)
    if emap_student.shape != emap_teacher.shape:
        raise ContractError("student/teacher embedding shapes differ")
    for bank_map in bank_maps:
        if bank_map.shape != emap_student.shape:
            raise ContractError("bank map shape differs from student map")
    delta = _unit_rows(emap_student) - _unit_rows(emap_teacher)
    pixels = delta.shape[0]
    if gram is None:
        gram = inter_bank_gram(bank_maps)
    scale = 1.0 / (count * pixels * pixels)
    delta_gram = delta @ gram
    loss = scale * float(np.sum(delta_gram * delta))
    grad_rows = (2.0 * scale) * delta_gram
    return loss, _chain_pixel_normalization(emap_student, grad_rows)


# --------------------------------------------------------------------------
# Serialization: affinity values (f32) and validity mask (u32, 1 = valid) as
# two consecutive tensor records in one file.
# --------------------------------------------------------------------------


def save_affinity_map(path, amap: AffinityMap) -> None:
    with open(path, "wb") as f:
        f.write(pack_tensor(amap.values.astype(np.float32)))
        f.write(pack_tensor(amap.valid.astype(np.uint32)))


def load_affinity_map(path, offsets=None) -> AffinityMap:
    with open(path, "rb") as f:
        buf = f.read()
    values, pos = unpack_tensor(buf, 0)
    valid, _ = unpack_tensor(buf, pos)
    return AffinityMap(values.astype(np.float64), valid.astype(bool), offsets)
