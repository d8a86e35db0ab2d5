"""Affinity-based clustering into instance segmentations.

A deliberately simple post-processor: pixels joined by union-find wherever a
stride-1 affinity exceeds the threshold, connected components becoming
instances. This stands in for the heavier agglomerative algorithms used on
real data; it is deterministic and exactly reproducible by a flood fill.
"""

from __future__ import annotations

import numpy as np

from .affinity import AffinityMap, make_offsets
from .tensors import ContractError, LabelMask


class UnionFind:
    """Disjoint sets over range(size) with path compression and union by size."""

    def __init__(self, size: int):
        self.parent = list(range(size))
        self.size = [1] * size

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]


def affinity_cluster(amap: AffinityMap, offsets, threshold: float) -> LabelMask:
    """Segment an affinity stack by thresholded stride-1 merges.

    Pixels p and p + n are joined when offset n has max-norm 1 and the
    affinity strictly exceeds the threshold. Instance ids are assigned by
    first-pixel raster order, starting at 1.
    """
    offsets = make_offsets(offsets)
    if len(offsets) != amap.shape[0]:
        raise ContractError(
            f"{len(offsets)} offsets for an affinity stack of depth {amap.shape[0]}"
        )
    if not (-1.0 < threshold < 1.0):
        raise ContractError(f"threshold must lie in (-1, 1), got {threshold}")
    stride1 = [k for k, (dr, dc) in enumerate(offsets) if max(abs(dr), abs(dc)) == 1]
    if not stride1:
        raise ContractError("clustering requires at least one stride-1 offset")

    _, height, width = amap.shape
    uf = UnionFind(height * width)
    for k in stride1:
        dr, dc = offsets[k]
        join = amap.valid[k] & (amap.values[k] > threshold)
        rows, cols = np.nonzero(join)
        for r, c in zip(rows.tolist(), cols.tolist()):
            uf.union(r * width + c, (r + dr) * width + (c + dc))

    labels = np.zeros((height, width), dtype=np.uint32)
    next_id = 1
    assigned: dict[int, int] = {}
    for p in range(height * width):
        root = uf.find(p)
        if root not in assigned:
            assigned[root] = next_id
            next_id += 1
        labels[p // width, p % width] = assigned[root]
    return LabelMask(labels)
