"""Instance graphs built from embedding maps and their distillation losses.

Nodes are per-instance mean embeddings, edges are pairwise cosine similarity.
Teacher and student graphs share node identity through the ground-truth label
mask, so node sets always match and no instance matching is needed. Norm-style
objectives are implemented as squared error (MSE convention); the diagonal
i = j is excluded from edge construction and contributes zero to edge losses
while the full |I|^2 normalizer is kept.
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
)


class InstanceGraph:
    """Per-instance mean embeddings plus all ordered pairwise cosine edges."""

    def __init__(self, nodes: dict, edges: dict):
        self.nodes = nodes
        self.edges = edges

    def ids(self) -> list[int]:
        return sorted(self.nodes)


class CrossEdgeSet:
    """Complete bipartite cosine edges between the instances of two images."""

    def __init__(self, source_ids: list[int], bank_ids: list[int], edges: dict):
        if len(edges) != len(source_ids) * len(bank_ids):
            raise ContractError("cross edge set is not complete bipartite")
        self.source_ids = list(source_ids)
        self.bank_ids = list(bank_ids)
        self.edges = edges


def _check_shapes(emap: EmbeddingMap, mask: LabelMask) -> None:
    if (emap.height, emap.width) != mask.shape:
        raise DimensionError(
            f"embedding {emap.shape} and mask {mask.shape} disagree on H x W"
        )


def compute_nodes(emap: EmbeddingMap, mask: LabelMask) -> dict:
    """Mean embedding vector of each labeled instance."""
    _check_shapes(emap, mask)
    ids = mask.instance_ids()
    if not ids:
        raise DomainError("mask has no labeled instances")
    data = emap.as64().reshape(emap.depth, -1)
    flat = mask.labels.reshape(-1)
    id_array = np.asarray(ids, dtype=np.int64)
    slot = np.searchsorted(id_array, flat.astype(np.int64))
    labeled = flat > 0
    slot = slot[labeled]
    counts = np.bincount(slot, minlength=len(ids)).astype(np.float64)
    sums = np.empty((len(ids), emap.depth))
    for d in range(emap.depth):
        sums[:, d] = np.bincount(slot, weights=data[d, labeled], minlength=len(ids))
    means = sums / counts[:, None]
    return {i: means[k] for k, i in enumerate(ids)}


def _stack(nodes: dict) -> tuple[list[int], np.ndarray]:
    ids = sorted(nodes)
    return ids, np.stack([nodes[i] for i in ids])


def _unit_rows(matrix: np.ndarray):
    """Row-normalize; degenerate rows (norm < EPS_NORM) become zero rows."""
    norms = np.linalg.norm(matrix, axis=1)
    degenerate = norms < EPS_NORM
    safe = np.where(degenerate, 1.0, norms)
    unit = matrix / safe[:, None]
    unit[degenerate] = 0.0
    return unit, safe, degenerate


def _cosine_table(nodes_a: np.ndarray, nodes_b: np.ndarray) -> np.ndarray:
    unit_a, _, _ = _unit_rows(nodes_a)
    unit_b, _, _ = _unit_rows(nodes_b)
    return np.clip(unit_a @ unit_b.T, -1.0, 1.0)


def compute_edges(nodes: dict) -> dict:
    """Cosine similarity for every ordered pair of distinct nodes."""
    ids, stack = _stack(nodes)
    table = _cosine_table(stack, stack)
    return {
        (i, j): float(table[a, b])
        for a, i in enumerate(ids)
        for b, j in enumerate(ids)
        if i != j
    }


def build_instance_graph(emap: EmbeddingMap, mask: LabelMask) -> InstanceGraph:
    nodes = compute_nodes(emap, mask)
    return InstanceGraph(nodes, compute_edges(nodes))


def igd_intra_loss(g_student: InstanceGraph, g_teacher: InstanceGraph) -> tuple[float, float]:
    """(node loss, edge loss) between two graphs over the same instances.

    Node loss is the mean squared node distance; edge loss sums squared edge
    differences over ordered pairs with the |I|^2 normalizer.
    """
    ids = g_student.ids()
    if ids != g_teacher.ids():
        raise ContractError(f"instance id sets differ: {ids} vs {g_teacher.ids()}")
    node_loss = 0.0
    for i in ids:
        d = g_student.nodes[i] - g_teacher.nodes[i]
        node_loss += float(np.dot(d, d))
    node_loss /= len(ids)
    edge_loss = 0.0
    for pair, value in g_student.edges.items():
        edge_loss += (value - g_teacher.edges[pair]) ** 2
    edge_loss /= len(ids) ** 2
    return node_loss, edge_loss


def compute_cross_edges(
    emap_m: EmbeddingMap, mask_m: LabelMask, emap_l: EmbeddingMap, mask_l: LabelMask
) -> CrossEdgeSet:
    """Cosine edges between every instance of one image and every instance of another."""
    nodes_m = compute_nodes(emap_m, mask_m)
    nodes_l = compute_nodes(emap_l, mask_l)
    return cross_edges_from_nodes(nodes_m, nodes_l)


def cross_edges_from_nodes(nodes_m: dict, nodes_l: dict) -> CrossEdgeSet:
    ids_m, stack_m = _stack(nodes_m)
    ids_l, stack_l = _stack(nodes_l)
    table = _cosine_table(stack_m, stack_l)
    edges = {
        (i, j): float(table[a, b])
        for a, i in enumerate(ids_m)
        for b, j in enumerate(ids_l)
    }
    return CrossEdgeSet(ids_m, ids_l, edges)


def igd_inter_loss(cross_student: list, cross_teacher: list) -> float:
    """Mean over sampled images of the per-set mean squared edge difference."""
    if len(cross_student) != len(cross_teacher):
        raise ContractError(
            f"cross edge list lengths differ: {len(cross_student)} vs {len(cross_teacher)}"
        )
    if not cross_student:
        return 0.0
    total = 0.0
    for c_s, c_t in zip(cross_student, cross_teacher):
        if c_s.source_ids != c_t.source_ids or c_s.bank_ids != c_t.bank_ids:
            raise ContractError("cross edge id structure differs within a pair")
        sq = sum((c_s.edges[p] - c_t.edges[p]) ** 2 for p in c_s.edges)
        total += sq / len(c_s.edges)
    return total / len(cross_student)


def _scatter_node_grads(
    mask: LabelMask, ids: list[int], node_grads: np.ndarray, shape
) -> np.ndarray:
    """Distribute per-node gradients uniformly over each instance's pixels."""
    grad = np.zeros(shape)
    for k, i in enumerate(ids):
        members = mask.labels == i
        grad[:, members] += (node_grads[k] / members.sum())[:, None]
    return grad


def _edge_grad_one_side(
    coeff: np.ndarray, table: np.ndarray, stack_src: np.ndarray, unit_dst: np.ndarray
) -> np.ndarray:
    """d[sum_ij coeff_ij * table_ij]/d(source nodes) for a cosine table.

    coeff rows belong to source nodes, columns to (constant) destination
    nodes. Degenerate source nodes receive zero gradient.
    """
    unit_src, safe, degenerate = _unit_rows(stack_src)
    grad = (coeff @ unit_dst - np.sum(coeff * table, axis=1, keepdims=True) * unit_src)
    grad /= safe[:, None]
    grad[degenerate] = 0.0
    return grad


def igd_intra_term(
    emap_student: EmbeddingMap,
    mask: LabelMask,
    g_teacher: InstanceGraph,
    lam_node: float = 1.0,
    lam_edge: float = 1.0,
) -> tuple[float, float, np.ndarray]:
    """Node/edge losses and d(lam_node*L_node + lam_edge*L_edge)/d(student map)."""
    nodes = compute_nodes(emap_student, mask)
    ids, stack = _stack(nodes)
    if ids != g_teacher.ids():
        raise ContractError(f"instance id sets differ: {ids} vs {g_teacher.ids()}")
    n = len(ids)
    _, teacher_stack = _stack(g_teacher.nodes)

    diff = stack - teacher_stack
    node_loss = float(np.sum(diff * diff)) / n
    node_grads = lam_node * (2.0 / n) * diff

    table = _cosine_table(stack, stack)
    teacher_table = np.zeros((n, n))
    for a, i in enumerate(ids):
        for b, j in enumerate(ids):
            if i != j:
                teacher_table[a, b] = g_teacher.edges[(i, j)]
    edge_diff = table - teacher_table
    np.fill_diagonal(edge_diff, 0.0)
    edge_loss = float(np.sum(edge_diff * edge_diff)) / (n * n)
    # each unordered pair appears as (i, j) and (j, i); both contribute to v_i
    coeff = lam_edge * (2.0 / (n * n)) * (edge_diff + edge_diff.T)
    unit, _, _ = _unit_rows(stack)
    node_grads = node_grads + _edge_grad_one_side(coeff, table, stack, unit)

    grad = _scatter_node_grads(mask, ids, node_grads, emap_student.shape)
    return node_loss, edge_loss, grad


def igd_intra_backward(
    emap_student: EmbeddingMap,
    mask: LabelMask,
    g_teacher: InstanceGraph,
    lam_node: float = 1.0,
    lam_edge: float = 1.0,
) -> np.ndarray:
    return igd_intra_term(emap_student, mask, g_teacher, lam_node, lam_edge)[2]


def igd_inter_term(
    emap_student: EmbeddingMap,
    mask: LabelMask,
    bank_pairs: list,
    cross_teacher: list,
    bank_nodes: list | None = None,
) -> tuple[float, np.ndarray]:
    """Inter-image edge loss and its gradient w.r.t. the student embedding.

    bank_pairs is a list of (EmbeddingMap, LabelMask) from the memory bank;
    bank nodes and the teacher's cross edges are constants. Precomputed bank
    node dicts may be passed to avoid recomputation inside training loops.
    """
    if len(bank_pairs) != len(cross_teacher):
        raise ContractError("bank pair and teacher cross edge counts differ")
    if not bank_pairs:
        return 0.0, np.zeros(emap_student.shape)
    if bank_nodes is None:
        bank_nodes = [compute_nodes(bm, bmask) for bm, bmask in bank_pairs]
    nodes_m = compute_nodes(emap_student, mask)
    ids_m, stack_m = _stack(nodes_m)
    node_grads = np.zeros_like(stack_m)
    count = len(bank_pairs)
    total = 0.0
    for nodes_l, c_t in zip(bank_nodes, cross_teacher):
        ids_l, stack_l = _stack(nodes_l)
        if c_t.source_ids != ids_m or c_t.bank_ids != ids_l:
            raise ContractError("teacher cross edges disagree with bank structure")
        table = _cosine_table(stack_m, stack_l)
        teacher_table = np.array(
            [[c_t.edges[(i, j)] for j in ids_l] for i in ids_m]
        )
        diff = table - teacher_table
        pairs = diff.size
        total += float(np.sum(diff * diff)) / pairs
        coeff = (2.0 / (count * pairs)) * diff
        unit_l, _, _ = _unit_rows(stack_l)
        node_grads += _edge_grad_one_side(coeff, table, stack_m, unit_l)
    grad = _scatter_node_grads(mask, ids_m, node_grads, emap_student.shape)
    return total / count, grad


def igd_inter_backward(
    emap_student: EmbeddingMap,
    mask: LabelMask,
    bank_pairs: list,
    cross_teacher: list,
) -> np.ndarray:
    return igd_inter_term(emap_student, mask, bank_pairs, cross_teacher)[1]
