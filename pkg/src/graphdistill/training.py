"""Composite distillation objective, training loops, and gradient checking.

The total objective is the supervised affinity loss plus five weighted
distillation terms (intra node/edge, intra affinity, inter edge, inter
affinity). Teacher-side quantities and memory-bank entries are constants;
gradients flow only into the student embedding map and from there into the
student parameters. Zero-weight terms are skipped entirely, so setting the
inter weights to zero makes an iteration independent of the bank, and zeroing
all five weights degenerates to plain supervised training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .affinity import (
    AffinityMap,
    affinity_mse_term,
    agd_inter_backward,
    agd_inter_loss,
    agd_inter_term_fast,
    compute_inter_affinity,
    compute_intra_affinity,
    default_offsets,
    gt_affinity,
    inter_bank_gram,
    make_offsets,
)
from .bank import BankEntry, MemoryBank
from .instance_graph import (
    InstanceGraph,
    build_instance_graph,
    compute_nodes,
    cross_edges_from_nodes,
    igd_inter_loss,
    igd_inter_term,
    igd_intra_term,
)
from .network import (
    AdamState,
    ConvNetParams,
    adam_step,
    backward,
    forward,
    forward_with_cache,
    init_params,
)
from .tensors import ContractError, DomainError, EmbeddingMap, LabelMask


@dataclass
class TrainerConfig:
    """Hyperparameters for teacher pretraining and student distillation."""

    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 10.0
    lambda4: float = 1.0
    lambda5: float = 1.0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps_adam: float = 1e-8
    batch_size: int = 2
    iterations: int = 2000
    bank_capacity: int = 32
    bank_samples: int = 12
    offsets: tuple = field(default_factory=default_offsets)
    embed_dim: int = 8
    teacher_width: int = 32
    student_width: int = 4
    seed: int = 0

    def __post_init__(self):
        for k in range(1, 6):
            if getattr(self, f"lambda{k}") < 0:
                raise DomainError(f"lambda{k} must be >= 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise DomainError("Adam betas must lie in (0, 1)")
        if self.batch_size < 1 or self.iterations < 0:
            raise DomainError("batch size must be >= 1 and iterations >= 0")
        if self.bank_capacity < 1 or self.bank_samples < 1:
            raise DomainError("bank capacity and sample count must be >= 1")
        if self.embed_dim < 1 or self.teacher_width < 1 or self.student_width < 1:
            raise DomainError("network widths must be >= 1")
        self.offsets = make_offsets(self.offsets)

    def lambdas(self) -> tuple[float, float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)


@dataclass
class LossReport:
    """Per-term loss values for one iteration; total is their weighted sum."""

    aff: float
    node_intra: float
    edge_intra: float
    agd_intra: float
    edge_inter: float
    agd_inter: float
    total: float
    iteration: int


def _weighted_total(cfg: TrainerConfig, terms: dict) -> float:
    return (
        terms["aff"]
        + cfg.lambda1 * terms["node_intra"]
        + cfg.lambda2 * terms["edge_intra"]
        + cfg.lambda3 * terms["agd_intra"]
        + cfg.lambda4 * terms["edge_inter"]
        + cfg.lambda5 * terms["agd_inter"]
    )


def total_loss(
    emap_student: EmbeddingMap,
    emap_teacher: EmbeddingMap | None,
    mask: LabelMask,
    bank_pairs: list,
    cfg: TrainerConfig,
    iteration: int = 0,
    gt_aff: AffinityMap | None = None,
    teacher_graph: InstanceGraph | None = None,
    teacher_affinity: AffinityMap | None = None,
    bank_gram: np.ndarray | None = None,
    bank_nodes: list | None = None,
    cross_teacher: list | None = None,
) -> tuple[LossReport, np.ndarray]:
    """All six loss terms and d(total)/d(student embedding map).

    Terms whose weight is zero are skipped and reported as 0.0, so the report
    never depends on the bank when both inter weights are zero. The teacher
    map may be None only when every distillation weight is zero. Optional
    keyword arguments allow the training loop to reuse per-image teacher
    quantities; when omitted they are computed here.
    """
    distilling = any(w > 0 for w in cfg.lambdas())
    if distilling and emap_teacher is None:
        raise ContractError("teacher embedding required when a distillation weight > 0")

    if gt_aff is None:
        gt_aff = gt_affinity(mask, cfg.offsets)
    aff, grad = affinity_mse_term(emap_student, gt_aff)
    terms = {
        "aff": aff,
        "node_intra": 0.0,
        "edge_intra": 0.0,
        "agd_intra": 0.0,
        "edge_inter": 0.0,
        "agd_inter": 0.0,
    }

    if cfg.lambda1 > 0 or cfg.lambda2 > 0:
        if teacher_graph is None:
            teacher_graph = build_instance_graph(emap_teacher, mask)
        node, edge, g = igd_intra_term(
            emap_student, mask, teacher_graph, cfg.lambda1, cfg.lambda2
        )
        terms["node_intra"] = node
        terms["edge_intra"] = edge
        grad += g

    if cfg.lambda3 > 0:
        if teacher_affinity is None:
            teacher_affinity = compute_intra_affinity(emap_teacher, cfg.offsets)
        loss, g = affinity_mse_term(emap_student, teacher_affinity)
        terms["agd_intra"] = loss
        grad += cfg.lambda3 * g

    if bank_pairs and cfg.lambda4 > 0:
        if bank_nodes is None:
            bank_nodes = [compute_nodes(bm, bmask) for bm, bmask in bank_pairs]
        if cross_teacher is None:
            teacher_nodes = compute_nodes(emap_teacher, mask)
            cross_teacher = [
                cross_edges_from_nodes(teacher_nodes, nl) for nl in bank_nodes
            ]
        loss, g = igd_inter_term(
            emap_student, mask, bank_pairs, cross_teacher, bank_nodes=bank_nodes
        )
        terms["edge_inter"] = loss
        grad += cfg.lambda4 * g

    if bank_pairs and cfg.lambda5 > 0:
        bank_maps = [bm for bm, _ in bank_pairs]
        loss, g = agd_inter_term_fast(
            emap_student, emap_teacher, bank_maps, gram=bank_gram
        )
        terms["agd_inter"] = loss
        grad += cfg.lambda5 * g

    report = LossReport(total=_weighted_total(cfg, terms), iteration=iteration, **terms)
    return report, grad


def _check_dataset(dataset) -> None:
    if not dataset:
        raise ContractError("training dataset must be non-empty")


def train_teacher(dataset, cfg: TrainerConfig):
    """Train the wide network on the supervised affinity loss alone.

    Returns (params, per-iteration LossReport list). Deterministic for a
    fixed config seed.
    """
    _check_dataset(dataset)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.teacher_width, cfg.embed_dim, rng)
    state = AdamState(params)
    gt_cache = {}
    reports = []
    n = len(dataset)
    for t in range(cfg.iterations):
        batch = rng.integers(0, n, size=cfg.batch_size)
        grads = None
        aff_mean = 0.0
        for i in batch:
            image, mask = dataset[int(i)]
            if int(i) not in gt_cache:
                gt_cache[int(i)] = gt_affinity(mask, cfg.offsets)
            out, cache = forward_with_cache(params, image)
            loss, demb = affinity_mse_term(EmbeddingMap(out), gt_cache[int(i)])
            pgrads = backward(params, image, demb, cache)
            aff_mean += loss / cfg.batch_size
            if grads is None:
                grads = {k: v / cfg.batch_size for k, v in pgrads.items()}
            else:
                for k in grads:
                    grads[k] += pgrads[k] / cfg.batch_size
        adam_step(params, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_adam)
        reports.append(
            LossReport(aff_mean, 0.0, 0.0, 0.0, 0.0, 0.0, aff_mean, t)
        )
    return params, reports


def distill_student(teacher_params: ConvNetParams, dataset, cfg: TrainerConfig):
    """Distill a narrow student from a frozen teacher.

    Per iteration: draw a batch, run the teacher (no gradient), enqueue the
    teacher maps into the bank, sample bank entries, run the student, apply
    the composite objective, and take one Adam step. Teacher forwards and
    bank traffic are skipped when no active weight needs them. Returns
    (student params, per-iteration LossReport list).
    """
    _check_dataset(dataset)
    if teacher_params.embed_dim != cfg.embed_dim:
        raise ContractError(
            f"teacher embed dim {teacher_params.embed_dim} != config {cfg.embed_dim}"
        )
    seq_init, seq_bank = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(seq_init)
    student = init_params(cfg.student_width, cfg.embed_dim, rng)
    state = AdamState(student)
    bank = MemoryBank(cfg.bank_capacity, seq_bank)

    use_teacher = any(w > 0 for w in cfg.lambdas())
    use_bank = cfg.lambda4 > 0 or cfg.lambda5 > 0
    n = len(dataset)

    # Teacher-side quantities are pure functions of the frozen teacher and a
    # fixed dataset image, so they are computed once per image index.
    teacher_maps: dict[int, EmbeddingMap] = {}
    teacher_graphs: dict[int, InstanceGraph] = {}
    teacher_affinities: dict[int, AffinityMap] = {}
    teacher_nodes: dict[int, dict] = {}
    gt_cache: dict[int, AffinityMap] = {}
    bank_node_cache: dict[int, dict] = {}  # keyed by id() of a cached teacher map

    term_names = ("aff", "node_intra", "edge_intra", "agd_intra", "edge_inter", "agd_inter")
    reports = []
    for t in range(cfg.iterations):
        batch = [int(i) for i in rng.integers(0, n, size=cfg.batch_size)]
        if use_teacher:
            for i in batch:
                if i not in teacher_maps:
                    teacher_maps[i] = forward(teacher_params, dataset[i][0])
        if use_bank:
            bank.enqueue(
                [BankEntry(teacher_maps[i], dataset[i][1], t) for i in batch]
            )
            samples = bank.sample(cfg.bank_samples)
            bank_pairs = [(s.embedding, s.mask) for s in samples]
            gram = (
                inter_bank_gram([bm for bm, _ in bank_pairs])
                if cfg.lambda5 > 0 and bank_pairs
                else None
            )
            bank_nodes = None
            if cfg.lambda4 > 0:
                for bm, bmask in bank_pairs:
                    if id(bm) not in bank_node_cache:
                        bank_node_cache[id(bm)] = compute_nodes(bm, bmask)
                bank_nodes = [bank_node_cache[id(bm)] for bm, _ in bank_pairs]
        else:
            bank_pairs, gram, bank_nodes = [], None, None

        grads = None
        means = dict.fromkeys(term_names, 0.0)
        for i in batch:
            image, mask = dataset[i]
            if i not in gt_cache:
                gt_cache[i] = gt_affinity(mask, cfg.offsets)
            if use_teacher and (cfg.lambda1 > 0 or cfg.lambda2 > 0) and i not in teacher_graphs:
                teacher_graphs[i] = build_instance_graph(teacher_maps[i], mask)
            if use_teacher and cfg.lambda3 > 0 and i not in teacher_affinities:
                teacher_affinities[i] = compute_intra_affinity(teacher_maps[i], cfg.offsets)
            cross_teacher = None
            if bank_pairs and cfg.lambda4 > 0:
                if i not in teacher_nodes:
                    teacher_nodes[i] = compute_nodes(teacher_maps[i], mask)
                cross_teacher = [
                    cross_edges_from_nodes(teacher_nodes[i], nl) for nl in bank_nodes
                ]
            out, cache = forward_with_cache(student, image)
            report, demb = total_loss(
                EmbeddingMap(out),
                teacher_maps.get(i),
                mask,
                bank_pairs,
                cfg,
                iteration=t,
                gt_aff=gt_cache[i],
                teacher_graph=teacher_graphs.get(i),
                teacher_affinity=teacher_affinities.get(i),
                bank_gram=gram,
                bank_nodes=bank_nodes,
                cross_teacher=cross_teacher,
            )
            pgrads = backward(student, image, demb, cache)
            for name in term_names:
                means[name] += getattr(report, name) / cfg.batch_size
            if grads is None:
                grads = {k: v / cfg.batch_size for k, v in pgrads.items()}
            else:
                for k in grads:
                    grads[k] += pgrads[k] / cfg.batch_size
        adam_step(student, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_adam)
        reports.append(
            LossReport(total=_weighted_total(cfg, means), iteration=t, **means)
        )
    return student, reports


# --------------------------------------------------------------------------
# Gradient checking against central finite differences (64-bit, step 1e-5).
# --------------------------------------------------------------------------

GRAD_CHECK_SELECTORS = (
    "aff",
    "igd_intra",
    "igd_inter",
    "agd_intra",
    "agd_inter",
    "total",
    "model",
)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference normalized by the larger gradient magnitude.

    Defined as 0 when both gradients vanish (zero-loss configurations).
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale < 1e-12:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def central_differences(func, x0: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Entry-wise central finite differences of a scalar function."""
    grad = np.zeros_like(x0, dtype=np.float64)
    flat = grad.reshape(-1)
    for idx in range(x0.size):
        plus = x0.astype(np.float64).copy()
        minus = x0.astype(np.float64).copy()
        plus.flat[idx] += step
        minus.flat[idx] -= step
        flat[idx] = (func(plus) - func(minus)) / (2.0 * step)
    return grad


def _random_mask(rng: np.random.Generator, height: int, width: int, instances: int) -> LabelMask:
    if instances > height * width:
        raise DomainError("more instances than pixels")
    labels = rng.integers(1, instances + 1, size=(height, width))
    # pin each id to one distinct pixel so no instance is empty
    for i, pos in enumerate(rng.permutation(height * width)[:instances], start=1):
        labels.flat[pos] = i
    return LabelMask(labels)


def grad_check(
    selector: str,
    height: int = 3,
    width: int = 3,
    depth: int = 2,
    instances: int = 2,
    seed: int = 0,
) -> float:
    """Max relative error between one analytic gradient and finite differences.

    Selectors cover every loss term, the full composite objective, and the
    network parameter gradients ("model").
    """
    if selector not in GRAD_CHECK_SELECTORS:
        raise DomainError(f"unknown gradient selector {selector!r}")
    rng = np.random.default_rng(seed)
    offsets = make_offsets([(0, 1), (1, 0), (1, 1), (-1, 1), (0, 3), (3, 0)])
    cfg = TrainerConfig(offsets=offsets, embed_dim=depth, iterations=1)
    mask = _random_mask(rng, height, width, instances)
    e_student = rng.normal(0.0, 1.0, size=(depth, height, width))
    e_teacher = rng.normal(0.0, 1.0, size=(depth, height, width))
    bank_pairs = []
    for _ in range(2):
        bmap = EmbeddingMap(rng.normal(0.0, 1.0, size=(depth, height, width)))
        bank_pairs.append((bmap, _random_mask(rng, height, width, instances)))

    emap_teacher = EmbeddingMap(e_teacher)
    gt_map = gt_affinity(mask, offsets)
    teacher_aff = compute_intra_affinity(emap_teacher, offsets)
    teacher_graph = build_instance_graph(emap_teacher, mask)
    teacher_nodes = compute_nodes(emap_teacher, mask)
    cross_teacher = [
        cross_edges_from_nodes(teacher_nodes, compute_nodes(bm, bmask))
        for bm, bmask in bank_pairs
    ]
    inter_teacher = [compute_inter_affinity(emap_teacher, bm) for bm, _ in bank_pairs]

    if selector == "model":
        params = init_params(2, depth, rng)
        image = rng.normal(0.0, 1.0, size=(1, height + 2, width + 2))
        cotangent = rng.normal(0.0, 1.0, size=(depth, height + 2, width + 2))
        names = list(params.as_dict())
        sizes = [params.as_dict()[n].size for n in names]

        def unflatten(x):
            arrays = []
            pos = 0
            for n, s in zip(names, sizes):
                arrays.append(x[pos : pos + s].reshape(params.as_dict()[n].shape))
                pos += s
            return ConvNetParams(*arrays)

        def loss_of(x):
            out, _ = forward_with_cache(unflatten(x), image)
            return float(np.sum(out * cotangent))

        x0 = np.concatenate([params.as_dict()[n].reshape(-1) for n in names])
        grads = backward(params, image, cotangent)
        analytic = np.concatenate([grads[n].reshape(-1) for n in names])
        numeric = central_differences(loss_of, x0)
        return max_rel_error(analytic, numeric)

    lam_node, lam_edge = 0.3, 0.7

    def loss_of(flat):
        emap = EmbeddingMap(flat.reshape(depth, height, width))
        if selector == "aff":
            return affinity_mse_term(emap, gt_map)[0]
        if selector == "agd_intra":
            return affinity_mse_term(emap, teacher_aff)[0]
        if selector == "igd_intra":
            node, edge, _ = igd_intra_term(emap, mask, teacher_graph, 0.0, 0.0)
            return lam_node * node + lam_edge * edge
        if selector == "igd_inter":
            nodes = compute_nodes(emap, mask)
            cross = [
                cross_edges_from_nodes(nodes, compute_nodes(bm, bmask))
                for bm, bmask in bank_pairs
            ]
            return igd_inter_loss(cross, cross_teacher)
        if selector == "agd_inter":
            inter = [compute_inter_affinity(emap, bm) for bm, _ in bank_pairs]
            return agd_inter_loss(inter, inter_teacher)
        report, _ = total_loss(
            emap, emap_teacher, mask, bank_pairs, cfg, gt_aff=gt_map
        )
        return report.total

    emap_student = EmbeddingMap(e_student)
    if selector == "aff":
        analytic = affinity_mse_term(emap_student, gt_map)[1]
    elif selector == "agd_intra":
        analytic = affinity_mse_term(emap_student, teacher_aff)[1]
    elif selector == "igd_intra":
        analytic = igd_intra_term(emap_student, mask, teacher_graph, lam_node, lam_edge)[2]
    elif selector == "igd_inter":
        analytic = igd_inter_term(emap_student, mask, bank_pairs, cross_teacher)[1]
    elif selector == "agd_inter":
        analytic = agd_inter_backward(
            emap_student, [bm for bm, _ in bank_pairs], inter_teacher
        )
    else:
        analytic = total_loss(
            emap_student, emap_teacher, mask, bank_pairs, cfg, gt_aff=gt_map
        )[1]
    numeric = central_differences(loss_of, e_student.reshape(-1))
    return max_rel_error(analytic.reshape(-1), numeric)
