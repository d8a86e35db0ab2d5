"""Graph relation distillation for pixel-embedding instance segmentation.

A desk-scale library: instance-graph and affinity-graph distillation losses
(intra- and inter-image) with analytic gradients, a teacher-feature memory
bank, a small convolutional teacher/student pair trained by manual
backpropagation, affinity clustering, and a full instance-segmentation
metric suite, all on synthetic Voronoi data.
"""

from .affinity import (
    AffinityMap,
    InterAffinityMap,
    affinity_supervision_loss,
    agd_inter_loss,
    agd_intra_loss,
    compute_inter_affinity,
    compute_intra_affinity,
    default_offsets,
    gt_affinity,
    make_offsets,
)
from .bank import BankEntry, MemoryBank
from .clustering import affinity_cluster
from .instance_graph import (
    CrossEdgeSet,
    InstanceGraph,
    build_instance_graph,
    compute_cross_edges,
    compute_edges,
    compute_nodes,
    igd_inter_loss,
    igd_intra_loss,
)
from .metrics import MetricReport, compute_metric_report, pca_rgb
from .network import ConvNetParams, adam_step, backward, forward, init_params
from .pipeline import evaluate_model, predict_segmentation
from .synthetic import SyntheticSpec, generate_dataset, load_dataset, save_dataset
from .tensors import (
    EmbeddingMap,
    LabelMask,
    cosine_similarity,
    deserialize_tensor,
    l2_normalize_map,
    serialize_tensor,
)
from .training import LossReport, TrainerConfig, distill_student, grad_check, train_teacher

__version__ = "0.1.0"
