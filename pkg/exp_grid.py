"""Throwaway experiment: noise grid x (teacher, plain, distilled), 1 seed."""
import sys
import numpy as np
from graphdistill.training import TrainerConfig, train_teacher, distill_student
from graphdistill.synthetic import voronoi_labels
from graphdistill.network import ConvNetParams
from graphdistill.pipeline import evaluate_model
from graphdistill.tensors import LabelMask
import graphdistill.training as tr


def spaced_dataset(split, seed=0, noise=0.1):
    out = []
    count = 64 if split == "train" else 16
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0 if split == "train" else 1, i, 99)))
        flat = rng.choice(32 * 32, size=6, replace=False)
        pts = [(int(p) // 32, int(p) % 32) for p in flat]
        labels = voronoi_labels(pts, 32, 32)
        grays = rng.permutation(np.linspace(0.1, 0.9, 6)) + rng.uniform(-0.04, 0.04, 6)
        img = np.clip(grays[labels - 1] + rng.uniform(-noise, noise, labels.shape), 0, 1)
        out.append((img[None], LabelMask(labels)))
    return out


def hinge_init(width, embed_dim, rng, w0=2.0, c2=1e-2):
    w1 = rng.normal(0.0, 0.05, size=(width, 1, 3, 3))
    signs = np.where(np.arange(width) % 2 == 0, 1.0, -1.0)
    centers = (np.arange(width) + 0.5) / width
    w1[:, 0, 1, 1] = signs * w0
    b1 = -signs * w0 * centers
    w2 = np.zeros((embed_dim, width, 3, 3))
    w2[:, :, 1, 1] = rng.normal(0.0, c2, size=(embed_dim, width))
    return ConvNetParams(w1, b1, w2, np.zeros(embed_dim))


tr.init_params = hinge_init

for noise in (float(x) for x in sys.argv[1:]):
    train = spaced_dataset("train", noise=noise)
    test = spaced_dataset("test", noise=noise)
    cfg = TrainerConfig(iterations=2000, seed=0)
    teacher, _ = train_teacher(train, cfg)
    rep_t = evaluate_model(teacher, test, cfg.offsets)
    plain, _ = distill_student(
        teacher, train,
        TrainerConfig(iterations=2000, seed=0, lambda1=0, lambda2=0, lambda3=0, lambda4=0, lambda5=0),
    )
    rep_p = evaluate_model(plain, test, cfg.offsets)
    dist, _ = distill_student(teacher, train, cfg)
    rep_d = evaluate_model(dist, test, cfg.offsets)
    print(
        "noise %.2f | teacher sbd %.3f voi %.3f | plain sbd %.3f voi %.3f | dist sbd %.3f voi %.3f"
        % (noise, rep_t.sbd, rep_t.voi_total, rep_p.sbd, rep_p.voi_total, rep_d.sbd, rep_d.voi_total),
        flush=True,
    )
