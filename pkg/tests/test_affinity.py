import numpy as np
import pytest

from graphdistill.affinity import (
    affinity_mse_term,
    affinity_supervision_loss,
    agd_inter_backward,
    agd_inter_loss,
    agd_intra_backward,
    agd_intra_loss,
    AffinityMap,
    compute_inter_affinity,
    compute_intra_affinity,
    default_offsets,
    gt_affinity,
    agd_inter_term_fast,
    load_affinity_map,
    make_offsets,
    save_affinity_map,
)
from graphdistill.tensors import ContractError, DomainError, EmbeddingMap, LabelMask

from oracles import brute_gt_affinity, brute_inter_affinity, brute_intra_affinity, central_diff

OFFSETS = make_offsets([(0, 1), (1, 0)])


def random_map(rng, depth=2, height=4, width=4):
    return EmbeddingMap(rng.normal(size=(depth, height, width)))


class TestOffsets:
    def test_default_set_has_twelve(self):
        offsets = default_offsets()
        assert len(offsets) == 12
        assert (0, 1) in offsets and (-9, 9) in offsets

    def test_rejects_origin_and_duplicates(self):
        with pytest.raises(DomainError):
            make_offsets([(0, 0)])
        with pytest.raises(DomainError):
            make_offsets([(0, 1), (0, 1)])


class TestIntraAffinity:
    def test_constant_map_all_ones(self):
        data = np.ones((3, 4, 4))
        amap = compute_intra_affinity(EmbeddingMap(data), OFFSETS)
        assert np.all(amap.values[amap.valid] == 1.0)

    def test_orthogonal_columns_zero(self):
        data = np.zeros((2, 3, 2))
        data[0, :, 0] = 1.0
        data[1, :, 1] = 1.0
        amap = compute_intra_affinity(EmbeddingMap(data), make_offsets([(0, 1)]))
        assert np.all(amap.values[amap.valid] == 0.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        emap = random_map(rng)
        amap = compute_intra_affinity(emap, OFFSETS)
        oracle = brute_intra_affinity(emap.as64(), OFFSETS)
        for (k, r, c), expected in oracle.items():
            assert amap.valid[k, r, c]
            assert amap.values[k, r, c] == pytest.approx(expected, abs=1e-9)
        assert amap.valid_count() == len(oracle)

    def test_values_in_range(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            amap = compute_intra_affinity(random_map(rng), default_offsets())
            vals = amap.values[amap.valid]
            assert np.all(vals >= -1.0) and np.all(vals <= 1.0)

    def test_oversized_offset_has_no_valid_entries(self):
        amap = compute_intra_affinity(
            EmbeddingMap(np.ones((1, 3, 3))), make_offsets([(0, 9)])
        )
        assert amap.valid_count() == 0


class TestGtAffinity:
    def test_single_instance_all_ones(self):
        amap = gt_affinity(LabelMask(np.ones((3, 3), dtype=int)), OFFSETS)
        assert np.all(amap.values[amap.valid] == 1.0)

    def test_boundary_pair_zero(self):
        amap = gt_affinity(LabelMask(np.array([[1, 2]])), make_offsets([(0, 1)]))
        assert amap.valid[0, 0, 0]
        assert amap.values[0, 0, 0] == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(9)
        labels = rng.integers(1, 3, size=(4, 4))
        amap = gt_affinity(LabelMask(labels), OFFSETS)
        oracle = brute_gt_affinity(labels, OFFSETS)
        for (k, r, c), expected in oracle.items():
            assert amap.values[k, r, c] == expected

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(10)
        labels = rng.integers(1, 4, size=(5, 5))
        swapped = np.select([labels == 1, labels == 2, labels == 3], [7, 5, 9])
        a = gt_affinity(LabelMask(labels), OFFSETS)
        b = gt_affinity(LabelMask(swapped.astype(np.uint32)), OFFSETS)
        np.testing.assert_array_equal(a.values, b.values)


class TestIntraLosses:
    def test_identical_maps_zero(self):
        rng = np.random.default_rng(2)
        amap = compute_intra_affinity(random_map(rng), OFFSETS)
        assert agd_intra_loss(amap, amap) == 0.0

    def test_ones_vs_zeros(self):
        valid = np.zeros((1, 2, 2), dtype=bool)
        valid[0, :, :2] = True  # 4 valid entries
        a = AffinityMap(np.ones((1, 2, 2)), valid, [(0, 1)])
        b = AffinityMap(np.zeros((1, 2, 2)), valid, [(0, 1)])
        assert agd_intra_loss(a, b) == 1.0

    def test_random_pair_matches_hand_mean(self):
        rng = np.random.default_rng(3)
        m1 = compute_intra_affinity(random_map(rng), OFFSETS)
        m2 = compute_intra_affinity(random_map(rng), OFFSETS)
        expected = np.mean((m1.values[m1.valid] - m2.values[m2.valid]) ** 2)
        assert agd_intra_loss(m1, m2) == pytest.approx(expected, rel=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        m1 = compute_intra_affinity(random_map(rng), OFFSETS)
        m2 = compute_intra_affinity(random_map(rng), OFFSETS)
        assert agd_intra_loss(m1, m2) == pytest.approx(agd_intra_loss(m2, m1))

    def test_validity_mismatch_rejected(self):
        a = compute_intra_affinity(EmbeddingMap(np.ones((1, 3, 3))), OFFSETS)
        b = compute_intra_affinity(EmbeddingMap(np.ones((1, 4, 4))), OFFSETS)
        with pytest.raises(ContractError):
            agd_intra_loss(a, b)

    def test_supervision_uniform_half(self):
        mask = LabelMask(np.ones((3, 3), dtype=int))
        gt = gt_affinity(mask, OFFSETS)
        pred = AffinityMap(np.full(gt.shape, 0.5), gt.valid, OFFSETS)
        assert affinity_supervision_loss(pred, gt) == pytest.approx(0.25)

    def test_supervision_decreases_toward_target(self):
        rng = np.random.default_rng(5)
        mask = LabelMask(rng.integers(1, 3, size=(4, 4)))
        gt = gt_affinity(mask, OFFSETS)
        start = AffinityMap(rng.uniform(-1, 1, gt.shape), gt.valid, OFFSETS)
        losses = []
        for alpha in np.linspace(0.0, 1.0, 5):
            blended = AffinityMap(
                (1 - alpha) * start.values + alpha * gt.values, gt.valid, OFFSETS
            )
            losses.append(affinity_supervision_loss(blended, gt))
        assert all(a >= b for a, b in zip(losses, losses[1:]))


class TestInterAffinity:
    def test_identical_constant_unit_maps(self):
        data = np.zeros((2, 2, 2))
        data[0] = 1.0
        inter = compute_inter_affinity(EmbeddingMap(data), EmbeddingMap(data))
        np.testing.assert_allclose(inter.values, 1.0)

    def test_orthogonal_constant_maps(self):
        a = np.zeros((2, 2, 2))
        b = np.zeros((2, 2, 2))
        a[0] = 1.0
        b[1] = 1.0
        inter = compute_inter_affinity(EmbeddingMap(a), EmbeddingMap(b))
        np.testing.assert_allclose(inter.values, 0.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(21)
        m1 = random_map(rng, depth=3, height=3, width=3)
        m2 = random_map(rng, depth=3, height=3, width=3)
        inter = compute_inter_affinity(m1, m2)
        np.testing.assert_allclose(
            inter.values, brute_inter_affinity(m1.as64(), m2.as64()), atol=1e-9
        )

    def test_self_affinity_unit_diagonal(self):
        rng = np.random.default_rng(22)
        emap = random_map(rng, depth=4)
        inter = compute_inter_affinity(emap, emap)
        np.testing.assert_allclose(np.diag(inter.values), 1.0, atol=1e-6)

    def test_loss_constant_difference(self):
        ones = np.zeros((2, 2, 2))
        ones[0] = 1.0
        tilted = np.zeros((2, 2, 2))
        tilted[0] = 1.0
        tilted[1] = 1.0  # cosine against ones-map pixels = 1/sqrt(2)
        a = compute_inter_affinity(EmbeddingMap(ones), EmbeddingMap(ones))
        b = compute_inter_affinity(EmbeddingMap(tilted), EmbeddingMap(ones))
        expected = (1.0 - 1.0 / np.sqrt(2.0)) ** 2
        assert agd_inter_loss([a], [b]) == pytest.approx(expected)

    def test_loss_repeating_pair_unchanged(self):
        rng = np.random.default_rng(23)
        s = compute_inter_affinity(random_map(rng), random_map(rng))
        t = compute_inter_affinity(random_map(rng), random_map(rng))
        once = agd_inter_loss([s], [t])
        twice = agd_inter_loss([s, s], [t, t])
        assert once == pytest.approx(twice, rel=1e-12)

    def test_structure_mismatch(self):
        rng = np.random.default_rng(24)
        s = compute_inter_affinity(random_map(rng), random_map(rng))
        with pytest.raises(ContractError):
            agd_inter_loss([s], [])


class TestBackwards:
    def test_zero_at_target(self):
        rng = np.random.default_rng(31)
        emap = random_map(rng)
        target = compute_intra_affinity(emap, OFFSETS)
        grad = agd_intra_backward(emap, target)
        assert np.max(np.abs(grad)) < 1e-9

    def test_intra_matches_finite_differences(self):
        rng = np.random.default_rng(32)
        emap = random_map(rng, depth=2, height=3, width=3)
        target = compute_intra_affinity(random_map(rng, 2, 3, 3), OFFSETS)
        _, grad = affinity_mse_term(emap, target)

        def loss_of(flat):
            return affinity_mse_term(
                EmbeddingMap(flat.reshape(2, 3, 3)), target
            )[0]

        fd = central_diff(loss_of, emap.as64().reshape(-1)).reshape(2, 3, 3)
        scale = max(np.abs(fd).max(), np.abs(grad).max())
        assert np.abs(grad - fd).max() / scale < 1e-4

    def test_inter_matches_finite_differences(self):
        rng = np.random.default_rng(33)
        emap = random_map(rng, depth=2, height=3, width=3)
        banks = [random_map(rng, 2, 3, 3) for _ in range(2)]
        teacher = random_map(rng, 2, 3, 3)
        inter_teacher = [compute_inter_affinity(teacher, b) for b in banks]
        grad = agd_inter_backward(emap, banks, inter_teacher)

        def loss_of(flat):
            student = EmbeddingMap(flat.reshape(2, 3, 3))
            inter = [compute_inter_affinity(student, b) for b in banks]
            return agd_inter_loss(inter, inter_teacher)

        fd = central_diff(loss_of, emap.as64().reshape(-1)).reshape(2, 3, 3)
        scale = max(np.abs(fd).max(), np.abs(grad).max())
        assert np.abs(grad - fd).max() / scale < 1e-4

    def test_bank_scale_invariance(self):
        rng = np.random.default_rng(34)
        student = random_map(rng)
        teacher = random_map(rng)
        bank = random_map(rng)
        loss1, grad1 = agd_inter_term_fast(student, teacher, [bank])
        doubled = EmbeddingMap(2.0 * bank.as64())
        loss2, grad2 = agd_inter_term_fast(student, teacher, [doubled])
        assert loss1 == pytest.approx(loss2, rel=1e-9)
        np.testing.assert_allclose(grad1, grad2, atol=1e-12)

    def test_fast_route_equals_explicit_route(self):
        rng = np.random.default_rng(35)
        student = random_map(rng, depth=3)
        teacher = random_map(rng, depth=3)
        banks = [random_map(rng, depth=3) for _ in range(3)]
        fast_loss, fast_grad = agd_inter_term_fast(student, teacher, banks)
        inter_s = [compute_inter_affinity(student, b) for b in banks]
        inter_t = [compute_inter_affinity(teacher, b) for b in banks]
        explicit_loss = agd_inter_loss(inter_s, inter_t)
        explicit_grad = agd_inter_backward(student, banks, inter_t)
        assert fast_loss == pytest.approx(explicit_loss, abs=1e-12)
        np.testing.assert_allclose(fast_grad, explicit_grad, atol=1e-12)


class TestSerialization:
    def test_round_trip_with_validity(self, tmp_path):
        rng = np.random.default_rng(41)
        amap = compute_intra_affinity(random_map(rng), OFFSETS)
        path = tmp_path / "a.graff"
        save_affinity_map(path, amap)
        back = load_affinity_map(path, OFFSETS)
        np.testing.assert_allclose(back.values, amap.values, atol=1e-7)
        np.testing.assert_array_equal(back.valid, amap.valid)
        assert back.offsets == amap.offsets
