import numpy as np
import pytest

from vgfm.alignment import (
    AssignmentMatrix,
    ProjectionHead,
    QueryBatch,
    aggregate_prototypes,
    collect_class_queries,
    contrastive_loss,
    image_alignment_loss,
    prototype_grads_to_queries,
    resize_bilinear,
    sinkhorn_assign,
)
from vgfm.core import FeatureMap
from vgfm.errors import DomainError
from vgfm.rng import Rng

from .oracles import central_difference_grad, relative_error, sinkhorn_longrun


class TestQueryCollection:
    def test_collects_by_argmax_label(self):
        rng = np.random.default_rng(0)
        q = rng.standard_normal((6, 4))
        logits = np.array(
            [[2.0, 0.0], [0.0, 2.0], [1.0, 0.5], [0.1, 0.9], [3.0, 1.0], [0.0, 4.0]]
        )
        batch = QueryBatch(features=q, logits=logits)
        np.testing.assert_array_equal(batch.labels, [0, 1, 0, 1, 0, 1])
        got = collect_class_queries(batch, 0)
        np.testing.assert_array_equal(got, q[[0, 2, 4]])
        # empty class
        assert collect_class_queries(batch, 5).shape == (0, 4)

    def test_all_same_label(self):
        q = np.ones((3, 2))
        logits = np.tile([5.0, 1.0], (3, 1))
        batch = QueryBatch(features=q, logits=logits)
        np.testing.assert_array_equal(collect_class_queries(batch, 0), q)

    def test_filter_oracle(self):
        rng = np.random.default_rng(1)
        q = rng.standard_normal((20, 3))
        logits = rng.standard_normal((20, 4))
        batch = QueryBatch(features=q, logits=logits)
        for c in range(4):
            want = np.stack([q[i] for i in range(20) if np.argmax(logits[i]) == c]) if any(
                np.argmax(logits[i]) == c for i in range(20)
            ) else np.zeros((0, 3))
            got = collect_class_queries(batch, c)
            np.testing.assert_array_equal(got, want)


class TestSinkhorn:
    def test_constant_init_uniform_one_sweep(self):
        out = sinkhorn_assign(np.zeros((4, 3)))
        assert out.converged
        assert out.iterations == 1
        np.testing.assert_allclose(out.a, 1.0 / 3.0, atol=1e-12)

    def test_single_column(self):
        out = sinkhorn_assign(np.random.default_rng(0).standard_normal((5, 1)))
        np.testing.assert_allclose(out.a, 1.0, atol=1e-12)

    def test_marginals(self):
        rng = np.random.default_rng(1)
        out = sinkhorn_assign(rng.standard_normal((7, 4)), eps=0.05)
        assert out.converged
        np.testing.assert_allclose(out.a.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(out.a.sum(axis=0), 7.0 / 4.0, atol=1e-6)
        assert out.marginal_violation() < 1e-6

    def test_against_longrun_oracle(self):
        rng = np.random.default_rng(2)
        for trial in range(5):
            init = rng.standard_normal((5, 3))
            got = sinkhorn_assign(init, eps=0.05, tol=1e-13, max_iter=100_000).a
            want = sinkhorn_longrun(init, eps=0.05, iterations=20_000)
            np.testing.assert_allclose(got, want, atol=1e-8)

    def test_nonfinite_rejected(self):
        with pytest.raises(DomainError):
            sinkhorn_assign(np.array([[np.nan, 1.0]]))


class TestAggregate:
    def test_uniform_assignment_gives_column_mean(self):
        rng = np.random.default_rng(3)
        q = rng.standard_normal((6, 4))
        a = AssignmentMatrix(a=np.full((6, 3), 1.0 / 3.0), converged=True, iterations=1)
        protos, present = aggregate_prototypes(q, a)
        assert present.all()
        for k in range(3):
            np.testing.assert_allclose(protos[k], q.mean(axis=0), atol=1e-12)

    def test_one_hot_partition(self):
        q = np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 5.0]])
        a = AssignmentMatrix(
            a=np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), converged=True, iterations=1
        )
        protos, present = aggregate_prototypes(q, a)
        np.testing.assert_allclose(protos[0], [2.0, 0.0])
        np.testing.assert_allclose(protos[1], [0.0, 5.0])

    def test_zero_mass_column_absent(self):
        q = np.ones((2, 2))
        a = AssignmentMatrix(a=np.array([[1.0, 0.0], [1.0, 0.0]]), converged=True, iterations=1)
        protos, present = aggregate_prototypes(q, a)
        assert present.tolist() == [True, False]
        np.testing.assert_array_equal(protos[1], 0.0)

    def test_against_double_loop_oracle(self):
        rng = np.random.default_rng(4)
        q = rng.standard_normal((8, 5))
        a_mat = rng.uniform(0.1, 1.0, size=(8, 3))
        a = AssignmentMatrix(a=a_mat, converged=True, iterations=1)
        protos, _ = aggregate_prototypes(q, a)
        for k in range(3):
            num = np.zeros(5)
            den = 0.0
            for i in range(8):
                num += a_mat[i, k] * q[i]
                den += a_mat[i, k]
            np.testing.assert_allclose(protos[k], num / den, atol=1e-12)

    def test_convex_envelope_property(self):
        rng = np.random.default_rng(5)
        q = rng.standard_normal((10, 4))
        out = sinkhorn_assign(rng.standard_normal((10, 3)))
        protos, present = aggregate_prototypes(q, out)
        lo = q.min(axis=0) - 1e-12
        hi = q.max(axis=0) + 1e-12
        for k in range(3):
            if present[k]:
                assert (protos[k] >= lo).all() and (protos[k] <= hi).all()

    def test_grad_chain_shape(self):
        rng = np.random.default_rng(6)
        a = sinkhorn_assign(rng.standard_normal((6, 3)))
        g = prototype_grads_to_queries(a, rng.standard_normal((3, 4)))
        assert g.shape == (6, 4)


def make_head(d=5, dq=4, levels=2, seed=0):
    return ProjectionHead.init(d, dq, Rng(seed, ("head",)), levels=levels)


class TestContrastive:
    def test_uniform_similarity_ln_ck(self):
        # identical vectors everywhere -> all similarities equal -> ln(C*K)
        c, k, d, dq = 3, 4, 6, 5
        head = make_head(d, dq)
        batch = np.tile(np.array([1.0, 2.0, 0.5, -1.0, 0.3]), (c, k, 1))
        ref = np.tile(np.linspace(0.1, 1.0, d), (c, k, 1))
        res = contrastive_loss(batch, np.ones((c, k), bool), ref, np.ones((c, k), bool), head)
        assert res.loss == pytest.approx(np.log(c * k), abs=1e-9)

    def test_singleton_zero_loss(self):
        head = make_head(3, 2)
        batch = np.random.default_rng(0).standard_normal((1, 1, 2))
        ref = np.random.default_rng(1).standard_normal((1, 1, 3))
        res = contrastive_loss(batch, np.ones((1, 1), bool), ref, np.ones((1, 1), bool), head)
        assert res.loss == pytest.approx(0.0, abs=1e-12)

    def test_empty_present_returns_zero(self):
        head = make_head(3, 2)
        res = contrastive_loss(
            np.zeros((2, 2, 2)), np.zeros((2, 2), bool),
            np.zeros((2, 2, 3)), np.ones((2, 2), bool), head,
        )
        assert res.loss == 0.0
        assert not res.grad_prototypes.any()

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            head = make_head(4, 3, seed=int(rng.integers(1000)))
            batch = rng.standard_normal((2, 3, 3))
            ref = rng.standard_normal((2, 3, 4))
            res = contrastive_loss(
                batch, np.ones((2, 3), bool), ref, np.ones((2, 3), bool), head
            )
            assert res.loss >= 0.0

    def test_direct_formula_small_instance(self):
        # recompute the normalized-temperature InfoNCE by hand
        c, k, d, dq = 2, 2, 5, 5
        rng = np.random.default_rng(8)
        head = make_head(d, dq, seed=3)
        batch = rng.standard_normal((c, k, dq))
        ref = rng.standard_normal((c, k, d))
        res = contrastive_loss(batch, np.ones((c, k), bool), ref, np.ones((c, k), bool), head, temperature=0.1)
        mapped, _ = head.mlp_forward(ref.reshape(-1, d))
        z = batch.reshape(-1, dq)
        z = z / np.linalg.norm(z, axis=1, keepdims=True)
        u = mapped / np.linalg.norm(mapped, axis=1, keepdims=True)
        sims = z @ u.T / 0.1
        want = 0.0
        for a in range(c * k):
            want += np.log(np.exp(sims[a]).sum()) - sims[a, a]
        want /= c * k
        assert res.loss == pytest.approx(want, abs=1e-10)

    def test_gradients_match_fd(self):
        c, k, d, dq = 2, 2, 5, 4
        rng = np.random.default_rng(9)
        head = make_head(d, dq, seed=5)
        batch = rng.standard_normal((c, k, dq))
        ref = rng.standard_normal((c, k, d))
        masks = (np.ones((c, k), bool), np.ones((c, k), bool))
        res = contrastive_loss(batch, masks[0], ref, masks[1], head)

        def f(x):
            return contrastive_loss(x, masks[0], ref, masks[1], head).loss

        num = central_difference_grad(f, batch.copy())
        assert relative_error(res.grad_prototypes, num) < 1e-6

    def test_stop_gradient_contract(self):
        # changing the sinkhorn init (hence A) must not change the reported
        # gradient of the loss w.r.t. the prototypes at fixed prototypes
        rng = np.random.default_rng(10)
        head = make_head(4, 3, seed=6)
        batch = rng.standard_normal((2, 2, 3))
        ref = rng.standard_normal((2, 2, 4))
        r1 = contrastive_loss(batch, np.ones((2, 2), bool), ref, np.ones((2, 2), bool), head)
        r2 = contrastive_loss(batch, np.ones((2, 2), bool), ref, np.ones((2, 2), bool), head)
        np.testing.assert_array_equal(r1.grad_prototypes, r2.grad_prototypes)

    def test_raw_dot_mode(self):
        c, k, d, dq = 2, 2, 4, 3
        rng = np.random.default_rng(11)
        head = make_head(d, dq, seed=7)
        batch = 0.2 * rng.standard_normal((c, k, dq))
        ref = 0.2 * rng.standard_normal((c, k, d))
        res = contrastive_loss(
            batch, np.ones((c, k), bool), ref, np.ones((c, k), bool), head, normalize=False
        )
        def f(x):
            return contrastive_loss(
                x, np.ones((c, k), bool), ref, np.ones((c, k), bool), head, normalize=False
            ).loss
        num = central_difference_grad(f, batch.copy())
        assert relative_error(res.grad_prototypes, num) < 1e-6


class TestImageAlignment:
    def test_scale_invariance_zero_loss(self):
        # identity conv, student = 2.5 x encoder map -> cosine 1 everywhere
        d = 4
        rng = np.random.default_rng(12)
        vfm = FeatureMap(data=rng.standard_normal((5, 5, d)), stride=8.0)
        head = make_head(d, d, levels=1)
        head.conv_w[0] = np.eye(d)
        head.conv_b[0] = np.zeros(d)
        student = FeatureMap(data=2.5 * vfm.data, stride=8.0)
        res = image_alignment_loss([student], vfm, head)
        assert res.loss == pytest.approx(0.0, abs=1e-12)

    def test_negation_gives_two(self):
        d = 3
        rng = np.random.default_rng(13)
        vfm = FeatureMap(data=rng.standard_normal((4, 4, d)), stride=8.0)
        head = make_head(d, d, levels=1)
        head.conv_w[0] = np.eye(d)
        head.conv_b[0] = np.zeros(d)
        student = FeatureMap(data=-vfm.data, stride=8.0)
        res = image_alignment_loss([student], vfm, head)
        assert res.loss == pytest.approx(2.0, abs=1e-12)

    def test_bounded_zero_two(self):
        rng = np.random.default_rng(14)
        for _ in range(5):
            vfm = FeatureMap(data=rng.standard_normal((5, 6, 4)), stride=8.0)
            head = make_head(4, 3, levels=2, seed=int(rng.integers(100)))
            smaps = [
                FeatureMap(data=rng.standard_normal((5, 6, 3)), stride=8.0),
                FeatureMap(data=rng.standard_normal((2, 3, 3)), stride=16.0),
            ]
            res = image_alignment_loss(smaps, vfm, head)
            assert 0.0 <= res.loss <= 2.0

    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(15)
        d, dq = 4, 3
        vfm = FeatureMap(data=rng.standard_normal((6, 6, d)), stride=8.0)
        head = make_head(d, dq, levels=2, seed=9)
        smaps = [
            FeatureMap(data=rng.standard_normal((6, 6, dq)), stride=8.0),
            FeatureMap(data=rng.standard_normal((3, 3, dq)), stride=16.0),
        ]
        res = image_alignment_loss(smaps, vfm, head)
        total = 0.0
        for level, smap in enumerate(smaps):
            v = resize_bilinear(vfm.data, smap.height, smap.width)
            acc = 0.0
            for r in range(smap.height):
                for c in range(smap.width):
                    y = head.conv_w[level] @ smap.data[r, c] + head.conv_b[level]
                    vv = v[r, c]
                    acc += 1.0 - float(y @ vv / (np.linalg.norm(y) * np.linalg.norm(vv)))
            total += acc / (smap.height * smap.width)
        want = total / 2
        assert res.loss == pytest.approx(want, abs=1e-10)

    def test_zero_norm_cell_counted_as_one(self):
        d = 3
        vfm = FeatureMap(data=np.ones((2, 2, d)), stride=8.0)
        head = make_head(d, d, levels=1)
        head.conv_w[0] = np.eye(d)
        head.conv_b[0] = np.zeros(d)
        data = np.ones((2, 2, d))
        data[0, 0] = 0.0  # zero-norm student cell
        student = FeatureMap(data=data, stride=8.0)
        res = image_alignment_loss([student], vfm, head)
        assert res.zero_norm_cells == 1
        assert res.loss == pytest.approx(1.0 / 4.0, abs=1e-12)
        np.testing.assert_array_equal(res.map_grads[0][0, 0], 0.0)

    def test_resize_identity_at_same_dims(self):
        rng = np.random.default_rng(16)
        data = rng.standard_normal((5, 7, 3))
        np.testing.assert_array_equal(resize_bilinear(data, 5, 7), data)

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(17)
        d, dq = 4, 3
        vfm = FeatureMap(data=rng.standard_normal((4, 5, d)), stride=8.0)
        head = make_head(d, dq, levels=1, seed=11)
        student_data = rng.standard_normal((4, 5, dq))

        def f(x):
            return image_alignment_loss([FeatureMap(data=x, stride=8.0)], vfm, head).loss

        res = image_alignment_loss([FeatureMap(data=student_data, stride=8.0)], vfm, head)
        num = central_difference_grad(f, student_data.copy())
        assert relative_error(res.map_grads[0], num) < 1e-6


def test_labels_equal_argmax_of_sigmoid():
    from vgfm.core import sigmoid

    rng = np.random.default_rng(20)
    logits = rng.standard_normal((30, 5))
    batch = QueryBatch(features=rng.standard_normal((30, 3)), logits=logits)
    want = np.argmax(sigmoid(logits), axis=1)
    np.testing.assert_array_equal(batch.labels, want)
