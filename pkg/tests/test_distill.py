import numpy as np
import pytest

from vitkd import autograd as ag
from vitkd import distill as kd
from vitkd import heads, train as tr, vit
from vitkd.autograd import Tensor
from vitkd.vit import VitConfig, VitModel

from oracles import finite_difference_grad, max_relative_error


def make_model(dim, depth, n_heads, seed):
    cfg = VitConfig(image_size=16, patch_size=4, dim=dim, depth=depth,
                    heads=n_heads, mlp_ratio=2.0, num_classes=2)
    return VitModel(cfg, heads.HeadConfig(kind="linear"), seed=seed)


def toy_arrays(n_train=24, n_val=8, seed=0, size=16):
    rng = np.random.default_rng(seed)

    def split(n):
        x = rng.uniform(0, 1, size=(n, size, size, 3))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1  # both classes always present
        return x, y

    return tr.SplitArrays(train=split(n_train), val=split(n_val), test=split(n_val))


class TestLogitLoss:
    def test_equal_logits_zero(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        assert kd.logit_loss(x, Tensor(x.data.copy())).item() == 0.0

    def test_hand_example(self):
        s = Tensor(np.array([[0.0, 0.0]]))
        t = Tensor(np.array([[2.0, 0.0]]))
        assert kd.logit_loss(s, t).item() == pytest.approx(2.0)

    def test_matches_flat_loop_oracle(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=(8, 3))
        t = rng.normal(size=(8, 3))
        total = 0.0
        for i in range(8):
            for j in range(3):
                total += (s[i, j] - t[i, j]) ** 2
        assert kd.logit_loss(Tensor(s), Tensor(t)).item() == pytest.approx(
            total / 24.0, rel=1e-14)


class TestKdLoss:
    def test_zero_align(self):
        total = kd.kd_loss(Tensor(0.0), Tensor(1.5), Tensor(0.25), alpha=5e-5)
        assert total.item() == pytest.approx(1.75)

    def test_default_alpha_arithmetic(self):
        total = kd.kd_loss(Tensor(100.0), Tensor(1.0), Tensor(0.0), alpha=5e-5)
        assert total.item() == pytest.approx(1.005)

    def test_alpha_zero_degenerates(self):
        total = kd.kd_loss(Tensor(42.0), Tensor(1.0), Tensor(0.5), alpha=0.0)
        assert total.item() == pytest.approx(1.5)

    def test_linear_in_alpha_and_monotone(self):
        align, logit, ce = Tensor(3.0), Tensor(1.0), Tensor(0.5)
        v1 = kd.kd_loss(align, logit, ce, alpha=1e-3).item()
        v2 = kd.kd_loss(align, logit, ce, alpha=2e-3).item()
        v0 = kd.kd_loss(align, logit, ce, alpha=0.0).item()
        assert v2 - v0 == pytest.approx(2 * (v1 - v0), rel=1e-12)
        assert v2 >= v1 >= v0
        # nondecreasing in each component
        assert kd.kd_loss(Tensor(4.0), logit, ce, 1e-3).item() >= v1
        assert kd.kd_loss(align, Tensor(2.0), ce, 1e-3).item() >= v1
        assert kd.kd_loss(align, logit, Tensor(1.0), 1e-3).item() >= v1

    def test_ce_optional(self):
        total = kd.kd_loss(Tensor(2.0), Tensor(1.0), None, alpha=0.5)
        assert total.item() == pytest.approx(2.0)


class TestAlignLoss:
    def test_identical_models_identity_projection_zero(self):
        model = make_model(32, 2, 4, seed=3)
        img = np.random.default_rng(4).uniform(0, 1, size=(2, 16, 16, 3))
        _, stack_a = vit.model_logits(model, img)
        _, stack_b = vit.model_logits(model, img)
        cfg = kd.KDConfig(aligned_layers=(0, 1))
        projections = kd.make_projections(4, 4, cfg, np.random.default_rng(0))
        loss = kd.align_loss(stack_a, stack_b, projections, cfg)
        assert loss.item() == 0.0

    def test_batch_permutation_symmetry(self):
        student = make_model(32, 2, 4, seed=5)
        teacher = make_model(32, 2, 8, seed=6)
        rng = np.random.default_rng(7)
        imgs = rng.uniform(0, 1, size=(3, 16, 16, 3))
        cfg = kd.KDConfig(aligned_layers=(0, 1))
        projections = kd.make_projections(4, 8, cfg, rng)

        def loss_for(batch):
            _, ss = vit.model_logits(student, batch)
            _, ts = vit.model_logits(teacher, batch)
            return kd.align_loss(ss, ts, projections, cfg).item()

        assert loss_for(imgs) == pytest.approx(loss_for(imgs[::-1]), rel=1e-12)

    def test_flat_loop_oracle(self):
        # teacher 8 heads, student 4 heads, random weights everywhere
        student = make_model(32, 2, 4, seed=8)
        teacher = make_model(32, 2, 8, seed=9)
        rng = np.random.default_rng(10)
        imgs = rng.uniform(0, 1, size=(2, 16, 16, 3))
        cfg = kd.KDConfig(aligned_layers=(0, 1))
        projections = kd.make_projections(4, 8, cfg, rng)
        for proj in projections:
            proj["w"].data[...] = rng.normal(size=proj["w"].shape)
            proj["b"].data[...] = rng.normal(size=proj["b"].shape)

        _, ss = vit.model_logits(student, imgs)
        _, ts = vit.model_logits(teacher, imgs)
        got = kd.align_loss(ss, ts, projections, cfg).item()

        layer_losses = []
        for li, layer in enumerate(cfg.aligned_layers):
            s = ss[layer].data
            t = ts[layer].data
            w = projections[li]["w"].data
            bias = projections[li]["b"].data
            b, hs, tt, _ = s.shape
            ht = t.shape[1]
            total, count = 0.0, 0
            for bb in range(b):
                for i in range(tt):
                    for j in range(tt):
                        for h2 in range(ht):
                            proj = bias[h2]
                            for h1 in range(hs):
                                proj += s[bb, h1, i, j] * w[h1, h2]
                            total += (proj - t[bb, h2, i, j]) ** 2
                            count += 1
            layer_losses.append(total / count)
        assert got == pytest.approx(float(np.mean(layer_losses)), rel=1e-10)

    def test_projection_gradient_matches_fd(self):
        student = make_model(32, 1, 4, seed=11)
        teacher = make_model(32, 1, 8, seed=12)
        rng = np.random.default_rng(13)
        img = rng.uniform(0, 1, size=(1, 16, 16, 3))
        cfg = kd.KDConfig(aligned_layers=(0,))
        projections = kd.make_projections(4, 8, cfg, rng)
        w = projections[0]["w"]
        base = w.data.copy()

        def forward(raw):
            w.data[...] = raw[0]
            _, ss = vit.model_logits(student, img)
            with ag.no_grad():
                _, ts = vit.model_logits(teacher, img)
            out = kd.align_loss(ss, ts, projections, cfg)
            w.data[...] = base
            return out

        loss = forward([base])
        ag.backward(loss)
        analytic = w.grad.copy()
        numeric = finite_difference_grad(lambda raw: float(forward(raw).data),
                                         [base], 0)
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_token_count_mismatch_rejected(self):
        a = [Tensor(np.zeros((1, 4, 17, 17)))]
        b = [Tensor(np.zeros((1, 4, 5, 5)))]
        cfg = kd.KDConfig(aligned_layers=(0,))
        projections = kd.make_projections(4, 4, cfg, np.random.default_rng(0))
        with pytest.raises(kd.TokenCountMismatchError):
            kd.align_loss(a, b, projections, cfg)

    def test_missing_layer_rejected(self):
        stack = [Tensor(np.zeros((1, 4, 5, 5)))]
        cfg = kd.KDConfig(aligned_layers=(0, 1))
        projections = kd.make_projections(4, 4, cfg, np.random.default_rng(0))
        with pytest.raises(kd.MissingLayerError):
            kd.align_loss(stack, stack, projections, cfg)


class TestDistillLoop:
    def test_lr_zero_student_unchanged(self):
        teacher = make_model(32, 2, 4, seed=14)
        student = make_model(16, 1, 4, seed=15)
        before = [t.data.copy() for _, t in student.named_tensors()]
        arrays = toy_arrays(seed=16)
        cfg = tr.TrainConfig(epochs=1, batch_size=8, lr=0.0, warmup_epochs=0)
        kd.distill(teacher, student, arrays, cfg,
                   kd.KDConfig(aligned_layers=(0,)), aug_cfg=None, seed=1)
        for (_, t), b in zip(student.named_tensors(), before):
            np.testing.assert_array_equal(t.data, b)

    def test_teacher_bit_identical_after_distill(self):
        teacher = make_model(32, 2, 8, seed=17)
        student = make_model(32, 2, 4, seed=18)
        before = [t.data.copy() for _, t in teacher.named_tensors()]
        arrays = toy_arrays(seed=19)
        cfg = tr.TrainConfig(epochs=2, batch_size=8, lr=1e-3, warmup_epochs=0)
        log = kd.distill(teacher, student, arrays, cfg, kd.KDConfig(),
                         aug_cfg=None, seed=2)
        for (_, t), b in zip(teacher.named_tensors(), before):
            np.testing.assert_array_equal(t.data, b)
        assert len(log.rows) == 2
        assert len(log.step_components) == 2 * 3  # ceil(24 / 8) steps per epoch

    def test_same_model_zero_distillation_terms_at_start(self):
        teacher = make_model(32, 2, 4, seed=20)
        student = make_model(32, 2, 4, seed=20)  # same seed, same weights
        arrays = toy_arrays(seed=21)
        cfg = tr.TrainConfig(epochs=1, batch_size=24, lr=0.0, warmup_epochs=0)
        log = kd.distill(teacher, student, arrays, cfg, kd.KDConfig(),
                         aug_cfg=None, seed=3)
        first = log.step_components[0]
        assert first["total"] - first["ce"] == pytest.approx(0.0, abs=1e-18)

    def test_incompatible_geometry_rejected(self):
        teacher = make_model(32, 2, 4, seed=22)
        cfg = VitConfig(image_size=32, patch_size=4, dim=16, depth=1, heads=4,
                        mlp_ratio=2.0, num_classes=2)
        student = VitModel(cfg, heads.HeadConfig(kind="linear"), seed=23)
        with pytest.raises(kd.DistillError):
            kd.check_compatible(teacher, student)

    def test_aligned_layers_must_fit_depths(self):
        teacher = make_model(32, 2, 4, seed=24)
        student = make_model(16, 1, 4, seed=25)
        arrays = toy_arrays(seed=26)
        cfg = tr.TrainConfig(epochs=1, batch_size=8, lr=0.0)
        with pytest.raises(kd.MissingLayerError):
            kd.distill(teacher, student, arrays, cfg,
                       kd.KDConfig(aligned_layers=(0, 1)), seed=4)
