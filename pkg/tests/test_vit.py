import numpy as np
import pytest

from vitkd import autograd as ag
from vitkd import heads, vit
from vitkd.autograd import Tensor
from vitkd.vit import VitConfig, VitModel

from oracles import finite_difference_grad, max_relative_error, tensor_relative_error


def tiny_model(seed=0, **overrides):
    cfg = dict(image_size=32, patch_size=4, dim=32, depth=2, heads=4,
               mlp_ratio=4.0, num_classes=2)
    cfg.update(overrides)
    return VitModel(VitConfig(**cfg), heads.HeadConfig(kind="linear"), seed=seed)


def rand_image(rng, size):
    return rng.uniform(0.0, 1.0, size=(size, size, 3))


class TestSequenceLengthLaw:
    @pytest.mark.parametrize("image,patch,expect", [
        (224, 16, 197),   # the standard full-scale shape
        (32, 4, 65),
        (32, 16, 5),
        (8, 4, 5),
    ])
    def test_token_count(self, image, patch, expect):
        cfg = VitConfig(image_size=image, patch_size=patch, dim=16, depth=1,
                        heads=4, num_classes=2)
        assert cfg.seq_len == expect == (image * image) // (patch * patch) + 1

    def test_patchify_row_count(self):
        model = tiny_model()
        tokens = vit.patchify(model, np.zeros((32, 32, 3)))
        assert tokens.shape == (65, 32)
        batch = vit.patchify(model, np.zeros((3, 32, 32, 3)))
        assert batch.shape == (3, 65, 32)

    def test_indivisible_config_rejected(self):
        with pytest.raises(ValueError) as err:
            VitConfig(image_size=30, patch_size=16).validate()
        assert "30" in str(err.value) and "16" in str(err.value)

    def test_wrong_image_size_rejected(self):
        model = tiny_model()
        with pytest.raises(ag.ShapeError):
            vit.patchify(model, np.zeros((30, 30, 3)))


class TestMha:
    def test_single_token_attention_is_one(self):
        model = tiny_model(image_size=4, patch_size=4)
        rng = np.random.default_rng(0)
        tokens = Tensor(rng.uniform(-1, 1, size=(1, 32)))
        _, attn = vit.mha(tokens, model.blocks[0], 4)
        np.testing.assert_allclose(attn.data, np.ones((4, 1, 1)), atol=0)

    def test_identical_tokens_give_uniform_rows(self):
        model = tiny_model()
        row = np.random.default_rng(1).uniform(-1, 1, size=32)
        tokens = Tensor(np.tile(row, (9, 1)))
        _, attn = vit.mha(tokens, model.blocks[0], 4)
        np.testing.assert_allclose(attn.data, np.full((4, 9, 9), 1.0 / 9.0), atol=1e-12)

    def test_rows_sum_to_one(self):
        model = tiny_model()
        tokens = Tensor(np.random.default_rng(2).uniform(-1, 1, size=(5, 32)))
        _, attn = vit.mha(tokens, model.blocks[0], 4)
        np.testing.assert_allclose(attn.data.sum(axis=-1), np.ones((4, 5)), atol=1e-10)
        assert attn.data.min() >= 0.0 and attn.data.max() <= 1.0


class TestTransformerBlock:
    def test_zero_branches_make_identity(self):
        model = tiny_model()
        blk = model.blocks[0]
        for key in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                    "w1", "b1", "w2", "b2"):
            blk[key].data[...] = 0.0
        tokens = np.random.default_rng(3).uniform(-1, 1, size=(7, 32))
        out, _ = vit.transformer_block(Tensor(tokens), blk, 4)
        np.testing.assert_array_equal(out.data, tokens)

    def test_shape_preserved(self):
        model = tiny_model()
        tokens = Tensor(np.random.default_rng(4).uniform(-1, 1, size=(2, 65, 32)))
        out, attn = vit.transformer_block(tokens, model.blocks[0], 4)
        assert out.shape == (2, 65, 32)
        assert attn.shape == (2, 4, 65, 65)

    def test_attention_weight_gradient_matches_fd(self):
        model = tiny_model(image_size=8, dim=16, mlp_ratio=2.0)
        blk = model.blocks[0]
        rng = np.random.default_rng(5)
        tokens = rng.uniform(-1, 1, size=(5, 16))
        r = rng.uniform(-1, 1, size=(5, 16))
        wq0 = blk["wq"].data.copy()

        def forward(raw):
            blk["wq"].data[...] = raw[0]
            out, _ = vit.transformer_block(Tensor(tokens), blk, 4)
            return out, ag.mean(ag.mul(out, Tensor(r)))

        _, loss = forward([wq0])
        ag.backward(loss)
        analytic = blk["wq"].grad.copy()
        numeric = finite_difference_grad(lambda raw: float(forward(raw)[1].data),
                                         [wq0], 0)
        blk["wq"].data[...] = wq0
        assert max_relative_error(analytic, numeric) < 1e-4


class TestEncode:
    def test_shapes(self):
        model = tiny_model()
        emb, stack = vit.encode(model, rand_image(np.random.default_rng(6), 32))
        assert emb.shape == (32,)
        assert len(stack) == 2
        assert all(a.shape == (4, 65, 65) for a in stack)

    def test_attention_rows_sum_to_one_everywhere(self):
        model = tiny_model()
        rng = np.random.default_rng(7)
        _, stack = vit.encode(model, rng.uniform(0, 1, size=(4, 32, 32, 3)))
        for attn in stack:
            np.testing.assert_allclose(attn.data.sum(axis=-1),
                                       np.ones(attn.shape[:-1]), atol=1e-5)

    def test_deterministic(self):
        model = tiny_model()
        img = rand_image(np.random.default_rng(8), 32)
        e1, _ = vit.encode(model, img)
        e2, _ = vit.encode(model, img)
        np.testing.assert_array_equal(e1.data, e2.data)

    def test_no_dead_patches(self):
        model = tiny_model(image_size=16)
        rng = np.random.default_rng(9)
        img = rand_image(rng, 16)
        base, _ = vit.encode(model, img)
        for p in range(16):
            ry, rx = divmod(p, 4)
            bumped = img.copy()
            bumped[ry * 4:(ry + 1) * 4, rx * 4:(rx + 1) * 4, :] += 0.5
            emb, _ = vit.encode(model, np.clip(bumped, 0, 1))
            assert not np.allclose(emb.data, base.data), f"patch {p} is dead"


def test_full_model_gradient_check_toy_scale():
    # depth 2, dim 16 model, every parameter entry against central differences
    model = tiny_model(image_size=8, dim=16, mlp_ratio=2.0, seed=1)
    rng = np.random.default_rng(10)
    img = rand_image(rng, 8)
    target = np.zeros((1, 2))
    target[0, 0] = 1.0

    names = [n for n, _ in model.trainable()]
    tensors = dict(model.trainable())

    def forward():
        logits, _ = vit.model_logits(model, img[None])
        return ag.cross_entropy(logits, Tensor(target))

    loss = forward()
    ag.backward(loss)
    analytic = {n: tensors[n].grad.copy() for n in names}
    model.zero_grad()

    for name in names:
        t = tensors[name]
        base = t.data.copy()

        def f(raw):
            t.data[...] = raw[0]
            val = float(forward().data)
            t.data[...] = base
            return val

        numeric = finite_difference_grad(f, [base], 0)
        err = tensor_relative_error(analytic[name], numeric)
        assert err < 1e-4, f"{name}: max relative error {err}"
