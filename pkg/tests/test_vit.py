import numpy as np
import pytest

from vitlite import tensor as T
from vitlite.errors import ConfigError
from vitlite.vit import ViT, ViTConfig, patchify, pos_embed_sincos2d, unpatchify

SMALL = ViTConfig(image_size=8, patch_size=4, depth=2, dim=8, heads=2)


def _images(n, size=8, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size)).astype(np.float32)


def test_config_divisibility():
    assert not ViTConfig(dim=192, heads=12).violations()
    errs = ViTConfig(dim=192, heads=7).violations()
    assert [p for p, _ in errs] == ["heads"]
    with pytest.raises(ConfigError):
        ViTConfig(image_size=30, patch_size=4).validate()
    with pytest.raises(ConfigError, match="drop_path"):
        ViTConfig(drop_path=0.1).validate()


def test_patchify_layout_and_inverse():
    img = _images(2, 8)
    p = patchify(img, 4)
    assert p.shape == (2, 4, 48)
    # patch 1 is the top-right block, flattened row-major with channels last
    np.testing.assert_array_equal(p[1, 1], img[1, :, 0:4, 4:8].transpose(1, 2, 0).reshape(-1))
    np.testing.assert_array_equal(unpatchify(p, 4, 3), img)


def test_sincos_position_table():
    pe = pos_embed_sincos2d(4, 16)
    assert pe.shape == (16, 16)
    # first half encodes one axis, second half the other; position 0 is sin 0 / cos 0
    np.testing.assert_allclose(pe[0], np.r_[np.zeros(4), np.ones(4), np.zeros(4), np.ones(4)])
    assert len({row.tobytes() for row in pe}) == 16
    with pytest.raises(ConfigError):
        pos_embed_sincos2d(4, 6)


def test_forward_shapes_and_trace():
    model = ViT(SMALL, 0)
    feats, tr = model.forward(_images(3), trace=True)
    assert feats.shape == (3, 4, 8)
    assert tr.depth == 2 and len(tr.representations) == 3 and len(tr.normed) == 3
    assert tr.attention(1).shape == (3, 2, 4, 4)
    np.testing.assert_array_equal(tr.representations[-1].data, feats.data)
    # normed[0] is the first block's pre-attention norm of the embedding output
    ln = model.params["blocks.0.norm1.weight"], model.params["blocks.0.norm1.bias"]
    np.testing.assert_allclose(tr.normed[0].data,
                               T.layernorm(tr.representations[0], *ln, 1e-6).data, atol=1e-6)


def test_class_token_prefix():
    cfg = ViTConfig(**{**SMALL.to_dict(), "use_class_token": True, "num_classes": 3})
    model = ViT(cfg, 0)
    feats, tr = model.forward(_images(2), trace=True)
    assert feats.shape == (2, 5, 8) and tr.num_prefix == 1
    assert model.classify(_images(2), "cls").shape == (2, 3)
    with pytest.raises(ConfigError):
        ViT(SMALL, 0).head_cls(feats)


def test_head_starts_at_zero():
    model = ViT(ViTConfig(**{**SMALL.to_dict(), "num_classes": 5}), 0)
    np.testing.assert_array_equal(model.classify(_images(2)).data, 0.0)


def test_seeded_init_is_deterministic():
    a, b = ViT(SMALL, 3), ViT(SMALL, 3)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    c = ViT(SMALL, 4)
    assert not np.array_equal(a.params["blocks.0.attn.q.weight"].data,
                              c.params["blocks.0.attn.q.weight"].data)


def test_init_statistics():
    model = ViT(ViTConfig(dim=64), 0)
    w = model.params["blocks.0.mlp.fc1.weight"].data
    assert abs(w.std() - 0.02) < 0.003 and np.abs(w).max() <= 0.04 + 1e-7
    assert np.all(model.params["blocks.0.attn.q.bias"].data == 0)
    assert "pos_embed" not in model.params


def test_wrong_image_shape():
    with pytest.raises(ConfigError):
        ViT(SMALL, 0).forward(_images(1, 16))


def test_full_model_gradient():
    # two-block model end to end: float32 tape against float64 finite differences
    cfg = ViTConfig(image_size=8, patch_size=4, depth=2, dim=8, heads=2, num_classes=3)
    model = ViT(cfg, 0)
    for v in model.params.values():
        v.data = v.data + np.random.default_rng(1).standard_normal(v.shape).astype(np.float32) * 0.3
    images, labels = _images(4), np.array([0, 1, 2, 1])
    T.backward(T.cross_entropy(model.classify(images), labels))
    ref = ViT(cfg, 0)
    ref.params = {k: T.Tensor(v.data.astype(np.float64)) for k, v in model.params.items()}
    ref.pos_embed = model.pos_embed.astype(np.float64)
    img64 = images.astype(np.float64)

    def loss():
        return T.cross_entropy(ref.classify(img64), labels).item()

    analytic = np.concatenate([model.params[k].grad.ravel() for k in sorted(model.params)])
    numeric = np.concatenate([T.numeric_grad(loss, ref.params[k].data, 1e-6).ravel()
                              for k in sorted(ref.params)])
    assert T.grad_rel_error(analytic, numeric) < 1e-2
