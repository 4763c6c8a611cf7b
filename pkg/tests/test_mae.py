import numpy as np
import pytest

from vitlite import tensor as T
from vitlite.errors import ConfigError, ContractError
from vitlite.mae import (DecoderConfig, MAEModel, MaskPlan, generate_mask, keep_count, mae_loss,
                         patch_targets, pretrain_step, reconstruction_loss)
from vitlite.train import AdamW
from vitlite.vit import ViTConfig

CFG = ViTConfig(image_size=16, patch_size=4, depth=2, dim=16, heads=2)


def _images(n, seed=0):
    return np.random.default_rng(seed).random((n, 3, 16, 16)).astype(np.float32)


def test_keep_count():
    assert keep_count(64, 0.75) == 16
    assert keep_count(10, 0.9) == 1
    assert keep_count(196, 0.75) == 49


def test_mask_plan_structure():
    plan = generate_mask(5, 16, 0.75, np.random.default_rng(0))
    assert plan.len_keep == 4 and plan.ids_keep.shape == (5, 4)
    np.testing.assert_array_equal(plan.mask.sum(1), 12)
    for row in plan.ids_shuffle:
        assert sorted(row) == list(range(16))
    restored = np.take_along_axis(plan.ids_shuffle, plan.ids_restore, 1)
    np.testing.assert_array_equal(restored, np.broadcast_to(np.arange(16), (5, 16)))
    # samples are masked independently
    assert len({tuple(sorted(r)) for r in plan.ids_keep}) > 1


def test_mask_ratio_range():
    rng = np.random.default_rng(0)
    for bad in (1.0, -0.1, 0.99):
        with pytest.raises(ConfigError):
            generate_mask(1, 16, bad, rng)


def test_mask_seeded():
    a = generate_mask(3, 16, 0.5, np.random.default_rng(7)).ids_shuffle
    b = generate_mask(3, 16, 0.5, np.random.default_rng(7)).ids_shuffle
    np.testing.assert_array_equal(a, b)


def test_decoder_for_encoder():
    dec = DecoderConfig.for_encoder(ViTConfig(dim=64, heads=4))
    assert (dec.width, dec.depth, dec.heads) == (32, 1, 2)
    assert DecoderConfig(width=30, heads=4).violations()


def test_masked_pixels_never_reach_latent():
    model = MAEModel(CFG, seed=0)
    images = _images(2)
    plan = generate_mask(2, 16, 0.75, np.random.default_rng(1))
    with T.no_grad():
        before = model.encode_visible(images, plan).data.copy()
        hidden = images.copy()
        for b in range(2):
            for t in np.flatnonzero(plan.mask[b]):
                r, c = divmod(int(t), 4)
                hidden[b, :, 4 * r:4 * r + 4, 4 * c:4 * c + 4] = 123.0
        after = model.encode_visible(hidden, plan).data
    assert before.tobytes() == after.tobytes()


def test_reconstruction_shape_and_only_masked_count():
    model = MAEModel(CFG, seed=0)
    images = _images(2)
    plan = generate_mask(2, 16, 0.5, np.random.default_rng(2))
    pred = model.forward(images, plan)
    assert pred.shape == (2, 16, 48)
    target = patch_targets(images, 4, True)
    base = reconstruction_loss(T.Tensor(target.copy()), images, plan).item()
    assert base == 0.0
    # corrupting visible-patch predictions leaves the loss unchanged
    noisy = target.copy()
    noisy[plan.mask == 0] += 5.0
    assert reconstruction_loss(T.Tensor(noisy), images, plan).item() == 0.0
    noisy[plan.mask == 1] += 1.0
    assert reconstruction_loss(T.Tensor(noisy), images, plan).item() == pytest.approx(1.0)


def test_normalized_targets():
    t = patch_targets(_images(1), 4, True)
    np.testing.assert_allclose(t.mean(-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(t.var(-1), 1.0, atol=1e-3)


def test_nothing_masked_is_an_error():
    plan = MaskPlan(np.tile(np.arange(16), (1, 1)), 16, 0.0)
    with pytest.raises(ContractError):
        reconstruction_loss(T.Tensor(np.zeros((1, 16, 48), np.float32)), _images(1), plan)


def test_class_token_encoder_decodes():
    cfg = ViTConfig(**{**CFG.to_dict(), "use_class_token": True})
    model = MAEModel(cfg, seed=0)
    plan = generate_mask(2, 16, 0.75, np.random.default_rng(0))
    latent = model.encode_visible(_images(2), plan)
    assert latent.shape == (2, 5, 16)
    assert model.decode_reconstruct(latent, plan).shape == (2, 16, 48)


def test_gradients_reach_every_parameter():
    model = MAEModel(CFG, seed=0)
    plan = generate_mask(2, 16, 0.75, np.random.default_rng(0))
    loss, _ = mae_loss(model, _images(2), plan)
    T.backward(loss)
    missing = [k for k, p in model.parameters().items() if p.grad is None or not np.any(p.grad)]
    assert missing == []


def test_pretrain_step_reduces_loss_on_fixed_batch():
    model = MAEModel(CFG, seed=0)
    opt = AdamW(model.parameters(), weight_decay=0.0)
    images = _images(4)
    plan = generate_mask(4, 16, 0.75, np.random.default_rng(0))
    # raw pixel targets: fitting the pixel mean alone already halves the loss
    losses = [pretrain_step(model, images, plan, opt, 3e-3, False) for _ in range(40)]
    assert losses[-1] < 0.5 * losses[0]


def test_grid_mismatch():
    model = MAEModel(CFG, seed=0)
    plan = generate_mask(1, 9, 0.5, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        model.encode_visible(_images(1), plan)
