import numpy as np
import pytest
import torch

from backdoorlab import (ImageDataset, ModelError, TrainHyper, TrainingDiverged,
                         build_victim, capture_activations, evaluate,
                         load_checkpoint, mhsa_forward, predict, save_checkpoint,
                         train_clean)
from backdoorlab.models import build_model, logits, to_nchw

from oracles import mhsa_reference


def test_cnn_logit_shape_contract():
    h = build_victim("cnn_small", 10, (32, 32, 3), seed=0)
    out = logits(h, np.random.default_rng(0).random((4, 32, 32, 3)).astype(np.float32))
    assert out.shape == (4, 10)


def test_vit_token_count():
    h = build_victim("vit_lite", 10, (224, 224, 3), seed=0, patch_size=16)
    assert h.module.num_patches == 196
    assert h.module.pos_embed.shape == (1, 197, 128)


def test_vit_patch_divisibility_error():
    with pytest.raises(ModelError, match="divisible"):
        build_victim("vit_lite", 10, (30, 30, 3), seed=0, patch_size=16)


def test_same_seed_identical_parameters():
    a = build_victim("cnn_small", 4, (32, 32, 3), seed=9)
    b = build_victim("cnn_small", 4, (32, 32, 3), seed=9)
    for pa, pb in zip(a.module.parameters(), b.module.parameters()):
        assert torch.equal(pa, pb)


def test_unknown_arch():
    with pytest.raises(ModelError):
        build_victim("resnet152", 10, (32, 32, 3), seed=0)


# ---------------------------------------------------------------------------
# multi-head self-attention


def _rand_weights(rng, d):
    return [torch.tensor(rng.standard_normal((d, d)), dtype=torch.float64)
            for _ in range(4)]


def test_mhsa_single_token_attention_is_one():
    rng = np.random.default_rng(0)
    tokens = torch.tensor(rng.standard_normal((1, 8)), dtype=torch.float64)
    wq, wk, wv, wo = _rand_weights(rng, 8)
    _, attn = mhsa_forward(tokens, wq, wk, wv, wo, num_heads=2)
    np.testing.assert_allclose(attn.numpy(), 1.0, atol=1e-12)


def test_mhsa_equal_keys_uniform_attention():
    rng = np.random.default_rng(1)
    # both tokens identical -> identical keys -> uniform 0.5 rows
    tok = rng.standard_normal(8)
    tokens = torch.tensor(np.stack([tok, tok]), dtype=torch.float64)
    wq, wk, wv, wo = _rand_weights(rng, 8)
    _, attn = mhsa_forward(tokens, wq, wk, wv, wo, num_heads=2)
    np.testing.assert_allclose(attn.numpy(), 0.5, atol=1e-12)


def test_mhsa_matches_naive_oracle():
    rng = np.random.default_rng(2)
    tokens_np = rng.standard_normal((3, 8))
    mats = [rng.standard_normal((8, 8)) for _ in range(4)]
    out, attn = mhsa_forward(torch.tensor(tokens_np), *[torch.tensor(m) for m in mats],
                             num_heads=4)
    want_out, want_attn = mhsa_reference(tokens_np, *mats, num_heads=4)
    np.testing.assert_allclose(out.numpy(), want_out, atol=1e-5)
    np.testing.assert_allclose(attn.numpy(), want_attn, atol=1e-5)


def test_mhsa_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for trial in range(5):
        tokens = torch.tensor(rng.standard_normal((6, 12)) * 3, dtype=torch.float64)
        wq, wk, wv, wo = _rand_weights(rng, 12)
        _, attn = mhsa_forward(tokens, wq, wk, wv, wo, num_heads=3)
        np.testing.assert_allclose(attn.sum(-1).numpy(), 1.0, atol=1e-5)


def test_mhsa_dimension_mismatch():
    tokens = torch.zeros((2, 9), dtype=torch.float64)
    w = torch.zeros((9, 9), dtype=torch.float64)
    with pytest.raises(ModelError, match="divisible"):
        mhsa_forward(tokens, w, w, w, w, num_heads=2)


# ---------------------------------------------------------------------------
# training


def _separable_dataset(n=128):
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 2, n)
    images = np.where(labels[:, None, None, None] == 0, 0.2, 0.8)
    images = images + rng.normal(0, 0.02, (n, 16, 16, 3))
    return ImageDataset(np.clip(images, 0, 1).astype(np.float32), labels, 2, "train")


def test_train_clean_separable():
    ds = _separable_dataset()
    h = build_victim("cnn_small", 2, (16, 16, 3), seed=0,
                     channels=(8, 8, 8, 8), fc_width=16)
    train_clean(h, ds, TrainHyper(epochs=15, lr=5e-3, batch_size=16, seed=1))
    assert h.history[-1]["accuracy"] >= 0.99
    assert h.trained


def test_train_zero_epochs_noop():
    ds = _separable_dataset(32)
    h = build_victim("cnn_small", 2, (16, 16, 3), seed=0,
                     channels=(8, 8, 8, 8), fc_width=16)
    before = [p.clone() for p in h.module.parameters()]
    train_clean(h, ds, TrainHyper(epochs=0, lr=1e-3, batch_size=32, seed=1))
    for p0, p1 in zip(before, h.module.parameters()):
        assert torch.equal(p0, p1)


def test_train_requires_train_split():
    ds = _separable_dataset(32)
    ds.split = "test"
    h = build_victim("cnn_small", 2, (16, 16, 3), seed=0,
                     channels=(8, 8, 8, 8), fc_width=16)
    with pytest.raises(ModelError, match="train split"):
        train_clean(h, ds, TrainHyper(epochs=1, lr=1e-3, batch_size=32, seed=1))


def test_train_divergence_reports_epoch():
    ds = _separable_dataset(64)
    h = build_victim("cnn_small", 2, (16, 16, 3), seed=0,
                     channels=(8, 8, 8, 8), fc_width=16)
    with pytest.raises(TrainingDiverged):
        train_clean(h, ds, TrainHyper(epochs=3, lr=1e12, batch_size=32, seed=1))


def test_train_deterministic_replay(tiny_train, tiny_test):
    accs = []
    for _ in range(2):
        h = build_victim("cnn_small", 4, (32, 32, 3), seed=5,
                         channels=(8, 16, 16, 16), fc_width=32)
        train_clean(h, tiny_train, TrainHyper(epochs=2, lr=1e-3, batch_size=64, seed=2))
        accs.append(evaluate(h, tiny_test))
    assert accs[0] == accs[1]


# ---------------------------------------------------------------------------
# activations


def test_capture_activations_zero_weight_layer_gives_bias():
    h = build_victim("cnn_small", 4, (16, 16, 3), seed=0,
                     channels=(4, 4, 4, 4), fc_width=8)
    with torch.no_grad():
        h.module.fc1.weight.zero_()
        h.module.fc1.bias.copy_(torch.arange(8, dtype=torch.float32))
    acts = capture_activations(h, "fc1", np.random.default_rng(0)
                               .random((5, 16, 16, 3)).astype(np.float32))
    np.testing.assert_allclose(acts, np.tile(np.arange(8), (5, 1)), atol=1e-6)


def test_capture_activations_duplicated_batch_identical():
    h = build_victim("cnn_small", 4, (16, 16, 3), seed=1,
                     channels=(4, 4, 4, 4), fc_width=8)
    img = np.random.default_rng(1).random((1, 16, 16, 3)).astype(np.float32)
    acts = capture_activations(h, "fc1", np.repeat(img, 8, axis=0))
    np.testing.assert_array_equal(acts, np.tile(acts[0], (8, 1)))


def test_capture_activations_matches_affine_oracle(tiny_cnn, tiny_test):
    images = tiny_test.images[:16]
    acts = capture_activations(tiny_cnn, "fc1", images)
    assert acts.shape == (16, tiny_cnn.module.fc_width)
    # oracle: last conv block output flattened, then W x + b by hand
    feats = tiny_cnn.module.conv_features(to_nchw(images))[-1]
    flat = feats.flatten(1).detach().numpy()
    w = tiny_cnn.module.fc1.weight.detach().numpy()
    b = tiny_cnn.module.fc1.bias.detach().numpy()
    np.testing.assert_allclose(acts, flat @ w.T + b, atol=1e-4)


def test_capture_activations_pure_read(tiny_cnn, tiny_test):
    before = {k: v.clone() for k, v in tiny_cnn.module.state_dict().items()}
    capture_activations(tiny_cnn, "conv2", tiny_test.images[:8])
    after = tiny_cnn.module.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_capture_activations_unknown_layer(tiny_cnn):
    with pytest.raises(ModelError, match="unknown layer"):
        capture_activations(tiny_cnn, "fc99", np.zeros((1, 32, 32, 3), np.float32))


# ---------------------------------------------------------------------------
# prediction


def test_predict_argmax_and_tie_rule():
    h = build_victim("cnn_small", 2, (16, 16, 3), seed=0,
                     channels=(4, 4, 4, 4), fc_width=8)
    with torch.no_grad():
        for p in h.module.parameters():
            p.zero_()
    # all-zero network emits identical logits: tie resolves to class 0
    preds = predict(h, np.random.default_rng(0).random((6, 16, 16, 3)).astype(np.float32))
    np.testing.assert_array_equal(preds, 0)
    assert np.argmax(np.array([0.1, 0.9])) == 1
    assert np.argmax(np.array([0.5, 0.5])) == 0


def test_random_model_near_chance():
    h = build_victim("cnn_small", 10, (16, 16, 3), seed=3,
                     channels=(4, 4, 4, 4), fc_width=8)
    rng = np.random.default_rng(7)
    ds = ImageDataset(rng.random((1000, 16, 16, 3)).astype(np.float32),
                      rng.integers(0, 10, 1000), 10, "test")
    acc = evaluate(h, ds)
    assert abs(acc - 0.1) <= 0.05


# ---------------------------------------------------------------------------
# gradients vs finite differences


def _loss_for(handle, x, y):
    out = handle.module(x)
    return torch.nn.functional.cross_entropy(out, y)


@pytest.mark.parametrize("arch,kwargs,shape", [
    ("cnn_small", dict(channels=(2, 2, 2, 2), fc_width=4), (16, 16, 3)),
    ("vit_lite", dict(patch_size=8, depth=1, dim=4, num_heads=2, mlp_ratio=2.0),
     (8, 8, 3)),
])
def test_forward_gradients_match_finite_differences(arch, kwargs, shape):
    h = build_model(arch, 2, shape, seed=0, **kwargs)
    h.module.double()
    n_params = sum(p.numel() for p in h.module.parameters())
    assert n_params <= 1000
    rng = np.random.default_rng(0)
    x = torch.tensor(rng.random((4, shape[2], shape[0], shape[1])), dtype=torch.float64)
    y = torch.tensor([0, 1, 0, 1])

    loss = _loss_for(h, x, y)
    loss.backward()
    auto = torch.cat([p.grad.flatten() for p in h.module.parameters()]).numpy()

    eps = 1e-6
    fd = np.empty_like(auto)
    i = 0
    for p in h.module.parameters():
        flat = p.data.view(-1)
        for j in range(flat.numel()):
            orig = flat[j].item()
            flat[j] = orig + eps
            hi = _loss_for(h, x, y).item()
            flat[j] = orig - eps
            lo = _loss_for(h, x, y).item()
            flat[j] = orig
            fd[i] = (hi - lo) / (2 * eps)
            i += 1
    rel = np.linalg.norm(fd - auto) / np.linalg.norm(auto)
    assert rel <= 1e-3


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tiny_cnn, tiny_test, tmp_path):
    save_checkpoint(tiny_cnn, tmp_path / "ckpt")
    back = load_checkpoint(tmp_path / "ckpt")
    assert back.arch == tiny_cnn.arch and back.trained
    a = logits(tiny_cnn, tiny_test.images[:16])
    b = logits(back, tiny_test.images[:16])
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_checkpoint_manifest_fields(tiny_cnn, tmp_path):
    import json

    _, json_path = save_checkpoint(tiny_cnn, tmp_path / "ckpt")
    manifest = json.loads(json_path.read_text())
    assert manifest["arch"] == "cnn_small"
    assert manifest["seed"] == tiny_cnn.seed
    assert manifest["history"]
    assert all("name" in e and "shape" in e for e in manifest["layout"])
