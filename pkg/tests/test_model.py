import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ksiam.errors import DimensionError
from ksiam.model import (KSiameseModel, ToyEncoder, aggregate, build_model, decode, encode_bag, forward,
                         mean_pool, tiles_to_tensor)
from ksiam.tiling import TileBag, TileLocation
from ksiam.training import multi_head_loss
from oracles import decode_loop


def _bag(pixels, slide_id="s"):
    locs = [TileLocation(slide_id, 0, 64 * i, 64) for i in range(len(pixels))]
    return TileBag(slide_id, locs, np.asarray(pixels, np.uint8))


def _model(seed=0, d=16, g=2, widths=(8, 8, 8), residual=False):
    torch.manual_seed(seed)
    m = KSiameseModel(ToyEncoder(d, widths, residual=residual), g, dropout_rate=0.2)
    torch.nn.init.normal_(m.decoder.weight, std=1.0)
    torch.nn.init.normal_(m.decoder.bias, std=0.5)
    return m.eval()


def test_aggregate_examples():
    assert np.array_equal(aggregate([np.array([0.0, 2.0]), np.array([2.0, 0.0])]), [1.0, 1.0])
    v = np.array([0.3, -1.25, 7.0])
    assert np.array_equal(aggregate([v] * 5), v)
    with pytest.raises(DimensionError):
        aggregate([np.zeros(2), np.zeros(3)])
    with pytest.raises(DimensionError):
        aggregate([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(-1e3, 1e3, width=32), min_size=4, max_size=4), min_size=1, max_size=30),
       st.randoms(use_true_random=False))
def test_aggregate_permutation_invariant(rows, rnd):
    vecs = [np.array(r, np.float32) for r in rows]
    shuffled = list(vecs)
    rnd.shuffle(shuffled)
    assert np.array_equal(aggregate(vecs), aggregate(shuffled))


def test_decode_examples():
    p = decode(np.ones(4), np.zeros((3, 2, 4)), np.zeros((3, 2)))
    assert np.array_equal(p, np.full((3, 2), 0.5))
    p = decode(np.zeros(1), np.zeros((1, 2, 1)), np.array([[math.log(2), 0.0]]))
    assert p[0] == pytest.approx([2 / 3, 1 / 3], rel=1e-15)
    with pytest.raises(ValueError):
        decode(np.array([np.nan]), np.zeros((1, 2, 1)), np.zeros((1, 2)))


def test_decode_matches_scalar_loop():
    rng = np.random.default_rng(3)
    for _ in range(50):
        w, b, x = rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 2)), rng.normal(size=3)
        expect = decode_loop(x.tolist(), w.tolist(), b.tolist())
        assert np.allclose(decode(x, w, b), expect, rtol=1e-13, atol=0)


def test_torch_decoder_matches_numpy_decode():
    m = _model()
    pooled = torch.randn(5, 16)
    probs = torch.softmax(m.decoder(pooled), -1).detach().numpy()
    for i in range(5):
        ref = decode(pooled[i].numpy(), m.decoder.weight.detach().numpy(), m.decoder.bias.detach().numpy())
        assert np.allclose(probs[i], ref, atol=1e-6)


def test_encode_bag_weight_sharing_and_determinism(rng):
    m = _model()
    tile = rng.integers(0, 256, (32, 32, 3))
    feats = encode_bag(m.encoder, _bag([tile] * 4))
    assert all(np.array_equal(f, feats[0]) for f in feats)
    bag = _bag(rng.integers(0, 256, (5, 32, 32, 3)))
    a, b = encode_bag(m.encoder, bag), encode_bag(m.encoder, bag)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    perm = [3, 0, 4, 1, 2]
    c = encode_bag(m.encoder, _bag(bag.pixels[perm]))
    assert all(np.array_equal(c[i], a[j]) for i, j in enumerate(perm))
    with pytest.raises(DimensionError):
        encode_bag(m.encoder, np.zeros((0, 32, 32, 3), np.uint8))


def test_forward_is_decode_of_aggregate(rng):
    m = _model()
    bag = _bag(rng.integers(0, 256, (6, 32, 32, 3)))
    pooled = aggregate(encode_bag(m.encoder, bag))
    ref = decode(pooled, m.decoder.weight.detach().numpy(), m.decoder.bias.detach().numpy())[:, 1]
    assert np.allclose(forward(m, bag).probs, ref, rtol=1e-5)


def test_variable_bag_sizes_share_parameters(rng):
    m = _model()
    for k in (1, 24, 96):
        pred = forward(m, _bag(rng.integers(0, 256, (k, 32, 32, 3))))
        assert pred.k_used == k and pred.probs.shape == (2,)
        assert np.all((pred.probs >= 0) & (pred.probs <= 1))


def test_probabilities_normalized(rng):
    m = _model()
    x = tiles_to_tensor(rng.integers(0, 256, (3, 4, 32, 32, 3)))
    p = torch.softmax(m(x), -1)
    assert torch.allclose(p.sum(-1), torch.ones(3, 2), atol=1e-6)


def test_dropout_only_in_training_mode(rng):
    m = _model()
    x = tiles_to_tensor(rng.integers(0, 256, (1, 4, 32, 32, 3)))
    assert torch.equal(m(x), m(x))
    m.train()
    torch.manual_seed(0)
    assert not torch.equal(m(x), m(x))


def test_mean_pool_accumulates_in_double():
    x = torch.tensor([[[1e8], [1.0], [-1e8], [1.0]]], dtype=torch.float32)
    assert mean_pool(x).item() == 0.5


def test_stochastic_depth_is_noop_in_eval():
    torch.manual_seed(0)
    enc = ToyEncoder(8, (4, 4, 4), residual=True, stochastic_depth_survival=0.5).eval()
    x = torch.rand(3, 3, 16, 16)
    assert torch.equal(enc(x), enc(x))
    enc.train()
    torch.manual_seed(1)
    outs = {tuple(enc(x).flatten().tolist()) for _ in range(5)}
    assert len(outs) > 1


def test_build_model_unknown_encoder():
    with pytest.raises(ValueError, match="unknown encoder"):
        build_model("nope", 1)


def _loss_fn(model, x, y):
    logits, _ = model.training_logits(x)
    return multi_head_loss(logits, y)


def test_gradient_check_finite_differences():
    torch.manual_seed(0)
    model = KSiameseModel(ToyEncoder(8, (4, 4, 4)), 2, dropout_rate=0.0).double().train()
    x = torch.rand(2, 3, 3, 16, 16, dtype=torch.float64)
    y = torch.tensor([[1, 0], [0, 1]])
    model.zero_grad()
    _loss_fn(model, x, y).backward()
    h, worst = 1e-3, 0.0
    with torch.no_grad():
        for p in model.parameters():
            flat, grad = p.view(-1), p.grad.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = _loss_fn(model, x, y).item()
                flat[i] = old - h
                down = _loss_fn(model, x, y).item()
                flat[i] = old
                num, ana = (up - down) / (2 * h), grad[i].item()
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    assert worst < 1e-3


def test_pooled_gradient_is_one_over_k():
    k = 5
    feats = torch.randn(1, k, 8, dtype=torch.float64, requires_grad=True)
    jac = torch.autograd.functional.jacobian(lambda f: mean_pool(f), feats)  # (1, 8, 1, k, 8)
    for i in range(k):
        assert torch.allclose(jac[0, :, 0, i, :], torch.eye(8, dtype=torch.float64) / k, atol=0)


def test_single_tile_gradient_scales_encoder_gradient_by_one_over_k():
    torch.manual_seed(0)
    model = KSiameseModel(ToyEncoder(8, (4, 4, 4)), 1, dropout_rate=0.0).double()
    tile = torch.rand(1, 1, 3, 16, 16, dtype=torch.float64)
    k = 4

    def enc_grad(x, only_first):
        model.zero_grad()
        feats = model.encode(x)
        if only_first:  # stop gradients through every tile but the first
            feats = torch.cat([feats[:, :1], feats[:, 1:].detach()], dim=1)
        logits = model.decoder(mean_pool(feats))
        multi_head_loss(logits, torch.tensor([[1]])).backward()
        return torch.cat([p.grad.flatten() for p in model.encoder.parameters()])

    full_single = enc_grad(tile, False)
    partial = enc_grad(tile.expand(1, k, 3, 16, 16).contiguous(), True)
    assert torch.allclose(partial, full_single / k, rtol=1e-10, atol=1e-14)
