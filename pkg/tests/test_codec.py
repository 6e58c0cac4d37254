import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_layer, numeric_grad, rel_err
from ksyn.codec import (Codec, CodecConfig, KSpaceVolume, NormRecord, TemporalConv, VectorQuantizer,
                        decode, denormalize_kspace, encode, normalize_kspace, signed_exp, signed_log,
                        train_codec)
from ksyn.kspace import dft2
from ksyn.phantom import PhantomSpec, generate_phantom, make_corpus

SMALL = CodecConfig(width=8, temporal_width=8, codebook_size=16, iterations=0)


def kspace(seed=0, grid=(64, 64, 8)):
    return dft2(generate_phantom(PhantomSpec(grid=grid, seed=seed, noise_sigma=0.01)).data).data


def test_signed_log_closed_forms():
    assert signed_log(np.array([0.0]), 3.0)[0] == 0.0
    assert signed_log(np.array([np.e - 1]), 1.0)[0] == pytest.approx(1.0, abs=1e-15)
    assert signed_log(np.array([-(np.e - 1)]), 1.0)[0] == pytest.approx(-1.0, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(-6, 6))
def test_normalization_round_trip(seed, scale):
    rng = np.random.default_rng(seed)
    k = (rng.standard_normal((8, 8, 3)) + 1j * rng.standard_normal((8, 8, 3))) * 10.0 ** scale
    norm, rec = normalize_kspace(k)
    assert norm.shape == (2, 8, 8, 3)
    back = denormalize_kspace(norm, rec)
    assert np.max(np.abs(back - k)) <= 1e-9 * np.max(np.abs(k))


def test_normalization_lambda_and_monotone():
    k = kspace()
    norm, rec = normalize_kspace(k)
    assert rec.lam == pytest.approx(np.median(np.abs(np.stack([k.real, k.imag]))))
    x = np.linspace(-50, 50, 1001)
    assert np.all(np.diff(signed_log(x, 2.0)) > 0)
    np.testing.assert_allclose(signed_exp(signed_log(x, 2.0), 2.0), x, atol=1e-12)


def test_normalization_rejects_zero_and_nonfinite():
    with pytest.raises(ValueError):
        normalize_kspace(np.zeros((4, 4, 2), complex))
    bad = np.ones((4, 4, 2), complex)
    bad[1, 1, 1] = np.nan
    with pytest.raises(ValueError):
        normalize_kspace(bad)


def test_latent_shape_and_determinism():
    model = Codec(CodecConfig())
    k = kspace()
    z, rec = encode(k, model)
    assert z.shape == (4, 8, 8, 8)
    z2, _ = encode(k.copy(), model)
    np.testing.assert_array_equal(z, z2)
    out = decode(z, model, rec)
    assert out.data.shape == (64, 64, 8) and np.all(np.isfinite(out.data))


@pytest.mark.parametrize("grid", [(16, 8, 1), (8, 24, 3), (32, 16, 2)])
def test_shape_contract(grid):
    model = Codec(SMALL)
    k = kspace(1, grid)
    z, rec = encode(k, model)
    assert z.shape == (4, grid[0] // 8, grid[1] // 8, grid[2])
    assert decode(z, model, rec).data.shape == grid


def test_rejects_bad_shapes():
    model = Codec(SMALL)
    with pytest.raises(ValueError, match="divisible by 8"):
        encode(kspace(0, (12, 16, 2)), model)
    with pytest.raises(ValueError):
        decode(np.zeros((3, 2, 2, 2)), model, None)


def test_zero_latent_is_replayable():
    model = Codec(SMALL)
    a = decode(np.zeros((4, 2, 2, 3)), model, NormRecord(1.0)).data
    b = decode(np.zeros((4, 2, 2, 3)), Codec(SMALL), NormRecord(1.0)).data
    np.testing.assert_array_equal(a, b)
    assert np.all(np.isfinite(a))


def test_quantized_vectors_are_nearest_codes():
    vq = VectorQuantizer(32, 4, rng=np.random.default_rng(0), dtype=np.float64)
    z = np.random.default_rng(1).standard_normal((2, 4, 3, 5))
    q = vq.forward(z)
    flat = z.transpose(0, 2, 3, 1).reshape(-1, 4)
    qflat = q.transpose(0, 2, 3, 1).reshape(-1, 4)
    cb = vq.codebook.data
    for v, got in zip(flat, qflat):
        best = min(range(32), key=lambda j: sum((v[i] - cb[j, i]) ** 2 for i in range(4)))
        np.testing.assert_array_equal(got, cb[best])
    assert np.all(vq.usage >= 0) and vq.usage.sum() == flat.shape[0]


def test_commitment_loss_zero_iff_on_codebook():
    vq = VectorQuantizer(8, 3, rng=np.random.default_rng(2), dtype=np.float64)
    on = vq.codebook.data[[0, 3, 5, 7]].T.reshape(1, 3, 2, 2).copy()
    vq.forward(on)
    assert vq.loss == 0.0
    vq.forward(on + 0.01)
    assert vq.loss > 0


def test_vq_straight_through_gradient():
    vq = VectorQuantizer(16, 4, rng=np.random.default_rng(3), dtype=np.float64, commitment=0.25)
    z = np.random.default_rng(4).standard_normal((1, 4, 3, 3))
    vq.forward(z)
    dy = np.random.default_rng(5).standard_normal(z.shape)
    vq.codebook.grad[...] = 0
    dz = vq.backward(dy)
    flat = z.transpose(0, 2, 3, 1).reshape(-1, 4)
    q = vq.codebook.data[vq.indices.ravel()]
    # identity path plus the commitment term 0.25 * d/dz mean((z - sg(q))^2)
    expect = dy.transpose(0, 2, 3, 1).reshape(-1, 4) + 0.25 * 2 * (flat - q) / flat.size
    np.testing.assert_allclose(dz.transpose(0, 2, 3, 1).reshape(-1, 4), expect, atol=1e-14)


def test_temporal_conv_gradient():
    layer = TemporalConv(3, 4, np.random.default_rng(0), dtype=np.float32)
    x = np.random.default_rng(1).standard_normal((2, 4, 3, 4, 4)).astype(np.float32)
    errs = check_layer(layer, x)
    assert max(errs.values()) < 1e-3, errs


def test_codec_end_to_end_gradient():
    cfg = CodecConfig(width=8, temporal_width=8, quantize=False)
    model = Codec(cfg, dtype=np.float64)
    x = np.random.default_rng(2).standard_normal((1, 2, 2, 16, 16))
    R = np.random.default_rng(3).standard_normal((1, 2, 2, 16, 16))

    def loss():
        return float(np.sum(model.decode_batch(model.encode_batch(x)) * R))

    model.zero_grad()
    model.decode_batch(model.encode_batch(x))
    model.backward_encoder(model.backward_decoder(R))
    rng = np.random.default_rng(4)
    for name, p in [("e_in.weight", model.e_in.weight), ("v2.conv.weight", model.v2.conv.weight),
                    ("d_out.bias", model.d_out.bias)]:
        idx = rng.choice(p.data.size, size=min(10, p.data.size), replace=False)
        g = p.grad.reshape(-1)[idx].copy()
        assert rel_err(numeric_grad(loss, p.data, idx, 1e-6), g) < 1e-6, name


def tiny_corpus(n=3):
    return make_corpus(n, PhantomSpec(grid=(16, 16, 4)), seed=0).volumes


def test_lr_zero_leaves_parameters_unchanged():
    cfg = CodecConfig(width=8, temporal_width=8, quantize=False, iterations=5, lr=0.0,
                      batch_volumes=1, patch=(16, 16, 3))
    fresh = Codec(cfg).state_dict()
    trained = train_codec(tiny_corpus(), cfg).model.state_dict()
    for k, v in fresh.items():
        np.testing.assert_array_equal(trained[k], v, err_msg=k)


def test_training_reduces_loss_and_is_deterministic():
    cfg = CodecConfig(width=8, temporal_width=8, codebook_size=16, iterations=60, lr=3e-3,
                      batch_volumes=2, patch=(16, 16, 3))
    r1 = train_codec(tiny_corpus(), cfg)
    r2 = train_codec(tiny_corpus(), cfg)
    losses = np.array(r1.losses)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert losses[-1] < losses[0]
    for k, v in r1.model.state_dict().items():
        np.testing.assert_array_equal(v, r2.model.state_dict()[k], err_msg=k)
    assert r1.latent_mean.shape == (4,) and np.all(r1.latent_std > 0)
    assert not np.any(np.isnan(r1.model.vq.codebook.data)) and np.all(r1.model.vq.usage >= 0)


def test_training_rejects_empty_corpus():
    with pytest.raises(ValueError):
        train_codec([], SMALL)


def test_kspace_volume_images():
    vol = generate_phantom(PhantomSpec(grid=(16, 16, 2)))
    kv = KSpaceVolume.from_cine(vol)
    np.testing.assert_allclose(kv.to_images(), vol.data, atol=1e-12)
