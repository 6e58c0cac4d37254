import numpy as np
import pytest

from gradcheck import check_layer, numeric_grad, rel_err
from ksyn.nn import (EMA, Adam, Conv2d, ConvTranspose2d, GroupNorm, Linear, Parameter, SiLU, Upsample2x,
                     concat, split, timestep_embedding)
from ksyn.nn.layers import Module, timestep_embedding_grad

TOL32 = 1e-3


def rand(shape, seed=0, dtype=np.float32):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


LAYERS = {
    "conv3_s1": (lambda d: Conv2d(3, 5, 3, 1, rng=np.random.default_rng(1), dtype=d), (2, 3, 6, 6)),
    "conv3_s2": (lambda d: Conv2d(4, 3, 3, 2, rng=np.random.default_rng(2), dtype=d), (2, 4, 8, 6)),
    "conv1": (lambda d: Conv2d(3, 2, 1, 1, rng=np.random.default_rng(3), dtype=d), (1, 3, 4, 4)),
    "convT": (lambda d: ConvTranspose2d(4, 3, rng=np.random.default_rng(4), dtype=d), (2, 4, 3, 5)),
    "groupnorm": (lambda d: GroupNorm(2, 4, dtype=d), (3, 4, 5, 5)),
    "silu": (lambda d: SiLU(), (2, 3, 4, 4)),
    "upsample": (lambda d: Upsample2x(), (2, 3, 3, 4)),
    "linear": (lambda d: Linear(7, 5, rng=np.random.default_rng(5), dtype=d), (4, 7)),
}


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_layer_gradients_fp32(name):
    make, shape = LAYERS[name]
    layer = make(np.float32)
    if name == "groupnorm":
        # non-trivial affine so gamma/beta gradients are exercised
        layer.gamma.data[...] = rand(4, 9) + 1
        layer.beta.data[...] = rand(4, 10)
    errs = check_layer(layer, rand(shape, 11), h=1e-2 if name == "groupnorm" else 1e-3)
    assert max(errs.values()) < TOL32, errs


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_layer_gradients_fp64(name):
    make, shape = LAYERS[name]
    layer = make(np.float64)
    errs = check_layer(layer, rand(shape, 12, np.float64), h=1e-6)
    assert max(errs.values()) < 1e-6, errs


def test_timestep_embedding_gradient():
    t = np.array([0.5, 3.0, 17.0])
    dy = rand((3, 16), 3, np.float64)

    def f():
        return float(np.sum(timestep_embedding(t, 16, dtype=np.float64) * dy))

    num = numeric_grad(f, t, range(3), 1e-6)
    assert rel_err(num, timestep_embedding_grad(t, 16, dy)) < 1e-6


def test_timestep_embedding_shape_and_range():
    e = timestep_embedding(np.arange(5), 8)
    assert e.shape == (5, 8) and e.dtype == np.float32
    np.testing.assert_array_equal(e[0], [0, 0, 0, 0, 1, 1, 1, 1])
    with pytest.raises(ValueError):
        timestep_embedding([1], 7)


def test_concat_split_round_trip():
    a, b = rand((2, 3, 4, 4)), rand((2, 5, 4, 4), 1)
    c = concat([a, b])
    assert c.shape == (2, 8, 4, 4)
    a2, b2 = split(c, [3, 5])
    np.testing.assert_array_equal(a, a2)
    np.testing.assert_array_equal(b, b2)


class Stack(Module):
    def __init__(self, dtype):
        rng = np.random.default_rng(7)
        self.c1 = Conv2d(2, 8, 3, 2, rng=rng, dtype=dtype)
        self.gn = GroupNorm(4, 8, dtype=dtype)
        self.act = SiLU()
        self.up = ConvTranspose2d(8, 3, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.up.forward(self.act.forward(self.gn.forward(self.c1.forward(x))))

    def backward(self, dy):
        return self.c1.backward(self.gn.backward(self.act.backward(self.up.backward(dy))))


def test_three_layer_composition():
    errs = check_layer(Stack(np.float32), rand((2, 2, 8, 8), 4), h=1e-2)
    assert max(errs.values()) < TOL32, errs
    errs = check_layer(Stack(np.float64), rand((2, 2, 8, 8), 4, np.float64), h=1e-6)
    assert max(errs.values()) < 1e-6, errs


def test_identity_kernel():
    conv = Conv2d(3, 3, 3, 1, dtype=np.float64)
    conv.weight.data[...] = 0
    for c in range(3):
        conv.weight.data[c, c, 1, 1] = 1
    x = rand((2, 3, 5, 6), 0, np.float64)
    np.testing.assert_array_equal(conv.forward(x), x)


def test_conv_matches_direct_loop():
    conv = Conv2d(2, 3, 3, 2, rng=np.random.default_rng(0), dtype=np.float64)
    conv.bias.data[...] = [0.1, -0.2, 0.3]
    x = rand((1, 2, 6, 7), 1, np.float64)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    y = conv.forward(x)
    Ho, Wo = y.shape[2:]
    assert (Ho, Wo) == (3, 4)
    ref = np.zeros_like(y)
    for o in range(3):
        for i in range(Ho):
            for j in range(Wo):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * conv.weight.data[o]) + conv.bias.data[o]
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_groupnorm_statistics():
    gn = GroupNorm(8, 32)
    y = gn.forward(rand((2, 32, 6, 6), 5) * 7 + 3).astype(np.float64).reshape(2, 8, -1)
    assert np.max(np.abs(y.mean(axis=2))) < 1e-6
    assert np.max(np.abs(y.var(axis=2) - 1)) < 1e-4


def test_shape_errors_name_expected_shape():
    with pytest.raises(ValueError, match=r"expected input \(N, 3"):
        Conv2d(3, 4).forward(rand((1, 2, 4, 4)))
    with pytest.raises(ValueError, match="Linear"):
        Linear(3, 2).forward(rand((2, 4)))
    with pytest.raises(ValueError):
        GroupNorm(3, 8)


def test_forward_determinism():
    conv = Conv2d(3, 4, rng=np.random.default_rng(0))
    x = rand((2, 3, 8, 8))
    np.testing.assert_array_equal(conv.forward(x), conv.forward(x.copy()))


# ---------------------------------------------------------------- optimizers

def test_adam_first_step_closed_form():
    p = Parameter(np.array([1.0]))
    opt = Adam([p], lr=0.1)
    p.grad[...] = 1.0
    assert opt.step()
    assert p.data[0] == pytest.approx(0.9, abs=1e-7)


def test_adam_zero_gradient_keeps_params():
    p = Parameter(np.array([1.5, -2.0]))
    opt = Adam([p], lr=0.1)
    for _ in range(5):
        opt.step()
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adam_descends_quadratic():
    p = Parameter(np.array([1.0]))
    opt = Adam([p], lr=0.1)
    f = [p.data[0] ** 2]
    for _ in range(10):
        p.grad[...] = 2 * p.data
        opt.step()
        f.append(p.data[0] ** 2)
    assert all(b < a for a, b in zip(f, f[1:]))


def test_adam_skips_non_finite():
    p = Parameter(np.array([1.0, 2.0]))
    opt = Adam([p], lr=0.1)
    p.grad[...] = [np.nan, 1.0]
    assert not opt.step()
    assert opt.skipped == 1 and opt.step_count == 0
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_lr_zero_is_identity():
    p = Parameter(rand((3, 3), 1))
    before = p.data.copy()
    opt = Adam([p], lr=0.0)
    for i in range(4):
        p.grad[...] = rand((3, 3), i)
        opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_ema_closed_forms():
    p = Parameter(np.array([2.0]))
    ema = EMA([p], decay=0.0)
    p.data[...] = 5.0
    ema.update()
    assert ema.shadow[0][0] == 5.0

    p = Parameter(np.array([1.0]))
    ema = EMA([p], decay=0.999, zero_init=True)
    gaps = []
    for _ in range(1000):
        ema.update()
        gaps.append(1.0 - ema.shadow[0][0])
    assert gaps[1] / gaps[0] == pytest.approx(0.999, rel=1e-9)
    assert gaps[-1] == pytest.approx(0.999 ** 1000, rel=1e-9)
    assert gaps[-1] == pytest.approx(0.3677, abs=1e-4)


def test_ema_warmup_and_swap():
    p = Parameter(np.array([0.0]))
    ema = EMA([p], decay=0.999, warmup=True)
    assert ema.current_decay() == pytest.approx(0.1)
    p.data[...] = 1.0
    ema.update()
    assert ema.shadow[0][0] == pytest.approx(0.9)
    ema.swap()
    assert p.data[0] == pytest.approx(0.9) and ema.shadow[0][0] == 1.0
    with pytest.raises(ValueError):
        EMA([p], decay=1.0)


def test_state_dict_round_trip():
    s = Stack(np.float32)
    state = s.state_dict()
    t = Stack(np.float32)
    for p in t.parameters():
        p.data[...] = 0
    t.load_state_dict(state)
    for k, v in t.state_dict().items():
        np.testing.assert_array_equal(v, state[k])
    with pytest.raises(KeyError):
        t.load_state_dict({k: v for k, v in state.items() if k != "gn.beta"})
