"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line through :class:`acceptance_log.Criterion`;
the lines are repeated in the terminal summary.  Budgets are process CPU
seconds.  Criteria 5, 7 and 8 share one desk-scale codec trained by a
module fixture; its CPU time is charged to each criterion that uses it.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import yaml
from scipy import stats

from acceptance_log import Criterion
from gradcheck import check_against_twin, numeric_grad, rel_err, twin64
from ksyn.codec import (Codec, TemporalConv, VectorQuantizer, decode, encode, normalize_kspace,
                        signed_log, train_codec)
from ksyn.config import ExperimentConfig
from ksyn.diffusion import NoisePredictor, cosine_schedule, diffusion_loss, p_sample_step, q_sample, sample_latents
from ksyn.fusion import FusionSpec, fuse, fuse_pair, sample_guidance
from ksyn.kspace import AmplitudePhase, decompose, dft2, idft2, recompose, volume_kspace
from ksyn.masks import apply_mask, radial_mask, zero_filled_recon
from ksyn.metrics import (frechet_distance, kid, kid_subsets, median_bandwidth, mmd2, mse, psnr,
                          ssim)
from ksyn.nn import ConvTranspose2d, Conv2d, GroupNorm, Linear, SiLU, Upsample2x
from ksyn.phantom import PhantomSpec, generate_phantom, make_corpus
from ksyn.pipeline import (LatentCodec, noise_volumes, run_ablation, split_halves, synthesize,
                           train_model)
from ksyn.unet import ResBlock, UNet, UNetConfig

DESK = ExperimentConfig.from_tree({})
METRICS = ("FD", "KID", "MMD2")

# desk-scale run sizes (see the decisions ledger)
CODEC_ITERATIONS = 800
OVERFIT_ITERATIONS = 2000
E2E_SEEDS = (0, 1, 2)
E2E_SYNTH = 100
ABLATION_SEEDS = (0, 1, 2, 3, 4)
ABLATION_ITERATIONS = 2000
ABLATION_SYNTH = 100


def finish(c: Criterion):
    assert c.passed, c.failure_message()


# ---------------------------------------------------------------- 1 spectral

def naive_dft(x):
    H, W = x.shape
    out = np.zeros((H, W), dtype=complex)
    for kh in range(H):
        for kw in range(W):
            acc = 0j
            for h in range(H):
                for w in range(W):
                    acc += x[h, w] * np.exp(-2j * np.pi * (kh * h / H + kw * w / W))
            out[kh, kw] = acc
    return out


def test_criterion_01_spectral_algebra():
    rng = np.random.default_rng(101)
    with Criterion(1, "spectral algebra", 60) as c:
        worst_rt = worst_pv = 0.0
        for H, W in [(2, 2), (4, 6), (8, 8), (16, 12), (64, 64), (192, 192), (256, 64)]:
            for _ in range(5):
                x = rng.standard_normal((H, W)) + 1j * rng.standard_normal((H, W))
                X = dft2(x)
                worst_rt = max(worst_rt, np.linalg.norm(idft2(X) - x) / np.linalg.norm(x))
                e_img, e_k = np.sum(np.abs(x) ** 2), np.sum(np.abs(X.data) ** 2) / (H * W)
                worst_pv = max(worst_pv, abs(e_img - e_k) / e_img)
        c.check("round_trip", worst_rt < 1e-10, f"{worst_rt:.2e}")
        c.check("parseval", worst_pv < 1e-8, f"{worst_pv:.2e}")

        worst_bf = 0.0
        for H in range(2, 9):
            for W in range(2, 9):
                x = rng.standard_normal((H, W)) + 1j * rng.standard_normal((H, W))
                worst_bf = max(worst_bf, np.max(np.abs(dft2(x).data - naive_dft(x))))
        c.check("brute_force_dft", worst_bf < 1e-12, f"{worst_bf:.2e}")

        worst_ap = worst_pa = 0.0
        for H, W in [(4, 4), (8, 6), (64, 64)]:
            X = dft2(rng.standard_normal((H, W)) + 1j * rng.standard_normal((H, W)))
            back = recompose(decompose(X)).data
            worst_ap = max(worst_ap, np.max(np.abs(back - X.data)) / np.max(np.abs(X.data)))
            amp = rng.uniform(0.1, 3.0, (H, W))
            phase = rng.uniform(-np.pi, np.pi, (H, W))
            ap = decompose(recompose(AmplitudePhase(amp, phase)))
            dphi = np.angle(np.exp(1j * (ap.phase - phase)))
            worst_pa = max(worst_pa, np.max(np.abs(ap.amplitude - amp)), np.max(np.abs(dphi)))
            c.check("phase_range", np.all(ap.phase > -np.pi) and np.all(ap.phase <= np.pi))
        c.check("recompose_decompose", worst_ap < 1e-12, f"{worst_ap:.2e}")
        c.check("decompose_recompose", worst_pa < 1e-12, f"{worst_pa:.2e}")
    finish(c)


# ---------------------------------------------------------------- 2 fusion

def test_criterion_02_fusion():
    rng = np.random.default_rng(202)
    with Criterion(2, "temporal fusion", 60) as c:
        ends = conv = True
        for _ in range(200):
            a, b = np.abs(rng.standard_normal((2, 8, 8))) * 10.0 ** rng.uniform(-3, 3, (2, 8, 8))
            ends &= np.array_equal(fuse_pair(a, b, 1.0), a) and np.array_equal(fuse_pair(a, b, 0.0), b)
            out = fuse_pair(a, b, float(rng.uniform()))
            conv &= bool(np.all(out >= np.minimum(a, b)) and np.all(out <= np.maximum(a, b)))
        c.check("endpoints", ends)
        c.check("pairwise_convexity", conv)

        vol_rng = np.random.default_rng(3)
        from ksyn.kspace import CineVolume
        vol = CineVolume(vol_rng.standard_normal((8, 8, 6)) + 1j * vol_rng.standard_normal((8, 8, 6)))
        specs = [FusionSpec("adjacent", 2, (3,), 0.7), FusionSpec("skip", 1, (4,), 0.4),
                 FusionSpec("grouped", 3, (0, 5), (0.2, 0.5, 0.3)),
                 FusionSpec("skip", 0, (3,), 0.9, freq_weighting=(1.0, 0.5, 0.0))]
        for spec in specs:
            out = fuse(vol, spec)
            amps = [decompose(dft2(vol.data[:, :, f])).amplitude for f in (spec.anchor, *spec.partners)]
            c.check("bin_convexity", np.all(out.fused_amplitude >= np.minimum.reduce(amps))
                    and np.all(out.fused_amplitude <= np.maximum.reduce(amps)))
            anchor = decompose(dft2(vol.data[:, :, spec.anchor])).phase
            nz = out.fused_amplitude > 0
            c.check("anchor_phase", np.array_equal(out.phase[nz], anchor[nz]))

        static = generate_phantom(PhantomSpec(grid=(32, 32, 6), motion_amplitude=0.0, noise_sigma=0.0, seed=9))
        common = dft2(static.data[:, :, 0])
        for spec in (FusionSpec("adjacent", 0, (1,), 0.4), FusionSpec("skip", 0, (3,), 0.8),
                     FusionSpec("grouped", 0, (2, 4), (0.3, 0.3, 0.4))):
            out = fuse(static, spec)
            err = np.max(np.abs(out.spectrum.data - common.data)) / np.max(np.abs(common.data))
            c.check("static_fixed_point", err <= 1e-12, f"{err:.2e}")

        corpus = make_corpus(2, PhantomSpec(grid=(8, 8, 4), n_ellipses=1), seed=0)
        mus = [g.spec.mu for g in sample_guidance(corpus, 10_000, (0.5, 0.5, 0.0), seed=11)]
        ks = stats.kstest(mus, "uniform").statistic
        c.check("mu_uniformity_ks", ks < 0.02, f"D={ks:.4f}")
    finish(c)


# ---------------------------------------------------------------- 3 diffusion math

class _Fixed:
    def __init__(self, out):
        self.out = out

    def forward(self, z, t, c):
        return self.out


class _Affine:
    def forward(self, z, t, c):
        return 0.1 * z + 0.05 * c + 0.001 * np.asarray(t, float).reshape(-1, *[1] * (z.ndim - 1))


def test_criterion_03_diffusion_math():
    with Criterion(3, "diffusion math", 300) as c:
        for T in (2, 10, 200, 1000):
            s = cosine_schedule(T)
            prod = np.cumprod(s.alphas[1:])
            err = np.max(np.abs(prod - s.alpha_bars[1:]))
            c.check("schedule_product", err < 1e-12, f"T={T} {err:.2e}")
            c.check("alpha_bar_decreasing", np.all(np.diff(s.alpha_bars) < 0), f"T={T}")

        n = 100_000
        rng = np.random.default_rng(303)
        s = cosine_schedule(200)
        for t in (1, 50, 150, 200):
            z0 = 0.7
            zt = q_sample(s, np.full(n, z0), t, rng.standard_normal(n))
            mean, var = np.sqrt(s.alpha_bars[t]) * z0, 1.0 - s.alpha_bars[t]
            c.check("q_sample_mean", abs(zt.mean() - mean) < 4 * np.sqrt(var / n), f"t={t}")
            c.check("q_sample_var", abs(zt.var() / var - 1) < 0.03, f"t={t}")

        # scalar hand substitution on a T=2 schedule (floor alpha >= 1e-5 is active at t=2)
        f = [math.cos(((t / 2 + 0.008) / 1.008) * math.pi / 2) ** 2 for t in range(3)]
        ab1 = f[1] / f[0]
        a2 = max(f[2] / f[0] / ab1, 1e-5)
        ab2 = ab1 * a2
        z0, e = 0.8, -1.1
        z2 = math.sqrt(ab2) * z0 + math.sqrt(1 - ab2) * e
        expected = (z2 - (1 - a2) / math.sqrt(1 - ab2) * e) / math.sqrt(a2)
        s2 = cosine_schedule(2)
        zt = q_sample(s2, np.array([[z0]]), 2, np.array([[e]]))
        out, _ = p_sample_step(_Fixed(np.array([[e]])), s2, zt, 2, zt)
        c.check("t2_oracle_step", abs(out[0, 0] - expected) < 1e-12, f"{abs(out[0, 0] - expected):.2e}")

        s = cosine_schedule(50)
        cond = np.random.default_rng(4).standard_normal((3, 2, 4, 4))
        z, traces = sample_latents(_Affine(), s, cond, [5, 6, 7], keep_trace=True)
        z_again, _ = sample_latents(_Affine(), s, cond, [5, 6, 7])
        c.check("rerun_bit_exact", np.array_equal(z, z_again))
        tr = traces[2]
        zz = tr.z[0][None]
        exact = True
        for k, t in enumerate(range(50, 0, -1)):
            eta = None if tr.eta[k] is None else tr.eta[k][None]
            zz, _ = p_sample_step(_Affine(), s, zz, t, cond[2:3], eta)
            exact &= np.array_equal(zz[0], tr.z[k + 1])
        c.check("trace_replay_bit_exact", exact and np.array_equal(zz[0], z[2]))
    finish(c)


# ---------------------------------------------------------------- 4 gradients

TINY_UNET = UNetConfig(widths=(8, 16), emb_dim=8, groups=4)


def _layer_cases():
    r = np.random.default_rng
    return {
        "conv3x3_stride1": (lambda d: Conv2d(3, 5, 3, 1, rng=r(1), dtype=d), [(2, 3, 6, 6)], ()),
        "conv3x3_stride2": (lambda d: Conv2d(4, 3, 3, 2, rng=r(2), dtype=d), [(2, 4, 8, 6)], ()),
        "conv1x1": (lambda d: Conv2d(3, 2, 1, 1, rng=r(3), dtype=d), [(1, 3, 4, 4)], ()),
        "conv_transpose": (lambda d: ConvTranspose2d(4, 3, rng=r(4), dtype=d), [(2, 4, 3, 5)], ()),
        "groupnorm": (lambda d: GroupNorm(2, 4, dtype=d), [(3, 4, 5, 5)], ()),
        "silu": (lambda d: SiLU(), [(2, 3, 4, 4)], ()),
        "upsample": (lambda d: Upsample2x(), [(2, 3, 3, 4)], ()),
        "linear": (lambda d: Linear(7, 5, rng=r(5), dtype=d), [(4, 7)], ()),
        "temporal_conv": (lambda d: TemporalConv(3, 4, r(6), dtype=d), [(2, 4, 3, 4, 4)], ()),
        "resblock": (lambda d: ResBlock(8, 6, 4, r(7), d), [(2, 8, 4, 4)], ((2, 6),)),
        "unet": (lambda d: UNet(TINY_UNET, in_channels=2, seed=1, dtype=d), [(2, 2, 4, 4)],
                 (np.array([3, 17]), (2, 2, 4, 4))),
    }


def test_criterion_04_gradients():
    with Criterion(4, "gradient correctness", 300) as c:
        rng = np.random.default_rng(404)
        for name, (make, (shape,), extra_spec) in _layer_cases().items():
            layer = make(np.float32)
            if name == "groupnorm":
                layer.gamma.data[...] = rng.standard_normal(4) + 1
                layer.beta.data[...] = rng.standard_normal(4)
            twin = twin64(layer, lambda: make(np.float64))
            x = rng.standard_normal(shape).astype(np.float32)
            extra = tuple(e if isinstance(e, np.ndarray) else rng.standard_normal(e).astype(np.float32)
                          for e in extra_spec)
            errs = check_against_twin(layer, twin, x, n=12, extra=extra)
            worst = max(errs.values())
            c.check(f"layer:{name}", worst < 1e-3, f"{worst:.1e}")

        # codec encoder+decoder (unquantized path) as one composite layer
        cfg = replace(DESK.codec_config(0), width=8, temporal_width=8, quantize=False)
        model = Codec(cfg, dtype=np.float32)
        twin = twin64(model, lambda: Codec(cfg, dtype=np.float64))
        x = rng.standard_normal((1, 2, 2, 16, 16))
        R = rng.standard_normal((1, 2, 2, 16, 16))
        model.zero_grad()
        model.decode_batch(model.encode_batch(x.astype(np.float32)))
        model.backward_encoder(model.backward_decoder(R.astype(np.float32)))

        def codec_loss():
            return float(np.sum(twin.decode_batch(twin.encode_batch(x)) * R))
        tp = dict(twin.named_parameters())
        worst = 0.0
        for pname, p in model.named_parameters():
            if pname.startswith("vq."):
                continue
            idx = rng.choice(p.data.size, size=min(4, p.data.size), replace=False)
            worst = max(worst, rel_err(numeric_grad(codec_loss, tp[pname].data, idx, 1e-6),
                                       p.grad.reshape(-1)[idx]))
        c.check("layer:codec", worst < 1e-3, f"{worst:.1e}")

        # the quantizer's straight-through rule is a defined surrogate, checked in closed form
        vq = VectorQuantizer(16, 4, rng=np.random.default_rng(3), dtype=np.float32, commitment=0.25)
        z = rng.standard_normal((1, 4, 3, 3)).astype(np.float32)
        vq.forward(z)
        dy = rng.standard_normal(z.shape).astype(np.float32)
        dz = vq.backward(dy)
        flat = z.transpose(0, 2, 3, 1).reshape(-1, 4).astype(np.float64)
        q = vq.codebook.data[vq.indices.ravel()].astype(np.float64)
        expect = dy.transpose(0, 2, 3, 1).reshape(-1, 4) + 0.5 * (flat - q) / flat.size
        err = rel_err(dz.transpose(0, 2, 3, 1).reshape(-1, 4), expect)
        c.check("vq_straight_through", err < 1e-6, f"{err:.1e}")

        # end-to-end diffusion loss (both exponents)
        s = cosine_schedule(20)
        for p in (1, 2):
            unet = NoisePredictor(UNet(TINY_UNET, in_channels=2, seed=2, dtype=np.float32), s)
            twin = NoisePredictor(twin64(unet.net, lambda: UNet(TINY_UNET, in_channels=2, dtype=np.float64)), s)
            z0 = rng.standard_normal((2, 2, 4, 4))
            cond = rng.standard_normal((2, 2, 4, 4))
            eps = rng.standard_normal(z0.shape)
            t = np.array([4, 15])
            unet.zero_grad()
            diffusion_loss(unet, s, z0, cond, t, eps, p=p)

            def f():
                return diffusion_loss(twin, s, z0, cond, t, eps, p=p, backward=False)
            tp = dict(twin.named_parameters())
            worst = 0.0
            for pname, param in unet.named_parameters():
                idx = rng.choice(param.data.size, size=min(4, param.data.size), replace=False)
                worst = max(worst, rel_err(numeric_grad(f, tp[pname].data, idx, 1e-7),
                                           param.grad.reshape(-1)[idx]))
            c.check(f"diffusion_loss_p{p}", worst < 1e-3, f"{worst:.1e}")
    finish(c)


# ---------------------------------------------------------------- shared desk codec

@pytest.fixture(scope="module")
def desk_codec():
    """Codec fit on a 20-volume desk corpus (seed 0), plus 5 held-out volumes."""
    t0 = time.process_time()
    corpus = make_corpus(25, DESK.phantom_spec(), 0, train_size=20)
    cfg = replace(DESK.codec_config(0), iterations=CODEC_ITERATIONS)
    res = train_codec([volume_kspace(v) for v in corpus.train()], cfg)
    return {"result": res, "codec": LatentCodec.from_result(res), "corpus": corpus,
            "cpu_s": time.process_time() - t0}


def _normalized_mse(model, k):
    z, rec = encode(k, model)
    k_hat = decode(z, model, rec).data
    norm, _ = normalize_kspace(k)
    norm_hat = signed_log(np.stack([k_hat.real, k_hat.imag]), rec.lam)
    return float(np.mean((norm_hat - norm) ** 2)), k_hat


def _image_psnr(k, k_hat):
    img, img_hat = np.abs(np.fft.ifft2(k, axes=(0, 1))), np.abs(np.fft.ifft2(k_hat, axes=(0, 1)))
    rng_ = float(img.max())
    return [psnr(img[:, :, t], img_hat[:, :, t], rng_) for t in range(k.shape[2])]


@pytest.mark.slow
def test_criterion_05_codec_convergence(desk_codec):
    with Criterion(5, "codec convergence", 1200) as c:
        c.extra_cpu = desk_codec["cpu_s"]
        model = desk_codec["result"].model
        held = [volume_kspace(v) for v in desk_codec["corpus"].heldout()]
        mses, psnrs = [], []
        for k in held:
            m, k_hat = _normalized_mse(model, k)
            mses.append(m)
            psnrs += _image_psnr(k, k_hat)
        c.check("heldout_image_psnr", np.mean(psnrs) > 30.0, f"{np.mean(psnrs):.2f} dB")
        c.check("heldout_normalized_mse", np.mean(mses) < 1e-2, f"{np.mean(mses):.4f}")

        one = volume_kspace(desk_codec["corpus"].train()[0])
        cfg = replace(DESK.codec_config(0), iterations=OVERFIT_ITERATIONS, batch_volumes=1)
        res = train_codec([one], cfg)
        m, _ = _normalized_mse(res.model, one)
        c.check("overfit_one_mse", m < 1e-3, f"{m:.4f}")
    finish(c)


# ---------------------------------------------------------------- 6 metrics

def _brute_mmd2(x, y, k):
    m, n = len(x), len(y)
    sxx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    syy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    sxy = sum(k(x[i], y[j]) for i in range(m) for j in range(n)) / (m * n)
    return sxx + syy - 2 * sxy


def test_criterion_06_metrics():
    with Criterion(6, "metric estimators", 120) as c:
        rng = np.random.default_rng(606)
        x = rng.standard_normal((20, 2))
        y = x + np.array([0.7, -0.3])

        def cubic(a, b):
            return (float(np.dot(a, b)) / len(a) + 1.0) ** 3
        subsets = kid_subsets(20, 20, 8, 5, seed=1)
        got, _ = kid(x, y, 8, subsets=subsets)
        ref = np.mean([_brute_mmd2(x[i], y[j], cubic) for i, j in subsets])
        c.check("kid_brute_force", abs(got - ref) < 1e-12, f"{abs(got - ref):.1e}")
        got, _ = kid(x, y, 20, subsets=[(np.arange(20), np.arange(20))])
        ref = _brute_mmd2(x, y, cubic)
        c.check("kid_full_brute_force", abs(got - ref) < 1e-12, f"{abs(got - ref):.1e}")

        h, _ = median_bandwidth(x, y)

        def rbf(a, b):
            return float(np.exp(-np.sum((a - b) ** 2) / (2 * h * h)))
        got, ref = mmd2(x, y), _brute_mmd2(x, y, rbf)
        c.check("mmd2_brute_force", abs(got - ref) < 1e-12, f"{abs(got - ref):.1e}")

        a = rng.standard_normal((500, 6))
        fd0 = frechet_distance(a, a)
        c.check("fd_identical", fd0 < 1e-8, f"{fd0:.1e}")
        g1 = rng.standard_normal((10_000, 4))
        g2 = rng.standard_normal((10_000, 4)) + np.array([1.0, 0, 0, 0])
        fd = frechet_distance(g1, g2)
        c.check("fd_mean_shift", 0.9 <= fd <= 1.1, f"{fd:.4f}")

        ref_img = rng.uniform(0, 0.8, (32, 32))
        c.check("mse_zero", mse(ref_img, ref_img) == 0)
        c.check("mse_offset", abs(mse(ref_img, ref_img + 0.1) - 0.01) < 1e-15)
        c.check("psnr_offset", abs(psnr(ref_img, ref_img + 0.1, 1.0) - 20.0) < 1e-10)
        c.check("psnr_identical_cap", psnr(ref_img, ref_img, 1.0) == 99.0)
        c.check("ssim_identical", abs(ssim(ref_img, ref_img, 1.0) - 1.0) < 1e-12)
    finish(c)


# ---------------------------------------------------------------- 7 end-to-end ordering

def _metrics(real, synth, mcfg):
    from ksyn.metrics import evaluate_corpora
    return {r.metric: r.value for r in evaluate_corpora(real, synth, mcfg)}


@pytest.mark.slow
def test_criterion_07_end_to_end_ordering(desk_codec):
    with Criterion(7, "end-to-end ordering", 3600) as c:
        c.extra_cpu = desk_codec["cpu_s"]
        n_train, n_held = DESK["corpus"]["n"], DESK["corpus"]["n_heldout"]
        for seed in E2E_SEEDS:
            corpus = make_corpus(n_train + n_held, DESK.phantom_spec(), seed, train_size=n_train)
            held = [volume_kspace(v) for v in corpus.heldout()]
            model = train_model(corpus.train(), DESK, True, seed, codec=desk_codec["codec"])
            synth = synthesize(model, E2E_SYNTH, seed)
            noise = noise_volumes(E2E_SYNTH, held, seed)
            mcfg = DESK.metric_config()
            m_synth = _metrics(held, synth, mcfg)
            m_noise = _metrics(held, noise, mcfg)
            half_a, half_b = split_halves(held, seed)
            m_halves = _metrics(half_b, half_a, mcfg)
            m_synth_b = _metrics(half_b, synth, mcfg)
            for m in METRICS:
                c.check(f"synth<noise:{m}", m_synth[m] < m_noise[m],
                        f"seed {seed}: {m_synth[m]:.4g} vs {m_noise[m]:.4g}")
                c.check(f"halves<synth:{m}", m_halves[m] < m_synth_b[m],
                        f"seed {seed}: {m_halves[m]:.4g} vs {m_synth_b[m]:.4g}")
            print(f"seed {seed}: synth {m_synth} noise {m_noise} halves {m_halves} synth-vs-half {m_synth_b}")
    finish(c)


# ---------------------------------------------------------------- 8 ablation

@pytest.mark.slow
def test_criterion_08_ablation(desk_codec, tmp_path_factory):
    from ksyn.io import write_metric_csv
    from ksyn.pipeline import PER_SEED_HEADER, TABLE_HEADER
    out = tmp_path_factory.mktemp("ablation")
    cfg = DESK.override(diffusion={"iterations": ABLATION_ITERATIONS})
    with Criterion(8, "ablation direction", 4 * 3600) as c:
        c.extra_cpu = desk_codec["cpu_s"]
        records = []

        def progress(r):
            records.append(r)
            print(f"{r['variant']:>10s} seed {r['seed']}: KID {r['KID']:.5f} FD {r['FD']:.4f} MMD2 {r['MMD2']:.5f}")
        try:
            res = run_ablation(cfg, ABLATION_SEEDS, codec=desk_codec["codec"], n_synth=ABLATION_SYNTH,
                               progress=progress)
            write_metric_csv(out / "ablation.csv", res.table(), header=TABLE_HEADER)
        finally:
            # per-seed values are written whatever happens above
            write_metric_csv(out / "ablation_per_seed.csv", [[r.get(k) for k in PER_SEED_HEADER] for r in records],
                             header=PER_SEED_HEADER)
            print(f"ablation report written to {out}")
        m = min(cfg["corpus"]["ablation_sizes"])
        wins, n = res.kid_wins(m)
        per_seed = ", ".join(f"s{r['seed']} {r['variant']}={r['KID']:.5f}" for r in records
                             if r["variant"].endswith(f"-{m}"))
        c.check(f"ksyn{m}_kid_wins", wins >= 3, f"{wins}/{n} seeds; {per_seed}")
    finish(c)


# ---------------------------------------------------------------- 9 masks

def test_criterion_09_masks():
    with Criterion(9, "sampling masks", 120) as c:
        for seed in range(5):
            m = radial_mask(192, 192, 10, seed)
            c.check("r10_fraction", 0.08 <= m.fraction <= 0.12, f"seed {seed}: {m.fraction:.4f}")
            c.check("dc_included", bool(m.mask[96, 96]))
        corpus = make_corpus(5, PhantomSpec(grid=(64, 64, 4), noise_sigma=0.01), seed=0)
        frames = [v.data[:, :, t] for v in corpus.volumes for t in range(4)]

        def mean_psnr(R):
            mask = radial_mask(64, 64, R, 0)
            return float(np.mean([zero_filled_recon(apply_mask(dft2(f), mask), f).psnr for f in frames]))
        p4, p10 = mean_psnr(4), mean_psnr(10)
        c.check("psnr_r4_above_r10", len(frames) == 20 and p4 > p10, f"{p4:.2f} vs {p10:.2f} dB")
    finish(c)


# ---------------------------------------------------------------- 10 reproducibility

def _cli_run(root, cfg_path):
    from ksyn.cli import main
    c = ["--config", str(cfg_path)]
    corpus, codec, den = root / "corpus", root / "codec/codec.ckpt", root / "den/denoiser.ckpt"
    steps = [
        ("corpus", ["phantom", *c]),
        ("fused", ["fuse", *c, "--corpus", str(corpus), "--n", "3"]),
        ("codec", ["train-codec", *c, "--corpus", str(corpus)]),
        ("den", ["train-diffusion", *c, "--corpus", str(corpus), "--codec", str(codec)]),
        ("synth", ["synthesize", *c, "--corpus", str(corpus), "--codec", str(codec), "--denoiser", str(den)]),
        ("eval", ["evaluate", *c, "--real", str(corpus), "--synth", str(root / "synth")]),
        ("halves", ["evaluate", *c, "--real", str(corpus), "--halves"]),
        ("noise", ["evaluate", *c, "--real", str(corpus), "--noise"]),
        ("mask", ["mask", *c, "--R", "4", "--corpus", str(corpus)]),
        ("png", ["export-png", *c, "--input", str(root / "synth")]),
        ("ablation", ["ablation", *c, "--seeds", "0", "1"]),
    ]
    codes = {}
    for name, argv in steps:
        codes[name] = main([*argv, "--out", str(root / name)])
    return codes


def test_criterion_10_reproducibility(tmp_path):
    from conftest import TINY_TREE
    cfg_path = tmp_path / "tiny.yaml"
    cfg_path.write_text(yaml.safe_dump(dict(TINY_TREE, seed=3)))
    with Criterion(10, "CLI reproducibility", float("inf")) as c:
        runs = [tmp_path / "a", tmp_path / "b"]
        codes = [_cli_run(r, cfg_path) for r in runs]
        for name in codes[0]:
            c.check(f"exit:{name}", codes[0][name] == 0 and codes[1][name] == 0)
            files = sorted(p.relative_to(runs[0]) for p in (runs[0] / name).iterdir()
                           if p.suffix in (".kst", ".csv", ".ckpt"))
            # checkpoints are KST blocks behind a JSON header
            c.check(f"outputs:{name}", name == "png" or files, "no KST, CSV or checkpoint outputs")
            same = all((runs[1] / f).exists() and (runs[1] / f).read_bytes() == (runs[0] / f).read_bytes()
                       for f in files)
            c.check(f"identical:{name}", same)
    finish(c)
