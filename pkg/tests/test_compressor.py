"""Plane compressor tests: transforms, attention, hyperprior, context coding."""

import math

import numpy as np
import pytest
import torch

from devc.coder import RangeDecoder, RangeEncoder
from devc.compressor import (
    HYPER_BOUND,
    ContextModel,
    ContextParams,
    FactorizedLogisticPrior,
    PlaneCompressor,
    SequentialScan,
    context_params,
    count_parameters,
    decode_hyper,
    encode_hyper,
    estimate_rate,
    hyper_symbol_count,
    mixture_bin_mass,
    sign_bce_bits,
)
from devc.errors import GeometryError, NumericError

torch.set_num_threads(1)


def _plane(shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return torch.from_numpy((rng.random(shape) * scale).astype(np.float32))


def test_latent_grid_shapes():
    comp = PlaneCompressor("residual", width=128)
    x = _plane((1, 1, 256, 256), seed=1)
    with torch.no_grad():
        y, mask = comp.latents(x)
    assert y.shape == (1, 128, 16, 16)
    assert mask.shape == y.shape
    comp64 = PlaneCompressor("flow", width=64)
    with torch.no_grad():
        y64, _ = comp64.latents(_plane((1, 2, 64, 96), seed=2))
    assert y64.shape == (1, 64, 4, 6)


def test_channel_mismatch_rejected():
    comp = PlaneCompressor("residual", width=32)
    with pytest.raises(GeometryError):
        comp.latents(_plane((1, 2, 64, 64), seed=3))
    with pytest.raises(GeometryError):
        comp.latents(_plane((1, 64, 64), seed=3))
    with pytest.raises(NumericError):
        PlaneCompressor("audio")


def test_zero_input_zero_bias_gives_zero_latents():
    torch.manual_seed(0)
    comp = PlaneCompressor("residual", width=32)
    with torch.no_grad():
        for m in comp.analysis.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.bias.zero_()
        comp.attention.proj.bias.zero_()
        y, _ = comp.latents(torch.zeros(1, 1, 64, 64))
    assert torch.all(y == 0)


def test_attention_output_width():
    comp = PlaneCompressor("residual", width=64, use_attention=True)
    with torch.no_grad():
        y, mask = comp.latents(_plane((1, 1, 64, 64), seed=4))
    assert y.shape[1] == 64
    assert torch.all(mask > 0) and torch.all(mask < 1)


def test_attention_mask_override_ones_is_plain_projection():
    torch.manual_seed(1)
    comp = PlaneCompressor("residual", width=32)
    x = _plane((1, 1, 64, 64), seed=5)
    with torch.no_grad():
        f = comp.analysis(x)
        expected = comp.attention.proj(f)
        y, mask = comp.latents(x, mask_override=torch.ones_like(expected))
    assert torch.equal(y, expected)
    assert torch.all(mask == 1)


def test_attention_mask_concentrates_on_spike():
    # train on sparse spikes at varying positions: the learned gate must
    # track where the energy is, so at a held-out spike the mask sits at or
    # above its own median over the grid
    torch.manual_seed(2)
    rng = np.random.default_rng(0)
    comp = PlaneCompressor("residual", width=16)
    opt = torch.optim.Adam(comp.parameters(), lr=1e-3)

    def spike_input():
        x = torch.zeros(1, 1, 64, 64)
        cy, cx = (int(v) for v in rng.integers(0, 4, 2))
        x[0, 0, cy * 16 + 4 : cy * 16 + 12, cx * 16 + 4 : cx * 16 + 12] = 0.9
        return x, (cy, cx)

    for _ in range(250):
        x, _ = spike_input()
        opt.zero_grad()
        out = comp.train_forward(x)
        loss = torch.mean((out.x_hat - x) ** 2) * 1e4 + 0.01 * out.rate_main_bits / x.numel()
        loss.backward()
        opt.step()
    for _ in range(6):
        x, (cy, cx) = spike_input()
        with torch.no_grad():
            _, mask = comp.latents(x)
        assert float(mask[0, :, cy, cx].mean()) >= float(mask.median())


def test_synthesis_shapes_and_zero_latents():
    torch.manual_seed(3)
    comp = PlaneCompressor("residual", width=64)
    y_hat = np.zeros((64, 16, 16), dtype=np.float32)
    with torch.no_grad():
        for stage in comp.synthesis.stages:
            stage.bias.zero_()
        out = comp.reconstruct(y_hat, (256, 256))
    assert out.shape == (1, 1, 256, 256)
    assert torch.all(out == 0)
    # output range is clamped to the declared signal range
    wild = np.asarray(np.random.default_rng(6).normal(0, 50, (64, 16, 16)), dtype=np.float32)
    with torch.no_grad():
        out = PlaneCompressor("residual", width=64).reconstruct(wild, (256, 256))
    assert float(out.min()) >= -1.0 and float(out.max()) <= 1.0


def test_synthesis_rejects_wrong_grid():
    comp = PlaneCompressor("residual", width=32)
    with pytest.raises(GeometryError):
        comp.reconstruct(np.zeros((32, 4, 4), dtype=np.float32), (256, 256))


def test_hyper_grid_shape():
    comp = PlaneCompressor("residual", width=64)
    y = _plane((1, 64, 16, 16), seed=7)
    with torch.no_grad():
        z = comp.hyper_encoder(y)
        assert z.shape == (1, 64, 4, 4)
        feat = comp.hyper_decoder(z, (16, 16))
    assert feat.shape == (1, 64, 16, 16)
    with pytest.raises(GeometryError):
        comp.hyper_decoder(_plane((1, 64, 3, 3), seed=8), (16, 16))


def test_round_is_idempotent_on_hyper_ints():
    z = torch.round(torch.randn(1, 8, 4, 4) * 10).clamp(-HYPER_BOUND, HYPER_BOUND - 1)
    assert torch.equal(torch.round(z), z)


def test_prior_prefers_zero_grid():
    prior = FactorizedLogisticPrior(16)
    zeros = torch.zeros(1, 16, 4, 4)
    rng = np.random.default_rng(9)
    noisy = torch.from_numpy(rng.integers(-20, 20, (1, 16, 4, 4)).astype(np.float32))
    with torch.no_grad():
        assert float(prior.rate_bits(zeros)) <= float(prior.rate_bits(noisy))


def test_prior_cdf_table_properties():
    torch.manual_seed(4)
    prior = FactorizedLogisticPrior(8)
    with torch.no_grad():
        prior.loc.uniform_(-3, 3)
        prior.log_scale.uniform_(-1, 1)
    table = prior.cdf_table()
    assert table.shape == (8, 2 * HYPER_BOUND + 2)
    assert np.all(np.diff(table, axis=1) >= 0)
    # tails may saturate to exactly 0.0/1.0 in float64; the coder only ever
    # uses differences, so closed bounds are the real invariant
    assert np.all(table >= 0) and np.all(table <= 1)
    assert np.all(table[:, 0] < 1e-6) and np.all(table[:, -1] > 1 - 1e-6)
    # table mass of one integer bin matches the torch bin_mass
    z = torch.zeros(1, 8, 1, 1)
    with torch.no_grad():
        mass = prior.bin_mass(z)[0, :, 0, 0].numpy()
    lo = 0 + HYPER_BOUND
    hi = 0 + HYPER_BOUND + 1
    np.testing.assert_allclose(table[:, hi] - table[:, lo], mass, rtol=1e-5)


def test_hyper_round_trip():
    torch.manual_seed(5)
    prior = FactorizedLogisticPrior(8)
    table = prior.cdf_table()
    rng = np.random.default_rng(10)
    values = rng.integers(-HYPER_BOUND, HYPER_BOUND, (8, 4, 4)).astype(np.int32)
    enc = RangeEncoder()
    bits = encode_hyper(values, table, enc)
    data = enc.finish()
    assert bits > 0
    decoded = decode_hyper((4, 4), table, RangeDecoder(data), channels=8)
    np.testing.assert_array_equal(decoded, values)
    assert hyper_symbol_count((4, 4), 8) == 8 * 16 * 8


def test_hyper_rejects_out_of_range():
    prior = FactorizedLogisticPrior(2)
    bad = np.full((2, 2, 2), HYPER_BOUND, dtype=np.int32)
    with pytest.raises(NumericError):
        encode_hyper(bad, prior.cdf_table(), RangeEncoder())


def test_context_param_ranges():
    torch.manual_seed(6)
    ctx = ContextModel(channels=16)
    y = torch.randn(1, 16, 8, 8) * 3
    hyper = torch.randn(1, 16, 8, 8)
    with torch.no_grad():
        params = ctx(y, hyper)
    assert torch.all(params.sigma > 0)
    assert torch.all(params.p_plus > 1e-6 - 1e-12)
    assert torch.all(params.p_plus < 1 - 1e-6 + 1e-12)
    assert torch.allclose(params.weights.sum(dim=2), torch.ones(1, 16, 8, 8), atol=1e-6)
    assert torch.all(params.scales > 0)
    with pytest.raises(GeometryError):
        ctx(torch.randn(1, 8, 8, 8), hyper)


def test_scan_param_ranges_fuzz():
    torch.manual_seed(7)
    ctx = ContextModel(channels=8)
    scan = SequentialScan(ctx, torch.randn(1, 8, 5, 5))
    rng = np.random.default_rng(11)
    canvas = np.zeros((8, 9, 9), dtype=np.float32)
    checked = 0
    while checked < 10_000:
        canvas[:, 2:7, 2:7] = rng.normal(0, 3, (8, 5, 5)).astype(np.float32)
        for c in range(8):
            for i in range(5):
                for j in range(5):
                    mu, sigma, p = scan.pack.params_at(canvas, c, i, j)
                    assert sigma > 0
                    assert 1e-6 <= p <= 1 - 1e-6
                    assert math.isfinite(mu)
                    checked += 1
    assert checked >= 10_000


def test_estimate_rate_matches_cdf_oracle():
    torch.manual_seed(8)
    b, c, k, h, w = 1, 3, 3, 4, 4
    y = torch.randn(b, c, h, w, dtype=torch.float64)
    logits = torch.randn(b, c, k, h, w, dtype=torch.float64)
    weights = torch.softmax(logits, dim=2)
    means = torch.randn(b, c, k, h, w, dtype=torch.float64)
    scales = torch.rand(b, c, k, h, w, dtype=torch.float64) + 0.2
    params = ContextParams(weights, means, scales, None, None, None)
    got = float(estimate_rate(y, params, "train"))

    def phi(x):
        return 0.5 * math.erfc(-x / math.sqrt(2.0))

    expect = 0.0
    for ci in range(c):
        for i in range(h):
            for j in range(w):
                mass = 0.0
                for kk in range(k):
                    v = -abs(float(y[0, ci, i, j]) - float(means[0, ci, kk, i, j]))
                    s = float(scales[0, ci, kk, i, j])
                    mass += float(weights[0, ci, kk, i, j]) * (
                        phi((v + 0.5) / s) - phi((v - 0.5) / s)
                    )
                expect -= math.log2(max(mass, 1e-9))
    assert got == pytest.approx(expect, rel=1e-9)


def test_estimate_rate_bits_mode_fair_coin():
    # p_plus = 0.5 everywhere prices every sign at exactly one bit
    n = 6 * 4 * 4
    y = torch.randn(1, 6, 4, 4)
    mu = torch.zeros(1, 6, 4, 4)
    p = torch.full((1, 6, 4, 4), 0.5)
    params = ContextParams(None, None, None, p, mu, torch.ones_like(mu))
    assert float(estimate_rate(y, params, "bits")) == float(n)
    with pytest.raises(NumericError):
        estimate_rate(y, params, "exact")


def test_sign_bce_matches_bits_mode():
    torch.manual_seed(9)
    y = torch.randn(1, 4, 4, 4)
    mu = torch.randn(1, 4, 4, 4) * 0.1
    p = torch.rand(1, 4, 4, 4) * 0.8 + 0.1
    params = ContextParams(None, None, None, p, mu, torch.ones_like(mu))
    assert float(sign_bce_bits(y, params)) == pytest.approx(
        float(estimate_rate(y, params, "bits")), rel=1e-6
    )


def test_mixture_bin_mass_positive_and_bounded():
    torch.manual_seed(10)
    y = torch.randn(1, 2, 3, 3) * 5
    w = torch.softmax(torch.randn(1, 2, 3, 3, 3), dim=2)
    m = torch.randn(1, 2, 3, 3, 3)
    s = torch.rand(1, 2, 3, 3, 3) + 0.1
    mass = mixture_bin_mass(y, w, m, s)
    assert torch.all(mass >= 1e-9)
    assert torch.all(mass <= 1.0 + 1e-6)


def test_sequential_scan_round_trip():
    torch.manual_seed(11)
    ctx = ContextModel(channels=8)
    hyper = torch.randn(1, 8, 6, 5)
    scan = SequentialScan(ctx, hyper)
    assert scan.grid == (6, 5)
    assert scan.symbol_count() == 8 * 30
    rng = np.random.default_rng(12)
    latents = rng.normal(0, 2, (8, 6, 5)).astype(np.float32)
    enc = RangeEncoder()
    y_hat, bits = scan.encode(latents, enc)
    data = enc.finish()
    assert bits > 0
    decoded = SequentialScan(ctx, hyper).decode(RangeDecoder(data))
    # decoder reproduces the encoder-side reconstruction byte for byte
    assert decoded.tobytes() == y_hat.tobytes()


def test_sequential_scan_rejects_bad_shapes():
    ctx = ContextModel(channels=4)
    scan = SequentialScan(ctx, torch.zeros(1, 4, 4, 4))
    with pytest.raises(GeometryError):
        scan.encode(np.zeros((4, 5, 5), dtype=np.float32), RangeEncoder())
    with pytest.raises(GeometryError):
        SequentialScan(ctx, torch.zeros(2, 4, 4, 4))


def test_context_causality():
    """Perturbing a later coding-order sample never changes earlier params."""
    torch.manual_seed(12)
    ctx = ContextModel(channels=4)
    hyper = torch.randn(1, 4, 5, 5)
    rng = np.random.default_rng(13)
    base = rng.normal(0, 1, (4, 5, 5)).astype(np.float32)
    total = 4 * 5 * 5
    for _ in range(30):
        k = int(rng.integers(0, total - 1))
        at = context_params(ctx, base, hyper, k)
        future = base.copy()
        flat = future.reshape(-1)
        idx = int(rng.integers(k, total))
        flat[idx] += np.float32(rng.normal(0, 10))
        after = context_params(ctx, future, hyper, k)
        assert at == after  # bit-exact tuple equality


def test_context_params_bounds_check():
    ctx = ContextModel(channels=2)
    hyper = torch.zeros(1, 2, 3, 3)
    grid = np.zeros((2, 3, 3), dtype=np.float32)
    with pytest.raises(GeometryError):
        context_params(ctx, grid, hyper, 18)
    with pytest.raises(GeometryError):
        context_params(ctx, np.zeros((2, 4, 4), dtype=np.float32), hyper, 0)


def test_scan_matches_torch_context_params():
    """The numpy scan and the torch context model agree on (mu, sigma, p)."""
    torch.manual_seed(13)
    ctx = ContextModel(channels=4)
    hyper = torch.randn(1, 4, 4, 4)
    rng = np.random.default_rng(14)
    y_hat = rng.normal(0, 1, (4, 4, 4)).astype(np.float32)
    with torch.no_grad():
        params = ctx(torch.from_numpy(y_hat).unsqueeze(0), hyper)
    for k in (0, 17, 40, 63):
        mu, sigma, p = context_params(ctx, y_hat, hyper, k)
        c, rem = divmod(k, 16)
        i, j = divmod(rem, 4)
        assert mu == pytest.approx(float(params.mu[0, c, i, j]), abs=1e-4)
        assert sigma == pytest.approx(float(params.sigma[0, c, i, j]), abs=1e-4)
        assert p == pytest.approx(float(params.p_plus[0, c, i, j]), abs=1e-4)


def test_train_forward_outputs():
    torch.manual_seed(14)
    comp = PlaneCompressor("flow", width=16)
    x = _plane((2, 2, 32, 32), seed=15)
    out = comp.train_forward(x)
    assert out.x_hat.shape == x.shape
    assert float(out.rate_main_bits.detach()) > 0
    assert float(out.rate_hyper_bits.detach()) > 0
    assert float(out.sign_bits.detach()) > 0
    assert torch.all(out.x_hat >= 0) and torch.all(out.x_hat <= 1)
    # gradients reach the analysis transform
    (out.rate_main_bits + (out.x_hat**2).sum()).backward()
    grads = [p.grad for p in comp.analysis.parameters()]
    assert all(g is not None for g in grads)


def test_overfit_round_trip_reaches_small_error():
    # capacity check: with the quantizer out of the loop, overfitting a
    # single smooth plane must push analysis -> synthesis below 1e-3 MSE
    torch.manual_seed(15)
    rng = np.random.default_rng(16)
    field = rng.normal(0, 1, (8, 8))
    smooth = np.kron(field, np.ones((8, 8)))
    smooth = smooth / np.abs(smooth).max() * 0.5
    x = torch.from_numpy(smooth.astype(np.float32)).reshape(1, 1, 64, 64)
    comp = PlaneCompressor("residual", width=32)
    opt = torch.optim.Adam(comp.parameters(), lr=1e-3)
    for _ in range(400):
        opt.zero_grad()
        y, _ = comp.latents(x)
        recon = comp.synthesis(y, (64, 64))
        loss = torch.mean((recon - x) ** 2)
        loss.backward()
        opt.step()
    with torch.no_grad():
        y, _ = comp.latents(x)
        recon = comp.synthesis(y, (64, 64))
    mse = float(torch.mean((recon - x) ** 2))
    assert mse < 1e-3


def test_parameter_count_ordering():
    small = PlaneCompressor("residual", width=64, use_attention=True)
    large = PlaneCompressor("residual", width=128, use_attention=False)
    assert count_parameters(small) < count_parameters(large)
