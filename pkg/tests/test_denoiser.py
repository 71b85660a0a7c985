import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from diffbridge import denoiser
from diffbridge.denoiser import CheckpointError, DenoiserConfig
from diffbridge.selfcheck import TINY_DENOISER, gradient_check

# sin / cos of 7 * 10000 ** (-i / 4), i = 0..3, from a standalone math-module script
TIME_EMBED_7_8 = [
    0.6569865987187891, 0.7539022543433046,
    0.6442176872376911, 0.7648421872844884,
    0.06994284733753277, 0.9975510002532796,
    0.006999942833473391, 0.9999755001000415,
]


def expected_param_count(cfg: DenoiserConfig) -> int:
    """Per-layer count: conv = c_in * c_out * k + c_out, linear = d_in * d_out + d_out."""
    e, k = cfg.time_embed_dim, cfg.kernel_size
    conv = lambda ci, co, kk: ci * co * kk + co  # noqa: E731
    lin = lambda di, do: di * do + do  # noqa: E731
    n = 2 * lin(e, e)
    n += conv(cfg.in_channels, cfg.base_width, 3) + conv(cfg.base_width, cfg.latent_channels, 3)
    for i in range(cfg.num_levels):
        w = cfg.width(i)
        blocks = len(cfg.dilations) * (conv(w, w, k) + conv(w, w, 1))
        n += 2 * blocks + 2 * lin(e, w)
        if i < cfg.num_levels - 1:
            w2 = cfg.width(i + 1)
            n += conv(w, w2, 3) + conv(w2, w, 3) + conv(2 * w, w, 1)
    return n


def test_time_embedding_scalar_oracle():
    np.testing.assert_allclose(denoiser.time_embedding(7, 8).numpy(), TIME_EMBED_7_8, rtol=1e-14)


def test_time_embedding_at_zero():
    e = denoiser.time_embedding(0, 16).numpy()
    assert not e[0::2].any()
    np.testing.assert_array_equal(e[1::2], 1.0)


@given(st.integers(0, 10_000), st.sampled_from([2, 8, 64]))
def test_time_embedding_norm_bound(t, dim):
    assert float(denoiser.time_embedding(t, dim).norm()) <= math.sqrt(dim) + 1e-12


def test_time_embedding_batch():
    e = denoiser.time_embedding(torch.tensor([0, 7]), 8)
    assert e.shape == (2, 8)
    np.testing.assert_allclose(e[1].numpy(), TIME_EMBED_7_8, rtol=1e-14)


def test_odd_embedding_dim_rejected():
    with pytest.raises(ValueError):
        denoiser.time_embedding(1, 7)
    with pytest.raises(ValueError):
        DenoiserConfig(time_embed_dim=7)


@pytest.mark.parametrize(
    "cfg",
    [
        DenoiserConfig(),
        TINY_DENOISER,
        DenoiserConfig(latent_channels=3, base_width=5, num_levels=4, time_embed_dim=6, guidance_enabled=True, dilations=(1, 2, 4), kernel_size=5),
        DenoiserConfig(latent_channels=1, base_width=2, num_levels=1, time_embed_dim=2, dilations=(1,)),
    ],
)
def test_param_count_formula(cfg):
    assert denoiser.count_params(denoiser.init_params(cfg, 0)) == expected_param_count(cfg)


def test_known_sizes():
    assert denoiser.count_params(denoiser.init_params(DenoiserConfig(), 0)) == 461_568
    assert denoiser.count_params(denoiser.init_params(TINY_DENOISER, 0)) == 2_030


def test_init_is_deterministic():
    a = denoiser.init_params(TINY_DENOISER, 11)
    b = denoiser.init_params(TINY_DENOISER, 11)
    c = denoiser.init_params(TINY_DENOISER, 12)
    for (na, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(pa, pb), na
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_zero_input_finite():
    m = denoiser.init_params(DenoiserConfig(), 0)
    out = denoiser.forward(m, torch.zeros(2, 32, 20), torch.tensor([1, 200]))
    assert torch.isfinite(out).all()


@given(
    st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 40), st.integers(1, 3), st.booleans()
)
def test_output_shape_matches_input(c, width, levels, frames, batch, guided):
    cfg = DenoiserConfig(latent_channels=c, base_width=width, num_levels=levels, time_embed_dim=4, guidance_enabled=guided)
    m = denoiser.init_params(cfg, 0)
    z = torch.randn(batch, c, frames)
    g = torch.randn(batch, frames) if guided else None
    assert denoiser.forward(m, z, torch.ones(batch, dtype=torch.long), g).shape == z.shape
    assert denoiser.forward(m, z[0], 3, g[0] if guided else None).shape == z[0].shape


def test_missing_guidance_equals_zero_channel():
    cfg = DenoiserConfig(latent_channels=4, base_width=4, num_levels=2, time_embed_dim=8, guidance_enabled=True)
    m = denoiser.init_params(cfg, 0)
    z = torch.randn(2, 4, 12)
    a = denoiser.forward(m, z, 5, None)
    b = denoiser.forward(m, z, 5, torch.zeros(2, 12))
    assert torch.equal(a, b)


def test_guidance_on_unguided_model_rejected():
    m = denoiser.init_params(TINY_DENOISER, 0)
    with pytest.raises(ValueError):
        denoiser.forward(m, torch.zeros(2, 8), 1, torch.zeros(8))


def test_bad_inputs_rejected():
    m = denoiser.init_params(TINY_DENOISER, 0)
    with pytest.raises(ValueError):
        denoiser.forward(m, torch.zeros(3, 8), 1)
    with pytest.raises(ValueError):
        denoiser.forward(m, torch.full((2, 8), float("nan")), 1)


# -- straight-line oracle for a one-level network ------------------------------------


def np_conv(x, w, b, dilation=1, padding=0):
    cin, n = x.shape
    cout, _, k = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding)))
    out = np.zeros((cout, n + 2 * padding - dilation * (k - 1)))
    for o in range(cout):
        for j in range(out.shape[1]):
            acc = b[o]
            for i in range(cin):
                for r in range(k):
                    acc += w[o, i, r] * xp[i, j + r * dilation]
            out[o, j] = acc
    return out


def silu(x):
    return x / (1 + np.exp(-x))


def test_one_level_forward_matches_straight_line_oracle():
    cfg = DenoiserConfig(latent_channels=3, base_width=4, num_levels=1, time_embed_dim=4, dilations=(1, 2))
    m = denoiser.init_params(cfg, 5, dtype=torch.float64)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.05 * torch.randn(p.shape, dtype=torch.float64))
    P = {k: v.detach().numpy() for k, v in m.named_parameters()}
    z = np.random.default_rng(0).standard_normal((3, 8))
    t = 13

    temb = np.array([f(t * 10000 ** (-i / 2)) for i in range(2) for f in (math.sin, math.cos)])
    hid = silu(P["time_mlp.0.weight"] @ temb + P["time_mlp.0.bias"])
    cond = silu(P["time_mlp.2.weight"] @ hid + P["time_mlp.2.bias"])

    def block(h, prefix, d):
        inner = np_conv(silu(h), P[prefix + ".conv.weight"], P[prefix + ".conv.bias"], d, d)
        return h + np_conv(silu(inner), P[prefix + ".proj.weight"], P[prefix + ".proj.bias"])

    h = np_conv(z, P["inp.weight"], P["inp.bias"], 1, 1)
    h = block(h, "encoder.0.blocks.0", 1)
    h = block(h, "encoder.0.blocks.1", 2)
    scale = P["decoder.0.film.scale.weight"] @ cond + P["decoder.0.film.scale.bias"]
    shift = P["decoder.0.film.shift.weight"] @ cond + P["decoder.0.film.shift.bias"]
    h = (1 + scale)[:, None] * h + shift[:, None]
    h = block(h, "decoder.0.blocks.0", 1)
    h = block(h, "decoder.0.blocks.1", 2)
    want = np_conv(silu(h), P["out.weight"], P["out.bias"], 1, 1)

    got = denoiser.forward(m, torch.as_tensor(z), t).detach().numpy()
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


# -- gradients ------------------------------------------------------------------------


def test_gradient_check_against_finite_differences():
    assert gradient_check(TINY_DENOISER, seed=0, h=1e-5) < 1e-4


def test_gradient_check_with_guidance_channel():
    cfg = DenoiserConfig(latent_channels=2, base_width=3, num_levels=2, time_embed_dim=4, guidance_enabled=True, dilations=(1,))
    assert gradient_check(cfg, seed=1, h=1e-5) < 1e-4


def test_zero_upstream_gives_zero_gradients():
    m = denoiser.init_params(TINY_DENOISER, 0, dtype=torch.float64)
    z = torch.randn(2, 2, 8, dtype=torch.float64)
    grads, gin = denoiser.backward(m, z, torch.tensor([1, 2]), None, torch.zeros_like(z))
    assert all(not g.any() for g in grads.values())
    assert not gin.any()


def test_zero_guidance_channel_weights_get_no_gradient():
    """With an all-zero guidance track the input-conv weights reading it cannot affect the output."""
    cfg = DenoiserConfig(latent_channels=2, base_width=4, num_levels=2, time_embed_dim=4, guidance_enabled=True)
    m = denoiser.init_params(cfg, 0, dtype=torch.float64)
    z = torch.randn(1, 2, 7, dtype=torch.float64)
    grads, _ = denoiser.backward(m, z, 3, torch.zeros(7, dtype=torch.float64), torch.randn(1, 2, 7, dtype=torch.float64))
    assert not grads["inp.weight"][:, 2, :].any()
    assert grads["inp.weight"][:, :2, :].abs().sum() > 0


def test_backward_shape_check():
    m = denoiser.init_params(TINY_DENOISER, 0)
    with pytest.raises(ValueError):
        denoiser.backward(m, torch.zeros(2, 8), 1, None, torch.zeros(2, 9))


# -- checkpoints ----------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = DenoiserConfig(latent_channels=4, base_width=4, num_levels=2, time_embed_dim=8, guidance_enabled=True, dilations=(1, 3))
    m = denoiser.init_params(cfg, 3)
    denoiser.save_checkpoint(tmp_path / "c.vbck", m, {"data_scale": 2.5})
    m2, meta = denoiser.load_checkpoint(tmp_path / "c.vbck")
    assert meta == {"data_scale": 2.5}
    assert m2.config == cfg
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)
    denoiser.save_checkpoint(tmp_path / "d.vbck", m2, {"data_scale": 2.5})
    assert (tmp_path / "c.vbck").read_bytes() == (tmp_path / "d.vbck").read_bytes()


def test_corrupt_checkpoint(tmp_path):
    m = denoiser.init_params(TINY_DENOISER, 0)
    p = tmp_path / "c.vbck"
    denoiser.save_checkpoint(p, m)
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        denoiser.load_checkpoint(p)
    p.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError):
        denoiser.load_checkpoint(p)


def test_time_reaches_the_output():
    m = denoiser.init_params(DenoiserConfig(latent_channels=4, base_width=4, num_levels=2, time_embed_dim=8), 0)
    z = torch.randn(1, 4, 16)
    assert not torch.equal(denoiser.forward(m, z, 3), denoiser.forward(m, z, 150))


def test_forward_is_deterministic():
    m = denoiser.init_params(TINY_DENOISER, 0)
    z = torch.randn(3, 2, 10)
    t = torch.tensor([1, 5, 9])
    assert torch.equal(denoiser.forward(m, z, t), denoiser.forward(m, z, t))
