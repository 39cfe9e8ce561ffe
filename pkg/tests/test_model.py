from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from smdim.diffusion import AbsorbingKernel, make_schedule
from smdim.model import (ModelConfig, attention, ffn, init_parameters, mamba_layer, mfa_block,
                         parameter_count, selective_ssm, smdim_forward, sub)
from smdim.tensor import Tensor

from oracles import model_grad_error, naive_ssm, perturbed


def ssm_params(rng, D, N, A=None):
    p = {
        "sa_w": Tensor(rng.standard_normal((D, D)) * 0.3),
        "sa_b": Tensor(rng.standard_normal(D) * 0.3),
        "sb_w": Tensor(rng.standard_normal((D, N)) * 0.5),
        "sc_w": Tensor(rng.standard_normal((D, N)) * 0.5),
        "A_log": Tensor(np.log(rng.uniform(0.5, 4.0, (D, N)))),
    }
    if A is not None:
        p["A"] = Tensor(np.asarray(A, dtype=float))
    return p


def softplus(x):
    return np.log1p(np.exp(x))


def layer_norm_ref(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + eps)


# selective SSM ----------------------------------------------------------

def test_scan_matches_naive_reference_shape(rng):
    x = Tensor(rng.standard_normal((64, 8)))
    p = ssm_params(rng, 8, 4)
    a = selective_ssm(x, p, "scan").data
    b = selective_ssm(x, p, "naive").data
    assert np.abs(a - b).max() / np.abs(b).max() < 1e-10


def test_scan_matches_naive_batched(rng):
    x = Tensor(rng.standard_normal((3, 10, 4)))
    p = ssm_params(rng, 4, 3)
    a = selective_ssm(x, p, "scan").data
    b = selective_ssm(x, p, "naive").data
    assert np.abs(a - b).max() / np.abs(b).max() < 1e-10


def test_scan_matches_loop_oracle(rng):
    x = rng.standard_normal((12, 5))
    p = ssm_params(rng, 5, 3)
    A = -np.exp(p["A_log"].data)
    expect = naive_ssm(x, p["sa_w"].data, p["sa_b"].data, p["sb_w"].data, p["sc_w"].data, A)
    got = selective_ssm(Tensor(x), p, "scan").data
    assert np.abs(got - expect).max() / np.abs(expect).max() < 1e-10


def test_ssm_single_step_by_hand(rng):
    D, N = 3, 2
    x = rng.standard_normal((1, D))
    p = ssm_params(rng, D, N)
    p.pop("A_log")
    A = -rng.uniform(0.5, 2.0, (D, N))
    p["A"] = Tensor(A)
    delta = softplus(x @ p["sa_w"].data + p["sa_b"].data)[0]
    B, C = (x @ p["sb_w"].data)[0], (x @ p["sc_w"].data)[0]
    z = delta[:, None] * A
    bbar = (np.exp(z) - 1) / z * delta[:, None] * B[None, :]
    expect = (bbar * x[0][:, None] * C[None, :]).sum(-1)
    for mode in ("scan", "naive"):
        assert np.abs(selective_ssm(Tensor(x), p, mode).data[0] - expect).max() < 1e-12


def test_ssm_zero_A_limit_accumulates(rng):
    D, N, L = 2, 3, 3
    x = rng.standard_normal((L, D))
    p = ssm_params(rng, D, N, A=np.zeros((D, N)))
    delta = softplus(x @ p["sa_w"].data + p["sa_b"].data)
    B, C = x @ p["sb_w"].data, x @ p["sc_w"].data
    h = np.zeros((D, N))
    expect = []
    for t in range(L):
        # A = 0: Abar = I and Bbar = delta * B
        h = h + delta[t][:, None] * B[t][None, :] * x[t][:, None]
        expect.append((h * C[t]).sum(-1))
    for mode in ("scan", "naive"):
        got = selective_ssm(Tensor(x), p, mode).data
        assert np.abs(got - np.array(expect)).max() < 1e-12


def test_ssm_rejects_unstable_A(rng):
    p = ssm_params(rng, 2, 2, A=np.full((2, 2), 800.0))
    with pytest.raises(FloatingPointError):
        selective_ssm(Tensor(np.ones((3, 2))), p)


# layers -----------------------------------------------------------------

@pytest.fixture
def desk_params():
    return init_parameters(ModelConfig(), seed=0)


def test_mamba_layer_zero_out_projection_is_layer_norm(rng, desk_params):
    p = sub(desk_params, "blocks.0.mamba.0.")
    x = Tensor(rng.standard_normal((16, 32)))
    y = mamba_layer(x, p)
    assert y.shape == x.shape
    assert np.abs(y.data - layer_norm_ref(x.data)).max() < 1e-12


def test_mamba_layer_zero_gate_is_layer_norm(rng, desk_params):
    p = perturbed(sub(desk_params, "blocks.0.mamba.0."), rng)
    p["out_b"] = Tensor(np.zeros(32))
    p["ln_g"], p["ln_b"] = Tensor(np.ones(32)), Tensor(np.zeros(32))
    x = Tensor(rng.standard_normal((16, 32)))
    y = mamba_layer(x, p, gate_override=Tensor(np.zeros((16, 32))))
    assert np.abs(y.data - layer_norm_ref(x.data)).max() < 1e-12
    assert np.abs(mamba_layer(x, p).data - y.data).max() > 1e-3


def test_ffn_contract(rng, desk_params):
    p = sub(desk_params, "blocks.0.ffn.")
    assert p["w1"].shape == (32, 128)
    x = Tensor(rng.standard_normal((16, 32)))
    assert ffn(x, p).shape == x.shape
    p = dict(p, w2=Tensor(np.zeros((128, 32))))
    assert np.abs(ffn(x, p).data - layer_norm_ref(x.data)).max() < 1e-12


def test_attention_weights_and_single_token(rng, desk_params):
    p = sub(desk_params, "blocks.0.attn.")
    x = Tensor(rng.standard_normal((2, 7, 32)))
    y, w = attention(x, p, heads=4, return_weights=True)
    assert y.shape == x.shape and w.shape == (2, 4, 7, 7)
    assert np.abs(w.data.sum(-1) - 1).max() < 1e-12
    one = rng.standard_normal((1, 32))
    pre = one @ p["wv"].data @ p["wo"].data
    y1 = attention(Tensor(one), p, heads=4).data
    assert np.abs(y1 - layer_norm_ref(one + pre)).max() < 1e-12


def test_attention_permutation_equivariant(rng, desk_params):
    p = sub(desk_params, "blocks.1.attn.")
    x = rng.standard_normal((9, 32))
    perm = rng.permutation(9)
    a = attention(Tensor(x), p, 4).data
    b = attention(Tensor(x[perm]), p, 4).data
    assert np.abs(a[perm] - b).max() < 1e-12


def test_attention_is_bidirectional(rng, desk_params):
    p = sub(desk_params, "blocks.0.attn.")
    x = rng.standard_normal((6, 32))
    a = attention(Tensor(x), p, 4).data
    x2 = x.copy()
    x2[-1] += 1.0
    b = attention(Tensor(x2), p, 4).data
    assert np.abs(a[0] - b[0]).max() > 1e-6  # first row sees the last token


# blocks and full model --------------------------------------------------

@pytest.mark.parametrize("order", ["MFA", "AFM", "mamba_only", "attention_only"])
def test_block_orders_preserve_shape(rng, order):
    cfg = ModelConfig(block_order=order)
    p = init_parameters(cfg, 0)
    probe = Counter()
    x = Tensor(rng.standard_normal((16, 32)))
    y = mfa_block(x, sub(p, "blocks.0."), cfg, probe=probe)
    assert y.shape == x.shape
    if order == "mamba_only":
        assert probe["attention"] == 0 and probe["mamba"] == 2
    if order == "attention_only":
        assert probe["mamba"] == 0 and probe["attention"] == 1


def test_mfa_and_afm_differ(rng):
    cfg = ModelConfig()
    p = perturbed(init_parameters(cfg, 0), rng)
    x = Tensor(rng.standard_normal((16, 32)))
    a = mfa_block(x, sub(p, "blocks.0."), cfg, order="MFA").data
    b = mfa_block(x, sub(p, "blocks.0."), cfg, order="AFM").data
    assert np.abs(a - b).max() > 1e-3
    with pytest.raises(ValueError):
        mfa_block(x, sub(p, "blocks.0."), cfg, order="FMA")


def test_forward_shape_and_time_conditioning(rng):
    cfg = ModelConfig()
    assert cfg.inner_length == 16
    p = init_parameters(cfg, 0)
    tokens = rng.integers(0, 275, size=64)
    a = smdim_forward(tokens, 1, p, cfg)
    b = smdim_forward(tokens, cfg.T, p, cfg)
    assert a.shape == (64, 274)
    assert np.abs(a.data - b.data).max() > 1e-6
    batch = smdim_forward(np.stack([tokens, tokens]), np.array([1, cfg.T]), p, cfg).data
    assert np.abs(batch[0] - a.data).max() < 1e-12 and np.abs(batch[1] - b.data).max() < 1e-12


def test_forward_errors(rng):
    cfg = ModelConfig()
    p = init_parameters(cfg, 0)
    with pytest.raises(ValueError):
        smdim_forward(np.full(64, 275), 1, p, cfg)
    with pytest.raises(ValueError):
        smdim_forward(np.zeros(64, int), 0, p, cfg)
    with pytest.raises(ValueError):
        smdim_forward(np.zeros(60, int), 1, p, cfg)


def test_forward_scan_and_naive_agree(rng, tiny_config):
    p = perturbed(init_parameters(tiny_config, 3), rng)
    tokens = rng.integers(0, tiny_config.vocab_size, size=(2, tiny_config.L_in))
    a = smdim_forward(tokens, 3, p, tiny_config, mode="scan").data
    b = smdim_forward(tokens, 3, p, tiny_config, mode="naive").data
    assert np.abs(a - b).max() / np.abs(b).max() < 1e-10


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(D=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(L_in=62)
    with pytest.raises(ValueError):
        ModelConfig(block_order="FMA")


# parameters -------------------------------------------------------------

def test_init_is_deterministic():
    cfg = ModelConfig()
    a, b = init_parameters(cfg, 5), init_parameters(cfg, 5)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    c = init_parameters(cfg, 6)
    assert not np.array_equal(a["embed"].data, c["embed"].data)


def test_init_discretised_A_in_unit_interval(rng):
    p = init_parameters(ModelConfig(), 0)
    A = -np.exp(p["blocks.0.mamba.0.A_log"].data)
    np.testing.assert_allclose(A, np.tile(-np.arange(1.0, 9.0), (32, 1)), rtol=1e-14)
    delta = rng.uniform(1e-4, 5.0, (100, 32, 1))
    abar = np.exp(delta * A)
    assert np.all((abar > 0) & (abar < 1))
    assert np.all(p["blocks.0.mamba.0.out_w"].data == 0)


def hand_count(cfg):
    V, E, D, N, s, k = cfg.vocab_size, cfg.D_emb, cfg.D, cfg.N, cfg.stride, cfg.conv_kernel
    H = 4 * D
    mamba = (D * D + D) * 2 + k * D + D + D * D + D + 2 * D * N + D * N + D + D * D + D + 2 * D
    ffn_ = D * H + H + H * D + D + 2 * D
    attn = 4 * D * D + 2 * D
    outer = V * E + E * E + E + s * E * D + D + s * D * E + E + E * (V - 1) + (V - 1)
    return outer + cfg.n_blocks * (cfg.mamba_layers_per_block * mamba + ffn_ + attn)


def test_parameter_count_desk_config():
    cfg = ModelConfig()
    p = init_parameters(cfg, 0)
    total = sum(v.size for v in p.values())
    assert total == parameter_count(cfg) == hand_count(cfg) == 73298


@pytest.mark.parametrize("order", ["MFA", "AFM", "mamba_only", "attention_only"])
def test_parameter_count_formula_all_orders(order):
    cfg = ModelConfig(block_order=order, n_blocks=3, mamba_layers_per_block=1, N=5)
    assert sum(v.size for v in init_parameters(cfg, 0).values()) == parameter_count(cfg)


# gradients --------------------------------------------------------------

def test_full_model_gradient_check(tiny_config):
    rng = np.random.default_rng(11)
    cfg = tiny_config
    params = perturbed(init_parameters(cfg, 0), rng)
    kernel = AbsorbingKernel(cfg.vocab_size - 1, make_schedule(cfg.T))
    err = model_grad_error(cfg, params, kernel, rng, 30)
    assert err < 1e-4


def test_attention_only_macs_quadratic_mamba_only_linear():
    from smdim.bench import loglog_slope, measured_macs
    Ls = [64, 128, 256, 512]
    lin = [measured_macs(ModelConfig(block_order="mamba_only"), L).total for L in Ls]
    quad = [measured_macs(ModelConfig(block_order="attention_only"), L).stages("attention")
            for L in Ls]
    s1, r1 = loglog_slope(Ls, lin)
    s2, r2 = loglog_slope(Ls, quad)
    assert abs(s1 - 1) < 0.05 and r1 > 0.99
    assert abs(s2 - 2) < 0.1 and r2 > 0.99


def test_every_stage_preserves_length(rng):
    cfg = replace(ModelConfig(), L_in=32)
    p = init_parameters(cfg, 0)
    out = smdim_forward(rng.integers(0, 275, 32), 4, p, cfg)
    assert out.shape[0] == 32
