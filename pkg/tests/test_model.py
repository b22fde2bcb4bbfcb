import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterinr.model import (
    INFERENCE_CHUNK,
    PositionalEncodingConfig,
    ResidualBlockParams,
    backward,
    forward,
    init_params,
    matched_shared_width,
    mse_and_grad,
    positional_encode,
    predict,
    residual_block_forward,
)
from clusterinr.numeric_core import ShapeError, sine_layer_forward, linear_forward
from oracles import closed_form_param_count, fd_gradients, ref_encode, ref_forward

PE1 = PositionalEncodingConfig(num_frequencies=1, include_raw_input=True, input_dim=1)


def _arch(p):
    return dict(n_vars=p.n_vars, n_freq=p.pe.num_frequencies, gfe=p.gfe_blocks, lfe=p.lfe_blocks,
                shared=p.shared_head, omega=p.omega_first, include_raw=p.pe.include_raw_input)


# ---------------------------------------------------------------- positional encoding


def test_pe_zero():
    assert positional_encode(np.array([[0.0]]), PE1).tolist() == [[0.0, 0.0, 1.0]]


def test_pe_quarter_period():
    out = positional_encode(np.array([[0.5]]), PE1)[0]
    assert out[0] == 0.5 and out[1] == pytest.approx(1.0) and out[2] == pytest.approx(0.0, abs=1e-15)


def test_pe_default_width_52():
    assert PositionalEncodingConfig().encoded_dim == 52
    assert positional_encode(np.zeros((3, 4))).shape == (3, 52)


@given(st.integers(0, 10), st.booleans(), st.integers(1, 5))
def test_pe_dimension_formula(L, raw, d):
    cfg = PositionalEncodingConfig(L, raw, d)
    assert positional_encode(np.zeros((2, d)), cfg).shape[1] == d * 2 * L + (d if raw else 0)


def test_pe_matches_scalar_oracle():
    x = np.random.default_rng(0).uniform(-1, 1, (7, 4))
    np.testing.assert_allclose(positional_encode(x), ref_encode(x, 6), rtol=0, atol=1e-12)


def test_pe_range_error_names_axis():
    x = np.zeros((2, 4))
    x[1, 2] = 1.01
    with pytest.raises(ValueError, match="'z'"):
        positional_encode(x)
    x[1, 2] = 1 + 5e-7  # inside tolerance
    positional_encode(x)


# ---------------------------------------------------------------- residual block


def _zero_block(w):
    z = np.zeros((w, w))
    return ResidualBlockParams(z, np.zeros(w), z.copy(), np.zeros(w))


def test_block_zero_fixed_point():
    out, _ = residual_block_forward(np.zeros((2, 3)), _zero_block(3))
    assert not out.any()


def test_block_dead_branch_halves_input():
    h = np.random.default_rng(1).normal(size=(4, 3))
    out, _ = residual_block_forward(h.copy(), _zero_block(3))
    np.testing.assert_array_equal(out, 0.5 * h)


def test_block_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    w = 5
    blk = ResidualBlockParams(rng.normal(size=(w, w)), rng.normal(size=w), rng.normal(size=(w, w)), rng.normal(size=w))
    h = rng.normal(size=(3, w))
    out, _ = residual_block_forward(h, blk)
    for r in range(3):
        a = [np.sin(sum(h[r, i] * blk.W1[i, k] for i in range(w)) + blk.b1[k]) for k in range(w)]
        for k in range(w):
            b = np.sin(sum(a[i] * blk.W2[i, k] for i in range(w)) + blk.b2[k])
            assert out[r, k] == pytest.approx(0.5 * (h[r, k] + b), abs=1e-6)


def test_block_does_not_mutate_input():
    h = np.ones((2, 3))
    residual_block_forward(h, _zero_block(3))
    assert (h == 1).all()


def test_block_width_mismatch():
    with pytest.raises(ShapeError):
        residual_block_forward(np.zeros((2, 4)), _zero_block(3))


# ---------------------------------------------------------------- forward


def test_forward_shape():
    p = init_params(8, 2, seed=0)
    y, _ = forward(p, np.zeros((3, 4), np.float32))
    assert y.shape == (3, 2)


def test_branch_isolation_forward():
    p = init_params(8, 2, seed=0)
    x = np.random.default_rng(0).uniform(-1, 1, (5, 4))
    y0, _ = forward(p, x)
    q = p.copy()
    for name in q.tensors:
        if name.startswith("lfe.1.") or name.startswith("head.1."):
            q.tensors[name] += 0.1
    y1, _ = forward(q, x)
    np.testing.assert_array_equal(y0[:, 0], y1[:, 0])
    assert (y0[:, 1] != y1[:, 1]).all()


def test_forward_single_point_matches_scalar_oracle_f32():
    p = init_params(16, 3, seed=4)
    x = np.random.default_rng(5).uniform(-1, 1, (1, 4)).astype(np.float32)
    y, _ = forward(p, x)
    ref = ref_forward({k: v.astype(np.float64) for k, v in p.tensors.items()}, x, **_arch(p))
    np.testing.assert_allclose(y, ref, rtol=0, atol=1e-5)


def test_shared_trunk_bit_identical_to_per_branch_recompute():
    p = init_params(8, 3, seed=1)
    x = np.random.default_rng(1).uniform(-1, 1, (6, 4)).astype(np.float32)
    y, _ = forward(p, x)
    t = p.tensors
    for j in range(3):
        h, _ = sine_layer_forward(positional_encode(x), t["proj.W"], t["proj.b"], 30.0)
        for i in range(p.gfe_blocks):
            h, _ = residual_block_forward(h, p.block(f"gfe.{i}"))
        for i in range(p.lfe_blocks):
            h, _ = residual_block_forward(h, p.block(f"lfe.{j}.{i}"))
        col, _ = linear_forward(h, t[f"head.{j}.W"], t[f"head.{j}.b"])
        assert col[:, 0].tobytes() == y[:, j].tobytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 3), st.integers(0, 3))
def test_any_width_is_well_typed(width, m, gfe, lfe):
    p = init_params(width, m, seed=0, gfe_blocks=gfe, lfe_blocks=lfe)
    y, cache = forward(p, np.zeros((2, 4), np.float32))
    assert y.shape == (2, m)
    g = backward(p, cache, np.ones_like(y))
    assert {k: v.shape for k, v in g.items()} == {k: v.shape for k, v in p.tensors.items()}


def test_predict_is_batch_independent():
    p = init_params(16, 2, seed=2)
    x = np.random.default_rng(3).uniform(-1, 1, (INFERENCE_CHUNK + 100, 4))
    full = predict(p, x)
    for i in (0, 17, INFERENCE_CHUNK + 50):
        assert predict(p, x[i:i + 1]).tobytes() == full[i:i + 1].tobytes()


# ---------------------------------------------------------------- backward


def test_perfect_prediction_zero_gradients():
    p = init_params(8, 2, seed=0, dtype=np.float64)
    x = np.random.default_rng(0).uniform(-1, 1, (4, 4))
    y, _ = forward(p, x)
    loss, g = mse_and_grad(p, x, y)
    assert loss == 0
    assert all(not v.any() for v in g.values())


def test_error_in_column0_leaves_branch1_untouched():
    p = init_params(8, 2, seed=0, dtype=np.float64)
    x = np.random.default_rng(0).uniform(-1, 1, (4, 4))
    y, cache = forward(p, x)
    err = np.zeros_like(y)
    err[:, 0] = 1.0
    g = backward(p, cache, err)
    for name, v in g.items():
        if name.startswith(("lfe.1.", "head.1.")):
            assert not v.any(), name
    assert np.abs(g["gfe.0.W1"]).sum() > 0
    assert np.abs(g["proj.W"]).sum() > 0


@pytest.mark.parametrize("shared", [False, True])
def test_tiny_network_matches_finite_differences(shared):
    p = init_params(8, 2, seed=11, dtype=np.float64, shared_head=shared)
    rng = np.random.default_rng(12)
    x = rng.uniform(-1, 1, (4, 4))
    target = rng.uniform(-1, 1, (4, 2))
    _, g = mse_and_grad(p, x, target)
    fd = fd_gradients(p.tensors, x, target, **_arch(p))
    for name in g:
        err = np.abs(fd[name] - g[name])
        rel = err / np.maximum(np.maximum(np.abs(fd[name]), np.abs(g[name])), 1e-300)
        assert ((err < 1e-10) | (rel < 1e-6)).all(), name


# ---------------------------------------------------------------- init


def test_init_same_seed_bit_identical():
    a, b = init_params(16, 2, seed=5), init_params(16, 2, seed=5)
    assert a.equal(b)
    assert not a.equal(init_params(16, 2, seed=6))


def test_init_first_layer_bound():
    p = init_params(64, 1, seed=0)
    W = p.tensors["proj.W"]
    assert W.shape[0] == 52
    assert np.abs(W).max() <= np.float32(1 / 52)
    assert not p.tensors["proj.b"].any()


def test_init_hidden_bound_and_zero_biases():
    p = init_params(32, 2, seed=0)
    bound = np.float32(np.sqrt(6 / 32))
    for name, v in p.tensors.items():
        if name.endswith(("W1", "W2")):
            assert np.abs(v).max() <= bound
        elif name != "proj.W" and not name.endswith(".W"):
            assert not v.any(), name


def test_parameter_count_closed_form():
    p = init_params(128, 11, seed=0)
    assert p.parameter_count == closed_form_param_count(52, 128, 11, 5, 6)
    # 52*128+128 + (5+66)*2*(128*128+128) + 11*129
    assert p.parameter_count == 6784 + 71 * 33024 + 1419


def test_matched_shared_width_is_close_in_budget():
    w = matched_shared_width(64, 2)
    branched = closed_form_param_count(52, 64, 2, 5, 6)
    shared = closed_form_param_count(52, w, 2, 5, 6, shared=True)
    assert w > 64
    assert abs(shared - branched) / branched < 0.02
