"""Tests for the temporal-adapter block: forward identities, locality,
DropPath behaviour, and gradient agreement with finite differences."""

import numpy as np
import pytest

from memseg.adapter import (
    AdapterParams,
    adapter_forward,
    adapter_params,
    block_backward,
    block_forward,
    block_param_arrays,
    block_params,
    grad_check,
)
from memseg.kernels import (
    ACTIVATIONS,
    ShapeError,
    conv3d,
    layer_norm,
    multi_head_attention,
)


def tiny_block(seed=0, channels=4, bottleneck=2, heads=2, drop=0.0):
    return block_params(
        np.random.default_rng(seed),
        channels,
        bottleneck=bottleneck,
        num_heads=heads,
        drop_path_rate=drop,
    )


# ---------------------------------------------------------------------------
# adapter forward


def test_adapter_zero_up_projection_is_identity():
    rng = np.random.default_rng(1)
    p = adapter_params(rng, 4, 2)
    p.w_up[:] = 0.0
    x = rng.normal(size=(2, 3, 3, 4))
    assert np.array_equal(adapter_forward(x, p), x)


def test_adapter_single_frame_equals_center_tap():
    rng = np.random.default_rng(2)
    p3 = adapter_params(rng, 4, 2, kd=3)
    p1 = AdapterParams(
        ln_gamma=p3.ln_gamma,
        ln_beta=p3.ln_beta,
        w_down=p3.w_down,
        conv_kernel=p3.conv_kernel[1:2].copy(),
        w_up=p3.w_up,
        activation=p3.activation,
    )
    x = rng.normal(size=(1, 3, 3, 4))
    assert np.allclose(adapter_forward(x, p3), adapter_forward(x, p1), atol=1e-14)


def test_adapter_composition_oracle():
    rng = np.random.default_rng(3)
    p = adapter_params(rng, 6, 3)
    x = rng.normal(size=(4, 2, 2, 6))
    act, _ = ACTIVATIONS[p.activation]
    expected = x + act(
        conv3d(layer_norm(x, p.ln_gamma, p.ln_beta) @ p.w_down, p.conv_kernel)
    ) @ p.w_up
    assert np.allclose(adapter_forward(x, p), expected, atol=1e-14)


def test_adapter_temporal_locality():
    rng = np.random.default_rng(4)
    p = adapter_params(rng, 4, 2, kd=3)
    x = rng.normal(size=(6, 2, 2, 4))
    base = adapter_forward(x, p)
    bumped = x.copy()
    bumped[3] += rng.normal(size=(2, 2, 4))
    diff = np.abs(adapter_forward(bumped, p) - base).max(axis=(1, 2, 3))
    assert diff[3] > 0
    for b in (0, 1, 5):
        assert diff[b] <= 1e-12


def test_adapter_rejects_wide_bottleneck():
    rng = np.random.default_rng(5)
    with pytest.raises(ValueError):
        AdapterParams(
            ln_gamma=np.ones(4),
            ln_beta=np.zeros(4),
            w_down=rng.normal(size=(4, 4)),
            conv_kernel=rng.normal(size=(3, 1, 1, 4, 4)),
            w_up=rng.normal(size=(4, 4)),
        )


def test_adapter_rejects_even_kernel():
    rng = np.random.default_rng(6)
    with pytest.raises(ShapeError):
        AdapterParams(
            ln_gamma=np.ones(4),
            ln_beta=np.zeros(4),
            w_down=rng.normal(size=(4, 2)),
            conv_kernel=rng.normal(size=(2, 1, 1, 2, 2)),
            w_up=rng.normal(size=(2, 4)),
        )


def test_adapter_channel_mismatch():
    rng = np.random.default_rng(7)
    p = adapter_params(rng, 4, 2)
    with pytest.raises(ShapeError):
        adapter_forward(rng.normal(size=(2, 3, 3, 5)), p)


# ---------------------------------------------------------------------------
# block forward


def test_block_residual_floor_identity():
    p = tiny_block(8)
    p.attn.w_o[:] = 0.0
    p.adapter.w_up[:] = 0.0
    p.mlp.w2[:] = 0.0
    p.mlp.b2[:] = 0.0
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 2, 2, 4))
    assert np.array_equal(block_forward(x, p), x)


def test_block_drop_path_two_outcomes():
    p = tiny_block(10, drop=0.5)
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 2, 2, 4))
    eval_out = block_forward(x, p)
    p0 = tiny_block(10, drop=0.0)
    seen = set()
    for seed in range(20):
        out = block_forward(x, p, mode="train", rng_seed=seed)
        again = block_forward(x, p, mode="train", rng_seed=seed)
        assert np.array_equal(out, again)  # deterministic per seed
        zero_branch = block_forward(x, _zero_branch(p0), mode="eval")
        if np.allclose(out, zero_branch, atol=1e-12):
            seen.add("dropped")
        else:
            seen.add("kept")
    assert seen == {"dropped", "kept"}
    assert eval_out.shape == x.shape


def _zero_branch(p):
    # zero attention output kills x_attn, zero up-projection kills the
    # bottleneck, so the whole DropPath branch is exactly zero
    q = tiny_block(10, drop=0.0)
    for name, arr in block_param_arrays(p).items():
        block_param_arrays(q)[name][:] = arr
    q.attn.w_o[:] = 0.0
    q.adapter.w_up[:] = 0.0
    return q


def test_block_drop_path_dropped_equals_mlp_only():
    p = tiny_block(12, drop=0.9)
    rng = np.random.default_rng(13)
    x = rng.normal(size=(2, 2, 2, 4))
    # find a seed whose draw drops the branch
    dropped = None
    for seed in range(50):
        u = np.random.default_rng(seed).uniform()
        if u < p.drop_path_rate:
            dropped = seed
            break
    assert dropped is not None
    out = block_forward(x, p, mode="train", rng_seed=dropped)
    act, _ = ACTIVATIONS[p.mlp.activation]
    h2 = layer_norm(x, p.ln2_gamma, p.ln2_beta)
    expected = x + act(h2 @ p.mlp.w1 + p.mlp.b1) @ p.mlp.w2 + p.mlp.b2
    assert np.allclose(out, expected, atol=1e-14)


def test_block_drop_path_kept_rescales():
    p = tiny_block(14, drop=0.5)
    rng = np.random.default_rng(15)
    x = rng.normal(size=(2, 2, 2, 4))
    kept = None
    for seed in range(50):
        if np.random.default_rng(seed).uniform() >= 0.5:
            kept = seed
            break
    out = block_forward(x, p, mode="train", rng_seed=kept)
    # survivor branch is doubled at rate 0.5
    branch = adapter_forward(
        _attn_of(x, p), p.adapter
    )
    h2 = layer_norm(x + 2.0 * branch, p.ln2_gamma, p.ln2_beta)
    act, _ = ACTIVATIONS[p.mlp.activation]
    expected = (x + 2.0 * branch) + act(h2 @ p.mlp.w1 + p.mlp.b1) @ p.mlp.w2 + p.mlp.b2
    assert np.allclose(out, expected, atol=1e-12)


def _attn_of(x, p):
    b, hh, ww, c = x.shape
    tokens = layer_norm(x, p.ln1_gamma, p.ln1_beta).reshape(b, hh * ww, c)
    return multi_head_attention(tokens, tokens, tokens, p.attn).reshape(x.shape)


def test_block_train_requires_seed():
    p = tiny_block(16, drop=0.5)
    with pytest.raises(ValueError):
        block_forward(np.zeros((1, 2, 2, 4)), p, mode="train")


def test_block_rejects_rate_one():
    with pytest.raises(ValueError):
        tiny_block(17, drop=1.0)


def test_block_straight_line_composition_oracle():
    p = tiny_block(18)
    rng = np.random.default_rng(19)
    x = rng.normal(size=(2, 2, 2, 4))
    # independent straight-line recomputation, attention per frame
    h1 = layer_norm(x, p.ln1_gamma, p.ln1_beta)
    x_attn = np.stack(
        [
            multi_head_attention(
                h1[b].reshape(-1, 4), h1[b].reshape(-1, 4), h1[b].reshape(-1, 4), p.attn
            ).reshape(2, 2, 4)
            for b in range(2)
        ]
    )
    act, _ = ACTIVATIONS[p.adapter.activation]
    ha = layer_norm(x_attn, p.adapter.ln_gamma, p.adapter.ln_beta)
    branch = x_attn + act(conv3d(ha @ p.adapter.w_down, p.adapter.conv_kernel)) @ p.adapter.w_up
    x_out = x + branch
    h2 = layer_norm(x_out, p.ln2_gamma, p.ln2_beta)
    actm, _ = ACTIVATIONS[p.mlp.activation]
    expected = x_out + actm(h2 @ p.mlp.w1 + p.mlp.b1) @ p.mlp.w2 + p.mlp.b2
    assert np.allclose(block_forward(x, p), expected, atol=1e-13)


def test_block_eval_deterministic():
    p = tiny_block(20)
    rng = np.random.default_rng(21)
    x = rng.normal(size=(3, 2, 2, 4))
    assert np.array_equal(block_forward(x, p), block_forward(x, p))


# ---------------------------------------------------------------------------
# backward


def test_backward_zero_upstream_gives_zero_grads():
    p = tiny_block(22)
    rng = np.random.default_rng(23)
    x = rng.normal(size=(2, 2, 2, 4))
    grads = block_backward(x, p, np.zeros_like(x))
    for name, g in grads.items():
        assert np.array_equal(g, np.zeros_like(g)), name


def test_backward_residual_contribution_near_identity():
    # with sum-loss and all branch outputs zeroed, d loss / dx is exactly 1
    p = tiny_block(24)
    p.attn.w_o[:] = 0.0
    p.adapter.w_up[:] = 0.0
    p.mlp.w2[:] = 0.0
    p.mlp.b2[:] = 0.0
    rng = np.random.default_rng(25)
    x = rng.normal(size=(2, 2, 2, 4))
    grads = block_backward(x, p, np.ones_like(x))
    assert np.allclose(grads["x"], 1.0, atol=1e-12)


def test_backward_matches_finite_differences_small():
    p = tiny_block(26)
    rng = np.random.default_rng(27)
    x = rng.normal(size=(2, 2, 2, 4))
    report = grad_check(p, x, h=1e-6, tol=1e-5)
    assert report.passed, [(r.name, r.max_rel_err) for r in report.rows if not r.passed]


def test_backward_matches_finite_differences_larger_shape():
    rng = np.random.default_rng(28)
    p = block_params(rng, 8, bottleneck=4, num_heads=2)
    x = rng.normal(size=(3, 4, 4, 8))
    report = grad_check(p, x, h=1e-6, tol=1e-5)
    assert report.passed
    assert report.max_rel_err <= 1e-5


def test_grad_check_flags_mutated_w_up_only():
    p = tiny_block(29)
    rng = np.random.default_rng(30)
    x = rng.normal(size=(2, 2, 2, 4))
    report = grad_check(p, x, h=1e-6, tol=1e-5, mutate="adapter.w_up")
    assert not report.passed
    assert report.failing() == ["adapter.w_up"]


def test_grad_check_zero_instance_trivially_passes():
    p = tiny_block(31)
    for arr in block_param_arrays(p).values():
        arr[:] = 0.0
    # zero params keep LN affines at zero too: output reduces to residuals
    report = grad_check(p, np.zeros((1, 2, 2, 4)), h=1e-6, tol=1e-5)
    assert report.passed


def test_fd_reference_forward_matches_production():
    # the extended-precision reference used by grad_check must track the
    # production forward to float64 round-off
    from memseg.adapter import _forward_reference

    rng = np.random.default_rng(33)
    for seed in range(5):
        p = block_params(np.random.default_rng(seed), 8, bottleneck=4, num_heads=2)
        x = rng.normal(size=(2, 3, 3, 8))
        prod = block_forward(x, p)
        ref = np.asarray(_forward_reference(x, p), dtype=np.float64)
        assert np.abs(prod - ref).max() < 1e-13


def test_grad_check_validates_args():
    p = tiny_block(32)
    with pytest.raises(ValueError):
        grad_check(p, np.zeros((1, 2, 2, 4)), h=0.0)
    with pytest.raises(ValueError):
        grad_check(p, np.zeros((1, 2, 2, 4)), tol=-1.0)
    with pytest.raises(ValueError):
        grad_check(p, np.zeros((1, 2, 2, 4)), mutate="nope")
