import numpy as np
import pytest

from gradcheck import (finite_difference_grads, random_problem, reference_forward,
                       relative_error)
from tsforget.forecaster import (CheckpointError, ModelConfig, backward, forward, init_params,
                                 load_checkpoint, loss_mse, param_hash, save_checkpoint,
                                 zeros_like)

SMALL = ModelConfig(context_len=16, horizon=4, patch_len=4, embed_dim=3, hidden_dim=7, n_blocks=2)


def test_config_requires_divisible_patch():
    with pytest.raises(ValueError, match="divide"):
        ModelConfig(context_len=10, patch_len=4)


def test_param_shapes_default():
    shapes = ModelConfig().param_shapes()
    assert shapes["embed_w"] == (32, 64)
    assert shapes["block0_w1"] == (512, 512)
    assert shapes["block1_w2"] == (512, 512)
    assert shapes["head_w"] == (512, 128)


def test_init_deterministic_and_bounded():
    a, b = init_params(SMALL), init_params(SMALL)
    assert param_hash(a) == param_hash(b)
    for name, v in a.items():
        if v.ndim == 1:
            assert np.all(v == 0), name
        else:
            bound = np.sqrt(6.0 / sum(v.shape))
            assert np.all(np.abs(v) <= bound), name
    other = init_params(ModelConfig(**{**SMALL.__dict__, "init_seed": 1}))
    assert param_hash(other) != param_hash(a)


def test_zero_params_give_zero_output():
    p = zeros_like(init_params(SMALL))
    np.testing.assert_array_equal(forward(p, np.random.default_rng(0).normal(size=16)), np.zeros(4))


def test_output_bias_passthrough():
    p = zeros_like(init_params(SMALL))
    p["head_b"] = np.full(4, 2.5)
    for seed in range(3):
        ctx = np.random.default_rng(seed).normal(size=16)
        np.testing.assert_array_equal(forward(p, ctx), np.full(4, 2.5))


def test_forward_is_pure_and_batch_consistent():
    p = init_params(SMALL)
    ctx = np.random.default_rng(1).normal(size=(5, 16))
    batch = forward(p, ctx)
    assert batch.shape == (5, 4)
    np.testing.assert_array_equal(batch, forward(p, ctx))
    for i in range(5):
        np.testing.assert_allclose(forward(p, ctx[i]), batch[i], rtol=0, atol=1e-14)


def test_forward_matches_loop_reference():
    rng = np.random.default_rng(2)
    _, p, ctx, _ = random_problem(rng, dict(n_blocks=2), batch=3)
    expected = np.array([reference_forward(p, c) for c in ctx], dtype=float)
    np.testing.assert_allclose(forward(p, ctx), expected, rtol=0, atol=1e-13)


def test_forward_rejects_non_finite():
    p = init_params(SMALL)
    ctx = np.zeros(16)
    ctx[3] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        forward(p, ctx)


def test_loss_mse_values():
    assert loss_mse([1.0, 3.0], [0.0, 1.0]) == 2.5
    assert loss_mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    with pytest.raises(ValueError):
        loss_mse([1.0], [1.0, 2.0])


def test_backward_zero_residual_has_zero_loss():
    p = zeros_like(init_params(SMALL))
    loss, grads = backward(p, np.ones(16), np.zeros(4))
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def test_backward_shape_mismatch():
    with pytest.raises(ValueError):
        backward(init_params(SMALL), np.ones(16), np.zeros(3))


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    _, p, ctx, tgt = random_problem(rng, dict(n_blocks=seed % 3), batch=1 + seed % 3)
    loss, grads = backward(p, ctx, tgt)
    fd = finite_difference_grads(p, ctx, tgt)
    assert set(grads) == set(p)
    for name in p:
        assert grads[name].shape == p[name].shape
        assert relative_error(grads[name], fd[name]).max() < 1e-6, name


def test_batch_gradient_is_mean_of_singles():
    rng = np.random.default_rng(3)
    p = init_params(SMALL)
    ctx, tgt = rng.normal(size=(4, 16)), rng.normal(size=(4, 4))
    loss, g = backward(p, ctx, tgt)
    singles = [backward(p, ctx[i], tgt[i]) for i in range(4)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]), rel=1e-14)
    for k in g:
        np.testing.assert_allclose(g[k], np.mean([s[1][k] for s in singles], axis=0),
                                   rtol=1e-12, atol=1e-15)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    p = {k: rng.normal(size=v.shape) for k, v in init_params(SMALL).items()}
    save_checkpoint(p, SMALL, tmp_path / "m.ckpt")
    q, cfg = load_checkpoint(tmp_path / "m.ckpt")
    assert cfg == SMALL
    assert list(q) == list(p)
    for k in p:
        assert q[k].tobytes() == p[k].tobytes()


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(SMALL), SMALL, path)
    data = path.read_bytes()
    for cut in (4, 20, len(data) - 8):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    p = init_params(SMALL)
    wider = ModelConfig(**{**SMALL.__dict__, "embed_dim": 4})
    with pytest.raises(CheckpointError, match="shape"):
        save_checkpoint(p, wider, tmp_path / "m.ckpt")


def test_checkpoint_manifest_width_mismatch(tmp_path):
    """A manifest whose tensors disagree with its own config is rejected on load."""
    import json
    import struct
    path = tmp_path / "m.ckpt"
    p = init_params(SMALL)
    save_checkpoint(p, SMALL, path)
    data = path.read_bytes()
    magic, mlen = struct.unpack_from("<8sQ", data)
    manifest = json.loads(data[16:16 + mlen])
    manifest["config"]["embed_dim"] = 4
    blob = json.dumps(manifest).encode()
    path.write_bytes(struct.pack("<8sQ", magic, len(blob)) + blob + data[16 + mlen:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\0" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
