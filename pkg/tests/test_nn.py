"""Dense layers, point encoder, Adam, LR schedule, grad check, checkpoints."""

import numpy as np
import pytest

from sg3d.errors import CheckpointError, TrainingError
from sg3d.nn import (
    AdamSnapshot,
    AdamState,
    Checkpoint,
    MlpSpec,
    PointEncoderSpec,
    adam_step,
    grad_check,
    linear_lr,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    mlp_init,
    point_encoder_forward,
    point_encoder_forward_segments,
    point_encoder_init,
    save_checkpoint,
)
from sg3d.seeding import rng_for


def test_mlp_identity_layer_passes_through():
    spec = MlpSpec(3, (3,), ("identity",))
    params = {"l0.W": np.eye(3, dtype=np.float32), "l0.b": np.zeros(3, dtype=np.float32)}
    x = np.array([[1.5, -2.0, 0.25]], dtype=np.float32)
    out, _ = mlp_forward(spec, params, x)
    assert np.array_equal(out, x)


def test_mlp_zero_params_give_zero_output():
    spec = MlpSpec(4, (2,), ("identity",))
    params = {"l0.W": np.zeros((4, 2), dtype=np.float32), "l0.b": np.zeros(2, dtype=np.float32)}
    out, _ = mlp_forward(spec, params, np.ones((3, 4), dtype=np.float32))
    assert np.array_equal(out, np.zeros((3, 2)))


def test_mlp_relu_clips_negative_preactivations():
    spec = MlpSpec(2, (2,), ("relu",))
    params = {"l0.W": -np.eye(2, dtype=np.float32), "l0.b": np.zeros(2, dtype=np.float32)}
    out, _ = mlp_forward(spec, params, np.ones((1, 2), dtype=np.float32))
    assert np.array_equal(out, np.zeros((1, 2)))


def test_mlp_rejects_width_mismatch():
    spec = MlpSpec(3, (2,), ("relu",))
    params = mlp_init(spec, rng_for(0, "mlp"))
    with pytest.raises(ValueError, match="width"):
        mlp_forward(spec, params, np.ones((1, 4), dtype=np.float32))


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec(3, (), ())
    with pytest.raises(ValueError):
        MlpSpec(3, (2,), ("tanh",))
    with pytest.raises(ValueError):
        MlpSpec(3, (0,), ("relu",))


def test_point_encoder_is_permutation_invariant_bit_exact():
    spec = PointEncoderSpec(6, (8, 12))
    params = point_encoder_init(spec, rng_for(1, "enc"))
    rng = rng_for(2, "pts")
    for _ in range(100):
        pts = rng.normal(size=(17, 6)).astype(np.float32)
        perm = rng.permutation(17)
        a = point_encoder_forward(spec, params, pts)
        b = point_encoder_forward(spec, params, pts[perm])
        assert np.array_equal(a, b)


def test_point_encoder_is_duplicate_invariant_bit_exact():
    spec = PointEncoderSpec(6, (8, 12))
    params = point_encoder_init(spec, rng_for(1, "enc"))
    rng = rng_for(3, "pts")
    for _ in range(100):
        pts = rng.normal(size=(9, 6)).astype(np.float32)
        dup = np.concatenate([pts, pts[2:3].repeat(5, axis=0)], axis=0)
        assert np.array_equal(point_encoder_forward(spec, params, pts), point_encoder_forward(spec, params, dup))


def test_point_encoder_single_point_matches_straight_line_oracle():
    # independent scalar recomputation of the per-point MLP for N=1
    spec = PointEncoderSpec(4, (5, 3))
    params = point_encoder_init(spec, rng_for(7, "enc"), dtype=np.float64)
    point = rng_for(8, "pt").normal(size=(1, 4))

    h = point[0]
    for layer in range(2):
        W, b = params[f"l{layer}.W"], params[f"l{layer}.b"]
        z = np.array([sum(h[i] * W[i, j] for i in range(W.shape[0])) + b[j] for j in range(W.shape[1])])
        h = np.array([max(v, 0.0) for v in z])

    out = point_encoder_forward(spec, params, point)
    np.testing.assert_allclose(out, h, rtol=1e-12)


def test_point_encoder_rejects_empty_input():
    spec = PointEncoderSpec(6, (4,))
    params = point_encoder_init(spec, rng_for(1, "enc"))
    with pytest.raises(ValueError):
        point_encoder_forward(spec, params, np.zeros((0, 6), dtype=np.float32))


def test_point_encoder_segments_match_individual_calls():
    spec = PointEncoderSpec(3, (6,))
    params = point_encoder_init(spec, rng_for(4, "enc"))
    rng = rng_for(5, "pts")
    sets = [rng.normal(size=(n, 3)).astype(np.float32) for n in (4, 9, 1)]
    starts = np.array([0, 4, 13])
    feats, _ = point_encoder_forward_segments(spec, params, np.concatenate(sets), starts)
    for i, pts in enumerate(sets):
        assert np.array_equal(feats[i], point_encoder_forward(spec, params, pts))


def test_adam_zero_gradient_leaves_params_unchanged():
    params = {"w": np.array([1.0, -2.0], dtype=np.float32)}
    state = AdamState(base_lr=0.1)
    adam_step(state, params, {"w": np.zeros(2, dtype=np.float32)})
    assert np.array_equal(params["w"], np.array([1.0, -2.0], dtype=np.float32))
    assert state.step == 1


def test_adam_single_step_matches_hand_computation():
    # g=1, lr=0.1: m_hat=1, v_hat=1 -> delta = -0.1 / (1 + 1e-8)
    params = {"w": np.array([0.0], dtype=np.float64)}
    state = AdamState(base_lr=0.1)
    adam_step(state, params, {"w": np.array([1.0], dtype=np.float64)})
    np.testing.assert_allclose(params["w"], [-0.1 / (1 + 1e-8)], rtol=1e-12)
    np.testing.assert_allclose(params["w"], [-0.09999999], atol=1e-8)


def test_adam_zero_lr_leaves_params_unchanged():
    params = {"w": np.array([3.0], dtype=np.float32)}
    state = AdamState(base_lr=0.0)
    adam_step(state, params, {"w": np.array([5.0], dtype=np.float32)})
    assert params["w"][0] == 3.0


def test_adam_rejects_non_finite_gradient():
    params = {"w": np.array([0.0], dtype=np.float32)}
    with pytest.raises(TrainingError, match="'w'"):
        adam_step(AdamState(base_lr=0.1), params, {"w": np.array([np.nan], dtype=np.float32)})


def test_adam_rejects_shape_mismatch():
    params = {"w": np.zeros(2, dtype=np.float32)}
    with pytest.raises(ValueError, match="shape"):
        adam_step(AdamState(base_lr=0.1), params, {"w": np.zeros(3, dtype=np.float32)})


def test_linear_lr_schedule():
    assert linear_lr(0, 50, 1e-3) == 1e-3
    assert linear_lr(25, 50, 1e-3) == pytest.approx(5e-4)
    assert linear_lr(50, 50, 1e-3) == 0.0
    with pytest.raises(ValueError):
        linear_lr(0, 0, 1e-3)
    with pytest.raises(ValueError):
        linear_lr(7, 5, 1e-3)


def test_grad_check_quadratic():
    def fn(params):
        w = params["w"][0]
        return w * w, {"w": np.array([2 * w])}

    err = grad_check(fn, {"w": np.array([3.0])})
    assert err < 1e-8


def test_grad_check_flags_wrong_gradient():
    def fn(params):
        w = params["w"][0]
        return w * w, {"w": np.array([2 * w + 0.5])}

    assert grad_check(fn, {"w": np.array([3.0])}) > 1e-2


def test_grad_check_mlp_with_batchnorm():
    spec = MlpSpec(3, (4, 2), ("relu", "identity"), (True, False))
    params = mlp_init(spec, rng_for(11, "mlp"))
    x = rng_for(12, "x").normal(size=(5, 3))
    target = rng_for(13, "t").normal(size=(5, 2))

    def fn(p):
        out, cache = mlp_forward(spec, p, x.astype(p["l0.W"].dtype), train=True, update_running=False)
        diff = out - target
        loss = float(0.5 * np.sum(diff * diff))
        _, grads = mlp_backward(spec, p, cache, diff)
        return loss, grads

    assert grad_check(fn, params) < 1e-6


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = rng_for(20, "ck")
    params = {
        "a.W": rng.normal(size=(3, 4)).astype(np.float32),
        "a.b": rng.normal(size=4).astype(np.float32),
        "scalar": rng.normal(size=()).astype(np.float32),
    }
    state = AdamState(base_lr=1e-3)
    adam_step(state, params, {k: rng.normal(size=v.shape).astype(np.float32) for k, v in params.items()})
    ckpt = Checkpoint("phase|arch=x", params, AdamSnapshot.of(state))
    path = tmp_path / "c.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.fingerprint == ckpt.fingerprint
    assert set(loaded.params) == set(params)
    for k in params:
        assert np.array_equal(loaded.params[k], params[k])
        assert np.array_equal(loaded.optimizer.m[k], state.m[k])
        assert np.array_equal(loaded.optimizer.v[k], state.v[k])
    assert loaded.optimizer.step == 1
    # saving the loaded checkpoint reproduces the file byte for byte
    path2 = tmp_path / "c2.ckpt"
    save_checkpoint(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_wrong_version(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(Checkpoint("fp", {"w": np.zeros(2, dtype=np.float32)}), path)
    data = bytearray(path.read_bytes())
    data[8] = 99
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_rejects_wrong_fingerprint(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(Checkpoint("finetune|obj=4", {"w": np.zeros(2, dtype=np.float32)}), path)
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(path, expect_fingerprint="pretrain|D=8")


def test_checkpoint_rejects_truncation(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(Checkpoint("fp", {"w": np.zeros(8, dtype=np.float32)}), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
