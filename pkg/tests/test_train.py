import math

import numpy as np
import pytest

from simat.errors import ArgumentError, ConfigError, FormatError, TrainingError
from simat.evaluation import recall_at_k
from simat.train import (
    AdaptationHead,
    TrainConfig,
    apply_head,
    grad_check,
    infonce_grad,
    infonce_loss,
    init_head,
    load_head,
    normalize_rows,
    normalize_rows_backward,
    save_head,
    train_heads,
)

from conftest import unit_rows


def test_loss_single_pair_is_zero():
    one = np.array([[1.0, 0.0]])
    assert infonce_loss(one, one, 0.5) == 0.0


def test_loss_hand_value_identity_batch():
    eye = np.eye(2)
    expected = math.log(1.0 + math.exp(-1.0))  # -log(e/(e+1))
    assert abs(infonce_loss(eye, eye, 1.0) - expected) < 1e-9


def test_loss_low_temperature_limit():
    eye = np.eye(4)
    assert infonce_loss(eye, eye, 0.01) < 1e-12  # hardmax on the diagonal


def test_loss_symmetry():
    i_emb, t_emb = unit_rows(6, 5, seed=0), unit_rows(6, 5, seed=1)
    assert infonce_loss(i_emb, t_emb, 0.3) == infonce_loss(t_emb, i_emb, 0.3)


def test_loss_permutation_equivariance():
    i_emb, t_emb = unit_rows(7, 5, seed=2), unit_rows(7, 5, seed=3)
    perm = np.random.default_rng(4).permutation(7)
    a = infonce_loss(i_emb, t_emb, 0.2)
    b = infonce_loss(i_emb[perm], t_emb[perm], 0.2)
    assert abs(a - b) < 1e-12


def test_loss_positive_for_random_batches():
    for seed in range(5):
        i_emb, t_emb = unit_rows(8, 6, seed=seed), unit_rows(8, 6, seed=seed + 50)
        assert infonce_loss(i_emb, t_emb, 0.1) > 0.0


def test_loss_finite_down_to_tau_001():
    i_emb, t_emb = unit_rows(16, 8, seed=5), unit_rows(16, 8, seed=6)
    for tau in (1.0, 0.1, 0.01):
        assert np.isfinite(infonce_loss(i_emb, t_emb, tau))


def test_loss_rejects_unnormalized_rows():
    bad = np.ones((2, 3))
    with pytest.raises(ArgumentError):
        infonce_loss(bad, unit_rows(2, 3), 0.5)


def test_loss_rejects_bad_temperature():
    u = unit_rows(2, 3)
    with pytest.raises(ConfigError):
        infonce_loss(u, u, 0.0)


def pack_loss(n, d, tau, form="infonce"):
    size = n * d

    def loss_fn(params):
        i_emb = params[:size].reshape(n, d)
        t_emb = params[size:].reshape(n, d)
        loss, gi, gt = infonce_grad(i_emb, t_emb, tau, form)
        return loss, np.concatenate([gi.ravel(), gt.ravel()])

    return loss_fn


def test_grad_matches_finite_differences_on_random_batches():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(20):
        i_emb = unit_rows(8, 16, seed=int(rng.integers(1 << 30)))
        t_emb = unit_rows(8, 16, seed=int(rng.integers(1 << 30)))
        params = np.concatenate([i_emb.ravel(), t_emb.ravel()])
        worst = max(worst, grad_check(pack_loss(8, 16, 0.1), params, 1e-5))
    assert worst < 1e-6


def test_grad_matches_fd_at_aligned_fixed_point():
    eye = np.eye(4)
    params = np.concatenate([eye.ravel(), eye.ravel()])
    assert grad_check(pack_loss(4, 4, 0.5), params, 1e-5) < 1e-6


def test_paper_literal_grad_also_verified():
    i_emb, t_emb = unit_rows(6, 8, seed=9), unit_rows(6, 8, seed=10)
    params = np.concatenate([i_emb.ravel(), t_emb.ravel()])
    assert grad_check(pack_loss(6, 8, 0.5, "paper_literal"), params, 1e-5) < 1e-6


def test_grad_nearly_zero_at_hard_diagonal():
    # pushing diagonal dominance toward one-hot softmax kills the gradient
    eye = np.eye(4)
    _, gi_soft, _ = infonce_grad(eye, eye, 1.0)
    _, gi_hard, _ = infonce_grad(eye, eye, 0.01)
    assert np.abs(gi_hard).max() < 1e-10
    assert np.abs(gi_soft).max() > 1e-3


def test_grad_check_quadratic_is_tight():
    def quad(params):
        return float(np.sum(params**2)), 2 * params

    assert grad_check(quad, np.linspace(-1, 1, 7), 1e-5) < 1e-9


def test_grad_check_catches_corruption():
    def corrupted(params):
        grad = 2 * params
        grad[0] *= 2.0
        return float(np.sum(params**2)), grad

    assert grad_check(corrupted, np.linspace(0.5, 1.5, 5), 1e-5) > 0.1


def test_normalize_rows_backward_matches_fd():
    rng = np.random.default_rng(11)
    z = rng.normal(size=(3, 4)) + 0.5
    downstream = rng.normal(size=(3, 4))

    def loss_fn(flat):
        u = normalize_rows(flat.reshape(3, 4))
        loss = float(np.sum(u * downstream))
        grad = normalize_rows_backward(flat.reshape(3, 4), downstream)
        return loss, grad.ravel()

    assert grad_check(loss_fn, z.ravel(), 1e-6) < 1e-6


def test_mlp4_backward_matches_fd():
    rng = np.random.default_rng(12)
    head = init_head("mlp4", 5, 3, rng, hidden_dim=6)
    x = rng.normal(size=(4, 5)) + 0.3
    downstream = rng.normal(size=(4, 3))

    def loss_fn(flat):
        shapes = [(w.shape, b.shape) for w, b in zip(head.weights, head.biases)]
        weights, biases = [], []
        offset = 0
        for w_shape, b_shape in shapes:
            w_size = int(np.prod(w_shape))
            weights.append(flat[offset : offset + w_size].reshape(w_shape))
            offset += w_size
            biases.append(flat[offset : offset + b_shape[0]])
            offset += b_shape[0]
        probe = AdaptationHead("mlp4", weights, biases)
        out, cache = probe.forward_cached(x)
        loss = float(np.sum(out * downstream))
        gw, gb = probe.backward(downstream, cache)
        flat_grad = np.concatenate(
            [np.concatenate([w.ravel(), b.ravel()]) for w, b in zip(gw, gb)]
        )
        return loss, flat_grad

    flat = np.concatenate(
        [np.concatenate([w.ravel(), b.ravel()]) for w, b in zip(head.weights, head.biases)]
    )
    assert grad_check(loss_fn, flat, 1e-6) < 1e-5


def test_apply_head_identity_linear():
    head = AdaptationHead("linear", [np.eye(3)], [np.zeros(3)])
    features = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 2.0]])
    out = apply_head(head, features)
    assert out.normalized
    np.testing.assert_allclose(out.data[0], [0.6, 0.8, 0.0], atol=1e-7)


def test_apply_head_zero_weights_rejected():
    head = AdaptationHead("linear", [np.zeros((3, 3))], [np.zeros(3)])
    with pytest.raises(ArgumentError, match="zero rows"):
        apply_head(head, np.ones((2, 3)))


def test_apply_head_rows_unit_norm():
    rng = np.random.default_rng(13)
    head = init_head("linear", 6, 4, rng)
    out = apply_head(head, rng.normal(size=(9, 6)))
    np.testing.assert_allclose(np.linalg.norm(out.data.astype(np.float64), axis=1), 1.0, atol=1e-6)


def linearly_alignable(n=1000, d=32, seed=42):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(n, d))
    mapping = rng.normal(size=(d, d)) / np.sqrt(d)
    return img, img @ mapping


def test_train_heads_reaches_high_recall():
    img, txt = linearly_alignable()
    cfg = TrainConfig(tau=0.1, epochs=30, batch_size=256, seed=3, output_dim=32)
    image_head, text_head, history = train_heads(img[:800], txt[:800], cfg)
    assert history[-1] < history[0]
    zi = apply_head(image_head, img[800:])
    zt = apply_head(text_head, txt[800:])
    text_r, image_r = recall_at_k(zi, zt, [(i, i) for i in range(200)], 1)
    assert text_r > 90.0 and image_r > 90.0


def test_train_heads_zero_learning_rate_is_identity():
    # full-batch so the loss is partition-independent across epoch reshuffles
    img, txt = linearly_alignable(n=64, d=8)
    cfg = TrainConfig(tau=0.1, learning_rate=0.0, epochs=3, batch_size=64, seed=1, output_dim=8)
    trained_i, trained_t, history = train_heads(img, txt, cfg)
    fresh_rng = np.random.default_rng(1)
    init_i = init_head("linear", 8, 8, fresh_rng)
    np.testing.assert_array_equal(trained_i.weights[0], init_i.weights[0])
    init_t = init_head("linear", 8, 8, fresh_rng)
    np.testing.assert_array_equal(trained_t.weights[0], init_t.weights[0])
    # flat up to reduction-order ulps from the per-epoch row permutation
    assert np.ptp(history) < 1e-9


def test_train_heads_seeded_rerun_bit_identical():
    img, txt = linearly_alignable(n=128, d=8)
    cfg = TrainConfig(tau=0.1, epochs=5, batch_size=64, seed=7, output_dim=8)
    a_i, a_t, hist_a = train_heads(img, txt, cfg)
    b_i, b_t, hist_b = train_heads(img, txt, cfg)
    assert hist_a == hist_b
    np.testing.assert_array_equal(a_i.weights[0], b_i.weights[0])
    np.testing.assert_array_equal(a_t.weights[0], b_t.weights[0])
    np.testing.assert_array_equal(a_i.biases[0], b_i.biases[0])


def test_train_divergence_reported():
    img, txt = linearly_alignable(n=64, d=8)
    cfg = TrainConfig(
        tau=0.1, learning_rate=1e200, epochs=3, batch_size=32, seed=1, output_dim=8
    )
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingError) as exc:
            train_heads(img, txt, cfg)
    assert exc.value.epoch is not None


def test_head_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    for kind in ("linear", "mlp4"):
        head = init_head(kind, 6, 4, rng, hidden_dim=5)
        path = tmp_path / f"{kind}.smhd"
        save_head(head, path)
        back = load_head(path)
        assert back.kind == kind
        for w1, w2 in zip(head.weights, back.weights):
            np.testing.assert_array_equal(w1.astype(np.float32), w2.astype(np.float32))


def test_head_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "h.smhd"
    rng = np.random.default_rng(0)
    save_head(init_head("linear", 2, 2, rng), path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_head(path)


def test_head_checkpoint_truncated(tmp_path):
    path = tmp_path / "h.smhd"
    rng = np.random.default_rng(0)
    save_head(init_head("linear", 4, 4, rng), path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError):
        load_head(path)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(tau=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="sgdm")
