import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dctta import autograd as ag
from dctta.adaptation import (AdaptConfig, AdaptState, DivergenceError, PretrainConfig, adapt_stream,
                              adaptation_loss, cross_entropy, entropy, prepare_params, pretrain,
                              reliability_mask, sam_step, sam_update, select_adaptable)
from dctta.autograd import Tensor, finite_diff_check, precision
from dctta.checkpoint import checkpoint_bytes
from dctta.data import StreamBatch, SyntheticDataset
from dctta.model import FROZEN, ModelConfig, init_params, model_forward, predict

from conftest import logits_with_entropy, randomize_generators

E0_10 = 0.4 * math.log(10)


# ------------------------------------------------------------------ losses

def test_entropy_uniform_and_point_mass():
    assert entropy(Tensor(np.zeros((1, 10)))).data[0] == pytest.approx(math.log(10), abs=1e-6)
    peaked = np.full((1, 10), -50.0)
    peaked[0, 3] = 50.0
    assert entropy(Tensor(peaked)).data[0] == pytest.approx(0.0, abs=1e-6)


def test_entropy_oracle():
    x = np.array([1.0, 2.0, 3.0])
    p = np.exp(x) / np.exp(x).sum()
    assert entropy(Tensor([x])).data[0] == pytest.approx(-(p * np.log(p)).sum(), abs=1e-6)


def test_reliability_threshold():
    assert AdaptConfig().e0(10) == pytest.approx(0.921034, abs=1e-6)
    np.testing.assert_array_equal(reliability_mask([0.5, 1.5], E0_10), [True, False])
    np.testing.assert_array_equal(reliability_mask([1.0, 2.0], E0_10), [False, False])
    np.testing.assert_array_equal(reliability_mask([E0_10], E0_10), [False])  # strict


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 20), elements=st.floats(0, 3)),
       st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_filter_monotone_in_e0(ent, f1, f2):
    lo, hi = sorted((f1, f2))
    assert reliability_mask(ent, lo * math.log(10)).sum() <= reliability_mask(ent, hi * math.log(10)).sum()


def test_adaptation_loss_examples():
    with precision(np.float64):
        one = logits_with_entropy([0.3])
        loss, n, _ = adaptation_loss(Tensor(one), E0_10)
        assert n == 1 and loss.item() == pytest.approx(0.3, abs=1e-9)
        two = logits_with_entropy([0.2, 0.4])
        loss, n, _ = adaptation_loss(Tensor(two), E0_10)
        assert n == 2 and loss.item() == pytest.approx(0.3, abs=1e-9)
    loss, n, _ = adaptation_loss(Tensor(np.zeros((2, 10))), E0_10)
    assert loss is None and n == 0


def test_cross_entropy_with_smoothing():
    logits = np.array([[2.0, 0.0, -1.0]])
    logp = logits - np.log(np.exp(logits).sum())
    assert cross_entropy(Tensor(logits), np.array([0])).item() == pytest.approx(-logp[0, 0], rel=1e-6)
    target = np.full(3, 0.1 / 3)
    target[0] += 0.9
    assert cross_entropy(Tensor(logits), np.array([0]), 0.1).item() == pytest.approx(-(target * logp[0]).sum(),
                                                                                     rel=1e-6)


# ------------------------------------------------------- parameter subsets

def test_adaptable_sets(tiny_params):
    cfg = tiny_params.config
    d, depth = cfg.embed_dim, cfg.depth
    dct = select_adaptable(tiny_params, "dct")
    ln = select_adaptable(tiny_params, "ln-only")
    assert select_adaptable(tiny_params, "none") == []
    assert tiny_params.size(dct) == depth * (2 * 2 * d) + 2 * d + depth * (d * 3 * d + 3 * d)
    assert set(ln) < set(dct)
    static = prepare_params(tiny_params, "static-conditioner")
    assert set(select_adaptable(static, "static-conditioner")) - set(ln) == {
        f"static.{l}.{k}" for l in range(depth) for k in "qkv"}
    frozen = set(tiny_params.names(FROZEN))
    for mode in ("dct", "ln-only", "none"):
        assert not frozen & set(select_adaptable(tiny_params, mode))
    with pytest.raises(ValueError):
        select_adaptable(tiny_params, "bogus")


def test_step_size_scales_with_batch():
    cfg = AdaptConfig(learning_rate=0.1)
    assert cfg.step_size(64) == pytest.approx(0.1)
    assert cfg.step_size(1) == pytest.approx(0.1 / 64)
    assert AdaptConfig(learning_rate=0.1, lr_reference_batch=0).step_size(1) == 0.1


@pytest.mark.parametrize("kwargs", [dict(mode="x"), dict(learning_rate=0), dict(rho=-1), dict(e0_factor=0),
                                    dict(momentum=1.0), dict(lr_reference_batch=-1)])
def test_adapt_config_validation(kwargs):
    with pytest.raises(ValueError):
        AdaptConfig(**kwargs)


# ---------------------------------------------------------------------- SAM

def _quadratic(theta):
    return lambda: (ag.scale(ag.sum(ag.multiply(theta, theta)), 0.5), 1)


def test_sam_quadratic_oracle():
    with precision(np.float64):
        theta = Tensor([3.0, 4.0], requires_grad=True)
        buffers = [None]
        n1, n2, loss, skipped = sam_step([theta], _quadratic(theta), lr=0.1, rho=0.05, momentum=0.0,
                                         buffers=buffers)
    assert not skipped and loss == pytest.approx(12.5)
    np.testing.assert_allclose(buffers[0], [3.03, 4.04], atol=1e-12)
    np.testing.assert_allclose(theta.data, [2.697, 3.596], atol=1e-6)


def test_sam_rho_zero_is_momentum_descent():
    with precision(np.float64):
        theta = Tensor([3.0, 4.0], requires_grad=True)
        buffers = [None]
        ref, m = np.array([3.0, 4.0]), None
        for _ in range(4):
            sam_step([theta], _quadratic(theta), lr=0.1, rho=0.0, momentum=0.9, buffers=buffers)
            g = ref.copy()
            m = g.copy() if m is None else (0.9 * m + g).astype(np.float64)
            ref = (ref - 0.1 * m).astype(np.float64)
            np.testing.assert_array_equal(theta.data, ref)


def test_sam_restores_perturbation():
    with precision(np.float64):
        theta = Tensor([3.0, 4.0], requires_grad=True)
        sam_step([theta], _quadratic(theta), lr=0.0, rho=0.05, momentum=0.9, buffers=[None])
    np.testing.assert_allclose(theta.data, [3.0, 4.0], atol=1e-7)


def test_sam_skip_when_nothing_selected():
    theta = Tensor([3.0, 4.0], requires_grad=True)
    before = theta.data.copy()
    _, _, _, skipped = sam_step([theta], lambda: (None, 0), 0.1, 0.05, 0.9, [None])
    assert skipped
    np.testing.assert_array_equal(theta.data, before)


def test_sam_skip_when_second_pass_empty():
    theta = Tensor([3.0, 4.0], requires_grad=True)
    before = theta.data.copy()
    calls = iter([_quadratic(theta)(), (None, 0)])
    n1, n2, _, skipped = sam_step([theta], lambda: next(calls), 0.1, 0.05, 0.9, [None])
    assert skipped and (n1, n2) == (1, 0)
    np.testing.assert_array_equal(theta.data, before)


def test_sam_divergence_restores_and_raises():
    theta = Tensor([3.0, 4.0], requires_grad=True)
    before = theta.data.copy()

    def closure():
        return ag.sum(ag.exp(ag.scale(theta, 1e6))), 1

    with pytest.raises(DivergenceError):
        sam_step([theta], closure, 0.1, 0.05, 0.9, [None])
    np.testing.assert_array_equal(theta.data, before)


def test_sam_update_all_filtered_leaves_params(tiny_params, images):
    params = prepare_params(tiny_params, "dct")
    before = checkpoint_bytes(params)
    state = AdaptState()
    stats = sam_update(params, images, AdaptConfig(e0_factor=1e-6), state)
    assert stats.skipped and state.skipped == 1 and stats.n_selected1 == 0
    assert checkpoint_bytes(params) == before


# -------------------------------------------------------- gradient suite

@pytest.mark.parametrize("seed", range(2))
def test_adaptation_loss_gradients_match_finite_differences(seed):
    cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=8, num_heads=2, depth=2, num_classes=3)
    with precision(np.float64):
        params = randomize_generators(init_params(cfg, seed).astype(np.float64), seed, scale=0.2)
        params = prepare_params(params, "dct")
        imgs = np.random.default_rng(seed).random((3, 8, 8, 1))

        def f():
            loss, _, _ = adaptation_loss(model_forward(imgs, params, "dct")[0], 10.0)
            return loss

        names = select_adaptable(params, "dct")
        err = finite_diff_check(f, [params[n] for n in names], step=1e-5)
    assert err < 1e-3


def test_query_conditioner_gradient_is_exactly_zero(tiny_params, images):
    """The conditioner's own output row is discarded, so Cq cannot affect the loss."""
    params = prepare_params(randomize_generators(tiny_params), "dct")
    logits, _ = model_forward(images, params, "dct")
    grads = ag.backward(ag.sum(ag.multiply(logits, logits)))
    d = params.config.embed_dim
    for layer in range(params.config.depth):
        w, b = params.generator(layer)
        np.testing.assert_array_equal(grads[w][:, :d], 0)
        np.testing.assert_array_equal(grads[b][:d], 0)
        assert np.abs(grads[w][:, d:]).max() > 0


# ---------------------------------------------------------------- streams

def _stream(images, labels, bs):
    return [StreamBatch(i, images[s:s + bs], labels[s:s + bs], np.arange(s, s + len(labels[s:s + bs])), "x", 1)
            for i, s in enumerate(range(0, len(labels), bs))]


def test_mode_none_is_frozen_evaluation(tiny_params):
    rng = np.random.default_rng(0)
    imgs, labels = rng.random((10, 8, 8, 1)).astype(np.float32), rng.integers(0, 3, 10)
    before = checkpoint_bytes(tiny_params)
    metrics, final = adapt_stream(tiny_params, _stream(imgs, labels, 4), AdaptConfig(mode="none"))
    assert checkpoint_bytes(final) == before == checkpoint_bytes(tiny_params)
    assert metrics.accuracy == pytest.approx(np.mean(predict(imgs, tiny_params) == labels))
    assert metrics.skipped_batches == 3


def test_adapt_stream_deterministic_and_input_untouched(tiny_params):
    rng = np.random.default_rng(1)
    imgs, labels = rng.random((12, 8, 8, 1)).astype(np.float32), rng.integers(0, 3, 12)
    before = checkpoint_bytes(tiny_params)
    cfg = AdaptConfig(e0_factor=1.0, learning_rate=0.05)
    runs = [adapt_stream(tiny_params, _stream(imgs, labels, 4), cfg) for _ in range(2)]
    assert runs[0][0].rows == runs[1][0].rows
    assert checkpoint_bytes(runs[0][1]) == checkpoint_bytes(runs[1][1]) != before
    assert checkpoint_bytes(tiny_params) == before


def test_score_after_update_flag(tiny_params):
    rng = np.random.default_rng(2)
    imgs, labels = rng.random((8, 8, 8, 1)).astype(np.float32), rng.integers(0, 3, 8)
    cfg = dict(e0_factor=1.0, learning_rate=0.5)
    m1, _ = adapt_stream(tiny_params, _stream(imgs, labels, 8), AdaptConfig(**cfg))
    m2, p2 = adapt_stream(tiny_params, _stream(imgs, labels, 8), AdaptConfig(score_after_update=True, **cfg))
    assert m1.rows[0]["batch_accuracy"] == pytest.approx(np.mean(predict(imgs, tiny_params, "dct") == labels))
    assert m2.rows[0]["batch_accuracy"] == pytest.approx(np.mean(predict(imgs, p2, "dct") == labels))


def test_stream_label_range_checked(tiny_params):
    imgs = np.zeros((2, 8, 8, 1), dtype=np.float32)
    with pytest.raises(ValueError):
        adapt_stream(tiny_params, _stream(imgs, np.array([0, 5]), 2), AdaptConfig())


# ---------------------------------------------------------------- pretrain

def _separable(n=64, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    base = np.where(labels[:, None, None, None] == 0, 0.2, 0.8)
    imgs = np.clip(base + rng.normal(0, 0.05, (n, 8, 8, 1)), 0, 1).astype(np.float32)
    return SyntheticDataset(imgs, labels, 2, "train")


def test_pretrain_one_epoch_separable():
    cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=8, num_heads=2, depth=1, num_classes=2)
    train = _separable(256)
    params = pretrain(cfg, train, PretrainConfig(epochs=1, batch_size=8, lr=1e-2, seed=0))
    assert np.mean(predict(train.images, params) == train.labels) > 0.9


def test_pretrain_deterministic():
    cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=8, num_heads=2, depth=1, num_classes=2)
    tcfg = PretrainConfig(epochs=1, batch_size=16, seed=3)
    a = pretrain(cfg, _separable(32), tcfg)
    b = pretrain(cfg, _separable(32), tcfg)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_pretrain_class_mismatch():
    cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=8, num_heads=2, depth=1, num_classes=3)
    with pytest.raises(ValueError):
        pretrain(cfg, _separable(), PretrainConfig(epochs=1))
