#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
测试ANTLER变分自编码器：规范化、编解码、损失各项、手写梯度与训练
"""

import math

import numpy as np
import pytest
from loguru import logger

from antler_model import (ShapeError, TrainConfig, antler_loss, canonicalize, dataset_loss, decode,
                          encode, init_model, load_model, loss_and_gradients, predict, save_model,
                          train)
from config import ConfigError
from point_io import Box3
from sampler import BalancedSample, balanced_sample
from voxelizer import BinaryVoxelTensor, GridSpec

M_R = 6
LATENT = 3


def make_samples(n, seed=0, dims=(5, 5, 5), m_r=M_R):
    rng = np.random.default_rng(seed)
    box = Box3(np.zeros(3), np.ones(3))
    samples = []
    for i in range(n):
        linear = rng.choice(int(np.prod(dims)), size=m_r // 2, replace=False)
        occupied = np.stack(np.unravel_index(linear, dims), axis=1)
        tensor = BinaryVoxelTensor(GridSpec(box, dims), occupied)
        samples.append(balanced_sample(tensor, m_r, seed=seed * 100 + i))
    return samples


def small_model(lambdas=(1.0, 0.1, 10.0), seed=0, n_outputs=2, loss_samples=4):
    return init_model(M_R, n_outputs, latent_dim=LATENT, encoder_hidden=(10,), decoder_hidden=(9,),
                      regressor_hidden=(7,), lambdas=lambdas, loss_samples=loss_samples, seed=seed)


def permuted(sample, seed):
    order = np.random.default_rng(seed).permutation(sample.m_r)
    return BalancedSample(sample.entries[order], sample.grid)


def test_canonicalize_single_entry():
    box = Box3(np.zeros(3), np.ones(3))
    sample = BalancedSample(np.array([[0, 0, 0, 1]]), GridSpec(box, (2, 2, 2)))
    np.testing.assert_array_equal(canonicalize(sample), [0.0, 0.0, 0.0, 1.0])


def test_canonicalize_matches_sort_then_normalize_reference():
    """与逐条排序、逐轴归一化的参考实现一致，且对条目置换不变"""
    sample = make_samples(1, seed=3, dims=(4, 7, 1), m_r=10)[0]
    reference = []
    for i, j, k, b in sorted(tuple(int(v) for v in row) for row in sample.entries):
        reference.extend([i / 3.0, j / 6.0, 0.0, float(b)])
    np.testing.assert_array_equal(canonicalize(sample), reference)
    np.testing.assert_array_equal(canonicalize(permuted(sample, 1)), reference)


def test_encode_zero_final_layer_gives_bias():
    model = small_model()
    model.encoder.weights[-1][:] = 0.0
    model.encoder.biases[-1][:] = [0.1, -0.2, 0.3, 0.0, 0.5, -1.0]
    mu, sigma = encode(model, canonicalize(make_samples(1)[0]))
    np.testing.assert_array_equal(mu, [0.1, -0.2, 0.3])
    np.testing.assert_allclose(sigma, np.exp(0.5 * np.array([0.0, 0.5, -1.0])))
    with pytest.raises(ShapeError):
        encode(model, np.zeros(4 * M_R + 1))


def test_decode_ranges_and_determinism():
    model = small_model()
    rng = np.random.default_rng(1)
    for _ in range(10):
        z = rng.normal(scale=5.0, size=LATENT)
        coords, probs = decode(model, z)
        assert coords.shape == (3 * M_R,)
        assert np.all((probs > 0) & (probs < 1))
        again_coords, again_probs = decode(model, z)
        np.testing.assert_array_equal(coords, again_coords)
        np.testing.assert_array_equal(probs, again_probs)


def test_kl_is_zero_at_standard_normal_posterior():
    model = small_model()
    model.encoder.weights[-1][:] = 0.0
    model.encoder.biases[-1][:] = 0.0
    sample = make_samples(1)[0]
    noise = np.random.default_rng(0).standard_normal((4, LATENT))
    _, terms = antler_loss(model, sample, np.zeros(2), np.zeros(LATENT), noise)
    assert terms['kl'] == 0.0


def test_zero_lambdas_leave_only_reconstruction():
    """λ 全为0时总损失等于直接计算的S样本重要性加权重构估计"""
    model = small_model(lambdas=(0.0, 0.0, 0.0))
    sample = make_samples(1, seed=2)[0]
    noise = np.random.default_rng(5).standard_normal((4, LATENT))
    total, terms = antler_loss(model, sample, np.array([3.0, -1.0]), None, noise)
    assert terms['kl'] == terms['snbtd'] == terms['regression'] == 0.0

    v = canonicalize(sample).reshape(M_R, 4)
    coords, bits = v[:, :3].ravel(), v[:, 3]
    mu, sigma = encode(model, canonicalize(sample))
    ratios = []
    for eps in noise:
        z = mu + sigma * eps
        means, probs = decode(model, z)
        log_p = (np.sum(bits * np.log(probs) + (1 - bits) * np.log(1 - probs))
                 - 0.5 * np.sum((coords - means) ** 2) - 0.5 * coords.size * math.log(2 * math.pi))
        log_q = np.sum(-0.5 * eps ** 2 - np.log(sigma) - 0.5 * math.log(2 * math.pi))
        ratios.append(math.exp(log_p - log_q))
    expected = -math.log(sum(ratios) / len(ratios))
    assert total == pytest.approx(expected, rel=1e-9)
    assert terms['reconstruction'] == pytest.approx(expected, rel=1e-9)


def test_missing_target_with_positive_lambda2():
    model = small_model(lambdas=(1.0, 0.5, 1.0))
    noise = np.zeros((4, LATENT))
    with pytest.raises(ConfigError):
        antler_loss(model, make_samples(1)[0], np.zeros(2), None, noise)


def test_gradients_match_central_differences():
    """每个参数组的解析梯度与中心差分（步长1e-5）相对误差 < 1e-4"""
    model = small_model(lambdas=(0.7, 0.3, 2.0), seed=4)
    sample = make_samples(1, seed=4)[0]
    v = canonicalize(sample)
    rng = np.random.default_rng(4)
    y = rng.normal(size=2)
    target = rng.normal(size=LATENT)
    noise = rng.standard_normal((4, LATENT))
    _, _, grads = loss_and_gradients(model, v, y, target, noise)

    step = 1e-5
    for name, net in model.networks().items():
        for param, grad in zip(net.parameters(), grads[name]):
            assert grad.shape == param.shape
            flat = param.reshape(-1)
            picks = rng.choice(flat.size, size=min(flat.size, 12), replace=False)
            numeric, analytic = [], []
            for idx in picks:
                original = flat[idx]
                flat[idx] = original + step
                plus = loss_and_gradients(model, v, y, target, noise, need_grad=False)[0]
                flat[idx] = original - step
                minus = loss_and_gradients(model, v, y, target, noise, need_grad=False)[0]
                flat[idx] = original
                numeric.append((plus - minus) / (2 * step))
                analytic.append(grad.reshape(-1)[idx])
            numeric, analytic = np.array(numeric), np.array(analytic)
            scale = max(np.linalg.norm(numeric) + np.linalg.norm(analytic), 1e-8)
            assert np.linalg.norm(numeric - analytic) / scale < 1e-4, name


def test_dataset_loss_is_sum_of_sample_losses():
    model = small_model()
    samples = make_samples(4, seed=6)
    rng = np.random.default_rng(6)
    responses = rng.normal(size=(4, 2))
    targets = rng.normal(size=(4, LATENT))
    noises = [rng.standard_normal((4, LATENT)) for _ in samples]
    parts = [antler_loss(model, s, responses[i], targets[i], noises[i])[0] for i, s in enumerate(samples)]
    assert dataset_loss(model, samples, responses, targets, noises) == pytest.approx(math.fsum(parts), abs=1e-10)


def test_loss_and_prediction_are_permutation_invariant():
    model = small_model()
    sample = make_samples(1, seed=7)[0]
    shuffled = permuted(sample, 3)
    noise = np.random.default_rng(7).standard_normal((4, LATENT))
    target = np.ones(LATENT)
    assert antler_loss(model, sample, np.ones(2), target, noise) == \
        antler_loss(model, shuffled, np.ones(2), target, noise)
    np.testing.assert_array_equal(predict(model, sample), predict(model, shuffled))
    np.testing.assert_array_equal(predict(model, sample), predict(model, sample))


def test_predict_rejects_wrong_mr():
    model = small_model()
    with pytest.raises(ShapeError):
        predict(model, make_samples(1, m_r=8)[0])


def test_training_is_deterministic():
    model = small_model()
    samples = make_samples(3, seed=8)
    responses = np.random.default_rng(8).normal(size=(3, 2))
    targets = np.random.default_rng(9).normal(size=(3, LATENT))
    config = TrainConfig(learning_rate=1e-3, max_epochs=5, seed=11)
    before = [p.copy() for p in model.parameters()]
    first, history_a = train(model, samples, responses, targets, config)
    second, history_b = train(model, samples, responses, targets, config)
    assert list(history_a.columns) == ['epoch', 'total', 'reconstruction', 'kl', 'snbtd', 'regression']
    assert history_a.equals(history_b)
    for a, b in zip(first.parameters(), second.parameters()):
        np.testing.assert_array_equal(a, b)
    # 原模型不被修改
    for a, b in zip(before, model.parameters()):
        np.testing.assert_array_equal(a, b)
    assert not all(np.array_equal(a, b) for a, b in zip(before, first.parameters()))


@pytest.mark.parametrize('seed', [12, 13])
def test_overfit_five_samples(seed):
    """5个样本、λ1=1、λ3=10：1000轮后回归误差降到初始的1%以下"""
    model = small_model(lambdas=(1.0, 0.0, 10.0), n_outputs=1, loss_samples=1, seed=seed)
    samples = make_samples(5, seed=seed)
    responses = np.array([[-1.0], [-0.5], [0.0], [0.5], [1.0]])

    def mse(m):
        return np.mean([(predict(m, s)[0] - y[0]) ** 2 for s, y in zip(samples, responses)])

    initial = mse(model)
    config = TrainConfig(learning_rate=5e-3, max_epochs=1000, seed=seed, tolerance=None)
    trained, history = train(model, samples, responses, None, config)
    assert len(history) == 1000
    assert not trained.metadata['diverged']
    assert mse(trained) <= 1e-2 * initial


def test_zero_kl_weight_is_flagged():
    """λ1=0 时训练给出警告并在模型元数据中标记"""
    messages = []
    sink = logger.add(lambda m: messages.append(m.record['message']), level='WARNING')
    try:
        trained, _ = train(small_model(lambdas=(0.0, 0.0, 1.0)), make_samples(2), np.zeros((2, 2)), None,
                           TrainConfig(max_epochs=1, seed=0))
    finally:
        logger.remove(sink)
    assert trained.metadata['kl_unregularized'] is True
    assert any('λ1=0' in m for m in messages)
    regular, _ = train(small_model(lambdas=(1.0, 0.0, 1.0)), make_samples(2), np.zeros((2, 2)), None,
                       TrainConfig(max_epochs=1, seed=0))
    assert 'kl_unregularized' not in regular.metadata


def test_reconstruction_decreases_without_regularizers():
    model = small_model(lambdas=(0.0, 0.0, 0.0), seed=13)
    samples = make_samples(5, seed=13)
    config = TrainConfig(learning_rate=5e-3, max_epochs=100, seed=13, tolerance=None)
    _, history = train(model, samples, np.zeros((5, 2)), None, config)
    assert history['reconstruction'].iloc[-10:].mean() < history['reconstruction'].iloc[:10].mean()


def test_divergence_returns_last_finite_checkpoint():
    model = small_model()
    model.encoder.weights[-1][:] = 0.0
    model.encoder.biases[-1][LATENT:] = 5000.0
    config = TrainConfig(learning_rate=1e-3, max_epochs=3, seed=0)
    with np.errstate(over='ignore'):
        trained, history = train(model, make_samples(2), np.zeros((2, 2)), np.zeros((2, LATENT)), config)
    assert trained.metadata['diverged'] is True
    assert history.empty
    for a, b in zip(model.parameters(), trained.parameters()):
        np.testing.assert_array_equal(a, b)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        train(small_model(), make_samples(2), np.zeros((2, 2)), None, TrainConfig())


def test_save_and_load_model(tmp_path):
    model = small_model()
    model.response_mean = np.array([1.0, 2.0])
    model.response_scale = np.array([0.5, 3.0])
    path = str(tmp_path / 'model.json')
    save_model(model, path)
    loaded = load_model(path)
    sample = make_samples(1, seed=14)[0]
    np.testing.assert_array_equal(predict(loaded, sample), predict(model, sample))
    assert loaded.lambdas == model.lambdas
