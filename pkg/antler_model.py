#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
带ANTLER损失的变分自编码器
编码器 q_φ(z|𝓓)、解码器 p_θ(𝓓|z)、回归头 g_θr(μ_z)，四项损失联合用SGD训练（重参数化）
网络为numpy实现的全连接层，梯度为手写反向传播
"""

import copy
import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy.special import expit, logsumexp, softmax
from tqdm import tqdm

from config import ConfigError
from sampler import BalancedSample

MODEL_TAG = "antler_model_v1"
LOG_2PI = math.log(2.0 * math.pi)
TERM_NAMES = ('reconstruction', 'kl', 'snbtd', 'regression')


class NumericError(RuntimeError):
    """前向计算出现非有限值"""


class ShapeError(ValueError):
    """样本长度与模型的 M_r 不一致"""


_ACTIVATIONS = {
    'tanh': (np.tanh, lambda out: 1.0 - out ** 2),
    'linear': (lambda a: a, lambda out: np.ones_like(out)),
}


@dataclass
class MlpParams:
    """全连接网络参数；W_l 形状 (in, out)，按行向量批量计算"""
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activations: List[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("层数不一致")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[1] != b.shape[0]:
                raise ValueError(f"第{l}层偏置长度不匹配")
            if l and self.weights[l - 1].shape[1] != w.shape[0]:
                raise ValueError(f"第{l}层输入维度与上一层输出不衔接")

    @property
    def widths(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        outputs = [x]
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = _ACTIVATIONS[act][0](x @ w + b)
            outputs.append(x)
        return x, outputs

    def backward(self, outputs: List[np.ndarray], d_out: np.ndarray):
        """返回 (dW列表, db列表, d_input)"""
        d_weights, d_biases = [None] * len(self.weights), [None] * len(self.weights)
        grad = d_out
        for l in reversed(range(len(self.weights))):
            grad = grad * _ACTIVATIONS[self.activations[l]][1](outputs[l + 1])
            d_weights[l] = outputs[l].T @ grad
            d_biases[l] = grad.sum(axis=0)
            grad = grad @ self.weights[l].T
        return d_weights, d_biases, grad

    def parameters(self) -> List[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def to_dict(self) -> dict:
        return {
            'widths': self.widths,
            'activations': list(self.activations),
            'weights': [w.tolist() for w in self.weights],
            'biases': [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'MlpParams':
        return cls([np.array(w, dtype=np.float64) for w in data['weights']],
                   [np.array(b, dtype=np.float64) for b in data['biases']],
                   list(data['activations']))


def init_mlp(widths: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """隐藏层tanh、输出层线性；权重 N(0, 1/fan_in)"""
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    activations = ['tanh'] * (len(widths) - 2) + ['linear']
    return MlpParams(weights, biases, activations)


@dataclass
class AntlerModel:
    encoder: MlpParams
    decoder: MlpParams
    regressor: MlpParams
    lambdas: Tuple[float, float, float]
    loss_samples: int
    latent_dim: int
    m_r: int
    response_mean: np.ndarray = None
    response_scale: np.ndarray = None
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if any(l < 0 for l in self.lambdas):
            raise ValueError("λ 必须非负")
        self.lambdas = tuple(float(l) for l in self.lambdas)
        p = self.n_outputs
        if self.response_mean is None:
            self.response_mean = np.zeros(p)
        if self.response_scale is None:
            self.response_scale = np.ones(p)
        self.response_mean = np.asarray(self.response_mean, dtype=np.float64)
        self.response_scale = np.asarray(self.response_scale, dtype=np.float64)
        if self.encoder.widths[0] != 4 * self.m_r or self.encoder.widths[-1] != 2 * self.latent_dim:
            raise ValueError("编码器维度应为 4·M_r -> 2L")
        if self.decoder.widths[0] != self.latent_dim or self.decoder.widths[-1] != 4 * self.m_r:
            raise ValueError("解码器维度应为 L -> 4·M_r")
        if self.regressor.widths[0] != self.latent_dim:
            raise ValueError("回归头输入维度应为 L")

    @property
    def n_outputs(self) -> int:
        return self.regressor.widths[-1]

    def networks(self) -> Dict[str, MlpParams]:
        return {'encoder': self.encoder, 'decoder': self.decoder, 'regressor': self.regressor}

    def parameters(self) -> List[np.ndarray]:
        return [p for net in self.networks().values() for p in net.parameters()]

    def copy(self) -> 'AntlerModel':
        return copy.deepcopy(self)


def init_model(m_r: int, n_outputs: int, latent_dim: int = 8, encoder_hidden=(256, 64),
               decoder_hidden=(64, 256), regressor_hidden=(32, 16), lambdas=(1.0, 0.1, 10.0),
               loss_samples: int = 5, seed: int = 0) -> AntlerModel:
    rng = np.random.default_rng(seed)
    encoder = init_mlp([4 * m_r, *encoder_hidden, 2 * latent_dim], rng)
    decoder = init_mlp([latent_dim, *decoder_hidden, 4 * m_r], rng)
    regressor = init_mlp([latent_dim, *regressor_hidden, n_outputs], rng)
    return AntlerModel(encoder, decoder, regressor, tuple(lambdas), int(loss_samples),
                       int(latent_dim), int(m_r), metadata={'init_seed': int(seed)})


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 1
    max_epochs: int = 100
    seed: int = 0
    tolerance: float = 1e-6
    window: int = 10
    weight_decay: float = 0.0
    max_norm: Optional[float] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size 必须 >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate 必须为正")


def canonicalize(sample: BalancedSample) -> np.ndarray:
    """按 (i, j, k) 字典序排序，索引除以 (dim - 1) 归一化到 [0,1]，拼成 (x, y, z, b) 四元组"""
    entries = sample.entries
    order = np.lexsort((entries[:, 2], entries[:, 1], entries[:, 0]))
    entries = entries[order]
    dims = np.asarray(sample.grid.dims, dtype=np.float64)
    denom = np.where(dims > 1, dims - 1.0, 1.0)
    coords = np.where(dims > 1, entries[:, :3] / denom, 0.0)
    return np.hstack([coords, entries[:, 3:4].astype(np.float64)]).ravel()


def _check_finite(name: str, *arrays: np.ndarray):
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise NumericError(f"{name} 出现非有限值")


def _encode(model: AntlerModel, v: np.ndarray):
    out, cache = model.encoder.forward(v[None, :])
    _check_finite("编码器", out)
    mu, log_var = out[0, :model.latent_dim], out[0, model.latent_dim:]
    sigma = np.exp(0.5 * log_var)
    _check_finite("编码器方差", sigma)
    return mu, log_var, sigma, cache


def encode(model: AntlerModel, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """返回 (μ_z, σ_z)"""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (4 * model.m_r,):
        raise ShapeError(f"输入长度 {v.shape} 应为 4·M_r = {4 * model.m_r}")
    mu, _, sigma, _ = _encode(model, v)
    return mu, sigma


def decode(model: AntlerModel, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """返回 (坐标均值 3·M_r, 占据概率 M_r)"""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.latent_dim,):
        raise ShapeError(f"z 长度 {z.shape} 应为 L = {model.latent_dim}")
    out, _ = model.decoder.forward(z[None, :])
    _check_finite("解码器", out)
    split = 3 * model.m_r
    return out[0, :split], expit(out[0, split:])


def loss_and_gradients(model: AntlerModel, v: np.ndarray, y: np.ndarray,
                       mu_target: Optional[np.ndarray], noise: np.ndarray,
                       need_grad: bool = True):
    """
    单个样本的ANTLER损失（纯代价形式）及各参数组梯度
    term1 = -log[(1/S) Σ_j p_θ(𝓓|z_j) / q_φ(z_j|𝓓)]，z_j = μ + σ⊙ε_j
    term2 = λ1·KL(q ‖ N(0, I))，term3 = λ2·‖μ - μ_target‖²，term4 = λ3·‖g_θr(μ) - y‖²
    """
    lam1, lam2, lam3 = model.lambdas
    if lam2 > 0 and mu_target is None:
        raise ConfigError("λ2 > 0 时必须提供SNBTD目标 μ_target")
    noise = np.asarray(noise, dtype=np.float64).reshape(-1, model.latent_dim)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))

    mu, log_var, sigma, enc_cache = _encode(model, v)
    z = mu + sigma * noise
    dec_out, dec_cache = model.decoder.forward(z)
    _check_finite("解码器", dec_out)

    split = 3 * model.m_r
    quads = v.reshape(model.m_r, 4)
    coords, bits = quads[:, :3].ravel(), quads[:, 3]
    coord_mean, logits = dec_out[:, :split], dec_out[:, split:]
    coord_resid = coords - coord_mean
    log_bern = np.sum(bits * logits - np.logaddexp(0.0, logits), axis=1)
    log_gauss = np.sum(-0.5 * coord_resid ** 2, axis=1) - 0.5 * split * LOG_2PI
    log_q = np.sum(-0.5 * noise ** 2 - 0.5 * log_var, axis=1) - 0.5 * model.latent_dim * LOG_2PI
    log_w = log_bern + log_gauss - log_q
    n_draws = log_w.shape[0]

    term1 = -(logsumexp(log_w) - math.log(n_draws))
    term2 = lam1 * 0.5 * float(np.sum(mu ** 2 + sigma ** 2 - log_var - 1.0))
    term3 = lam2 * float(np.sum((mu - mu_target) ** 2)) if lam2 > 0 else 0.0
    y_hat, reg_cache = model.regressor.forward(mu[None, :])
    resid = y_hat[0] - y
    term4 = lam3 * float(np.sum(resid ** 2))
    terms = dict(zip(TERM_NAMES, (float(term1), term2, term3, term4)))
    total = float(term1) + term2 + term3 + term4
    if not need_grad:
        return total, terms, None

    weights = softmax(log_w)
    d_dec = -weights[:, None] * np.hstack([coord_resid, bits[None, :] - expit(logits)])
    dec_w, dec_b, d_z = model.decoder.backward(dec_cache, d_dec)
    d_mu = d_z.sum(axis=0)
    # -log q 对 log σ² 的导数为 1/2，权重和为1
    d_log_var = np.sum(d_z * 0.5 * sigma * noise, axis=0) - 0.5

    d_mu = d_mu + lam1 * mu
    d_log_var = d_log_var + lam1 * 0.5 * (sigma ** 2 - 1.0)
    if lam2 > 0:
        d_mu = d_mu + 2.0 * lam2 * (mu - mu_target)
    reg_w, reg_b, d_mu_reg = model.regressor.backward(reg_cache, 2.0 * lam3 * resid[None, :])
    d_mu = d_mu + d_mu_reg[0]

    enc_w, enc_b, _ = model.encoder.backward(enc_cache, np.concatenate([d_mu, d_log_var])[None, :])
    grads = {
        'encoder': [g for pair in zip(enc_w, enc_b) for g in pair],
        'decoder': [g for pair in zip(dec_w, dec_b) for g in pair],
        'regressor': [g for pair in zip(reg_w, reg_b) for g in pair],
    }
    return total, terms, grads


def antler_loss(model: AntlerModel, sample: BalancedSample, y: np.ndarray,
                mu_target: Optional[np.ndarray], noise: np.ndarray) -> Tuple[float, Dict[str, float]]:
    """给定外部噪声 (S × L) 的确定性损失评估"""
    v = canonicalize(sample)
    if v.shape[0] != 4 * model.m_r:
        raise ShapeError(f"样本 M_r={sample.m_r} 与模型 M_r={model.m_r} 不一致")
    total, terms, _ = loss_and_gradients(model, v, y, mu_target, noise, need_grad=False)
    return total, terms


def dataset_loss(model: AntlerModel, samples: Sequence[BalancedSample], responses: np.ndarray,
                 targets: Optional[np.ndarray], noises: Sequence[np.ndarray]) -> float:
    """数据集损失等于各样本损失之和（补偿求和）"""
    totals = []
    for i, sample in enumerate(samples):
        target = None if targets is None else targets[i]
        totals.append(antler_loss(model, sample, responses[i], target, noises[i])[0])
    return math.fsum(totals)


def _apply_update(model: AntlerModel, grads: Dict[str, List[np.ndarray]], config: TrainConfig):
    for name, net in model.networks().items():
        for l in range(len(net.weights)):
            g_w, g_b = grads[name][2 * l], grads[name][2 * l + 1]
            if config.weight_decay:
                g_w = g_w + config.weight_decay * net.weights[l]
            net.weights[l] -= config.learning_rate * g_w
            net.biases[l] -= config.learning_rate * g_b
            if config.max_norm is not None:
                # 每个单元的输入权重范数约束
                norms = np.linalg.norm(net.weights[l], axis=0)
                scale = np.minimum(1.0, config.max_norm / np.maximum(norms, 1e-12))
                net.weights[l] *= scale


def train(model: AntlerModel, samples: Sequence[BalancedSample], responses: np.ndarray,
          snbtd_targets: Optional[np.ndarray], config: TrainConfig) -> Tuple[AntlerModel, pd.DataFrame]:
    """
    小批量SGD（默认batch size 1），每步使用新的带种子噪声；
    达到max_epochs或最近window个epoch的平均损失改善小于tolerance时停止
    """
    model = model.copy()
    responses = np.asarray(responses, dtype=np.float64).reshape(len(samples), -1)
    if model.lambdas[1] > 0:
        if snbtd_targets is None:
            raise ConfigError("λ2 > 0 时必须提供SNBTD目标")
        snbtd_targets = np.asarray(snbtd_targets, dtype=np.float64)
        if snbtd_targets.shape != (len(samples), model.latent_dim):
            raise ConfigError(f"SNBTD目标形状 {snbtd_targets.shape} 应为 ({len(samples)}, {model.latent_dim})")
    vectors = [canonicalize(s) for s in samples]
    for s in samples:
        if s.m_r != model.m_r:
            raise ShapeError(f"样本 M_r={s.m_r} 与模型 M_r={model.m_r} 不一致")
    if model.lambdas[0] == 0:
        # 没有KL项时q的熵不受约束，重构项没有下界
        logger.warning("⚠️ λ1=0：近似后验方差不受约束，重构项可能无下界地下降，建议 λ1 > 0")
        model.metadata['kl_unregularized'] = True

    rng = np.random.default_rng(config.seed)
    n = len(samples)
    history = []
    checkpoint = model.copy()
    diverged = False
    for epoch in tqdm(range(config.max_epochs), desc="ANTLER训练", leave=False):
        sums = dict.fromkeys(('total',) + TERM_NAMES, 0.0)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            noise = rng.standard_normal((len(batch), model.loss_samples, model.latent_dim))
            step_grads = None
            for b, i in enumerate(batch):
                target = None if snbtd_targets is None else snbtd_targets[i]
                try:
                    total, terms, grads = loss_and_gradients(model, vectors[i], responses[i], target, noise[b])
                except NumericError as e:
                    total, terms, grads = float('nan'), {}, None
                    logger.error(f"❌ 第 {epoch} 个epoch数值发散: {e}")
                if not np.isfinite(total):
                    diverged = True
                    break
                sums['total'] += total
                for key in TERM_NAMES:
                    sums[key] += terms[key]
                if step_grads is None:
                    step_grads = grads
                else:
                    for name in step_grads:
                        step_grads[name] = [a + g for a, g in zip(step_grads[name], grads[name])]
            if diverged:
                break
            for name in step_grads:
                step_grads[name] = [g / len(batch) for g in step_grads[name]]
            _apply_update(model, step_grads, config)
        if diverged:
            logger.error(f"❌ 训练在第 {epoch} 个epoch发散，回退到上一个有限检查点")
            model = checkpoint
            break
        history.append({'epoch': epoch, **{k: v / n for k, v in sums.items()}})
        checkpoint = model.copy()

        if config.tolerance is not None and len(history) > config.window:
            totals = [row['total'] for row in history]
            previous = np.mean(totals[-config.window - 1:-1])
            current = np.mean(totals[-config.window:])
            if previous - current < config.tolerance:
                logger.debug(f"第 {epoch} 个epoch收敛: 移动平均改善 {previous - current:.3g}")
                break

    model.metadata['train_seed'] = int(config.seed)
    model.metadata['diverged'] = diverged
    return model, pd.DataFrame(history, columns=['epoch', 'total', *TERM_NAMES])


def predict(model: AntlerModel, sample: BalancedSample) -> np.ndarray:
    """ŷ = g_θr(μ_z)（按训练时的响应标准化还原）"""
    if sample.m_r != model.m_r:
        raise ShapeError(f"样本 M_r={sample.m_r} 与模型 M_r={model.m_r} 不一致")
    mu, _ = encode(model, canonicalize(sample))
    y_hat, _ = model.regressor.forward(mu[None, :])
    return y_hat[0] * model.response_scale + model.response_mean


def save_model(model: AntlerModel, path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    document = {
        MODEL_TAG: True,
        'latent_dim': model.latent_dim,
        'm_r': model.m_r,
        'loss_samples': model.loss_samples,
        'lambdas': list(model.lambdas),
        'normalization': 'index / (dim - 1) per axis, dim = 1 -> 0',
        'response_mean': model.response_mean.tolist(),
        'response_scale': model.response_scale.tolist(),
        'metadata': model.metadata,
        'encoder': model.encoder.to_dict(),
        'decoder': model.decoder.to_dict(),
        'regressor': model.regressor.to_dict(),
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(document, f, ensure_ascii=False)


def load_model(path: str) -> AntlerModel:
    with open(path, 'r', encoding='utf-8') as f:
        document = json.load(f)
    if not document.get(MODEL_TAG):
        raise ValueError(f"{path} 不是 {MODEL_TAG} 模型文件")
    return AntlerModel(
        MlpParams.from_dict(document['encoder']),
        MlpParams.from_dict(document['decoder']),
        MlpParams.from_dict(document['regressor']),
        tuple(document['lambdas']), int(document['loss_samples']),
        int(document['latent_dim']), int(document['m_r']),
        np.array(document['response_mean']), np.array(document['response_scale']),
        document.get('metadata', {}),
    )
