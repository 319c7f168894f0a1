#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
流式非线性贝叶斯张量分解（SNBTD）
稀疏谱高斯过程（随机傅里叶特征）+ probit似然 + 因子化高斯后验，
按patch做假定密度滤波（矩匹配），patch内各条目基于同一个patch前后验并行计算，再阻尼融合。
"""

import json
import os
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import log_ndtr, logsumexp, ndtr, roots_hermitenorm
from scipy.stats import norm, rankdata
from tqdm import tqdm

CHECKPOINT_TAG = "snbtd_checkpoint_v1"
MIN_COV_EIGENVALUE = 1e-10
COV_JITTER = 1e-8


class SingularPosteriorError(RuntimeError):
    """权重协方差数值奇异（加抖动重试后仍失败）"""


class EntryIndexError(ValueError):
    """条目索引超出模态范围"""


@dataclass(frozen=True, eq=False)
class GaussianFactor:
    """一组独立高斯因子：mean 与 var 同形状，var 为正"""
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        var = np.array(self.var, dtype=np.float64)
        if mean.shape != var.shape:
            raise ValueError(f"均值形状 {mean.shape} 与方差形状 {var.shape} 不一致")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise ValueError("高斯因子含非有限值")
        if np.any(var <= 0):
            raise ValueError("高斯因子方差必须为正")
        mean.setflags(write=False)
        var.setflags(write=False)
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'var', var)


@dataclass(frozen=True)
class EntryObservation:
    """一个观测条目：K个模态索引 + 二值 b"""
    index: Tuple[int, ...]
    bit: int


@dataclass(frozen=True, eq=False)
class SnbtdPosterior:
    """
    嵌入矩阵 U^k (d_k × r_k)、频率矩阵 S (M × R)、权重 w ~ N(η, Σ)，长度 2M；
    skipped_patches 记录拟合过程中因数值奇异而跳过的patch数
    """
    embeddings: Tuple[GaussianFactor, ...]
    frequencies: GaussianFactor
    weight_mean: np.ndarray
    weight_cov: np.ndarray
    skipped_patches: int = 0

    def __post_init__(self):
        embeddings = tuple(self.embeddings)
        object.__setattr__(self, 'embeddings', embeddings)
        rank_total = sum(f.mean.shape[1] for f in embeddings)
        m = self.frequencies.mean.shape[0]
        if self.frequencies.mean.shape[1] != rank_total:
            raise ValueError(f"频率矩阵列数 {self.frequencies.mean.shape[1]} 应等于 R={rank_total}")
        eta = np.array(self.weight_mean, dtype=np.float64)
        cov = np.array(self.weight_cov, dtype=np.float64)
        if eta.shape != (2 * m,) or cov.shape != (2 * m, 2 * m):
            raise ValueError(f"权重维度应为 2M={2 * m}")
        eta.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, 'weight_mean', eta)
        object.__setattr__(self, 'weight_cov', cov)

    @property
    def n_modes(self) -> int:
        return len(self.embeddings)

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(f.mean.shape[0] for f in self.embeddings)

    @property
    def ranks(self) -> Tuple[int, ...]:
        return tuple(f.mean.shape[1] for f in self.embeddings)

    @property
    def n_frequencies(self) -> int:
        return self.frequencies.mean.shape[0]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.ranks)])

    def check_indices(self, indices: np.ndarray):
        indices = np.asarray(indices)
        if indices.ndim != 2 or indices.shape[1] != self.n_modes:
            raise EntryIndexError(f"索引应有 {self.n_modes} 个模态")
        dims = np.asarray(self.dims)
        if indices.size and (indices.min() < 0 or np.any(indices >= dims)):
            raise EntryIndexError(f"索引超出模态范围 {self.dims}")

    def gather(self, indices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """按索引拼接各模态嵌入行，返回 x 的均值与方差 (n, R)"""
        means = [f.mean[indices[:, k]] for k, f in enumerate(self.embeddings)]
        variances = [f.var[indices[:, k]] for k, f in enumerate(self.embeddings)]
        return np.hstack(means), np.hstack(variances)


def init_posterior(dims: Sequence[int], ranks: Sequence[int], n_frequencies: int,
                   seed: int) -> SnbtdPosterior:
    """
    按先验初始化：嵌入与频率均值来自标准正态（先按模态顺序抽嵌入，再抽频率），方差为1；
    权重均值为0，协方差 (1/M)·I
    """
    dims, ranks = list(dims), list(ranks)
    if len(dims) != len(ranks) or not dims:
        raise ValueError("dims 与 ranks 长度必须一致且非空")
    if min(dims) < 1 or min(ranks) < 1 or n_frequencies < 1:
        raise ValueError(f"维度必须为正: dims={dims}, ranks={ranks}, M={n_frequencies}")
    rng = np.random.default_rng(seed)
    embeddings = [GaussianFactor(rng.standard_normal((d, r)), np.ones((d, r)))
                  for d, r in zip(dims, ranks)]
    rank_total = sum(ranks)
    frequencies = GaussianFactor(rng.standard_normal((n_frequencies, rank_total)),
                                 np.ones((n_frequencies, rank_total)))
    return SnbtdPosterior(
        embeddings, frequencies,
        np.zeros(2 * n_frequencies),
        np.eye(2 * n_frequencies) / n_frequencies,
    )


def fourier_features(x: np.ndarray, frequency_means: np.ndarray) -> np.ndarray:
    """φ(x) = M^{-1/2} [cos(S̄x); sin(S̄x)]，支持 (R,) 或 (n, R) 输入"""
    x = np.asarray(x, dtype=np.float64)
    frequency_means = np.asarray(frequency_means, dtype=np.float64)
    if x.shape[-1] != frequency_means.shape[1]:
        raise ValueError(f"x 长度 {x.shape[-1]} 与频率矩阵列数 {frequency_means.shape[1]} 不一致")
    angles = x @ frequency_means.T
    return np.concatenate([np.cos(angles), np.sin(angles)], axis=-1) / np.sqrt(frequency_means.shape[0])


def _as_arrays(patch, n_modes: int) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(patch, np.ndarray):
        patch = np.asarray(patch, dtype=np.int64).reshape(-1, n_modes + 1)
        return patch[:, :n_modes], patch[:, n_modes]
    patch = list(patch)
    if not patch:
        return np.empty((0, n_modes), dtype=np.int64), np.empty(0, dtype=np.int64)
    indices = np.array([obs.index for obs in patch], dtype=np.int64)
    bits = np.array([obs.bit for obs in patch], dtype=np.int64)
    return indices, bits


def _probit_tilted_gh(mean: np.ndarray, var: np.ndarray, sign: np.ndarray,
                      nodes: np.ndarray, log_weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gauss–Hermite 计算 Φ(y·f)·N(f | mean, var) 的一阶/二阶矩，
    返回 α = ∂logZ/∂mean 与 β = -∂²logZ/∂mean²
    """
    sd = np.sqrt(var)
    f = mean[:, None] + sd[:, None] * nodes[None, :]
    log_p = log_weights[None, :] + log_ndtr(sign[:, None] * f)
    p = np.exp(log_p - logsumexp(log_p, axis=1, keepdims=True))
    first = np.sum(p * f, axis=1)
    tilted_var = np.maximum(np.sum(p * f * f, axis=1) - first ** 2, 0.0)
    alpha = (first - mean) / var
    beta = (var - tilted_var) / var ** 2
    # 对数凹似然下 0 <= β < 1/var
    beta = np.clip(beta, 0.0, (1.0 - 1e-6) / var)
    return alpha, beta


def _blend_diagonal(factor: GaussianFactor, tau: np.ndarray, nu: np.ndarray, touched: np.ndarray,
                    damping: float, variance_floor: float) -> GaussianFactor:
    """在自然参数上阻尼融合对角高斯因子的站点更新"""
    if not np.any(touched):
        return factor
    mean, var = factor.mean.copy(), factor.var.copy()
    precision = 1.0 / var[touched] + damping * tau[touched]
    shift = mean[touched] / var[touched] + damping * nu[touched]
    mean[touched] = shift / precision
    var[touched] = np.maximum(1.0 / precision, variance_floor)
    return GaussianFactor(mean, var)


def _posterior_covariance(precision: np.ndarray) -> np.ndarray:
    """由精度矩阵求协方差，失败时加一次抖动重试"""
    size = precision.shape[0]
    for attempt in range(2):
        try:
            factor = cho_factor(precision, lower=True)
            cov = cho_solve(factor, np.eye(size))
            cov = 0.5 * (cov + cov.T)
            if attempt == 1:
                cov = cov + COV_JITTER * np.eye(size)
            if np.all(np.isfinite(cov)) and np.linalg.eigvalsh(cov)[0] >= MIN_COV_EIGENVALUE:
                return cov
        except (LinAlgError, ValueError):
            pass
        logger.warning("⚠️ 权重协方差数值奇异，加抖动重试")
        precision = precision + COV_JITTER * np.eye(size)
    raise SingularPosteriorError("权重协方差加抖动后仍然奇异")


def update_patch(posterior: SnbtdPosterior, patch: Union[Sequence[EntryObservation], np.ndarray],
                 gh_nodes: int = 9, damping: float = 0.5,
                 variance_floor: float = 1e-8) -> SnbtdPosterior:
    """
    吸收一个patch的probit似然：
    - 权重因子 q(w) 用高斯-probit闭式倾斜矩
    - 嵌入与频率因子在当前均值处对 wᵀφ(x) 一阶泰勒线性化，倾斜矩用Gauss–Hermite积分
    所有条目都基于patch前的后验计算，站点自然参数求和后以阻尼系数融合
    """
    indices, bits = _as_arrays(patch, posterior.n_modes)
    if indices.shape[0] == 0:
        return posterior
    posterior.check_indices(indices)
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("条目值只能为0或1")

    m = posterior.n_frequencies
    scale = 1.0 / np.sqrt(m)
    sign = 2.0 * bits - 1.0
    s_mean, s_var = posterior.frequencies.mean, posterior.frequencies.var
    eta, sigma = posterior.weight_mean, posterior.weight_cov
    x_mean, x_var = posterior.gather(indices)

    angles = x_mean @ s_mean.T
    cos_a, sin_a = np.cos(angles), np.sin(angles)
    phi = scale * np.hstack([cos_a, sin_a])
    f_mean = phi @ eta
    sigma_phi = phi @ sigma
    v_w = np.maximum(np.sum(phi * sigma_phi, axis=1), 0.0)

    # ∂f/∂a_m，a = S̄x
    coef = scale * (-eta[:m] * sin_a + eta[m:] * cos_a)
    g_x = coef @ s_mean
    v_x = np.sum(g_x ** 2 * x_var, axis=1)
    v_s = np.sum(coef ** 2 * ((x_mean ** 2) @ s_var.T), axis=1)
    v_f = np.maximum(v_w + v_x + v_s, 1e-12)

    # 权重：闭式probit倾斜矩
    root = np.sqrt(1.0 + v_f)
    z = sign * f_mean / root
    ratio = np.exp(norm.logpdf(z) - log_ndtr(z))
    alpha_w = sign * ratio / root
    beta_w = ratio * (z + ratio) / (1.0 + v_f)
    denom_w = 1.0 - v_w * beta_w
    tau_w = beta_w / denom_w
    nu_w = (alpha_w + f_mean * beta_w) / denom_w

    precision = cho_solve(cho_factor(sigma, lower=True), np.eye(2 * m))
    precision_new = precision + damping * (phi.T * tau_w) @ phi
    shift_new = precision @ eta + damping * phi.T @ nu_w
    precision_new = 0.5 * (precision_new + precision_new.T)
    cov_new = _posterior_covariance(precision_new)
    eta_new = cov_new @ shift_new

    # 嵌入与频率：泰勒线性化 + Gauss–Hermite
    nodes, weights = roots_hermitenorm(gh_nodes)
    alpha, beta = _probit_tilted_gh(f_mean, v_f, sign, nodes, np.log(weights / np.sqrt(2 * np.pi)))

    offsets = posterior.offsets
    new_embeddings = []
    for k, factor in enumerate(posterior.embeddings):
        cols = slice(offsets[k], offsets[k + 1])
        g = g_x[:, cols]
        mu, var = x_mean[:, cols], x_var[:, cols]
        denom = np.maximum(1.0 - var * g ** 2 * beta[:, None], 1e-12)
        tau = g ** 2 * beta[:, None] / denom
        nu = (g * alpha[:, None] + mu * g ** 2 * beta[:, None]) / denom
        tau_sum = np.zeros_like(factor.mean)
        nu_sum = np.zeros_like(factor.mean)
        np.add.at(tau_sum, indices[:, k], tau)
        np.add.at(nu_sum, indices[:, k], nu)
        touched = np.zeros(factor.mean.shape, dtype=bool)
        touched[np.unique(indices[:, k])] = True
        new_embeddings.append(_blend_diagonal(factor, tau_sum, nu_sum, touched, damping, variance_floor))

    # ∂f/∂s_mj = coef_m · x_j
    g_s = coef[:, :, None] * x_mean[:, None, :]
    denom_s = np.maximum(1.0 - s_var[None] * g_s ** 2 * beta[:, None, None], 1e-12)
    tau_s = np.sum(g_s ** 2 * beta[:, None, None] / denom_s, axis=0)
    nu_s = np.sum((g_s * alpha[:, None, None] + s_mean[None] * g_s ** 2 * beta[:, None, None]) / denom_s,
                  axis=0)
    new_frequencies = _blend_diagonal(posterior.frequencies, tau_s, nu_s,
                                      np.ones(s_mean.shape, dtype=bool), damping, variance_floor)

    return SnbtdPosterior(new_embeddings, new_frequencies, eta_new, cov_new)


def predict_entries(posterior: SnbtdPosterior, indices: np.ndarray) -> np.ndarray:
    """Φ(ηᵀφ(x̄) / sqrt(1 + φ(x̄)ᵀΣφ(x̄)))，x̄ 为嵌入均值拼接"""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, posterior.n_modes)
    posterior.check_indices(indices)
    x_mean, _ = posterior.gather(indices)
    phi = fourier_features(x_mean, posterior.frequencies.mean)
    f_mean = phi @ posterior.weight_mean
    v_w = np.maximum(np.sum(phi * (phi @ posterior.weight_cov), axis=1), 0.0)
    return ndtr(f_mean / np.sqrt(1.0 + v_w))


def predict_entry(posterior: SnbtdPosterior, index: Sequence[int]) -> float:
    return float(predict_entries(posterior, np.asarray([index]))[0])


def sample_embedding_means(posterior: SnbtdPosterior, sample_mode: int) -> np.ndarray:
    """样本模态嵌入的后验均值；第 i 行是样本 i 的正则化目标"""
    if not 0 <= sample_mode < posterior.n_modes:
        raise ValueError(f"模态 {sample_mode} 超出范围 [0, {posterior.n_modes})")
    return np.array(posterior.embeddings[sample_mode].mean)


def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Mann–Whitney 形式的ROC AUC"""
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC 需要正负两类样本")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def build_joint_entries(samples) -> Tuple[np.ndarray, np.ndarray, Tuple[int, ...]]:
    """
    把多个平衡样本拼成 (x, y, z, sample) 四模态条目流；
    前三个模态大小取各样本网格维度的最大值
    """
    if not samples:
        raise ValueError("没有样本")
    dims = np.max([s.grid.dims for s in samples], axis=0)
    blocks = []
    for position, sample in enumerate(samples):
        entries = sample.entries
        column = np.full((entries.shape[0], 1), position, dtype=np.int64)
        blocks.append(np.hstack([entries[:, :3], column, entries[:, 3:]]))
    stacked = np.vstack(blocks)
    return stacked[:, :4], stacked[:, 4], (int(dims[0]), int(dims[1]), int(dims[2]), len(samples))


def fit_snbtd(indices: np.ndarray, bits: np.ndarray, dims: Sequence[int], ranks: Sequence[int],
              n_frequencies: int = 128, patch_size: int = 512, epochs: int = 1, seed: int = 0,
              gh_nodes: int = 9, damping: float = 0.5, variance_floor: float = 1e-8,
              posterior: Optional[SnbtdPosterior] = None,
              max_skip_fraction: float = 0.5) -> SnbtdPosterior:
    """
    对条目流按patch顺序做流式更新；每遍历一次重新打乱条目顺序。
    数值奇异的patch被跳过并计入返回后验的 skipped_patches；
    跳过的比例超过 max_skip_fraction 时抛出 SingularPosteriorError
    """
    if not 0.0 <= max_skip_fraction <= 1.0:
        raise ValueError(f"max_skip_fraction 应在 [0, 1] 内: {max_skip_fraction}")
    init_seed, order_seed = np.random.SeedSequence(seed).generate_state(2)
    if posterior is None:
        posterior = init_posterior(dims, ranks, n_frequencies, int(init_seed))
    rng = np.random.default_rng(int(order_seed))
    stream = np.hstack([np.asarray(indices, dtype=np.int64), np.asarray(bits, dtype=np.int64)[:, None]])
    n_patches = int(np.ceil(len(stream) / patch_size))
    logger.info(f"SNBTD: {len(stream)} 个条目, dims={tuple(dims)}, ranks={tuple(ranks)}, "
                f"M={posterior.n_frequencies}, {epochs} 遍 × {n_patches} 个patch")
    previous = posterior.skipped_patches
    skipped = 0
    for epoch in range(epochs):
        order = rng.permutation(len(stream))
        for p in tqdm(range(n_patches), desc=f"SNBTD 第{epoch + 1}遍", leave=False):
            patch = stream[order[p * patch_size:(p + 1) * patch_size]]
            try:
                posterior = update_patch(posterior, patch, gh_nodes=gh_nodes, damping=damping,
                                         variance_floor=variance_floor)
            except SingularPosteriorError as e:
                skipped += 1
                logger.warning(f"⚠️ 跳过第 {p} 个patch: {e}")
    total = epochs * n_patches
    if skipped:
        logger.warning(f"⚠️ SNBTD 共跳过 {skipped}/{total} 个数值奇异的patch")
    if total and skipped > max_skip_fraction * total:
        raise SingularPosteriorError(f"跳过的patch过多: {skipped}/{total} 超过上限 {max_skip_fraction:.0%}")
    return replace(posterior, skipped_patches=previous + skipped)


def _factor_to_dict(factor: GaussianFactor) -> dict:
    return {'mean': factor.mean.tolist(), 'var': factor.var.tolist()}


def save_checkpoint(posterior: SnbtdPosterior, path: str):
    """自描述JSON检查点，权重协方差按行优先稠密存储"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    document = {
        CHECKPOINT_TAG: True,
        'dims': list(posterior.dims),
        'ranks': list(posterior.ranks),
        'M': posterior.n_frequencies,
        'embeddings': [_factor_to_dict(f) for f in posterior.embeddings],
        'frequencies': _factor_to_dict(posterior.frequencies),
        'weight_mean': posterior.weight_mean.tolist(),
        'weight_cov': posterior.weight_cov.ravel().tolist(),
        'skipped_patches': posterior.skipped_patches,
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(document, f, ensure_ascii=False)


def load_checkpoint(path: str) -> SnbtdPosterior:
    with open(path, 'r', encoding='utf-8') as f:
        document = json.load(f)
    if not document.get(CHECKPOINT_TAG):
        raise ValueError(f"{path} 不是 {CHECKPOINT_TAG} 检查点")
    m = int(document['M'])
    embeddings: List[GaussianFactor] = [GaussianFactor(np.array(e['mean']), np.array(e['var']))
                                        for e in document['embeddings']]
    frequencies = GaussianFactor(np.array(document['frequencies']['mean']),
                                 np.array(document['frequencies']['var']))
    return SnbtdPosterior(embeddings, frequencies, np.array(document['weight_mean']),
                          np.array(document['weight_cov']).reshape(2 * m, 2 * m),
                          int(document.get('skipped_patches', 0)))
