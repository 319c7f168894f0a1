#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
贝叶斯优化调参：平方指数核高斯过程 + 期望改进（EI，最小化约定）
用于在 log10 λ 空间搜索 (λ1, λ2, λ3)，目标为交叉验证RMSE
"""

import itertools
import os
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.stats import norm, qmc
from tqdm import tqdm

KERNEL_JITTER = 1e-8
PENALTY_VALUE = 1e6

# 超参数网格：长度尺度按搜索区间宽度的比例给出
LENGTH_SCALE_FRACTIONS = (0.05, 0.1, 0.2, 0.35, 0.5, 1.0, 2.0)
SIGNAL_VAR_FACTORS = (0.25, 1.0, 4.0)
NOISE_VAR_FACTORS = (1e-6, 1e-4, 1e-2)


class SingularKernelError(RuntimeError):
    """核矩阵加抖动后仍不可分解"""


@dataclass(frozen=True, eq=False)
class BoState:
    """观测点 (n, d)、目标值 (n,) 与核超参数"""
    points: np.ndarray
    values: np.ndarray
    length_scales: np.ndarray
    signal_var: float = 1.0
    noise_var: float = 0.0

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        values = np.asarray(self.values, dtype=np.float64).ravel()
        scales = np.broadcast_to(np.asarray(self.length_scales, dtype=np.float64),
                                 (points.shape[1],)).copy()
        if points.shape[0] != values.shape[0]:
            raise ValueError(f"观测点数 {points.shape[0]} 与目标值个数 {values.shape[0]} 不一致")
        if not np.all(np.isfinite(values)):
            raise ValueError("观测值必须为有限值")
        if np.any(scales <= 0) or self.signal_var <= 0 or self.noise_var < 0:
            raise ValueError("核超参数必须为正")
        for array in (points, values, scales):
            array.setflags(write=False)
        object.__setattr__(self, 'points', points)
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'length_scales', scales)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def prior_mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def best_value(self) -> float:
        return float(np.min(self.values))

    def add(self, point: np.ndarray, value: float) -> 'BoState':
        return BoState(np.vstack([self.points, point]), np.append(self.values, value),
                       self.length_scales, self.signal_var, self.noise_var)

    def with_kernel(self, length_scales, signal_var: float, noise_var: float) -> 'BoState':
        return BoState(self.points, self.values, length_scales, signal_var, noise_var)


def _kernel(a: np.ndarray, b: np.ndarray, length_scales: np.ndarray, signal_var: float) -> np.ndarray:
    diff = (a[:, None, :] - b[None, :, :]) / length_scales
    return signal_var * np.exp(-0.5 * np.sum(diff ** 2, axis=-1))


def _factorize(state: BoState):
    n = state.points.shape[0]
    gram = _kernel(state.points, state.points, state.length_scales, state.signal_var)
    gram = gram + state.noise_var * np.eye(n)
    try:
        return cho_factor(gram, lower=True)
    except LinAlgError:
        logger.debug("核矩阵不可分解，加抖动重试")
    try:
        return cho_factor(gram + KERNEL_JITTER * np.eye(n), lower=True)
    except LinAlgError:
        raise SingularKernelError("核矩阵加抖动后仍然奇异")


def gp_predict(state: BoState, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """批量后验均值与方差，queries 形状 (m, d)"""
    if state.points.shape[0] < 1:
        raise ValueError("高斯过程至少需要一个观测")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    factor = _factorize(state)
    resid = state.values - state.prior_mean
    cross = _kernel(queries, state.points, state.length_scales, state.signal_var)
    mean = state.prior_mean + cross @ cho_solve(factor, resid)
    var = state.signal_var - np.sum(cross * cho_solve(factor, cross.T).T, axis=1)
    return mean, np.maximum(var, 0.0)


def gp_posterior(state: BoState, query: np.ndarray) -> Tuple[float, float]:
    mean, var = gp_predict(state, np.asarray(query, dtype=np.float64).reshape(1, -1))
    return float(mean[0]), float(var[0])


def ei_from_moments(mean, sd, best: float):
    """EI = (best - μ)Φ(u) + σφ(u)，σ = 0 时退化为 max(best - μ, 0)"""
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    gain = best - mean
    safe_sd = np.where(sd > 0, sd, 1.0)
    u = gain / safe_sd
    value = gain * norm.cdf(u) + safe_sd * norm.pdf(u)
    return np.maximum(np.where(sd > 0, value, np.maximum(gain, 0.0)), 0.0)


def expected_improvement(state: BoState, query: np.ndarray) -> float:
    mean, var = gp_posterior(state, query)
    return float(ei_from_moments(mean, np.sqrt(var), state.best_value))


def log_marginal_likelihood(state: BoState) -> float:
    factor = _factorize(state)
    resid = state.values - state.prior_mean
    n = resid.shape[0]
    return float(-0.5 * resid @ cho_solve(factor, resid)
                 - np.sum(np.log(np.diag(factor[0])))
                 - 0.5 * n * np.log(2.0 * np.pi))


def fit_hyperparameters(state: BoState, spans: Optional[Sequence[float]] = None) -> BoState:
    """在网格上最大化边际似然（各向同性长度尺度，按区间宽度缩放）"""
    spans = np.ones(state.dim) if spans is None else np.asarray(spans, dtype=np.float64)
    scale = max(float(np.var(state.values)), 1e-12)
    best_state, best_score = state, -np.inf
    for fraction, s_factor, n_factor in itertools.product(
            LENGTH_SCALE_FRACTIONS, SIGNAL_VAR_FACTORS, NOISE_VAR_FACTORS):
        candidate = state.with_kernel(fraction * spans, s_factor * scale, n_factor * scale)
        try:
            score = log_marginal_likelihood(candidate)
        except SingularKernelError:
            continue
        if score > best_score:
            best_state, best_score = candidate, score
    logger.debug(f"GP超参数: ℓ={best_state.length_scales}, σ²={best_state.signal_var:.3g}, "
                 f"噪声={best_state.noise_var:.3g}, logML={best_score:.3f}")
    return best_state


def _propose(state: BoState, lower: np.ndarray, upper: np.ndarray, rng: np.random.Generator,
             n_candidates: int) -> np.ndarray:
    """均匀候选点上取EI最大者，再用L-BFGS-B局部细化"""
    candidates = rng.uniform(lower, upper, size=(n_candidates, lower.shape[0]))
    mean, var = gp_predict(state, candidates)
    scores = ei_from_moments(mean, np.sqrt(var), state.best_value)
    start = candidates[int(np.argmax(scores))]
    best_score = float(scores.max())

    def negative_ei(x):
        return -float(expected_improvement(state, x))

    try:
        result = minimize(negative_ei, start, method='L-BFGS-B', bounds=list(zip(lower, upper)))
        if result.success and -result.fun > best_score:
            return np.clip(result.x, lower, upper)
    except (ValueError, SingularKernelError) as e:
        logger.debug(f"EI局部细化失败: {e}")
    return start


def _default_names(dim: int) -> List[str]:
    if dim == 3:
        return ['log_lambda1', 'log_lambda2', 'log_lambda3']
    return [f'x{i + 1}' for i in range(dim)]


def bo_optimize(objective: Callable[[np.ndarray], float], bounds: Sequence[Sequence[float]],
                budget: int, seed: int, initial_design: int = 8, n_candidates: int = 1024,
                names: Optional[List[str]] = None) -> Tuple[np.ndarray, float, pd.DataFrame]:
    """
    最小化黑箱目标函数
    返回 (最优点, 最优值, 轨迹DataFrame)；非有限目标值记为惩罚值 1e6
    """
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.ndim != 2 or bounds.shape[1] != 2 or np.any(bounds[:, 0] >= bounds[:, 1]):
        raise ValueError(f"无效的搜索区间: {bounds.tolist()}")
    if budget < initial_design:
        raise ValueError(f"预算 {budget} 小于初始设计点数 {initial_design}")
    lower, upper = bounds[:, 0], bounds[:, 1]
    dim = bounds.shape[0]
    names = names or _default_names(dim)
    rng = np.random.default_rng(seed)

    sampler = qmc.LatinHypercube(d=dim, seed=rng)
    design = qmc.scale(sampler.random(initial_design), lower, upper)

    rows = []
    state: Optional[BoState] = None

    def evaluate(iteration: int, point: np.ndarray):
        nonlocal state
        try:
            value = float(objective(point))
        except Exception as e:
            logger.error(f"❌ 第 {iteration} 次评估出错: {e}")
            value = float('nan')
        if not np.isfinite(value):
            logger.warning(f"⚠️ 第 {iteration} 次评估得到非有限值，记为惩罚值 {PENALTY_VALUE:g}")
            value = PENALTY_VALUE
        if state is None:
            state = BoState(point[None, :], [value], upper - lower, 1.0, 0.0)
        else:
            state = state.add(point, value)
        rows.append({'iter': iteration, **dict(zip(names, point.tolist())),
                     'objective': value, 'incumbent': state.best_value})

    for iteration in range(initial_design):
        evaluate(iteration, design[iteration])

    for iteration in tqdm(range(initial_design, budget), desc="贝叶斯优化", leave=False):
        state = fit_hyperparameters(state, upper - lower)
        evaluate(iteration, _propose(state, lower, upper, rng, n_candidates))
        logger.debug(f"BO 第 {iteration} 次: 当前最优 {state.best_value:.6g}")

    best = int(np.argmin(state.values))
    trace = pd.DataFrame(rows, columns=['iter', *names, 'objective', 'incumbent'])
    return state.points[best].copy(), float(state.values[best]), trace


def tune_lambdas(evaluate: Callable[[Tuple[float, float, float]], float],
                 bounds: Sequence[Sequence[float]], budget: int, seed: int,
                 initial_design: int = 8, n_candidates: int = 1024
                 ) -> Tuple[Tuple[float, float, float], float, pd.DataFrame]:
    """在 log10 λ 空间调参，evaluate 接收 λ 原值"""
    def objective(log_point: np.ndarray) -> float:
        return evaluate(tuple(float(v) for v in 10.0 ** log_point))

    best_point, best_value, trace = bo_optimize(objective, bounds, budget, seed,
                                                initial_design, n_candidates)
    lambdas = tuple(float(v) for v in 10.0 ** best_point)
    logger.info(f"✅ 调参完成: λ = {lambdas}, CV RMSE = {best_value:.6g}")
    return lambdas, best_value, trace


def save_trace(trace: pd.DataFrame, path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    trace.to_csv(path, index=False, float_format='%.17g')
