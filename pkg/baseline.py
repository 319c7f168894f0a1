#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
对比基线：各坐标轴最小/最大点特征 + k近邻回归，以及均值预测器
全部为确定性计算，不使用随机数
"""

import os
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from point_io import EmptyCloudError, PointCloud

AXES = ('x', 'y', 'z')
TAILS = ('min', 'max')


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """长度 18·k_f：轴 → (最小, 最大) → 名次，每个点贡献 (x, y, z)"""
    values: np.ndarray
    sample_id: str = ""

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(values)):
            raise ValueError("特征含非有限值")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    def __len__(self) -> int:
        return self.values.shape[0]


def feature_names(k_f: int) -> List[str]:
    return [f"{axis}_{tail}_{rank}_{coord}"
            for axis in AXES for tail in TAILS for rank in range(k_f) for coord in AXES]


def _take(order: np.ndarray, k_f: int) -> np.ndarray:
    if order.shape[0] >= k_f:
        return order[:k_f]
    # 点数不足时重复最后一个入选点
    return np.concatenate([order, np.repeat(order[-1:], k_f - order.shape[0])])


def extract_minmax_features(cloud: PointCloud, k_f: int) -> FeatureVector:
    """对每个轴按坐标排序（同值按 (x, y, z) 字典序再按原索引），取两端各 k_f 个点的坐标"""
    if k_f < 1:
        raise ValueError("k_f 必须 >= 1")
    points = np.asarray(cloud.points)
    if points.shape[0] == 0:
        raise EmptyCloudError("空点云无法提取特征")
    if points.shape[0] < k_f:
        logger.warning(f"⚠️ {cloud.sample_id} 只有 {points.shape[0]} 个点，少于 k_f={k_f}，用重复点补齐")
    index = np.arange(points.shape[0])
    blocks = []
    for axis in range(3):
        order = np.lexsort((index, points[:, 2], points[:, 1], points[:, 0], points[:, axis]))
        blocks.append(points[_take(order, k_f)])
        blocks.append(points[_take(order[::-1], k_f)])
    return FeatureVector(np.concatenate([b.ravel() for b in blocks]), cloud.sample_id)


def feature_matrix(clouds: Sequence[PointCloud], k_f: int) -> np.ndarray:
    return np.vstack([extract_minmax_features(c, k_f).values for c in clouds])


def baseline_fit_predict(train_features: np.ndarray, train_responses: np.ndarray,
                         test_features: np.ndarray, k_nn: int) -> np.ndarray:
    """
    标准化特征空间中的k近邻回归：按训练集统计量z-score，方差为0的维度不参与距离；
    近邻按 (距离, 训练索引) 排序，反距离加权；存在零距离近邻时取这些近邻响应的均值
    """
    train_features = np.asarray(train_features, dtype=np.float64)
    test_features = np.atleast_2d(np.asarray(test_features, dtype=np.float64))
    responses = np.asarray(train_responses, dtype=np.float64)
    if responses.ndim == 1:
        responses = responses[:, None]
    n_train = train_features.shape[0]
    if not 1 <= k_nn <= n_train:
        raise ValueError(f"k_nn={k_nn} 必须在 [1, {n_train}] 内")

    mean = train_features.mean(axis=0)
    std = train_features.std(axis=0)
    keep = std > 0
    if not np.all(keep):
        logger.debug(f"{int((~keep).sum())} 个特征维度方差为0，不参与距离计算")
    train_z = (train_features[:, keep] - mean[keep]) / std[keep]
    test_z = (test_features[:, keep] - mean[keep]) / std[keep]

    index = np.arange(n_train)
    predictions = np.empty((test_z.shape[0], responses.shape[1]))
    for t, query in enumerate(test_z):
        distances = np.sqrt(np.sum((train_z - query) ** 2, axis=1))
        nearest = np.lexsort((index, distances))[:k_nn]
        d = distances[nearest]
        if np.any(d == 0):
            predictions[t] = responses[nearest[d == 0]].mean(axis=0)
        else:
            weights = 1.0 / d
            predictions[t] = weights @ responses[nearest] / weights.sum()
    return predictions


def mean_predictor(train_responses: np.ndarray, n_test: int) -> np.ndarray:
    """每个预测都等于训练响应的逐列均值"""
    responses = np.asarray(train_responses, dtype=np.float64)
    if responses.ndim == 1:
        responses = responses[:, None]
    if responses.shape[0] < 1:
        raise ValueError("均值预测器至少需要一个训练响应")
    return np.tile(responses.mean(axis=0), (n_test, 1))


class MinMaxKnnBaseline:
    """特征提取 + k近邻的拟合/预测封装"""

    def __init__(self, k_features: int = 64, k_nn: int = 5):
        self.k_features = k_features
        self.k_nn = k_nn
        self.train_features: Optional[np.ndarray] = None
        self.train_responses: Optional[np.ndarray] = None

    def fit(self, clouds: Sequence[PointCloud], responses: np.ndarray) -> 'MinMaxKnnBaseline':
        self.train_features = feature_matrix(clouds, self.k_features)
        self.train_responses = np.asarray(responses, dtype=np.float64).reshape(len(clouds), -1)
        return self

    def predict(self, clouds: Sequence[PointCloud]) -> np.ndarray:
        if self.train_features is None:
            raise RuntimeError("基线模型尚未拟合")
        k_nn = min(self.k_nn, self.train_features.shape[0])
        return baseline_fit_predict(self.train_features, self.train_responses,
                                    feature_matrix(clouds, self.k_features), k_nn)


def save_features_csv(clouds: Sequence[PointCloud], k_f: int, path: str) -> pd.DataFrame:
    """每个样本一行，首列为 sample_id"""
    frame = pd.DataFrame(feature_matrix(clouds, k_f), columns=feature_names(k_f))
    frame.insert(0, 'sample_id', [c.sample_id for c in clouds])
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False, float_format='%.17g')
    logger.info(f"特征已保存到: {path}")
    return frame
