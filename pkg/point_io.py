#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
点云读写与数据集清单
.xyz 文本格式：'#' 开头为注释，每行一个 "x y z"
manifest.csv：sample_id,path,y_1,...,y_p
"""

import os
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from tqdm import tqdm


class XyzParseError(ValueError):
    """点文件格式错误，line_no 为1起始的行号"""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"第{line_no}行: {message}")
        self.line_no = line_no


class EmptyCloudError(ValueError):
    """点云为空"""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class PointCloud:
    """一个样本的点云 X_i，形状 (M_i, 3)"""
    points: np.ndarray
    sample_id: str = ""

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"点云形状应为 (M, 3)，实际为 {points.shape}")
        if points.shape[0] < 1:
            raise EmptyCloudError(f"点云 {self.sample_id!r} 不含任何点")
        if not np.all(np.isfinite(points)):
            raise ValueError(f"点云 {self.sample_id!r} 含非有限坐标")
        object.__setattr__(self, 'points', _frozen(points))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n_distinct(self) -> int:
        return int(np.unique(self.points, axis=0).shape[0])


@dataclass(frozen=True, eq=False)
class Dataset:
    """样本点云及其响应矩阵 Y (N × p)"""
    samples: Tuple[PointCloud, ...]
    responses: np.ndarray

    def __post_init__(self):
        responses = np.asarray(self.responses, dtype=np.float64)
        if responses.ndim == 1:
            responses = responses[:, None]
        if responses.shape[0] != len(self.samples):
            raise ValueError(f"响应行数 {responses.shape[0]} 与样本数 {len(self.samples)} 不一致")
        if not np.all(np.isfinite(responses)):
            raise ValueError("响应中含非有限值")
        object.__setattr__(self, 'samples', tuple(self.samples))
        object.__setattr__(self, 'responses', _frozen(responses))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_responses(self) -> int:
        return self.responses.shape[1]

    def subset(self, indices: Sequence[int]) -> 'Dataset':
        indices = list(indices)
        return Dataset([self.samples[i] for i in indices], self.responses[indices])


@dataclass(frozen=True, eq=False)
class Box3:
    """轴对齐包围盒"""
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower, upper = _frozen(self.lower), _frozen(self.upper)
        if lower.shape != (3,) or upper.shape != (3,):
            raise ValueError("包围盒边界必须是三维向量")
        if np.any(lower > upper):
            raise ValueError(f"包围盒下界大于上界: {lower} > {upper}")
        object.__setattr__(self, 'lower', lower)
        object.__setattr__(self, 'upper', upper)

    @property
    def extent(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return np.all((points >= self.lower) & (points <= self.upper), axis=1)


def parse_xyz(text: str, sample_id: str = "") -> PointCloud:
    """解析 .xyz 文本为点云"""
    rows = []
    for line_no, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith('#'):
            continue
        fields = stripped.split()
        if len(fields) != 3:
            raise XyzParseError(line_no, f"需要3个数，实际为{len(fields)}个")
        try:
            rows.append([float(v) for v in fields])
        except ValueError:
            raise XyzParseError(line_no, f"无法解析为实数: {stripped!r}")
        if not all(np.isfinite(rows[-1])):
            raise XyzParseError(line_no, "坐标必须为有限值")
    if not rows:
        raise EmptyCloudError(f"点文件 {sample_id!r} 没有数据行")
    return PointCloud(np.array(rows, dtype=np.float64), sample_id)


def _format_real(value: float) -> str:
    # 17位有效数字保证往返精确
    return format(float(value), '.17g')


def write_xyz(cloud: PointCloud) -> str:
    """点云转为 .xyz 文本，末尾带换行"""
    lines = [' '.join(_format_real(v) for v in point) for point in cloud.points]
    return '\n'.join(lines) + '\n'


def read_xyz_file(path: str, sample_id: str = None) -> PointCloud:
    with open(path, 'r', encoding='utf-8') as f:
        text = f.read()
    if sample_id is None:
        sample_id = os.path.splitext(os.path.basename(path))[0]
    return parse_xyz(text, sample_id)


def write_xyz_file(path: str, cloud: PointCloud):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(write_xyz(cloud))


def bounding_box(cloud: PointCloud, margin: float = 0.05, epsilon: float = 1e-6) -> Box3:
    """点云的包围盒，按各轴跨度的相对比例外扩；零跨度轴按绝对epsilon外扩"""
    points = np.asarray(cloud.points)
    if points.shape[0] == 0:
        raise EmptyCloudError("空点云没有包围盒")
    lower = points.min(axis=0)
    upper = points.max(axis=0)
    extent = upper - lower
    pad = np.where(extent > 0, margin * extent, epsilon)
    return Box3(lower - pad, upper + pad)


def load_dataset(manifest_path: str) -> Dataset:
    """读取 manifest.csv 及其引用的 .xyz 文件"""
    manifest = pd.read_csv(manifest_path, dtype={'sample_id': str, 'path': str},
                           float_precision='round_trip')
    if 'sample_id' not in manifest.columns or 'path' not in manifest.columns:
        raise ValueError(f"清单 {manifest_path} 缺少 sample_id/path 列")
    response_cols = [c for c in manifest.columns if c.startswith('y_')]
    response_cols.sort(key=lambda c: int(c[2:]))
    if not response_cols:
        raise ValueError(f"清单 {manifest_path} 没有响应列 y_1..y_p")

    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    samples: List[PointCloud] = []
    for _, row in tqdm(manifest.iterrows(), total=len(manifest), desc="读取点云"):
        samples.append(read_xyz_file(os.path.join(base_dir, row['path']), row['sample_id']))
    logger.info(f"已读取 {len(samples)} 个样本，响应维度 {len(response_cols)}")
    return Dataset(samples, manifest[response_cols].to_numpy(dtype=np.float64))


def save_dataset(dataset: Dataset, directory: str, cloud_dir: str = 'clouds') -> str:
    """写出 manifest.csv 和每个样本的 .xyz 文件，返回清单路径"""
    os.makedirs(os.path.join(directory, cloud_dir), exist_ok=True)
    rows = []
    for i, cloud in enumerate(dataset.samples):
        sample_id = cloud.sample_id or f"sample_{i:05d}"
        rel_path = f"{cloud_dir}/{sample_id}.xyz"
        write_xyz_file(os.path.join(directory, rel_path), cloud)
        row = {'sample_id': sample_id, 'path': rel_path}
        for j, value in enumerate(dataset.responses[i], 1):
            row[f'y_{j}'] = value
        rows.append(row)
    manifest_path = os.path.join(directory, 'manifest.csv')
    pd.DataFrame(rows).to_csv(manifest_path, index=False, float_format='%.17g')
    logger.info(f"数据集已保存到: {manifest_path}")
    return manifest_path
