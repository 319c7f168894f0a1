#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
点云体素化：把非结构化、点数不定的点云映射为稀疏二值占据张量
"""

import json
import os
from dataclasses import dataclass
from typing import Set, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from point_io import Box3, PointCloud, bounding_box


class VoxelRangeError(ValueError):
    """点落在网格包围盒之外"""

    def __init__(self, point_index: int, point: np.ndarray):
        super().__init__(f"第 {point_index} 个点 {tuple(point)} 不在网格范围内")
        self.point_index = point_index


@dataclass(frozen=True, eq=False)
class GridSpec:
    """包围盒 + 每轴体素数 (d_x, d_y, d_z)"""
    box: Box3
    dims: Tuple[int, int, int]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"网格维度必须是3个正整数: {self.dims}")
        object.__setattr__(self, 'dims', dims)
        if np.any(self.edges <= 0):
            raise ValueError(f"体素边长必须为正: {self.edges}")

    @property
    def edges(self) -> np.ndarray:
        return self.box.extent / np.asarray(self.dims, dtype=np.float64)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64))

    def to_dict(self) -> dict:
        return {
            'lower': [float(v) for v in self.box.lower],
            'upper': [float(v) for v in self.box.upper],
            'dims': list(self.dims),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'GridSpec':
        return cls(Box3(np.array(data['lower']), np.array(data['upper'])), tuple(data['dims']))


@dataclass(frozen=True, eq=False)
class BinaryVoxelTensor:
    """稀疏二值张量 𝓑_i：按字典序排列、无重复的占据体素索引 (n, 3)"""
    grid: GridSpec
    occupied: np.ndarray

    def __post_init__(self):
        occupied = np.asarray(self.occupied, dtype=np.int64).reshape(-1, 3)
        occupied = np.unique(occupied, axis=0)
        dims = np.asarray(self.grid.dims)
        if occupied.size and (occupied.min() < 0 or np.any(occupied >= dims)):
            raise ValueError("占据索引超出网格范围")
        occupied.setflags(write=False)
        object.__setattr__(self, 'occupied', occupied)

    def __len__(self) -> int:
        return self.occupied.shape[0]

    def occupied_set(self) -> Set[Tuple[int, int, int]]:
        return {tuple(int(v) for v in row) for row in self.occupied}

    def linear_indices(self) -> np.ndarray:
        return np.ravel_multi_index(self.occupied.T, self.grid.dims)


def voxelize(cloud: PointCloud, grid: GridSpec) -> BinaryVoxelTensor:
    """点 p 映射到 floor((p - lower) / edge)；区间左闭右开，最顶层体素上表面闭合"""
    points = cloud.points
    lower, upper = grid.box.lower, grid.box.upper
    outside = ~grid.box.contains(points)
    if np.any(outside):
        bad = int(np.flatnonzero(outside)[0])
        raise VoxelRangeError(bad, points[bad])
    dims = np.asarray(grid.dims, dtype=np.int64)
    index = np.floor((points - lower) / grid.edges).astype(np.int64)
    # 上表面上的点（以及浮点误差溢出的点）落入最顶层体素
    index = np.clip(index, 0, dims - 1)
    return BinaryVoxelTensor(grid, index)


def voxel_centers(tensor: BinaryVoxelTensor) -> np.ndarray:
    """占据体素的中心坐标"""
    grid = tensor.grid
    return grid.box.lower + (tensor.occupied + 0.5) * grid.edges


def select_grid(cloud: PointCloud, initial_dims=(100, 100, 100), max_dim: int = 1024,
                margin: float = 0.05, epsilon: float = 1e-6) -> GridSpec:
    """
    网格分辨率选择：从初始网格开始逐次加倍，直到占据体素数等于不同点的个数；
    任一维度超过max_dim时停止，返回尝试过的最大网格
    """
    dims = np.asarray(initial_dims, dtype=np.int64)
    if dims.shape != (3,) or dims.min() < 1:
        raise ValueError(f"初始网格维度无效: {initial_dims}")
    if max_dim < dims.max():
        raise ValueError(f"max_dim={max_dim} 小于初始维度 {tuple(dims)}")

    box = bounding_box(cloud, margin=margin, epsilon=epsilon)
    target = cloud.n_distinct
    while True:
        grid = GridSpec(box, tuple(dims))
        n_occupied = len(voxelize(cloud, grid))
        logger.debug(f"网格 {grid.dims}: 占据 {n_occupied}/{target}")
        if n_occupied == target:
            return grid
        next_dims = dims * 2
        if np.any(next_dims > max_dim):
            logger.debug(f"样本 {cloud.sample_id} 达到网格上限 {max_dim}，占据 {n_occupied}/{target}")
            return grid
        dims = next_dims


def save_tensor(tensor: BinaryVoxelTensor, csv_path: str):
    """写出 "i,j,k" CSV 与网格JSON旁路文件"""
    directory = os.path.dirname(csv_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    pd.DataFrame(tensor.occupied, columns=['i', 'j', 'k']).to_csv(csv_path, index=False)
    with open(_sidecar_path(csv_path), 'w', encoding='utf-8') as f:
        json.dump(tensor.grid.to_dict(), f, ensure_ascii=False, indent=2)


def load_tensor(csv_path: str) -> BinaryVoxelTensor:
    with open(_sidecar_path(csv_path), 'r', encoding='utf-8') as f:
        grid = GridSpec.from_dict(json.load(f))
    frame = pd.read_csv(csv_path, dtype=np.int64)
    return BinaryVoxelTensor(grid, frame[['i', 'j', 'k']].to_numpy())


def _sidecar_path(csv_path: str) -> str:
    return os.path.splitext(csv_path)[0] + '.grid.json'
