#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
平衡采样：把极度稀疏的二值体素张量转成定长的 (i, j, k, b) 记录序列
全部占据体素 + 等量的表面邻域空体素 + 随机空体素补足到 M_r
"""

import itertools
import json
import os
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import pandas as pd
from loguru import logger
from tqdm import tqdm

from config import derive_seed
from voxelizer import BinaryVoxelTensor, GridSpec


class CapacityError(ValueError):
    """M_r 小于 2·|occupied|"""


class InfeasibleSampleError(ValueError):
    """空体素不足以填满样本"""


# 26连通邻域（切比雪夫距离为1）
NEIGHBOR_OFFSETS = np.array(
    [offset for offset in itertools.product((-1, 0, 1), repeat=3) if offset != (0, 0, 0)],
    dtype=np.int64,
)

# 网格体素数不超过该值时直接枚举补集，否则用拒绝采样
_ENUMERATE_LIMIT = 4_000_000


@dataclass(frozen=True, eq=False)
class BalancedSample:
    """定长平衡样本 𝓓_i：entries 形状 (M_r, 4)，列为 i, j, k, b"""
    entries: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.int64)
        if entries.ndim != 2 or entries.shape[1] != 4:
            raise ValueError(f"样本形状应为 (M_r, 4)，实际为 {entries.shape}")
        if np.any((entries[:, 3] != 0) & (entries[:, 3] != 1)):
            raise ValueError("占据位只能为0或1")
        entries = entries.copy()
        entries.setflags(write=False)
        object.__setattr__(self, 'entries', entries)

    @property
    def m_r(self) -> int:
        return self.entries.shape[0]

    @property
    def n_ones(self) -> int:
        return int(self.entries[:, 3].sum())


def compute_mr(counts: Sequence[int]) -> int:
    """M_r = 2 · max(|occupied|)"""
    counts = list(counts)
    if not counts:
        raise ValueError("占据计数序列为空")
    return 2 * int(max(counts))


def _draw_random_zeros(rng: np.random.Generator, n_voxels: int, excluded: np.ndarray,
                       count: int) -> np.ndarray:
    """从未被排除的线性索引中无放回均匀抽取count个"""
    if count <= 0:
        return np.empty(0, dtype=np.int64)
    if n_voxels <= _ENUMERATE_LIMIT:
        pool = np.setdiff1d(np.arange(n_voxels, dtype=np.int64), excluded, assume_unique=True)
        return rng.choice(pool, size=count, replace=False)
    taken = set(excluded.tolist())
    drawn: List[int] = []
    while len(drawn) < count:
        batch = rng.integers(0, n_voxels, size=2 * (count - len(drawn)) + 16)
        for value in batch.tolist():
            if value not in taken:
                taken.add(value)
                drawn.append(value)
                if len(drawn) == count:
                    break
    return np.asarray(drawn, dtype=np.int64)


def _shell_candidates(tensor: BinaryVoxelTensor, occupied_linear: np.ndarray) -> np.ndarray:
    """占据集合26邻域中的空体素（升序线性索引）"""
    dims = np.asarray(tensor.grid.dims, dtype=np.int64)
    neighbors = (tensor.occupied[:, None, :] + NEIGHBOR_OFFSETS[None, :, :]).reshape(-1, 3)
    inside = np.all((neighbors >= 0) & (neighbors < dims), axis=1)
    linear = np.unique(np.ravel_multi_index(neighbors[inside].T, tensor.grid.dims))
    return np.setdiff1d(linear, occupied_linear, assume_unique=True)


def balanced_sample(tensor: BinaryVoxelTensor, m_r: int, seed: int) -> BalancedSample:
    """
    平衡采样
    (a) 全部占据体素 b=1，按字典序
    (b) 从26邻域壳中无放回抽取 M_i 个空体素，不足部分用随机空体素补齐
    (c) 剩余 M_r - 2·M_i 个位置用均匀随机空体素填满
    """
    n_ones = len(tensor)
    if n_ones < 1:
        raise ValueError("张量没有占据体素")
    if m_r < 2 * n_ones:
        raise CapacityError(f"M_r={m_r} 小于 2·|occupied|={2 * n_ones}")
    n_voxels = tensor.grid.n_voxels
    n_zero_available = n_voxels - n_ones
    if n_zero_available == 0:
        raise InfeasibleSampleError("张量已全部占据，没有空体素")
    if n_zero_available < m_r - n_ones:
        raise InfeasibleSampleError(f"空体素 {n_zero_available} 个，不足 {m_r - n_ones} 个")

    rng = np.random.default_rng(seed)
    occupied_linear = tensor.linear_indices()

    shell = _shell_candidates(tensor, occupied_linear)
    if shell.size >= n_ones:
        shell_zeros = np.sort(rng.choice(shell, size=n_ones, replace=False))
        deficit = np.empty(0, dtype=np.int64)
    else:
        logger.debug(f"⚠️ 邻域壳只有 {shell.size} 个空体素，随机补足 {n_ones - shell.size} 个")
        shell_zeros = shell
        deficit = np.sort(_draw_random_zeros(
            rng, n_voxels, np.union1d(occupied_linear, shell_zeros), n_ones - shell.size))

    excluded = np.union1d(np.union1d(occupied_linear, shell_zeros), deficit)
    random_zeros = np.sort(_draw_random_zeros(rng, n_voxels, excluded, m_r - 2 * n_ones))

    zeros = np.concatenate([shell_zeros, deficit, random_zeros]).astype(np.int64)
    zero_index = np.stack(np.unravel_index(zeros, tensor.grid.dims), axis=1)
    entries = np.concatenate([
        np.hstack([tensor.occupied, np.ones((n_ones, 1), dtype=np.int64)]),
        np.hstack([zero_index, np.zeros((zeros.size, 1), dtype=np.int64)]),
    ])
    return BalancedSample(entries, tensor.grid)


def sample_dataset(tensors: Sequence[BinaryVoxelTensor], m_r: int, master_seed: int,
                   stage_index: int = 0) -> List[BalancedSample]:
    """对每个样本用派生种子做平衡采样"""
    samples = []
    for i, tensor in enumerate(tqdm(tensors, desc="平衡采样", leave=False)):
        samples.append(balanced_sample(tensor, m_r, derive_seed(master_seed, 'sampler', stage_index, i)))
    return samples


def save_sample(sample: BalancedSample, csv_path: str):
    """写出 "i,j,k,b" CSV 与网格JSON旁路文件"""
    directory = os.path.dirname(csv_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    pd.DataFrame(sample.entries, columns=['i', 'j', 'k', 'b']).to_csv(csv_path, index=False)
    with open(os.path.splitext(csv_path)[0] + '.grid.json', 'w', encoding='utf-8') as f:
        json.dump(sample.grid.to_dict(), f, ensure_ascii=False, indent=2)


def load_sample(csv_path: str) -> BalancedSample:
    with open(os.path.splitext(csv_path)[0] + '.grid.json', 'r', encoding='utf-8') as f:
        grid = GridSpec.from_dict(json.load(f))
    frame = pd.read_csv(csv_path, dtype=np.int64)
    return BalancedSample(frame[['i', 'j', 'k', 'b']].to_numpy(), grid)
