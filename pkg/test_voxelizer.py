#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
测试体素化与网格分辨率选择
"""

import numpy as np
import pytest

from point_io import Box3, PointCloud, bounding_box
from voxelizer import (GridSpec, VoxelRangeError, load_tensor, save_tensor, select_grid,
                       voxel_centers, voxelize)

UNIT_BOX = Box3(np.zeros(3), np.ones(3))


def brute_force_occupancy(points, box, dims):
    """逐点逐轴线性扫描网格边界"""
    occupied = set()
    for p in points:
        triple = []
        for axis in range(3):
            edges = np.linspace(box.lower[axis], box.upper[axis], dims[axis] + 1)
            j = dims[axis] - 1
            for k in range(dims[axis]):
                if edges[k] <= p[axis] < edges[k + 1]:
                    j = k
                    break
            triple.append(j)
        occupied.add(tuple(triple))
    return occupied


def test_two_points_in_unit_box():
    cloud = PointCloud([[0.05, 0.05, 0.05], [0.95, 0.95, 0.95]])
    tensor = voxelize(cloud, GridSpec(UNIT_BOX, (10, 10, 10)))
    assert tensor.occupied_set() == {(0, 0, 0), (9, 9, 9)}


def test_upper_corner_goes_to_topmost_voxel():
    """上表面闭合：盒子上角点落入最顶层体素"""
    tensor = voxelize(PointCloud([[1.0, 1.0, 1.0]]), GridSpec(UNIT_BOX, (4, 5, 6)))
    assert tensor.occupied_set() == {(3, 4, 5)}


def test_point_outside_box_names_index():
    cloud = PointCloud([[0.5, 0.5, 0.5], [0.2, 1.5, 0.2]])
    with pytest.raises(VoxelRangeError) as info:
        voxelize(cloud, GridSpec(UNIT_BOX, (10, 10, 10)))
    assert info.value.point_index == 1


def test_matches_brute_force_binning():
    rng = np.random.default_rng(7)
    for trial in range(5):
        points = rng.uniform(-2.0, 3.0, size=(100, 3))
        cloud = PointCloud(points)
        box = bounding_box(cloud)
        dims = tuple(int(d) for d in rng.integers(3, 17, size=3))
        tensor = voxelize(cloud, GridSpec(box, dims))
        assert tensor.occupied_set() == brute_force_occupancy(points, box, dims)
        assert len(tensor) <= len(cloud)


def test_occupied_is_sorted_and_unique():
    rng = np.random.default_rng(3)
    cloud = PointCloud(rng.uniform(size=(500, 3)))
    tensor = voxelize(cloud, GridSpec(bounding_box(cloud), (4, 4, 4)))
    rows = [tuple(r) for r in tensor.occupied.tolist()]
    assert rows == sorted(set(rows))


def test_select_grid_cube_corners():
    """8个立方体角点在初始2×2×2网格上已各占一个体素"""
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    grid = select_grid(PointCloud(corners), initial_dims=(2, 2, 2), max_dim=64)
    assert grid.dims == (2, 2, 2)


def test_select_grid_refines_until_points_separate():
    """逐级加倍，返回的分辨率是第一个让所有点分开的分辨率"""
    corners = [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    points = np.array(corners + [[0.3, 0.3, 0.3], [0.301, 0.3, 0.3]], dtype=float)
    cloud = PointCloud(points)
    grid = select_grid(cloud, initial_dims=(100, 100, 100), max_dim=1024)
    assert max(grid.dims) <= 1024
    assert len(brute_force_occupancy(points, grid.box, grid.dims)) == len(points)
    assert grid.dims[0] > 100
    coarser = tuple(d // 2 for d in grid.dims)
    assert len(brute_force_occupancy(points, grid.box, coarser)) < len(points)


def test_select_grid_with_duplicate_point():
    """重复点不计入目标：占据数为 M_i - 1，且网格不超过上限"""
    points = np.array([[0, 0, 0], [1, 1, 1], [0.5, 0.2, 0.9], [0.5, 0.2, 0.9]], dtype=float)
    cloud = PointCloud(points)
    grid = select_grid(cloud, initial_dims=(2, 2, 2), max_dim=16)
    assert max(grid.dims) <= 16
    assert len(voxelize(cloud, grid)) == len(points) - 1


def test_voxel_centers_rebin_to_same_voxels():
    rng = np.random.default_rng(11)
    cloud = PointCloud(rng.normal(size=(200, 3)))
    tensor = voxelize(cloud, GridSpec(bounding_box(cloud), (8, 9, 10)))
    again = voxelize(PointCloud(voxel_centers(tensor)), tensor.grid)
    assert again.occupied_set() == tensor.occupied_set()


def test_tensor_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    cloud = PointCloud(rng.normal(size=(60, 3)))
    tensor = voxelize(cloud, GridSpec(bounding_box(cloud), (6, 6, 6)))
    path = str(tmp_path / 'tensor.csv')
    save_tensor(tensor, path)
    loaded = load_tensor(path)
    assert loaded.grid.dims == tensor.grid.dims
    np.testing.assert_array_equal(loaded.occupied, tensor.occupied)
    np.testing.assert_array_equal(loaded.grid.box.lower, tensor.grid.box.lower)


@pytest.mark.parametrize('seed', range(6))
def test_doubling_never_reduces_occupancy(seed):
    """网格逐次加倍时占据体素数单调不减，且不超过不同点的个数"""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 200))
    points = rng.normal(size=(n, 3)) * rng.uniform(0.01, 10.0, size=3)
    # 一部分点重复出现
    points = np.vstack([points, points[:n // 4]])
    cloud = PointCloud(points)
    box = bounding_box(cloud)
    dims = np.asarray(rng.integers(1, 8, size=3))
    counts = []
    while dims.max() <= 256:
        counts.append(len(voxelize(cloud, GridSpec(box, tuple(dims)))))
        dims = dims * 2
    assert all(a <= b for a, b in zip(counts, counts[1:]))
    assert counts[-1] <= cloud.n_distinct

    grid = select_grid(cloud, initial_dims=(4, 4, 4), max_dim=256)
    assert len(voxelize(cloud, grid)) >= len(voxelize(cloud, GridSpec(grid.box, (4, 4, 4))))
