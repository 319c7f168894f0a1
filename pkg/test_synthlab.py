#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
测试合成基准：波形曲面、截锥、非结构化处理与响应计算
"""

import itertools
import math

import numpy as np
import pytest

from point_io import PointCloud
from synthlab import (CONE_NORMAL, DEFAULT_B1, DEFAULT_B2, ConeParams, DegenerateGeometryError,
                      InsufficientDataError, RoundnessError, UnstructureParamError, UnstructureParams,
                      VerticalPlaneError, WaveParams, cone_factorial, cone_radius, gen_cone, gen_wave,
                      generate_cone_dataset, generate_wave_dataset, mzt_fit, mzt_roundness, noise_sweep,
                      odr_plane, roughness_response, roundness_response, unstructure)

RING_FACTOR = 1.0 / math.sqrt(1.0 - 0.3 ** 2) - 1.0


def ellipse(a, b, n=360, center=(0.0, 0.0), angle=0.0):
    t = 2 * np.pi * np.arange(n) / n
    x, y = a * np.cos(t), b * np.sin(t)
    c, s = math.cos(angle), math.sin(angle)
    return np.column_stack([c * x - s * y + center[0], s * x + c * y + center[1]])


# ---------------------------------------------------------------- 波形曲面

def test_default_core_slices():
    params = WaveParams()
    assert DEFAULT_B1 == ((4, 1, 0), (1, 0.1, 0), (1, 0, 1))
    assert DEFAULT_B2 == ((1, 2, 0), (1, 3, 0), (1, 0, 0.2))
    assert params.core.shape == (3, 3, 2)
    np.testing.assert_array_equal(params.core[:, :, 1], DEFAULT_B2)


def test_zero_latent_without_noise_is_flat():
    params = WaveParams(resolution=(6, 4), n_samples=3, noise=0.0)
    clouds, _ = gen_wave(params, latent=np.zeros((3, 2)))
    for cloud in clouds:
        assert len(cloud) == 24
        assert np.all(cloud.points[:, 2] == 0.0)


def test_unit_latent_matches_naive_tucker_product():
    """Z = e1 时高度矩阵等于 B1 加权的基向量外积和（朴素三重循环）"""
    n1, n2 = 7, 5
    params = WaveParams(resolution=(n1, n2), n_samples=1, noise=0.0)
    clouds, _ = gen_wave(params, latent=np.array([[1.0, 0.0]]))
    heights = clouds[0].points[:, 2].reshape(n1, n2)
    expected = np.zeros((n1, n2))
    for i1 in range(n1):
        for i2 in range(n2):
            for a in range(3):
                for b in range(3):
                    expected[i1, i2] += (DEFAULT_B1[a][b] * math.sin(math.pi * (a + 1) * (i1 + 1) / n1)
                                         * math.sin(math.pi * (b + 1) * (i2 + 1) / n2))
    np.testing.assert_allclose(heights, expected, atol=1e-12)
    np.testing.assert_allclose(clouds[0].points[:, 0].reshape(n1, n2)[:, 0], np.linspace(0, 1, n1))


def test_wave_generation_is_seeded():
    params = WaveParams(resolution=(5, 5), n_samples=2, noise=0.1, seed=3)
    first, z1 = gen_wave(params)
    second, z2 = gen_wave(params)
    np.testing.assert_array_equal(z1, z2)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.points, b.points)
    assert [p.noise for p in noise_sweep(params, [0.0, 0.5])] == [0.0, 0.5]


# ---------------------------------------------------------------- 截锥

def test_cone_radius_at_normal_conditions():
    value = cone_radius(0.0, 0.0, CONE_NORMAL['theta'], CONE_NORMAL['r'], CONE_NORMAL['e'], CONE_NORMAL['c'])
    assert value == pytest.approx(1.3 / math.sqrt(0.91), abs=1e-12)
    assert value == pytest.approx(1.362770, abs=1e-6)


def test_circular_cone_rings():
    """e = 0、c = 0、无噪声时每个z环是半径 r + z·tanθ 的圆"""
    params = ConeParams(resolution=(36, 10), e=0.0, c=0.0, noise=0.0)
    points = gen_cone(params).points
    radius = np.hypot(points[:, 0], points[:, 1])
    np.testing.assert_allclose(radius, params.r + points[:, 2] * math.tan(params.theta), atol=1e-12)


def test_cone_factorial_design():
    designs = cone_factorial(resolution=(10, 10), seed=1)
    assert len(designs) == 81
    assert designs[0].theta == pytest.approx(0.9 * CONE_NORMAL['theta'])
    assert designs[-1].c == pytest.approx(1.2 * CONE_NORMAL['c'])
    assert len({d.seed for d in designs}) == 81
    with pytest.raises(ValueError):
        ConeParams(e=1.0)


# ---------------------------------------------------------------- 非结构化

def test_unstructure_whole_cloud():
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(30, 3)), 's')
    model_cloud, response_cloud = unstructure(cloud, UnstructureParams(30, 30, 12, seed=1))
    np.testing.assert_array_equal(model_cloud.points, cloud.points)
    assert len(response_cloud) == 12


def test_unstructure_axis_aligned_cloud():
    """{(t,0,0)}：x两端为 t=1 与 t=12，y/z 的并列按字典序落到同样两点"""
    cloud = PointCloud([[t, 0.0, 0.0] for t in range(1, 13)])
    model_cloud, response_cloud = unstructure(cloud, UnstructureParams(12, 12, 6, seed=2))
    xs = set(response_cloud.points[:, 0].tolist())
    assert {1.0, 12.0} <= xs
    assert len(xs) == 6


def test_unstructure_cardinality_and_subsets():
    rng = np.random.default_rng(1)
    cloud = PointCloud(rng.uniform(size=(200, 3)))
    cloud_rows = {tuple(p) for p in cloud.points.tolist()}
    for seed in range(10):
        model_cloud, response_cloud = unstructure(cloud, UnstructureParams(50, 80, 12, seed=seed))
        assert 50 <= len(model_cloud) <= 80
        assert len(response_cloud) == 12
        model_rows = {tuple(p) for p in model_cloud.points.tolist()}
        assert model_rows <= cloud_rows
        assert {tuple(p) for p in response_cloud.points.tolist()} <= model_rows
        # 每个轴的最小与最大点一定在响应集中
        for axis in range(3):
            assert response_cloud.points[:, axis].min() == model_cloud.points[:, axis].min()
            assert response_cloud.points[:, axis].max() == model_cloud.points[:, axis].max()


def test_unstructure_parameter_errors():
    cloud = PointCloud(np.random.default_rng(2).normal(size=(40, 3)))
    with pytest.raises(UnstructureParamError):
        unstructure(cloud, UnstructureParams(20, 30, 7))
    with pytest.raises(UnstructureParamError):
        unstructure(cloud, UnstructureParams(20, 41, 12))
    with pytest.raises(UnstructureParamError):
        unstructure(cloud, UnstructureParams(10, 30, 12))


# ---------------------------------------------------------------- ODR 与粗糙度

def grid_plane(beta, n=5):
    x, y = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing='ij')
    x, y = x.ravel(), y.ravel()
    return PointCloud(np.column_stack([x, y, beta[0] + beta[1] * x + beta[2] * y]))


def test_odr_exact_plane():
    fit = odr_plane(grid_plane((1.0, 2.0, 3.0)))
    np.testing.assert_allclose(fit.beta, [1.0, 2.0, 3.0], atol=1e-9)
    assert abs(fit.delta) < 1e-9
    fit = odr_plane(grid_plane((0.7, 0.0, 0.0)))
    np.testing.assert_allclose(fit.beta, [0.7, 0.0, 0.0], atol=1e-12)


def test_odr_normal_matches_svd_total_least_squares():
    rng = np.random.default_rng(3)
    xy = rng.uniform(-2, 2, size=(10000, 2))
    z = 0.3 + 0.5 * xy[:, 0] - 0.8 * xy[:, 1] + rng.normal(scale=0.05, size=10000)
    points = np.column_stack([xy, z])
    fit = odr_plane(PointCloud(points))
    _, _, vt = np.linalg.svd(points - points.mean(axis=0))
    assert np.linalg.norm(np.cross(fit.normal, vt[2])) < 1e-6


def test_odr_delta_is_smallest_singular_value_of_centered_points():
    """δ取中心化点阵的最小奇异值；质心在原点时与增广矩阵 [1 x y z] 写法一致"""
    rng = np.random.default_rng(9)
    xy = rng.uniform(-1, 1, size=(400, 2))
    z = 0.4 * xy[:, 0] + 0.2 * xy[:, 1] + rng.normal(scale=0.05, size=400)
    points = np.column_stack([xy, z])
    points -= points.mean(axis=0)
    fit = odr_plane(PointCloud(points))
    assert fit.delta == pytest.approx(np.linalg.svd(points, compute_uv=False)[2], rel=1e-12)

    design = np.column_stack([np.ones(len(points)), points[:, :2]])
    delta = np.linalg.svd(np.column_stack([design, points[:, 2]]), compute_uv=False)[-1]
    beta = np.linalg.solve(design.T @ design - delta ** 2 * np.eye(3), design.T @ points[:, 2])
    np.testing.assert_allclose(fit.beta, beta, atol=1e-10)

    shifted = odr_plane(PointCloud(points + [5.0, -3.0, 2.0]))
    np.testing.assert_allclose(shifted.beta[1:], fit.beta[1:], atol=1e-10)
    assert shifted.delta == pytest.approx(fit.delta, rel=1e-9)


def test_odr_errors():
    rng = np.random.default_rng(4)
    vertical = np.column_stack([np.zeros(20), rng.uniform(size=20), rng.uniform(size=20)])
    with pytest.raises(VerticalPlaneError):
        odr_plane(PointCloud(vertical))
    line = np.column_stack([np.arange(10.0), 2 * np.arange(10.0), np.zeros(10)])
    with pytest.raises(DegenerateGeometryError):
        odr_plane(PointCloud(line))
    with pytest.raises(DegenerateGeometryError):
        odr_plane(PointCloud([[0, 0, 0], [1, 0, 0]]))


def test_roughness_of_coplanar_points_is_zero():
    assert roughness_response(grid_plane((1.0, -0.5, 2.0), n=8)) < 1e-9


def test_roughness_of_alternating_grid():
    """z ∈ {0, 2h} 交替：拟合平面 z = h，所有距离相等，R_a = 0"""
    h, n = 0.1, 10
    x, y = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing='ij')
    z = 2 * h * ((np.add.outer(np.arange(n), np.arange(n))) % 2)
    cloud = PointCloud(np.column_stack([x.ravel(), y.ravel(), z.ravel()]))
    np.testing.assert_allclose(odr_plane(cloud).beta, [h, 0.0, 0.0], atol=1e-9)
    assert roughness_response(cloud) < 1e-9


def test_roughness_of_gaussian_perpendicular_noise():
    """垂向高斯噪声 σ：R_a ≈ σ·sqrt(1 - 2/π)"""
    rng = np.random.default_rng(5)
    sigma = 0.05
    xy = rng.uniform(0, 10, size=(100000, 2))
    plane = np.column_stack([xy, 0.5 + 0.2 * xy[:, 0] - 0.1 * xy[:, 1]])
    normal = np.array([0.2, -0.1, -1.0]) / np.linalg.norm([0.2, -0.1, -1.0])
    points = plane + rng.normal(scale=sigma, size=(100000, 1)) * normal
    expected = sigma * math.sqrt(1 - 2 / math.pi)
    assert roughness_response(PointCloud(points)) == pytest.approx(expected, rel=0.05)


def test_roughness_translation_and_scaling():
    rng = np.random.default_rng(6)
    points = np.column_stack([rng.uniform(size=(300, 2)), rng.normal(scale=0.1, size=300)])
    base = roughness_response(PointCloud(points))
    assert roughness_response(PointCloud(points + [3.0, -2.0, 5.0])) == pytest.approx(base, rel=1e-9)
    assert roughness_response(PointCloud(points * 2.5)) == pytest.approx(2.5 * base, rel=1e-9)


# ---------------------------------------------------------------- MZT 圆度

def test_perfect_circle_has_zero_roundness():
    ring = ellipse(2.5, 2.5, n=100, center=(1.0, -3.0))
    assert mzt_roundness(ring) < 1e-6


def test_ellipse_roundness_and_dense_grid_check():
    """半轴 1.1 与 1.0 的椭圆：R = 0.1，稠密圆心网格找不到更小的区域宽度"""
    ring = ellipse(1.1, 1.0)
    value, center = mzt_fit(ring)
    assert value == pytest.approx(0.1, abs=1e-4)
    assert np.linalg.norm(center) < 1e-3
    best_grid = min(
        float(np.ptp(np.hypot(ring[:, 0] - cx, ring[:, 1] - cy)))
        for cx, cy in itertools.product(np.linspace(-0.05, 0.05, 41), repeat=2)
    )
    assert value <= best_grid + 1e-9


def test_cone_ring_roundness():
    """正常工况 z = 0.5 的环：R = (r0 + 0.5·tan(π/8))·(1/sqrt(0.91) - 1)"""
    phi = 2 * np.pi * np.arange(1, 361) / 360
    radius = cone_radius(phi, 0.5, CONE_NORMAL['theta'], CONE_NORMAL['r'], CONE_NORMAL['e'], CONE_NORMAL['c'])
    ring = np.column_stack([radius * np.cos(phi), radius * np.sin(phi)])
    expected = (1.3 + 0.5 * math.tan(math.pi / 8)) * RING_FACTOR
    assert expected == pytest.approx(0.07277, abs=1e-5)
    assert mzt_roundness(ring) == pytest.approx(expected, abs=1e-3)


def test_roundness_rotation_and_scaling():
    base = mzt_roundness(ellipse(1.1, 1.0))
    assert mzt_roundness(ellipse(1.1, 1.0, angle=0.7)) == pytest.approx(base, abs=1e-6)
    assert mzt_roundness(3.0 * ellipse(1.1, 1.0)) == pytest.approx(3.0 * base, rel=1e-6)


def test_roundness_errors():
    with pytest.raises(RoundnessError):
        mzt_roundness(np.array([[0.0, 0.0], [1.0, 1.0]]))
    with pytest.raises(DegenerateGeometryError):
        mzt_roundness(np.column_stack([np.arange(5.0), np.arange(5.0)]))


def test_cylinder_roundness_response_is_zero():
    params = ConeParams(resolution=(60, 10), theta=1e-9, e=0.0, c=0.0, noise=0.0)
    assert roundness_response(gen_cone(params), n_bins=10) < 1e-6


def test_noiseless_cone_matches_per_ring_average():
    """每个z分箱恰好一条环时，平均圆度等于逐环解析值的平均"""
    params = ConeParams(resolution=(120, 20), noise=0.0)
    z = np.arange(1, 21) / 20
    expected = np.mean((params.r + z * math.tan(params.theta)) * RING_FACTOR)
    assert roundness_response(gen_cone(params), n_bins=20) == pytest.approx(expected, abs=1e-3)


def test_roundness_increases_with_eccentricity():
    values = [roundness_response(gen_cone(ConeParams(resolution=(80, 10), e=e, noise=0.0)), n_bins=10)
              for e in (0.27, 0.30, 0.36)]
    assert values[0] < values[1] < values[2]


def test_insufficient_data():
    rng = np.random.default_rng(7)
    sparse = PointCloud(rng.uniform(size=(10, 3)))
    with pytest.raises(InsufficientDataError):
        roundness_response(sparse, n_bins=5)
    flat = PointCloud(np.column_stack([rng.uniform(size=(20, 2)), np.zeros(20)]))
    with pytest.raises(InsufficientDataError):
        roundness_response(flat)


# ---------------------------------------------------------------- 数据集

def test_generate_wave_dataset():
    params = WaveParams(resolution=(12, 12), n_samples=4, noise=0.05, seed=1)
    dataset, provenance = generate_wave_dataset(params, 60, 80, 12, seed=2)
    again, _ = generate_wave_dataset(params, 60, 80, 12, seed=2)
    assert len(dataset) == 4
    assert dataset.responses.shape == (4, 1)
    assert np.all(dataset.responses >= 0)
    np.testing.assert_array_equal(dataset.responses, again.responses)
    assert all(60 <= len(c) <= 80 for c in dataset.samples)
    assert provenance['generator'] == 'wave'
    assert len(provenance['latent']) == 4


def test_generate_cone_dataset():
    designs = cone_factorial(resolution=(40, 10), noise=0.01, levels=(0.9, 1.2), seed=3)[:3]
    dataset, provenance = generate_cone_dataset(designs, 200, 300, 60, seed=4, n_bins=2)
    assert len(dataset) == 3
    assert np.all(np.isfinite(dataset.responses))
    assert np.all(dataset.responses >= 0)
    assert provenance['roundness_bins'] == 2
