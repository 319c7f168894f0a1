#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
测试点云读写、包围盒与数据集清单
"""

import numpy as np
import pytest

from point_io import (Dataset, EmptyCloudError, PointCloud, XyzParseError, bounding_box,
                      load_dataset, parse_xyz, save_dataset, write_xyz)


def test_parse_skips_comments_and_blank_lines():
    """注释与空行被忽略"""
    cloud = parse_xyz("# header\n\n1 2 3\n  4.5 -1e-3 0\n")
    np.testing.assert_array_equal(cloud.points, [[1, 2, 3], [4.5, -1e-3, 0]])


def test_parse_reports_line_number():
    """第3行只有两个数时报告行号3"""
    with pytest.raises(XyzParseError) as info:
        parse_xyz("1 2 3\n4 5 6\n7 8\n")
    assert info.value.line_no == 3


def test_parse_rejects_non_finite_and_garbage():
    with pytest.raises(XyzParseError):
        parse_xyz("1 2 abc\n")
    with pytest.raises(XyzParseError):
        parse_xyz("1 nan 2\n")


def test_empty_input_is_error():
    with pytest.raises(EmptyCloudError):
        parse_xyz("# only a comment\n\n")


def test_write_then_parse_is_exact():
    """17位有效数字保证写出后解析回来按位相等"""
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(50, 3)) * 1e3)
    text = write_xyz(cloud)
    assert text.endswith('\n')
    np.testing.assert_array_equal(parse_xyz(text).points, cloud.points)


def test_bounding_box_margin_and_degenerate_axis():
    """非零跨度按5%外扩，零跨度轴按epsilon外扩"""
    cloud = PointCloud([[0, 0, 1], [10, 2, 1]])
    box = bounding_box(cloud, margin=0.05, epsilon=1e-6)
    np.testing.assert_allclose(box.lower, [-0.5, -0.1, 1 - 1e-6])
    np.testing.assert_allclose(box.upper, [10.5, 2.1, 1 + 1e-6])
    assert np.all(box.contains(cloud.points))


def test_bounding_box_zero_margin_is_exact_extrema():
    """margin=0 时非退化轴的盒子正好是各轴极值"""
    rng = np.random.default_rng(5)
    points = rng.uniform(-3, 7, size=(50, 3))
    box = bounding_box(PointCloud(points), margin=0.0, epsilon=1e-6)
    np.testing.assert_array_equal(box.lower, points.min(axis=0))
    np.testing.assert_array_equal(box.upper, points.max(axis=0))


def test_bounding_box_single_point_expands_every_axis():
    """单点云三个轴都按epsilon外扩，盒子体积为正"""
    box = bounding_box(PointCloud([[2.0, -1.0, 0.5]]), margin=0.05, epsilon=1e-3)
    np.testing.assert_allclose(box.lower, [2.0 - 1e-3, -1.0 - 1e-3, 0.5 - 1e-3])
    np.testing.assert_allclose(box.upper, [2.0 + 1e-3, -1.0 + 1e-3, 0.5 + 1e-3])
    assert np.all(box.extent > 0)


def test_bounding_box_expands_only_degenerate_axes():
    """两个零跨度轴按epsilon外扩，有跨度的轴在 margin=0 时保持极值"""
    cloud = PointCloud([[0.0, 4.0, -2.0], [3.0, 4.0, -2.0], [1.5, 4.0, -2.0]])
    box = bounding_box(cloud, margin=0.0, epsilon=1e-4)
    np.testing.assert_allclose(box.lower, [0.0, 4.0 - 1e-4, -2.0 - 1e-4])
    np.testing.assert_allclose(box.upper, [3.0, 4.0 + 1e-4, -2.0 + 1e-4])
    assert box.lower[0] == 0.0 and box.upper[0] == 3.0


def test_point_cloud_is_read_only():
    cloud = PointCloud([[0.0, 0.0, 0.0]])
    with pytest.raises(ValueError):
        cloud.points[0, 0] = 1.0


def test_dataset_manifest_round_trip(tmp_path):
    """保存清单后重新读取，点云与响应一致"""
    rng = np.random.default_rng(1)
    clouds = [PointCloud(rng.normal(size=(20 + i, 3)), f"s{i}") for i in range(3)]
    dataset = Dataset(clouds, rng.normal(size=(3, 2)))
    manifest = save_dataset(dataset, str(tmp_path))
    loaded = load_dataset(manifest)
    assert [c.sample_id for c in loaded.samples] == ['s0', 's1', 's2']
    assert loaded.n_responses == 2
    np.testing.assert_array_equal(loaded.responses, dataset.responses)
    for a, b in zip(loaded.samples, dataset.samples):
        np.testing.assert_array_equal(a.points, b.points)


def test_dataset_rejects_row_mismatch():
    with pytest.raises(ValueError):
        Dataset([PointCloud([[0, 0, 0]])], np.zeros((2, 1)))
