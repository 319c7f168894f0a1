#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
测试趋势验证脚本的辅助函数与报告生成（不运行长实验）
"""

import math

import pandas as pd

from validate_trends import QUICK_SETTINGS, TrendValidator, merge_settings, method_rmse


def test_merge_settings_is_per_section():
    merged = merge_settings(QUICK_SETTINGS, {'dataset': {'noise': 1.0}, 'master_seed': 3})
    assert merged['dataset']['noise'] == 1.0
    assert merged['dataset']['m_r'] == QUICK_SETTINGS['dataset']['m_r']
    assert merged['master_seed'] == 3
    assert 'noise' not in QUICK_SETTINGS['dataset']


def test_method_rmse_averages_ok_rows_only():
    results = pd.DataFrame([
        ['antler', 0, 0, 1.0, 'ok'],
        ['antler', 1, 0, 3.0, 'ok'],
        ['antler', 2, 0, float('nan'), 'failed: NumericError: x'],
        ['mean', 0, 0, 5.0, 'ok'],
        ['all', 1, -1, float('nan'), 'skipped: capacity'],
    ], columns=['method', 'fold', 'response_index', 'rmse', 'status'])
    assert method_rmse(results, 'antler') == 2.0
    assert method_rmse(results, 'mean') == 5.0
    assert math.isnan(method_rmse(results, 'minmax_knn'))


def test_report_lists_checks_and_runs(tmp_path):
    validator = TrendValidator(str(tmp_path), quick=True, master_seed=11)
    validator.runs.append({'tag': 'wave_delta_0.1', 'kind': 'wave', 'noise': 0.1, 'lambda2': 0.1,
                           'master_seed': 11, 'antler': 0.5, 'minmax_knn': 0.7, 'mean': 0.9,
                           'failed_rows': 0, 'seconds': 12.0})
    validator.add_check("波面 δ=0.1 ANTLER < 均值预测", True, "0.5000 vs 0.9000")
    validator.add_check("波面 噪声升高误差上升", False, "δ=1: 0.4000 vs δ=0.1: 0.5000")
    report = validator.generate_report()
    assert report.startswith("# 📊 ANTLER 趋势验证报告")
    assert "| wave_delta_0.1 | wave | 0.1 | 0.1 | 11 | 0.5000 | 0.7000 | 0.9000 | 0 |" in report
    assert "通过: 1 个 (50.0%)" in report
    assert "⚠️ **波面 噪声升高误差上升** 未通过" in report
