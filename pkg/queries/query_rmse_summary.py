#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
查询交叉验证RMSE汇总的脚本（每个方法、每个响应的折均值 ± 标准差）
"""

import os
import sys

import pandas as pd

# 获取脚本所在目录的上级目录（项目根目录）
current_dir = os.path.dirname(os.path.abspath(__file__))
project_root = os.path.dirname(current_dir)
sys.path.insert(0, project_root)

from config import OUTPUT_DIR  # noqa: E402
from pipeline import summarize_results  # noqa: E402


def query_rmse_summary(output_dir=None):
    """读取 results.csv 并打印RMSE汇总表"""
    output_dir = output_dir or os.path.join(project_root, OUTPUT_DIR)
    results_path = os.path.join(output_dir, 'results.csv')
    if not os.path.exists(results_path):
        print(f"❌ 未找到结果文件: {results_path}")
        return None

    results = pd.read_csv(results_path, float_precision='round_trip')
    summary = summarize_results(results)

    print("🎯 交叉验证RMSE汇总（折均值 ± 标准差）:")
    print("=" * 80)
    print(f"{'方法':>12} | {'响应':>4} | {'RMSE均值':>12} | {'标准差':>12} | {'有效折数':>8}")
    print("-" * 80)
    for row in summary.sort_values(['response_index', 'rmse_mean']).itertuples():
        print(f"{row.method:>12} | {row.response_index:>4d} | {row.rmse_mean:>12.5f} | "
              f"{row.rmse_std:>12.5f} | {row.n_folds:>8d}")

    # 跳过与失败的记录
    others = results[results['status'] != 'ok']
    if not others.empty:
        print("\n" + "=" * 80)
        print("⚠️ 跳过或失败的记录:")
        print("=" * 80)
        for row in others.itertuples():
            print(f"fold {row.fold:>3} | {row.method:>12} | {row.status}")

    print(f"\n共 {results['fold'].nunique()} 个fold，{len(results)} 行结果")
    return summary


if __name__ == "__main__":
    query_rmse_summary(sys.argv[1] if len(sys.argv) > 1 else None)
