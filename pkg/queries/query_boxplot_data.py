#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
查询每个fold的RMSE（箱线图数据）的脚本
"""

import os
import sys

import pandas as pd

current_dir = os.path.dirname(os.path.abspath(__file__))
project_root = os.path.dirname(current_dir)
sys.path.insert(0, project_root)

from config import OUTPUT_DIR  # noqa: E402
from pipeline import boxplot_data  # noqa: E402


def query_boxplot_data(output_dir=None):
    """按fold打印各方法的RMSE，并给出五数概括"""
    output_dir = output_dir or os.path.join(project_root, OUTPUT_DIR)
    results_path = os.path.join(output_dir, 'results.csv')
    if not os.path.exists(results_path):
        print(f"❌ 未找到结果文件: {results_path}")
        return None

    wide = boxplot_data(pd.read_csv(results_path, float_precision='round_trip'))
    columns = [c for c in wide.columns if c != 'fold']

    print("📦 每个fold的RMSE:")
    print("=" * 80)
    print(f"{'fold':>4} | " + " | ".join(f"{c:>14}" for c in columns))
    print("-" * 80)
    for _, row in wide.iterrows():
        print(f"{int(row['fold']):>4} | " + " | ".join(f"{row[c]:>14.5f}" for c in columns))

    print("\n" + "=" * 80)
    print("📊 五数概括:")
    print("=" * 80)
    stats = wide[columns].quantile([0.0, 0.25, 0.5, 0.75, 1.0])
    print(f"{'分位':>4} | " + " | ".join(f"{c:>14}" for c in columns))
    print("-" * 80)
    for q, row in stats.iterrows():
        print(f"{q:>4.2f} | " + " | ".join(f"{row[c]:>14.5f}" for c in columns))
    return wide


if __name__ == "__main__":
    query_boxplot_data(sys.argv[1] if len(sys.argv) > 1 else None)
