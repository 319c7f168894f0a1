#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
趋势验证脚本：在合成基准上跑完整的交叉验证，检查噪声趋势与λ2消融结论，生成markdown报告

用法:
    python validate_trends.py                 # 完整规模（波面N=100、100×100网格、10折）
    python validate_trends.py --quick         # 缩小规模，几分钟内完成
    python validate_trends.py --only wave     # 只跑某一项（wave / cone / ablation）
"""

import argparse
import copy
import os
from datetime import datetime
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from loguru import logger

from config import MASTER_SEED, PipelineConfig
from main import setup_logger
from pipeline import run_experiment

# 完整规模
FULL_SETTINGS = {
    'dataset': {'n_samples': 100, 'resolution': [100, 100], 'm_l': 600, 'm_u': 1000, 'm_r': 300},
    'evaluation': {'k_folds': 10},
}

# 快速规模
QUICK_SETTINGS = {
    'dataset': {'n_samples': 30, 'resolution': [30, 30], 'm_l': 120, 'm_u': 200, 'm_r': 60},
    'grid': {'initial_dims': [16, 16, 16], 'max_dim': 128},
    'snbtd': {'n_frequencies': 32, 'patch_size': 256},
    'model': {'latent_dim': 4, 'encoder_hidden': [64], 'decoder_hidden': [64], 'regressor_hidden': [16]},
    'train': {'max_epochs': 20},
    'evaluation': {'k_folds': 5, 'k_features': 16, 'k_nn': 3},
}

WAVE_NOISES = (0.1, 1.0)
CONE_NOISES = (0.01, 0.1)
ABLATION_RUNS = 5


def merge_settings(base: Dict, override: Dict) -> Dict:
    """按配置段合并两层设置"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict):
            merged.setdefault(key, {}).update(value)
        else:
            merged[key] = value
    return merged


def method_rmse(results: pd.DataFrame, method: str) -> float:
    """某方法的折均值RMSE（多个响应再取平均）；没有有效行时返回NaN"""
    ok = results[(results['method'] == method) & (results['status'] == 'ok')]
    if ok.empty:
        return float('nan')
    return float(ok.groupby('response_index')['rmse'].mean().mean())


class TrendValidator:
    def __init__(self, output_root: str, quick: bool = False, master_seed: int = MASTER_SEED,
                 tune: bool = False):
        self.output_root = output_root
        self.quick = quick
        self.master_seed = master_seed
        self.tune = tune
        self.base_settings = QUICK_SETTINGS if quick else FULL_SETTINGS
        self.checks: List[Dict] = []
        self.runs: List[Dict] = []

    def run_case(self, tag: str, override: Dict, master_seed: Optional[int] = None) -> Dict:
        """跑一次完整实验，返回各方法的折均值RMSE"""
        settings = merge_settings(self.base_settings, override)
        settings['master_seed'] = self.master_seed if master_seed is None else master_seed
        settings['output_dir'] = os.path.join(self.output_root, tag)
        config = PipelineConfig.from_dict(settings)

        logger.info(f"运行 {tag}: {config.dataset['kind']} δ={config.dataset['noise']} "
                    f"λ={config.model['lambdas']} seed={config.master_seed}")
        started = datetime.now()
        results = run_experiment(config)
        elapsed = (datetime.now() - started).total_seconds()

        record = {
            'tag': tag,
            'kind': config.dataset['kind'],
            'noise': config.dataset['noise'],
            'lambda2': config.model['lambdas'][1],
            'master_seed': config.master_seed,
            'antler': method_rmse(results, 'antler'),
            'minmax_knn': method_rmse(results, 'minmax_knn'),
            'mean': method_rmse(results, 'mean'),
            'failed_rows': int(results['status'].str.startswith('failed').sum()),
            'seconds': elapsed,
        }
        self.runs.append(record)
        logger.info(f"{tag} 完成: ANTLER={record['antler']:.4f} 基线={record['minmax_knn']:.4f} "
                    f"均值={record['mean']:.4f} ({elapsed:.0f}s)")
        return record

    def add_check(self, name: str, passed: bool, detail: str):
        self.checks.append({'name': name, 'passed': bool(passed), 'detail': detail})
        if passed:
            logger.info(f"✅ {name}: {detail}")
        else:
            logger.warning(f"⚠️ {name}: {detail}")

    def validate_wave(self):
        """波面：δ=0.1 时ANTLER优于均值预测与特征基线；δ=1 时误差上升"""
        low, high = (self.run_case(f"wave_delta_{d:g}", {'dataset': {'kind': 'wave', 'noise': d}})
                     for d in WAVE_NOISES)
        self.add_check("波面 δ=0.1 ANTLER < 均值预测", low['antler'] < low['mean'],
                       f"{low['antler']:.4f} vs {low['mean']:.4f}")
        self.add_check("波面 δ=0.1 ANTLER < 特征基线", low['antler'] < low['minmax_knn'],
                       f"{low['antler']:.4f} vs {low['minmax_knn']:.4f}")
        self.add_check("波面 噪声升高误差上升", high['antler'] > low['antler'],
                       f"δ=1: {high['antler']:.4f} vs δ=0.1: {low['antler']:.4f}")

    def validate_cone(self):
        """圆锥：δ=0.01 时ANTLER优于均值预测；δ=0.1 时误差上升"""
        override = {'dataset': {'kind': 'cone'}}
        if self.quick:
            override['dataset'].update({'cone_levels': [0.9, 1.2], 'roundness_bins': 2})
        low, high = (self.run_case(f"cone_delta_{d:g}", merge_settings(override, {'dataset': {'noise': d}}))
                     for d in CONE_NOISES)
        self.add_check("圆锥 δ=0.01 ANTLER < 均值预测", low['antler'] < low['mean'],
                       f"{low['antler']:.4f} vs {low['mean']:.4f}")
        self.add_check("圆锥 噪声升高误差上升", high['antler'] > low['antler'],
                       f"δ=0.1: {high['antler']:.4f} vs δ=0.01: {low['antler']:.4f}")

    def validate_ablation(self):
        """λ2消融：同一组种子下，λ2>0 的CV误差中位数不高于 λ2=0"""
        lambdas = PipelineConfig().model['lambdas']
        with_snbtd, without_snbtd = [], []
        for run in range(ABLATION_RUNS):
            seed = self.master_seed + run
            base = {'dataset': {'kind': 'wave', 'noise': 0.1}}
            positive = merge_settings(base, {'model': {'lambdas': lambdas},
                                             'tuner': {'enabled': self.tune}})
            zero = merge_settings(base, {'model': {'lambdas': [lambdas[0], 0.0, lambdas[2]]}})
            with_snbtd.append(self.run_case(f"ablation_{run}_lambda2_on", positive, seed)['antler'])
            without_snbtd.append(self.run_case(f"ablation_{run}_lambda2_off", zero, seed)['antler'])
        on, off = float(np.nanmedian(with_snbtd)), float(np.nanmedian(without_snbtd))
        self.add_check("λ2消融 中位数 λ2>0 ≤ λ2=0", on <= off, f"{on:.4f} vs {off:.4f}")

    def generate_report(self) -> str:
        """生成markdown格式的验证报告"""
        report = []
        report.append("# 📊 ANTLER 趋势验证报告")
        report.append(f"**验证时间**: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        report.append(f"**规模**: {'快速' if self.quick else '完整'}  **主种子**: {self.master_seed}")
        report.append("")

        passed = sum(1 for c in self.checks if c['passed'])
        report.append("## 📈 验证统计")
        report.append(f"- 检查项: {len(self.checks)} 个")
        if self.checks:
            report.append(f"- 通过: {passed} 个 ({passed / len(self.checks) * 100:.1f}%)")
        report.append(f"- 实验次数: {len(self.runs)}")
        report.append(f"- 总耗时: {sum(r['seconds'] for r in self.runs) / 60:.1f} 分钟")
        report.append("")

        report.append("## 🎯 检查结果")
        report.append("")
        report.append("| 检查项 | 结果 | 数值 |")
        report.append("|--------|------|------|")
        for check in self.checks:
            report.append(f"| {check['name']} | {'✅' if check['passed'] else '❌'} | {check['detail']} |")
        report.append("")

        report.append("## 📋 各次实验的折均值RMSE")
        report.append("")
        report.append("| 实验 | 数据 | δ | λ2 | 种子 | ANTLER | 特征基线 | 均值预测 | 失败行 |")
        report.append("|------|------|---|----|------|--------|----------|----------|--------|")
        for r in self.runs:
            report.append(f"| {r['tag']} | {r['kind']} | {r['noise']:g} | {r['lambda2']:g} | {r['master_seed']} "
                          f"| {r['antler']:.4f} | {r['minmax_knn']:.4f} | {r['mean']:.4f} | {r['failed_rows']} |")
        report.append("")

        report.append("## 🔍 结论")
        report.append("")
        if not self.checks:
            report.append("⚠️ 没有执行任何检查")
        elif passed == len(self.checks):
            report.append("✅ 所有趋势检查通过")
        else:
            for check in self.checks:
                if not check['passed']:
                    report.append(f"⚠️ **{check['name']}** 未通过（{check['detail']}）")
        if any(r['failed_rows'] for r in self.runs):
            report.append("⚠️ 部分fold失败，详见各实验目录下的 results.csv 与日志")

        report.append("")
        report.append("---")
        report.append("*注：只检验相对趋势，RMSE的绝对数值取决于响应的尺度与网络规模，不作为验收目标。*")
        return "\n".join(report)


def main():
    parser = argparse.ArgumentParser(description="ANTLER 趋势验证")
    parser.add_argument('--quick', action='store_true', help='使用缩小规模')
    parser.add_argument('--seed', type=int, default=MASTER_SEED, help='主随机种子')
    parser.add_argument('--out', default='trend_validation', help='实验输出根目录')
    parser.add_argument('--only', choices=['wave', 'cone', 'ablation'], help='只运行某一项')
    parser.add_argument('--tune', action='store_true', help='消融实验中λ2>0的一组启用贝叶斯优化调参')
    args = parser.parse_args()

    setup_logger()
    logger.info("开始趋势验证")
    validator = TrendValidator(args.out, quick=args.quick, master_seed=args.seed, tune=args.tune)
    steps = {'wave': validator.validate_wave, 'cone': validator.validate_cone,
             'ablation': validator.validate_ablation}
    for name, step in steps.items():
        if args.only and args.only != name:
            continue
        step()

    report = validator.generate_report()
    os.makedirs(args.out, exist_ok=True)
    report_file = os.path.join(args.out, f"趋势验证报告_{datetime.now().strftime('%Y%m%d_%H%M%S')}.md")
    with open(report_file, 'w', encoding='utf-8') as f:
        f.write(report)
    pd.DataFrame(validator.runs).to_csv(os.path.join(args.out, 'trend_runs.csv'), index=False)
    logger.info(f"验证完成，报告已保存到: {report_file}")

    passed = sum(1 for c in validator.checks if c['passed'])
    print("\n" + "=" * 80)
    print("📊 ANTLER 趋势验证完成")
    print("=" * 80)
    print(f"检查通过: {passed}/{len(validator.checks)}")
    for check in validator.checks:
        print(f"  {'✅' if check['passed'] else '❌'} {check['name']}: {check['detail']}")
    print(f"\n📄 详细报告: {report_file}")
    print("=" * 80)
    return 0 if passed == len(validator.checks) else 1


if __name__ == "__main__":
    raise SystemExit(main())
