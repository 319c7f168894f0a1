#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
ANTLER 点云回归工具 - 命令行入口
用法: python main.py <子命令> --config <配置.json> [--seed N] [--out 目录]
退出码: 0 成功, 1 有fold失败, 2 配置错误
"""

import argparse
import glob
import json
import os
import sys
from datetime import datetime

import numpy as np
import pandas as pd
from loguru import logger

from antler_model import load_model, save_model
from config import ARTIFACT_VERSION, LOG_DIR, LOG_LEVEL, ConfigError, PipelineConfig, load_config
from pipeline import (fit_targets, generate_dataset, inner_cv_objective, predict_samples,
                      rmse, run_baseline, run_experiment, train_model, voxelize_dataset,
                      write_provenance)
from point_io import load_dataset, save_dataset
from sampler import compute_mr, load_sample, sample_dataset, save_sample
from snbtd import save_checkpoint
from synthlab import write_provenance as write_dataset_provenance
from tuner import save_trace, tune_lambdas
from voxelizer import load_tensor, save_tensor

SUBCOMMANDS = ('generate', 'voxelize', 'sample', 'snbtd-fit', 'train', 'tune',
               'predict', 'evaluate', 'baseline', 'run')


def setup_logger():
    """配置日志：控制台 + 按大小轮转的文件"""
    logger.remove()
    logger.add(sys.stderr, level=LOG_LEVEL)
    logger.add(
        os.path.join(LOG_DIR, "antler_{time}.log"),
        rotation="10 MB",
        level=LOG_LEVEL,
        encoding="utf-8",
    )


def print_banner(command: str, config: PipelineConfig):
    print("=" * 80)
    print(f"ANTLER 点云回归工具 ({ARTIFACT_VERSION})")
    print("=" * 80)
    print(f"子命令: {command}")
    print(f"主种子: {config.master_seed}")
    print(f"输出目录: {config.output_dir}")
    print(f"启动时间: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print("=" * 80)


def _path(config: PipelineConfig, *parts: str) -> str:
    return os.path.join(config.output_dir, *parts)


def _manifest(config: PipelineConfig, args) -> str:
    path = args.manifest or config.dataset.get('manifest_path') or _path(config, 'dataset', 'manifest.csv')
    if not os.path.exists(path):
        raise ConfigError(f"未找到数据集清单: {path}（先运行 generate 或用 --manifest 指定）")
    return path


def _load_samples(config: PipelineConfig, ids):
    return [load_sample(_path(config, 'samples', f'{sid}.csv')) for sid in ids]


def _load_targets(config: PipelineConfig) -> np.ndarray:
    path = _path(config, 'snbtd', 'targets.csv')
    if not os.path.exists(path):
        raise ConfigError(f"未找到SNBTD目标: {path}（先运行 snbtd-fit）")
    frame = pd.read_csv(path, index_col='sample_id', dtype={'sample_id': str}, float_precision='round_trip')
    return frame.to_numpy()


def cmd_generate(config: PipelineConfig, args) -> int:
    dataset, provenance = generate_dataset(config)
    directory = _path(config, 'dataset')
    save_dataset(dataset, directory)
    write_dataset_provenance(provenance, os.path.join(directory, 'provenance.json'))
    return 0


def cmd_voxelize(config: PipelineConfig, args) -> int:
    dataset = load_dataset(_manifest(config, args))
    for cloud, tensor in zip(dataset.samples, voxelize_dataset(dataset, config.grid)):
        save_tensor(tensor, _path(config, 'tensors', f'{cloud.sample_id}.csv'))
    return 0


def cmd_sample(config: PipelineConfig, args) -> int:
    files = sorted(glob.glob(_path(config, 'tensors', '*.csv')))
    if not files:
        raise ConfigError("没有体素张量（先运行 voxelize）")
    tensors = [load_tensor(f) for f in files]
    m_r = config.sampler.get('m_r') or compute_mr([len(t) for t in tensors])
    logger.info(f"M_r = {m_r}")
    for path, sample in zip(files, sample_dataset(tensors, m_r, config.master_seed)):
        save_sample(sample, _path(config, 'samples', os.path.basename(path)))
    return 0


def cmd_snbtd_fit(config: PipelineConfig, args) -> int:
    dataset = load_dataset(_manifest(config, args))
    ids = [c.sample_id for c in dataset.samples]
    posterior, targets = fit_targets(_load_samples(config, ids), config, config.seed('snbtd'))
    save_checkpoint(posterior, _path(config, 'snbtd', 'checkpoint.json'))
    frame = pd.DataFrame(targets, columns=[f'z_{i + 1}' for i in range(targets.shape[1])])
    frame.insert(0, 'sample_id', ids)
    frame.to_csv(_path(config, 'snbtd', 'targets.csv'), index=False, float_format='%.17g')
    return 0


def cmd_train(config: PipelineConfig, args) -> int:
    dataset = load_dataset(_manifest(config, args))
    samples = _load_samples(config, [c.sample_id for c in dataset.samples])
    model, history = train_model(samples, dataset.responses, _load_targets(config), config,
                                 config.model['lambdas'], (0,))
    save_model(model, _path(config, 'model', 'model.json'))
    history.to_csv(_path(config, 'model', 'history.csv'), index=False, float_format='%.17g')
    return 0


def cmd_tune(config: PipelineConfig, args) -> int:
    dataset = load_dataset(_manifest(config, args))
    samples = _load_samples(config, [c.sample_id for c in dataset.samples])
    objective = inner_cv_objective(samples, dataset.responses, _load_targets(config), config, 0)
    t = config.tuner
    lambdas, value, trace = tune_lambdas(objective, t['bounds'], t['budget'], config.seed('tune'),
                                         t['initial_design'], t['n_candidates'])
    save_trace(trace, _path(config, 'tuning', 'trace.csv'))
    with open(_path(config, 'tuning', 'best.json'), 'w', encoding='utf-8') as f:
        json.dump({'lambdas': list(lambdas), 'cv_rmse': value}, f, ensure_ascii=False, indent=2)
    return 0


def cmd_predict(config: PipelineConfig, args) -> int:
    dataset = load_dataset(_manifest(config, args))
    ids = [c.sample_id for c in dataset.samples]
    model = load_model(args.model or _path(config, 'model', 'model.json'))
    predictions = predict_samples(model, _load_samples(config, ids))
    frame = pd.DataFrame(predictions, columns=[f'yhat_{j + 1}' for j in range(predictions.shape[1])])
    frame.insert(0, 'sample_id', ids)
    frame.to_csv(_path(config, 'predictions.csv'), index=False, float_format='%.17g')
    return 0


def cmd_evaluate(config: PipelineConfig, args) -> int:
    dataset = load_dataset(_manifest(config, args))
    frame = pd.read_csv(args.predictions or _path(config, 'predictions.csv'), dtype={'sample_id': str},
                        float_precision='round_trip')
    order = {c.sample_id: i for i, c in enumerate(dataset.samples)}
    truth = dataset.responses[[order[sid] for sid in frame['sample_id']]]
    values = rmse(frame.drop(columns='sample_id').to_numpy(), truth)
    for j, value in enumerate(values):
        print(f"响应 {j}: RMSE = {value:.6g}")
    return 0


def cmd_baseline(config: PipelineConfig, args) -> int:
    run_baseline(config, load_dataset(_manifest(config, args)))
    return 0


def cmd_run(config: PipelineConfig, args) -> int:
    results = run_experiment(config)
    summary = results[results['status'] == 'ok'].groupby('method')['rmse'].mean()
    print("\n各方法平均RMSE（折均值）:")
    for method, value in summary.items():
        print(f"  {method:12s} {value:.6g}")
    return 1 if results['status'].str.startswith('failed').any() else 0


COMMANDS = {
    'generate': cmd_generate,
    'voxelize': cmd_voxelize,
    'sample': cmd_sample,
    'snbtd-fit': cmd_snbtd_fit,
    'train': cmd_train,
    'tune': cmd_tune,
    'predict': cmd_predict,
    'evaluate': cmd_evaluate,
    'baseline': cmd_baseline,
    'run': cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='antler', description='ANTLER 非结构化点云回归工具')
    parser.add_argument('command', choices=SUBCOMMANDS, help='要执行的子命令')
    parser.add_argument('--config', type=str, default=None, help='JSON配置文件')
    parser.add_argument('--seed', type=int, default=None, help='覆盖主随机种子')
    parser.add_argument('--out', type=str, default=None, help='输出目录')
    parser.add_argument('--manifest', type=str, default=None, help='数据集清单（默认 <out>/dataset/manifest.csv）')
    parser.add_argument('--model', type=str, default=None, help='predict 使用的模型文件')
    parser.add_argument('--predictions', type=str, default=None, help='evaluate 使用的预测文件')
    return parser


def main(argv=None) -> int:
    """主程序入口"""
    args = build_parser().parse_args(argv)
    setup_logger()
    try:
        config = load_config(args.config, seed=args.seed, output_dir=args.out)
    except ConfigError as e:
        logger.error(f"❌ 配置错误: {e}")
        return 2
    print_banner(args.command, config)
    os.makedirs(config.output_dir, exist_ok=True)
    if args.command != 'run':
        write_provenance(config, _path(config, f'provenance_{args.command}.json'))

    try:
        return COMMANDS[args.command](config, args)
    except ConfigError as e:
        logger.error(f"❌ 配置错误: {e}")
        return 2
    except KeyboardInterrupt:
        logger.warning("⚠️ 程序被用户中断")
        return 1
    except Exception as e:
        logger.error(f"❌ {args.command} 执行失败: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
