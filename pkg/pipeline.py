#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
实验流水线：数据集 → 体素化 → 平衡采样 → SNBTD目标 → ANTLER训练（可选调参）→ k折交叉验证评估
所有随机种子都由主种子派生；M_r、标准化统计量、SNBTD目标与λ只来自训练折
"""

import json
import os
from dataclasses import asdict, dataclass
from datetime import datetime
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy
from loguru import logger
from tqdm import tqdm

from antler_model import AntlerModel, TrainConfig, init_model, predict, save_model, train
from baseline import MinMaxKnnBaseline, mean_predictor
from config import ARTIFACT_VERSION, SEED_OFFSETS, ConfigError, PipelineConfig
from point_io import Dataset, load_dataset
from sampler import BalancedSample, CapacityError, InfeasibleSampleError, balanced_sample, compute_mr
from snbtd import SnbtdPosterior, build_joint_entries, fit_snbtd, sample_embedding_means, save_checkpoint
from synthlab import (WaveParams, cone_factorial, generate_cone_dataset, generate_wave_dataset)
from tuner import save_trace, tune_lambdas
from voxelizer import BinaryVoxelTensor, select_grid, voxelize

RESULT_COLUMNS = ['method', 'fold', 'response_index', 'rmse', 'status']
METHODS = ('antler', 'minmax_knn', 'mean')
SAMPLE_MODE = 3


@dataclass
class ResultRow:
    method: str
    fold: int
    response_index: int
    rmse: float
    status: str = 'ok'


@dataclass
class FoldData:
    """一个fold的平衡样本；被跳过的测试样本记录原因"""
    m_r: int
    train_index: np.ndarray
    test_index: np.ndarray
    train_samples: List[BalancedSample]
    test_samples: List[BalancedSample]
    skipped: Dict[int, str]


def kfold_split(n: int, k: int, seed: int) -> List[np.ndarray]:
    """带种子打乱后连续切分为k折，各折大小相差不超过1"""
    if k < 2:
        raise ValueError(f"交叉验证要求 k >= 2，实际为 {k}")
    if k > n:
        raise ValueError(f"折数 k={k} 大于样本数 n={n}")
    permutation = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(permutation, k)]


def rmse(predictions: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """逐输出列的均方根误差"""
    predictions = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predictions.shape != truth.shape:
        raise ValueError(f"预测形状 {predictions.shape} 与真值形状 {truth.shape} 不一致")
    if predictions.ndim == 1:
        predictions, truth = predictions[:, None], truth[:, None]
    return np.sqrt(np.mean((predictions - truth) ** 2, axis=0))


def standardize_responses(responses: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """训练折的逐列均值与标准差（标准差为0时取1）"""
    responses = np.asarray(responses, dtype=np.float64)
    mean = responses.mean(axis=0)
    scale = responses.std(axis=0)
    return mean, np.where(scale > 0, scale, 1.0)


def generate_dataset(config: PipelineConfig) -> Tuple[Dataset, Dict]:
    """按配置生成合成数据集或读取清单"""
    ds = config.dataset
    kind = ds['kind']
    if kind == 'manifest':
        return load_dataset(ds['manifest_path']), {'generator': 'manifest', 'manifest_path': ds['manifest_path']}
    if kind == 'wave':
        params = WaveParams(resolution=tuple(ds['resolution']), n_samples=ds['n_samples'],
                            noise=ds['noise'], seed=config.seed('generate'))
        return generate_wave_dataset(params, ds['m_l'], ds['m_u'], ds['m_r'], config.master_seed)
    if kind == 'cone':
        designs = cone_factorial(resolution=tuple(ds['resolution']), noise=ds['noise'],
                                 levels=ds['cone_levels'], seed=config.master_seed)
        return generate_cone_dataset(designs, ds['m_l'], ds['m_u'], ds['m_r'], config.master_seed,
                                     n_bins=ds['roundness_bins'])
    raise ConfigError(f"未知的数据集类型: {kind}")


def voxelize_dataset(dataset: Dataset, grid_config: Dict) -> List[BinaryVoxelTensor]:
    """每个样本独立选择网格并体素化"""
    tensors = []
    for cloud in tqdm(dataset.samples, desc="体素化", leave=False):
        grid = select_grid(cloud, initial_dims=tuple(grid_config['initial_dims']),
                           max_dim=grid_config['max_dim'], margin=grid_config['margin'],
                           epsilon=grid_config['epsilon'])
        tensors.append(voxelize(cloud, grid))
    counts = [len(t) for t in tensors]
    logger.info(f"体素化完成: 占据体素数 {min(counts)}~{max(counts)}")
    return tensors


def prepare_fold(tensors: Sequence[BinaryVoxelTensor], train_index: np.ndarray, test_index: np.ndarray,
                 config: PipelineConfig, fold: int) -> FoldData:
    """M_r 只由训练样本决定；超出容量的测试样本记为跳过"""
    m_r = config.sampler.get('m_r') or compute_mr([len(tensors[i]) for i in train_index])
    train_samples = [balanced_sample(tensors[i], m_r, config.seed('sampler', fold, int(i)))
                     for i in train_index]
    test_samples, kept, skipped = [], [], {}
    for i in test_index:
        try:
            test_samples.append(balanced_sample(tensors[i], m_r, config.seed('sampler', fold, int(i))))
            kept.append(i)
        except (CapacityError, InfeasibleSampleError) as e:
            skipped[int(i)] = f"skipped: {e}"
            logger.warning(f"⚠️ fold {fold}: 测试样本 {i} 被跳过: {e}")
    return FoldData(m_r, np.asarray(train_index), np.asarray(kept, dtype=np.int64),
                    train_samples, test_samples, skipped)


def fit_targets(samples: Sequence[BalancedSample], config: PipelineConfig,
                seed: int) -> Tuple[SnbtdPosterior, np.ndarray]:
    """在联合 (x, y, z, 样本) 训练张量上拟合SNBTD，返回样本模态嵌入均值作为正则化目标"""
    cfg = config.snbtd
    indices, bits, dims = build_joint_entries(samples)
    ranks = list(cfg['ranks']) + [config.model['latent_dim']]
    posterior = fit_snbtd(indices, bits, dims, ranks, n_frequencies=cfg['n_frequencies'],
                          patch_size=cfg['patch_size'], epochs=cfg['epochs'], seed=seed,
                          gh_nodes=cfg['gh_nodes'], damping=cfg['damping'],
                          variance_floor=cfg['variance_floor'], max_skip_fraction=cfg['max_skip_fraction'])
    return posterior, sample_embedding_means(posterior, SAMPLE_MODE)


def train_config_for(config: PipelineConfig, seed: int) -> TrainConfig:
    t = config.train
    return TrainConfig(learning_rate=t['learning_rate'], batch_size=t['batch_size'],
                       max_epochs=t['max_epochs'], seed=seed, tolerance=t['tolerance'],
                       window=t['window'], weight_decay=t['weight_decay'], max_norm=t['max_norm'])


def train_model(samples: Sequence[BalancedSample], responses: np.ndarray, targets: Optional[np.ndarray],
                config: PipelineConfig, lambdas: Sequence[float],
                seed_key: Tuple[int, ...]) -> Tuple[AntlerModel, pd.DataFrame]:
    """标准化响应后训练ANTLER，模型记录标准化参数以便还原预测"""
    responses = np.asarray(responses, dtype=np.float64).reshape(len(samples), -1)
    mean, scale = standardize_responses(responses)
    m = config.model
    model = init_model(samples[0].m_r, responses.shape[1], latent_dim=m['latent_dim'],
                       encoder_hidden=m['encoder_hidden'], decoder_hidden=m['decoder_hidden'],
                       regressor_hidden=m['regressor_hidden'], lambdas=tuple(lambdas),
                       loss_samples=m['loss_samples'], seed=config.seed('model_init', *seed_key))
    model, history = train(model, samples, (responses - mean) / scale, targets,
                           train_config_for(config, config.seed('train', *seed_key)))
    model.response_mean, model.response_scale = mean, scale
    return model, history


def predict_samples(model: AntlerModel, samples: Sequence[BalancedSample]) -> np.ndarray:
    return np.vstack([predict(model, s) for s in samples])


def inner_cv_objective(samples: Sequence[BalancedSample], responses: np.ndarray, targets: np.ndarray,
                       config: PipelineConfig, fold: int) -> Callable[[Tuple[float, float, float]], float]:
    """调参目标：外层训练折内部k折交叉验证的平均RMSE"""
    responses = np.asarray(responses, dtype=np.float64).reshape(len(samples), -1)
    k = min(config.tuner['inner_folds'], len(samples))
    inner = kfold_split(len(samples), k, config.seed('inner_kfold', fold))
    counter = {'calls': 0}

    def evaluate(lambdas: Tuple[float, float, float]) -> float:
        call = counter['calls']
        counter['calls'] += 1
        scores = []
        for j, val in enumerate(inner):
            tr = np.setdiff1d(np.arange(len(samples)), val)
            model, _ = train_model([samples[i] for i in tr], responses[tr], targets[tr],
                                   config, lambdas, (fold, 1000 + call, j))
            preds = predict_samples(model, [samples[i] for i in val])
            scores.append(float(np.mean(rmse(preds, responses[val]))))
        return float(np.mean(scores))

    return evaluate


def _method_rows(method: str, fold: int, values: np.ndarray) -> List[ResultRow]:
    return [ResultRow(method, fold, j, float(v)) for j, v in enumerate(values)]


def run_fold(dataset: Dataset, tensors: Sequence[BinaryVoxelTensor], train_index: np.ndarray,
             test_index: np.ndarray, config: PipelineConfig, fold: int) -> List[ResultRow]:
    """一个fold的完整流程，产物写到 <out>/folds/fold_XX/"""
    fold_dir = os.path.join(config.output_dir, 'folds', f'fold_{fold:02d}')
    os.makedirs(fold_dir, exist_ok=True)
    data = prepare_fold(tensors, train_index, test_index, config, fold)
    rows = [ResultRow('all', fold, -1, float('nan'), reason) for _, reason in sorted(data.skipped.items())]
    logger.info(f"fold {fold}: M_r={data.m_r}, 训练 {len(data.train_samples)}, "
                f"测试 {len(data.test_samples)}, 跳过 {len(data.skipped)}")

    posterior, targets = fit_targets(data.train_samples, config, config.seed('snbtd', fold))
    save_checkpoint(posterior, os.path.join(fold_dir, 'snbtd_checkpoint.json'))

    y_train = dataset.responses[data.train_index]
    lambdas = tuple(config.model['lambdas'])
    if config.tuner['enabled']:
        objective = inner_cv_objective(data.train_samples, y_train, targets, config, fold)
        t = config.tuner
        lambdas, _, trace = tune_lambdas(objective, t['bounds'], t['budget'], config.seed('tune', fold),
                                         t['initial_design'], t['n_candidates'])
        save_trace(trace, os.path.join(fold_dir, 'tuning_trace.csv'))

    model, history = train_model(data.train_samples, y_train, targets, config, lambdas, (fold,))
    model.metadata['fold'] = fold
    model.metadata['snbtd_skipped_patches'] = posterior.skipped_patches
    save_model(model, os.path.join(fold_dir, 'model.json'))
    history.to_csv(os.path.join(fold_dir, 'history.csv'), index=False, float_format='%.17g')

    if data.test_index.size == 0:
        reason = "skipped: no evaluable test samples"
        rows += [ResultRow(method, fold, j, float('nan'), reason)
                 for method in METHODS for j in range(dataset.n_responses)]
        return rows

    y_test = dataset.responses[data.test_index]
    baseline = MinMaxKnnBaseline(config.evaluation['k_features'], config.evaluation['k_nn'])
    baseline.fit([dataset.samples[i] for i in data.train_index], y_train)
    predictions = {
        'antler': predict_samples(model, data.test_samples),
        'minmax_knn': baseline.predict([dataset.samples[i] for i in data.test_index]),
        'mean': mean_predictor(y_train, len(data.test_index)),
    }
    for method in METHODS:
        rows += _method_rows(method, fold, rmse(predictions[method], y_test))
    return rows


def summarize_results(results: pd.DataFrame) -> pd.DataFrame:
    """逐方法、逐响应的 RMSE 均值 ± 标准差（折均值为主统计量）"""
    ok = results[results['status'] == 'ok']
    summary = ok.groupby(['method', 'response_index'])['rmse'].agg(['mean', 'std', 'count']).reset_index()
    summary.columns = ['method', 'response_index', 'rmse_mean', 'rmse_std', 'n_folds']
    return summary


def boxplot_data(results: pd.DataFrame) -> pd.DataFrame:
    """箱线图数据：每行一个fold，每列一个 方法_响应"""
    ok = results[results['status'] == 'ok'].copy()
    ok['column'] = ok['method'] + '_r' + ok['response_index'].astype(str)
    return ok.pivot(index='fold', columns='column', values='rmse').reset_index()


def write_results(rows: Sequence[ResultRow], path: str) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(r) for r in rows], columns=RESULT_COLUMNS)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False, float_format='%.17g')
    return frame


def write_provenance(config: PipelineConfig, path: str, extra: Optional[Dict] = None):
    """完整配置、主种子、各阶段派生种子与版本信息"""
    document = {
        'artifact_version': ARTIFACT_VERSION,
        'created_at': datetime.now().strftime('%Y-%m-%d %H:%M:%S'),
        'config': config.to_dict(),
        'master_seed': config.master_seed,
        'derived_seeds': {stage: config.seed(stage) for stage in SEED_OFFSETS},
        'versions': {'numpy': np.__version__, 'scipy': scipy.__version__, 'pandas': pd.__version__},
    }
    if extra:
        document.update(extra)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(document, f, ensure_ascii=False, indent=2)


def run_experiment(config: PipelineConfig, dataset: Optional[Dataset] = None) -> pd.DataFrame:
    """
    k折交叉验证实验；任一阶段失败只标记该fold，其余fold继续
    输出 results.csv、summary.csv、boxplot.csv、provenance.json 以及每个fold的模型与检查点
    """
    os.makedirs(config.output_dir, exist_ok=True)
    provenance: Dict = {}
    if dataset is None:
        dataset, provenance = generate_dataset(config)
    tensors = voxelize_dataset(dataset, config.grid)
    folds = kfold_split(len(dataset), config.evaluation['k_folds'], config.seed('kfold'))
    logger.info(f"开始 {len(folds)} 折交叉验证: N={len(dataset)}, p={dataset.n_responses}")

    all_index = np.arange(len(dataset))
    rows: List[ResultRow] = []
    for fold, test_index in enumerate(tqdm(folds, desc="交叉验证")):
        train_index = np.setdiff1d(all_index, test_index)
        try:
            rows += run_fold(dataset, tensors, train_index, test_index, config, fold)
        except Exception as e:
            logger.error(f"❌ fold {fold} 失败: {e}")
            rows += [ResultRow(method, fold, j, float('nan'), f"failed: {type(e).__name__}: {e}")
                     for method in METHODS for j in range(dataset.n_responses)]

    results = write_results(rows, os.path.join(config.output_dir, 'results.csv'))
    summarize_results(results).to_csv(os.path.join(config.output_dir, 'summary.csv'),
                                      index=False, float_format='%.17g')
    boxplot_data(results).to_csv(os.path.join(config.output_dir, 'boxplot.csv'),
                                 index=False, float_format='%.17g')
    write_provenance(config, os.path.join(config.output_dir, 'provenance.json'),
                     {'dataset': provenance, 'folds': [f.tolist() for f in folds]})
    n_failed = int(results['status'].str.startswith('failed').sum())
    logger.info(f"✅ 实验完成: {len(results)} 行结果，失败 {n_failed} 行，输出目录 {config.output_dir}")
    return results


def run_baseline(config: PipelineConfig, dataset: Dataset) -> pd.DataFrame:
    """只运行特征基线与均值预测器的k折评估（不需要体素化）"""
    folds = kfold_split(len(dataset), config.evaluation['k_folds'], config.seed('kfold'))
    all_index = np.arange(len(dataset))
    rows: List[ResultRow] = []
    for fold, test_index in enumerate(folds):
        train_index = np.setdiff1d(all_index, test_index)
        y_train, y_test = dataset.responses[train_index], dataset.responses[test_index]
        baseline = MinMaxKnnBaseline(config.evaluation['k_features'], config.evaluation['k_nn'])
        baseline.fit([dataset.samples[i] for i in train_index], y_train)
        rows += _method_rows('minmax_knn', fold,
                             rmse(baseline.predict([dataset.samples[i] for i in test_index]), y_test))
        rows += _method_rows('mean', fold, rmse(mean_predictor(y_train, len(test_index)), y_test))
    return write_results(rows, os.path.join(config.output_dir, 'baseline_results.csv'))
