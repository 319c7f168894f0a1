import copy
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np
from dotenv import load_dotenv

# 加载环境变量
load_dotenv()

ARTIFACT_VERSION = "antler-toolkit 0.3.0"

# 主随机种子，可以在.env文件中配置 ANTLER_MASTER_SEED=2024
MASTER_SEED = int(os.getenv('ANTLER_MASTER_SEED', '20240517'))

# 日志配置
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
LOG_DIR = os.getenv('LOG_DIR', 'logs')

# 输出目录
OUTPUT_DIR = os.getenv('ANTLER_OUTPUT_DIR', 'antler_output')

# 各阶段种子偏移（所有种子都由主种子派生）
SEED_OFFSETS = {
    'generate': 1,       # 数据生成
    'unstructure': 2,    # 非结构化子采样
    'sampler': 3,        # 平衡采样（每个fold一个偏移）
    'snbtd': 4,          # 张量分解初始化与patch顺序
    'model_init': 5,     # 网络参数初始化
    'train': 6,          # SGD打乱与噪声
    'kfold': 7,          # 外层交叉验证划分
    'tune': 8,           # 贝叶斯优化
    'inner_kfold': 9,    # 调参内层交叉验证划分（与外层不相交）
}

# 数据集配置
DATASET_CONFIG = {
    'kind': 'wave',              # wave / cone / manifest
    'manifest_path': None,       # kind=manifest时使用
    'n_samples': 100,
    'resolution': [100, 100],    # I1, I2（完整规模为1000/100000，默认取100）
    'noise': 0.1,                # δ
    'cone_levels': [0.9, 1.0, 1.2],
    'm_l': 600,                  # 子采样下界
    'm_u': 1000,                 # 子采样上界
    'm_r': 300,                  # 极值子集大小（必须是6的倍数）
    'roundness_bins': 20,        # MZT圆度的z分箱数
}

# 体素化配置
GRID_CONFIG = {
    'initial_dims': [100, 100, 100],
    'max_dim': 1024,
    'margin': 0.05,
    'epsilon': 1e-6,
}

# 平衡采样配置
SAMPLER_CONFIG = {
    'm_r': None,   # None表示由训练样本计算 2·max
}

# SNBTD配置
SNBTD_CONFIG = {
    'ranks': [3, 3, 3],        # x, y, z 模态的秩；样本模态秩等于潜变量维度L
    'n_frequencies': 128,      # M
    'patch_size': 512,
    'epochs': 1,               # 对条目流的遍历次数
    'gh_nodes': 9,
    'damping': 0.5,
    'variance_floor': 1e-8,
    'max_skip_fraction': 0.5,  # 数值奇异而跳过的patch比例上限
}

# 网络结构配置
MODEL_CONFIG = {
    'latent_dim': 8,
    'encoder_hidden': [256, 64],
    'decoder_hidden': [64, 256],
    'regressor_hidden': [32, 16],
    'loss_samples': 5,         # S
    'lambdas': [1.0, 0.1, 10.0],
}

# 训练配置
TRAIN_CONFIG = {
    'learning_rate': 1e-3,
    'batch_size': 1,           # 单样本SGD
    'max_epochs': 100,
    'tolerance': 1e-6,
    'window': 10,
    'weight_decay': 0.0,
    'max_norm': None,
}

# 调参配置
TUNER_CONFIG = {
    'enabled': False,
    'bounds': [[-3.0, 3.0], [-3.0, 3.0], [-3.0, 3.0]],   # log10 λ
    'budget': 20,
    'initial_design': 8,
    'n_candidates': 1024,
    'inner_folds': 3,
}

# 评估配置
EVAL_CONFIG = {
    'k_folds': 10,
    'k_features': 64,          # min/max特征的k_f
    'k_nn': 5,
}

SECTIONS = {
    'dataset': DATASET_CONFIG,
    'grid': GRID_CONFIG,
    'sampler': SAMPLER_CONFIG,
    'snbtd': SNBTD_CONFIG,
    'model': MODEL_CONFIG,
    'train': TRAIN_CONFIG,
    'tuner': TUNER_CONFIG,
    'evaluation': EVAL_CONFIG,
}


class ConfigError(ValueError):
    """配置错误（CLI退出码2）"""


def derive_seed(master_seed: int, stage: str, *indices: int) -> int:
    """由主种子、阶段名和索引派生子种子"""
    if stage not in SEED_OFFSETS:
        raise ConfigError(f"未知的种子阶段: {stage}")
    entropy = [int(master_seed), SEED_OFFSETS[stage]] + [int(i) for i in indices]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


@dataclass
class PipelineConfig:
    """完整的流水线配置：默认值 <- JSON配置文件 <- 命令行参数"""
    dataset: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DATASET_CONFIG))
    grid: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(GRID_CONFIG))
    sampler: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(SAMPLER_CONFIG))
    snbtd: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(SNBTD_CONFIG))
    model: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(MODEL_CONFIG))
    train: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(TRAIN_CONFIG))
    tuner: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(TUNER_CONFIG))
    evaluation: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(EVAL_CONFIG))
    master_seed: int = MASTER_SEED
    output_dir: str = OUTPUT_DIR

    def __post_init__(self):
        self.validate()

    def validate(self):
        """检查配置的不变量"""
        if self.evaluation['k_folds'] < 2:
            raise ConfigError("交叉验证要求 k >= 2")
        if self.dataset['kind'] not in ('wave', 'cone', 'manifest'):
            raise ConfigError(f"未知的数据集类型: {self.dataset['kind']}")
        if self.dataset['kind'] == 'manifest' and not self.dataset.get('manifest_path'):
            raise ConfigError("kind=manifest 需要 manifest_path")
        if self.dataset['m_r'] % 6 != 0:
            raise ConfigError("m_r 必须是6的倍数")
        lambdas = self.model['lambdas']
        if len(lambdas) != 3 or any(l < 0 for l in lambdas):
            raise ConfigError("lambdas 必须是3个非负数")
        if self.train['batch_size'] < 1:
            raise ConfigError("batch_size 必须 >= 1")
        if len(self.snbtd['ranks']) != 3:
            raise ConfigError("snbtd.ranks 需要给出 x, y, z 三个模态的秩")
        if not 0.0 <= self.snbtd['max_skip_fraction'] <= 1.0:
            raise ConfigError("snbtd.max_skip_fraction 必须在 [0, 1] 内")

    def seed(self, stage: str, *indices: int) -> int:
        return derive_seed(self.master_seed, stage, *indices)

    def to_dict(self) -> Dict[str, Any]:
        result = {name: copy.deepcopy(getattr(self, name)) for name in SECTIONS}
        result['master_seed'] = self.master_seed
        result['output_dir'] = self.output_dir
        return result

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PipelineConfig':
        merged = {name: copy.deepcopy(defaults) for name, defaults in SECTIONS.items()}
        for key, value in data.items():
            if key in ('master_seed', 'output_dir'):
                continue
            if key not in SECTIONS:
                raise ConfigError(f"未知的配置段: {key}")
            if not isinstance(value, dict):
                raise ConfigError(f"配置段 {key} 必须是对象")
            unknown = set(value) - set(SECTIONS[key])
            if unknown:
                raise ConfigError(f"配置段 {key} 含未知键: {sorted(unknown)}")
            merged[key].update(value)
        return cls(
            master_seed=int(data.get('master_seed', MASTER_SEED)),
            output_dir=data.get('output_dir', OUTPUT_DIR),
            **merged,
        )


def load_config(path: Optional[str] = None, seed: Optional[int] = None,
                output_dir: Optional[str] = None) -> PipelineConfig:
    """加载JSON配置文件，并用命令行参数覆盖"""
    data: Dict[str, Any] = {}
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"未找到配置文件: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件不是合法JSON {path}: {e}")
    if seed is not None:
        data['master_seed'] = seed
    if output_dir is not None:
        data['output_dir'] = output_dir
    return PipelineConfig.from_dict(data)
