#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
合成基准数据：波形曲面与截锥
- 结构化生成（Tucker积波形曲面 / 锥面半径公式 + 全因子设计）
- 非结构化处理（随机子采样 + 各轴极值子集）
- 响应计算：ODR平面粗糙度、最小区域（MZT）圆度
"""

import itertools
import json
import os
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.optimize import minimize
from scipy.spatial import Delaunay, QhullError
from tqdm import tqdm

from config import ARTIFACT_VERSION, derive_seed
from point_io import Dataset, PointCloud

DEFAULT_B1 = ((4.0, 1.0, 0.0), (1.0, 0.1, 0.0), (1.0, 0.0, 1.0))
DEFAULT_B2 = ((1.0, 2.0, 0.0), (1.0, 3.0, 0.0), (1.0, 0.0, 0.2))

# 正常工况 (θ0, r0, e0, c0)
CONE_NORMAL = {'theta': np.pi / 8, 'r': 1.3, 'e': 0.3, 'c': 0.5}
CONE_LEVELS = (0.9, 1.0, 1.2)

VERTICAL_TOLERANCE = 1e-6


class DegenerateGeometryError(ValueError):
    """点集退化（共线、点数不足或线性系统奇异）"""


class VerticalPlaneError(ValueError):
    """拟合平面接近竖直，需要先旋转点云"""


class RoundnessError(ValueError):
    """圆度计算的输入无效"""


class InsufficientDataError(ValueError):
    """所有z分箱的点数都不足"""


class UnstructureParamError(ValueError):
    """非结构化参数无效"""


@dataclass(frozen=True)
class WaveParams:
    resolution: Tuple[int, int] = (100, 100)
    n_samples: int = 100
    noise: float = 0.1
    b1: Tuple[Tuple[float, ...], ...] = DEFAULT_B1
    b2: Tuple[Tuple[float, ...], ...] = DEFAULT_B2
    seed: int = 0

    def __post_init__(self):
        if min(self.resolution) < 2:
            raise ValueError(f"网格尺寸必须 >= 2: {self.resolution}")
        if self.noise < 0 or self.n_samples < 1:
            raise ValueError("噪声必须非负，样本数必须为正")
        if np.shape(self.b1) != (3, 3) or np.shape(self.b2) != (3, 3):
            raise ValueError("核心张量切片必须是3×3")

    @property
    def core(self) -> np.ndarray:
        """核心张量 𝓑 (3 × 3 × 2)"""
        return np.stack([np.asarray(self.b1, dtype=np.float64), np.asarray(self.b2, dtype=np.float64)], axis=2)


@dataclass(frozen=True)
class ConeParams:
    resolution: Tuple[int, int] = (100, 100)
    theta: float = CONE_NORMAL['theta']
    r: float = CONE_NORMAL['r']
    e: float = CONE_NORMAL['e']
    c: float = CONE_NORMAL['c']
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if min(self.resolution) < 1:
            raise ValueError(f"分辨率必须为正: {self.resolution}")
        if not (0 <= self.e < 1 and 0 < self.theta < np.pi / 2 and self.r > 0):
            raise ValueError(f"锥面参数超出定义域: θ={self.theta}, r={self.r}, e={self.e}")
        if self.noise < 0:
            raise ValueError("噪声必须非负")


@dataclass(frozen=True)
class UnstructureParams:
    m_l: int
    m_u: int
    m_r: int
    seed: int = 0


@dataclass(frozen=True, eq=False)
class PlaneFit:
    """z = β0 + β1·x + β2·y；delta 为增广矩阵最小奇异值，normal 为单位法向量"""
    beta: np.ndarray
    delta: float
    normal: np.ndarray


def wave_basis(n: int) -> np.ndarray:
    """U = [u_1, u_2, u_3]，u_α[i] = sin(π·α·i / n)，i = 1..n"""
    i = np.arange(1, n + 1, dtype=np.float64)[:, None]
    alpha = np.arange(1, 4, dtype=np.float64)[None, :]
    return np.sin(np.pi * alpha * i / n)


def wave_surface(params: WaveParams, latent: np.ndarray) -> np.ndarray:
    """单个样本的无噪声高度矩阵 U1 (Σ_c Z_c B_c) U2ᵀ"""
    n1, n2 = params.resolution
    mixed = np.tensordot(params.core, np.asarray(latent, dtype=np.float64), axes=([2], [0]))
    return wave_basis(n1) @ mixed @ wave_basis(n2).T


def gen_wave(params: WaveParams, latent: Optional[np.ndarray] = None,
             mean_surface: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
             ) -> Tuple[List[PointCloud], np.ndarray]:
    """
    生成波形曲面点云，返回 (点云列表, 潜变量Z)
    latent 可覆盖 Z (N × 2)；mean_surface(x网格, y网格) 提供可选的均值曲面
    """
    rng = np.random.default_rng(params.seed)
    n1, n2 = params.resolution
    z_latent = rng.standard_normal((params.n_samples, 2))
    if latent is not None:
        z_latent = np.asarray(latent, dtype=np.float64).reshape(params.n_samples, 2)
    gx, gy = np.meshgrid(np.linspace(0.0, 1.0, n1), np.linspace(0.0, 1.0, n2), indexing='ij')
    mean = np.zeros((n1, n2)) if mean_surface is None else np.asarray(mean_surface(gx, gy), dtype=np.float64)

    clouds = []
    for i in range(params.n_samples):
        heights = mean + wave_surface(params, z_latent[i])
        if params.noise > 0:
            heights = heights + rng.normal(0.0, params.noise, size=heights.shape)
        points = np.column_stack([gx.ravel(), gy.ravel(), heights.ravel()])
        clouds.append(PointCloud(points, f"wave_{i:05d}"))
    return clouds, z_latent


def cone_radius(phi: np.ndarray, z: np.ndarray, theta: float, r: float, e: float, c: float) -> np.ndarray:
    """r(φ, z) = (r + z·tanθ) / sqrt(1 - e²cos²φ) + c(z² - z)"""
    return (r + z * np.tan(theta)) / np.sqrt(1.0 - e ** 2 * np.cos(phi) ** 2) + c * (z ** 2 - z)


def gen_cone(params: ConeParams, sample_id: str = "cone") -> PointCloud:
    """φ = 2π·i1/I1，z = i2/I2；半径加噪声后转为笛卡尔坐标"""
    rng = np.random.default_rng(params.seed)
    n1, n2 = params.resolution
    phi = 2.0 * np.pi * np.arange(1, n1 + 1) / n1
    z = np.arange(1, n2 + 1) / n2
    phi_grid, z_grid = np.meshgrid(phi, z, indexing='ij')
    radius = cone_radius(phi_grid, z_grid, params.theta, params.r, params.e, params.c)
    if params.noise > 0:
        radius = radius + rng.normal(0.0, params.noise, size=radius.shape)
    points = np.column_stack([(radius * np.cos(phi_grid)).ravel(),
                              (radius * np.sin(phi_grid)).ravel(),
                              z_grid.ravel()])
    return PointCloud(points, sample_id)


def cone_factorial(resolution=(100, 100), noise: float = 0.01, levels: Sequence[float] = CONE_LEVELS,
                   seed: int = 0) -> List[ConeParams]:
    """(θ, r, e, c) 在正常工况倍数水平上的全因子设计，默认 3⁴ = 81 组"""
    designs = []
    for i, (lt, lr, le, lc) in enumerate(itertools.product(levels, repeat=4)):
        designs.append(ConeParams(
            resolution=tuple(resolution),
            theta=lt * CONE_NORMAL['theta'], r=lr * CONE_NORMAL['r'],
            e=le * CONE_NORMAL['e'], c=lc * CONE_NORMAL['c'],
            noise=noise, seed=derive_seed(seed, 'generate', i),
        ))
    return designs


def _check_unstructure(params: UnstructureParams, n_points: int):
    if params.m_r % 6 != 0 or params.m_r < 6:
        raise UnstructureParamError(f"m_r={params.m_r} 必须是6的正整数倍")
    if not 1 <= params.m_l <= params.m_u <= n_points:
        raise UnstructureParamError(f"需要 1 <= m_l <= m_u <= M: m_l={params.m_l}, m_u={params.m_u}, M={n_points}")
    if params.m_r > params.m_l:
        raise UnstructureParamError(f"m_r={params.m_r} 不能超过 m_l={params.m_l}")


def extreme_indices(points: np.ndarray, per_tail: int) -> List[int]:
    """
    每个坐标轴取最小与最大的 per_tail 个点（同值按 (x, y, z) 字典序再按原索引），
    按 轴 → (最小, 最大) → 名次 顺序返回去重后的索引
    """
    index = np.arange(points.shape[0])
    selected: Dict[int, None] = {}
    for axis in range(3):
        order = np.lexsort((index, points[:, 2], points[:, 1], points[:, 0], points[:, axis]))
        for i in np.concatenate([order[:per_tail], order[::-1][:per_tail]]):
            selected.setdefault(int(i))
    return list(selected)


def unstructure(cloud: PointCloud, params: UnstructureParams) -> Tuple[PointCloud, PointCloud]:
    """
    (1) m_i ~ U{m_l..m_u}，无放回均匀子采样 m_i 个点作为模型输入
    (2) 从子样本中取各轴两端各 m_r/6 个极值点，去重后随机补足到 m_r 个，作为响应点集
    """
    _check_unstructure(params, len(cloud))
    rng = np.random.default_rng(params.seed)
    m_i = int(rng.integers(params.m_l, params.m_u + 1))
    model_index = np.sort(rng.choice(len(cloud), size=m_i, replace=False))
    model_points = cloud.points[model_index]

    chosen = extreme_indices(model_points, params.m_r // 6)
    if len(chosen) < params.m_r:
        remaining = np.setdiff1d(np.arange(m_i), chosen)
        chosen.extend(rng.choice(remaining, size=params.m_r - len(chosen), replace=False).tolist())
    response_points = model_points[np.sort(np.asarray(chosen))]
    return (PointCloud(model_points, cloud.sample_id),
            PointCloud(response_points, f"{cloud.sample_id}_response"))


def odr_plane(cloud: PointCloud) -> PlaneFit:
    """
    正交距离回归平面：在中心化坐标上解 (XᵀX - δ²I) β = Xᵀz，X 只含 x、y 两列，
    δ 为中心化点阵 [x-x̄, y-ȳ, z-z̄] 的最小奇异值；截距由质心恢复。
    质心在原点时与含常数列的增广矩阵 [1 x y z] 写法结果相同；
    一般位置上常数列不视为含误差，结果不随平移改变
    """
    points = np.asarray(cloud.points, dtype=np.float64)
    if points.shape[0] < 3:
        raise DegenerateGeometryError("平面拟合至少需要3个点")
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    scale = max(singular[0], 1e-300)
    if singular[1] <= 1e-12 * scale:
        raise DegenerateGeometryError("点集共线或重合，无法确定平面")
    normal = vt[2]
    if abs(normal[2]) < VERTICAL_TOLERANCE:
        raise VerticalPlaneError("拟合平面接近竖直，请先旋转点云使平面可表示为 z = f(x, y)")

    delta = float(singular[2])
    design = centered[:, :2]
    shifted = design.T @ design - delta ** 2 * np.eye(2)
    try:
        slopes = np.linalg.solve(shifted, design.T @ centered[:, 2])
    except np.linalg.LinAlgError:
        raise DegenerateGeometryError("ODR移位正规方程奇异")
    if not np.all(np.isfinite(slopes)):
        raise DegenerateGeometryError("ODR移位正规方程奇异")
    beta0 = centroid[2] - slopes @ centroid[:2]
    unit = np.array([slopes[0], slopes[1], -1.0])
    unit /= np.linalg.norm(unit)
    return PlaneFit(np.array([beta0, slopes[0], slopes[1]]), delta, unit)


def roughness_response(cloud: PointCloud) -> float:
    """R_a：点到ODR平面无符号正交距离的总体标准差"""
    fit = odr_plane(cloud)
    anchor = np.array([0.0, 0.0, fit.beta[0]])
    distances = np.abs((cloud.points - anchor) @ fit.normal)
    return float(np.std(distances))


def _zone_width(center: np.ndarray, ring: np.ndarray) -> float:
    radii = np.hypot(ring[:, 0] - center[0], ring[:, 1] - center[1])
    return float(radii.max() - radii.min())


def mzt_fit(ring: np.ndarray, polish_rounds: int = 10, polish_points: int = 11) -> Tuple[float, np.ndarray]:
    """
    最小区域圆度：在环的凸包内搜索圆心，使外接圆半径与内切圆半径之差最小
    质心起步 → Nelder–Mead → 逐级收缩的网格精修；返回 (R, 圆心)
    """
    ring = np.asarray(ring, dtype=np.float64)
    if ring.ndim != 2 or ring.shape[1] != 2 or ring.shape[0] < 3:
        raise RoundnessError("圆度计算至少需要3个二维点")
    centroid = ring.mean(axis=0)
    spread = np.linalg.svd(ring - centroid, compute_uv=False)
    if spread[1] <= 1e-12 * max(spread[0], 1e-300):
        raise DegenerateGeometryError("环上的点共线")
    try:
        hull = Delaunay(ring)
    except QhullError as e:
        raise DegenerateGeometryError(f"无法构建环的凸包: {e}")

    size = float(np.mean(np.hypot(*(ring - centroid).T)))

    def objective(center: np.ndarray) -> float:
        width = _zone_width(center, ring)
        if hull.find_simplex(center) < 0:
            return width + size * (1.0 + np.linalg.norm(center - centroid))
        return width

    simplex = np.array([centroid, centroid + [0.1 * size, 0.0], centroid + [0.0, 0.1 * size]])
    result = minimize(objective, centroid, method='Nelder-Mead',
                      options={'initial_simplex': simplex, 'xatol': 1e-12 * size,
                               'fatol': 1e-14 * size, 'maxiter': 1000})
    best = result.x if result.fun <= objective(centroid) else centroid
    best_value = objective(best)

    half_width = 0.02 * size
    offsets = np.linspace(-1.0, 1.0, polish_points)
    for _ in range(polish_rounds):
        for dx, dy in itertools.product(offsets, offsets):
            candidate = best + half_width * np.array([dx, dy])
            value = objective(candidate)
            if value < best_value:
                best, best_value = candidate, value
        half_width *= 0.25
    return _zone_width(best, ring), best


def mzt_roundness(ring: np.ndarray) -> float:
    """R = min over centers of OC - IC"""
    return mzt_fit(ring)[0]


def roundness_response(cloud: PointCloud, n_bins: int = 20, min_points: int = 8) -> float:
    """按z等宽分箱取环，每个点数足够的环计算MZT圆度，返回平均值"""
    if n_bins < 1:
        raise ValueError("n_bins 必须 >= 1")
    points = cloud.points
    z = points[:, 2]
    z_min, z_max = float(z.min()), float(z.max())
    if z_max <= z_min:
        raise InsufficientDataError("点云没有z方向跨度")
    width = (z_max - z_min) / n_bins
    bins = np.clip(np.floor((z - z_min) / width).astype(np.int64), 0, n_bins - 1)

    values = []
    for b in range(n_bins):
        ring = points[bins == b, :2]
        if ring.shape[0] < min_points:
            logger.debug(f"{cloud.sample_id} 第 {b} 个z分箱只有 {ring.shape[0]} 个点，跳过")
            continue
        try:
            values.append(mzt_roundness(ring))
        except (RoundnessError, DegenerateGeometryError) as e:
            logger.warning(f"⚠️ {cloud.sample_id} 第 {b} 个z分箱无法计算圆度: {e}")
    if not values:
        raise InsufficientDataError(f"{cloud.sample_id} 没有点数 >= {min_points} 的z分箱")
    return float(np.mean(values))


def noise_sweep(params, deltas: Sequence[float]) -> list:
    """同一组生成参数在多个噪声水平上的副本"""
    return [replace(params, noise=float(delta)) for delta in deltas]


def _unstructure_dataset(clouds: Sequence[PointCloud], m_l: int, m_u: int, m_r: int, seed: int,
                         response_fn: Callable[[PointCloud], float], desc: str) -> Dataset:
    samples, responses = [], []
    for i, cloud in enumerate(tqdm(clouds, desc=desc, leave=False)):
        params = UnstructureParams(m_l, m_u, m_r, derive_seed(seed, 'unstructure', i))
        model_cloud, response_cloud = unstructure(cloud, params)
        samples.append(model_cloud)
        responses.append([response_fn(response_cloud)])
    return Dataset(samples, np.asarray(responses))


def generate_wave_dataset(params: WaveParams, m_l: int, m_u: int, m_r: int,
                          seed: int) -> Tuple[Dataset, Dict]:
    """波形曲面数据集：模型输入为子样本，响应为极值子集上的粗糙度"""
    clouds, latent = gen_wave(params)
    dataset = _unstructure_dataset(clouds, m_l, m_u, m_r, seed, roughness_response, "波形曲面")
    provenance = {
        'generator': 'wave',
        'artifact_version': ARTIFACT_VERSION,
        'params': {**asdict(params), 'b1': [list(r) for r in params.b1], 'b2': [list(r) for r in params.b2]},
        'unstructure': {'m_l': m_l, 'm_u': m_u, 'm_r': m_r, 'seed': seed},
        'latent': latent.tolist(),
    }
    logger.info(f"已生成 {len(dataset)} 个波形曲面样本 (δ={params.noise})")
    return dataset, provenance


def generate_cone_dataset(designs: Sequence[ConeParams], m_l: int, m_u: int, m_r: int, seed: int,
                          n_bins: int = 20) -> Tuple[Dataset, Dict]:
    """截锥数据集：每组因子水平一个样本，响应为极值子集上的平均MZT圆度"""
    clouds = [gen_cone(p, f"cone_{i:05d}") for i, p in enumerate(designs)]
    dataset = _unstructure_dataset(clouds, m_l, m_u, m_r, seed,
                                   lambda c: roundness_response(c, n_bins), "截锥")
    provenance = {
        'generator': 'cone',
        'artifact_version': ARTIFACT_VERSION,
        'designs': [asdict(p) for p in designs],
        'unstructure': {'m_l': m_l, 'm_u': m_u, 'm_r': m_r, 'seed': seed},
        'roundness_bins': n_bins,
    }
    logger.info(f"已生成 {len(dataset)} 个截锥样本")
    return dataset, provenance


def write_provenance(provenance: Dict, path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(provenance, f, ensure_ascii=False, indent=2)
