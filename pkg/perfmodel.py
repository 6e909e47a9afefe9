"""
并行性能模型模块
功能：单步耗时分解（计算 + 数据搬运 + 同步）、内存分解（模型/梯度/优化器/激活/批数据）、
线性回归拟合、批大小规划（最大可行批、最优批），以及在本机上的实测剖析
"""

import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

import nncore
from datagen import Dataset
from nncore import Batch, ModelSpec, ParamVector

logger = logging.getLogger(__name__)

PROFILE_COLUMNS = ['b', 't_c', 't_mov', 'm_batch', 'reps']
DEFAULT_B_UPPER = 2 ** 20
TIE_TOLERANCE = 1e-12

_clamp_warned = set()


class FitError(ValueError):
    """线性拟合输入不合法"""


class InfeasibleError(ValueError):
    """内存预算下没有可行的批大小"""


@dataclass(frozen=True)
class PerfSample:
    """
    单个批大小的剖析结果

    Args:
        b: 批大小
        t_c: 计算耗时中位数（秒）
        t_mov: 批数据组装耗时中位数（秒）
        m_batch: 批数据占用字节数
        reps: 计时重复次数
    """
    b: int
    t_c: float
    t_mov: float
    m_batch: float
    reps: int

    def __post_init__(self):
        if self.b < 1:
            raise ValueError(f"批大小必须≥1：{self.b}")
        if min(self.t_c, self.t_mov, self.m_batch) < 0:
            raise ValueError(f"剖析结果不能为负：{self}")
        if self.reps < 1:
            raise ValueError(f"reps必须≥1：{self.reps}")


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    rss: float = 0.0
    n: int = 2

    def __post_init__(self):
        if self.n < 2:
            raise FitError(f"拟合样本数必须≥2：{self.n}")

    def predict(self, x):
        return self.slope * x + self.intercept


def _clamped(fit: LinearFit, x, label: str):
    value = fit.predict(x)
    if np.any(np.asarray(value) < 0):
        if label not in _clamp_warned:
            _clamp_warned.add(label)
            logger.warning(f"Negative {label} prediction at b={x} clamped to 0 (slope={fit.slope:.4g}, "
                           f"intercept={fit.intercept:.4g})")
        return np.maximum(value, 0.0)
    return value


@dataclass(frozen=True)
class CostModel:
    """
    单步耗时模型 t_step = t_c(b) + t_mov(b) + [同步]·t_sync

    Args:
        fit_tc: 计算耗时拟合
        fit_tmov: 数据搬运耗时拟合
        t_sync: 每次聚合的固定同步耗时（秒）
        H: 同步周期
    """
    fit_tc: LinearFit
    fit_tmov: LinearFit
    t_sync: float = 0.0
    H: int = 1

    def __post_init__(self):
        if self.t_sync < 0 or not math.isfinite(self.t_sync):
            raise ValueError(f"t_sync必须为非负有限值：{self.t_sync}")
        if self.H < 1:
            raise ValueError(f"同步周期H必须≥1：{self.H}")

    def compute_time(self, b) -> float:
        return float(_clamped(self.fit_tc, b, 't_c') + _clamped(self.fit_tmov, b, 't_mov'))

    def with_period(self, H: int) -> 'CostModel':
        return replace(self, H=H)

    @classmethod
    def with_affine_sync(cls, fit_tc: LinearFit, fit_tmov: LinearFit, alpha: float, beta: float,
                         spec: ModelSpec, H: int = 1) -> 'CostModel':
        """同步耗时按模型大小线性增长：t_sync = alpha + beta·参数字节数"""
        return cls(fit_tc, fit_tmov, sync_affine(alpha, beta, spec.param_count * spec.bytes_per_element), H)


def sync_affine(alpha: float, beta: float, param_bytes: int) -> float:
    if alpha < 0 or beta < 0:
        raise ValueError(f"alpha与beta不能为负：alpha={alpha}, beta={beta}")
    return float(alpha + beta * param_bytes)


@dataclass(frozen=True)
class MemoryModel:
    """
    内存模型 M_total = M_model + M_grad + M_opt + M_act(b) + M_batch(b)

    Args:
        param_count: 参数量P
        bytes_per_element: 单个数值字节数
        optimizer_multiplier: 优化器状态倍数k（0 纯SGD，1 动量，2 Adam类）
        per_sample_activation_bytes: 单样本激活字节数a
        fit_mbatch: 批数据内存的线性拟合
    """
    param_count: int
    bytes_per_element: int = 8
    optimizer_multiplier: int = 0
    per_sample_activation_bytes: int = 0
    fit_mbatch: LinearFit = LinearFit(0.0, 0.0)

    def __post_init__(self):
        if self.param_count < 1 or self.bytes_per_element < 1:
            raise ValueError("param_count与bytes_per_element必须为正")
        if self.optimizer_multiplier not in (0, 1, 2):
            raise ValueError(f"optimizer_multiplier只能为0、1、2：{self.optimizer_multiplier}")
        if self.per_sample_activation_bytes < 0:
            raise ValueError("per_sample_activation_bytes不能为负")

    @classmethod
    def from_spec(cls, spec: ModelSpec, fit_mbatch: Optional[LinearFit] = None,
                  optimizer_multiplier: int = 0) -> 'MemoryModel':
        return cls(
            param_count=spec.param_count,
            bytes_per_element=spec.bytes_per_element,
            optimizer_multiplier=optimizer_multiplier,
            per_sample_activation_bytes=activation_memory(spec, 1),
            fit_mbatch=fit_mbatch if fit_mbatch is not None else LinearFit(0.0, 0.0),
        )

    @property
    def model_bytes(self) -> int:
        return self.param_count * self.bytes_per_element

    @property
    def fixed_bytes(self) -> float:
        """与批大小无关的部分，b→0 时的极限"""
        return (2 + self.optimizer_multiplier) * self.model_bytes + max(0.0, self.fit_mbatch.intercept)


def activation_memory(spec: ModelSpec, b: int) -> int:
    """稠密网络的激活内存：(隐藏层宽度 + 输出宽度之和)·字节数·b"""
    if b < 0:
        raise ValueError(f"批大小不能为负：{b}")
    return sum(spec.layer_widths[1:]) * spec.bytes_per_element * int(b)


def _total_memory(mm: MemoryModel, b):
    # 支持标量或numpy数组
    activations = mm.per_sample_activation_bytes * b
    batch = _clamped(mm.fit_mbatch, b, 'm_batch')
    return (2 + mm.optimizer_multiplier) * mm.model_bytes + activations + batch


def total_memory(mm: MemoryModel, b: int) -> float:
    """
    总内存预测（字节）

    :param mm: 内存模型
    :param b: 批大小
    :return: 五项之和
    """
    if b < 0:
        raise ValueError(f"批大小不能为负：{b}")
    return float(_total_memory(mm, b))


def max_batch(mm: MemoryModel, budget: float, b_upper: int = DEFAULT_B_UPPER) -> Optional[int]:
    """
    预算内的最大批大小，预算不足以容纳 b=1 时返回 None
    两个斜率都非负时用二分查找，否则在 1..b_upper 上线性扫描
    """
    if b_upper < 1:
        raise ValueError(f"b_upper必须≥1：{b_upper}")
    monotone = mm.per_sample_activation_bytes >= 0 and mm.fit_mbatch.slope >= 0
    if not monotone:
        candidates = np.arange(1, b_upper + 1, dtype=np.float64)
        feasible = np.flatnonzero(_total_memory(mm, candidates) <= budget)
        return int(feasible[-1]) + 1 if feasible.size else None

    if total_memory(mm, 1) > budget:
        return None
    if total_memory(mm, b_upper) <= budget:
        return b_upper
    lo, hi = 1, b_upper
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if total_memory(mm, mid) <= budget:
            lo = mid
        else:
            hi = mid
    return lo


def step_time(cm: CostModel, b: int, i: int, synced: Optional[bool] = None) -> float:
    """
    第i次迭代的耗时；(i+1) mod H == 0 时计入同步开销
    synced 可显式覆盖是否同步（例如训练末尾不足H步的聚合）
    """
    if i < 0:
        raise ValueError(f"迭代序号不能为负：{i}")
    if synced is None:
        synced = (i + 1) % cm.H == 0
    return cm.compute_time(b) + (cm.t_sync if synced else 0.0)


def epoch_time(cm: CostModel, D: int, B: int) -> Tuple[int, float]:
    """
    一个epoch的迭代数与耗时，最后一个不完整批按 D − (I−1)·B 计

    Args:
        cm: 耗时模型
        D: 数据集大小
        B: 全局批大小

    Returns:
        tuple: (I, T)
    """
    if B < 1 or D < 1:
        raise ValueError(f"D与B必须为正：D={D}, B={B}")
    if B > D:
        raise ValueError(f"批大小{B}大于数据集大小{D}")
    iterations = math.ceil(D / B)
    last = D - (iterations - 1) * B
    total = 0.0
    for i in range(iterations):
        total += step_time(cm, B if i < iterations - 1 else last, i)
    return iterations, total


def _feasible_candidates(mm, D, budget, candidates):
    return [b for b in sorted(set(int(c) for c in candidates)) if 1 <= b <= D and total_memory(mm, b) <= budget]


def optimal_batch(cm: CostModel, mm: MemoryModel, D: int, budget: float, candidates: Sequence[int]) -> int:
    """
    在内存预算内使epoch耗时最小的批大小，耗时相差在1e-12相对误差内视为相等，取较小的批
    """
    feasible = _feasible_candidates(mm, D, budget, candidates)
    if not feasible:
        raise InfeasibleError(f"预算{budget}字节下候选批大小{sorted(set(candidates))}均不可行")
    best_b, best_t = None, None
    for b in feasible:
        _, t = epoch_time(cm, D, b)
        if best_t is None or t < best_t - TIE_TOLERANCE * max(abs(t), abs(best_t)):
            best_b, best_t = b, t
    return best_b


def plan_report(cm: CostModel, mm: MemoryModel, D: int, budget: float, candidates: Sequence[int],
                b_upper: int = DEFAULT_B_UPPER) -> Dict:
    """
    规划报告：{feasible, b_max, b_opt, epoch_time_table}
    """
    table = []
    for b in sorted(set(int(c) for c in candidates)):
        memory = total_memory(mm, b)
        row = {'b': b, 'iterations': None, 'epoch_time': None, 'total_memory': memory,
               'feasible': bool(b <= D and memory <= budget)}
        if b <= D:
            row['iterations'], row['epoch_time'] = epoch_time(cm, D, b)
        table.append(row)

    b_max = max_batch(mm, budget, b_upper)
    try:
        b_opt = optimal_batch(cm, mm, D, budget, candidates)
    except InfeasibleError:
        b_opt = None
    return {
        'feasible': b_max is not None and b_opt is not None,
        'b_max': b_max,
        'b_opt': b_opt,
        'budget': budget,
        'D': D,
        'epoch_time_table': table,
    }


def profile(spec: ModelSpec, ds: Dataset, batches: Sequence[int], reps: int, seed: int = 0,
            warmup: int = 1) -> List[PerfSample]:
    """
    实测剖析：每个批大小重复 reps 次，取批数据组装耗时(t_mov)与反向传播耗时(t_c)的中位数
    计时必须单线程顺序执行

    参数:
        spec: 网络结构
        ds: 数据集
        batches: 批大小列表
        reps: 每个批大小的计时次数，至少3次
        seed: 随机种子
        warmup: 预热次数，不计入结果

    返回:
        PerfSample 列表，顺序与 batches 一致
    """
    if reps < 3:
        raise ValueError(f"reps至少为3：{reps}")
    for b in batches:
        if b < 1 or b > ds.size:
            raise ValueError(f"批大小{b}超出数据集大小{ds.size}")

    params = nncore.init_params(spec, seed)
    rng = np.random.default_rng(seed)
    samples = []
    for b in batches:
        t_c, t_mov = [], []
        nbytes = 0
        for r in range(warmup + reps):
            idx = np.sort(rng.choice(ds.size, size=b, replace=False))
            start = time.perf_counter()
            batch = ds.batch(idx)
            assembled = time.perf_counter()
            nncore.backward(spec, params, batch)
            done = time.perf_counter()
            if r >= warmup:
                t_mov.append(assembled - start)
                t_c.append(done - assembled)
            nbytes = batch.nbytes
        samples.append(PerfSample(int(b), float(np.median(t_c)), float(np.median(t_mov)), float(nbytes), reps))
        logger.info(f"Profiled b={b}: t_c={samples[-1].t_c:.6f}s, t_mov={samples[-1].t_mov:.6f}s")
    return samples


def measure_footprint(spec: ModelSpec, params: ParamVector, batch: Batch) -> int:
    """一次训练步保留的字节数：参数、梯度、缓存的激活、批数据"""
    _, grad = nncore.backward(spec, params, batch)
    cache = nncore.forward_cache(spec, params, batch)
    return int(np.asarray(params).nbytes + grad.nbytes + sum(a.nbytes for a in cache) + batch.nbytes)


def time_epoch(spec: ModelSpec, ds: Dataset, B: int, lr: float = 0.1, seed: int = 0) -> float:
    """实测一个epoch（反向传播 + SGD更新）的墙钟耗时"""
    if B < 1 or B > ds.size:
        raise ValueError(f"批大小{B}超出数据集大小{ds.size}")
    params = nncore.init_params(spec, seed)
    order = np.random.default_rng(seed).permutation(ds.size)
    start = time.perf_counter()
    for offset in range(0, ds.size, B):
        batch = ds.batch(order[offset:offset + B])
        _, grad = nncore.backward(spec, params, batch)
        params = nncore.sgd_step(params, grad, lr)
    return time.perf_counter() - start


def fit_linear(points: Sequence[Tuple[float, float]]) -> LinearFit:
    """
    普通最小二乘拟合 y = slope·x + intercept

    Args:
        points: (x, y) 点列

    Returns:
        LinearFit
    """
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise FitError(f"points必须为(x, y)点列，当前形状：{arr.shape}")
    if arr.shape[0] < 2:
        raise FitError(f"至少需要2个点，当前为{arr.shape[0]}个")
    x, y = arr[:, 0], arr[:, 1]
    if not np.all(np.isfinite(arr)):
        raise FitError("points包含非有限值")
    if np.unique(x).size < 2:
        raise FitError("所有x相同，无法拟合直线")
    result = stats.linregress(x, y)
    slope, intercept = float(result.slope), float(result.intercept)
    rss = float(np.sum((y - (slope * x + intercept)) ** 2))
    return LinearFit(slope, intercept, rss, int(arr.shape[0]))


def fits_from_profile(samples: Sequence[PerfSample]) -> Tuple[LinearFit, LinearFit, LinearFit]:
    """由剖析结果拟合 (t_c, t_mov, m_batch) 三条直线"""
    return (
        fit_linear([(s.b, s.t_c) for s in samples]),
        fit_linear([(s.b, s.t_mov) for s in samples]),
        fit_linear([(s.b, s.m_batch) for s in samples]),
    )


def write_profile_csv(samples: Sequence[PerfSample], file_path: str) -> str:
    """覆盖写出剖析结果CSV，列为 b,t_c,t_mov,m_batch,reps"""
    frame = pd.DataFrame([[s.b, s.t_c, s.t_mov, s.m_batch, s.reps] for s in samples], columns=PROFILE_COLUMNS)
    frame.to_csv(file_path, index=False, float_format='%.17g')
    return file_path


def load_profile_csv(file_path: str) -> List[PerfSample]:
    frame = pd.read_csv(file_path, float_precision='round_trip')
    missing = [col for col in PROFILE_COLUMNS if col not in frame.columns]
    if missing:
        raise FitError(f"剖析文件缺少必要列：{missing}")
    return [
        PerfSample(int(row.b), float(row.t_c), float(row.t_mov), float(row.m_batch), int(row.reps))
        for row in frame.itertuples(index=False)
    ]
