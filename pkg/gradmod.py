"""
统计效率模块
功能：梯度范数跟踪、梯度变化率Δ（关键训练阶段检测）、阶跃函数梯度缩放、梯度映射器接口、梯度噪声γ估计
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence

import numpy as np
import pandas as pd

import nncore
from datagen import Dataset
from nncore import GradientVector, ModelSpec, ParamVector

logger = logging.getLogger(__name__)

# 前一次范数为0或处于预热期时的Δ哨兵值，视为关键阶段
CRITICAL_SENTINEL = math.inf
DEFAULT_THRESHOLDS = (0.5, 0.8)
DECISION_COLUMNS = ['iter', 'client', 'delta', 'factor']


@dataclass(frozen=True)
class StepPolicy:
    """
    阶跃函数参数

    Args:
        X: 放大系数，X=1 时策略不起作用
        threshold: Δ阈值τ，常用 0.5 与 0.8
        warmup_iters: 预热迭代数，期间强制系数为1
        invert_branches: 反转分支，Δ≥τ 时用1×、Δ<τ 时用X
    """
    X: float = 1.0
    threshold: float = 0.5
    warmup_iters: int = 1
    invert_branches: bool = False

    def __post_init__(self):
        if not math.isfinite(self.X) or self.X < 1.0:
            raise ValueError(f"放大系数X必须为≥1的有限实数：{self.X}")
        if not self.threshold > 0:
            raise ValueError(f"阈值必须为正：{self.threshold}")
        if self.warmup_iters < 0:
            raise ValueError(f"warmup_iters不能为负：{self.warmup_iters}")

    @property
    def is_noop(self) -> bool:
        return self.X == 1.0


@dataclass
class NoiseEstimate:
    """梯度噪声 γ = G(b_small) − G(b_large) 的统计结果"""
    b_small: int
    b_large: int
    trials: int
    gamma_norms: List[float] = field(default_factory=list)
    mean_gamma_norm: float = 0.0
    mean_small_sq: float = 0.0
    mean_large_sq: float = 0.0

    def to_dict(self) -> dict:
        return {
            'b_small': self.b_small,
            'b_large': self.b_large,
            'trials': self.trials,
            'mean_gamma_norm': self.mean_gamma_norm,
            'mean_small_sq': self.mean_small_sq,
            'mean_large_sq': self.mean_large_sq,
            'gamma_norms': list(self.gamma_norms),
        }


@dataclass(frozen=True)
class FactorDecision:
    iteration: int
    norm_sq: float
    delta: float
    factor: float


class TeacherMapper(Protocol):
    """梯度映射器：把大批量梯度映射为近似的小批量梯度，输出长度与输入一致"""

    def __call__(self, grad: GradientVector) -> GradientVector:
        ...


class NormTracker:
    """
    记录上一次的梯度平方范数与累计平方范数
    """

    def __init__(self, history_size: int = 4096):
        self.prev_sq: Optional[float] = None
        self.cumulative = 0.0
        self.history = deque(maxlen=history_size)

    def update(self, cur_sq: float) -> float:
        """写入本次平方范数，返回相对上一次的Δ；第一次调用返回哨兵值"""
        if cur_sq < 0:
            raise ValueError(f"平方范数不能为负：{cur_sq}")
        delta = CRITICAL_SENTINEL if self.prev_sq is None else grad_change(self.prev_sq, cur_sq)
        self.prev_sq = cur_sq
        self.cumulative += cur_sq
        self.history.append(self.cumulative)
        return delta


def grad_change(prev_sq: float, cur_sq: float) -> float:
    """
    梯度变化率 Δ = |(|G_i|² − |G_{i−1}|²) / |G_{i−1}|²|
    prev_sq 为0时返回哨兵值 +inf
    """
    if prev_sq < 0 or cur_sq < 0:
        raise ValueError(f"平方范数不能为负：prev={prev_sq}, cur={cur_sq}")
    if prev_sq == 0:
        return CRITICAL_SENTINEL
    return abs((cur_sq - prev_sq) / prev_sq)


def select_factor(delta: float, policy: StepPolicy, in_warmup: bool = False) -> float:
    """
    阶跃规则：Δ≥τ 放大到X，Δ<τ 回落到1×；预热期或哨兵值一律取1×
    invert_branches 为真时两支互换
    """
    if policy.is_noop or in_warmup or math.isinf(delta):
        return 1.0
    stepped = delta >= policy.threshold
    if policy.invert_branches:
        stepped = not stepped
    return float(policy.X) if stepped else 1.0


def scale_gradient(grad: GradientVector, factor: float) -> GradientVector:
    """
    G̃ = X ⊙ G，即在原梯度上叠加 (X−1)·G 的人工噪声
    factor 为1时原样返回输入
    """
    if not math.isfinite(factor):
        raise ValueError(f"缩放系数必须为有限实数：{factor}")
    if factor < 1.0:
        raise ValueError(f"缩放系数必须≥1：{factor}")
    if factor == 1.0:
        return grad
    return np.asarray(grad, dtype=np.float64) * factor


class IdentityMapper:
    """恒等映射"""

    def __call__(self, grad: GradientVector) -> GradientVector:
        return grad


class StepMapper:
    """
    阶跃函数映射器：每次调用计算 |G|²、Δ，选择系数并缩放梯度
    有状态，每个训练进程/客户端各持有一个实例
    """

    def __init__(self, policy: StepPolicy, tracker: Optional[NormTracker] = None):
        self.policy = policy
        self.tracker = tracker if tracker is not None else NormTracker()
        self.decisions: List[FactorDecision] = []

    @property
    def last(self) -> Optional[FactorDecision]:
        return self.decisions[-1] if self.decisions else None

    def __call__(self, grad: GradientVector) -> GradientVector:
        norm_sq = float(np.dot(grad, grad))
        iteration = len(self.decisions)
        delta = self.tracker.update(norm_sq)
        factor = select_factor(delta, self.policy, in_warmup=iteration < self.policy.warmup_iters)
        self.decisions.append(FactorDecision(iteration, norm_sq, delta, factor))
        return scale_gradient(grad, factor)

    def factor_counts(self) -> dict:
        counts = {}
        for decision in self.decisions:
            counts[decision.factor] = counts.get(decision.factor, 0) + 1
        return counts


class NormMatchingMapper:
    """
    固定系数映射器：系数取 sqrt(E|G_small|² / E|G_large|²)，
    即让大批量梯度的范数与小批量梯度的噪声水平相当
    """

    def __init__(self, factor: float):
        self.factor = max(1.0, float(factor))

    @classmethod
    def from_estimate(cls, estimate: NoiseEstimate) -> 'NormMatchingMapper':
        if estimate.mean_large_sq == 0.0:
            return cls(1.0)
        return cls(math.sqrt(estimate.mean_small_sq / estimate.mean_large_sq))

    @classmethod
    def fit(cls, model: ModelSpec, params: ParamVector, ds: Dataset, b_small: int, b_large: int,
            trials: int, seed: int) -> 'NormMatchingMapper':
        mapper = cls.from_estimate(estimate_gamma(model, params, ds, b_small, b_large, trials, seed))
        logger.info(f"Norm-matching factor for b_small={b_small}, b_large={b_large}: {mapper.factor:.4f}")
        return mapper

    def __call__(self, grad: GradientVector) -> GradientVector:
        return scale_gradient(grad, self.factor)


def step_mapper(policy: StepPolicy, tracker: Optional[NormTracker] = None) -> StepMapper:
    """构造阶跃函数映射器，每次训练应传入新的 NormTracker"""
    return StepMapper(policy, tracker if tracker is not None else NormTracker())


def estimate_gamma(model: ModelSpec, params: ParamVector, ds: Dataset, b_small: int, b_large: int,
                   trials: int, seed: int, draw: str = 'independent') -> NoiseEstimate:
    """
    估计梯度噪声 γ_t = G(b_small)_t − G(b_large)_t

    参数:
        model: 网络结构
        params: 当前参数
        ds: 数据集
        b_small: 小批量大小
        b_large: 大批量大小
        trials: 独立抽样次数
        seed: 随机种子
        draw: independent 两批独立抽样；nested 小批量取大批量抽样的前 b_small 个

    返回:
        NoiseEstimate
    """
    if trials < 1:
        raise ValueError(f"trials必须≥1：{trials}")
    if not 1 <= b_small <= b_large:
        raise ValueError(f"需满足 1 ≤ b_small({b_small}) ≤ b_large({b_large})")
    if b_large > ds.size:
        raise ValueError(f"批大小{b_large}超出数据集大小{ds.size}")
    if draw not in ('independent', 'nested'):
        raise ValueError(f"未知的抽样方式：{draw}")

    rng = np.random.default_rng(seed)
    gamma_norms, small_sq, large_sq = [], [], []
    for _ in range(trials):
        large_idx = rng.choice(ds.size, size=b_large, replace=False)
        if draw == 'nested':
            small_idx = large_idx[:b_small]
        else:
            small_idx = rng.choice(ds.size, size=b_small, replace=False)
        # 排序后求梯度，保证同一样本集合得到完全相同的梯度
        _, grad_large = nncore.backward(model, params, ds.batch(np.sort(large_idx)))
        _, grad_small = nncore.backward(model, params, ds.batch(np.sort(small_idx)))
        gamma = grad_small - grad_large
        gamma_norms.append(float(np.linalg.norm(gamma)))
        small_sq.append(float(np.dot(grad_small, grad_small)))
        large_sq.append(float(np.dot(grad_large, grad_large)))

    return NoiseEstimate(
        b_small=b_small,
        b_large=b_large,
        trials=trials,
        gamma_norms=gamma_norms,
        mean_gamma_norm=float(np.mean(gamma_norms)),
        mean_small_sq=float(np.mean(small_sq)),
        mean_large_sq=float(np.mean(large_sq)),
    )


def _as_frame(log) -> pd.DataFrame:
    return log.to_frame() if hasattr(log, 'to_frame') else log


def factor_histogram(log, bins: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """
    统计各缩放系数被选中的次数（核密度图的离散版本）
    按逐客户端的决策记录计数，不使用 metrics 中的客户端均值

    Args:
        log: MetricsLog，或包含 factor 列的决策表（列见 DECISION_COLUMNS）
        bins: 可选的系数取值列表，每条决策计入最近的取值

    Returns:
        pd.DataFrame: 列为 factor, count，count 之和等于决策条数（迭代数×每次迭代的决策方数）
    """
    frame = log.decision_frame() if hasattr(log, 'decision_frame') else log
    if 'factor' not in frame.columns:
        raise ValueError("决策表缺少 factor 列")
    factors = frame['factor'].to_numpy(dtype=np.float64)
    if factors.size == 0:
        raise ValueError("决策表为空，无法统计系数直方图")
    if bins is None:
        values, counts = np.unique(factors, return_counts=True)
    else:
        values = np.sort(np.asarray(bins, dtype=np.float64))
        nearest = np.abs(factors[:, None] - values[None, :]).argmin(axis=1)
        counts = np.bincount(nearest, minlength=values.size)
    return pd.DataFrame({'factor': values, 'count': counts.astype(np.int64)})


def cumulative_norms(log) -> np.ndarray:
    """累计梯度平方范数曲线"""
    frame = _as_frame(log)
    return np.cumsum(frame['grad_norm_sq'].to_numpy(dtype=np.float64))
