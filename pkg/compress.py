"""
梯度压缩模块
功能：top-k稀疏化压缩、稀疏均值/稠密残差分解、误差反馈累积，以及批大小与压缩残差关系的扫描实验
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

import nncore
from datagen import Dataset
from nncore import GradientVector, ModelSpec, ParamVector

logger = logging.getLogger(__name__)

COMPRESSION_KINDS = ('none', 'topk')
INDEX_BYTES = 4
VALUE_BYTES = 8


@dataclass(frozen=True)
class CompressionSpec:
    """
    压缩配置

    Args:
        kind: none 或 topk
        ratio: 保留坐标比例，(0, 1]
        accumulate_residual: 是否启用误差反馈（默认关闭）
    """
    kind: str = 'none'
    ratio: float = 1.0
    accumulate_residual: bool = False

    def __post_init__(self):
        if self.kind not in COMPRESSION_KINDS:
            raise ValueError(f"不支持的压缩方式：{self.kind}，可选：{COMPRESSION_KINDS}")
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"压缩比例必须在(0, 1]之间：{self.ratio}")

    @property
    def enabled(self) -> bool:
        return self.kind != 'none'

    def k_for(self, length: int) -> int:
        return max(1, int(np.floor(self.ratio * length)))


@dataclass(frozen=True, eq=False)
class SparseUpdate:
    """稀疏更新：严格递增的索引、对应数值、原始长度"""
    indices: np.ndarray
    values: np.ndarray
    original_length: int

    def densify(self) -> GradientVector:
        dense = np.zeros(self.original_length, dtype=np.float64)
        dense[self.indices] = self.values
        return dense

    @property
    def nbytes(self) -> int:
        # 每个保留坐标：4字节索引 + 8字节数值
        return int(len(self.indices)) * (INDEX_BYTES + VALUE_BYTES)


def dense_nbytes(length: int) -> int:
    return int(length) * VALUE_BYTES


def topk_compress(grad: GradientVector, spec: CompressionSpec) -> SparseUpdate:
    """
    保留绝对值最大的k个坐标，绝对值相同时优先保留较小的索引

    :param grad: 梯度向量
    :param spec: 压缩配置
    :return: SparseUpdate
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim != 1 or grad.size == 0:
        raise ValueError("梯度向量不能为空")
    k = spec.k_for(grad.size)
    # 稳定排序保证同值时低索引在前
    order = np.argsort(-np.abs(grad), kind='stable')[:k]
    indices = np.sort(order)
    return SparseUpdate(indices, grad[indices].copy(), int(grad.size))


def decompose(grad: GradientVector, sparse: SparseUpdate) -> GradientVector:
    """
    残差 φ = G − densify(G*)，满足 densify(G*) + φ == G
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim != 1 or grad.size != sparse.original_length:
        raise nncore.ShapeError(f"梯度长度{grad.shape}与稀疏更新原始长度{sparse.original_length}不一致")
    return grad - sparse.densify()


class ResidualAccumulator:
    """
    误差反馈：把上一轮被丢弃的残差加回本轮梯度后再压缩
    每个客户端一个实例
    """

    def __init__(self, spec: CompressionSpec):
        self.spec = spec
        self.memory = None

    def compress(self, grad: GradientVector) -> SparseUpdate:
        corrected = grad if self.memory is None else grad + self.memory
        sparse = topk_compress(corrected, self.spec)
        self.memory = decompose(corrected, sparse)
        return sparse


def compress_payload(grad: GradientVector, spec: Optional[CompressionSpec],
                     accumulator: Optional[ResidualAccumulator] = None):
    """
    对通信梯度应用压缩，返回 (重建后的稠密梯度, 通信字节数)
    未配置压缩时原样返回输入
    """
    if spec is None or not spec.enabled:
        return grad, dense_nbytes(grad.size)
    sparse = accumulator.compress(grad) if accumulator is not None else topk_compress(grad, spec)
    return sparse.densify(), sparse.nbytes


def relative_residual(grad: GradientVector, spec: CompressionSpec) -> float:
    """‖φ‖/‖G‖，零梯度时返回0"""
    norm = float(np.linalg.norm(grad))
    if norm == 0.0:
        return 0.0
    return float(np.linalg.norm(decompose(grad, topk_compress(grad, spec)))) / norm


def compression_noise_sweep(model: ModelSpec, ds: Dataset, batch_sizes: Sequence[int], ratio: float,
                            trials: int, seed: int, params: Optional[ParamVector] = None,
                            pretrain_steps: int = 0, pretrain_lr: float = 0.1) -> pd.DataFrame:
    """
    不同批大小下的相对压缩残差 ‖φ(b)‖/‖G‖
    残差随批大小的走向取决于模型与训练阶段，这里只做统计，不预设排序

    Args:
        model: 网络结构
        ds: 数据集
        batch_sizes: 待扫描的批大小
        ratio: top-k 保留比例
        trials: 每个批大小的独立抽样次数
        seed: 随机种子
        params: 可选的模型参数；为空时按种子初始化并预训练 pretrain_steps 步
        pretrain_steps: 扫描前用全数据小批量预训练的步数（模拟训练早期）
        pretrain_lr: 预训练学习率

    Returns:
        pd.DataFrame: 列为 b, ratio, rel_residual_mean, rel_residual_p50
    """
    if trials < 1:
        raise ValueError(f"trials必须≥1：{trials}")
    for b in batch_sizes:
        if b < 1 or b > ds.size:
            raise ValueError(f"批大小{b}超出数据集大小{ds.size}")
    spec = CompressionSpec('topk', ratio)
    if params is None:
        w = nncore.pretrain(model, ds, seed, pretrain_steps, pretrain_lr)
    else:
        w = np.asarray(params, dtype=np.float64)
    rng = np.random.default_rng([seed, 1])

    rows = []
    for b in batch_sizes:
        samples = []
        for _ in range(trials):
            idx = np.sort(rng.choice(ds.size, size=b, replace=False))
            _, g = nncore.backward(model, w, ds.batch(idx))
            samples.append(relative_residual(g, spec))
        rows.append({
            'b': int(b),
            'ratio': float(ratio),
            'rel_residual_mean': float(np.mean(samples)),
            'rel_residual_p50': float(np.median(samples)),
        })
        logger.info(f"Compression sweep b={b} ratio={ratio:.3f} mean residual {rows[-1]['rel_residual_mean']:.4f}")
    return pd.DataFrame(rows, columns=['b', 'ratio', 'rel_residual_mean', 'rel_residual_p50'])
