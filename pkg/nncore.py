"""
稠密神经网络核心模块
功能：确定性参数初始化、softmax交叉熵前向损失、批均值梯度反向传播、SGD参数更新
参数与梯度统一存储为一维float64向量，所有函数均为纯函数，可在多个客户端间并发调用
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

logger = logging.getLogger(__name__)

# 参数向量与梯度向量：一维float64数组，布局为逐层 [W(行优先), b]
ParamVector = NDArray[np.float64]
GradientVector = NDArray[np.float64]

ACTIVATIONS = ('relu', 'tanh')


class ShapeError(ValueError):
    """参数、梯度或批数据的维度不一致"""


@dataclass(frozen=True)
class ModelSpec:
    """
    网络结构描述

    Args:
        layer_widths: 各层宽度（输入维度 … 输出类别数）
        activation: 隐藏层激活函数，relu 或 tanh
        bytes_per_element: 单个数值的字节数，仅供内存模型使用
    """
    layer_widths: Tuple[int, ...]
    activation: str = 'relu'
    bytes_per_element: int = 8

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, 'layer_widths', widths)
        if len(widths) < 2:
            raise ValueError(f"layer_widths至少需要2层，当前为：{widths}")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer_widths必须全部为正整数：{widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"不支持的激活函数：{self.activation}，可选：{ACTIVATIONS}")
        if int(self.bytes_per_element) <= 0:
            raise ValueError(f"bytes_per_element必须为正整数：{self.bytes_per_element}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        return list(zip(self.layer_widths[:-1], self.layer_widths[1:]))

    @property
    def param_count(self) -> int:
        return sum(w_in * w_out + w_out for w_in, w_out in self.layer_shapes)


@dataclass(frozen=True, eq=False)
class Batch:
    """
    一个采样批次：b个样本的特征矩阵与类别标签
    """
    features: NDArray[np.float64]
    labels: NDArray[np.int64]

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ShapeError(f"features必须为二维矩阵，当前维度：{features.ndim}")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ShapeError(f"labels长度({labels.shape})与样本数({features.shape[0]})不一致")
        if features.shape[0] < 1:
            raise ShapeError("批大小必须≥1")
        if labels.size and labels.min() < 0:
            raise ShapeError("标签必须为非负整数")
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'labels', labels)

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def nbytes(self) -> int:
        return int(self.features.nbytes + self.labels.nbytes)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """
    确定性参数初始化：权重服从 N(0, 1/fan_in)，偏置为0

    :param spec: 网络结构
    :param seed: 随机种子
    :return: 长度为 spec.param_count 的参数向量
    """
    rng = np.random.default_rng(seed)
    chunks = []
    for w_in, w_out in spec.layer_shapes:
        chunks.append(rng.standard_normal(w_in * w_out) / np.sqrt(w_in))
        chunks.append(np.zeros(w_out))
    return np.concatenate(chunks).astype(np.float64)


def unpack(spec: ModelSpec, params: ParamVector) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    将一维参数向量切分为逐层 (W, b) 视图，不复制数据
    """
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != spec.param_count:
        raise ShapeError(f"参数向量长度{params.shape}与模型参数量{spec.param_count}不一致")
    layers = []
    offset = 0
    for w_in, w_out in spec.layer_shapes:
        weight = params[offset:offset + w_in * w_out].reshape(w_in, w_out)
        offset += w_in * w_out
        bias = params[offset:offset + w_out]
        offset += w_out
        layers.append((weight, bias))
    return layers


def _activate(z, activation):
    if activation == 'relu':
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(a, activation):
    # 用激活后的值求导：relu 为 a>0，tanh 为 1-a²
    if activation == 'relu':
        return (a > 0.0).astype(np.float64)
    return 1.0 - a * a


def _check_batch(spec, batch):
    if batch.features.shape[1] != spec.input_dim:
        raise ShapeError(f"特征维度{batch.features.shape[1]}与输入层宽度{spec.input_dim}不一致")
    if batch.labels.max() >= spec.num_classes:
        raise ShapeError(f"标签{int(batch.labels.max())}超出类别数{spec.num_classes}")


def _forward(spec, params, features):
    """
    前向传播，返回各层激活（最后一层为softmax概率）与输出层log-softmax
    """
    layers = unpack(spec, params)
    a = features
    activations = []
    log_probs = None
    for idx, (weight, bias) in enumerate(layers):
        z = a @ weight + bias
        if idx < len(layers) - 1:
            a = _activate(z, spec.activation)
        else:
            # 减去最大值保证数值稳定
            shifted = z - z.max(axis=1, keepdims=True)
            log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            a = np.exp(log_probs)
        activations.append(a)
    return activations, log_probs


def forward_cache(spec: ModelSpec, params: ParamVector, batch: Batch) -> List[np.ndarray]:
    """
    返回反向传播需要保留的全部激活：各隐藏层输出与输出层softmax概率
    内存模型中的 M_act 正是这些数组的总字节数
    """
    _check_batch(spec, batch)
    activations, _ = _forward(spec, params, batch.features)
    return activations


def forward_loss(spec: ModelSpec, params: ParamVector, batch: Batch) -> float:
    """
    批均值softmax交叉熵损失

    Args:
        spec: 网络结构
        params: 参数向量
        batch: 样本批次

    Returns:
        float: 平均损失
    """
    _check_batch(spec, batch)
    _, log_probs = _forward(spec, params, batch.features)
    return float(-log_probs[np.arange(batch.size), batch.labels].mean())


def backward(spec: ModelSpec, params: ParamVector, batch: Batch) -> Tuple[float, GradientVector]:
    """
    反向传播，返回 (平均损失, 批均值梯度)
    梯度为 (1/b)·Σ ∇L_s，布局与参数向量一致

    Args:
        spec: 网络结构
        params: 参数向量
        batch: 样本批次

    Returns:
        tuple: (loss, grad)
    """
    _check_batch(spec, batch)
    layers = unpack(spec, params)
    activations, log_probs = _forward(spec, params, batch.features)
    b = batch.size
    rows = np.arange(b)
    loss = float(-log_probs[rows, batch.labels].mean())

    # 输出层误差：softmax - onehot，再除以批大小得到均值梯度
    delta = activations[-1].copy()
    delta[rows, batch.labels] -= 1.0
    delta /= b

    layer_grads = []
    for idx in range(len(layers) - 1, -1, -1):
        weight, _ = layers[idx]
        a_prev = batch.features if idx == 0 else activations[idx - 1]
        layer_grads.append((a_prev.T @ delta, delta.sum(axis=0)))
        if idx > 0:
            delta = (delta @ weight.T) * _activation_grad(activations[idx - 1], spec.activation)

    chunks = []
    for grad_w, grad_b in reversed(layer_grads):
        chunks.append(grad_w.ravel())
        chunks.append(grad_b)
    return loss, np.concatenate(chunks)


def sgd_step(params: ParamVector, grad: GradientVector, lr: float) -> ParamVector:
    """
    SGD更新：w ← w − lr·g
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ShapeError(f"参数长度{params.shape}与梯度长度{grad.shape}不一致")
    if lr < 0:
        raise ValueError(f"学习率不能为负：{lr}")
    return params - lr * grad


def predict(spec: ModelSpec, params: ParamVector, features: np.ndarray) -> np.ndarray:
    """预测类别"""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise ShapeError(f"特征矩阵形状{features.shape}与输入层宽度{spec.input_dim}不一致")
    activations, _ = _forward(spec, params, features)
    return activations[-1].argmax(axis=1)


def accuracy(spec: ModelSpec, params: ParamVector, features: np.ndarray, labels: Sequence[int]) -> float:
    """分类准确率（0~1）"""
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float((predict(spec, params, features) == labels).mean())


def pretrain(spec: ModelSpec, ds, seed: int, steps: int, lr: float, batch_size: int = 32) -> ParamVector:
    """
    从种子初始化开始做 steps 步小批量SGD，得到“训练早期”的参数
    ds 只需提供 size 与 batch(indices)
    """
    params = init_params(spec, seed)
    rng = np.random.default_rng(seed)
    b = min(batch_size, ds.size)
    for _ in range(steps):
        idx = np.sort(rng.choice(ds.size, size=b, replace=False))
        _, grad = backward(spec, params, ds.batch(idx))
        params = sgd_step(params, grad, lr)
    return params
