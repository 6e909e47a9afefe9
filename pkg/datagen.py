"""
合成数据集生成与客户端划分模块
功能：按种子生成高斯团簇分类数据，划分训练/测试集，按IID或标签偏斜方式切分客户端数据
另提供CSV格式的数据集导入导出
"""

import logging
import math
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from nncore import Batch

logger = logging.getLogger(__name__)

LABEL_COLUMN = 'label'


class PartitionError(ValueError):
    """客户端划分参数不可行"""


class DatasetFormatError(ValueError):
    """数据集文件格式错误"""


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    分类数据集

    Args:
        features: n×d 特征矩阵
        labels: n 个类别标签
        num_classes: 类别数
        name: 数据集名称
    """
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = 'synthetic'

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.ndim != 1 or features.shape[0] != labels.shape[0]:
            raise DatasetFormatError(f"特征矩阵{features.shape}与标签{labels.shape}形状不匹配")
        if features.shape[0] < self.num_classes:
            raise DatasetFormatError(f"样本数{features.shape[0]}少于类别数{self.num_classes}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DatasetFormatError(f"标签超出范围[0, {self.num_classes})")
        counts = np.bincount(labels, minlength=self.num_classes)
        if (counts == 0).any():
            missing = np.flatnonzero(counts == 0).tolist()
            raise DatasetFormatError(f"以下类别没有样本：{missing}")
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'labels', labels)

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def batch(self, indices: Sequence[int]) -> Batch:
        """按索引组装批次（复制数据）"""
        idx = np.asarray(indices, dtype=np.int64)
        return Batch(self.features[idx], self.labels[idx])

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> 'Dataset':
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, name or self.name)


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = 'iid'
    num_clients: int = 10
    labels_per_client: int = 1
    seed: int = 0


@dataclass(frozen=True, eq=False)
class ClientShard:
    """客户端分片：client_id 与父数据集中的样本索引"""
    client_id: int
    indices: np.ndarray

    @property
    def size(self) -> int:
        return int(len(self.indices))


def make_synthetic(num_classes: int, dim: int, per_class: int, spread: float, seed: int) -> Dataset:
    """
    生成高斯团簇数据：第k类中心为随机单位向量乘以2.0，各向同性噪声标准差为spread

    :param num_classes: 类别数
    :param dim: 特征维度
    :param per_class: 每类样本数
    :param spread: 噪声标准差
    :param seed: 随机种子
    :return: Dataset
    """
    if num_classes <= 0 or dim <= 0 or per_class <= 0:
        raise ValueError("num_classes、dim、per_class必须为正整数")
    if spread < 0:
        raise ValueError(f"spread不能为负：{spread}")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, dim))
    centers = 2.0 * centers / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.standard_normal((labels.shape[0], dim))
    features = centers[labels] + spread * noise
    return Dataset(features, labels, num_classes, name=f'blobs{num_classes}x{dim}')


def train_test_split(ds: Dataset, test_fraction: float = 0.2, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """
    按类别分层的随机划分，每个类别在训练集和测试集中都至少保留一个样本
    测试集是全局的，不参与客户端划分
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction必须在(0, 1)之间：{test_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for k in range(ds.num_classes):
        members = rng.permutation(np.flatnonzero(ds.labels == k))
        if len(members) < 2:
            raise PartitionError(f"类别{k}样本不足2个，无法同时出现在训练集和测试集")
        n_test = min(max(1, int(round(test_fraction * len(members)))), len(members) - 1)
        test_idx.append(members[:n_test])
        train_idx.append(members[n_test:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return ds.subset(train, f'{ds.name}-train'), ds.subset(test, f'{ds.name}-test')


def partition_iid(ds: Dataset, C: int, seed: int) -> List[ClientShard]:
    """
    IID划分：全局随机打乱后轮流分配，各分片大小相差不超过1
    """
    if C <= 0:
        raise PartitionError(f"客户端数必须为正：{C}")
    if C > ds.size:
        raise PartitionError(f"客户端数{C}大于样本数{ds.size}")
    perm = np.random.default_rng(seed).permutation(ds.size)
    return [ClientShard(c, np.sort(perm[c::C])) for c in range(C)]


def _deal_labels(num_classes, C, labels_per_client, rng):
    """
    为每个客户端分配 labels_per_client 个互不相同的标签，且覆盖全部标签
    标签池取自若干份独立打乱的标签列表的前 C·lpc 项，每个标签最多出现C次；
    按标签分组后轮流发给客户端，同一标签落在连续位置上，因此不会重复发给同一客户端
    """
    total = C * labels_per_client
    copies = math.ceil(total / num_classes)
    pool = np.concatenate([rng.permutation(num_classes) for _ in range(copies)])[:total]
    label_order = rng.permutation(num_classes)
    rank = np.empty(num_classes, dtype=np.int64)
    rank[label_order] = np.arange(num_classes)
    grouped = pool[np.argsort(rank[pool], kind='stable')]
    client_order = rng.permutation(C)
    assignment = [[] for _ in range(C)]
    for pos, label in enumerate(grouped):
        assignment[client_order[pos % C]].append(int(label))
    return [sorted(labels) for labels in assignment]


def partition_label_skew(ds: Dataset, C: int, labels_per_client: int, seed: int) -> List[ClientShard]:
    """
    标签偏斜划分：每个客户端恰好拥有 labels_per_client 个标签，
    每个标签的样本在拥有该标签的客户端之间平均分配

    Args:
        ds: 父数据集
        C: 客户端数
        labels_per_client: 每个客户端的标签数
        seed: 随机种子

    Returns:
        list: ClientShard 列表，按 client_id 升序
    """
    K = ds.num_classes
    if C <= 0 or labels_per_client <= 0:
        raise PartitionError("客户端数与每客户端标签数必须为正")
    if labels_per_client > K:
        raise PartitionError(f"每客户端标签数{labels_per_client}大于类别数{K}")
    if C * labels_per_client < K:
        raise PartitionError(f"{C}个客户端×{labels_per_client}个标签无法覆盖全部{K}个类别")

    rng = np.random.default_rng(seed)
    assignment = _deal_labels(K, C, labels_per_client, rng)

    owners = [[] for _ in range(K)]
    for client_id, labels in enumerate(assignment):
        for label in labels:
            owners[label].append(client_id)

    shard_indices = [[] for _ in range(C)]
    for label in range(K):
        members = rng.permutation(np.flatnonzero(ds.labels == label))
        if len(members) < len(owners[label]):
            raise PartitionError(f"类别{label}只有{len(members)}个样本，不足以分给{len(owners[label])}个客户端")
        for client_id, part in zip(owners[label], np.array_split(members, len(owners[label]))):
            shard_indices[client_id].append(part)

    shards = [ClientShard(c, np.sort(np.concatenate(parts))) for c, parts in enumerate(shard_indices)]
    logger.info(f"Label-skew partition: {C} clients, {labels_per_client} labels/client, "
                f"shard sizes {[s.size for s in shards]}")
    return shards


def partition(ds: Dataset, spec: PartitionSpec) -> List[ClientShard]:
    """按 PartitionSpec 调度划分方式"""
    if spec.mode == 'iid':
        return partition_iid(ds, spec.num_clients, spec.seed)
    if spec.mode == 'label_skew':
        return partition_label_skew(ds, spec.num_clients, spec.labels_per_client, spec.seed)
    raise PartitionError(f"未知的划分方式：{spec.mode}")


def shard_label_histogram(ds: Dataset, shards: Sequence[ClientShard]) -> pd.DataFrame:
    """各分片的标签计数表，行为 client_id，列为类别"""
    rows = {s.client_id: np.bincount(ds.labels[s.indices], minlength=ds.num_classes) for s in shards}
    frame = pd.DataFrame.from_dict(rows, orient='index', columns=list(range(ds.num_classes)))
    frame.index.name = 'client_id'
    return frame


def load_csv_dataset(file_path: str, num_classes: Optional[int] = None, name: Optional[str] = None) -> Dataset:
    """
    读取CSV数据集，表头必须为 f0..f{d-1},label
    :param file_path: CSV文件路径
    :param num_classes: 类别数，默认为 max(label)+1
    :param name: 数据集名称，默认取文件名
    :return: Dataset
    """
    df = pd.read_csv(file_path, float_precision='round_trip')
    if LABEL_COLUMN not in df.columns:
        raise DatasetFormatError(f"CSV文件缺少必要列：{LABEL_COLUMN}")
    feature_columns = [col for col in df.columns if col != LABEL_COLUMN]
    expected = [f'f{j}' for j in range(len(feature_columns))]
    if not feature_columns or feature_columns != expected:
        raise DatasetFormatError(f"特征列必须依次为 {expected[:3]}...，实际为：{feature_columns[:5]}")

    try:
        numeric = df.apply(pd.to_numeric, errors='raise')
    except (ValueError, TypeError) as e:
        raise DatasetFormatError(f"CSV文件包含非数值单元格：{e}") from e
    if numeric.isna().any().any():
        raise DatasetFormatError("CSV文件包含空单元格")

    labels = numeric[LABEL_COLUMN].to_numpy()
    if not np.all(np.equal(np.mod(labels, 1), 0)):
        raise DatasetFormatError("label列必须为整数")
    labels = labels.astype(np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(numeric[feature_columns].to_numpy(dtype=np.float64), labels, k,
                   name or os.path.splitext(os.path.basename(file_path))[0])


def save_csv_dataset(ds: Dataset, file_path: str) -> str:
    """导出为CSV，格式与 load_csv_dataset 一致"""
    df = pd.DataFrame(ds.features, columns=[f'f{j}' for j in range(ds.dim)])
    df[LABEL_COLUMN] = ds.labels
    df.to_csv(file_path, index=False, float_format='%.17g')
    return file_path
