"""
联邦训练仿真模块
功能：客户端本地SGD轮次、FedAvg参数平均与BSP梯度平均聚合、按样本数加权聚合、逐迭代指标记录
聚合时逐坐标排序后求和，保证结果与客户端顺序和执行顺序无关
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import nncore
from compress import CompressionSpec, ResidualAccumulator, compress_payload, dense_nbytes
from datagen import ClientShard, Dataset
from gradmod import (DECISION_COLUMNS, FactorDecision, IdentityMapper, StepMapper, StepPolicy, factor_histogram,
                     step_mapper)
from nncore import ModelSpec, ParamVector
from perfmodel import CostModel, step_time

logger = logging.getLogger(__name__)

PAYLOADS = ('params', 'grads')
WEIGHTINGS = ('uniform', 'samples')
NORM_SOURCES = ('client', 'aggregate')
METRIC_COLUMNS = ['iter', 'loss', 'test_acc', 'grad_norm_sq', 'delta', 'scale_factor', 'bytes_comm', 'sim_time']
# norm_source=aggregate 时决策记录的 client 取值
AGGREGATE_CLIENT = -1


class TrainingError(ValueError):
    """训练无法继续：分片过小、出现非有限值等"""


@dataclass(frozen=True)
class SyncPolicy:
    """
    同步策略

    Args:
        H: 两次聚合之间的本地步数，H=1 即BSP
        mode: 报告用标签
        payload: params 参数平均（FedAvg），grads 梯度平均（BSP实现，要求H=1）
        epoch_length_ambiguous: 按epoch同步且各分片epoch长度不一致
    """
    H: int = 1
    mode: str = 'bsp'
    payload: str = 'params'
    epoch_length_ambiguous: bool = False

    def __post_init__(self):
        if self.H < 1:
            raise ValueError(f"同步周期H必须≥1：{self.H}")
        if self.payload not in PAYLOADS:
            raise ValueError(f"不支持的聚合内容：{self.payload}，可选：{PAYLOADS}")
        if self.payload == 'grads' and self.H != 1:
            raise ValueError(f"梯度聚合只支持H=1，当前H={self.H}")

    @classmethod
    def bsp(cls, payload: str = 'grads') -> 'SyncPolicy':
        return cls(1, 'bsp', payload)

    @classmethod
    def fedavg(cls, H: int) -> 'SyncPolicy':
        return cls(H, 'fedavg', 'params')

    @classmethod
    def per_epoch(cls, shards: Sequence[ClientShard], b: Union[int, Sequence[int]]) -> 'SyncPolicy':
        """
        每个本地epoch聚合一次；分片大小不一时取最长的epoch并标记
        """
        sizes = [s.size for s in shards]
        batches = [b] * len(sizes) if isinstance(b, (int, np.integer)) else list(b)
        lengths = [max(1, n // bs) for n, bs in zip(sizes, batches)]
        ambiguous = len(set(lengths)) > 1
        if ambiguous:
            logger.warning(f"Clients have unequal local epoch lengths {sorted(set(lengths))}; "
                           f"using the longest ({max(lengths)}) as H")
        return cls(max(lengths), 'fedavg_epoch', 'params', ambiguous)


@dataclass(frozen=True)
class TrainConfig:
    """
    训练配置

    Args:
        lr: 学习率η
        local_batch: 客户端批大小b
        total_iterations: 总迭代数
        eval_every: 评估间隔
        seed: 随机种子
        step_policy: 可选的阶跃缩放策略
        compression: 可选的梯度压缩配置（只作用于梯度聚合）
        weighting: uniform 等权，samples 按样本数加权
        client_batches: 可选的逐客户端批大小，默认全部为 local_batch
        norm_source: Δ 在客户端梯度（client）还是聚合梯度（aggregate）上计算
        cost_model: 可选的耗时模型，用于累计逻辑时间
    """
    lr: float = 0.1
    local_batch: int = 32
    total_iterations: int = 100
    eval_every: int = 10
    seed: int = 0
    step_policy: Optional[StepPolicy] = None
    compression: Optional[CompressionSpec] = None
    weighting: str = 'uniform'
    client_batches: Optional[Tuple[int, ...]] = None
    norm_source: str = 'client'
    cost_model: Optional[CostModel] = None

    def __post_init__(self):
        if not math.isfinite(self.lr) or self.lr < 0:
            raise ValueError(f"学习率必须为非负有限值：{self.lr}")
        if self.local_batch < 1 or self.total_iterations < 1 or self.eval_every < 1:
            raise ValueError("local_batch、total_iterations、eval_every必须为正整数")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"不支持的加权方式：{self.weighting}，可选：{WEIGHTINGS}")
        if self.norm_source not in NORM_SOURCES:
            raise ValueError(f"不支持的范数来源：{self.norm_source}，可选：{NORM_SOURCES}")
        if self.client_batches is not None:
            object.__setattr__(self, 'client_batches', tuple(int(b) for b in self.client_batches))
            if any(b < 1 for b in self.client_batches):
                raise ValueError(f"client_batches必须全部为正：{self.client_batches}")

    def batch_for(self, client_id: int) -> int:
        if self.client_batches is None:
            return self.local_batch
        if client_id >= len(self.client_batches):
            raise TrainingError(f"client_batches只有{len(self.client_batches)}项，缺少客户端{client_id}")
        return self.client_batches[client_id]


class ClientSampler:
    """
    客户端批采样器：按 (seed, client_id) 播种，无放回抽样，每个本地epoch重新打乱，丢弃尾部不足一批的样本
    """

    def __init__(self, ds: Dataset, shard: ClientShard, batch_size: int, seed: int):
        if shard.size < batch_size:
            raise TrainingError(f"客户端{shard.client_id}只有{shard.size}个样本，小于批大小{batch_size}")
        self.ds = ds
        self.shard = shard
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, shard.client_id])
        self.epoch = 0
        self._order = None
        self._pos = 0

    @property
    def steps_per_epoch(self) -> int:
        return self.shard.size // self.batch_size

    def next_indices(self) -> np.ndarray:
        if self._order is None or self._pos + self.batch_size > len(self._order):
            self._order = self.shard.indices[self.rng.permutation(self.shard.size)]
            self._pos = 0
            self.epoch += 1
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx

    def next_batch(self) -> nncore.Batch:
        return self.ds.batch(self.next_indices())


@dataclass(frozen=True)
class StepRecord:
    iteration: int
    loss: float
    test_acc: float
    grad_norm_sq: float
    delta: float
    scale_factor: float
    bytes_comm: int
    sim_time: float

    def as_row(self) -> list:
        return [self.iteration, self.loss, self.test_acc, self.grad_norm_sq, self.delta,
                self.scale_factor, self.bytes_comm, self.sim_time]


@dataclass
class MetricsLog:
    """
    逐迭代指标与运行汇总
    decisions 为逐客户端的缩放决策 (iter, client, delta, factor)，每次迭代每个决策方一行；
    metrics.csv 中的 scale_factor 是各客户端系数的均值，系数直方图只按 decisions 统计
    """
    records: List[StepRecord] = field(default_factory=list)
    summary: Dict = field(default_factory=dict)
    decisions: List[Tuple[int, int, float, float]] = field(default_factory=list)

    def append(self, record: StepRecord):
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError(f"迭代序号必须单调递增：{record.iteration}")
        self.records.append(record)

    def record_decision(self, iteration: int, client_id: int, decision: FactorDecision):
        self.decisions.append((iteration, client_id, decision.delta, decision.factor))

    def __len__(self):
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([r.as_row() for r in self.records], columns=METRIC_COLUMNS)
        return frame.astype({'iter': np.int64, 'bytes_comm': np.int64})

    def decision_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.decisions, columns=DECISION_COLUMNS)
        return frame.astype({'iter': np.int64, 'client': np.int64, 'delta': np.float64, 'factor': np.float64})

    def write_csv(self, file_path: str) -> str:
        self.to_frame().to_csv(file_path, index=False, float_format='%.17g')
        return file_path

    def write_summary(self, file_path: str) -> str:
        with open(file_path, 'w', encoding='utf-8') as f:
            json.dump(self.summary, f, indent=2, sort_keys=True, ensure_ascii=False)
        return file_path

    @property
    def final_test_acc(self) -> Optional[float]:
        for record in reversed(self.records):
            if not math.isnan(record.test_acc):
                return record.test_acc
        return None


@dataclass(frozen=True)
class LocalStep:
    loss: float
    decision: Optional[FactorDecision]


def _ordered(client_vectors):
    """按 client_id 升序取出向量；序列输入以位置作为 client_id"""
    if isinstance(client_vectors, Mapping):
        keys = sorted(client_vectors)
        vectors = [np.asarray(client_vectors[k], dtype=np.float64) for k in keys]
    else:
        vectors = [np.asarray(v, dtype=np.float64) for v in client_vectors]
        keys = list(range(len(vectors)))
    if not vectors:
        raise ValueError("至少需要一个客户端的向量")
    length = vectors[0].shape
    for key, vector in zip(keys, vectors):
        if vector.ndim != 1 or vector.shape != length:
            raise nncore.ShapeError(f"客户端{key}的向量长度{vector.shape}与{length}不一致")
    return keys, vectors


def _sorted_sum(terms) -> np.ndarray:
    """逐坐标排序后求和，结果与客户端的排列顺序无关（逐位一致）"""
    return np.sort(np.stack(terms), axis=0).sum(axis=0)


def aggregate_average(client_params) -> ParamVector:
    """
    等权平均 w ← (1/C)·Σ w^(c)

    :param client_params: {client_id: 向量} 或向量序列
    :return: 逐元素均值，对输入的任意排列逐位相同
    """
    _, vectors = _ordered(client_params)
    return _sorted_sum(vectors) / len(vectors)


def weighted_aggregate(client_params, weights) -> ParamVector:
    """
    加权平均 Σ w_c·params_c / Σ w_c，权重默认取各分片样本数

    Args:
        client_params: {client_id: 向量} 或向量序列
        weights: 与 client_params 同键（或同序）的非负权重

    Returns:
        ParamVector
    """
    keys, vectors = _ordered(client_params)
    if isinstance(weights, Mapping):
        w = [float(weights[k]) for k in keys]
    else:
        w = [float(x) for x in weights]
    if len(w) != len(vectors):
        raise ValueError(f"权重个数{len(w)}与客户端数{len(vectors)}不一致")
    if any(x < 0 or not math.isfinite(x) for x in w):
        raise ValueError(f"权重必须为非负有限值：{w}")
    denominator = math.fsum(w)
    if denominator <= 0:
        raise ValueError("权重之和必须为正")
    return _sorted_sum([weight * vector for weight, vector in zip(w, vectors)]) / denominator


def _client_gradient(model, params, sampler, mapper):
    loss, grad = nncore.backward(model, params, sampler.next_batch())
    return loss, mapper(grad)


def local_round(model: ModelSpec, params: ParamVector, sampler: ClientSampler, cfg: TrainConfig, h: int,
                mapper=None, trace: Optional[List[LocalStep]] = None) -> ParamVector:
    """
    客户端连续执行h步本地SGD，消耗采样器中的h个批

    Args:
        model: 网络结构
        params: 起始参数
        sampler: 客户端采样器（即该客户端的随机状态）
        cfg: 训练配置，使用其中的学习率
        h: 本地步数
        mapper: 可选的梯度映射器，在SGD更新前作用于梯度
        trace: 可选列表，逐步追加 LocalStep

    Returns:
        ParamVector: h步之后的客户端参数
    """
    if h < 1:
        raise ValueError(f"本地步数h必须≥1：{h}")
    mapper = mapper if mapper is not None else IdentityMapper()
    w = params
    for _ in range(h):
        loss, grad = _client_gradient(model, w, sampler, mapper)
        w = nncore.sgd_step(w, grad, cfg.lr)
        if trace is not None:
            trace.append(LocalStep(loss, getattr(mapper, 'last', None)))
    return w


def _combine(vectors, weights, weighting):
    if weighting == 'uniform':
        return aggregate_average(vectors)
    return weighted_aggregate(vectors, weights)


def _mean(values):
    return float(np.mean(values))


def _check_finite(iteration, loss, params):
    if not math.isfinite(loss) or not np.all(np.isfinite(params)):
        raise TrainingError(f"第{iteration}次迭代出现非有限的损失或参数（loss={loss}），请降低学习率")


def run_federated(model: ModelSpec, train_ds: Dataset, shards: Sequence[ClientShard], sync: SyncPolicy,
                  cfg: TrainConfig, test_ds: Optional[Dataset] = None,
                  init: Optional[ParamVector] = None) -> MetricsLog:
    """
    联邦训练主循环：每H步本地SGD后聚合一次，H=1为BSP

    参数:
        model: 网络结构
        train_ds: 训练集（分片索引指向它）
        shards: 客户端分片，全部客户端每轮都参与
        sync: 同步策略
        cfg: 训练配置
        test_ds: 全局测试集，为空时不评估
        init: 可选的初始参数，默认按 cfg.seed 初始化

    返回:
        MetricsLog: 每次迭代一条记录；test_acc 只在评估点有值
    """
    if not shards:
        raise TrainingError("至少需要一个客户端分片")
    if cfg.norm_source == 'aggregate' and sync.payload != 'grads':
        raise TrainingError("norm_source=aggregate 只适用于梯度聚合")
    shards = sorted(shards, key=lambda s: s.client_id)
    ids = [s.client_id for s in shards]
    batches = {s.client_id: cfg.batch_for(s.client_id) for s in shards}
    samplers = {s.client_id: ClientSampler(train_ds, s, batches[s.client_id], cfg.seed) for s in shards}
    policy = cfg.step_policy if cfg.step_policy is not None else StepPolicy()
    if cfg.norm_source == 'client':
        mappers = {cid: step_mapper(policy) for cid in ids}
        global_mapper = None
    else:
        mappers = {cid: step_mapper(StepPolicy()) for cid in ids}
        global_mapper = step_mapper(policy)

    compression = cfg.compression
    if compression is not None and compression.enabled and sync.payload == 'params':
        logger.warning("Compression applies to gradient payloads only; parameter averaging stays uncompressed")
        compression = None
    accumulators = {}
    if compression is not None and compression.enabled and compression.accumulate_residual:
        accumulators = {cid: ResidualAccumulator(compression) for cid in ids}

    if sync.payload == 'params':
        weights = {s.client_id: s.size for s in shards}
    else:
        weights = dict(batches)
    cost_model = cfg.cost_model.with_period(sync.H) if cfg.cost_model is not None else None
    w = nncore.init_params(model, cfg.seed) if init is None else np.array(init, dtype=np.float64)
    global_batch = sum(batches.values())
    param_bytes = dense_nbytes(model.param_count)
    if sync.epoch_length_ambiguous:
        logger.warning(f"Sync period H={sync.H} derived from unequal shard epochs")
    logger.info(f"Federated run: {len(ids)} clients, H={sync.H}, payload={sync.payload}, "
                f"global batch B={global_batch}, {cfg.total_iterations} iterations")

    log = MetricsLog()
    sim_time = 0.0
    i = 0
    while i < cfg.total_iterations:
        h = min(sync.H, cfg.total_iterations - i)
        round_end = i + h - 1
        # 每步: (loss, norm_sq, delta, factor, bytes, [(client, decision)])
        steps = []
        if sync.payload == 'params':
            client_params, traces = {}, {}
            for cid in ids:
                traces[cid] = []
                client_params[cid] = local_round(model, w, samplers[cid], cfg, h, mappers[cid], traces[cid])
            w = _combine(client_params, weights, cfg.weighting)
            for j in range(h):
                decisions = [traces[cid][j].decision for cid in ids]
                steps.append((
                    _mean([traces[cid][j].loss for cid in ids]),
                    _mean([d.norm_sq for d in decisions]),
                    _mean([d.delta for d in decisions]),
                    _mean([d.factor for d in decisions]),
                    len(ids) * param_bytes if j == h - 1 else 0,
                    list(zip(ids, decisions)),
                ))
        else:
            grads, losses = {}, []
            sent = 0
            for cid in ids:
                loss, grad = _client_gradient(model, w, samplers[cid], mappers[cid])
                grad, nbytes = compress_payload(grad, compression, accumulators.get(cid))
                grads[cid] = grad
                losses.append(loss)
                sent += nbytes
            aggregated = _combine(grads, weights, cfg.weighting)
            if global_mapper is not None:
                aggregated = global_mapper(aggregated)
                deciders = [(AGGREGATE_CLIENT, global_mapper.last)]
            else:
                deciders = [(cid, mappers[cid].last) for cid in ids]
            decisions = [d for _, d in deciders]
            w = nncore.sgd_step(w, aggregated, cfg.lr)
            steps.append((
                _mean(losses),
                _mean([d.norm_sq for d in decisions]),
                _mean([d.delta for d in decisions]),
                _mean([d.factor for d in decisions]),
                sent,
                deciders,
            ))
        _check_finite(round_end, steps[-1][0], w)
        logger.debug(f"Aggregated at iteration {round_end}, global batch B={global_batch}")

        evaluate = test_ds is not None and (
            round_end == cfg.total_iterations - 1
            or any((j + 1) % cfg.eval_every == 0 for j in range(i, round_end + 1))
        )
        for j, (loss, norm_sq, delta, factor, nbytes, deciders) in enumerate(steps):
            iteration = i + j
            for cid, decision in deciders:
                log.record_decision(iteration, cid, decision)
            if cost_model is not None:
                synced = iteration == round_end
                sim_time += max(step_time(cost_model, b, iteration, synced) for b in set(batches.values()))
            test_acc = float('nan')
            if evaluate and iteration == round_end:
                test_acc = nncore.accuracy(model, w, test_ds.features, test_ds.labels)
            log.append(StepRecord(iteration, loss, test_acc, norm_sq, delta, factor, int(nbytes), sim_time))
        i = round_end + 1

    frame = log.to_frame()
    histogram = factor_histogram(log)
    log.summary = {
        'iterations': cfg.total_iterations,
        'H': sync.H,
        'mode': sync.mode,
        'payload': sync.payload,
        'num_clients': len(ids),
        'global_batch': global_batch,
        'lr': cfg.lr,
        'seed': cfg.seed,
        'final_loss': float(frame['loss'].iloc[-1]),
        'final_test_acc': log.final_test_acc,
        'epoch_length_ambiguous': sync.epoch_length_ambiguous,
        'bytes_comm_total': int(frame['bytes_comm'].sum()),
        'sim_time_total': sim_time,
        'step_policy': asdict(policy),
        'factor_counts': {f'{factor:g}': int(count) for factor, count in zip(histogram['factor'], histogram['count'])},
    }
    logger.info(f"Run finished: final loss {log.summary['final_loss']:.4f}, "
                f"final test accuracy {log.summary['final_test_acc']}")
    return log
