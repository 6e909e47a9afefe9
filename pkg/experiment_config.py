"""
实验配置模块
功能：读取YAML实验配置，用pydantic校验（拒绝未知字段），展开各实验臂(arm)的覆盖项，
并构造训练所需的数据集、模型结构、划分、同步策略、阶跃策略、压缩与耗时/内存模型
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

import datagen
import nncore
from compress import CompressionSpec
from datagen import ClientShard, Dataset, PartitionSpec
from fedsim import SyncPolicy, TrainConfig
from gradmod import StepPolicy
from nncore import ModelSpec, ParamVector
from perfmodel import CostModel, MemoryModel, fits_from_profile, load_profile_csv

logger = logging.getLogger(__name__)

DEFAULT_ARM = 'default'


class ConfigError(ValueError):
    """配置文件无法读取或未通过校验，消息中包含字段路径"""


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class DataSection(_Section):
    kind: Literal['synthetic', 'csv'] = 'synthetic'
    num_classes: int = Field(10, ge=2)
    dim: int = Field(20, ge=1)
    per_class: int = Field(200, ge=2)
    spread: float = Field(1.0, ge=0)
    path: Optional[str] = None
    test_fraction: float = Field(0.2, gt=0, lt=1)
    seed: Optional[int] = None


class ModelSection(_Section):
    hidden: List[int] = Field(default_factory=lambda: [32])
    activation: Literal['relu', 'tanh'] = 'relu'
    bytes_per_element: int = Field(8, ge=1)

    @field_validator('hidden')
    @classmethod
    def _positive_widths(cls, value):
        if any(w < 1 for w in value):
            raise ValueError('隐藏层宽度必须为正')
        return value


class PartitionSection(_Section):
    mode: Literal['iid', 'label_skew'] = 'iid'
    num_clients: int = Field(10, ge=1)
    labels_per_client: int = Field(1, ge=1)


class TrainSection(_Section):
    lr: float = Field(0.1, gt=0)
    local_batch: int = Field(32, ge=1)
    total_iterations: int = Field(200, ge=1)
    eval_every: int = Field(20, ge=1)
    weighting: Literal['uniform', 'samples'] = 'uniform'
    client_batches: Optional[List[int]] = None
    norm_source: Literal['client', 'aggregate'] = 'client'
    # 大于0时先在全部训练数据上做小批量SGD，再从得到的参数开始联邦训练
    pretrain_steps: int = Field(0, ge=0)
    pretrain_lr: float = Field(0.1, gt=0)
    pretrain_batch: int = Field(32, ge=1)


class SyncSection(_Section):
    H: Union[int, Literal['epoch']] = 1
    payload: Literal['params', 'grads'] = 'params'
    mode: Optional[str] = None

    @field_validator('H')
    @classmethod
    def _positive_period(cls, value):
        if isinstance(value, int) and value < 1:
            raise ValueError('H必须≥1或为"epoch"')
        return value


class StepPolicySection(_Section):
    X: float = Field(1.0, ge=1)
    threshold: float = Field(0.5, gt=0)
    warmup_iters: int = Field(1, ge=0)
    invert_branches: bool = False


class CompressionSection(_Section):
    kind: Literal['none', 'topk'] = 'none'
    ratio: float = Field(1.0, gt=0, le=1)
    accumulate_residual: bool = False


class PerfSection(_Section):
    profile_csv: Optional[str] = None
    profile_batches: List[int] = Field(default_factory=lambda: [8, 32, 128, 512])
    validate_batch: Optional[int] = 256
    reps: int = Field(5, ge=3)
    t_sync: float = Field(0.0, ge=0)
    sync_alpha: Optional[float] = Field(None, ge=0)
    sync_beta: Optional[float] = Field(None, ge=0)
    optimizer_multiplier: Literal[0, 1, 2] = 0
    budget: Optional[float] = Field(None, gt=0)
    candidates: List[int] = Field(default_factory=lambda: [8, 16, 32, 64, 128, 256, 512, 1024])


class NoiseSection(_Section):
    b_small: List[int] = Field(default_factory=lambda: [8, 32, 128])
    b_large: int = Field(512, ge=1)
    trials: int = Field(20, ge=1)
    draw: Literal['independent', 'nested'] = 'independent'
    pretrain_steps: int = Field(0, ge=0)
    pretrain_lr: float = Field(0.1, gt=0)


class CompressionSweepSection(_Section):
    batch_sizes: List[int] = Field(default_factory=lambda: [8, 32, 128, 512])
    ratio: float = Field(0.1, gt=0, le=1)
    trials: int = Field(20, ge=1)
    pretrain_steps: int = Field(0, ge=0)
    pretrain_lr: float = Field(0.1, gt=0)


class BatchSweepSection(_Section):
    batch_sizes: List[int] = Field(default_factory=lambda: [8, 32, 128, 512])
    lr: Optional[float] = Field(None, gt=0)
    total_iterations: Optional[int] = Field(None, ge=1)


class ArmOverride(_Section):
    """实验臂：对基础配置各节的部分覆盖"""
    sync: Optional[Dict[str, Any]] = None
    step_policy: Optional[Dict[str, Any]] = None
    compression: Optional[Dict[str, Any]] = None
    train: Optional[Dict[str, Any]] = None
    partition: Optional[Dict[str, Any]] = None


class ExperimentConfig(_Section):
    name: str
    output_dir: str = 'results'
    seeds: List[int] = Field(min_length=1)
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    partition: PartitionSection = Field(default_factory=PartitionSection)
    train: TrainSection = Field(default_factory=TrainSection)
    sync: SyncSection = Field(default_factory=SyncSection)
    step_policy: Optional[StepPolicySection] = None
    compression: Optional[CompressionSection] = None
    perf: PerfSection = Field(default_factory=PerfSection)
    noise: NoiseSection = Field(default_factory=NoiseSection)
    compression_sweep: CompressionSweepSection = Field(default_factory=CompressionSweepSection)
    batch_sweep: BatchSweepSection = Field(default_factory=BatchSweepSection)
    arms: Dict[str, ArmOverride] = Field(default_factory=dict)


@dataclass(frozen=True)
class ResolvedArm:
    """合并覆盖项后的一个实验臂"""
    name: str
    partition: PartitionSection
    train: TrainSection
    sync: SyncSection
    step_policy: Optional[StepPolicySection]
    compression: Optional[CompressionSection]


def _format_errors(error: ValidationError, prefix: str = '') -> str:
    parts = []
    for item in error.errors():
        path = '.'.join(str(p) for p in item['loc'])
        parts.append(f"{prefix}{path}: {item['msg']}")
    return '; '.join(parts)


def _merge(section_cls, base, override, path):
    data = base.model_dump() if base is not None else {}
    data.update(override or {})
    try:
        return section_cls.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"配置校验失败：{_format_errors(e, path + '.')}") from e


def resolve_arms(config: ExperimentConfig) -> List[ResolvedArm]:
    """
    展开全部实验臂；没有配置 arms 时只有一个 default 臂
    覆盖项在这里重新校验，错误路径形如 arms.<名称>.train.lr
    """
    overrides = config.arms or {DEFAULT_ARM: ArmOverride()}
    resolved = []
    for name, arm in overrides.items():
        path = f'arms.{name}'
        step_policy = config.step_policy
        if arm.step_policy is not None:
            step_policy = _merge(StepPolicySection, config.step_policy, arm.step_policy, f'{path}.step_policy')
        compression = config.compression
        if arm.compression is not None:
            compression = _merge(CompressionSection, config.compression, arm.compression, f'{path}.compression')
        resolved.append(ResolvedArm(
            name=name,
            partition=_merge(PartitionSection, config.partition, arm.partition, f'{path}.partition'),
            train=_merge(TrainSection, config.train, arm.train, f'{path}.train'),
            sync=_merge(SyncSection, config.sync, arm.sync, f'{path}.sync'),
            step_policy=step_policy,
            compression=compression,
        ))
    for arm in resolved:
        if arm.sync.payload == 'grads' and arm.sync.H != 1:
            raise ConfigError(f"arms.{arm.name}.sync.H: 梯度聚合只支持H=1，当前为{arm.sync.H}")
        if arm.train.norm_source == 'aggregate' and arm.sync.payload != 'grads':
            raise ConfigError(f"arms.{arm.name}.train.norm_source: aggregate 只适用于 payload=grads")
    return resolved


def parse_config(raw: Any) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("配置文件顶层必须是键值映射")
    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"配置校验失败：{_format_errors(e)}") from e
    resolve_arms(config)
    return config


def load_config(file_path: str) -> ExperimentConfig:
    """
    读取并校验YAML实验配置

    :param file_path: 配置文件路径
    :return: ExperimentConfig
    """
    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"配置文件不存在：{file_path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"配置文件不是合法的YAML：{e}") from e
    config = parse_config(raw)
    logger.info(f"Loaded config '{config.name}' from {file_path}: {len(config.seeds)} seeds, "
                f"{max(1, len(config.arms))} arms")
    return config


def build_dataset(config: ExperimentConfig, seed: int):
    """按配置生成或读取数据集，返回 (训练集, 测试集)"""
    data = config.data
    data_seed = data.seed if data.seed is not None else seed
    if data.kind == 'csv':
        if not data.path:
            raise ConfigError("data.path: kind=csv 时必须提供路径")
        ds = datagen.load_csv_dataset(data.path, num_classes=data.num_classes)
    else:
        ds = datagen.make_synthetic(data.num_classes, data.dim, data.per_class, data.spread, data_seed)
    return datagen.train_test_split(ds, data.test_fraction, data_seed)


def build_model_spec(config: ExperimentConfig, ds: Dataset) -> ModelSpec:
    m = config.model
    return ModelSpec((ds.dim, *m.hidden, ds.num_classes), m.activation, m.bytes_per_element)


def build_partition_spec(arm: ResolvedArm, seed: int) -> PartitionSpec:
    p = arm.partition
    return PartitionSpec(p.mode, p.num_clients, p.labels_per_client, seed)


def build_step_policy(section: Optional[StepPolicySection]) -> Optional[StepPolicy]:
    if section is None:
        return None
    return StepPolicy(section.X, section.threshold, section.warmup_iters, section.invert_branches)


def build_compression(section: Optional[CompressionSection]) -> Optional[CompressionSpec]:
    if section is None:
        return None
    return CompressionSpec(section.kind, section.ratio, section.accumulate_residual)


def build_sync_policy(arm: ResolvedArm, shards: List[ClientShard]) -> SyncPolicy:
    s = arm.sync
    if s.H == 'epoch':
        batches = arm.train.client_batches or arm.train.local_batch
        return SyncPolicy.per_epoch(shards, batches)
    mode = s.mode or ('bsp' if s.H == 1 else 'fedavg')
    return SyncPolicy(s.H, mode, s.payload)


def build_cost_model(config: ExperimentConfig, spec: ModelSpec, profile_csv: Optional[str] = None) -> Optional[CostModel]:
    """有剖析文件（参数或配置）时构造耗时模型，否则返回 None"""
    perf = config.perf
    path = profile_csv or perf.profile_csv
    if not path:
        return None
    fit_tc, fit_tmov, _ = fits_from_profile(load_profile_csv(path))
    if perf.sync_alpha is not None or perf.sync_beta is not None:
        return CostModel.with_affine_sync(fit_tc, fit_tmov, perf.sync_alpha or 0.0, perf.sync_beta or 0.0, spec)
    return CostModel(fit_tc, fit_tmov, perf.t_sync)


def build_memory_model(config: ExperimentConfig, spec: ModelSpec, profile_csv: Optional[str] = None) -> MemoryModel:
    path = profile_csv or config.perf.profile_csv
    fit_mbatch = fits_from_profile(load_profile_csv(path))[2] if path else None
    return MemoryModel.from_spec(spec, fit_mbatch, config.perf.optimizer_multiplier)


def build_train_config(arm: ResolvedArm, seed: int, cost_model: Optional[CostModel] = None) -> TrainConfig:
    t = arm.train
    return TrainConfig(
        lr=t.lr,
        local_batch=t.local_batch,
        total_iterations=t.total_iterations,
        eval_every=t.eval_every,
        seed=seed,
        step_policy=build_step_policy(arm.step_policy),
        compression=build_compression(arm.compression),
        weighting=t.weighting,
        client_batches=tuple(t.client_batches) if t.client_batches else None,
        norm_source=t.norm_source,
        cost_model=cost_model,
    )


def build_init_params(arm: ResolvedArm, spec: ModelSpec, train_ds: Dataset, seed: int) -> Optional[ParamVector]:
    """train.pretrain_steps 为0时返回 None（按种子初始化），否则返回预训练后的参数"""
    t = arm.train
    if t.pretrain_steps == 0:
        return None
    logger.info(f"Pretraining arm '{arm.name}' for {t.pretrain_steps} steps (lr={t.pretrain_lr}, b={t.pretrain_batch})")
    return nncore.pretrain(spec, train_ds, seed, t.pretrain_steps, t.pretrain_lr, t.pretrain_batch)
