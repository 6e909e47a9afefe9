"""
多种子结果合并模块
功能：读取 <out>/<arm>/seed_<s>/ 下的单次运行结果，按配置中的种子顺序合并为
all_metrics.csv 与汇总 summary.json（各实验臂的最终准确率、均值与95%置信区间半宽）
"""

import json
import logging
import math
import os
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from fedsim import METRIC_COLUMNS

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.csv'
SUMMARY_FILE = 'summary.json'
FACTORS_FILE = 'factors.csv'


def seed_dir(output_dir: str, arm: str, seed: int) -> str:
    return os.path.join(output_dir, arm, f'seed_{seed}')


def mean_confidence(values: Sequence[float], confidence: float = 0.95) -> Tuple[float, float]:
    """
    均值与t分布置信区间半宽，单个样本时半宽为0

    Args:
        values: 各种子的取值
        confidence: 置信水平，默认0.95

    Returns:
        tuple: (均值, 半宽)
    """
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return float('nan'), float('nan')
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, 0.0
    standard_error = arr.std(ddof=1) / math.sqrt(arr.size)
    t_score = stats.t.ppf(1 - (1 - confidence) / 2, df=arr.size - 1)
    return mean, float(t_score * standard_error)


class SeedResultMerger:
    def __init__(self, output_dir: str, arms: Sequence[str], seeds: Sequence[int]):
        """
        初始化结果合并器
        :param output_dir: 实验输出根目录
        :param arms: 实验臂名称，按配置顺序
        :param seeds: 种子列表，按配置顺序
        """
        self.output_dir = output_dir
        self.arms = list(arms)
        self.seeds = list(seeds)

    def load_seed_metrics(self, arm: str, seed: int) -> pd.DataFrame:
        """
        读取单次运行的指标
        :return: 加上 arm、seed 两列的DataFrame
        """
        path = os.path.join(seed_dir(self.output_dir, arm, seed), METRICS_FILE)
        if not os.path.exists(path):
            raise FileNotFoundError(f"缺少运行结果：{path}")
        df = pd.read_csv(path, float_precision='round_trip')
        for col in METRIC_COLUMNS:
            if col not in df.columns:
                raise ValueError(f"{path} 缺少必要列：{col}")
        df.insert(0, 'seed', seed)
        df.insert(0, 'arm', arm)
        return df

    def load_seed_summary(self, arm: str, seed: int) -> Dict:
        path = os.path.join(seed_dir(self.output_dir, arm, seed), SUMMARY_FILE)
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)

    def load_factors(self, arm: str) -> pd.DataFrame:
        """各种子的系数计数按系数求和"""
        frames = []
        for seed in self.seeds:
            path = os.path.join(seed_dir(self.output_dir, arm, seed), FACTORS_FILE)
            if os.path.exists(path):
                frames.append(pd.read_csv(path, float_precision='round_trip'))
        if not frames:
            return pd.DataFrame(columns=['factor', 'count'])
        return pd.concat(frames, ignore_index=True).groupby('factor', as_index=False)['count'].sum()

    def build_summary(self) -> Dict:
        summary = {'arms': self.arms, 'seeds': self.seeds}
        for arm in self.arms:
            runs = [self.load_seed_summary(arm, seed) for seed in self.seeds]
            accuracies = [run.get('final_test_acc') for run in runs]
            mean, half_width = mean_confidence(accuracies)
            summary[f'{arm}_acc'] = accuracies
            summary[f'{arm}_acc_mean'] = mean
            summary[f'{arm}_acc_ci95'] = half_width
            summary[f'{arm}_final_loss_mean'] = float(np.mean([run['final_loss'] for run in runs]))
            summary[f'{arm}_global_batch'] = runs[0].get('global_batch')
            summary[f'{arm}_H'] = runs[0].get('H')
            summary[f'{arm}_bytes_comm_total'] = int(np.mean([run.get('bytes_comm_total', 0) for run in runs]))
        return summary

    def merge_all(self) -> Tuple[pd.DataFrame, Dict]:
        """
        合并所有运行结果并保存
        :return: (合并后的指标表, 汇总字典)
        """
        frames: List[pd.DataFrame] = []
        for arm in self.arms:
            for seed in self.seeds:
                frames.append(self.load_seed_metrics(arm, seed))
        all_metrics = pd.concat(frames, ignore_index=True)
        all_metrics.to_csv(os.path.join(self.output_dir, 'all_metrics.csv'), index=False, float_format='%.17g')

        summary = self.build_summary()
        with open(os.path.join(self.output_dir, SUMMARY_FILE), 'w', encoding='utf-8') as f:
            json.dump(summary, f, indent=2, ensure_ascii=False)
        logger.info(f"Merged {len(frames)} runs into {self.output_dir}, {len(all_metrics)} rows")
        return all_metrics, summary
