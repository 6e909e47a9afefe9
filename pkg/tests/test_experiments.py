"""
长时间的方向性实验：默认跳过
FEDBATCH_RUN_SLOW=1 运行准确率与梯度范数实验，FEDBATCH_RUN_TIMING=1 运行计时实验
"""

import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import datagen
import gradmod
import nncore
import perfmodel
from compress import compression_noise_sweep
from experiment_config import (build_cost_model, build_dataset, build_init_params, build_model_spec,
                               build_partition_spec, build_sync_policy, build_train_config, load_config,
                               resolve_arms)
from fedsim import run_federated

PRESETS_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'presets')
RUN_SLOW = os.environ.get('FEDBATCH_RUN_SLOW') == '1'
RUN_TIMING = os.environ.get('FEDBATCH_RUN_TIMING') == '1'


def run_preset_arm(config, arm_name, seed):
    arm = {a.name: a for a in resolve_arms(config)}[arm_name]
    train_ds, test_ds = build_dataset(config, seed)
    spec = build_model_spec(config, train_ds)
    shards = datagen.partition(train_ds, build_partition_spec(arm, seed))
    cfg = build_train_config(arm, seed, build_cost_model(config, spec))
    init = build_init_params(arm, spec, train_ds, seed)
    return run_federated(spec, train_ds, shards, build_sync_policy(arm, shards), cfg, test_ds, init=init)


def final_accuracies(config, arm_name):
    return [run_preset_arm(config, arm_name, seed).final_test_acc for seed in config.seeds]


def stepped_share(preset, arm_name='x2'):
    """全部种子上各客户端决策中使用X的占比"""
    config = load_config(os.path.join(PRESETS_DIR, preset))
    X = {a.name: a for a in resolve_arms(config)}[arm_name].step_policy.X
    stepped, total = 0, 0
    for seed in config.seeds:
        hist = gradmod.factor_histogram(run_preset_arm(config, arm_name, seed))
        counts = dict(zip(hist['factor'], hist['count']))
        if not set(counts) <= {1.0, X}:
            raise AssertionError(f"系数直方图出现1与X之外的取值：{counts}")
        stepped += int(counts.get(X, 0))
        total += int(hist['count'].sum())
    return stepped / total


class TestNoiseDecreasesWithBatch(unittest.TestCase):
    def test_gamma_strictly_decreasing(self):
        """固定 b_large=512，b_small 取 8、32、128 时平均 ‖γ‖ 严格递减"""
        config = load_config(os.path.join(PRESETS_DIR, 'compression_sweep.yaml'))
        train_ds, _ = build_dataset(config, 0)
        spec = build_model_spec(config, train_ds)
        params = nncore.init_params(spec, 0)
        norms = [gradmod.estimate_gamma(spec, params, train_ds, b, 512, 20, seed=0).mean_gamma_norm
                 for b in (8, 32, 128)]
        self.assertGreater(norms[0], norms[1])
        self.assertGreater(norms[1], norms[2])


@unittest.skipUnless(RUN_SLOW, '设置 FEDBATCH_RUN_SLOW=1 运行')
class TestSyncExperiments(unittest.TestCase):
    def test_bsp_beats_epoch_fedavg_on_label_skew(self):
        config = load_config(os.path.join(PRESETS_DIR, 'sync_mode_label_skew.yaml'))
        bsp = np.mean(final_accuracies(config, 'bsp'))
        fedavg = np.mean(final_accuracies(config, 'fedavg'))
        self.assertGreaterEqual(bsp - fedavg, 0.02)

    def test_frequent_sync_not_worse(self):
        config = load_config(os.path.join(PRESETS_DIR, 'sync_frequency.yaml'))
        h10 = final_accuracies(config, 'fedavg_h10')
        h40 = final_accuracies(config, 'fedavg_h40')
        if np.mean(h10) < np.mean(h40):
            reversed_seeds = sum(a < b for a, b in zip(h10, h40))
            self.assertLess(reversed_seeds, 3)


class TestFactorUsage(unittest.TestCase):
    """预训练后的两类逻辑回归：τ=0.5 时多数决策使用X，τ=0.8 时多数决策使用1×"""

    def test_low_threshold_mostly_stepped(self):
        self.assertGreater(stepped_share('stepfn_tau05.yaml'), 0.5)

    def test_high_threshold_mostly_original(self):
        self.assertLess(stepped_share('stepfn_tau08.yaml'), 0.5)


@unittest.skipUnless(RUN_SLOW, '设置 FEDBATCH_RUN_SLOW=1 运行')
class TestGradientExperiments(unittest.TestCase):
    def test_small_batch_larger_cumulative_norm(self):
        config = load_config(os.path.join(PRESETS_DIR, 'grad_norm_vs_batch.yaml'))
        wins = 0
        for seed in config.seeds:
            small = gradmod.cumulative_norms(run_preset_arm(config, 'batch8', seed))[:200]
            large = gradmod.cumulative_norms(run_preset_arm(config, 'batch128', seed))[:200]
            wins += np.median(small) > np.median(large)
        self.assertGreaterEqual(wins, 4)

    def test_scaled_large_batch_not_worse(self):
        config = load_config(os.path.join(PRESETS_DIR, 'stepfn_large_batch.yaml'))
        baseline = final_accuracies(config, 'baseline_x1')
        for arm in ('x2', 'x4'):
            scaled = final_accuracies(config, arm)
            with self.subTest(arm=arm):
                self.assertGreaterEqual(sum(s >= b for s, b in zip(scaled, baseline)), 3)

    def test_compression_sweep_includes_full_batch(self):
        """全批量的每次抽样梯度相同，残差的均值与中位数一致；各批大小的残差都落在[0, 1]"""
        config = load_config(os.path.join(PRESETS_DIR, 'compression_sweep.yaml'))
        train_ds, _ = build_dataset(config, 0)
        spec = build_model_spec(config, train_ds)
        sweep = config.compression_sweep
        table = compression_noise_sweep(spec, train_ds, [8, train_ds.size], sweep.ratio, 20, 0,
                                        pretrain_steps=sweep.pretrain_steps, pretrain_lr=sweep.pretrain_lr)
        self.assertEqual(table['b'].tolist(), [8, train_ds.size])
        self.assertTrue(table['rel_residual_mean'].between(0.0, 1.0).all())
        full = table.iloc[1]
        self.assertAlmostEqual(full['rel_residual_mean'], full['rel_residual_p50'], places=12)


@unittest.skipUnless(RUN_TIMING, '设置 FEDBATCH_RUN_TIMING=1 运行')
class TestTimingExperiments(unittest.TestCase):
    def setUp(self):
        config = load_config(os.path.join(PRESETS_DIR, 'profile_toy.yaml'))
        self.train_ds, _ = build_dataset(config, 0)
        self.spec = build_model_spec(config, self.train_ds)

    def test_held_out_prediction(self):
        samples = perfmodel.profile(self.spec, self.train_ds, [8, 32, 128, 512], reps=5)
        fit_tc = perfmodel.fits_from_profile(samples)[0]
        measured = perfmodel.profile(self.spec, self.train_ds, [256], reps=5)[0].t_c
        predicted = fit_tc.predict(256)
        self.assertLessEqual(abs(measured - predicted) / predicted, 0.20)
        self.assertGreater(samples[-1].t_c, samples[0].t_c)

    def test_epoch_time_drops_with_batch(self):
        self.assertGreater(perfmodel.time_epoch(self.spec, self.train_ds, 8),
                           perfmodel.time_epoch(self.spec, self.train_ds, 128))


if __name__ == '__main__':
    unittest.main()
