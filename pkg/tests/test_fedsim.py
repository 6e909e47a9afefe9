import json
import math
import os
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd
from numpy.testing import assert_allclose, assert_array_equal

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import datagen
import fedsim
import nncore
from compress import CompressionSpec
from datagen import ClientShard
from fedsim import ClientSampler, MetricsLog, StepRecord, SyncPolicy, TrainConfig, TrainingError
from gradmod import StepMapper, StepPolicy, factor_histogram
from nncore import Batch, ModelSpec
from perfmodel import CostModel, LinearFit


def small_task(num_clients=4, seed=0, per_class=40):
    ds = datagen.make_synthetic(4, 6, per_class, 0.8, seed=seed)
    train, test = datagen.train_test_split(ds, 0.25, seed=seed)
    shards = datagen.partition_iid(train, num_clients, seed=seed)
    return train, test, shards, ModelSpec((6, 12, 4), activation='tanh')


class TestAggregation(unittest.TestCase):
    def test_average(self):
        assert_array_equal(fedsim.aggregate_average([np.array([1.0, 2.0]), np.array([3.0, 4.0])]), [2.0, 3.0])

    def test_single_client_identity(self):
        v = np.array([0.1, -0.7, 3.3])
        assert_array_equal(fedsim.aggregate_average({5: v}), v)

    def test_weighted(self):
        """权重1与3：[0]与[10] → [7.5]"""
        assert_array_equal(fedsim.weighted_aggregate([np.array([0.0]), np.array([10.0])], [1, 3]), [7.5])

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        vectors = {cid: rng.standard_normal(50) for cid in range(7)}
        reordered = {cid: vectors[cid] for cid in (6, 2, 0, 5, 1, 4, 3)}
        assert_array_equal(fedsim.aggregate_average(vectors), fedsim.aggregate_average(reordered))
        weights = {cid: cid + 1 for cid in range(7)}
        assert_array_equal(fedsim.weighted_aggregate(vectors, weights),
                           fedsim.weighted_aggregate(reordered, weights))

    def test_list_permutation_bit_identical(self):
        """序列输入：任意排列逐位相同"""
        rng = np.random.default_rng(3)
        vectors = [rng.standard_normal(1000) for _ in range(7)]
        expected = fedsim.aggregate_average(vectors)
        for order in (vectors[::-1], [vectors[i] for i in rng.permutation(7)]):
            assert_array_equal(fedsim.aggregate_average(order), expected)
        weights = list(rng.uniform(1, 100, size=7))
        weighted = fedsim.weighted_aggregate(vectors, weights)
        perm = rng.permutation(7)
        assert_array_equal(fedsim.weighted_aggregate([vectors[i] for i in perm], [weights[i] for i in perm]),
                           weighted)

    def test_errors(self):
        with self.assertRaises(ValueError):
            fedsim.aggregate_average([])
        with self.assertRaises(nncore.ShapeError):
            fedsim.aggregate_average([np.zeros(3), np.zeros(4)])
        with self.assertRaises(ValueError):
            fedsim.weighted_aggregate([np.zeros(2), np.zeros(2)], [0, 0])
        with self.assertRaises(ValueError):
            fedsim.weighted_aggregate([np.zeros(2), np.zeros(2)], [1, -1])


class TestSyncPolicy(unittest.TestCase):
    def test_grads_require_h1(self):
        with self.assertRaises(ValueError):
            SyncPolicy(H=4, payload='grads')
        with self.assertRaises(ValueError):
            SyncPolicy(H=0)

    def test_per_epoch_equal_shards(self):
        shards = [ClientShard(0, np.arange(100)), ClientShard(1, np.arange(100, 200))]
        sync = SyncPolicy.per_epoch(shards, 20)
        self.assertEqual(sync.H, 5)
        self.assertFalse(sync.epoch_length_ambiguous)

    def test_per_epoch_unequal_shards(self):
        shards = [ClientShard(0, np.arange(100)), ClientShard(1, np.arange(100, 160))]
        with self.assertLogs('fedsim', level='WARNING'):
            sync = SyncPolicy.per_epoch(shards, 20)
        self.assertEqual(sync.H, 5)
        self.assertTrue(sync.epoch_length_ambiguous)
        self.assertEqual(SyncPolicy.per_epoch(shards, [20, 12]).H, 5)


class TestClientSampler(unittest.TestCase):
    def test_epoch_covers_shard(self):
        train, _, shards, _ = small_task()
        sampler = ClientSampler(train, shards[0], 4, seed=0)
        steps = sampler.steps_per_epoch
        drawn = np.concatenate([sampler.next_indices() for _ in range(steps)])
        self.assertEqual(len(set(drawn.tolist())), steps * 4)
        self.assertTrue(set(drawn.tolist()) <= set(shards[0].indices.tolist()))
        self.assertEqual(sampler.epoch, 1)
        sampler.next_indices()
        self.assertEqual(sampler.epoch, 2)

    def test_seeded_by_client(self):
        train, _, shards, _ = small_task()
        a = ClientSampler(train, shards[1], 8, seed=3).next_indices()
        b = ClientSampler(train, shards[1], 8, seed=3).next_indices()
        assert_array_equal(a, b)

    def test_shard_smaller_than_batch(self):
        train, _, shards, _ = small_task()
        with self.assertRaises(TrainingError):
            ClientSampler(train, shards[0], shards[0].size + 1, seed=0)


class TestLocalRound(unittest.TestCase):
    def setUp(self):
        self.train, _, self.shards, self.model = small_task()
        self.params = nncore.init_params(self.model, seed=1)

    def test_single_step_matches_sgd(self):
        cfg = TrainConfig(lr=0.3, local_batch=8)
        result = fedsim.local_round(self.model, self.params, ClientSampler(self.train, self.shards[0], 8, 0), cfg, 1)
        batch = ClientSampler(self.train, self.shards[0], 8, 0).next_batch()
        _, grad = nncore.backward(self.model, self.params, batch)
        assert_array_equal(result, nncore.sgd_step(self.params, grad, 0.3))

    def test_zero_lr(self):
        cfg = TrainConfig(lr=0.0, local_batch=8)
        sampler = ClientSampler(self.train, self.shards[0], 8, 0)
        result = fedsim.local_round(self.model, self.params, sampler, cfg, 5)
        assert_array_equal(result, self.params)

    def test_three_steps_with_trace(self):
        cfg = TrainConfig(lr=0.2, local_batch=8)
        trace = []
        mapper = StepMapper(StepPolicy())
        result = fedsim.local_round(self.model, self.params, ClientSampler(self.train, self.shards[2], 8, 0), cfg, 3,
                                    mapper=mapper, trace=trace)
        oracle = ClientSampler(self.train, self.shards[2], 8, 0)
        w = self.params
        for _ in range(3):
            _, grad = nncore.backward(self.model, w, oracle.next_batch())
            w = nncore.sgd_step(w, grad, 0.2)
        assert_array_equal(result, w)
        self.assertEqual(len(trace), 3)
        self.assertEqual([step.decision.iteration for step in trace], [0, 1, 2])

    def test_invalid_h(self):
        with self.assertRaises(ValueError):
            fedsim.local_round(self.model, self.params, ClientSampler(self.train, self.shards[0], 8, 0),
                               TrainConfig(), 0)


class TestRunFederated(unittest.TestCase):
    def setUp(self):
        self.train, self.test, self.shards, self.model = small_task()

    def test_bsp_equals_large_batch(self):
        """BSP梯度平均与把所有客户端批次拼接成一个大批次的SGD等价"""
        b, steps, lr = 8, 50, 0.2
        cfg = TrainConfig(lr=lr, local_batch=b, total_iterations=steps, eval_every=steps, seed=7)
        log = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.bsp(), cfg)

        samplers = [ClientSampler(self.train, s, b, 7) for s in self.shards]
        w = nncore.init_params(self.model, 7)
        losses = []
        for _ in range(steps):
            parts = [sampler.next_batch() for sampler in samplers]
            joined = Batch(np.vstack([p.features for p in parts]), np.concatenate([p.labels for p in parts]))
            loss, grad = nncore.backward(self.model, w, joined)
            losses.append(loss)
            w = nncore.sgd_step(w, grad, lr)
        assert_allclose(log.to_frame()['loss'].to_numpy(), losses, rtol=0, atol=1e-9)
        self.assertEqual(log.summary['global_batch'], 4 * b)

    def test_params_and_grads_payload_agree_at_h1(self):
        cfg = TrainConfig(lr=0.3, local_batch=6, total_iterations=20, eval_every=5, seed=2)
        by_params = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy(1, 'bsp', 'params'),
                                         cfg, self.test).to_frame()
        by_grads = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.bsp(), cfg,
                                        self.test).to_frame()
        assert_allclose(by_params['loss'], by_grads['loss'], rtol=0, atol=1e-12)
        assert_array_equal(by_params['bytes_comm'], by_grads['bytes_comm'])

    def test_deterministic(self):
        cfg = TrainConfig(lr=0.3, local_batch=4, total_iterations=15, eval_every=5, seed=1,
                          step_policy=StepPolicy(X=2.0, threshold=0.5))
        a = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.fedavg(3), cfg, self.test)
        b = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.fedavg(3), cfg, self.test)
        self.assertTrue(a.to_frame().equals(b.to_frame()))
        self.assertEqual(a.summary, b.summary)

    def test_noop_policy_bit_identical(self):
        base = dict(lr=0.3, local_batch=4, total_iterations=12, eval_every=4, seed=5)
        plain = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.bsp(), TrainConfig(**base),
                                     self.test).to_frame()
        noop = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.bsp(),
                                    TrainConfig(step_policy=StepPolicy(X=1.0, threshold=0.8), **base),
                                    self.test).to_frame()
        self.assertTrue(plain.equals(noop))

    def test_scaling_changes_trajectory(self):
        base = dict(lr=0.3, local_batch=4, total_iterations=12, eval_every=4, seed=5)
        plain = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.bsp(), TrainConfig(**base))
        scaled = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.bsp(),
                                      TrainConfig(step_policy=StepPolicy(X=4.0, threshold=1e-9), **base))
        self.assertEqual(scaled.to_frame()['scale_factor'].iloc[0], 1.0)
        self.assertTrue((scaled.to_frame()['scale_factor'].iloc[1:] == 4.0).all())
        self.assertFalse(plain.to_frame()['loss'].equals(scaled.to_frame()['loss']))

    def test_factor_histogram_counts_client_decisions(self):
        """4个客户端各自决策：直方图只有1与X两档，计数之和为迭代数×客户端数"""
        cfg = TrainConfig(lr=0.3, local_batch=4, total_iterations=12, eval_every=4, seed=5,
                          step_policy=StepPolicy(X=4.0, threshold=1e-9))
        log = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.fedavg(3), cfg)
        decisions = log.decision_frame()
        self.assertEqual(len(decisions), 12 * 4)
        self.assertEqual(sorted(set(decisions['client'])), [0, 1, 2, 3])
        hist = factor_histogram(log)
        self.assertEqual(hist['factor'].tolist(), [1.0, 4.0])
        self.assertEqual(hist['count'].tolist(), [4, 44])
        self.assertEqual(log.summary['factor_counts'], {'1': 4, '4': 44})

    def test_mixed_client_factors_stay_binary(self):
        """客户端之间系数不同时，metrics 记均值，直方图仍然只有1与X"""
        cfg = TrainConfig(lr=0.3, local_batch=4, total_iterations=30, eval_every=30, seed=2,
                          step_policy=StepPolicy(X=2.0, threshold=0.5))
        log = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.bsp(), cfg)
        hist = factor_histogram(log)
        self.assertTrue(set(hist['factor']) <= {1.0, 2.0})
        self.assertEqual(int(hist['count'].sum()), 30 * 4)
        means = log.decision_frame().groupby('iter')['factor'].mean().to_numpy()
        assert_array_equal(log.to_frame()['scale_factor'].to_numpy(), means)

    def test_compression_bytes(self):
        P = self.model.param_count
        cfg = TrainConfig(lr=0.2, local_batch=4, total_iterations=5, eval_every=5,
                          compression=CompressionSpec('topk', 0.1))
        log = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.bsp(), cfg)
        k = CompressionSpec('topk', 0.1).k_for(P)
        self.assertTrue((log.to_frame()['bytes_comm'] == 4 * k * 12).all())
        dense = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.bsp(),
                                     TrainConfig(lr=0.2, local_batch=4, total_iterations=5, eval_every=5))
        self.assertTrue((dense.to_frame()['bytes_comm'] == 4 * P * 8).all())

    def test_compression_ignored_for_params(self):
        cfg = TrainConfig(lr=0.2, local_batch=4, total_iterations=4, eval_every=4,
                          compression=CompressionSpec('topk', 0.1))
        with self.assertLogs('fedsim', level='WARNING'):
            log = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.fedavg(2), cfg)
        self.assertEqual(log.to_frame()['bytes_comm'].tolist(), [0, 4 * self.model.param_count * 8] * 2)

    def test_fedavg_rounds_and_evaluation(self):
        """H=4、共10步：聚合点为3、7、9，评估落在包含评估点的轮次末尾"""
        cfg = TrainConfig(lr=0.2, local_batch=4, total_iterations=10, eval_every=5, seed=0)
        frame = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.fedavg(4), cfg,
                                     self.test).to_frame()
        self.assertEqual(frame['iter'].tolist(), list(range(10)))
        sent = frame.loc[frame['bytes_comm'] > 0, 'iter'].tolist()
        self.assertEqual(sent, [3, 7, 9])
        evaluated = frame.loc[frame['test_acc'].notna(), 'iter'].tolist()
        self.assertEqual(evaluated, [7, 9])

    def test_weighted_heterogeneous_batches(self):
        shards = self.shards[:2]
        cfg = TrainConfig(lr=0.25, local_batch=4, total_iterations=2, eval_every=2, seed=4,
                          weighting='samples', client_batches=(4, 12))
        log = fedsim.run_federated(self.model, self.train, shards, SyncPolicy.bsp(), cfg)
        self.assertEqual(log.summary['global_batch'], 16)

        samplers = [ClientSampler(self.train, s, b, 4) for s, b in zip(shards, (4, 12))]
        w = nncore.init_params(self.model, 4)
        first = [sampler.next_batch() for sampler in samplers]
        joined = Batch(np.vstack([p.features for p in first]), np.concatenate([p.labels for p in first]))
        _, grad = nncore.backward(self.model, w, joined)
        w = nncore.sgd_step(w, grad, 0.25)
        second = [nncore.forward_loss(self.model, w, sampler.next_batch()) for sampler in samplers]
        self.assertAlmostEqual(log.to_frame()['loss'].iloc[1], float(np.mean(second)), delta=1e-10)

    def test_sim_time(self):
        cost = CostModel(LinearFit(0.5, 0.0), LinearFit(0.0, 1.0), t_sync=10.0)
        cfg = TrainConfig(lr=0.1, local_batch=4, total_iterations=5, eval_every=5, cost_model=cost)
        frame = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.fedavg(2), cfg).to_frame()
        # 单步 0.5·4 + 1 = 3，第1、3、4步同步各加10
        assert_allclose(frame['sim_time'], [3.0, 16.0, 19.0, 32.0, 45.0])

    def test_aggregate_norm_source(self):
        cfg = TrainConfig(lr=0.2, local_batch=4, total_iterations=6, eval_every=6, norm_source='aggregate',
                          step_policy=StepPolicy(X=2.0, threshold=0.5))
        log = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.bsp(), cfg)
        self.assertTrue(set(log.to_frame()['scale_factor']) <= {1.0, 2.0})
        decisions = log.decision_frame()
        self.assertEqual(decisions['client'].tolist(), [fedsim.AGGREGATE_CLIENT] * 6)
        self.assertEqual(int(factor_histogram(log)['count'].sum()), 6)
        with self.assertRaises(TrainingError):
            fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.fedavg(2), cfg)

    def test_non_finite_raises(self):
        cfg = TrainConfig(lr=0.1, local_batch=4, total_iterations=3, eval_every=3)
        with self.assertRaises(TrainingError):
            fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.bsp(), cfg,
                                 init=np.full(self.model.param_count, np.nan))

    def test_summary_fields(self):
        cfg = TrainConfig(lr=0.2, local_batch=4, total_iterations=6, eval_every=3, seed=9)
        log = fedsim.run_federated(self.model, self.train, self.shards, SyncPolicy.fedavg(3), cfg, self.test)
        summary = log.summary
        self.assertEqual(summary['H'], 3)
        self.assertEqual(summary['num_clients'], 4)
        self.assertEqual(summary['factor_counts'], {'1': 6 * 4})
        self.assertEqual(summary['final_test_acc'], log.final_test_acc)
        self.assertEqual(summary['bytes_comm_total'], 2 * 4 * self.model.param_count * 8)

    def test_logistic_model_fits_blobs(self):
        ds = datagen.make_synthetic(10, 32, 50, 0.3, seed=0)
        shards = datagen.partition_iid(ds, 1, seed=0)
        model = ModelSpec((32, 10))
        cfg = TrainConfig(lr=0.5, local_batch=32, total_iterations=200, eval_every=200, seed=0)
        log = fedsim.run_federated(model, ds, shards, SyncPolicy.bsp(), cfg, test_ds=ds)
        self.assertGreater(log.final_test_acc, 0.9)


class TestMetricsLog(unittest.TestCase):
    def test_monotone_iterations(self):
        log = MetricsLog()
        log.append(StepRecord(0, 1.0, math.nan, 1.0, math.inf, 1.0, 0, 0.0))
        with self.assertRaises(ValueError):
            log.append(StepRecord(0, 1.0, math.nan, 1.0, 0.0, 1.0, 0, 0.0))

    def test_csv_and_summary(self):
        log = MetricsLog()
        log.append(StepRecord(0, 0.1234567890123, math.nan, 2.0, math.inf, 1.0, 96, 0.5))
        log.append(StepRecord(1, 0.1, 0.75, 3.0, 0.5, 2.0, 96, 1.0))
        log.summary = {'b': 1, 'a': 2}
        with tempfile.TemporaryDirectory() as tmp:
            frame = pd.read_csv(log.write_csv(os.path.join(tmp, 'metrics.csv')), float_precision='round_trip')
            with open(log.write_summary(os.path.join(tmp, 'summary.json')), encoding='utf-8') as f:
                summary = json.load(f)
        self.assertEqual(list(frame.columns), fedsim.METRIC_COLUMNS)
        self.assertEqual(frame['loss'].iloc[0], 0.1234567890123)
        self.assertTrue(math.isnan(frame['test_acc'].iloc[0]))
        self.assertEqual(summary, {'a': 2, 'b': 1})
        self.assertEqual(log.final_test_acc, 0.75)


if __name__ == '__main__':
    unittest.main()
