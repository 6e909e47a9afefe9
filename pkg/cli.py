#!/usr/bin/env python3
"""
fedbatch 命令行入口
子命令：train、profile、plan、sweep-compression、estimate-noise、batch-sweep、report
退出码：0 成功，1 运行失败，2 配置错误，3 规划不可行

用法:
    python cli.py train presets/sync_mode_label_skew.yaml --out results/sync_mode_label_skew
    python cli.py profile presets/profile_toy.yaml --batches 8 32 128 512 --reps 5
    python cli.py plan presets/profile_toy.yaml --profile results/profile.csv --budget 2e6
    python cli.py report results/sync_mode_label_skew
"""

import argparse
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import List, Optional

import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

import datagen
import nncore
from compress import compression_noise_sweep
from experiment_config import (ConfigError, ExperimentConfig, build_cost_model, build_dataset, build_init_params,
                               build_memory_model, build_model_spec, build_partition_spec, build_sync_policy,
                               build_train_config, load_config, resolve_arms)
from fedsim import SyncPolicy, TrainConfig, run_federated
from gradmod import NormMatchingMapper, estimate_gamma, factor_histogram
from perfmodel import InfeasibleError, fits_from_profile, plan_report, profile, write_profile_csv
from report_generator import ReportGenerator
from results_merger import FACTORS_FILE, METRICS_FILE, SUMMARY_FILE, SeedResultMerger, mean_confidence, seed_dir

logger = logging.getLogger('fedbatch')
console = Console()

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
LOG_FILE = 'fedbatch.log'
MAX_WORKERS_ENV = 'FEDBATCH_MAX_WORKERS'


def setup_logging(output_dir: str, level: str = 'INFO'):
    """配置日志：输出目录下的文件日志 + 控制台 RichHandler"""
    os.makedirs(output_dir, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(os.path.join(output_dir, LOG_FILE), encoding='utf-8'),
            RichHandler(console=console, show_path=False),
        ],
        force=True,
    )


def _close_file_handlers():
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, logging.FileHandler):
            handler.close()
            root.removeHandler(handler)


def max_workers(n_jobs: int, requested: Optional[int] = None) -> int:
    """工作进程数：命令行参数优先，其次环境变量，默认CPU核数"""
    if requested is None:
        raw = os.environ.get(MAX_WORKERS_ENV)
        if raw:
            try:
                requested = int(raw)
            except ValueError as e:
                raise ConfigError(f"{MAX_WORKERS_ENV}: 必须为正整数，当前为 {raw!r}") from e
    if requested is not None and requested < 1:
        raise ConfigError(f"{MAX_WORKERS_ENV}: 必须为正整数，当前为 {requested}")
    cap = requested if requested is not None else (os.cpu_count() or 1)
    return max(1, min(cap, n_jobs))


def _output_dir(args, config: ExperimentConfig) -> str:
    return args.out or config.output_dir


def run_single(config: ExperimentConfig, arm_name: str, seed: int, output_dir: str) -> dict:
    """
    执行一个 (实验臂, 种子) 组合并写出 metrics.csv、summary.json、factors.csv
    顶层函数，供进程池调用
    """
    arm = {a.name: a for a in resolve_arms(config)}[arm_name]
    train_ds, test_ds = build_dataset(config, seed)
    spec = build_model_spec(config, train_ds)
    shards = datagen.partition(train_ds, build_partition_spec(arm, seed))
    sync = build_sync_policy(arm, shards)
    cfg = build_train_config(arm, seed, build_cost_model(config, spec))
    init = build_init_params(arm, spec, train_ds, seed)
    log = run_federated(spec, train_ds, shards, sync, cfg, test_ds, init=init)

    run_dir = seed_dir(output_dir, arm_name, seed)
    os.makedirs(run_dir, exist_ok=True)
    log.write_csv(os.path.join(run_dir, METRICS_FILE))
    log.write_summary(os.path.join(run_dir, SUMMARY_FILE))
    factor_histogram(log).to_csv(os.path.join(run_dir, FACTORS_FILE), index=False, float_format='%.17g')
    return {'arm': arm_name, 'seed': seed, 'final_test_acc': log.summary['final_test_acc']}


def cmd_train(args) -> int:
    config = load_config(args.config)
    out = _output_dir(args, config)
    setup_logging(out, args.log_level)
    arms = [a.name for a in resolve_arms(config)]
    jobs = [(arm, seed) for arm in arms for seed in config.seeds]
    workers = max_workers(len(jobs), args.workers)
    logger.info(f"Training '{config.name}': {len(arms)} arms x {len(config.seeds)} seeds on {workers} workers")

    if workers == 1:
        for arm, seed in jobs:
            run_single(config, arm, seed, out)
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = {executor.submit(run_single, config, arm, seed, out): (arm, seed) for arm, seed in jobs}
            for future in as_completed(futures):
                result = future.result()
                logger.info(f"Finished arm={result['arm']} seed={result['seed']}: "
                            f"final accuracy {result['final_test_acc']}")

    _, summary = SeedResultMerger(out, arms, config.seeds).merge_all()
    table = Table(title=f"{config.name}: final test accuracy")
    table.add_column('arm')
    table.add_column('mean', justify='right')
    table.add_column('95% CI ±', justify='right')
    table.add_column('per seed', justify='left')
    for arm in arms:
        accs = ', '.join('—' if a is None else f'{a:.3f}' for a in summary[f'{arm}_acc'])
        table.add_row(arm, f"{summary[f'{arm}_acc_mean']:.4f}", f"{summary[f'{arm}_acc_ci95']:.4f}", accs)
    console.print(table)
    return EXIT_OK


def cmd_profile(args) -> int:
    config = load_config(args.config)
    out = _output_dir(args, config)
    setup_logging(out, args.log_level)
    seed = config.seeds[0]
    train_ds, _ = build_dataset(config, seed)
    spec = build_model_spec(config, train_ds)
    batches = args.batches or config.perf.profile_batches
    reps = args.reps or config.perf.reps
    samples = profile(spec, train_ds, batches, reps, seed)
    path = args.profile_out or os.path.join(out, 'profile.csv')
    write_profile_csv(samples, path)

    table = Table(title=f"Profile of {spec.layer_widths} ({reps} reps, median)")
    for col in ('b', 't_c [s]', 't_mov [s]', 'm_batch [B]'):
        table.add_column(col, justify='right')
    for s in samples:
        table.add_row(str(s.b), f'{s.t_c:.6f}', f'{s.t_mov:.6f}', f'{s.m_batch:.0f}')
    console.print(table)
    logger.info(f"Profile written to {path}")

    held_out = config.perf.validate_batch
    if held_out and held_out not in batches and held_out <= train_ds.size and len(samples) >= 2:
        fit_tc = fits_from_profile(samples)[0]
        measured = profile(spec, train_ds, [held_out], reps, seed)[0].t_c
        predicted = max(0.0, fit_tc.predict(held_out))
        error = abs(measured - predicted) / predicted if predicted > 0 else float('inf')
        logger.info(f"Held-out b={held_out}: measured t_c={measured:.6f}s, predicted {predicted:.6f}s, "
                    f"relative error {error:.1%}")
    return EXIT_OK


def cmd_plan(args) -> int:
    config = load_config(args.config)
    out = _output_dir(args, config)
    setup_logging(out, args.log_level)
    profile_csv = args.profile or config.perf.profile_csv
    if not profile_csv:
        raise ConfigError("perf.profile_csv: 需要通过 --profile 或配置提供剖析文件")
    budget = args.budget if args.budget is not None else config.perf.budget
    if budget is None:
        raise ConfigError("perf.budget: 需要通过 --budget 或配置提供内存预算")

    train_ds, _ = build_dataset(config, config.seeds[0])
    spec = build_model_spec(config, train_ds)
    D = args.D or train_ds.size
    cost_model = build_cost_model(config, spec, profile_csv)
    memory_model = build_memory_model(config, spec, profile_csv)
    report = plan_report(cost_model, memory_model, D, budget, args.candidates or config.perf.candidates)

    path = args.plan_out or os.path.join(out, 'plan.json')
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(report, f, indent=2)

    table = Table(title=f"Batch-size plan (D={D}, budget={budget:.0f} bytes)")
    for col in ('b', 'iterations', 'epoch time [s]', 'memory [B]', 'feasible'):
        table.add_column(col, justify='right')
    for row in report['epoch_time_table']:
        epoch = '—' if row['epoch_time'] is None else f"{row['epoch_time']:.6f}"
        table.add_row(str(row['b']), str(row['iterations']), epoch, f"{row['total_memory']:.0f}", str(row['feasible']))
    console.print(table)
    if not report['feasible']:
        logger.error(f"No feasible batch size within {budget} bytes")
        return EXIT_INFEASIBLE
    console.print(f"b_max = {report['b_max']}, b_opt = {report['b_opt']}")
    return EXIT_OK


def cmd_sweep_compression(args) -> int:
    config = load_config(args.config)
    out = _output_dir(args, config)
    setup_logging(out, args.log_level)
    seed = config.seeds[0]
    sweep = config.compression_sweep
    train_ds, _ = build_dataset(config, seed)
    spec = build_model_spec(config, train_ds)
    frame = compression_noise_sweep(spec, train_ds, sweep.batch_sizes, sweep.ratio, sweep.trials, seed,
                                    pretrain_steps=sweep.pretrain_steps, pretrain_lr=sweep.pretrain_lr)
    path = os.path.join(out, 'compression_sweep.csv')
    frame.to_csv(path, index=False, float_format='%.17g')

    table = Table(title=f"Relative top-k residual (ratio={sweep.ratio})")
    for col in frame.columns:
        table.add_column(col, justify='right')
    for row in frame.itertuples(index=False):
        table.add_row(str(row.b), f'{row.ratio:g}', f'{row.rel_residual_mean:.4f}', f'{row.rel_residual_p50:.4f}')
    console.print(table)
    return EXIT_OK


def cmd_estimate_noise(args) -> int:
    config = load_config(args.config)
    out = _output_dir(args, config)
    setup_logging(out, args.log_level)
    seed = config.seeds[0]
    noise = config.noise
    train_ds, _ = build_dataset(config, seed)
    spec = build_model_spec(config, train_ds)
    params = nncore.pretrain(spec, train_ds, seed, noise.pretrain_steps, noise.pretrain_lr)

    rows = []
    for b_small in noise.b_small:
        estimate = estimate_gamma(spec, params, train_ds, b_small, noise.b_large, noise.trials, seed, noise.draw)
        mapper = NormMatchingMapper.from_estimate(estimate)
        rows.append({
            'b_small': b_small,
            'b_large': noise.b_large,
            'trials': noise.trials,
            'mean_gamma_norm': estimate.mean_gamma_norm,
            'mean_small_sq': estimate.mean_small_sq,
            'mean_large_sq': estimate.mean_large_sq,
            'norm_matching_factor': mapper.factor,
        })
    frame = pd.DataFrame(rows)
    path = os.path.join(out, 'noise.csv')
    frame.to_csv(path, index=False, float_format='%.17g')

    table = Table(title=f"Gradient noise against b_large={noise.b_large} ({noise.trials} trials)")
    for col in ('b_small', 'mean ||gamma||', 'norm-matching X'):
        table.add_column(col, justify='right')
    for row in rows:
        table.add_row(str(row['b_small']), f"{row['mean_gamma_norm']:.5f}", f"{row['norm_matching_factor']:.3f}")
    console.print(table)
    return EXIT_OK


def cmd_batch_sweep(args) -> int:
    """
    单机训练在相同迭代数下的最终准确率随批大小的变化（大批量泛化差距）
    """
    config = load_config(args.config)
    out = _output_dir(args, config)
    setup_logging(out, args.log_level)
    arm = resolve_arms(config)[0]
    sweep = config.batch_sweep
    rows = []
    for b in sweep.batch_sizes:
        for seed in config.seeds:
            train_ds, test_ds = build_dataset(config, seed)
            spec = build_model_spec(config, train_ds)
            shards = datagen.partition_iid(train_ds, 1, seed)
            cfg = TrainConfig(
                lr=sweep.lr or arm.train.lr,
                local_batch=b,
                total_iterations=sweep.total_iterations or arm.train.total_iterations,
                eval_every=arm.train.eval_every,
                seed=seed,
            )
            log = run_federated(spec, train_ds, shards, SyncPolicy(1, 'centralized', 'params'), cfg, test_ds)
            rows.append({'b': b, 'seed': seed, 'final_test_acc': log.summary['final_test_acc'],
                         'final_loss': log.summary['final_loss']})
    frame = pd.DataFrame(rows)
    frame.to_csv(os.path.join(out, 'batch_sweep.csv'), index=False, float_format='%.17g')

    table = Table(title='Final test accuracy vs batch size (equal iterations)')
    for col in ('b', 'mean', '95% CI ±'):
        table.add_column(col, justify='right')
    for b, group in frame.groupby('b', sort=True):
        mean, half_width = mean_confidence(group['final_test_acc'].tolist())
        table.add_row(str(b), f'{mean:.4f}', f'{half_width:.4f}')
    console.print(table)
    return EXIT_OK


def cmd_report(args) -> int:
    setup_logging(args.output_dir, args.log_level)
    generator = ReportGenerator(args.output_dir)
    path = generator.save_report(generator.generate_report(args.title))
    console.print(f"Report written to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='fedbatch', description='联邦训练仿真与批大小规划工具')
    parser.add_argument('--log-level', default='INFO', help='日志级别，默认INFO')
    sub = parser.add_subparsers(dest='command', required=True)

    def with_config(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument('config', help='YAML实验配置文件')
        p.add_argument('--out', default=None, help='输出目录，默认取配置中的 output_dir')
        p.set_defaults(handler=handler)
        return p

    p = with_config('train', cmd_train, '按配置运行全部实验臂与种子')
    p.add_argument('--workers', type=int, default=None, help=f'并行进程数上限，也可用环境变量 {MAX_WORKERS_ENV}')

    p = with_config('profile', cmd_profile, '实测不同批大小的计算与数据搬运耗时')
    p.add_argument('--batches', type=int, nargs='+', default=None)
    p.add_argument('--reps', type=int, default=None)
    p.add_argument('--profile-out', default=None, help='剖析CSV路径，默认 <out>/profile.csv')

    p = with_config('plan', cmd_plan, '根据剖析结果规划批大小')
    p.add_argument('--profile', default=None, help='剖析CSV路径')
    p.add_argument('--budget', type=float, default=None, help='内存预算（字节）')
    p.add_argument('--D', type=int, default=None, help='数据集大小，默认取训练集大小')
    p.add_argument('--candidates', type=int, nargs='+', default=None)
    p.add_argument('--plan-out', default=None, help='规划JSON路径，默认 <out>/plan.json')

    with_config('sweep-compression', cmd_sweep_compression, '批大小与top-k压缩残差的关系')
    with_config('estimate-noise', cmd_estimate_noise, '估计不同小批量相对大批量的梯度噪声')
    with_config('batch-sweep', cmd_batch_sweep, '相同迭代数下准确率随批大小的变化')

    p = sub.add_parser('report', help='为 train 输出目录生成Markdown报告')
    p.add_argument('output_dir')
    p.add_argument('--title', default=None)
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        console.print(f"[red]配置错误[/red]：{e}")
        return EXIT_CONFIG
    except InfeasibleError as e:
        logger.error(f"Infeasible plan: {e}")
        return EXIT_INFEASIBLE
    except Exception as e:
        logger.error(f"Command '{args.command}' failed: {e}\n{traceback.format_exc()}")
        return EXIT_FAILURE
    finally:
        _close_file_handlers()


if __name__ == '__main__':
    sys.exit(main())
