import json
import logging
import os
from datetime import datetime

from results_merger import SUMMARY_FILE, SeedResultMerger

logger = logging.getLogger(__name__)


class ReportGenerator:
    """
    报告生成器类，用于把一次 train 输出目录整理成Markdown运行报告
    报告包含各实验臂的最终准确率及95%置信区间、全局批大小、通信量与缩放系数直方图
    """

    def __init__(self, output_dir):
        """
        初始化报告生成器

        参数:
            output_dir: train 命令的输出目录，需已包含合并后的 summary.json
        """
        self.output_dir = output_dir
        self.summary = None

    def load_summary(self):
        """
        读取合并后的汇总

        返回:
            dict: 汇总内容
        """
        path = os.path.join(self.output_dir, SUMMARY_FILE)
        if not os.path.exists(path):
            raise FileNotFoundError(f"未找到汇总文件：{path}，请先运行 train 命令")
        with open(path, 'r', encoding='utf-8') as f:
            self.summary = json.load(f)
        return self.summary

    def _arm_table(self):
        rows = ["| 实验臂 | H | 全局批大小 | 平均最终准确率 | 95%置信区间半宽 | 平均最终损失 | 单次运行通信字节 |",
                "|------|---|---------|------------|--------------|----------|------------|"]
        for arm in self.summary['arms']:
            s = self.summary
            rows.append(f"| {arm} | {s.get(f'{arm}_H')} | {s.get(f'{arm}_global_batch')} "
                        f"| {s[f'{arm}_acc_mean']:.4f} | {s[f'{arm}_acc_ci95']:.4f} "
                        f"| {s[f'{arm}_final_loss_mean']:.4f} | {s.get(f'{arm}_bytes_comm_total', 0)} |")
        return '\n'.join(rows)

    def _seed_table(self):
        seeds = self.summary['seeds']
        header = '| 实验臂 | ' + ' | '.join(f'seed {s}' for s in seeds) + ' |'
        rows = [header, '|' + '---|' * (len(seeds) + 1)]
        for arm in self.summary['arms']:
            accs = ['—' if a is None else f'{a:.4f}' for a in self.summary[f'{arm}_acc']]
            rows.append(f"| {arm} | " + ' | '.join(accs) + ' |')
        return '\n'.join(rows)

    def _factor_section(self):
        merger = SeedResultMerger(self.output_dir, self.summary['arms'], self.summary['seeds'])
        parts = []
        for arm in self.summary['arms']:
            factors = merger.load_factors(arm)
            if factors.empty:
                continue
            total = int(factors['count'].sum())
            lines = [f"#### {arm}", "", "| 缩放系数 | 决策数 | 占比 |", "|------|------|------|"]
            for row in factors.itertuples(index=False):
                lines.append(f"| {row.factor:g} | {int(row.count)} | {row.count / total:.2%} |")
            parts.append('\n'.join(lines))
        return '\n\n'.join(parts) if parts else '无'

    def generate_report(self, report_title=None):
        """
        生成报告

        参数:
            report_title: 报告标题，默认使用输出目录名

        返回:
            str: 报告内容
        """
        if self.summary is None:
            self.load_summary()
        title = report_title or f"联邦训练运行报告：{os.path.basename(os.path.normpath(self.output_dir))}"
        generated = datetime.now().strftime('%Y-%m-%d %H:%M:%S')

        return f"""# {title}

## 1. 基本信息

- **实验臂**：{', '.join(self.summary['arms'])}
- **种子**：{', '.join(str(s) for s in self.summary['seeds'])}

## 2. 最终测试准确率

{self._arm_table()}

置信区间采用t分布计算，种子数为1时半宽记为0。

### 2.1 各种子明细

{self._seed_table()}

## 3. 梯度缩放系数使用情况

{self._factor_section()}

---

**报告生成时间**：{generated}
"""

    def save_report(self, report_content, filename='report.md'):
        """
        保存报告到文件

        返回:
            str: 保存的文件路径
        """
        file_path = os.path.join(self.output_dir, filename)
        with open(file_path, 'w', encoding='utf-8') as f:
            f.write(report_content)
        logger.info(f"Report saved to {file_path}")
        return file_path
