# render_report.py
# 结果输出：report.json（完整结果）与 report.txt（指标为行、模型为列的对比表）
import json
import logging
import os
from typing import Dict, List, Optional

from lodfm.evaluation import SIGNIFICANCE_LEVEL, MetricReport, metric_names

logger = logging.getLogger(__name__)

SIGNIFICANT_MARK = "*"


def dumps_json(data: object) -> str:
    """键排序、固定缩进，相同结果总是得到逐字节相同的文本"""
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_json(path: str, data: object) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_json(data))
    return path


def relative_improvement(value: float, base: float) -> Optional[float]:
    """相对基线的提升百分比；基线为 0 时无定义"""
    if base == 0:
        return None
    return 100.0 * (value - base) / base


def format_table(result) -> str:
    """
    指标为行、模型（或特征集合 / m）为列。
    有显著性基线时，p < 0.01 的单元格标 *，并在括号中给出相对基线的提升。
    """
    columns: List[str] = result.columns
    n_values = result.reports[columns[0]].n_values
    names = metric_names(n_values)

    cells: Dict[str, List[str]] = {}
    for name in names:
        row = []
        for col in columns:
            value = result.reports[col].means[name]
            text = f"{value:.4f}"
            if result.baseline and col != result.baseline:
                p = result.significance.get(col, {}).get(name)
                if p is not None and p < SIGNIFICANCE_LEVEL:
                    text += SIGNIFICANT_MARK
                gain = relative_improvement(value, result.reports[result.baseline].means[name])
                if gain is not None:
                    text += f" ({gain:+.1f}%)"
            row.append(text)
        cells[name] = row

    metric_width = max(len("Metric"), *(len(n) for n in names))
    widths = [max(len(col), *(len(cells[n][k]) for n in names)) for k, col in enumerate(columns)]
    lines = ["  ".join(["Metric".ljust(metric_width)] + [col.rjust(w) for col, w in zip(columns, widths)])]
    lines.append("-" * len(lines[0]))
    for name in names:
        lines.append("  ".join([name.ljust(metric_width)] + [c.rjust(w) for c, w in zip(cells[name], widths)]))

    notes = []
    if result.baseline:
        notes.append(f"{SIGNIFICANT_MARK} p < {SIGNIFICANCE_LEVEL}（bootstrap 配对 t 检验，基线 {result.baseline}）；括号内为相对基线的提升")
    split = result.meta.get("split", {})
    if split:
        notes.append(f"切分: {split.get('strategy')}，seed={split.get('seed')}；候选: {result.meta.get('candidates')}")
    if result.replication:
        for model, deltas in result.replication.get("deltas", {}).items():
            shown = ", ".join(f"{k} {v:+.4f}" for k, v in deltas.items())
            notes.append(f"与参考结果的差值 [{model}]: {shown}")
    return "\n".join(lines + [""] + notes) + "\n"


def write_metric_report(report: MetricReport, output_dir: str) -> str:
    """单个模型完成后立即落盘，整体运行中途失败时已完成的结果不丢失"""
    path = os.path.join(output_dir, "runs", f"{report.model_id}.json")
    write_json(path, report.to_dict())
    logger.debug(f"[{report.model_id}] 结果已保存: {path}")
    return path


def write_result(result, output_dir: str) -> Dict[str, str]:
    paths = {
        "json": write_json(os.path.join(output_dir, "report.json"), result.to_dict()),
        "text": os.path.join(output_dir, "report.txt"),
    }
    with open(paths["text"], "w", encoding="utf-8", newline="\n") as f:
        f.write(format_table(result))
    logger.info(f"结果已保存: {paths['json']}, {paths['text']}")
    return paths
