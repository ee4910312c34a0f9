# render_series.py
# 画图用的数据序列（series.csv / losses.csv）与 matplotlib 静态图
import csv
import logging
import os
from typing import Dict, List, Sequence

import matplotlib

from lodfm.errors import DegenerateInputError

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)


def write_series_csv(rows: Sequence[Dict], path: str) -> str:
    """列顺序取第一行的键顺序（m 在最前）"""
    if not rows:
        raise DegenerateInputError("序列为空")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fields = list(rows[0])
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return path


def _n_values(rows: Sequence[Dict], prefix: str) -> List[int]:
    return sorted(int(k.split("@")[1]) for k in rows[0] if k.startswith(prefix + "@"))


def render_sweep_figure(rows: Sequence[Dict], output_path: str, dpi: int = 150) -> str:
    """
    四个子图：MRR；nDCG@N 与 P@N（P@1 与 nDCG@1 相同，不画）；MAP；R@N。横轴为 m。
    """
    plt.rcParams["font.sans-serif"] = ["DejaVu Sans"]
    m_values = [row["m"] for row in rows]
    fig, axes = plt.subplots(2, 2, figsize=(11, 8), dpi=dpi)

    ax = axes[0][0]
    ax.plot(m_values, [row["MRR"] for row in rows], marker="o")
    ax.set_title("MRR")

    ax = axes[0][1]
    for n in _n_values(rows, "nDCG"):
        ax.plot(m_values, [row[f"nDCG@{n}"] for row in rows], marker="o", label=f"nDCG@{n}")
    for n in _n_values(rows, "P"):
        if n == 1:
            continue
        ax.plot(m_values, [row[f"P@{n}"] for row in rows], marker="s", linestyle="--", label=f"P@{n}")
    ax.set_title("nDCG@N / P@N")
    ax.legend(fontsize=8)

    ax = axes[1][0]
    ax.plot(m_values, [row["MAP"] for row in rows], marker="o")
    ax.set_title("MAP")

    ax = axes[1][1]
    for n in _n_values(rows, "R"):
        ax.plot(m_values, [row[f"R@{n}"] for row in rows], marker="o", label=f"R@{n}")
    ax.set_title("R@N")
    ax.legend(fontsize=8)

    for ax in axes.ravel():
        ax.set_xlabel("m")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    os.makedirs(os.path.dirname(output_path) or ".", exist_ok=True)
    fig.savefig(output_path, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"维度扫描图已保存: {output_path}")
    return output_path


def write_losses_csv(train_report: Dict, path: str) -> str:
    """phase 为 early-stopping（内部训练 + 验证）或 retrain（完整训练分区）"""
    rows = []
    for k, (train, val) in enumerate(zip(train_report["train_losses"], train_report["validation_losses"]), start=1):
        rows.append({"phase": "early-stopping", "epoch": k, "train_loss": train, "validation_loss": val})
    for k, train in enumerate(train_report["retrain_losses"], start=1):
        rows.append({"phase": "retrain", "epoch": k, "train_loss": train, "validation_loss": ""})
    return write_series_csv(rows, path)


def render_loss_curve(train_report: Dict, output_path: str, dpi: int = 150) -> str:
    plt.rcParams["font.sans-serif"] = ["DejaVu Sans"]
    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=dpi)
    epochs = range(1, len(train_report["train_losses"]) + 1)
    ax.plot(epochs, train_report["train_losses"], marker="o", label="train (inner)")
    ax.plot(epochs, train_report["validation_losses"], marker="o", label="validation")
    if train_report["retrain_losses"]:
        ax.plot(
            range(1, len(train_report["retrain_losses"]) + 1),
            train_report["retrain_losses"],
            marker="x",
            linestyle="--",
            label="retrain (full)",
        )
    if train_report.get("stopped_epoch"):
        ax.axvline(train_report["stopped_epoch"], color="grey", linestyle=":", label=f"E={train_report['stopped_epoch']}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean BPR loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    os.makedirs(os.path.dirname(output_path) or ".", exist_ok=True)
    fig.savefig(output_path, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"损失曲线已保存: {output_path}")
    return output_path
