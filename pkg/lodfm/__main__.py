#!/usr/bin/env python
import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from lodfm.config import MODEL_NAMES, ExperimentConfig, load_config
from lodfm.errors import ConfigError, LodfmError
from lodfm.experiment import (
    run_ablation,
    run_comparison,
    run_dim_sweep,
    run_evaluation,
    run_training,
)
from lodfm.feature_structure import format_feature_sets
from lodfm.fm_model import save_checkpoint
from lodfm.lod_information import fetch_all, load_item_uris, save_knowledge
from lodfm.ratings_data import binarize_and_stats, load_item_mapping, load_ratings
from lodfm.render_report import format_table, write_json, write_metric_report, write_result
from lodfm.render_series import render_loss_curve, render_sweep_figure, write_losses_csv, write_series_csv

logger = logging.getLogger("lodfm")


def _common_arguments() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="TOML config file")
    common.add_argument("--ratings", help="Ratings file (user::item::rating::timestamp)")
    common.add_argument("--mapping", help="Item to DBpedia URI mapping (TSV)")
    common.add_argument("--features", help="LOD feature sets, e.g. po,pr or none")
    common.add_argument("--m", help="Latent dimensionality (sweep: comma separated list)")
    common.add_argument("--bprmf-m", type=int, help="Latent dimensionality of bprmf")
    common.add_argument("--k", type=int, help="Neighbourhood size for knn")
    common.add_argument("--seed", type=int, help="Split seed")
    common.add_argument("--candidates", choices=["all", "test-only"], help="Candidate protocol")
    common.add_argument("-o", "--output", help="Output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lodfm", description="LOD-feature factorization machines for top-N recommendation")
    common = _common_arguments()
    sub = parser.add_subparsers(dest="command", required=True)

    fetch = sub.add_parser("fetch-features", parents=[common], help="Fetch PO/SP/PR knowledge from the SPARQL endpoint")
    fetch.add_argument("--items", help="Item URI file, one URI per line (default: all mapped items)")
    fetch.add_argument("--endpoint", help="SPARQL endpoint URL")
    fetch.add_argument("--cache", help="Cache directory for query results and knowledge.json")
    fetch.add_argument("--sets", help="Feature sets to fetch, same as --features")

    train = sub.add_parser("train", parents=[common], help="Train the LOD FM with early stopping and save a checkpoint")
    train.add_argument("--model", default="lodfm", choices=["lodfm"])

    evaluate = sub.add_parser("evaluate", parents=[common], help="Evaluate one model")
    evaluate.add_argument("--model", required=True, choices=MODEL_NAMES)
    evaluate.add_argument("--checkpoint", help="Checkpoint written by `lodfm train` (lodfm only)")

    compare = sub.add_parser("compare", parents=[common], help="Compare models on one split")
    compare.add_argument("--models", help=f"Comma separated subset of {','.join(MODEL_NAMES)}")
    compare.add_argument("--significance", help="Baseline model for the bootstrap t-test ('none' to skip)")
    compare.add_argument("--replication", action="store_true", help="Log deltas against the reference MovieLens-1M results")

    sub.add_parser("ablate", parents=[common], help="Compare LOD feature set combinations at fixed m")
    sub.add_parser("sweep", parents=[common], help="Sweep the latent dimensionality m")
    sub.add_parser("stats", parents=[common], help="Print dataset statistics")
    return parser


def _int_list(text: str, name: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{name} 必须是逗号分隔的整数: {text!r}") from None


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides: Dict[str, Any] = {
        "data.ratings": args.ratings,
        "data.mapping": args.mapping,
        "data.split_seed": args.seed,
        "features.sets": getattr(args, "sets", None) or args.features,
        "features.cache_dir": getattr(args, "cache", None),
        "training.bprmf.m": args.bprmf_m,
        "model.knn_k": args.k,
        "evaluation.candidates": args.candidates,
        "output.dir": args.output,
    }
    if args.m is not None:
        values = _int_list(args.m, "--m")
        if args.command == "sweep":
            overrides["model.sweep_m"] = values
        elif len(values) != 1:
            raise ConfigError("只有 sweep 子命令接受多个 m")
        elif getattr(args, "model", None) == "bprmf":
            # evaluate --model bprmf 时 --m 指 BPRMF 的维度
            overrides["training.bprmf.m"] = values[0]
        else:
            overrides["training.m"] = values[0]
    if getattr(args, "models", None):
        overrides["model.models"] = [m.strip() for m in args.models.split(",") if m.strip()]
    if getattr(args, "significance", None):
        overrides["evaluation.significance_baseline"] = "" if args.significance == "none" else args.significance
    if getattr(args, "replication", False):
        overrides["evaluation.replication"] = True
    if getattr(args, "endpoint", None):
        overrides["sparql.endpoint"] = args.endpoint
    return load_config(args.config, overrides)


def cmd_fetch_features(config: ExperimentConfig, args: argparse.Namespace) -> None:
    # 给出 --items 时映射文件可选；没有映射时以 URI 作为物品 id
    mapping: Dict[str, str] = {}
    if not args.items or os.path.exists(config.mapping_path):
        mapping = load_item_mapping(config.mapping_path)
    uri_to_item = {uri: item for item, uri in sorted(mapping.items())}
    uris = load_item_uris(args.items) if args.items else sorted(uri_to_item)
    sets = config.feature_sets
    if not sets:
        raise ConfigError("fetch-features 需要至少一个特征集合（--sets po,sp,pr）")
    print(f"正在获取 {len(uris)} 个物品的 {format_feature_sets(sets)} 特征: {config.sparql.endpoint}")
    knowledge, report = fetch_all(uris, config.sparql, sets, item_ids=uri_to_item)
    save_knowledge(config.knowledge_path, knowledge, sets)
    write_json(os.path.join(config.cache_dir, "fetch_report.json"), report.to_dict())
    print(f"完成: 成功 {len(knowledge)}，失败 {len(report.failed_items)}，缓存命中 {report.cache_hits}")


def cmd_train(config: ExperimentConfig, args: argparse.Namespace) -> None:
    recommender, _ = run_training(config)
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    index = recommender.builder.index
    index.save(os.path.join(out, "feature_index.tsv"))
    save_checkpoint(recommender.model, os.path.join(out, "model.npz"), index)
    report = recommender.report.to_dict()
    write_json(os.path.join(out, "train_report.json"), {**report, "hyperparams": config.fm.to_dict()})
    write_losses_csv(report, os.path.join(out, "losses.csv"))
    render_loss_curve(report, os.path.join(out, "loss_curve.png"))
    print(f"训练完成: E={report['retrain_epochs']}，最终训练损失 {report['final_train_loss']:.6f}，输出目录 {out}")


def cmd_evaluate(config: ExperimentConfig, args: argparse.Namespace) -> None:
    result = run_evaluation(config, args.model, args.checkpoint)
    write_result(result, config.output_dir)
    print(format_table(result), end="")


def _persist(config: ExperimentConfig):
    return lambda column, report: write_metric_report(report, config.output_dir)


def cmd_compare(config: ExperimentConfig, args: argparse.Namespace) -> None:
    result = run_comparison(config, on_report=_persist(config))
    write_result(result, config.output_dir)
    print(format_table(result), end="")


def cmd_ablate(config: ExperimentConfig, args: argparse.Namespace) -> None:
    result = run_ablation(config, on_report=_persist(config))
    write_result(result, config.output_dir)
    print(format_table(result), end="")


def cmd_sweep(config: ExperimentConfig, args: argparse.Namespace) -> None:
    result = run_dim_sweep(config, on_report=_persist(config))
    write_result(result, config.output_dir)
    write_series_csv(result.series, os.path.join(config.output_dir, "series.csv"))
    render_sweep_figure(result.series, os.path.join(config.output_dir, "sweep.png"))
    print(format_table(result), end="")


def cmd_stats(config: ExperimentConfig, args: argparse.Namespace) -> None:
    _, stats = binarize_and_stats(load_ratings(config.ratings_path), load_item_mapping(config.mapping_path))
    print(stats.format_table())


COMMANDS = {
    "fetch-features": cmd_fetch_features,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "stats": cmd_stats,
}


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = config_from_args(args)
        logger.debug(f"配置: {config}")
        COMMANDS[args.command](config, args)
    except LodfmError as e:
        sys.stderr.write(f"错误: {e}\n")
        return 1
    except KeyboardInterrupt:
        return 130
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
