#!/usr/bin/env python3
"""
S3C 命令行入口：训练、采样、推断、白化、特征提取、分类、精确后验校验
支持本地路径和 oss:// 路径

退出码：0 成功；1 输入/配置校验失败；2 数值发散
"""
import argparse
import logging
import os
import sys
import time
from datetime import datetime
from typing import List, Optional

import numpy as np
import pandas as pd

from config import RunConfig, RuntimeConfig
from s3c.archive import (
    ModelArchive,
    load_labels,
    load_matrix,
    load_model,
    load_whitening,
    save_matrix,
    save_model,
    save_whitening,
    write_records,
)
from s3c.classify import accuracy, select_lambda, svm_predict, svm_train
from s3c.errors import S3CError
from s3c.inference import e_step, elbo, sparsity_fraction
from s3c.learning import S3CTrainer
from s3c.model import sample_ancestral
from s3c.oracle import exact_posterior, kl_q_to_exact
from s3c.pipeline import (
    FeatureExtractor,
    apply_zca,
    contrast_normalize,
    fit_whitening,
    list_images,
    read_image,
    resolve_eps_cn,
)
from s3c.storage import StorageClient, choose_storage_client, join_path

logger = logging.getLogger("s3c_cli")

EFFECTIVE_CONFIG = "effective_config.json"


class CliArgumentParser(argparse.ArgumentParser):
    """参数错误时输出一行诊断并以校验失败退出（1），不用 argparse 默认的 2"""

    def error(self, message: str) -> None:
        print(f'error=UsageError prog="{self.prog}" message="{message}"', file=sys.stderr)
        sys.exit(1)


def setup_logging(log_dir: Optional[str] = None) -> None:
    """
    配置日志系统
    始终输出到控制台；给出 log_dir 时同时写文件
    """
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    log_filename = ""
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        log_filename = os.path.join(log_dir, f"s3c_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log")
        handlers.insert(0, logging.FileHandler(log_filename, encoding="utf-8"))

    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s",
        handlers=handlers,
    )

    # 过滤第三方库的详细日志，避免刷屏
    logging.getLogger("PIL").setLevel(logging.WARNING)
    logging.getLogger("oss2").setLevel(logging.WARNING)

    if log_filename:
        logger.info("=" * 80)
        logger.info("日志文件: %s", log_filename)
        logger.info("=" * 80)


def make_storage(path: str) -> StorageClient:
    """oss:// 路径按环境变量（OssConfig.from_env）构造客户端，其余走本地"""
    return choose_storage_client(path)


def load_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config, make_storage(args.config)) if args.config else RunConfig()
    return cfg.with_overrides(seed=getattr(args, "seed", None))


def write_effective_config(cfg: RunConfig, out: str, is_dir: bool) -> None:
    path = join_path(out, EFFECTIVE_CONFIG) if is_dir else f"{out}.config.json"
    cfg.to_file(path, make_storage(path))


def cmd_train(args: argparse.Namespace, cfg: RunConfig, workers: int) -> None:
    cfg = cfg.with_overrides(data_path=args.data, out_path=args.out)
    data = load_matrix(args.data, make_storage(args.data))

    whitening = None
    if args.whitening:
        whitening = load_whitening(args.whitening, make_storage(args.whitening))
        eps_cn = resolve_eps_cn(cfg.eps_cn, whitening)
        data = apply_zca(whitening, contrast_normalize(data, eps_cn))
        logger.info("训练数据已按 %s 做对比度归一化 (eps_cn=%s) + ZCA 白化", args.whitening, eps_cn)

    init = load_model(args.init, make_storage(args.init)).params if args.init else cfg.init_spec()
    trainer = S3CTrainer(cfg.train_config(), workers=workers, show_progress=not args.quiet)
    params = trainer.fit(data, init)

    storage = make_storage(args.out)
    save_model(ModelArchive(params=params, whitening=whitening), args.out, storage)
    write_records(trainer.training_log(), join_path(args.out, "training_log.jsonl"), storage)
    write_effective_config(cfg, args.out, is_dir=True)


def cmd_sample(args: argparse.Namespace, cfg: RunConfig, workers: int) -> None:
    cfg = cfg.with_overrides(model_path=args.model, out_path=args.out)
    archive = load_model(args.model, make_storage(args.model))
    V, _, _ = sample_ancestral(archive.params, args.seed, args.n)
    save_matrix(V, args.out, make_storage(args.out))
    write_effective_config(cfg, args.out, is_dir=False)
    logger.info("✓ 采样完成: %d 个样本 -> %s", args.n, args.out)


def cmd_infer(args: argparse.Namespace, cfg: RunConfig, workers: int) -> None:
    cfg = cfg.with_overrides(model_path=args.model, data_path=args.data, out_path=args.out)
    archive = load_model(args.model, make_storage(args.model))
    data = load_matrix(args.data, make_storage(args.data))

    state, trace = e_step(archive.params, data, cfg.inference_config(record_trace=args.trace), workers=workers)
    storage = make_storage(args.out)
    save_matrix(state.h_hat, args.out, storage)
    if args.trace:
        write_records(trace.to_frame(), f"{args.out}.trace.jsonl", storage)
        logger.info("trace: 初始 ELBO %.6f -> 最终 ELBO %.6f, 单样本下降 %d 次",
                    trace.elbo[0], trace.elbo[-1], trace.total_violations)
    write_effective_config(cfg, args.out, is_dir=False)
    logger.info("✓ 推断完成: %d 个样本, 稀疏度 %.4f", state.M, sparsity_fraction(state.h_hat))


def cmd_fit_whitening(args: argparse.Namespace, cfg: RunConfig, workers: int) -> None:
    epsilon = args.epsilon if args.epsilon is not None else cfg.whitening_epsilon
    cfg = cfg.with_overrides(whitening_epsilon=epsilon, data_path=args.patches, out_path=args.out)
    patches = load_matrix(args.patches, make_storage(args.patches))
    t = fit_whitening(patches, epsilon, cfg.eps_cn)
    logger.info("白化拟合完成: epsilon=%g, eps_cn=%g", epsilon, t.eps_cn)
    save_whitening(t, args.out, make_storage(args.out))
    write_effective_config(cfg, args.out, is_dir=True)


def cmd_extract_features(args: argparse.Namespace, cfg: RunConfig, workers: int) -> None:
    cfg = cfg.with_overrides(model_path=args.model, data_path=args.images, out_path=args.out)
    archive = load_model(args.model, make_storage(args.model))
    image_storage = make_storage(args.images)
    paths = list_images(args.images, image_storage)
    if not paths:
        raise FileNotFoundError(f"no .png/.s3ci images under {args.images}")
    images = [read_image(p, image_storage) for p in paths]
    logger.info("读取图片 %d 张", len(images))

    extractor = FeatureExtractor(
        archive.params,
        archive.whitening,
        cfg.pooling_config(),
        cfg.inference_config(record_trace=False),
        max_workers=workers,
        show_progress=not args.quiet,
    )
    features = extractor.extract(images)
    save_matrix(features, args.out, make_storage(args.out), float32=args.float32)
    write_effective_config(cfg, args.out, is_dir=False)


def cmd_classify_train(args: argparse.Namespace, cfg: RunConfig, workers: int) -> None:
    cfg = cfg.with_overrides(model_path=args.model, data_path=args.features, out_path=args.out)
    archive = load_model(args.model, make_storage(args.model))
    X = load_matrix(args.features, make_storage(args.features))
    y = load_labels(args.labels, make_storage(args.labels))
    n_classes = int(y.max()) + 1
    storage = make_storage(args.out)

    lam = cfg.svm_lambda
    if lam is None:
        order = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed))).permutation(X.shape[0])
        n_val = max(1, int(round(cfg.val_fraction * X.shape[0])))
        val, train = order[:n_val], order[n_val:]
        lam, report = select_lambda(X[train], y[train], X[val], y[val], cfg.svm_lambdas, cfg.svm_epochs, cfg.seed)
        write_records(report, join_path(args.out, "lambda_selection.jsonl"), storage)
        logger.info("选定 lambda=%g", lam)

    classifier = svm_train(X, y, lam, epochs=cfg.svm_epochs, seed=cfg.seed, n_classes=n_classes)
    logger.info("训练集准确率: %.4f", accuracy(svm_predict(classifier, X), y))
    save_model(ModelArchive(archive.params, archive.whitening, classifier), args.out, storage)
    write_effective_config(cfg.with_overrides(svm_lambda=lam), args.out, is_dir=True)


def cmd_classify_predict(args: argparse.Namespace, cfg: RunConfig, workers: int) -> None:
    cfg = cfg.with_overrides(model_path=args.model, data_path=args.features, out_path=args.out)
    archive = load_model(args.model, make_storage(args.model))
    if archive.classifier is None:
        raise FileNotFoundError(f"model archive {args.model} has no classifier, run `classify train` first")
    X = load_matrix(args.features, make_storage(args.features))
    predictions = svm_predict(archive.classifier, X)
    save_matrix(predictions[:, None].astype(np.float64), args.out, make_storage(args.out))
    if args.labels:
        y = load_labels(args.labels, make_storage(args.labels))
        logger.info("测试准确率: %.4f", accuracy(predictions, y))
    write_effective_config(cfg, args.out, is_dir=False)


def cmd_oracle(args: argparse.Namespace, cfg: RunConfig, workers: int) -> None:
    cfg = cfg.with_overrides(model_path=args.model, data_path=args.data, out_path=args.out)
    params = load_model(args.model, make_storage(args.model)).params
    data = load_matrix(args.data, make_storage(args.data))
    if data.shape[0]:
        exact_posterior(params, data[0])   # N > 14 时在 E 步之前就报错

    state, _ = e_step(params, data, cfg.inference_config(record_trace=False), workers=workers)
    rows = []
    for i, v in enumerate(data):
        posterior = exact_posterior(params, v)
        h_hat, s_hat = state.row(i)
        rows.append(
            {
                "index": i,
                "log_evidence": posterior.log_evidence,
                "elbo": float(elbo(params, v, h_hat, s_hat)),
                "kl": kl_q_to_exact(params, v, h_hat, s_hat),
                "max_abs_marginal_error": float(np.max(np.abs(posterior.marginal_h() - h_hat))),
            }
        )
    report = pd.DataFrame(rows)

    logger.info("=" * 80)
    logger.info("精确后验校验: %d 个样本, N=%d", len(report), params.N)
    if len(report):
        logger.info("  - 平均 log p(v): %.6f", report["log_evidence"].mean())
        logger.info("  - 平均 ELBO: %.6f", report["elbo"].mean())
        logger.info("  - 平均 KL(Q||P): %.3e, 最大 %.3e", report["kl"].mean(), report["kl"].max())
        logger.info("  - 边缘 p(h=1|v) 最大误差: %.3e", report["max_abs_marginal_error"].max())
    logger.info("=" * 80)
    if args.out:
        write_records(report, args.out, make_storage(args.out))
        write_effective_config(cfg, args.out, is_dir=False)


def build_parser() -> argparse.ArgumentParser:
    parser = CliArgumentParser(
        description="S3C 尖峰-平板稀疏编码工具",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例:
  python s3c_cli.py fit-whitening --patches patches.s3cd --epsilon 0.01 --out ./whiten
  python s3c_cli.py train --config run.json --data patches.s3cd --whitening ./whiten --out ./model
  python s3c_cli.py infer --model ./model --data test.s3cd --out h.s3cd --trace
  python s3c_cli.py extract-features --model ./model --images ./images --out features.parquet
        """,
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="", help="运行配置 JSON（扁平 key/value）")
    common.add_argument("--workers", type=int, default=None, help="线程数，默认读环境变量 S3C_WORKERS，再默认 CPU 核数")
    common.add_argument("--log-dir", default="", help="日志目录，不给则只输出到控制台")
    common.add_argument("--quiet", action="store_true", help="关闭进度条")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="变分 EM 训练")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="模型归档目录")
    p.add_argument("--whitening", default="", help="fit-whitening 输出目录，给出时先白化训练数据")
    p.add_argument("--init", default="", help="从已有模型归档继续训练")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="祖先采样")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("infer", parents=[common], help="E 步推断，输出 E_Q[h]")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", action="store_true", help="写出逐迭代 ELBO/稀疏度到 <out>.trace.jsonl")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("extract-features", parents=[common], help="图片 -> 池化特征")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True, help="图片文件或目录（.png / .s3ci）")
    p.add_argument("--out", required=True, help=".parquet 输出时可配合 --float32")
    p.add_argument("--float32", action="store_true")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("fit-whitening", parents=[common], help="对比度归一化 + 拟合 ZCA")
    p.add_argument("--patches", required=True)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_whitening)

    p = sub.add_parser("classify", help="线性 SVM")
    classify_sub = p.add_subparsers(dest="classify_command", required=True)
    cp = classify_sub.add_parser("train", parents=[common])
    cp.add_argument("--model", required=True)
    cp.add_argument("--features", required=True)
    cp.add_argument("--labels", required=True)
    cp.add_argument("--out", required=True, help="写出带分类器的新模型归档")
    cp.add_argument("--seed", type=int, default=None)
    cp.set_defaults(func=cmd_classify_train)
    cp = classify_sub.add_parser("predict", parents=[common])
    cp.add_argument("--model", required=True)
    cp.add_argument("--features", required=True)
    cp.add_argument("--out", required=True)
    cp.add_argument("--labels", default="", help="给出时报告准确率")
    cp.set_defaults(func=cmd_classify_predict)

    p = sub.add_parser("oracle", parents=[common], help="精确后验对照（N <= 14）")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="", help="报告 JSON lines")
    p.set_defaults(func=cmd_oracle)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # --help 为 0，参数错误为 1
        return int(exc.code or 0)
    setup_logging(args.log_dir or None)
    start = time.time()
    try:
        runtime = RuntimeConfig.from_env(args.workers)
        cfg = load_run_config(args)
        args.func(args, cfg, runtime.workers)
    except S3CError as exc:
        logger.error("%s 失败: %s", args.command, exc)
        print(exc.diagnostic(), file=sys.stderr)
        return exc.exit_code
    except (OSError, RuntimeError, ValueError) as exc:
        logger.error("%s 失败: %s", args.command, exc)
        print(f'error={type(exc).__name__} message="{str(exc)}"', file=sys.stderr)
        return 1
    logger.info("✓ %s 完成，耗时 %.2f 秒", args.command, time.time() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
