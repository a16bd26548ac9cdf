#!/usr/bin/env python3
"""
生成演示/测试用的合成数据：
  1. 随机稀疏真值模型 + 从它采样的训练/测试矩阵（用于字典恢复、稀疏度实验）
  2. 两类（或多类）条纹图片 + 标签 + 从图片里随机截取的 patch（用于完整特征提取流程）
"""
import argparse
import logging
import os

import numpy as np

from s3c.archive import ModelArchive, save_matrix, save_model
from s3c.learning import RandomInitSpec, random_init
from s3c.model import sample_ancestral
from s3c.pipeline import extract_patches, write_image

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
)
logger = logging.getLogger(__name__)


def make_ground_truth(n_visible: int, n_units: int, sparsity: float, seed: int):
    """真值模型：随机单位列字典，mu=2, alpha=4, beta=10（信噪比足够高，便于恢复）"""
    base = random_init(RandomInitSpec(n_units=n_units, target_sparsity=sparsity, seed=seed), n_visible)
    return base.with_updates(mu=np.full(n_units, 2.0), alpha=np.full(n_units, 4.0), beta=np.full(n_visible, 10.0))


def make_stripe_image(rng: np.random.Generator, label: int, n_classes: int, size: int) -> np.ndarray:
    """类别 k 的条纹方向为 k * pi / n_classes，像素范围 0-255"""
    theta = np.pi * label / n_classes
    freq = rng.uniform(0.5, 1.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    wave = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    img = 127.5 + 100.0 * wave + rng.normal(0.0, 10.0, size=(size, size))
    return np.clip(img, 0.0, 255.0)[:, :, None]


def main() -> None:
    parser = argparse.ArgumentParser(description="生成 S3C 合成数据")
    parser.add_argument("--out-dir", default="./data/synthetic")
    parser.add_argument("--patch-size", type=int, default=6)
    parser.add_argument("--n-units", type=int, default=16)
    parser.add_argument("--sparsity", type=float, default=0.05)
    parser.add_argument("--n-train", type=int, default=5000)
    parser.add_argument("--n-test", type=int, default=1000)
    parser.add_argument("--n-images", type=int, default=60)
    parser.add_argument("--image-size", type=int, default=16)
    parser.add_argument("--n-classes", type=int, default=2)
    parser.add_argument("--patches-per-image", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    os.makedirs(args.out_dir, exist_ok=True)
    n_visible = args.patch_size ** 2

    logger.info("=" * 80)
    logger.info("生成真值模型: D=%d, N=%d, sigmoid(b)=%.3f", n_visible, args.n_units, args.sparsity)
    truth = make_ground_truth(n_visible, args.n_units, args.sparsity, args.seed)
    save_model(ModelArchive(params=truth), os.path.join(args.out_dir, "ground_truth"))
    V_train, _, _ = sample_ancestral(truth, args.seed + 1, args.n_train)
    V_test, _, _ = sample_ancestral(truth, args.seed + 2, args.n_test)
    save_matrix(V_train, os.path.join(args.out_dir, "train.s3cd"))
    save_matrix(V_test, os.path.join(args.out_dir, "test.s3cd"))

    logger.info("生成条纹图片: %d 张, %d 类, %dx%d", args.n_images, args.n_classes, args.image_size, args.image_size)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(args.seed + 3)))
    image_dir = os.path.join(args.out_dir, "images")
    labels = np.arange(args.n_images) % args.n_classes
    patches = []
    for idx, label in enumerate(labels):
        img = make_stripe_image(rng, int(label), args.n_classes, args.image_size)
        write_image(img, os.path.join(image_dir, f"img_{idx:04d}.s3ci"))
        rows = extract_patches(img, args.patch_size)
        pick = rng.choice(rows.shape[0], size=min(args.patches_per_image, rows.shape[0]), replace=False)
        patches.append(rows[np.sort(pick)])
    save_matrix(labels[:, None].astype(np.float64), os.path.join(args.out_dir, "labels.csv"))
    save_matrix(np.concatenate(patches), os.path.join(args.out_dir, "patches.s3cd"))

    logger.info("✓ 合成数据已写入 %s", args.out_dir)
    logger.info("=" * 80)


if __name__ == "__main__":
    main()
