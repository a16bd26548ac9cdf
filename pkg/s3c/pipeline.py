"""
图像特征提取流程：
  extract_patches -> contrast_normalize -> apply_zca -> encode_patches (E_Q[h]) -> pool_features

patch 展平顺序固定为 (行, 列, 通道)，即下标 (i * p + j) * C + c。
"""
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from io import BytesIO
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import eigh

from .errors import (
    ConfigError,
    DimensionMismatch,
    GridTooFine,
    InsufficientSamples,
    MalformedHeader,
    NonFinite,
    PatchTooLarge,
    RankDeficient,
)
from .inference import InferenceConfig, e_step
from .model import ModelParams
from .storage import StorageClient, choose_storage_client

logger = logging.getLogger(__name__)

EPS_CN_PIXEL = 10.0
EPS_CN_UNIT = 10.0 / 255.0 ** 2
EIGEN_FLOOR = 1e-12
IMAGE_MAGIC = b"S3CI"
_IMAGE_HEADER = struct.Struct("<4sIII")
IMAGE_SUFFIXES = (".png", ".s3ci")


@dataclass
class PoolingConfig:
    patch_size: int = 6
    grid: int = 3
    stride: int = 1
    eps_cn: Optional[float] = None   # None: 按数据范围自动选择

    def validate(self) -> None:
        for key in ("patch_size", "grid", "stride"):
            value = getattr(self, key)
            if value < 1:
                raise ConfigError(key, f"must be >= 1, got {value}")
        if self.eps_cn is not None and not self.eps_cn > 0:
            raise ConfigError("eps_cn", f"must be > 0, got {self.eps_cn}")


@dataclass
class WhiteningTransform:
    mean: np.ndarray     # (P,)
    zca: np.ndarray      # (P, P)，对称
    epsilon: float
    eps_cn: Optional[float] = None   # 拟合前对比度归一化用的常数，提取特征时沿用

    @property
    def P(self) -> int:
        return int(self.mean.shape[0])


def _as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DimensionMismatch("image", "H x W x C", arr.shape)
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        raise NonFinite("image", tuple(int(i) for i in bad[0]))
    return arr


def patch_grid(height: int, width: int, p: int, stride: int = 1) -> Tuple[int, int]:
    """patch 位置网格的 (行数, 列数)"""
    if p > height or p > width:
        raise PatchTooLarge(p, height, width)
    return (height - p) // stride + 1, (width - p) // stride + 1


def extract_patches(img, p: int, stride: int = 1) -> np.ndarray:
    """按行优先枚举所有 patch 位置，返回 (positions, p*p*C)"""
    arr = _as_image(img)
    H, W, C = arr.shape
    patch_grid(H, W, p, stride)
    # (H-p+1, W-p+1, C, p, p) -> 步长采样 -> (rows, cols, p, p, C)
    windows = sliding_window_view(arr, (p, p), axis=(0, 1))[::stride, ::stride]
    windows = windows.transpose(0, 1, 3, 4, 2)
    rows, cols = windows.shape[:2]
    return np.ascontiguousarray(windows.reshape(rows * cols, p * p * C))


def detect_eps_cn(patch_rows: np.ndarray) -> float:
    scale = float(np.max(np.abs(patch_rows))) if patch_rows.size else 0.0
    return EPS_CN_PIXEL if scale > 1.0 else EPS_CN_UNIT


def contrast_normalize(patch_rows, eps_cn: Optional[float] = None) -> np.ndarray:
    """逐行去均值并除以 sqrt(方差 + eps_cn)"""
    X = np.atleast_2d(np.asarray(patch_rows, dtype=np.float64))
    if eps_cn is None:
        eps_cn = detect_eps_cn(X)
        logger.info("对比度归一化: 数据尺度%s, eps_cn=%g", "为 0-255" if eps_cn == EPS_CN_PIXEL else "为 0-1", eps_cn)
    centered = X - X.mean(axis=1, keepdims=True)
    var = np.mean(centered * centered, axis=1, keepdims=True)
    return centered / np.sqrt(var + eps_cn)


def fit_zca(patch_rows, epsilon: float = 0.01) -> WhiteningTransform:
    """zca = U (Lambda + eps I)^(-1/2) U^T，协方差按总体方差估计"""
    X = np.atleast_2d(np.asarray(patch_rows, dtype=np.float64))
    M, P = X.shape
    if M < P + 1:
        raise InsufficientSamples(M, P + 1)
    if epsilon < 0:
        raise ConfigError("epsilon", f"must be >= 0, got {epsilon}")

    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / M
    eigvals, eigvecs = eigh(cov)

    n_small = int(np.sum(eigvals < EIGEN_FLOOR))
    if epsilon == 0 and n_small:
        raise RankDeficient(n_small)

    scale = 1.0 / np.sqrt(np.maximum(eigvals, 0.0) + epsilon)
    zca = (eigvecs * scale) @ eigvecs.T
    zca = 0.5 * (zca + zca.T)
    logger.info("ZCA 拟合完成: rows=%d, P=%d, epsilon=%g, 最小特征值=%.3e", M, P, epsilon, float(eigvals[0]))
    return WhiteningTransform(mean=mean, zca=zca, epsilon=float(epsilon))


def fit_whitening(patch_rows, epsilon: float = 0.01, eps_cn: Optional[float] = None) -> WhiteningTransform:
    """对比度归一化 + ZCA；记下实际使用的 eps_cn，训练与提取特征时保持同一尺度"""
    X = np.atleast_2d(np.asarray(patch_rows, dtype=np.float64))
    if eps_cn is None:
        eps_cn = detect_eps_cn(X)
    t = fit_zca(contrast_normalize(X, eps_cn), epsilon)
    t.eps_cn = float(eps_cn)
    return t


def resolve_eps_cn(configured: Optional[float], t: Optional[WhiteningTransform]) -> Optional[float]:
    """显式配置优先，其次是白化拟合时记录的值，都没有时返回 None（按数据自动选择）"""
    if configured is not None:
        return configured
    return t.eps_cn if t is not None else None


def apply_zca(t: WhiteningTransform, patch_rows) -> np.ndarray:
    X = np.atleast_2d(np.asarray(patch_rows, dtype=np.float64))
    if X.shape[1] != t.P:
        raise DimensionMismatch("patch", t.P, X.shape[1])
    return (X - t.mean) @ t.zca


def encode_patches(params: ModelParams, patch_rows, cfg: Optional[InferenceConfig] = None, workers: int = 1) -> np.ndarray:
    """每个 patch 的特征为 E_Q[h] = h_hat"""
    X = np.atleast_2d(np.asarray(patch_rows, dtype=np.float64))
    if X.shape[1] != params.D:
        raise DimensionMismatch("patch", params.D, X.shape[1])
    cfg = cfg or InferenceConfig(record_trace=False)
    state, _ = e_step(params, X, cfg, workers=workers)
    return state.h_hat


def _region_bounds(r: int, g: int) -> np.ndarray:
    # 余数分给末尾的区域
    base, rem = divmod(r, g)
    sizes = [base] * (g - rem) + [base + 1] * rem
    return np.concatenate([[0], np.cumsum(sizes)])


def pool_features(position_features, grid_shape: Union[int, Tuple[int, int]], g: int) -> np.ndarray:
    """把 rows x cols 个位置切成 g x g 个连续区域，各区域取均值后按区域行优先拼接"""
    F = np.atleast_2d(np.asarray(position_features, dtype=np.float64))
    rows, cols = (grid_shape, grid_shape) if isinstance(grid_shape, (int, np.integer)) else grid_shape
    if g < 1:
        raise ConfigError("grid", f"must be >= 1, got {g}")
    if g > rows or g > cols:
        raise GridTooFine(g, min(rows, cols))
    if F.shape[0] != rows * cols:
        raise DimensionMismatch("positions", rows * cols, F.shape[0])

    grid = F.reshape(rows, cols, F.shape[1])
    rb, cb = _region_bounds(rows, g), _region_bounds(cols, g)
    pooled = [
        grid[rb[i]:rb[i + 1], cb[j]:cb[j + 1]].mean(axis=(0, 1))
        for i in range(g)
        for j in range(g)
    ]
    return np.concatenate(pooled)


def extract_image_features(
    params: ModelParams,
    t: Optional[WhiteningTransform],
    img,
    cfg: PoolingConfig,
    inference: Optional[InferenceConfig] = None,
    workers: int = 1,
) -> np.ndarray:
    """完整流程；t 为 None 时跳过白化"""
    cfg.validate()
    arr = _as_image(img)
    rows, cols = patch_grid(arr.shape[0], arr.shape[1], cfg.patch_size, cfg.stride)
    patches = contrast_normalize(extract_patches(arr, cfg.patch_size, cfg.stride), resolve_eps_cn(cfg.eps_cn, t))
    if t is not None:
        patches = apply_zca(t, patches)
    features = encode_patches(params, patches, inference, workers=workers)
    return pool_features(features, (rows, cols), cfg.grid)


class FeatureExtractor:
    """多张图片的特征提取；每张图片独立，按线程并行，输出顺序与输入一致"""

    def __init__(
        self,
        params: ModelParams,
        whitening: Optional[WhiteningTransform],
        pooling: PoolingConfig,
        inference: Optional[InferenceConfig] = None,
        max_workers: int = 1,
        show_progress: bool = True,
    ) -> None:
        pooling.validate()
        self.params = params
        self.whitening = whitening
        self.pooling = pooling
        self.inference = inference or InferenceConfig(record_trace=False)
        self.max_workers = max(1, int(max_workers))
        self.show_progress = show_progress

        # 统计信息
        self.stats = {
            "images": 0,
            "patches": 0,
        }

    @property
    def n_features(self) -> int:
        return self.pooling.grid ** 2 * self.params.N

    def extract_one(self, img) -> np.ndarray:
        arr = _as_image(img)
        rows, cols = patch_grid(arr.shape[0], arr.shape[1], self.pooling.patch_size, self.pooling.stride)
        self.stats["patches"] += rows * cols
        return extract_image_features(self.params, self.whitening, arr, self.pooling, self.inference)

    def extract(self, images: Sequence) -> np.ndarray:
        from tqdm import tqdm

        out = np.empty((len(images), self.n_features))
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            futures = [executor.submit(self.extract_one, img) for img in images]
            with tqdm(total=len(futures), desc="🖼️ 特征提取", unit="img", leave=True,
                      disable=not self.show_progress) as pbar:
                for idx, future in enumerate(futures):
                    out[idx] = future.result()
                    self.stats["images"] += 1
                    pbar.update(1)

        logger.info("✓ 特征提取完成: %d 张图片, %d 个 patch, 特征维度 %d",
                    self.stats["images"], self.stats["patches"], self.n_features)
        return out


def decode_image(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """PNG（像素 0-255）或 S3CI 原始平面格式 -> H x W x C float64"""
    if data[:4] == IMAGE_MAGIC:
        if len(data) < _IMAGE_HEADER.size:
            raise MalformedHeader(name, "truncated S3CI header")
        _, H, W, C = _IMAGE_HEADER.unpack_from(data)
        expected = _IMAGE_HEADER.size + 4 * H * W * C
        if len(data) != expected:
            raise MalformedHeader(name, f"S3CI payload is {len(data) - _IMAGE_HEADER.size} bytes, expected {expected - _IMAGE_HEADER.size}")
        planes = np.frombuffer(data, dtype="<f4", offset=_IMAGE_HEADER.size).reshape(C, H, W)
        return _as_image(planes.transpose(1, 2, 0).astype(np.float64))

    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(BytesIO(data)) as im:
            if im.mode not in ("L", "RGB", "RGBA", "I", "F"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64)
    except UnidentifiedImageError as exc:
        raise MalformedHeader(name, "neither S3CI nor a readable image") from exc
    return _as_image(arr)


def encode_image(img) -> bytes:
    arr = _as_image(img)
    H, W, C = arr.shape
    planes = np.ascontiguousarray(arr.transpose(2, 0, 1), dtype="<f4")
    return _IMAGE_HEADER.pack(IMAGE_MAGIC, H, W, C) + planes.tobytes()


def read_image(path: str, storage: Optional[StorageClient] = None) -> np.ndarray:
    storage = storage or choose_storage_client(path)
    return decode_image(storage.read_bytes(path), name=path)


def write_image(img, path: str, storage: Optional[StorageClient] = None) -> None:
    storage = storage or choose_storage_client(path)
    storage.write_bytes(encode_image(img), path)


def list_images(path: str, storage: Optional[StorageClient] = None) -> List[str]:
    """单个图片文件，或目录下所有 .png / .s3ci（按文件名排序）"""
    storage = storage or choose_storage_client(path)
    if path.lower().endswith(IMAGE_SUFFIXES):
        return [path]
    prefix = path if path.endswith("/") else path + "/"
    files = []
    for suffix in IMAGE_SUFFIXES:
        files.extend(storage.list_files(prefix if prefix.startswith("oss://") else path, suffix))
    return sorted(files)
