"""
持久化格式（全部小端、按位可复现）：

  模型归档 = 目录：manifest.json + 每个张量一个 .s3ct 文件
    .s3ct: magic "S3CT" | u8 rank | u32 dims[rank] | f64 行优先数据
  数据矩阵 .s3cd: magic "S3CD" | u32 rows | u32 cols | f64 行优先数据
  另外支持 CSV 导入（自动识别表头）与 Parquet 导出（可选 float32）。
"""
import json
import logging
import struct
from dataclasses import dataclass
from io import StringIO
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from .classify import LinearModel
from .errors import CorruptArchive, DimensionMismatch, MalformedHeader, RaggedRows, VersionMismatch
from .model import ModelParams, validate_params
from .pipeline import WhiteningTransform
from .storage import StorageClient, choose_storage_client, join_path

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CREATED_BY = "s3c 1.0"
MANIFEST_NAME = "manifest.json"
TENSOR_MAGIC = b"S3CT"
MATRIX_MAGIC = b"S3CD"
_MATRIX_HEADER = struct.Struct("<4sII")
MODEL_TENSORS = ("W", "b", "mu", "alpha", "beta")


@dataclass
class ModelArchive:
    params: ModelParams
    whitening: Optional[WhiteningTransform] = None
    classifier: Optional[LinearModel] = None


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    header = TENSOR_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def decode_tensor(data: bytes, name: str) -> np.ndarray:
    if len(data) < 5 or data[:4] != TENSOR_MAGIC:
        raise CorruptArchive(name, "bad magic")
    rank = data[4]
    offset = 5 + 4 * rank
    if len(data) < offset:
        raise CorruptArchive(name, "truncated header")
    shape = struct.unpack_from(f"<{rank}I", data, 5)
    expected = offset + 8 * int(np.prod(shape, dtype=np.int64))
    if len(data) != expected:
        raise CorruptArchive(name, f"payload is {len(data) - offset} bytes, expected {expected - offset}")
    return np.frombuffer(data, dtype="<f8", offset=offset).astype(np.float64).reshape(shape)


def _tensors_of(archive: ModelArchive) -> Dict[str, np.ndarray]:
    p = archive.params
    tensors = {"W": p.W, "b": p.b, "mu": p.mu, "alpha": p.alpha, "beta": p.beta}
    if archive.whitening is not None:
        tensors["whitening_mean"] = archive.whitening.mean
        tensors["whitening_zca"] = archive.whitening.zca
    if archive.classifier is not None:
        c = archive.classifier
        tensors.update(
            classifier_weights=c.weights,
            classifier_bias=c.bias,
            classifier_mean=c.feature_mean,
            classifier_std=c.feature_std,
        )
    return tensors


def _manifest_of(archive: ModelArchive, tensors: Dict[str, np.ndarray]) -> Dict:
    p = archive.params
    manifest = {
        "format_version": FORMAT_VERSION,
        "created_by": CREATED_BY,
        "dims": {"D": p.D, "N": p.N},
        "beta_tied": bool(p.beta_tied),
        "tensors": {name: {"file": f"{name}.s3ct", "shape": list(np.shape(arr))} for name, arr in tensors.items()},
        "whitening": {"present": archive.whitening is not None},
        "classifier": {"present": archive.classifier is not None},
    }
    if archive.whitening is not None:
        manifest["whitening"]["epsilon"] = archive.whitening.epsilon
        manifest["whitening"]["eps_cn"] = archive.whitening.eps_cn
    if archive.classifier is not None:
        manifest["classifier"].update(
            {"lambda": archive.classifier.lam, "n_classes": archive.classifier.n_classes,
             "n_features": archive.classifier.n_features}
        )
    return manifest


def save_model(archive: ModelArchive, path: str, storage: Optional[StorageClient] = None) -> None:
    storage = storage or choose_storage_client(path)
    tensors = _tensors_of(archive)
    manifest = _manifest_of(archive, tensors)
    for name, arr in tensors.items():
        storage.write_bytes(encode_tensor(arr), join_path(path, manifest["tensors"][name]["file"]))
    storage.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", join_path(path, MANIFEST_NAME))
    logger.info("模型已保存: %s (D=%d, N=%d, 张量 %d 个)", path, archive.params.D, archive.params.N, len(tensors))


def _read_manifest(path: str, storage: StorageClient) -> Dict:
    manifest_path = join_path(path, MANIFEST_NAME)
    if not storage.exists(manifest_path):
        raise CorruptArchive(MANIFEST_NAME, f"missing under {path}")
    try:
        manifest = json.loads(storage.read_text(manifest_path))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArchive(MANIFEST_NAME, f"unreadable: {exc}") from exc
    if not isinstance(manifest, dict):
        raise CorruptArchive(MANIFEST_NAME, f"expected a JSON object, got {type(manifest).__name__}")
    found = manifest.get("format_version")
    if found != FORMAT_VERSION:
        raise VersionMismatch(found, FORMAT_VERSION)
    return manifest


def _require(doc: Dict, *keys: str):
    """按路径取 manifest 字段，缺失或类型不对时报 CorruptArchive(manifest.json)"""
    value = doc
    for depth, key in enumerate(keys):
        if not isinstance(value, dict) or key not in value:
            raise CorruptArchive(MANIFEST_NAME, f"missing key {'.'.join(keys[: depth + 1])!r}")
        value = value[key]
    return value


def _read_tensors(path: str, manifest: Dict, storage: StorageClient, required) -> Dict[str, np.ndarray]:
    entries = _require(manifest, "tensors")
    if not isinstance(entries, dict):
        raise CorruptArchive(MANIFEST_NAME, "'tensors' must be an object")
    for name in required:
        _require(manifest, "tensors", name)

    tensors: Dict[str, np.ndarray] = {}
    for name in entries:
        file_name = _require(manifest, "tensors", name, "file")
        shape = _require(manifest, "tensors", name, "shape")
        file_path = join_path(path, file_name)
        if not storage.exists(file_path):
            raise CorruptArchive(file_name, "missing")
        arr = decode_tensor(storage.read_bytes(file_path), file_name)
        if list(arr.shape) != list(shape):
            raise DimensionMismatch(file_name, tuple(shape), arr.shape)
        tensors[name] = arr
    return tensors


def load_model(path: str, storage: Optional[StorageClient] = None) -> ModelArchive:
    storage = storage or choose_storage_client(path)
    manifest = _read_manifest(path, storage)

    whitening_present = bool(_require(manifest, "whitening", "present"))
    classifier_present = bool(_require(manifest, "classifier", "present"))
    required = list(MODEL_TENSORS)
    if whitening_present:
        required += ["whitening_mean", "whitening_zca"]
    if classifier_present:
        required += ["classifier_weights", "classifier_bias", "classifier_mean", "classifier_std"]
    tensors = _read_tensors(path, manifest, storage, required)

    D, N = _require(manifest, "dims", "D"), _require(manifest, "dims", "N")
    if tensors["W"].shape != (D, N):
        raise DimensionMismatch("W.s3ct", (D, N), tensors["W"].shape)
    params = ModelParams(
        W=tensors["W"], b=tensors["b"], mu=tensors["mu"], alpha=tensors["alpha"], beta=tensors["beta"],
        beta_tied=bool(_require(manifest, "beta_tied")),
    )
    validate_params(params)

    whitening = None
    if whitening_present:
        whitening = WhiteningTransform(
            mean=tensors["whitening_mean"],
            zca=tensors["whitening_zca"],
            epsilon=_require(manifest, "whitening", "epsilon"),
            eps_cn=manifest["whitening"].get("eps_cn"),
        )
    classifier = None
    if classifier_present:
        classifier = LinearModel(
            weights=tensors["classifier_weights"],
            bias=tensors["classifier_bias"],
            lam=_require(manifest, "classifier", "lambda"),
            feature_mean=tensors["classifier_mean"],
            feature_std=tensors["classifier_std"],
        )
    logger.info("模型已加载: %s (D=%d, N=%d, 白化=%s, 分类器=%s)", path, D, N, whitening is not None, classifier is not None)
    return ModelArchive(params=params, whitening=whitening, classifier=classifier)


def save_whitening(t: WhiteningTransform, path: str, storage: Optional[StorageClient] = None) -> None:
    """单独的白化归档：与模型归档同格式，只含白化张量"""
    storage = storage or choose_storage_client(path)
    manifest = {
        "format_version": FORMAT_VERSION,
        "created_by": CREATED_BY,
        "kind": "whitening",
        "epsilon": t.epsilon,
        "eps_cn": t.eps_cn,
        "tensors": {
            "mean": {"file": "whitening_mean.s3ct", "shape": list(t.mean.shape)},
            "zca": {"file": "whitening_zca.s3ct", "shape": list(t.zca.shape)},
        },
    }
    storage.write_bytes(encode_tensor(t.mean), join_path(path, "whitening_mean.s3ct"))
    storage.write_bytes(encode_tensor(t.zca), join_path(path, "whitening_zca.s3ct"))
    storage.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", join_path(path, MANIFEST_NAME))


def load_whitening(path: str, storage: Optional[StorageClient] = None) -> WhiteningTransform:
    storage = storage or choose_storage_client(path)
    manifest = _read_manifest(path, storage)
    arrays = _read_tensors(path, manifest, storage, ["mean", "zca"])
    return WhiteningTransform(
        mean=arrays["mean"], zca=arrays["zca"], epsilon=_require(manifest, "epsilon"), eps_cn=manifest.get("eps_cn")
    )


def encode_matrix(X) -> bytes:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.ndim != 2:
        raise DimensionMismatch("matrix", "rows x cols", X.shape)
    return _MATRIX_HEADER.pack(MATRIX_MAGIC, X.shape[0], X.shape[1]) + np.ascontiguousarray(X, dtype="<f8").tobytes()


def decode_matrix(data: bytes, name: str) -> np.ndarray:
    if len(data) < _MATRIX_HEADER.size:
        raise MalformedHeader(name, "truncated S3CD header")
    magic, rows, cols = _MATRIX_HEADER.unpack_from(data)
    if magic != MATRIX_MAGIC:
        raise MalformedHeader(name, "bad magic")
    expected = _MATRIX_HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise MalformedHeader(name, f"payload is {len(data) - _MATRIX_HEADER.size} bytes, expected {expected - _MATRIX_HEADER.size}")
    return np.frombuffer(data, dtype="<f8", offset=_MATRIX_HEADER.size).astype(np.float64).reshape(rows, cols)


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def parse_csv(text: str, name: str) -> np.ndarray:
    """数值 CSV；首行若不全是数字则视为表头。先逐行检查字段数，再交给 pandas 解析"""
    lines = [(idx, line) for idx, line in enumerate(text.splitlines(), start=1) if line.strip()]
    if not lines:
        raise MalformedHeader(name, "empty file")
    first_fields = [f.strip() for f in lines[0][1].split(",")]
    has_header = not all(_is_number(f) for f in first_fields)
    expected = len(first_fields)
    for line_no, line in lines[1:]:
        got = len(line.split(","))
        if got != expected:
            raise RaggedRows(line_no, expected, got)
    if has_header and len(lines) == 1:
        return np.zeros((0, expected))
    try:
        df = pd.read_csv(StringIO(text), header=0 if has_header else None, skip_blank_lines=True,
                         float_precision="round_trip")
        return df.apply(pd.to_numeric).to_numpy(dtype=np.float64)
    except ValueError as exc:
        raise MalformedHeader(name, f"non-numeric value: {exc}") from exc


def save_matrix(X, path: str, storage: Optional[StorageClient] = None, float32: bool = False) -> None:
    """按后缀选择格式：.parquet / .csv，其余写 S3CD"""
    storage = storage or choose_storage_client(path)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    lower = path.lower()
    if lower.endswith(".parquet"):
        df = pd.DataFrame(X.astype(np.float32) if float32 else X, columns=[f"f{j}" for j in range(X.shape[1])])
        storage.write_parquet(df, path)
    elif lower.endswith(".csv"):
        storage.write_text(pd.DataFrame(X).to_csv(index=False, header=False, float_format="%.17g"), path)
    else:
        storage.write_bytes(encode_matrix(X), path)
    logger.debug("矩阵已写出: %s (%d x %d)", path, X.shape[0], X.shape[1])


def load_matrix(path: str, storage: Optional[StorageClient] = None) -> np.ndarray:
    storage = storage or choose_storage_client(path)
    data = storage.read_bytes(path)
    if not data:
        raise MalformedHeader(path, "empty file")
    if data[:4] == MATRIX_MAGIC:
        return decode_matrix(data, path)
    if path.lower().endswith(".parquet"):
        return storage.read_parquet(path).to_numpy(dtype=np.float64)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedHeader(path, "neither S3CD nor UTF-8 CSV") from exc
    return parse_csv(text, path)


def load_labels(path: str, storage: Optional[StorageClient] = None) -> np.ndarray:
    """标签矩阵：单列整数"""
    Y = load_matrix(path, storage)
    if Y.shape[1] != 1:
        raise DimensionMismatch("labels", "1 column", Y.shape[1])
    return Y[:, 0].astype(np.int64)


def write_records(df: pd.DataFrame, path: str, storage: Optional[StorageClient] = None) -> None:
    """DataFrame -> JSON lines（训练日志、推断 trace）"""
    storage = storage or choose_storage_client(path)
    text = df.to_json(orient="records", lines=True)
    storage.write_text(text if text.endswith("\n") or not text else text + "\n", path)


def read_records(path: str, storage: Optional[StorageClient] = None) -> pd.DataFrame:
    storage = storage or choose_storage_client(path)
    return pd.read_json(StringIO(storage.read_text(path)), orient="records", lines=True)


def archive_files(path: str, storage: Optional[StorageClient] = None) -> Tuple[str, ...]:
    storage = storage or choose_storage_client(path)
    return tuple(storage.list_files(path))
