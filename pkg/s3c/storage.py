import glob
import os
import posixpath
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from io import BytesIO
from typing import Dict, List, Optional

import pandas as pd


OSS_SCHEME = "oss://"


def is_oss_path(path: str) -> bool:
    return str(path).startswith(OSS_SCHEME)


def join_path(base: str, *names: str) -> str:
    if is_oss_path(base):
        return posixpath.join(base, *names)
    return os.path.join(base, *names)


class StorageClient(ABC):
    """按路径读写字节/表格；归档、矩阵、日志都经过这一层"""

    @abstractmethod
    def read_bytes(self, path: str) -> bytes:
        ...

    @abstractmethod
    def write_bytes(self, data: bytes, path: str) -> None:
        ...

    @abstractmethod
    def exists(self, path: str) -> bool:
        ...

    @abstractmethod
    def list_files(self, prefix: str, suffix: str = "") -> List[str]:
        ...

    def read_parquet(self, path: str) -> pd.DataFrame:
        return pd.read_parquet(BytesIO(self.read_bytes(path)))

    def write_parquet(self, df: pd.DataFrame, path: str) -> None:
        buf = BytesIO()
        df.to_parquet(buf, index=False)
        self.write_bytes(buf.getvalue(), path)

    def write_text(self, text: str, path: str) -> None:
        self.write_bytes(text.encode("utf-8"), path)

    def read_text(self, path: str) -> str:
        return self.read_bytes(path).decode("utf-8")


class LocalStorageClient(StorageClient):
    """本地文件系统版，便于开发调试。目录不存在时自动创建。"""

    def read_bytes(self, path: str) -> bytes:
        with open(path, "rb") as f:
            return f.read()

    def write_bytes(self, data: bytes, path: str) -> None:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "wb") as f:
            f.write(data)

    def exists(self, path: str) -> bool:
        return os.path.exists(path)

    def list_files(self, prefix: str, suffix: str = "") -> List[str]:
        # 方式1：prefix 是目录，列出目录下文件
        if os.path.isdir(prefix):
            files = sorted(glob.glob(os.path.join(prefix, f"*{suffix}")))
        # 方式2：文件名前缀模式
        else:
            files = sorted(glob.glob(f"{prefix}*{suffix}"))
        return [f for f in files if os.path.isfile(f)]


class OssStorageClient(StorageClient):
    """
    OSS 存储客户端，使用时需要安装并配置 oss2。
    环境变量示例：
      OSS_ENDPOINT, OSS_ACCESS_KEY_ID, OSS_ACCESS_KEY_SECRET, OSS_BUCKET
    路径示例: oss://bucket/path/to/model/
    """

    def __init__(self, endpoint: str, access_key_id: str, access_key_secret: str, bucket_name: str) -> None:
        try:  # 延迟导入，避免本地无依赖时报错
            import oss2
        except ImportError as exc:  # noqa: PERF203
            raise RuntimeError("oss2 is required for OSS operations, please pip install oss2") from exc

        self.oss2 = oss2
        auth = oss2.Auth(access_key_id, access_key_secret)
        self.bucket = oss2.Bucket(auth, endpoint, bucket_name)

    def _split_bucket_key(self, path: str) -> str:
        # path 形如 oss://bucket/key
        _, _, rest = path.split("/", 2)
        bucket_name, key = rest.split("/", 1)
        if bucket_name != self.bucket.bucket_name:
            raise ValueError(f"path bucket {bucket_name} not equal to client bucket {self.bucket.bucket_name}")
        return key

    def read_bytes(self, path: str) -> bytes:
        key = self._split_bucket_key(path)
        # 需要把流完整读成 bytes
        return self.bucket.get_object(key).read()

    def write_bytes(self, data: bytes, path: str) -> None:
        self.bucket.put_object(self._split_bucket_key(path), data)

    def exists(self, path: str) -> bool:
        return bool(self.bucket.object_exists(self._split_bucket_key(path)))

    def list_files(self, prefix: str, suffix: str = "") -> List[str]:
        key_prefix = self._split_bucket_key(prefix)
        return sorted(
            f"{OSS_SCHEME}{self.bucket.bucket_name}/{obj.key}"
            for obj in self.bucket.list_objects(prefix=key_prefix).object_list
            if obj.key.endswith(suffix)
        )


@dataclass
class OssConfig:
    """OSS配置"""
    endpoint: str
    access_key_id: str
    access_key_secret: str
    bucket_name: str

    @classmethod
    def from_env(cls) -> "OssConfig":
        """从环境变量读取OSS配置"""
        return cls(
            endpoint=os.getenv("OSS_ENDPOINT", ""),
            access_key_id=os.getenv("OSS_ACCESS_KEY_ID", ""),
            access_key_secret=os.getenv("OSS_ACCESS_KEY_SECRET", ""),
            bucket_name=os.getenv("OSS_BUCKET", ""),
        )

    def validate(self) -> None:
        """验证配置是否完整"""
        if not all([self.endpoint, self.access_key_id, self.access_key_secret, self.bucket_name]):
            raise ValueError("OSS配置不完整，请检查环境变量：OSS_ENDPOINT, OSS_ACCESS_KEY_ID, OSS_ACCESS_KEY_SECRET, OSS_BUCKET")

    def to_kwargs(self) -> Dict[str, str]:
        return asdict(self)


def choose_storage_client(path: str = "", oss_kwargs: Optional[dict] = None) -> StorageClient:
    """oss:// 路径返回 OSS 客户端（配置来自参数或环境变量），否则本地"""
    if not is_oss_path(path):
        return LocalStorageClient()
    oss = OssConfig(**oss_kwargs) if oss_kwargs else OssConfig.from_env()
    oss.validate()
    return OssStorageClient(**oss.to_kwargs())
