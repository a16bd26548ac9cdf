"""
统一的异常定义。
所有异常都能输出单行、可机器解析的诊断信息（CLI 写到 stderr）。
"""
from typing import Any, Dict, Optional


class S3CError(Exception):
    """所有库内异常的基类"""

    exit_code = 1

    def __init__(self, message: str = "", **fields: Any) -> None:
        self.fields: Dict[str, Any] = fields
        super().__init__(message or self._default_message())

    def _default_message(self) -> str:
        return ", ".join(f"{k}={v}" for k, v in self.fields.items())

    def diagnostic(self) -> str:
        parts = [f"error={type(self).__name__}"]
        for key, value in self.fields.items():
            parts.append(f"{key}={_quote(value)}")
        parts.append(f"message={_quote(str(self))}")
        return " ".join(parts)


def _quote(value: Any) -> str:
    text = str(value).replace("\n", " ")
    if " " in text or "=" in text or not text:
        return '"' + text.replace('"', "'") + '"'
    return text


class ValidationError(S3CError, ValueError):
    pass


class NonUnitColumn(ValidationError):
    def __init__(self, column: int, norm: float) -> None:
        self.column = column
        super().__init__(f"W column {column} has norm {norm!r}, expected 1", column=column, norm=norm)


class NonPositivePrecision(ValidationError):
    def __init__(self, kind: str, index: int, value: float) -> None:
        self.kind = kind
        self.index = index
        super().__init__(f"{kind}[{index}] = {value!r} must be > 0", kind=kind, index=index)


class NonFinite(ValidationError):
    def __init__(self, kind: str, index: Any) -> None:
        self.kind = kind
        self.index = index
        super().__init__(f"{kind} has a non-finite entry at {index}", kind=kind, index=index)


class DimensionMismatch(ValidationError):
    def __init__(self, what: str, expected: Any, got: Any) -> None:
        super().__init__(f"{what}: expected {expected}, got {got}", what=what, expected=expected, got=got)


class TooManyUnits(ValidationError):
    def __init__(self, n_units: int, limit: int) -> None:
        self.n_units = n_units
        super().__init__(f"exact enumeration needs N <= {limit}, got N={n_units}", n_units=n_units, limit=limit)


class ZeroColumn(ValidationError):
    def __init__(self, column: int) -> None:
        self.column = column
        super().__init__(f"W column {column} collapsed to zero norm", column=column)


class PatchTooLarge(ValidationError):
    def __init__(self, patch_size: int, height: int, width: int) -> None:
        super().__init__(
            f"patch size {patch_size} exceeds image {height}x{width}",
            patch_size=patch_size,
            height=height,
            width=width,
        )


class GridTooFine(ValidationError):
    def __init__(self, grid: int, positions: int) -> None:
        super().__init__(f"pooling grid {grid} exceeds {positions} patch positions", grid=grid, positions=positions)


class RankDeficient(ValidationError):
    def __init__(self, n_small: int) -> None:
        super().__init__(f"{n_small} covariance eigenvalues below 1e-12 with epsilon=0", n_small=n_small)


class InsufficientSamples(ValidationError):
    def __init__(self, rows: int, needed: int) -> None:
        super().__init__(f"need at least {needed} rows, got {rows}", rows=rows, needed=needed)


class EmptyDataset(ValidationError):
    def __init__(self, what: str = "dataset") -> None:
        super().__init__(f"{what} is empty", what=what)


class LabelOutOfRange(ValidationError):
    def __init__(self, label: int, n_classes: int) -> None:
        super().__init__(f"label {label} outside 0..{n_classes - 1}", label=label, n_classes=n_classes)


class CorruptArchive(ValidationError):
    def __init__(self, file: str, reason: str) -> None:
        self.file = file
        super().__init__(f"{file}: {reason}", file=file)


class VersionMismatch(ValidationError):
    def __init__(self, found: Any, expected: Any) -> None:
        self.found = found
        self.expected = expected
        super().__init__(f"archive format version {found}, this build reads {expected}", found=found, expected=expected)


class MalformedHeader(ValidationError):
    def __init__(self, path: str, reason: str) -> None:
        super().__init__(f"{path}: {reason}", path=path)


class RaggedRows(ValidationError):
    def __init__(self, line: int, expected: int, got: int) -> None:
        self.line = line
        super().__init__(f"line {line} has {got} fields, expected {expected}", line=line, expected=expected, got=got)


class ConfigError(ValidationError):
    def __init__(self, key: str, reason: str) -> None:
        self.key = key
        super().__init__(f"{key}: {reason}", key=key)


class NumericalDivergence(S3CError, ArithmeticError):
    """推断/学习中出现非有限值，通常意味着阻尼或裁剪配置不当"""

    exit_code = 2

    def __init__(self, iteration: int, unit: int, step: Optional[int] = None) -> None:
        self.iteration = iteration
        self.unit = unit
        self.step = step
        fields: Dict[str, Any] = {"iteration": iteration, "unit": unit}
        if step is not None:
            fields["step"] = step
        super().__init__(f"non-finite value at iteration {iteration}, unit {unit}", **fields)

    def at_step(self, step: int) -> "NumericalDivergence":
        return NumericalDivergence(self.iteration, self.unit, step=step)
