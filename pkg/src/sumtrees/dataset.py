"""Tabular ingestion, one-hot expansion, missingness dummies, folds and synthetic data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MISSING_MARKERS = frozenset({"", "na", "nan"})

REGRESSION = "regression"
CLASSIFICATION = "classification"


class DataError(ValueError):
    """Raised for malformed input tables or frames."""


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_MARKERS


def _as_float(cell: str) -> float | None:
    try:
        return float(cell)
    except ValueError:
        return None


@dataclass
class RawTable:
    """Typed predictor columns plus a response, before any expansion.

    Continuous columns are float arrays with NaN for missing cells.
    Categorical columns are object arrays holding level strings or None.
    """

    columns: dict[str, np.ndarray]
    levels: dict[str, list[str]]
    response_name: str
    response: np.ndarray
    task: str = REGRESSION
    positive_level: str | None = None
    response_levels: list[str] | None = None

    def __post_init__(self) -> None:
        if len(self.response) < 1:
            raise DataError("table has no rows")
        for name, col in self.columns.items():
            if len(col) != len(self.response):
                raise DataError(f"column {name!r} has {len(col)} rows, expected {len(self.response)}")
            if name in self.levels:
                allowed = set(self.levels[name])
                bad = {v for v in col if v is not None and v not in allowed}
                if bad:
                    raise DataError(f"column {name!r} has values outside its level set: {sorted(bad)}")

    @property
    def n(self) -> int:
        return len(self.response)

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def is_categorical(self, name: str) -> bool:
        return name in self.levels

    def missing_mask(self, name: str) -> np.ndarray:
        col = self.columns[name]
        if self.is_categorical(name):
            return np.array([v is None for v in col], dtype=bool)
        return np.isnan(col)

    def has_missing(self) -> bool:
        return any(self.missing_mask(c).any() for c in self.columns)

    def select_rows(self, rows: np.ndarray) -> "RawTable":
        rows = np.asarray(rows)
        return RawTable(
            columns={k: v[rows] for k, v in self.columns.items()},
            levels={k: list(v) for k, v in self.levels.items()},
            response_name=self.response_name,
            response=self.response[rows],
            task=self.task,
            positive_level=self.positive_level,
            response_levels=self.response_levels,
        )

    def drop_missing(self) -> "RawTable":
        """Complete-case subset; factor level sets shrink to what remains observed."""
        keep = np.ones(self.n, dtype=bool)
        for name in self.columns:
            keep &= ~self.missing_mask(name)
        out = self.select_rows(np.flatnonzero(keep))
        for name in out.levels:
            seen = {v for v in out.columns[name] if v is not None}
            out.levels[name] = [lv for lv in out.levels[name] if lv in seen]
        return out


def table_from_columns(
    columns: Mapping[str, Sequence],
    response_name: str,
    response: Sequence,
    positive_level: str | None = None,
    task: str | None = None,
) -> RawTable:
    """Build a RawTable from in-memory columns using the same typing rules as ``load_csv``."""
    as_text = {k: ["" if v is None or (isinstance(v, float) and math.isnan(v)) else str(v) for v in col]
               for k, col in columns.items()}
    resp = ["" if v is None or (isinstance(v, float) and math.isnan(v)) else str(v) for v in response]
    return _build_table(as_text, response_name, resp, positive_level, task)


def load_csv(
    path: str | Path,
    response_column: str,
    positive_level: str | None = None,
    task: str | None = None,
) -> RawTable:
    """Read a headered UTF-8 CSV into a RawTable.

    A column is categorical iff any non-missing cell fails to parse as a
    number. The response must be fully observed. A non-numeric response with
    two levels (or ``task="classification"``) yields a classification table.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader if r]
    except (OSError, UnicodeDecodeError, StopIteration) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        raise DataError("duplicate column names in header")
    if response_column not in header:
        raise DataError(f"response column {response_column!r} not found")
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"row {i + 2} has {len(r)} fields, expected {len(header)}")
    cols = {h: [r[k] for r in rows] for k, h in enumerate(header)}
    resp = cols.pop(response_column)
    return _build_table(cols, response_column, resp, positive_level, task)


def _build_table(
    cols: Mapping[str, list[str]],
    response_name: str,
    resp: list[str],
    positive_level: str | None,
    task: str | None,
) -> RawTable:
    if any(_is_missing(v) for v in resp):
        raise DataError(f"response column {response_name!r} has missing entries")
    columns: dict[str, np.ndarray] = {}
    levels: dict[str, list[str]] = {}
    for name, cells in cols.items():
        parsed = [None if _is_missing(c) else _as_float(c) for c in cells]
        numeric = all(p is not None for p, c in zip(parsed, cells) if not _is_missing(c))
        if numeric:
            columns[name] = np.array([np.nan if p is None else p for p in parsed], dtype=float)
        else:
            vals = np.array([None if _is_missing(c) else c.strip() for c in cells], dtype=object)
            columns[name] = vals
            levels[name] = sorted({v for v in vals if v is not None})

    resp = [r.strip() for r in resp]
    numeric_resp = [_as_float(r) for r in resp]
    resp_is_numeric = all(v is not None for v in numeric_resp)
    distinct = sorted(set(resp))
    if task is None:
        task = CLASSIFICATION if (not resp_is_numeric and len(distinct) == 2) or positive_level else REGRESSION
    if task == REGRESSION:
        if not resp_is_numeric:
            raise DataError(f"response {response_name!r} is non-numeric with {len(distinct)} levels")
        return RawTable(columns, levels, response_name, np.array(numeric_resp, dtype=float))
    if len(distinct) != 2:
        raise DataError(f"classification needs a two-level response, found {len(distinct)} levels")
    if positive_level is None:
        positive_level = distinct[1]
    if positive_level not in distinct:
        raise DataError(f"positive level {positive_level!r} not among response levels {distinct}")
    y = np.array([1.0 if r == positive_level else 0.0 for r in resp])
    return RawTable(columns, levels, response_name, y, CLASSIFICATION, positive_level, distinct)


@dataclass
class FrameSchema:
    """Everything needed to expand new rows exactly like the training rows."""

    source_names: list[str]
    levels: dict[str, list[str]]
    missing_dummy_sources: list[str]
    use_missing_data: bool

    def expanded_names(self) -> list[str]:
        names: list[str] = []
        for src in self.source_names:
            if src in self.levels:
                names.extend(f"{src}_{lv}" for lv in self.levels[src])
            else:
                names.append(src)
        names.extend(f"M_{src}" for src in self.missing_dummy_sources)
        return names

    def dummy_groups(self) -> dict[str, list[int]]:
        groups: dict[str, list[int]] = {}
        pos = 0
        for src in self.source_names:
            width = len(self.levels[src]) if src in self.levels else 1
            if src in self.levels:
                groups[src] = list(range(pos, pos + width))
            pos += width
        return groups

    def expand(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        """Map source columns (same typing as RawTable) to the numeric design matrix."""
        missing_src = [s for s in self.source_names if s not in columns]
        if missing_src:
            raise DataError(f"missing predictor columns: {missing_src}")
        n = len(next(iter(columns.values()))) if columns else 0
        blocks: list[np.ndarray] = []
        masks: dict[str, np.ndarray] = {}
        for src in self.source_names:
            col = columns[src]
            if src in self.levels:
                lv = self.levels[src]
                vals = np.asarray(col, dtype=object)
                miss = np.array([v is None or (isinstance(v, float) and math.isnan(v)) for v in vals])
                block = np.zeros((n, len(lv)))
                index = {level: k for k, level in enumerate(lv)}
                for i, v in enumerate(vals):
                    if not miss[i] and str(v) in index:
                        block[i, index[str(v)]] = 1.0
                block[miss] = np.nan
            else:
                block = np.asarray(col, dtype=float).reshape(n, 1).copy()
                miss = np.isnan(block[:, 0])
            masks[src] = miss
            blocks.append(block)
        mat = np.hstack(blocks) if blocks else np.zeros((n, 0))
        if np.isnan(mat).any() and not self.use_missing_data:
            raise DataError("missing predictor values present but the model was built without missing-data support")
        if self.missing_dummy_sources:
            extra = np.column_stack([masks[s].astype(float) for s in self.missing_dummy_sources])
            mat = np.hstack([mat, extra])
        return mat


def read_predictors(path: str | Path, schema: FrameSchema) -> np.ndarray:
    """Read new rows from CSV and expand them exactly like the training rows.

    Extra columns (such as the response) are ignored. Factor levels unseen at
    training time give an all-zero dummy block.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            rows = [r for r in reader if r]
    except (OSError, UnicodeDecodeError, StopIteration) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    columns: dict[str, np.ndarray] = {}
    for name in schema.source_names:
        if name not in header:
            raise DataError(f"predictor column {name!r} not found in {path}")
        k = header.index(name)
        cells = [r[k] if k < len(r) else "" for r in rows]
        if name in schema.levels:
            columns[name] = np.array([None if _is_missing(c) else c.strip() for c in cells], dtype=object)
            continue
        vals = []
        for c in cells:
            if _is_missing(c):
                vals.append(np.nan)
            elif (v := _as_float(c)) is None:
                raise DataError(f"non-numeric value {c!r} in numeric column {name!r}")
            else:
                vals.append(v)
        columns[name] = np.array(vals, dtype=float)
    return schema.expand(columns)


@dataclass
class ModelFrame:
    """Fully numeric design matrix with NaN marking missing cells."""

    matrix: np.ndarray
    column_names: list[str]
    response: np.ndarray
    task: str = REGRESSION
    dummy_groups: dict[str, list[int]] = field(default_factory=dict)
    missing_dummy_columns: list[int] = field(default_factory=list)
    positive_level: str | None = None
    response_levels: list[str] | None = None
    schema: FrameSchema | None = None
    response_name: str = "y"

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.response = np.asarray(self.response, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.response.shape[0]:
            raise DataError("matrix rows must match response length")
        if self.matrix.shape[1] != len(self.column_names):
            raise DataError("column_names length must equal matrix column count")
        if len(set(self.column_names)) != len(self.column_names):
            raise DataError("column names must be unique")
        if self.task == CLASSIFICATION and not np.isin(self.response, (0.0, 1.0)).all():
            raise DataError("classification response must be coded 0/1")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def p(self) -> int:
        return self.matrix.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return np.isnan(self.matrix)

    @property
    def is_classification(self) -> bool:
        return self.task == CLASSIFICATION

    def subset(self, rows: np.ndarray) -> "ModelFrame":
        rows = np.asarray(rows)
        return self.replace(matrix=self.matrix[rows], response=self.response[rows])

    def select_columns(self, cols: Sequence[int]) -> "ModelFrame":
        """Frame restricted to the given column indices (schema is dropped)."""
        cols = list(cols)
        remap = {old: new for new, old in enumerate(cols)}
        groups = {g: [remap[c] for c in idx if c in remap] for g, idx in self.dummy_groups.items()}
        return ModelFrame(
            matrix=self.matrix[:, cols],
            column_names=[self.column_names[c] for c in cols],
            response=self.response,
            task=self.task,
            dummy_groups={g: idx for g, idx in groups.items() if idx},
            missing_dummy_columns=[remap[c] for c in self.missing_dummy_columns if c in remap],
            positive_level=self.positive_level,
            response_levels=self.response_levels,
            schema=None,
            response_name=self.response_name,
        )

    def replace(self, **changes) -> "ModelFrame":
        fields = dict(
            matrix=self.matrix,
            column_names=self.column_names,
            response=self.response,
            task=self.task,
            dummy_groups=self.dummy_groups,
            missing_dummy_columns=self.missing_dummy_columns,
            positive_level=self.positive_level,
            response_levels=self.response_levels,
            schema=self.schema,
            response_name=self.response_name,
        )
        fields.update(changes)
        return ModelFrame(**fields)

    def column_index(self, name: str) -> list[int]:
        """Indices for a column or factor name (a factor maps to all its dummies)."""
        if name in self.dummy_groups:
            return list(self.dummy_groups[name])
        if name in self.column_names:
            return [self.column_names.index(name)]
        raise DataError(f"unknown covariate {name!r}")

    def to_csv(self, path: str | Path) -> None:
        """Debug export; masked cells are written as NA."""
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([*self.column_names, self.response_name])
            for row, y in zip(self.matrix, self.response):
                w.writerow(["NA" if math.isnan(v) else repr(float(v)) for v in row] + [repr(float(y))])


def build_model_frame(raw: RawTable, use_missing_data: bool = False, use_missing_dummies: bool = False) -> ModelFrame:
    """Expand factors to full one-hot and optionally append missingness indicators."""
    if raw.has_missing() and not use_missing_data:
        raise DataError("table has missing predictor cells; drop them or enable missing-data support")
    miss_sources = []
    if use_missing_dummies:
        miss_sources = [c for c in raw.names if raw.missing_mask(c).any()]
    schema = FrameSchema(
        source_names=raw.names,
        levels={k: list(v) for k, v in raw.levels.items()},
        missing_dummy_sources=miss_sources,
        use_missing_data=use_missing_data,
    )
    mat = schema.expand(raw.columns)
    names = schema.expanded_names()
    p_main = len(names) - len(miss_sources)
    return ModelFrame(
        matrix=mat,
        column_names=names,
        response=raw.response.astype(float),
        task=raw.task,
        dummy_groups=schema.dummy_groups(),
        missing_dummy_columns=list(range(p_main, len(names))),
        positive_level=raw.positive_level,
        response_levels=raw.response_levels,
        schema=schema,
        response_name=raw.response_name,
    )


@dataclass(frozen=True)
class FoldAssignment:
    fold_index: np.ndarray
    k: int
    seed: int

    def rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_index == fold)

    def sizes(self) -> list[int]:
        return [int((self.fold_index == f).sum()) for f in range(1, self.k + 1)]


def kfold_split(n: int, k: int, seed: int = 0) -> FoldAssignment:
    """Random balanced partition of ``range(n)`` into folds numbered 1..k."""
    if not 2 <= k <= n:
        raise DataError(f"fold count k={k} must satisfy 2 <= k <= n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=int)
    folds[perm] = np.arange(n) % k + 1
    return FoldAssignment(folds, k, seed)


def friedman_function(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    return (10 * np.sin(np.pi * x[:, 0] * x[:, 1]) + 20 * (x[:, 2] - 0.5) ** 2
            + 10 * x[:, 3] + 5 * x[:, 4])


def generate_friedman(n: int, p: int = 10, sigma: float = 1.0, seed: int = 0) -> ModelFrame:
    """Uniform(0,1) predictors; only the first five enter the response."""
    if p < 5:
        raise DataError("the Friedman function needs at least 5 predictors")
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, p))
    y = friedman_function(x) + sigma * rng.standard_normal(n)
    return ModelFrame(x, [f"x{j + 1}" for j in range(p)], y)


def permute_columns(frame: ModelFrame, columns: Iterable[int], seed: int = 0) -> ModelFrame:
    """Shuffle the rows of the selected columns jointly with one permutation."""
    cols = sorted(set(int(c) for c in columns))
    if any(c < 0 or c >= frame.p for c in cols):
        raise DataError("column index out of range")
    chosen = set(cols)
    for name, group in frame.dummy_groups.items():
        hit = chosen.intersection(group)
        if hit and len(hit) != len(group):
            raise DataError(f"factor {name!r} must be permuted as a whole")
    if not cols:
        return frame.replace(matrix=frame.matrix.copy())
    perm = np.random.default_rng(seed).permutation(frame.n)
    mat = frame.matrix.copy()
    mat[:, cols] = frame.matrix[perm][:, cols]
    return frame.replace(matrix=mat)


def permute_response(frame: ModelFrame, seed: int = 0) -> ModelFrame:
    perm = np.random.default_rng(seed).permutation(frame.n)
    return frame.replace(response=frame.response[perm])


def load_automobile(use_missing_data: bool = False) -> ModelFrame:
    """The bundled UCI automobile table (log price response).

    With ``use_missing_data`` off, rows with any missing cell are dropped
    before one-hot expansion; with it on, all 201 rows are kept and
    missingness indicators are appended.
    """
    ref = resources.files("sumtrees") / "data" / "automobile.csv"
    with resources.as_file(ref) as path:
        raw = load_csv(path, "log_price")
    if use_missing_data:
        return build_model_frame(raw, use_missing_data=True, use_missing_dummies=True)
    return build_model_frame(raw.drop_missing())
