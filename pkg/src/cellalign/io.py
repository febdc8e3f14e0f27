"""Cell tables, landmark files, match lists and JSON reports.

CSV (RFC-4180, header row) is the canonical tabular format. Column names for
the id and centroid are supplied through :class:`SchemaConfig` because every
segmentation tool exports different headers; all other numeric columns become
features, renamed to lower_snake_case and optionally aliased.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import (
    DuplicateId,
    EmptyInput,
    InvalidInput,
    IoError,
    MissingFeature,
    ParseError,
    SchemaError,
    TooFewLandmarks,
)
from .geometry import AffineTransform, RigidTransform, Transform, px_to_um, transform_from_dict
from .matching import MatchSet

logger = logging.getLogger(__name__)

# Range constraints applied to canonical feature names when present.
_UNIT_INTERVAL_FEATURES = ("solidity",)
_POSITIVE_FEATURES = ("area", "perimeter", "min_diameter", "max_diameter")

MODALITIES = ("MxIF", "HE")


def snake_case(name: str) -> str:
    """``"Nucleus: Hematoxylin OD mean"`` -> ``"nucleus_hematoxylin_od_mean"``."""
    return re.sub(r"[^0-9a-zA-Z]+", "_", name).strip("_").lower()


def _feature_violation(name: str, value: float) -> str | None:
    if math.isnan(value):
        return None
    if name in _UNIT_INTERVAL_FEATURES and not 0.0 < value <= 1.0:
        return f"{name}={value!r} outside (0, 1]"
    if name in _POSITIVE_FEATURES and not value > 0.0:
        return f"{name}={value!r} must be positive"
    return None


@dataclass(frozen=True)
class CellRecord:
    cell_id: str
    x: float
    y: float
    features: dict[str, float]
    class_label: str | None = None

    @property
    def centroid(self) -> NDArray[np.float64]:
        return np.array([self.x, self.y])


@dataclass(frozen=True, eq=False)
class CellTable:
    """Column-oriented table of segmented cells with centroids in micrometres.

    Attributes
    ----------
    ids : tuple of str
        Unique cell identifiers, in file order.
    xy : ndarray, shape (N, 2)
        Centroids in micrometres.
    features : dict of str -> ndarray, shape (N,)
        Named per-cell scalars; NaN marks a missing value.
    labels : tuple of (str or None), optional
        Class label per cell.
    modality : str
        ``"MxIF"``, ``"HE"`` or any other free-form modality name.
    pixel_size : float, optional
        Micrometres per pixel of the source export, when coordinates were
        converted at ingest.
    """

    ids: tuple[str, ...]
    xy: NDArray[np.float64]
    features: dict[str, NDArray[np.float64]] = field(default_factory=dict)
    labels: tuple[str | None, ...] | None = None
    modality: str = "other"
    pixel_size: float | None = None

    def __post_init__(self) -> None:
        ids = tuple(str(i) for i in self.ids)
        xy = np.array(self.xy, dtype=float).reshape(-1, 2)
        if len(ids) == 0:
            raise EmptyInput("cell table has no cells")
        if xy.shape[0] != len(ids):
            raise InvalidInput(f"{len(ids)} ids but {xy.shape[0]} centroids")
        if not np.all(np.isfinite(xy)):
            raise InvalidInput("centroids must be finite")
        seen: set[str] = set()
        for cid in ids:
            if cid in seen:
                raise DuplicateId(cid)
            seen.add(cid)
        feats = {}
        for name, values in self.features.items():
            arr = np.array(values, dtype=float).reshape(-1)
            if arr.shape[0] != len(ids):
                raise InvalidInput(f"feature {name!r} has {arr.shape[0]} values for {len(ids)} cells")
            for cid, v in zip(ids, arr):
                problem = _feature_violation(name, float(v))
                if problem:
                    raise InvalidInput(f"cell {cid!r}: {problem}")
            arr.setflags(write=False)
            feats[name] = arr
        labels = self.labels
        if labels is not None:
            labels = tuple(None if lab is None else str(lab) for lab in labels)
            if len(labels) != len(ids):
                raise InvalidInput(f"{len(labels)} labels for {len(ids)} cells")
        xy.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[CellRecord]:
        return self.records()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CellTable):
            return NotImplemented
        return (self.ids == other.ids
                and np.array_equal(self.xy, other.xy)
                and list(self.features) == list(other.features)
                and all(np.array_equal(self.features[k], other.features[k], equal_nan=True)
                        for k in self.features)
                and self.labels == other.labels
                and self.modality == other.modality)

    def records(self) -> Iterator[CellRecord]:
        for i, cid in enumerate(self.ids):
            yield CellRecord(
                cid, float(self.xy[i, 0]), float(self.xy[i, 1]),
                {k: float(v[i]) for k, v in self.features.items()},
                None if self.labels is None else self.labels[i],
            )

    @property
    def index(self) -> dict[str, int]:
        return {cid: i for i, cid in enumerate(self.ids)}

    @classmethod
    def from_records(cls, records: Sequence[CellRecord], **kwargs: Any) -> CellTable:
        records = list(records)
        names: list[str] = []
        for r in records:
            for k in r.features:
                if k not in names:
                    names.append(k)
        feats = {k: [r.features.get(k, math.nan) for r in records] for k in names}
        labels = None
        if any(r.class_label is not None for r in records):
            labels = tuple(r.class_label for r in records)
        return cls(tuple(r.cell_id for r in records),
                   np.array([[r.x, r.y] for r in records], dtype=float).reshape(-1, 2),
                   feats, labels, **kwargs)

    def feature_matrix(self, names: Sequence[str]) -> NDArray[np.float64]:
        """Stack the requested features into an ``(N, len(names))`` array."""
        cols = []
        for name in names:
            if name not in self.features:
                raise MissingFeature(self.ids[0], name)
            col = self.features[name]
            bad = np.flatnonzero(np.isnan(col))
            if bad.size:
                raise MissingFeature(self.ids[bad[0]], name)
            cols.append(col)
        if not cols:
            return np.zeros((len(self), 0))
        return np.column_stack(cols)

    def with_xy(self, xy: ArrayLike) -> CellTable:
        return dataclasses.replace(self, xy=np.asarray(xy, dtype=float))

    def mapped(self, transform: Transform) -> CellTable:
        return self.with_xy(transform.apply(self.xy))

    def subset(self, index: ArrayLike) -> CellTable:
        idx = np.asarray(index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return dataclasses.replace(
            self,
            ids=tuple(self.ids[i] for i in idx),
            xy=self.xy[idx],
            features={k: v[idx] for k, v in self.features.items()},
            labels=None if self.labels is None else tuple(self.labels[i] for i in idx),
        )


@dataclass(frozen=True)
class SchemaConfig:
    """How to read a segmentation export.

    ``id_col=None`` generates ids from row order. ``label_col=None`` picks up
    a ``class_label`` column when one exists. ``aliases`` maps (snake-cased)
    export feature names to canonical names.
    """

    id_col: str | None = "cell_id"
    x_col: str = "x"
    y_col: str = "y"
    unit: str = "um"
    pixel_size: float | None = None
    label_col: str | None = None
    modality: str = "other"
    aliases: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.unit not in ("um", "px"):
            raise SchemaError("unit", f"unit must be 'um' or 'px', got {self.unit!r}")
        if self.unit == "px" and self.pixel_size is None:
            raise SchemaError("pixel_size", "pixel_size is required when unit is 'px'")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SchemaConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SchemaError(sorted(unknown)[0], f"unknown schema keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "aliases" in kwargs:
            kwargs["aliases"] = dict(kwargs["aliases"])
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["aliases"] = dict(self.aliases)
        return d

    def canonical_name(self, header: str) -> str:
        for key in (header, snake_case(header)):
            if key in self.aliases:
                return self.aliases[key]
        return snake_case(header)


def _open_text(path: str | Path, mode: str):
    try:
        return open(path, mode, newline="", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc}") from exc


def _parse_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"non-finite value {text!r}")
    return value


def load_cell_table(path: str | Path, schema: SchemaConfig | None = None, *,
                    strict: bool = True) -> tuple[CellTable, list[ParseError]]:
    """Read a cell table and return it with the list of rejected rows.

    In strict mode the first bad row raises; otherwise bad rows are skipped
    and reported, so ``rows read == len(table) + len(errors)``.
    """
    schema = schema or SchemaConfig()
    with _open_text(path, "r") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyInput(f"{path}: empty file") from None
        rows = [(reader.line_num, row) for row in reader if row]

    col = {name: i for i, name in enumerate(header)}
    required = [schema.x_col, schema.y_col] + ([schema.id_col] if schema.id_col else [])
    for name in required:
        if name not in col:
            raise SchemaError(name)
    label_col = schema.label_col
    if label_col is None and "class_label" in col:
        label_col = "class_label"
    elif label_col is not None and label_col not in col:
        raise SchemaError(label_col)

    reserved = set(required) | ({label_col} if label_col else set())
    feature_cols = [(i, schema.canonical_name(h)) for i, h in enumerate(header) if h not in reserved]

    numeric = []
    for i, name in feature_cols:
        try:
            for _, row in rows:
                if i < len(row) and row[i].strip():
                    float(row[i])
            numeric.append((i, name))
        except ValueError:
            logger.debug("column %r is not numeric; not used as a feature", header[i])
    names = [n for _, n in numeric]
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise SchemaError(dup, f"two columns map to feature name {dup!r}")

    errors: list[ParseError] = []
    ids: list[str] = []
    coords: list[tuple[float, float]] = []
    labels: list[str | None] = []
    values: list[list[float]] = []
    seen: set[str] = set()

    def reject(err: Exception) -> None:
        if strict:
            raise err
        errors.append(err if isinstance(err, ParseError) else ParseError(line, str(err)))

    for rownum, (line, row) in enumerate(rows):
        if len(row) != len(header):
            reject(ParseError(line, f"expected {len(header)} fields, got {len(row)}"))
            continue
        cid = row[col[schema.id_col]].strip() if schema.id_col else f"c{rownum}"
        try:
            x = _parse_float(row[col[schema.x_col]])
            y = _parse_float(row[col[schema.y_col]])
        except ValueError:
            reject(ParseError(line, f"non-numeric coordinate in ({row[col[schema.x_col]]!r}, "
                                    f"{row[col[schema.y_col]]!r})"))
            continue
        if cid in seen:
            reject(DuplicateId(cid))
            continue
        feats = [float(row[i]) if row[i].strip() else math.nan for i, _ in numeric]
        problem = next((p for p in (_feature_violation(n, v) for n, v in zip(names, feats)) if p), None)
        if problem:
            reject(ParseError(line, problem))
            continue
        seen.add(cid)
        ids.append(cid)
        coords.append((x, y))
        values.append(feats)
        labels.append((row[col[label_col]].strip() or None) if label_col else None)

    if not ids:
        raise EmptyInput(f"{path}: no valid cells")
    xy = np.array(coords, dtype=float)
    if schema.unit == "px":
        xy = px_to_um(xy, schema.pixel_size)
    vals = np.array(values, dtype=float).reshape(len(ids), len(names))
    table = CellTable(
        tuple(ids), xy, {n: vals[:, j] for j, n in enumerate(names)},
        tuple(labels) if label_col else None,
        modality=schema.modality,
        pixel_size=schema.pixel_size if schema.unit == "px" else None,
    )
    for err in errors:
        logger.warning("%s: skipped row: %s", path, err)
    return table, errors


def read_cell_table(path: str | Path, schema: SchemaConfig | None = None, *,
                    strict: bool = True) -> CellTable:
    return load_cell_table(path, schema, strict=strict)[0]


def write_cell_table(table: CellTable, path: str | Path) -> None:
    header = ["cell_id", "x", "y"]
    if table.labels is not None:
        header.append("class_label")
    header.extend(table.features)
    with _open_text(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, cid in enumerate(table.ids):
            row = [cid, repr(float(table.xy[i, 0])), repr(float(table.xy[i, 1]))]
            if table.labels is not None:
                row.append(table.labels[i] or "")
            row.extend("" if math.isnan(v[i]) else repr(float(v[i])) for v in table.features.values())
            w.writerow(row)


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Ordered source/target landmark pairs in micrometres."""

    source: NDArray[np.float64]
    target: NDArray[np.float64]

    def __post_init__(self) -> None:
        src = np.array(self.source, dtype=float).reshape(-1, 2)
        tgt = np.array(self.target, dtype=float).reshape(-1, 2)
        if src.shape != tgt.shape:
            raise InvalidInput("source and target landmark counts differ")
        if len(src) < 2:
            raise TooFewLandmarks(f"need at least 2 landmark pairs, got {len(src)}")
        if not (np.all(np.isfinite(src)) and np.all(np.isfinite(tgt))):
            raise InvalidInput("landmarks must be finite")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", tgt)

    def __len__(self) -> int:
        return len(self.source)


_LANDMARK_COLUMNS = ("src_x", "src_y", "tgt_x", "tgt_y")


def read_landmarks(path: str | Path) -> LandmarkSet:
    with _open_text(path, "r") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in _LANDMARK_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(missing[0])
        pairs = []
        for row in reader:
            try:
                pairs.append([_parse_float(row[c]) for c in _LANDMARK_COLUMNS])
            except (TypeError, ValueError):
                raise ParseError(reader.line_num, "non-numeric landmark coordinate") from None
    if len(pairs) < 2:
        raise TooFewLandmarks(f"{path}: need at least 2 landmark pairs, got {len(pairs)}")
    arr = np.array(pairs)
    return LandmarkSet(arr[:, :2], arr[:, 2:])


def write_landmarks(landmarks: LandmarkSet, path: str | Path) -> None:
    with _open_text(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_LANDMARK_COLUMNS)
        for s, t in zip(landmarks.source, landmarks.target):
            w.writerow([repr(float(v)) for v in (*s, *t)])


def write_matches(matches: MatchSet, path: str | Path) -> None:
    with _open_text(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src_id", "tgt_id", "score"])
        for s, t, score in matches:
            w.writerow([s, t, repr(float(score))])


def read_matches(path: str | Path) -> MatchSet:
    with _open_text(path, "r") as fh:
        reader = csv.DictReader(fh)
        for c in ("src_id", "tgt_id", "score"):
            if c not in (reader.fieldnames or []):
                raise SchemaError(c)
        src, tgt, scores = [], [], []
        for row in reader:
            try:
                scores.append(_parse_float(row["score"]))
            except ValueError:
                raise ParseError(reader.line_num, f"bad score {row['score']!r}") from None
            src.append(row["src_id"])
            tgt.append(row["tgt_id"])
    return MatchSet(tuple(src), tuple(tgt), np.array(scores, dtype=float))


def _json_default(obj: Any) -> Any:
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_json(obj: Any) -> str:
    """Deterministic JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(obj, default=_json_default, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_json(obj: Any, path: str | Path) -> None:
    try:
        Path(path).write_text(dumps_json(obj), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


write_report = write_json


def read_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from None


def write_transform(t: RigidTransform | AffineTransform, path: str | Path) -> None:
    write_json(t.to_dict(), path)


def read_transform(path: str | Path) -> Transform:
    return transform_from_dict(read_json(path))


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
