"""Tabular ingestion and the incremental-column withholding protocol.

A dataset is split 6:2:2 into train/val/test, and the test block again into
TrainFromTest / ValFromTest / TestFromTest. Columns named as incremental are
removed from the training view and only exist in the inference view. All
randomness is seeded; a scenario is immutable once built.
"""
from __future__ import annotations

import csv
import json
import string
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

STD_FLOOR = 1e-8
UNK_INDEX = 0

KINDS = ("numeric", "categorical")
ROLES = ("original", "incremental", "target")
SPLIT_NAMES = ("train", "val", "train_from_test", "val_from_test", "test_from_test")


class _MissingType:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "MISSING"

    def __bool__(self):
        return False


MISSING = _MissingType()


class SchemaError(ValueError):
    pass


class CsvParseError(ValueError):
    pass


class LabelHygieneError(RuntimeError):
    """Raised when code asks for labels the protocol forbids."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    role: str = "original"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown column kind: {self.kind!r}")
        if self.role not in ROLES:
            raise SchemaError(f"unknown column role: {self.role!r}")


def validate_schema(schema: Sequence[ColumnSpec]) -> None:
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise SchemaError("duplicate column names in schema")
    targets = [c for c in schema if c.role == "target"]
    if len(targets) != 1:
        raise SchemaError(f"schema needs exactly one target column, got {len(targets)}")
    if not any(c.role == "original" for c in schema):
        raise SchemaError("schema needs at least one original column")


@dataclass
class Table:
    schema: list[ColumnSpec]
    rows: list[list]

    def __post_init__(self):
        validate_schema(self.schema)
        width = len(self.schema)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise SchemaError(f"row {i} has {len(row)} cells, schema has {width}")
        for j, col in enumerate(self.schema):
            if col.kind != "numeric":
                continue
            for i, row in enumerate(self.rows):
                v = row[j]
                if v is MISSING:
                    continue
                if not np.isfinite(v):
                    raise SchemaError(f"non-finite numeric cell at row {i}, column {col.name!r}")

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def column_index(self, name: str) -> int:
        for j, c in enumerate(self.schema):
            if c.name == name:
                return j
        raise SchemaError(f"no column named {name!r}")

    def column(self, name: str) -> list:
        j = self.column_index(name)
        return [row[j] for row in self.rows]

    @property
    def target_name(self) -> str:
        return next(c.name for c in self.schema if c.role == "target")

    def with_roles(self, incremental_names: Sequence[str]) -> "Table":
        """New table with the named columns re-marked as incremental."""
        wanted = set(incremental_names)
        known = {c.name for c in self.schema}
        unknown = wanted - known
        if unknown:
            raise SchemaError(f"unknown incremental columns: {sorted(unknown)}")
        schema = []
        for c in self.schema:
            if c.name in wanted:
                if c.role == "target":
                    raise SchemaError(f"target column {c.name!r} cannot be incremental")
                schema.append(ColumnSpec(c.name, c.kind, "incremental"))
            else:
                role = c.role if c.role == "target" else "original"
                schema.append(ColumnSpec(c.name, c.kind, role))
        if not any(c.role == "original" for c in schema):
            raise SchemaError("incremental set would leave no original columns")
        return Table(schema, [list(r) for r in self.rows])


def _parse_cell(text: str):
    if text == "":
        return MISSING
    try:
        v = float(text)
    except ValueError:
        return text
    return v if np.isfinite(v) else text


def load_csv(path: str, schema_path: str | None = None, target: str | None = None) -> Table:
    """Read a comma-delimited UTF-8 file with a header row.

    Empty cells become MISSING. Without a schema file, a column whose
    non-missing cells all parse as numbers is numeric, otherwise categorical;
    the target defaults to the last column.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(f"{path}: empty file") from None
        width = len(header)
        raw_rows = []
        for line_no, rec in enumerate(reader, start=2):
            if len(rec) != width:
                raise CsvParseError(
                    f"{path}: line {line_no}: expected {width} cells, got {len(rec)}")
            raw_rows.append([_parse_cell(c) for c in rec])

    if schema_path is not None:
        with open(schema_path, "r", encoding="utf-8") as fh:
            entries = json.load(fh)
        schema = [ColumnSpec(e["name"], e["kind"], e.get("role", "original")) for e in entries]
        if [c.name for c in schema] != header:
            raise SchemaError(f"schema columns {[c.name for c in schema]} "
                              f"do not match header {header}")
    else:
        target_name = target if target is not None else header[-1]
        if target_name not in header:
            raise SchemaError(f"target column {target_name!r} not in header")
        schema = []
        for j, name in enumerate(header):
            cells = [r[j] for r in raw_rows if r[j] is not MISSING]
            numeric = len(cells) > 0 and all(isinstance(c, float) for c in cells)
            role = "target" if name == target_name else "original"
            schema.append(ColumnSpec(name, "numeric" if numeric else "categorical", role))

    # re-parse cells against the final kinds: categorical columns keep tokens
    rows = []
    for r in raw_rows:
        row = []
        for j, col in enumerate(schema):
            v = r[j]
            if v is MISSING:
                row.append(MISSING)
            elif col.kind == "numeric":
                if not isinstance(v, float):
                    raise CsvParseError(
                        f"{path}: non-numeric cell {v!r} in numeric column {col.name!r}")
                row.append(v)
            else:
                row.append(str(v) if not isinstance(v, str) else v)
        rows.append(row)
    return Table(schema, rows)


def save_csv(table: Table, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([c.name for c in table.schema])
        for row in table.rows:
            out = []
            for v in row:
                if v is MISSING:
                    out.append("")
                elif isinstance(v, float):
                    out.append(repr(v))
                else:
                    out.append(v)
            writer.writerow(out)


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    test_subsplit: tuple = (1 / 3, 1 / 3, 1 / 3)
    seed: int = 0

    def __post_init__(self):
        for f in (self.train_frac, self.val_frac, self.test_frac):
            if not 0.0 < f < 1.0:
                raise ValueError("split fractions must lie in (0,1)")
        if abs(self.train_frac + self.val_frac + self.test_frac - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if abs(sum(self.test_subsplit) - 1.0) > 1e-9:
            raise ValueError("test subsplit fractions must sum to 1")


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    val: np.ndarray
    train_from_test: np.ndarray
    val_from_test: np.ndarray
    test_from_test: np.ndarray

    def by_name(self, name: str) -> np.ndarray:
        if name not in SPLIT_NAMES:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def sizes(self) -> dict:
        return {name: int(len(self.by_name(name))) for name in SPLIT_NAMES}


def realize_split(n_rows: int, spec: SplitSpec) -> SplitIndices:
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(n_rows)
    n_train = int(np.floor(n_rows * spec.train_frac))
    n_val = int(np.floor(n_rows * (spec.train_frac + spec.val_frac))) - n_train
    test = order[n_train + n_val:]
    nt = len(test)
    t1 = int(np.floor(nt * spec.test_subsplit[0]))
    t2 = int(np.floor(nt * (spec.test_subsplit[0] + spec.test_subsplit[1]))) - t1
    return SplitIndices(
        train=np.sort(order[:n_train]),
        val=np.sort(order[n_train:n_train + n_val]),
        train_from_test=np.sort(test[:t1]),
        val_from_test=np.sort(test[t1:t1 + t2]),
        test_from_test=np.sort(test[t1 + t2:]),
    )


@dataclass(frozen=True)
class NumericStats:
    mean: float
    std: float


@dataclass(frozen=True)
class ColumnStats:
    """Per-column train-time statistics: z-score pair or category map."""
    numeric: NumericStats | None = None
    categories: dict | None = None  # token -> index, UNK_INDEX reserved

    @property
    def n_categories(self) -> int:
        return (max(self.categories.values()) + 1) if self.categories else 1


def _numeric_stats(cells: Iterable) -> NumericStats:
    observed = [c for c in cells if c is not MISSING]
    if not observed:
        return NumericStats(0.0, 1.0)
    arr = np.asarray(observed, dtype=np.float64)
    return NumericStats(float(arr.mean()), float(max(arr.std(), STD_FLOOR)))


def _category_map(cells: Iterable) -> dict:
    tokens = sorted({c for c in cells if c is not MISSING})
    return {tok: i + 1 for i, tok in enumerate(tokens)}  # 0 is UNK


@dataclass
class EncodedBatch:
    """Uniform per-feature layout: z-scored value (numeric columns),
    category index (categorical columns) and a missing-indicator bit."""
    numeric: np.ndarray   # (n, n_features), float
    cat: np.ndarray       # (n, n_features), int
    missing: np.ndarray   # (n, n_features), float in {0,1}
    columns: list[ColumnSpec]

    @property
    def n_rows(self) -> int:
        return self.numeric.shape[0]

    @property
    def n_features(self) -> int:
        return self.numeric.shape[1]

    def take(self, idx) -> "EncodedBatch":
        return EncodedBatch(self.numeric[idx], self.cat[idx], self.missing[idx], self.columns)

    def copy(self) -> "EncodedBatch":
        return EncodedBatch(self.numeric.copy(), self.cat.copy(),
                            self.missing.copy(), list(self.columns))


@dataclass(frozen=True)
class LabelAccess:
    split: str
    phase: str  # "pre-scoring" | "scoring"


class IncrementalScenario:
    """A realized withholding protocol over one table.

    Labels are guarded: TrainFromTest/ValFromTest labels are never handed
    out, TestFromTest labels only through `labels("test_from_test")`, and
    every access lands in `label_audit` with the current phase.
    """

    def __init__(self, full_table: Table, incremental_names: Sequence[str], spec: SplitSpec):
        self.full_table = full_table.with_roles(incremental_names)
        self.incremental_names = list(incremental_names)
        self.spec = spec
        self.split = realize_split(full_table.n_rows, spec)

        schema = self.full_table.schema
        self.inference_view_schema = list(schema)
        self.train_view_schema = [c for c in schema if c.role != "incremental"]
        self.target_column = next(c for c in schema if c.role == "target")

        # encoded feature order: originals (schema order) then incrementals
        self.original_columns = [c for c in schema if c.role == "original"]
        self.incremental_columns = [c for c in schema if c.role == "incremental"]

        self._col_index = {c.name: self.full_table.column_index(c.name) for c in schema}

        train_rows = [self.full_table.rows[i] for i in self.split.train]
        self.normalization_stats: dict[str, ColumnStats] = {}
        for c in self.original_columns:
            cells = [r[self._col_index[c.name]] for r in train_rows]
            if c.kind == "numeric":
                self.normalization_stats[c.name] = ColumnStats(numeric=_numeric_stats(cells))
            else:
                self.normalization_stats[c.name] = ColumnStats(categories=_category_map(cells))

        # incremental columns have no train rows by definition; their stats
        # come from the unlabeled adaptation pool (never TestFromTest)
        pool = np.concatenate([self.split.train_from_test, self.split.val_from_test])
        pool_rows = [self.full_table.rows[i] for i in pool]
        self.incremental_stats: dict[str, ColumnStats] = {}
        for c in self.incremental_columns:
            cells = [r[self._col_index[c.name]] for r in pool_rows]
            if c.kind == "numeric":
                self.incremental_stats[c.name] = ColumnStats(numeric=_numeric_stats(cells))
            else:
                self.incremental_stats[c.name] = ColumnStats(categories=_category_map(cells))

        # label space is dataset metadata: sorted unique target values
        tgt = self.full_table.column(self.target_column.name)
        classes = sorted({v for v in tgt if v is not MISSING}, key=str)
        if len(classes) < 2:
            raise SchemaError("target column needs at least two classes")
        self.class_values = classes
        self._class_index = {v: i for i, v in enumerate(classes)}
        self._labels = np.array([self._class_index[v] for v in tgt], dtype=np.int64)

        self.label_audit: list[LabelAccess] = []
        self.access_log: list[tuple] = []
        self._scoring = False

    # -- metadata --------------------------------------------------------
    @property
    def n_classes(self) -> int:
        return len(self.class_values)

    @property
    def train_view(self) -> Table:
        keep = [self.full_table.column_index(c.name) for c in self.train_view_schema]
        rows = [[r[j] for j in keep] for r in self.full_table.rows]
        return Table(list(self.train_view_schema), rows)

    @property
    def inference_view(self) -> Table:
        return Table(list(self.inference_view_schema),
                     [list(r) for r in self.full_table.rows])

    def feature_columns(self, view: str) -> list[ColumnSpec]:
        if view == "train":
            return list(self.original_columns)
        if view == "inference":
            return self.original_columns + self.incremental_columns
        raise ValueError(f"unknown view {view!r}")

    def stats_for(self, column: ColumnSpec) -> ColumnStats:
        if column.role == "incremental":
            return self.incremental_stats[column.name]
        return self.normalization_stats[column.name]

    # -- encoding ----------------------------------------------------------
    def _encode_rows(self, row_indices: np.ndarray, view: str) -> EncodedBatch:
        cols = self.feature_columns(view)
        n = len(row_indices)
        numeric = np.zeros((n, len(cols)))
        cat = np.zeros((n, len(cols)), dtype=np.int64)
        missing = np.zeros((n, len(cols)))
        for jf, c in enumerate(cols):
            j = self._col_index[c.name]
            stats = self.stats_for(c)
            for i, ri in enumerate(row_indices):
                v = self.full_table.rows[ri][j]
                if v is MISSING:
                    missing[i, jf] = 1.0
                elif c.kind == "numeric":
                    numeric[i, jf] = (v - stats.numeric.mean) / stats.numeric.std
                else:
                    cat[i, jf] = stats.categories.get(v, UNK_INDEX)
        return EncodedBatch(numeric, cat, missing, cols)

    def encode(self, split: str, view: str) -> EncodedBatch:
        idx = self.split.by_name(split)
        self.access_log.append((split, view))
        return self._encode_rows(idx, view)

    def encode_rows(self, row_indices, view: str) -> EncodedBatch:
        return self._encode_rows(np.asarray(row_indices), view)

    # -- labels ------------------------------------------------------------
    def begin_scoring(self) -> None:
        self._scoring = True

    def labels(self, split: str) -> np.ndarray:
        if split in ("train_from_test", "val_from_test"):
            raise LabelHygieneError(f"{split} labels are never available")
        if split not in SPLIT_NAMES:
            raise KeyError(f"unknown split {split!r}")
        phase = "scoring" if self._scoring else "pre-scoring"
        self.label_audit.append(LabelAccess(split, phase))
        if split == "test_from_test" and not self._scoring:
            raise LabelHygieneError("test_from_test labels requested before scoring")
        return self._labels[self.split.by_name(split)].copy()

    def hidden_truth(self, split: str) -> np.ndarray:
        """Ground truth for post-hoc analysis only; not part of the protocol."""
        return self._labels[self.split.by_name(split)].copy()

    # -- manifest ------------------------------------------------------------
    def manifest(self) -> dict:
        stats = {}
        for name, s in {**self.normalization_stats, **self.incremental_stats}.items():
            if s.numeric is not None:
                stats[name] = {"mean": s.numeric.mean, "std": s.numeric.std}
            else:
                stats[name] = {"categories": dict(sorted(s.categories.items()))}
        return {
            "incremental_columns": self.incremental_names,
            "seed": self.spec.seed,
            "split_sizes": self.split.sizes(),
            "fractions": [self.spec.train_frac, self.spec.val_frac, self.spec.test_frac],
            "test_subsplit": list(self.spec.test_subsplit),
            "target": self.target_column.name,
            "classes": [str(v) for v in self.class_values],
            "normalization_stats": stats,
        }


def make_scenario(table: Table, incremental_names: Sequence[str],
                  split: SplitSpec) -> IncrementalScenario:
    return IncrementalScenario(table, incremental_names, split)


def normalize_row(scenario: IncrementalScenario, row: Sequence, view: str) -> EncodedBatch:
    """Encode one row given in the chosen view's schema order."""
    view_schema = (scenario.train_view_schema if view == "train"
                   else scenario.inference_view_schema)
    if len(row) != len(view_schema):
        raise SchemaError(f"row has {len(row)} cells, view schema has {len(view_schema)}")
    by_name = {c.name: row[j] for j, c in enumerate(view_schema)}
    cols = scenario.feature_columns(view)
    numeric = np.zeros((1, len(cols)))
    cat = np.zeros((1, len(cols)), dtype=np.int64)
    missing = np.zeros((1, len(cols)))
    for jf, c in enumerate(cols):
        v = by_name[c.name]
        stats = scenario.stats_for(c)
        if v is MISSING:
            missing[0, jf] = 1.0
        elif c.kind == "numeric":
            numeric[0, jf] = (v - stats.numeric.mean) / stats.numeric.std
        else:
            cat[0, jf] = stats.categories.get(v, UNK_INDEX)
    return EncodedBatch(numeric, cat, missing, cols)


def inject_missing(table: Table, rate: float, seed: int) -> Table:
    """Independently blank each non-target cell with probability `rate`."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"missing rate must be in [0,1), got {rate}")
    rng = np.random.default_rng(seed)
    target_j = table.column_index(table.target_name)
    rows = []
    for row in table.rows:
        new = list(row)
        draws = rng.random(len(row))
        for j in range(len(row)):
            if j != target_j and draws[j] < rate:
                new[j] = MISSING
        rows.append(new)
    return Table(list(table.schema), rows)


def randomize_column_names(table: Table, seed: int) -> Table:
    """Replace every non-target column name with a seeded 8-char token."""
    rng = np.random.default_rng(seed)
    alphabet = list(string.ascii_lowercase + string.digits)
    used = set()
    schema = []
    for c in table.schema:
        if c.role == "target":
            schema.append(c)
            continue
        while True:
            token = "".join(rng.choice(alphabet, size=8))
            if token not in used:
                used.add(token)
                break
        schema.append(ColumnSpec(token, c.kind, c.role))
    return Table(schema, [list(r) for r in table.rows])


def rank_attributes(scenario: IncrementalScenario, model, k: int = 4,
                    seed: int = 0) -> list[tuple[str, float]]:
    """Permutation importance of each feature on validation rows.

    Importance is the mean accuracy drop over k seeded permutations of the
    column; output is sorted descending, ties broken by column order.
    """
    if not getattr(model, "trained", False):
        raise ValueError("rank_attributes requires a trained model")
    rng = np.random.default_rng(seed)
    batch = scenario.encode("val", "train")
    labels = scenario.labels("val")
    _, probs = model.predict(batch)
    baseline = float((probs.argmax(axis=1) == labels).mean())

    scores = []
    for jf, col in enumerate(batch.columns):
        drops = []
        for _ in range(k):
            perm = rng.permutation(batch.n_rows)
            shuffled = batch.copy()
            shuffled.numeric[:, jf] = batch.numeric[perm, jf]
            shuffled.cat[:, jf] = batch.cat[perm, jf]
            shuffled.missing[:, jf] = batch.missing[perm, jf]
            _, p = model.predict(shuffled)
            drops.append(baseline - float((p.argmax(axis=1) == labels).mean()))
        scores.append((col.name, float(np.mean(drops)), jf))
    scores.sort(key=lambda t: (-t[1], t[2]))
    return [(name, imp) for name, imp, _ in scores]
