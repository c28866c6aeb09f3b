"""Ingestion of CTR data into sparse instances.

Two representations are used. ``Instance`` is the row form (a label plus a
list of ``(field, feature, value)`` triples). ``InstanceTable`` is the packed
columnar form the model consumes: one slot per field holding the per-field
feature index (``-1`` when the field is absent) and its value.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import xxhash

from .errors import ConfigError, LabelError, ParseError, ShapeError

CRITEO_NUMERICAL = 13
CRITEO_CATEGORICAL = 26
MISSING_BUCKET = 0


class FieldKind(str, enum.Enum):
    CATEGORICAL = "categorical"
    NUMERICAL = "numerical"


@dataclass(frozen=True)
class FieldSchema:
    field_index: int
    kind: FieldKind
    name: str = ""


class Entry(NamedTuple):
    field: int
    feature: int
    value: float


@dataclass
class Instance:
    label: int
    entries: list = field(default_factory=list)

    def __post_init__(self):
        self.entries = [Entry(int(f), int(i), float(v)) for f, i, v in self.entries]


def validate_schema(schema: Sequence[FieldSchema]):
    for pos, fs in enumerate(schema):
        if fs.field_index != pos:
            raise ConfigError(f"field indices must be contiguous from 0; got {fs.field_index} at position {pos}")
    return list(schema)


def criteo_schema():
    numeric = [FieldSchema(i, FieldKind.NUMERICAL, f"I{i + 1}") for i in range(CRITEO_NUMERICAL)]
    categorical = [
        FieldSchema(CRITEO_NUMERICAL + j, FieldKind.CATEGORICAL, f"C{j + 1}")
        for j in range(CRITEO_CATEGORICAL)
    ]
    return numeric + categorical


def hash_feature(field_index, token, per_field_buckets):
    """Map a categorical token to a bucket in ``[1, per_field_buckets)``.

    Uses xxh64 (seed 0) of the UTF-8 bytes of ``"field_index:token"``; the
    empty token is the missing value and always maps to bucket 0.
    """
    if per_field_buckets < 2:
        raise ValueError("per_field_buckets must be at least 2")
    if token == "":
        return MISSING_BUCKET
    h = xxhash.xxh64_intdigest(f"{field_index}:{token}".encode("utf-8"))
    return 1 + h % (per_field_buckets - 1)


def signed_log1p(x):
    return math.copysign(math.log1p(abs(x)), x)


@dataclass
class NumericScaler:
    """Per-field standardization of log-transformed numerical values."""

    mean: dict
    std: dict

    def transform(self, field_index, value):
        if field_index not in self.mean:
            return value
        return (value - self.mean[field_index]) / self.std[field_index]

    @classmethod
    def fit(cls, token_rows, schema):
        """Fit from rows of raw column tokens (one token per schema field)."""
        numeric = [fs.field_index for fs in schema if fs.kind is FieldKind.NUMERICAL]
        sums = {k: [0.0, 0.0, 0] for k in numeric}
        for tokens in token_rows:
            for k in numeric:
                tok = tokens[k]
                if tok == "":
                    continue
                x = signed_log1p(_to_float(tok, k))
                acc = sums[k]
                acc[0] += x
                acc[1] += x * x
                acc[2] += 1
        mean, std = {}, {}
        for k, (s, ss, n) in sums.items():
            mu = s / n if n else 0.0
            var = ss / n - mu * mu if n else 1.0
            mean[k] = mu
            std[k] = math.sqrt(var) if var > 1e-12 else 1.0
        return cls(mean, std)

    def to_dict(self):
        return {"mean": {str(k): v for k, v in self.mean.items()},
                "std": {str(k): v for k, v in self.std.items()}}

    @classmethod
    def from_dict(cls, data):
        return cls({int(k): float(v) for k, v in data["mean"].items()},
                   {int(k): float(v) for k, v in data["std"].items()})


@dataclass
class HashSpec:
    """How raw tokens become feature indices and values.

    ``buckets`` is one count shared by every categorical field or a list
    with one count per field (entries for numerical fields are ignored).
    Missing numerical values become ``numeric_fill`` after the transform.
    """

    buckets: int | list = 1000
    numeric_fill: float = 0.0
    scaler: NumericScaler | None = None

    def buckets_for(self, field_index):
        if isinstance(self.buckets, int):
            return self.buckets
        return int(self.buckets[field_index])

    def vocab_sizes(self, schema):
        return [self.buckets_for(fs.field_index) if fs.kind is FieldKind.CATEGORICAL else 1
                for fs in schema]

    def to_dict(self):
        return {"buckets": self.buckets, "numeric_fill": self.numeric_fill,
                "scaler": self.scaler.to_dict() if self.scaler else None}

    @classmethod
    def from_dict(cls, data):
        scaler = NumericScaler.from_dict(data["scaler"]) if data.get("scaler") else None
        return cls(data["buckets"], float(data["numeric_fill"]), scaler)


def _to_float(token, field_index, line_no=None):
    try:
        return float(token)
    except ValueError:
        raise ParseError(f"field {field_index}: non-numeric value {token!r}", line_no) from None


def _parse_label(token, line_no=None):
    token = token.strip()
    if token == "1":
        return 1
    if token == "0":
        return 0
    raise LabelError(f"label must be 0 or 1, got {token!r}", line_no)


def instance_from_tokens(label, tokens, schema, hash_spec, line_no=None):
    entries = []
    for fs, tok in zip(schema, tokens):
        k = fs.field_index
        if fs.kind is FieldKind.NUMERICAL:
            if tok == "":
                value = hash_spec.numeric_fill
            else:
                value = signed_log1p(_to_float(tok, k, line_no))
                if hash_spec.scaler is not None:
                    value = hash_spec.scaler.transform(k, value)
            entries.append(Entry(k, 0, value))
        else:
            entries.append(Entry(k, hash_feature(k, tok, hash_spec.buckets_for(k)), 1.0))
    return Instance(label, entries)


def criteo_tokens(line, line_no=None):
    """Split a Criteo line into ``(label_token, 39 field tokens)``."""
    cols = line.rstrip("\r\n").split("\t")
    expected = 1 + CRITEO_NUMERICAL + CRITEO_CATEGORICAL
    if len(cols) != expected:
        raise ParseError(f"expected {expected} tab-separated columns, got {len(cols)}", line_no)
    return cols[0], cols[1:]


def parse_criteo_tsv(line, schema, hash_spec, line_no=None):
    label_tok, tokens = criteo_tokens(line, line_no)
    if len(schema) != len(tokens):
        raise ConfigError(f"criteo lines need a {len(tokens)}-field schema, got {len(schema)}")
    return instance_from_tokens(_parse_label(label_tok, line_no), tokens, schema, hash_spec, line_no)


@dataclass
class CsvLayout:
    """Resolved mapping from CSV columns to schema fields."""

    header: list
    label_column: int
    field_columns: list  # column position for each field, in field order
    schema: list
    delimiter: str = ","

    @classmethod
    def resolve(cls, header, description):
        """Build a layout from a header row and a parsed schema description.

        ``description`` holds ``label``, an ordered ``columns`` list of
        ``(name, kind)`` and an ``ignore`` set.
        """
        header = [h.strip() for h in header]
        positions = {name: pos for pos, name in enumerate(header)}
        label = description["label"]
        if label not in positions:
            raise ParseError(f"label column {label!r} missing from header")
        declared = {name for name, _ in description["columns"]}
        ignore = set(description.get("ignore", ()))
        for name in header:
            if name != label and name not in declared and name not in ignore:
                raise ParseError(f"unknown column {name!r}")
        schema, cols = [], []
        for name, kind in description["columns"]:
            if name not in positions:
                raise ParseError(f"schema column {name!r} missing from header")
            schema.append(FieldSchema(len(schema), FieldKind(kind), name))
            cols.append(positions[name])
        return cls(header, positions[label], cols, schema, description.get("delimiter", ","))


def read_schema_description(path):
    """Read a CSV schema file of ``key = value`` lines.

    Recognized keys: ``label``, ``delimiter``, ``ignore`` (comma list) and
    ``column.<name> = categorical|numerical`` (declaration order = field order).
    """
    from .config import read_kv_file

    desc = {"columns": [], "ignore": []}
    for key, value in read_kv_file(path, raw=True):
        if key == "label":
            desc["label"] = value
        elif key == "delimiter":
            desc["delimiter"] = "\t" if value in ("tab", "\\t") else value
        elif key == "ignore":
            desc["ignore"] = [v.strip() for v in value.split(",") if v.strip()]
        elif key.startswith("column."):
            try:
                kind = FieldKind(value)
            except ValueError:
                raise ConfigError(f"column {key[7:]!r}: unknown kind {value!r}") from None
            desc["columns"].append((key[7:], kind.value))
        else:
            raise ConfigError(f"unknown schema key {key!r}")
    if "label" not in desc:
        raise ConfigError("schema description needs a 'label' key")
    return desc


def csv_tokens(line, layout, line_no=None):
    row = next(csv.reader([line.rstrip("\r\n")], delimiter=layout.delimiter))
    if len(row) != len(layout.header):
        raise ParseError(f"expected {len(layout.header)} columns, got {len(row)}", line_no)
    return row[layout.label_column], [row[c] for c in layout.field_columns]


def parse_csv_with_schema(line, layout, hash_spec, line_no=None):
    label_tok, tokens = csv_tokens(line, layout, line_no)
    return instance_from_tokens(_parse_label(label_tok, line_no), tokens, layout.schema, hash_spec, line_no)


class InstanceTable:
    """Packed instances: ``features``/``values`` of shape (n, f), ``labels`` (n,).

    Slot ``k`` holds field ``k``; a feature index of -1 marks an absent field.
    """

    def __init__(self, features, values, labels):
        self.features = np.asarray(features, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        if self.features.shape != self.values.shape or self.features.ndim != 2:
            raise ShapeError("features and values must both be (n, f)")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError("labels must have one entry per instance")

    @property
    def n_fields(self):
        return self.features.shape[1]

    def __len__(self):
        return self.features.shape[0]

    def take(self, index):
        return InstanceTable(self.features[index], self.values[index], self.labels[index])

    def __getitem__(self, i):
        feats, vals = self.features[i], self.values[i]
        entries = [Entry(k, int(feats[k]), float(vals[k])) for k in range(self.n_fields) if feats[k] >= 0]
        return Instance(int(self.labels[i]), entries)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_instances(cls, instances, n_fields):
        instances = list(instances)
        feats = np.full((len(instances), n_fields), -1, dtype=np.int64)
        vals = np.zeros((len(instances), n_fields))
        labels = np.zeros(len(instances))
        for row, inst in enumerate(instances):
            labels[row] = inst.label
            for k, i, v in inst.entries:
                if not 0 <= k < n_fields:
                    raise ShapeError(f"instance {row}: field {k} outside 0..{n_fields - 1}")
                if feats[row, k] >= 0:
                    raise ShapeError(f"instance {row}: more than one entry for field {k}")
                feats[row, k] = i
                vals[row, k] = v
        return cls(feats, vals, labels)

    @classmethod
    def concat(cls, tables):
        return cls(np.concatenate([t.features for t in tables]),
                   np.concatenate([t.values for t in tables]),
                   np.concatenate([t.labels for t in tables]))


def as_table(instances, n_fields=None):
    if isinstance(instances, InstanceTable):
        return instances
    if isinstance(instances, Instance):
        instances = [instances]
    instances = list(instances)
    if n_fields is None:
        n_fields = 1 + max((e.field for inst in instances for e in inst.entries), default=-1)
    return InstanceTable.from_instances(instances, n_fields)


def _take(instances, index):
    if isinstance(instances, InstanceTable):
        return instances.take(index)
    return [instances[i] for i in index]


@dataclass
class DatasetSplit:
    train: object
    validation: object
    test: object
    seed: int


def split_dataset(instances, seed):
    """Random 8:1:1 train/validation/test partition, deterministic under ``seed``."""
    n = len(instances)
    if n < 10:
        raise ValueError(f"need at least 10 instances to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * 0.1))
    n_test = int(round(n * 0.1))
    n_train = n - n_val - n_test
    return DatasetSplit(
        _take(instances, np.sort(perm[:n_train])),
        _take(instances, np.sort(perm[n_train:n_train + n_val])),
        _take(instances, np.sort(perm[n_train + n_val:])),
        seed,
    )


def batch_indices(n, batch_size, shuffle_seed=None):
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def make_batches(instances, batch_size, shuffle_seed=None):
    """Split one epoch into batches; the last one may be short."""
    return [_take(instances, idx) for idx in batch_indices(len(instances), batch_size, shuffle_seed)]


def read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return [line for line in fh if line.strip()]


def load_criteo(lines, hash_spec, schema=None):
    schema = schema or criteo_schema()
    insts = [parse_criteo_tsv(line, schema, hash_spec, i + 1) for i, line in enumerate(lines)]
    return InstanceTable.from_instances(insts, len(schema))


def load_csv(lines, layout, hash_spec):
    insts = [parse_csv_with_schema(line, layout, hash_spec, i + 1) for i, line in enumerate(lines)]
    return InstanceTable.from_instances(insts, len(layout.schema))


def tokenize_lines(lines, tokenizer):
    """Apply ``tokenizer(line, line_no) -> (label_token, tokens)`` to every line."""
    labels, rows = [], []
    for i, line in enumerate(lines):
        label_tok, tokens = tokenizer(line, i + 1)
        labels.append(_parse_label(label_tok, i + 1))
        rows.append(tokens)
    return labels, rows


def load_split(labels, token_rows, schema, hash_spec, seed):
    """Split raw rows 8:1:1, fit the numeric scaler on the training rows only,
    then hash everything.

    Returns ``(DatasetSplit of InstanceTables, fitted HashSpec)``.
    """
    idx = split_dataset(list(range(len(labels))), seed)
    scaler = NumericScaler.fit([token_rows[i] for i in idx.train], schema)
    spec = HashSpec(hash_spec.buckets, hash_spec.numeric_fill, scaler)

    def build(rows):
        insts = [instance_from_tokens(labels[i], token_rows[i], schema, spec, i + 1) for i in rows]
        return InstanceTable.from_instances(insts, len(schema))

    return DatasetSplit(build(idx.train), build(idx.validation), build(idx.test), seed), spec


# ---------------------------------------------------------------------------
# sparse text format: "label field:feature:value ..." (already hashed)

def format_sparse_line(label, features, values):
    parts = [str(int(label))]
    parts += [f"{k}:{int(i)}:{float(v)!r}" for k, (i, v) in enumerate(zip(features, values)) if i >= 0]
    return " ".join(parts)


def parse_sparse_line(line, line_no=None):
    parts = line.split()
    if not parts:
        raise ParseError("empty line", line_no)
    label = _parse_label(parts[0], line_no)
    entries = []
    for item in parts[1:]:
        pieces = item.split(":")
        if len(pieces) != 3:
            raise ParseError(f"expected field:feature:value, got {item!r}", line_no)
        try:
            entries.append(Entry(int(pieces[0]), int(pieces[1]), float(pieces[2])))
        except ValueError:
            raise ParseError(f"malformed entry {item!r}", line_no) from None
    return Instance(label, entries)


def write_sparse(table, path):
    with open(path, "w", encoding="utf-8") as fh:
        for feats, vals, y in zip(table.features, table.values, table.labels):
            fh.write(format_sparse_line(y, feats, vals) + "\n")


def load_sparse(lines, n_fields=None):
    return as_table([parse_sparse_line(line, i + 1) for i, line in enumerate(lines)], n_fields)
