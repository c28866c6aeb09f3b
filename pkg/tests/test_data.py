import math
import os
import subprocess
import sys
from collections import Counter

import numpy as np
import pytest
import xxhash
from hypothesis import given, settings, strategies as st

from leaffm.data import (
    CsvLayout, FieldKind, FieldSchema, HashSpec, Instance, InstanceTable, NumericScaler, as_table,
    criteo_schema, criteo_tokens, format_sparse_line, hash_feature, load_split, make_batches,
    parse_criteo_tsv, parse_csv_with_schema, parse_sparse_line, read_schema_description, split_dataset,
    tokenize_lines, validate_schema,
)
from leaffm.errors import ConfigError, LabelError, ParseError, ShapeError


def criteo_line(label="1", ints=None, cats=None):
    ints = ints if ints is not None else [str(i) for i in range(13)]
    cats = cats if cats is not None else [f"tok{j}" for j in range(26)]
    return "\t".join([label] + ints + cats) + "\n"


# ---------------------------------------------------------------------------
# hashing

def test_hash_missing_token_is_bucket_zero():
    assert hash_feature(3, "", 1000) == 0


def test_hash_matches_published_xxh64():
    # recompute with the reference xxhash binding directly
    h = xxhash.xxh64(b"7:abc", seed=0).intdigest()
    assert hash_feature(7, "abc", 1000) == 1 + h % 999


def test_hash_stable_across_processes():
    code = "from leaffm.data import hash_feature; print(hash_feature(4, 'hello', 12345))"
    env = dict(os.environ, PYTHONHASHSEED="123")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env, check=True)
    assert int(out.stdout) == hash_feature(4, "hello", 12345)


def test_hash_rejects_tiny_bucket_count():
    with pytest.raises(ValueError):
        hash_feature(0, "a", 1)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 100), st.text(min_size=1, max_size=20), st.integers(2, 10**6))
def test_hash_range(field_index, token, buckets):
    assert 1 <= hash_feature(field_index, token, buckets) < buckets


def test_hash_collision_rate_near_birthday_bound():
    n, buckets = 10**5, 10**4
    tokens = [f"t{i}" for i in range(n)]
    hits = Counter(hash_feature(0, t, buckets + 1) for t in tokens)
    collisions = n - len(hits)
    # expected number of occupied buckets for n balls in b bins
    b = buckets
    expected = n - b * (1 - (1 - 1 / b) ** n)
    assert expected / 3 <= collisions <= expected * 3


def test_hash_depends_on_field():
    assert hash_feature(0, "x", 10**9) != hash_feature(1, "x", 10**9)


# ---------------------------------------------------------------------------
# criteo

def scripted_criteo(line, buckets):
    """Independent parse of one Criteo line (no scaler)."""
    cols = line.rstrip("\n").split("\t")
    entries = []
    for k in range(13):
        tok = cols[1 + k]
        if tok == "":
            entries.append((k, 0, 0.0))
        else:
            v = float(tok)
            entries.append((k, 0, math.copysign(math.log1p(abs(v)), v)))
    for j in range(26):
        tok = cols[14 + j]
        k = 13 + j
        idx = 0 if tok == "" else 1 + xxhash.xxh64(f"{k}:{tok}".encode()).intdigest() % (buckets - 1)
        entries.append((k, idx, 1.0))
    return int(cols[0]), entries


def test_criteo_matches_scripted_parser():
    rng = np.random.default_rng(0)
    spec = HashSpec(1000)
    for _ in range(30):
        ints = ["" if rng.random() < 0.2 else str(int(rng.integers(-5, 5000))) for _ in range(13)]
        cats = ["" if rng.random() < 0.2 else format(int(rng.integers(1 << 32)), "08x") for _ in range(26)]
        line = criteo_line(str(int(rng.integers(2))), ints, cats)
        inst = parse_criteo_tsv(line, criteo_schema(), spec)
        label, entries = scripted_criteo(line, 1000)
        assert inst.label == label
        assert [tuple(e) for e in inst.entries] == entries


def test_criteo_example_first_numeric():
    line = criteo_line("1", ["5"] + [""] * 12, ["abc"] + [""] * 25)
    inst = parse_criteo_tsv(line, criteo_schema(), HashSpec(1000))
    assert inst.label == 1
    assert inst.entries[0] == (0, inst.entries[0].feature, math.log1p(5))


def test_criteo_all_missing():
    inst = parse_criteo_tsv(criteo_line("0", [""] * 13, [""] * 26), criteo_schema(), HashSpec(1000, numeric_fill=0.0))
    assert len(inst.entries) == 39
    assert all(e.value == 0.0 for e in inst.entries[:13])
    assert all(e.feature == 0 and e.value == 1.0 for e in inst.entries[13:])


def test_criteo_deterministic():
    line = criteo_line()
    a = parse_criteo_tsv(line, criteo_schema(), HashSpec(1000))
    b = parse_criteo_tsv(line, criteo_schema(), HashSpec(1000))
    assert a == b


def test_criteo_column_count_error_has_line():
    with pytest.raises(ParseError) as exc:
        parse_criteo_tsv("1\t2\t3\n", criteo_schema(), HashSpec(), line_no=17)
    assert exc.value.line_no == 17
    assert "17" in str(exc.value)


def test_criteo_bad_label():
    with pytest.raises(LabelError):
        parse_criteo_tsv(criteo_line("2"), criteo_schema(), HashSpec())


def test_criteo_categorical_entries_are_one_hot():
    inst = parse_criteo_tsv(criteo_line(), criteo_schema(), HashSpec(50))
    cats = [e for e in inst.entries if e.field >= 13]
    assert len({e.field for e in cats}) == len(cats) == 26
    assert all(e.value == 1.0 and 0 <= e.feature < 50 for e in cats)


def test_numeric_scaler_fit_on_rows():
    schema = [FieldSchema(0, FieldKind.NUMERICAL), FieldSchema(1, FieldKind.CATEGORICAL)]
    rows = [["1", "a"], ["3", "b"], ["", "c"], ["7", "a"]]
    scaler = NumericScaler.fit(rows, schema)
    logs = [math.log1p(v) for v in (1, 3, 7)]
    mu = sum(logs) / 3
    sd = math.sqrt(sum((x - mu) ** 2 for x in logs) / 3)
    assert scaler.mean[0] == pytest.approx(mu)
    assert scaler.std[0] == pytest.approx(sd)
    assert scaler.transform(0, math.log1p(3)) == pytest.approx((math.log1p(3) - mu) / sd)
    assert NumericScaler.from_dict(scaler.to_dict()) == scaler


def test_load_split_fits_scaler_on_train_only():
    lines = [criteo_line(str(i % 2), [str(i)] + [""] * 12, [f"c{i % 7}"] + [""] * 25) for i in range(50)]
    labels, rows = tokenize_lines(lines, criteo_tokens)
    split, spec = load_split(labels, rows, criteo_schema(), HashSpec(100), seed=3)
    train_rows = split_dataset(list(range(50)), 3).train
    logs = [math.log1p(i) for i in train_rows]
    assert spec.scaler.mean[0] == pytest.approx(np.mean(logs))
    assert len(split.train) == 40 and len(split.validation) == 5 and len(split.test) == 5
    # missing numerics bypass the scaler
    assert np.all(split.train.values[:, 1] == 0.0)


def test_hash_spec_round_trip():
    spec = HashSpec([1, 50, 60], 0.0, NumericScaler({0: 1.0}, {0: 2.0}))
    assert HashSpec.from_dict(spec.to_dict()) == spec
    schema = [FieldSchema(0, FieldKind.NUMERICAL), FieldSchema(1, FieldKind.CATEGORICAL),
              FieldSchema(2, FieldKind.CATEGORICAL)]
    assert spec.vocab_sizes(schema) == [1, 50, 60]


def test_validate_schema_contiguous():
    with pytest.raises(ConfigError):
        validate_schema([FieldSchema(0, FieldKind.NUMERICAL), FieldSchema(2, FieldKind.NUMERICAL)])
    assert len(validate_schema(criteo_schema())) == 39


# ---------------------------------------------------------------------------
# csv

AVAZU_FIELDS = ["hour"] + [f"C{i}" for i in range(1, 24)]  # 24 field columns
AVAZU_COLS = ["click"] + AVAZU_FIELDS


@pytest.fixture
def avazu_layout(tmp_path):
    desc = tmp_path / "avazu.schema"
    lines = ["label = click"] + [f"column.{c} = categorical" for c in AVAZU_FIELDS]
    desc.write_text("\n".join(lines) + "\n")
    return CsvLayout.resolve(AVAZU_COLS, read_schema_description(str(desc)))


def avazu_row(label, tokens):
    return ",".join([label] + tokens)


def test_csv_avazu_row(avazu_layout):
    toks = [f"v{i}" for i in range(24)]
    inst = parse_csv_with_schema(avazu_row("1", toks), avazu_layout, HashSpec(1000))
    assert len(inst.entries) == 24
    assert inst.label == 1
    assert [e.feature for e in inst.entries] == [hash_feature(k, t, 1000) for k, t in enumerate(toks)]


def test_csv_quoted_comma(avazu_layout):
    toks = [f"v{i}" for i in range(24)]
    toks[3] = '"a,b"'
    inst = parse_csv_with_schema(avazu_row("0", toks), avazu_layout, HashSpec(10**6))
    assert len(inst.entries) == 24
    assert inst.entries[3].feature == hash_feature(3, "a,b", 10**6)


def test_csv_identical_tokens_hash_identically(avazu_layout):
    toks = [f"v{i}" for i in range(24)]
    a = parse_csv_with_schema(avazu_row("1", toks), avazu_layout, HashSpec(1000))
    b = parse_csv_with_schema(avazu_row("1", toks), avazu_layout, HashSpec(1000))
    assert [e.feature for e in a.entries] == [e.feature for e in b.entries]


def test_csv_ignored_column(tmp_path):
    desc = tmp_path / "d.schema"
    desc.write_text("label = click\nignore = id\ncolumn.hour = categorical\ncolumn.site = categorical\n")
    layout = CsvLayout.resolve(["id", "click", "hour", "site"], read_schema_description(str(desc)))
    inst = parse_csv_with_schema("1000,1,14102100,abc", layout, HashSpec(100))
    assert len(inst.entries) == 2 and inst.entries[0].feature == hash_feature(0, "14102100", 100)


def test_csv_errors(avazu_layout, tmp_path):
    with pytest.raises(LabelError):
        parse_csv_with_schema(avazu_row("x", ["a"] * 24), avazu_layout, HashSpec())
    with pytest.raises(ParseError):
        parse_csv_with_schema(avazu_row("1", ["a"] * 23), avazu_layout, HashSpec())
    desc = tmp_path / "d.schema"
    desc.write_text("label = click\ncolumn.hour = categorical\n")
    with pytest.raises(ParseError, match="unknown column"):
        CsvLayout.resolve(AVAZU_COLS, read_schema_description(str(desc)))


def test_csv_numeric_column(tmp_path):
    desc = tmp_path / "d.schema"
    desc.write_text("label = y\ncolumn.age = numerical\ncolumn.city = categorical\n")
    layout = CsvLayout.resolve(["y", "age", "city"], read_schema_description(str(desc)))
    inst = parse_csv_with_schema("1,12,paris", layout, HashSpec(100))
    assert inst.entries[0] == (0, 0, math.log1p(12))
    assert inst.entries[1].value == 1.0


def test_schema_description_unknown_key(tmp_path):
    desc = tmp_path / "d.schema"
    desc.write_text("label = y\ncolour = blue\n")
    with pytest.raises(ConfigError, match="colour"):
        read_schema_description(str(desc))


# ---------------------------------------------------------------------------
# instances, splits and batches

def test_instance_table_round_trip():
    insts = [Instance(1, [(0, 2, 1.0), (2, 0, -0.5)]), Instance(0, [(1, 1, 1.0)])]
    table = as_table(insts, 3)
    assert list(table) == insts
    assert table.features.tolist() == [[2, -1, 0], [-1, 1, -1]]


def test_instance_table_rejects_two_entries_per_field():
    with pytest.raises(ShapeError):
        as_table([Instance(1, [(0, 1, 1.0), (0, 2, 1.0)])], 2)


def test_sparse_line_round_trip():
    inst = Instance(1, [(0, 0, 0.25), (3, 17, 1.0)])
    table = as_table(inst, 4)
    line = format_sparse_line(1, table.features[0], table.values[0])
    assert parse_sparse_line(line) == inst
    with pytest.raises(ParseError):
        parse_sparse_line("1 0:1")


def test_split_ten():
    s = split_dataset(list(range(10)), 0)
    assert (len(s.train), len(s.validation), len(s.test)) == (8, 1, 1)


def test_split_deterministic():
    a = split_dataset(list(range(1000)), 7)
    b = split_dataset(list(range(1000)), 7)
    assert (a.train, a.validation, a.test) == (b.train, b.validation, b.test)


def test_split_999_within_one():
    s = split_dataset(list(range(999)), 1)
    for got, want in zip((len(s.train), len(s.validation), len(s.test)), (799.2, 99.9, 99.9)):
        assert abs(got - want) <= 1


def test_split_too_small():
    with pytest.raises(ValueError):
        split_dataset(list(range(9)), 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(10, 3000), st.integers(0, 2**31))
def test_split_partitions(n, seed):
    s = split_dataset(list(range(n)), seed)
    parts = [set(s.train), set(s.validation), set(s.test)]
    assert sorted(s.train + s.validation + s.test) == list(range(n))
    assert not (parts[0] & parts[1]) and not (parts[0] & parts[2]) and not (parts[1] & parts[2])
    for got, frac in zip((len(s.train), len(s.validation), len(s.test)), (0.8, 0.1, 0.1)):
        assert abs(got - frac * n) <= 1


def test_split_table_matches_list_membership():
    rng = np.random.default_rng(0)
    table = InstanceTable(rng.integers(0, 5, (40, 2)), np.ones((40, 2)), rng.integers(0, 2, 40))
    s_table = split_dataset(table, 5)
    s_idx = split_dataset(list(range(40)), 5)
    assert np.array_equal(s_table.validation.features, table.features[s_idx.validation])


def test_batches_remainder():
    batches = make_batches(list(range(2050)), 1024, shuffle_seed=0)
    assert [len(b) for b in batches] == [1024, 1024, 2]


def test_batches_size_one():
    assert len(make_batches(list(range(17)), 1)) == 17


def test_batches_permutation_per_seed():
    a = [x for b in make_batches(list(range(300)), 64, shuffle_seed=1) for x in b]
    b = [x for b in make_batches(list(range(300)), 64, shuffle_seed=2) for x in b]
    assert a != b
    assert sorted(a) == sorted(b) == list(range(300))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 500), st.integers(1, 100), st.integers(0, 1000))
def test_batches_cover_epoch_once(n, bs, seed):
    seen = [x for b in make_batches(list(range(n)), bs, shuffle_seed=seed) for x in b]
    assert sorted(seen) == list(range(n))
