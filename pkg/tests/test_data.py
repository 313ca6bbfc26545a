import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aiectr.data import (CategoryEncoder, DataError, Dataset, FeatureSchema, encode_category, index_encoders,
                         load_tsv, save_tsv, split_by_fraction, stable_hash)

from conftest import random_dataset, small_schema

HEADER = "click\tweekday\thour\tbidprice\tpayprice\tslotid\tad\n"


def write(path, rows):
    path.write_text(HEADER + "".join(r + "\n" for r in rows))
    return path


# ------------------------------------------------------------------- schema
def test_schema_requires_scenario_field():
    with pytest.raises(DataError):
        FeatureSchema((("a", 2),), scenario_field="slotid", group_fields=())


def test_schema_rejects_duplicates_and_bad_cardinality():
    with pytest.raises(DataError):
        FeatureSchema((("slotid", 2), ("slotid", 3)), group_fields=())
    with pytest.raises(DataError):
        FeatureSchema((("slotid", 0),), group_fields=())


def test_schema_dict_round_trip():
    s = small_schema()
    assert FeatureSchema.from_dict(s.to_dict()) == s


# ----------------------------------------------------------------- load_tsv
def test_load_three_rows(tmp_path):
    p = write(tmp_path / "a.tsv", ["1\t0\t1\t5.0\t2.0\t3\t1", "0\t2\t0\t1.5\t0.5\t0\t2", "0\t1\t3\t2\t2\t1\t0"])
    ds = load_tsv(p, small_schema())
    assert len(ds) == 3
    assert ds[0].y == 1 and ds[0].bid == 5.0 and ds[0].payprice == 2.0 and ds[0].scenario == 3
    assert ds[2].x == (1, 3, 1, 0)


def test_bad_label_reports_line(tmp_path):
    p = write(tmp_path / "a.tsv", ["1\t0\t1\t5.0\t2.0\t3\t1", "2\t0\t1\t5.0\t2.0\t3\t1"])
    with pytest.raises(DataError, match=r"a\.tsv:3"):
        load_tsv(p, small_schema())


def test_negative_bid_rejected(tmp_path):
    p = write(tmp_path / "a.tsv", ["1\t0\t1\t-5.0\t2.0\t3\t1"])
    with pytest.raises(DataError, match=":2"):
        load_tsv(p, small_schema())


def test_header_mismatch(tmp_path):
    p = tmp_path / "a.tsv"
    p.write_text("click\tbidprice\n1\t2\n")
    with pytest.raises(DataError, match="header"):
        load_tsv(p, small_schema())


def test_unknown_token_strict_dictionary_names_field_and_line(tmp_path):
    p = write(tmp_path / "a.tsv", ["1\t0\t1\t5.0\t2.0\t3\tA", "0\t0\t1\t5.0\t2.0\t3\tZZ"])
    schema = small_schema()
    enc = index_encoders(schema)
    enc["ad"] = CategoryEncoder("dictionary")
    enc["ad"].encode("A")
    enc["ad"].freeze()
    with pytest.raises(DataError, match=r":3: unknown token 'ZZ' in field 'ad'"):
        load_tsv(p, schema, enc, strict_unknown=True)
    ds = load_tsv(p, schema, enc)  # lenient: reserved index
    assert ds.column("ad").tolist() == [1, 0]


def test_index_out_of_range_token(tmp_path):
    p = write(tmp_path / "a.tsv", ["1\t0\t1\t5.0\t2.0\t9\t1"])
    with pytest.raises(DataError, match="slotid"):
        load_tsv(p, small_schema())


def test_save_then_load_identical(tmp_path, rng):
    ds = random_dataset(rng, 50)
    save_tsv(ds, tmp_path / "r.tsv")
    back = load_tsv(tmp_path / "r.tsv", ds.schema)
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)
    assert np.array_equal(back.bid, ds.bid) and np.array_equal(back.payprice, ds.payprice)
    save_tsv(back, tmp_path / "r2.tsv")
    assert (tmp_path / "r.tsv").read_bytes() == (tmp_path / "r2.tsv").read_bytes()


def test_dictionary_round_trip_through_tokens(tmp_path):
    p = write(tmp_path / "a.tsv", ["1\t0\t1\t5.0\t2.0\t3\tx", "0\t0\t1\t1.0\t0.5\t2\ty", "0\t0\t1\t1.0\t0.5\t2\tx"])
    schema = small_schema()
    enc = index_encoders(schema)
    enc["ad"] = CategoryEncoder("dictionary")
    ds = load_tsv(p, schema, enc)
    assert ds.schema.cardinalities[3] == 3  # reserved + x + y
    save_tsv(ds, tmp_path / "b.tsv", enc)
    assert (tmp_path / "b.tsv").read_text() == p.read_text()


# ----------------------------------------------------------- encode_category
def test_same_token_same_index():
    e = CategoryEncoder()
    assert encode_category(e, "foo") == encode_category(e, "foo") == 1


def test_unseen_token_maps_to_zero_when_frozen():
    e = CategoryEncoder()
    e.encode("a")
    e.freeze()
    assert encode_category(e, "never") == 0


def test_hash_bucket_range_and_collisions():
    rng = np.random.default_rng(0)
    tokens = {f"tok{v}" for v in rng.integers(0, 10**12, 10_000)}
    e = CategoryEncoder("hash", buckets=1000)
    idx = [encode_category(e, t) for t in tokens]
    assert min(idx) >= 0 and max(idx) < 1000
    n, m = len(tokens), 1000
    # expected occupied buckets and its variance under uniform hashing
    p_empty = (1 - 1 / m) ** n
    expected_distinct = m * (1 - p_empty)
    var = m * p_empty * (1 - p_empty) + m * (m - 1) * ((1 - 2 / m) ** n - p_empty**2)
    assert abs(len(set(idx)) - expected_distinct) <= 3 * np.sqrt(var) + 1
    assert encode_category(e, "tok1") == stable_hash("tok1") % 1000


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=8), min_size=1, max_size=50))
def test_dictionary_injective_on_seen_tokens(tokens):
    e = CategoryEncoder()
    idx = {t: e.encode(t) for t in tokens}
    distinct = set(tokens)
    assert len(set(idx.values())) == len(distinct)
    assert all(v >= 1 for v in idx.values())
    assert all(e.decode(v) == t for t, v in idx.items())


# --------------------------------------------------------- split_by_fraction
def test_six_one_one_ordered(rng):
    ds = random_dataset(rng, 8)
    parts = split_by_fraction(ds, [6 / 8, 1 / 8, 1 / 8])
    assert [len(p) for p in parts] == [6, 1, 1]
    assert np.array_equal(np.concatenate([p.X for p in parts]), ds.X)


def test_full_fraction_is_copy(rng):
    ds = random_dataset(rng, 5)
    (only,) = split_by_fraction(ds, [1.0])
    assert np.array_equal(only.X, ds.X) and only.X is not ds.X


def test_shuffled_split_deterministic(rng):
    ds = random_dataset(rng, 40)
    a = split_by_fraction(ds, [0.5, 0.5], ordered=False, seed=3)
    b = split_by_fraction(ds, [0.5, 0.5], ordered=False, seed=3)
    assert all(np.array_equal(x.X, y.X) for x, y in zip(a, b))


def test_split_empty_and_bad_fractions(rng):
    ds = random_dataset(rng, 4)
    with pytest.raises(DataError):
        split_by_fraction(ds.subset([]), [1.0])
    with pytest.raises(ValueError):
        split_by_fraction(ds, [0.5, 0.4])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.lists(st.integers(1, 20), min_size=1, max_size=5))
def test_split_sizes_and_concatenation(n, raw):
    fr = np.array(raw, dtype=float) / sum(raw)
    ds = random_dataset(np.random.default_rng(n), n)
    parts = split_by_fraction(ds, fr)
    sizes = np.array([len(p) for p in parts])
    assert sizes.sum() == n and np.all(np.abs(sizes - fr * n) < 1)
    assert np.array_equal(np.concatenate([p.y for p in parts]), ds.y)


# ------------------------------------------------------------------ Dataset
def test_dataset_validate_and_groups():
    schema = small_schema()
    X = np.array([[0, 1, 2, 0], [0, 1, 2, 3], [1, 1, 2, 0]])
    ds = Dataset(schema, X, [1, 0, 0], [1, 1, 1], [0, 0, 0])
    ds.validate()
    gid, n = ds.group_ids()
    assert n == 2 and gid[0] == gid[1] != gid[2]
    bad = Dataset(schema, X, [2, 0, 0], [1, 1, 1], [0, 0, 0])
    with pytest.raises(DataError):
        bad.validate()
    with pytest.raises(DataError):
        Dataset(schema, X, [1, 0, 0], [1, 1, 1], [0, 0, 0], split_tag="holdout")
