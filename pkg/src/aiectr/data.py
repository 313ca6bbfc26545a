"""Impression-log schema, categorical encoding, TSV ingestion and splits.

Logs are headered, tab-separated files shaped like processed iPinYou data::

    click  weekday  hour  bidprice  payprice  slotid  <feature columns...>

Every column other than the label, bid and paying price is a categorical
field.  Datasets are stored column-wise (an ``[n, n_fields]`` index matrix
plus float vectors) because every consumer works on whole batches.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

UNKNOWN_TOKEN = "__unk__"
SPLIT_TAGS = ("train", "valid", "test", "unbiased_test")


class DataError(ValueError):
    """Malformed or schema-violating input data."""


@dataclass(frozen=True)
class FeatureSchema:
    categorical_fields: tuple  # ((name, cardinality), ...)
    scenario_field: str = "slotid"
    label_field: str = "click"
    bid_field: str = "bidprice"
    payprice_field: str = "payprice"
    group_fields: tuple = ("weekday", "hour", "slotid")

    def __post_init__(self):
        fields = tuple((str(n), int(c)) for n, c in self.categorical_fields)
        object.__setattr__(self, "categorical_fields", fields)
        object.__setattr__(self, "group_fields", tuple(self.group_fields))
        names = [n for n, _ in fields]
        specials = [self.label_field, self.bid_field, self.payprice_field]
        if len(set(names + specials)) != len(names) + len(specials):
            raise DataError(f"field names must be unique: {names + specials}")
        if self.scenario_field not in names:
            raise DataError(f"scenario field {self.scenario_field!r} is not a categorical field")
        for n, c in fields:
            if c < 1:
                raise DataError(f"field {n!r} has cardinality {c} < 1")
        missing = [g for g in self.group_fields if g not in names]
        if missing:
            raise DataError(f"group fields {missing} are not categorical fields")

    @property
    def field_names(self) -> list:
        return [n for n, _ in self.categorical_fields]

    @property
    def cardinalities(self) -> list:
        return [c for _, c in self.categorical_fields]

    def index(self, name: str) -> int:
        return self.field_names.index(name)

    @property
    def scenario_index(self) -> int:
        return self.index(self.scenario_field)

    @property
    def n_scenarios(self) -> int:
        return self.cardinalities[self.scenario_index]

    def header(self) -> list:
        """Column order used when writing TSV files."""
        lead = [self.label_field]
        cats = self.field_names
        for name in ("weekday", "hour"):
            if name in cats:
                lead.append(name)
        lead += [self.bid_field, self.payprice_field]
        return lead + [n for n in cats if n not in lead]

    def with_cardinalities(self, cards) -> "FeatureSchema":
        return FeatureSchema(
            tuple(zip(self.field_names, cards)),
            self.scenario_field,
            self.label_field,
            self.bid_field,
            self.payprice_field,
            self.group_fields,
        )

    def to_dict(self) -> dict:
        return {
            "categorical_fields": [[n, c] for n, c in self.categorical_fields],
            "scenario_field": self.scenario_field,
            "label_field": self.label_field,
            "bid_field": self.bid_field,
            "payprice_field": self.payprice_field,
            "group_fields": list(self.group_fields),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        d = dict(d)
        d["categorical_fields"] = tuple(tuple(x) for x in d["categorical_fields"])
        return cls(**d)


@dataclass(frozen=True)
class Sample:
    x: tuple
    y: int
    bid: float
    payprice: float
    scenario: int


@dataclass
class Dataset:
    schema: FeatureSchema
    X: np.ndarray  # [n, n_fields] int64 category indices
    y: np.ndarray  # [n] float64 in {0, 1}
    bid: np.ndarray
    payprice: np.ndarray
    split_tag: str = "train"
    meta: dict = field(default_factory=dict)  # optional aligned side columns (e.g. true ctr)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.bid = np.asarray(self.bid, dtype=np.float64)
        self.payprice = np.asarray(self.payprice, dtype=np.float64)
        n = len(self.y)
        if self.X.shape != (n, len(self.schema.categorical_fields)):
            raise DataError(f"X shape {self.X.shape} does not match {n} samples x {len(self.schema.categorical_fields)} fields")
        if len(self.bid) != n or len(self.payprice) != n:
            raise DataError("bid/payprice length mismatch")
        if self.split_tag not in SPLIT_TAGS:
            raise DataError(f"unknown split tag {self.split_tag!r}")

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            tuple(int(v) for v in self.X[i]),
            int(self.y[i]),
            float(self.bid[i]),
            float(self.payprice[i]),
            int(self.X[i, self.schema.scenario_index]),
        )

    @property
    def scenario(self) -> np.ndarray:
        return self.X[:, self.schema.scenario_index]

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.schema.index(name)]

    def subset(self, idx, split_tag: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return Dataset(
            self.schema,
            self.X[idx],
            self.y[idx],
            self.bid[idx],
            self.payprice[idx],
            split_tag or self.split_tag,
            {k: v[idx] for k, v in self.meta.items()},
        )

    def group_ids(self, fields=None):
        """Dense integer id per distinct ``group_fields`` tuple, plus the group count."""
        fields = self.schema.group_fields if fields is None else fields
        cols = np.stack([self.column(f) for f in fields], axis=1)
        _, inv = np.unique(cols, axis=0, return_inverse=True)
        inv = np.asarray(inv).reshape(-1).astype(np.int64)
        return inv, int(inv.max()) + 1 if len(inv) else 0

    def validate(self) -> None:
        if len(self) and not np.all((self.y == 0) | (self.y == 1)):
            raise DataError("labels must be 0 or 1")
        if np.any(self.bid < 0) or np.any(self.payprice < 0):
            raise DataError("bid and payprice must be non-negative")
        for j, (name, card) in enumerate(self.schema.categorical_fields):
            col = self.X[:, j]
            if len(col) and (col.min() < 0 or col.max() >= card):
                raise DataError(f"field {name!r} has index outside [0, {card})")


def stable_hash(token: str) -> int:
    return zlib.crc32(token.encode("utf-8"))


class CategoryEncoder:
    """Maps raw tokens of one field to embedding rows.

    Policies:
      * ``dictionary`` -- stable index per distinct token, assigned in order of
        first appearance starting at 1; index 0 is reserved for unseen tokens.
      * ``hash`` -- ``stable_hash(token) % buckets``.
      * ``index`` -- tokens are already integer indices in ``[0, cardinality)``;
        anything else is an error.
    """

    def __init__(self, policy: str = "dictionary", buckets: int | None = None, cardinality: int | None = None):
        if policy not in ("dictionary", "hash", "index"):
            raise ValueError(f"unknown encoding policy {policy!r}")
        if policy == "hash" and not buckets:
            raise ValueError("hash policy needs a bucket count")
        if policy == "index" and not cardinality:
            raise ValueError("index policy needs a cardinality")
        self.policy = policy
        self.buckets = buckets
        self._cardinality = cardinality
        self.vocab: dict = {}  # token -> index >= 1; index 0 is never a vocabulary entry
        self.frozen = False

    @property
    def cardinality(self) -> int:
        if self.policy == "hash":
            return int(self.buckets)
        if self.policy == "index":
            return int(self._cardinality)
        return len(self.vocab) + 1

    def encode(self, token: str) -> int:
        if self.policy == "hash":
            return stable_hash(token) % self.buckets
        if self.policy == "index":
            idx = int(token)
            if not 0 <= idx < self._cardinality:
                raise KeyError(token)
            return idx
        idx = self.vocab.get(token)
        if idx is None:
            if self.frozen:
                return 0
            idx = self.vocab[token] = len(self.vocab) + 1
        return idx

    def decode(self, idx: int) -> str:
        if self.policy == "index":
            return str(int(idx))
        if self.policy == "hash":
            raise ValueError("hashed categories cannot be decoded")
        if int(idx) == 0:
            return UNKNOWN_TOKEN
        if not hasattr(self, "_inverse") or len(self._inverse) != len(self.vocab):
            self._inverse = {v: k for k, v in self.vocab.items()}
        return self._inverse[int(idx)]

    def freeze(self) -> "CategoryEncoder":
        self.frozen = True
        return self

    def to_dict(self) -> dict:
        return {"policy": self.policy, "buckets": self.buckets, "cardinality": self._cardinality,
                "vocab": self.vocab if self.policy == "dictionary" else None}

    @classmethod
    def from_dict(cls, d: dict) -> "CategoryEncoder":
        enc = cls(d["policy"], d.get("buckets"), d.get("cardinality"))
        if d.get("vocab"):
            enc.vocab = dict(d["vocab"])
        enc.frozen = True
        return enc


def encode_category(encoder: CategoryEncoder, raw_token: str) -> int:
    return encoder.encode(raw_token)


def index_encoders(schema: FeatureSchema) -> dict:
    return {n: CategoryEncoder("index", cardinality=c) for n, c in schema.categorical_fields}


def load_tsv(path, schema: FeatureSchema, encoders: dict | None = None, split_tag: str = "train",
             strict_unknown: bool = False) -> Dataset:
    """Parse a headered TSV log.  The whole load fails on the first bad row.

    ``encoders`` defaults to ``index`` encoders built from ``schema``.  With
    ``strict_unknown`` a frozen dictionary encoder raises on unseen tokens
    instead of mapping them to the reserved index.  The returned dataset's
    schema carries the encoders' cardinalities.
    """
    path = Path(path)
    if encoders is None:
        encoders = index_encoders(schema)
    names = schema.field_names
    with path.open("r", encoding="utf-8", newline="\n") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        expected = set(names) | {schema.label_field, schema.bid_field, schema.payprice_field}
        if set(header) != expected or len(header) != len(expected):
            raise DataError(f"{path}: header {header} does not match schema fields {sorted(expected)}")
        col = {h: i for i, h in enumerate(header)}
        cat_cols = [col[n] for n in names]
        i_y, i_bid, i_pay = col[schema.label_field], col[schema.bid_field], col[schema.payprice_field]
        X, y, bid, pay = [], [], [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(parts)}")
            label = parts[i_y]
            if label not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label {label!r} is not 0 or 1")
            try:
                b, p = float(parts[i_bid]), float(parts[i_pay])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if b < 0 or p < 0 or not (np.isfinite(b) and np.isfinite(p)):
                raise DataError(f"{path}:{lineno}: bid/payprice must be finite and >= 0, got {b}, {p}")
            row = []
            for name, c in zip(names, cat_cols):
                enc = encoders[name]
                tok = parts[c]
                if strict_unknown and enc.policy == "dictionary" and enc.frozen and tok not in enc.vocab:
                    raise DataError(f"{path}:{lineno}: unknown token {tok!r} in field {name!r}")
                try:
                    row.append(enc.encode(tok))
                except (KeyError, ValueError):
                    raise DataError(f"{path}:{lineno}: invalid token {tok!r} in field {name!r}") from None
            X.append(row)
            y.append(int(label))
            bid.append(b)
            pay.append(p)
    cards = [encoders[n].cardinality for n in names]
    X = np.array(X, dtype=np.int64).reshape(len(y), len(names))
    return Dataset(schema.with_cardinalities(cards), X, y, bid, pay, split_tag)


def save_tsv(dataset: Dataset, path, encoders: dict | None = None) -> None:
    schema = dataset.schema
    if encoders is None:
        encoders = index_encoders(schema)
    header = schema.header()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cat_pos = {n: j for j, n in enumerate(schema.field_names)}
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for i in range(len(dataset)):
            out = []
            for h in header:
                if h == schema.label_field:
                    out.append(str(int(dataset.y[i])))
                elif h == schema.bid_field:
                    out.append(repr(float(dataset.bid[i])))
                elif h == schema.payprice_field:
                    out.append(repr(float(dataset.payprice[i])))
                else:
                    out.append(encoders[h].decode(dataset.X[i, cat_pos[h]]))
            fh.write("\t".join(out) + "\n")


def split_by_fraction(dataset: Dataset, fractions, ordered: bool = True, seed: int = 0,
                      tags=None) -> list:
    """Split into consecutive (``ordered``) or seeded-shuffled parts.

    Part sizes use largest-remainder rounding, so each differs from its exact
    share by less than one row.
    """
    n = len(dataset)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr <= 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError(f"fractions must be positive and sum to 1, got {list(fractions)}")
    exact = fr * n
    sizes = np.floor(exact).astype(int)
    short = n - sizes.sum()
    for j in np.argsort(-(exact - sizes), kind="stable")[:short]:
        sizes[j] += 1
    idx = np.arange(n) if ordered else np.random.default_rng(seed).permutation(n)
    tags = tags or [dataset.split_tag] * len(sizes)
    parts, start = [], 0
    for size, tag in zip(sizes, tags):
        parts.append(dataset.subset(idx[start:start + size], tag))
        start += size
    return parts
