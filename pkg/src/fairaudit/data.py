"""Tabular ingestion, intersectional group enumeration, and count tables.

A :class:`Schema` names the protected-attribute columns (each with an
ordered category list), the outcome column, and optionally a mechanism
(predicted-label) column.  Rows are stored as category indices; every
downstream object (group index, count table, probability table) uses the
same deterministic group enumeration: the lexicographic order of category
index tuples.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Schema",
    "Provenance",
    "Dataset",
    "GroupIndex",
    "CountTable",
    "DataError",
    "load_dataset",
    "build_counts",
    "bootstrap_sample",
    "write_dataset_csv",
]


class DataError(ValueError):
    """Raised for schema violations and malformed input files."""


@dataclass(frozen=True)
class Schema:
    """Column layout of a coded dataset.

    ``protected_attributes`` is an ordered list of (name, categories);
    attribute order defines the group-encoding order.  Category coding
    (merging rare values, binarizing) is the caller's responsibility:
    the loader never merges values.
    """

    protected_attributes: tuple[tuple[str, tuple[str, ...]], ...]
    outcome_column: str
    outcome_labels: tuple[str, ...]
    mechanism_column: str | None = None

    def __post_init__(self):
        if not self.protected_attributes:
            raise DataError("schema needs at least one protected attribute")
        names = [name for name, _ in self.protected_attributes]
        if len(set(names)) != len(names):
            raise DataError("duplicate protected attribute names")
        for name, cats in self.protected_attributes:
            if len(cats) < 2:
                raise DataError(f"attribute {name!r} needs >= 2 categories")
            if len(set(cats)) != len(cats):
                raise DataError(f"attribute {name!r} has duplicate categories")
        if len(self.outcome_labels) < 2:
            raise DataError("outcome needs >= 2 labels")
        if len(set(self.outcome_labels)) != len(self.outcome_labels):
            raise DataError("duplicate outcome labels")

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.protected_attributes)

    @property
    def attribute_sizes(self) -> tuple[int, ...]:
        return tuple(len(cats) for _, cats in self.protected_attributes)

    @property
    def n_outcomes(self) -> int:
        return len(self.outcome_labels)

    def to_dict(self) -> dict:
        return {
            "protected_attributes": [
                {"name": name, "categories": list(cats)}
                for name, cats in self.protected_attributes
            ],
            "outcome_column": self.outcome_column,
            "outcome_labels": list(self.outcome_labels),
            "mechanism_column": self.mechanism_column,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        try:
            attrs = tuple(
                (a["name"], tuple(a["categories"])) for a in d["protected_attributes"]
            )
            return cls(
                protected_attributes=attrs,
                outcome_column=d["outcome_column"],
                outcome_labels=tuple(d["outcome_labels"]),
                mechanism_column=d.get("mechanism_column"),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed schema document: {exc}") from exc

    @classmethod
    def from_json(cls, path: str) -> "Schema":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class Provenance:
    source: str
    seed: int | None = None


@dataclass(frozen=True)
class Dataset:
    """Coded rows: protected-attribute indices, outcome index, optional
    mechanism outcome index.  ``extras`` keeps any non-schema CSV columns
    verbatim as pass-through text (used only by the mechanism trainer).
    """

    schema: Schema
    attributes: np.ndarray  # (N, p) int
    outcomes: np.ndarray  # (N,) int
    mechanism: np.ndarray | None = None  # (N,) int
    extras: dict[str, tuple[str, ...]] = field(default_factory=dict)
    provenance: Provenance = Provenance("unknown")

    def __post_init__(self):
        n, p = self.attributes.shape
        if n < 1:
            raise DataError("dataset needs at least one row")
        if p != len(self.schema.protected_attributes):
            raise DataError("attribute matrix width does not match schema")
        sizes = np.asarray(self.schema.attribute_sizes)
        if (self.attributes < 0).any() or (self.attributes >= sizes).any():
            raise DataError("attribute index out of schema bounds")
        if self.outcomes.shape != (n,):
            raise DataError("outcome vector length mismatch")
        if (self.outcomes < 0).any() or (self.outcomes >= self.schema.n_outcomes).any():
            raise DataError("outcome index out of schema bounds")
        if self.mechanism is not None:
            if self.mechanism.shape != (n,):
                raise DataError("mechanism vector length mismatch")
            if (self.mechanism < 0).any() or (
                self.mechanism >= self.schema.n_outcomes
            ).any():
                raise DataError("mechanism index out of schema bounds")
        for name, col in self.extras.items():
            if len(col) != n:
                raise DataError(f"extra column {name!r} length mismatch")

    @property
    def n_rows(self) -> int:
        return self.attributes.shape[0]

    def take(self, idx: np.ndarray, provenance: Provenance) -> "Dataset":
        """Row subset/resample preserving schema and extras."""
        return Dataset(
            schema=self.schema,
            attributes=self.attributes[idx],
            outcomes=self.outcomes[idx],
            mechanism=None if self.mechanism is None else self.mechanism[idx],
            extras={
                name: tuple(col[i] for i in idx) for name, col in self.extras.items()
            },
            provenance=provenance,
        )

    def with_mechanism(self, labels: np.ndarray) -> "Dataset":
        return Dataset(
            schema=self.schema,
            attributes=self.attributes,
            outcomes=self.outcomes,
            mechanism=np.asarray(labels, dtype=np.int64),
            extras=self.extras,
            provenance=self.provenance,
        )


@dataclass(frozen=True)
class GroupIndex:
    """Enumeration of all intersectional groups for a schema.

    Groups are category-index tuples in lexicographic order, so group j's
    flat index equals ``np.ravel_multi_index(tuple, sizes)``.  ``encodings``
    holds the concatenated per-attribute one-hot indicator vectors (exactly
    one indicator per attribute block).
    """

    schema: Schema
    groups: tuple[tuple[int, ...], ...]
    encodings: np.ndarray  # (|A|, sum of sizes) float

    @classmethod
    def from_schema(cls, schema: Schema) -> "GroupIndex":
        sizes = schema.attribute_sizes
        groups = tuple(itertools.product(*(range(k) for k in sizes)))
        enc = np.zeros((len(groups), sum(sizes)), dtype=np.float64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        for j, g in enumerate(groups):
            for d, v in enumerate(g):
                enc[j, offsets[d] + v] = 1.0
        return cls(schema=schema, groups=groups, encodings=enc)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def encoding_dim(self) -> int:
        return self.encodings.shape[1]

    @property
    def attribute_sizes(self) -> tuple[int, ...]:
        return self.schema.attribute_sizes

    def group_labels(self) -> list[str]:
        out = []
        for g in self.groups:
            parts = [
                cats[v] for (name, cats), v in zip(self.schema.protected_attributes, g)
            ]
            out.append("|".join(parts))
        return out

    def flat_index(self, attributes: np.ndarray) -> np.ndarray:
        """Map rows of category indices to flat group ids."""
        return np.ravel_multi_index(
            tuple(attributes[:, d] for d in range(attributes.shape[1])),
            self.attribute_sizes,
        )


@dataclass(frozen=True)
class CountTable:
    """Joint outcome counts per group, plus marginals."""

    counts: np.ndarray  # (|A|, |Y|) int
    group_totals: np.ndarray  # (|A|,) int
    grand_total: int

    def __post_init__(self):
        if (self.counts < 0).any():
            raise DataError("negative counts")
        if not np.array_equal(self.counts.sum(axis=1), self.group_totals):
            raise DataError("group totals inconsistent with counts")
        if int(self.group_totals.sum()) != self.grand_total:
            raise DataError("grand total inconsistent with counts")

    @classmethod
    def from_counts(cls, counts: np.ndarray) -> "CountTable":
        counts = np.asarray(counts, dtype=np.int64)
        return cls(
            counts=counts,
            group_totals=counts.sum(axis=1),
            grand_total=int(counts.sum()),
        )

    @property
    def n_groups(self) -> int:
        return self.counts.shape[0]

    @property
    def n_outcomes(self) -> int:
        return self.counts.shape[1]


def load_dataset(csv_path: str, schema: Schema) -> Dataset:
    """Read a coded CSV (UTF-8, comma-separated, header required).

    Every schema column must appear in the header; cells are mapped to
    category indices and unknown category values are rejected.  Columns not
    named by the schema are retained verbatim in ``extras``.
    """
    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{csv_path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise DataError(f"{csv_path}: no data rows")

    col_of = {name: i for i, name in enumerate(header)}
    needed = list(schema.attribute_names) + [schema.outcome_column]
    if schema.mechanism_column is not None:
        needed.append(schema.mechanism_column)
    missing = [c for c in needed if c not in col_of]
    if missing:
        raise DataError(f"{csv_path}: missing column(s) {missing}")

    cat_maps = [
        {c: i for i, c in enumerate(cats)} for _, cats in schema.protected_attributes
    ]
    out_map = {c: i for i, c in enumerate(schema.outcome_labels)}

    n = len(rows)
    attrs = np.empty((n, len(cat_maps)), dtype=np.int64)
    outcomes = np.empty(n, dtype=np.int64)
    mech = (
        np.empty(n, dtype=np.int64) if schema.mechanism_column is not None else None
    )
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{csv_path}: row {r + 2} has {len(row)} cells, "
                            f"expected {len(header)}")
        for d, name in enumerate(schema.attribute_names):
            val = row[col_of[name]]
            try:
                attrs[r, d] = cat_maps[d][val]
            except KeyError:
                raise DataError(
                    f"{csv_path}: row {r + 2}: unmapped category {val!r} "
                    f"in column {name!r}"
                ) from None
        val = row[col_of[schema.outcome_column]]
        try:
            outcomes[r] = out_map[val]
        except KeyError:
            raise DataError(
                f"{csv_path}: row {r + 2}: unmapped category {val!r} "
                f"in column {schema.outcome_column!r}"
            ) from None
        if mech is not None:
            val = row[col_of[schema.mechanism_column]]
            try:
                mech[r] = out_map[val]
            except KeyError:
                raise DataError(
                    f"{csv_path}: row {r + 2}: unmapped category {val!r} "
                    f"in column {schema.mechanism_column!r}"
                ) from None

    extra_names = [c for c in header if c not in needed]
    extras = {
        name: tuple(row[col_of[name]] for row in rows) for name in extra_names
    }
    return Dataset(
        schema=schema,
        attributes=attrs,
        outcomes=outcomes,
        mechanism=mech,
        extras=extras,
        provenance=Provenance(source=csv_path),
    )


def build_counts(
    d: Dataset, use_mechanism_labels: bool = False
) -> tuple[GroupIndex, CountTable]:
    """Tabulate outcome counts at every intersection of the protected
    attributes.  Groups with no rows appear with zero totals."""
    if use_mechanism_labels and d.mechanism is None:
        raise DataError("dataset has no mechanism column")
    gi = GroupIndex.from_schema(d.schema)
    labels = d.mechanism if use_mechanism_labels else d.outcomes
    flat = gi.flat_index(d.attributes)
    k = d.schema.n_outcomes
    counts = np.bincount(flat * k + labels, minlength=gi.n_groups * k)
    return gi, CountTable.from_counts(counts.reshape(gi.n_groups, k))


def bootstrap_sample(d: Dataset, n: int, seed: int) -> Dataset:
    """Resample ``n`` rows i.i.d. with replacement; deterministic per seed."""
    if n < 1:
        raise DataError("bootstrap size must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, d.n_rows, size=n)
    return d.take(
        idx, Provenance(source=f"{d.provenance.source}#bootstrap", seed=seed)
    )


def write_dataset_csv(d: Dataset, path: str) -> None:
    """Write a dataset back to coded CSV (decoded category labels), in a
    form ``load_dataset`` accepts with the same schema."""
    schema = d.schema
    header = list(schema.attribute_names) + [schema.outcome_column]
    if d.mechanism is not None:
        header.append(schema.mechanism_column or "mechanism")
    extra_names = list(d.extras)
    header += extra_names
    cats = [list(c) for _, c in schema.protected_attributes]
    outs = list(schema.outcome_labels)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in range(d.n_rows):
            row = [cats[dd][d.attributes[r, dd]] for dd in range(len(cats))]
            row.append(outs[d.outcomes[r]])
            if d.mechanism is not None:
                row.append(outs[d.mechanism[r]])
            row += [d.extras[name][r] for name in extra_names]
            writer.writerow(row)
