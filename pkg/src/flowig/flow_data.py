"""Flow CSV ingestion, coarse label merging, dedup, and leak-safe stratified splits."""
from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import SchemaError, UnknownLabelError, DataError
from .textualize import ValueFormatPolicy, serialize, text_hash


class CoarseLabel(Enum):
    BENIGN = 0
    DDOS = 1
    WEB_ATTACK = 2


COARSE_LABELS = (CoarseLabel.BENIGN, CoarseLabel.DDOS, CoarseLabel.WEB_ATTACK)


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 1:
            raise SchemaError("schema must have at least one feature")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("schema feature names must be unique")

    @property
    def d(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class FlowRecord:
    features: tuple[float, ...]
    raw_label: str


@dataclass
class LabeledDataset:
    schema: FeatureSchema
    records: list[tuple[FlowRecord, CoarseLabel]]

    def __len__(self) -> int:
        return len(self.records)

    def class_counts(self) -> dict[CoarseLabel, int]:
        counts = {c: 0 for c in COARSE_LABELS}
        for _, label in self.records:
            counts[label] += 1
        return counts

    def raw_label_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for rec, _ in self.records:
            counts[rec.raw_label] = counts.get(rec.raw_label, 0) + 1
        return counts


@dataclass
class ParseReport:
    rows_total: int = 0
    rows_kept: int = 0
    rows_dropped_nonfinite: int = 0
    rows_dropped_unparseable: int = 0

    @property
    def rows_dropped(self) -> int:
        return self.rows_dropped_nonfinite + self.rows_dropped_unparseable


@dataclass
class DedupReport:
    before: int
    after: int
    removed: int
    label_conflicts: int = 0

    def __post_init__(self):
        assert self.before - self.removed == self.after

    def format(self) -> str:
        return (
            f"deduplication: {self.before} -> {self.after}\n"
            f"removed: {self.removed}\n"
            f"conflicting-label duplicates: {self.label_conflicts}\n"
        )


@dataclass
class SplitDataset:
    train: LabeledDataset
    validation: LabeledDataset
    test: LabeledDataset
    seed: int
    ratios: tuple[float, float, float]

    def splits(self) -> dict[str, LabeledDataset]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


# Raw label -> coarse mapping, keys normalized by _normalize_label.
_LABEL_MAP = {
    "benign": CoarseLabel.BENIGN,
    "ddos": CoarseLabel.DDOS,
    "web attack - brute force": CoarseLabel.WEB_ATTACK,
    "web attack - xss": CoarseLabel.WEB_ATTACK,
    "web attack - sql injection": CoarseLabel.WEB_ATTACK,
}

_DASHES = re.compile(r"[‐‑‒–—―]")
_WS = re.compile(r"\s+")


def _normalize_label(raw: str) -> str:
    # CICIDS2017 distributions vary in dash character and spacing
    s = _DASHES.sub("-", raw).strip().lower()
    return _WS.sub(" ", s)


def merge_labels(raw_label: str) -> CoarseLabel:
    key = _normalize_label(raw_label)
    if key not in _LABEL_MAP:
        raise UnknownLabelError(f"unknown raw label: {raw_label!r}")
    return _LABEL_MAP[key]


def parse_flow_csv(
    source,
    schema: FeatureSchema,
    label_column: str = "Label",
) -> tuple[LabeledDataset, ParseReport]:
    """Parse a header-bearing CSV into records in schema column order.

    `source` is a binary file-like object or a path. Rows with non-finite or
    unparseable numeric cells are dropped and tallied, never fatal.
    """
    close = False
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        stream = open(source, "rb")
        close = True
    else:
        stream = source
    try:
        text = io.TextIOWrapper(stream, encoding="utf-8-sig", newline="")
        reader = csv.reader(text)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("CSV has no header row")
        header = [h.strip() for h in header]
        col_index = {}
        for name in schema.names:
            if name not in header:
                raise SchemaError(f"missing required column: {name!r}")
            col_index[name] = header.index(name)
        if label_column not in header:
            raise SchemaError(f"missing required column: {label_column!r}")
        label_idx = header.index(label_column)
        positions = [col_index[n] for n in schema.names]

        report = ParseReport()
        records: list[tuple[FlowRecord, CoarseLabel]] = []
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            report.rows_total += 1
            try:
                values = tuple(float(row[p]) for p in positions)
                raw_label = row[label_idx].strip()
            except (ValueError, IndexError):
                report.rows_dropped_unparseable += 1
                continue
            if not all(math.isfinite(v) for v in values):
                report.rows_dropped_nonfinite += 1
                continue
            coarse = merge_labels(raw_label)
            records.append((FlowRecord(values, raw_label), coarse))
            report.rows_kept += 1
        return LabeledDataset(schema, records), report
    finally:
        text.detach()
        if close:
            stream.close()


def record_hash(record: FlowRecord, schema: FeatureSchema, policy: ValueFormatPolicy) -> str:
    return text_hash(serialize(record, schema, policy).text)


def deduplicate(
    dataset: LabeledDataset, policy: ValueFormatPolicy = ValueFormatPolicy()
) -> tuple[LabeledDataset, DedupReport]:
    """Keep the first occurrence of each serialization hash, in input order."""
    seen: dict[str, CoarseLabel] = {}
    kept: list[tuple[FlowRecord, CoarseLabel]] = []
    conflicts = 0
    for rec, label in dataset.records:
        h = record_hash(rec, dataset.schema, policy)
        if h in seen:
            if seen[h] != label:
                conflicts += 1
            continue
        seen[h] = label
        kept.append((rec, label))
    report = DedupReport(
        before=len(dataset.records),
        after=len(kept),
        removed=len(dataset.records) - len(kept),
        label_conflicts=conflicts,
    )
    return LabeledDataset(dataset.schema, kept), report


def largest_remainder_sizes(n: int, ratios: tuple[float, ...]) -> tuple[int, ...]:
    """Partition n into len(ratios) integer parts minimizing proportional distortion."""
    exact = [n * r for r in ratios]
    base = [int(math.floor(e)) for e in exact]
    remainder = n - sum(base)
    # ties broken toward earlier splits (train before val before test)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:remainder]:
        base[i] += 1
    return tuple(base)


def stratified_split(
    dataset: LabeledDataset,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> SplitDataset:
    """Seeded per-class shuffle then largest-remainder partition into train/val/test."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1.0, got {ratios}")
    by_class: dict[CoarseLabel, list[int]] = {c: [] for c in COARSE_LABELS}
    for i, (_, label) in enumerate(dataset.records):
        by_class[label].append(i)
    for c, idxs in by_class.items():
        if 0 < len(idxs) < 3:
            raise DataError(f"class {c.name} has {len(idxs)} records; need >= 3 to split")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for c in COARSE_LABELS:
        idxs = np.array(by_class[c], dtype=np.int64)
        if len(idxs) == 0:
            continue
        perm = idxs[rng.permutation(len(idxs))]
        sizes = largest_remainder_sizes(len(perm), ratios)
        offset = 0
        for s, size in enumerate(sizes):
            parts[s].extend(int(i) for i in perm[offset : offset + size])
            offset += size
    datasets = [
        LabeledDataset(dataset.schema, [dataset.records[i] for i in part])
        for part in parts
    ]
    return SplitDataset(datasets[0], datasets[1], datasets[2], seed=seed, ratios=ratios)


def audit_overlap(
    split: SplitDataset, policy: ValueFormatPolicy = ValueFormatPolicy()
) -> dict[tuple[str, str], int]:
    """Sizes of pairwise intersections of serialization-hash sets; all 0 on a valid split."""
    hashes = {
        name: {record_hash(rec, ds.schema, policy) for rec, _ in ds.records}
        for name, ds in split.splits().items()
    }
    pairs = [("train", "validation"), ("train", "test"), ("validation", "test")]
    return {(a, b): len(hashes[a] & hashes[b]) for a, b in pairs}
