"""Synthetic 3-class flow fixture for tests and end-to-end smoke runs.

Clearly synthetic, never mixed with real captures. Each class gets one
strongly discriminative feature: its value is drawn from a high band
(900-999) for flows of that class and a low band (100-199) otherwise, so a
trained model should attribute that class mostly to its planted feature.
All values are 3-digit integers, which keeps every serialized flow the
same token length.
"""
from __future__ import annotations

import csv
import io

import numpy as np

from .flow_data import COARSE_LABELS, CoarseLabel, FeatureSchema, FlowRecord, LabeledDataset

SYNTHETIC_SCHEMA = FeatureSchema(
    names=(
        "Destination Port",
        "Flow Duration",
        "Flow IAT Min",
        "Flow IAT Max",
        "Flow Packets/s",
        "Fwd Packet Length Max",
        "Total Length of Fwd Packets",
        "Flow IAT Mean",
    )
)

# planted discriminative feature per class (behavioral sketch: benign flows
# are long-lived, DDoS is high-rate, web attacks have extreme inter-arrival gaps)
PLANTED_FEATURE = {
    CoarseLabel.BENIGN: "Flow Duration",
    CoarseLabel.DDOS: "Flow Packets/s",
    CoarseLabel.WEB_ATTACK: "Flow IAT Min",
}

_RAW_LABEL = {
    CoarseLabel.BENIGN: "BENIGN",
    CoarseLabel.DDOS: "DDoS",
    CoarseLabel.WEB_ATTACK: "Web Attack – Brute Force",
}


def generate_synthetic_dataset(
    n: int = 3000, seed: int = 0, schema: FeatureSchema = SYNTHETIC_SCHEMA
) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    planted_idx = {c: schema.names.index(PLANTED_FEATURE[c]) for c in COARSE_LABELS}
    records = []
    for i in range(n):
        label = COARSE_LABELS[i % 3]
        values = rng.integers(100, 200, size=schema.d).astype(np.float64)
        values[planted_idx[label]] = float(rng.integers(900, 1000))
        records.append((FlowRecord(tuple(values), _RAW_LABEL[label]), label))
    return LabeledDataset(schema, records)


def dataset_to_csv_bytes(dataset: LabeledDataset, label_column: str = "Label") -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow([*dataset.schema.names, label_column])
    for rec, _ in dataset.records:
        writer.writerow([*(f"{v:g}" for v in rec.features), rec.raw_label])
    return buf.getvalue().encode("utf-8")
