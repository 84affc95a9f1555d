"""Operator-facing pipeline: prepare -> train -> evaluate -> explain -> report.

Each command writes its artifacts to the work dir and never mutates a
previous stage's outputs, so the dedup counts and overlap audits can be
inspected independently. All outputs are byte-deterministic given the
same inputs and seeds.
"""
from __future__ import annotations

import dataclasses
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import click

from . import attribution, checkpoint, encoder, evaluation, flow_data, synthetic, textualize, tokenizer, training
from .errors import (
    AuditError,
    ConfigError,
    DataError,
    FlowigError,
    NumericError,
)
from .flow_data import COARSE_LABELS, CoarseLabel, FeatureSchema, LabeledDataset

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_AUDIT = 5

SPLIT_NAMES = ("train", "validation", "test")
VARIANTS = (encoder.ABSOLUTE, encoder.DISENTANGLED)


@dataclass
class RunConfig:
    work_dir: str = "work"
    input_csv: str | None = None
    schema: object = "synthetic"          # "synthetic" or explicit feature-name list
    label_column: str = "Label"
    significant_digits: int = 6
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0
    variant: str = encoder.ABSOLUTE
    encoder: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    ig: dict = field(default_factory=dict)
    ig_max_examples: int | None = None
    top_k: int = 15
    heatmap_formats: tuple[str, ...] = ("csv", "svg")

    @classmethod
    def from_file(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg = cls(**data)
        cfg.ratios = tuple(cfg.ratios)
        cfg.heatmap_formats = tuple(cfg.heatmap_formats)
        return cfg

    def feature_schema(self) -> FeatureSchema:
        if self.schema == "synthetic":
            return synthetic.SYNTHETIC_SCHEMA
        if isinstance(self.schema, (list, tuple)):
            return FeatureSchema(names=tuple(self.schema))
        raise ConfigError(
            'schema must be "synthetic" or an explicit list of feature names'
        )

    def format_policy(self) -> textualize.ValueFormatPolicy:
        return textualize.ValueFormatPolicy(significant_digits=self.significant_digits)

    def encoder_config(self, vocab_size: int, variant: str) -> encoder.EncoderConfig:
        defaults = dict(layers=2, heads=4, d_model=64, d_ff=128, max_seq_len=256)
        defaults.update(self.encoder)
        return encoder.EncoderConfig(
            vocab_size=vocab_size,
            attention_variant=variant,
            seed=self.seed,
            **defaults,
        )

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(seed=self.seed, **self.train)

    def ig_config(self) -> attribution.IGConfig:
        return attribution.IGConfig(**self.ig)


@contextmanager
def _work_dir_lock(work_dir: Path):
    work_dir.mkdir(parents=True, exist_ok=True)
    lock = work_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise FlowigError(
            f"work dir {work_dir} is locked by another run (remove {lock} if stale)"
        )
    try:
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _echo(msg: str) -> None:
    click.echo(msg, color=False if os.environ.get("NO_COLOR") else None)


def _fail(exc: FlowigError) -> None:
    click.echo(f"error: {exc}", err=True)
    if isinstance(exc, ConfigError):
        sys.exit(EXIT_CONFIG)
    if isinstance(exc, DataError):
        sys.exit(EXIT_DATA)
    if isinstance(exc, NumericError):
        sys.exit(EXIT_NUMERIC)
    if isinstance(exc, AuditError):
        sys.exit(EXIT_AUDIT)
    sys.exit(1)


def _write_split_csv(path: Path, ds: LabeledDataset, label_column: str) -> None:
    data = synthetic.dataset_to_csv_bytes(ds, label_column)
    path.write_bytes(data)


def _load_split(work: Path, name: str, cfg: RunConfig) -> LabeledDataset:
    path = work / f"split_{name}.csv"
    if not path.exists():
        raise DataError(f"missing artifact {path}; run `flowig prepare` first")
    ds, _ = flow_data.parse_flow_csv(path, cfg.feature_schema(), cfg.label_column)
    return ds


def _tokenize_dataset(
    ds: LabeledDataset, vocab, cfg: RunConfig, max_seq_len: int
) -> list[tokenizer.TokenizedExample]:
    policy = cfg.format_policy()
    out = []
    for rec, label in ds.records:
        flow = textualize.serialize(rec, ds.schema, policy)
        out.append(tokenizer.tokenize(flow, vocab, max_seq_len, label))
    return out


def _ckpt_path(work: Path, variant: str) -> Path:
    return work / f"model_{variant}.ckpt"


# ---------------------------------------------------------------------------


@click.group()
def main():
    """Explainable flow-level intrusion detection pipeline."""


def _common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None)(fn)
    fn = click.option("--work-dir", default=None, help="override work dir")(fn)
    fn = click.option("--seed", type=int, default=None, help="override seed")(fn)
    return fn


def _resolve(config_path, work_dir, seed, variant=None, steps=None, top_k=None) -> RunConfig:
    cfg = RunConfig.from_file(config_path)
    if work_dir is not None:
        cfg.work_dir = work_dir
    if seed is not None:
        cfg.seed = seed
    if variant is not None:
        cfg.variant = variant
    if steps is not None:
        cfg.ig = dict(cfg.ig, steps=steps)
    if top_k is not None:
        cfg.top_k = top_k
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown attention variant {cfg.variant!r}")
    return cfg


@main.command("prepare")
@_common_options
@click.option("--input-csv", default=None, help="override input CSV path")
def cmd_prepare(config_path, work_dir, seed, input_csv):
    """Parse, dedup, and split the input CSV; write manifests and audit reports."""
    try:
        cfg = _resolve(config_path, work_dir, seed)
        if input_csv is not None:
            cfg.input_csv = input_csv
        if cfg.input_csv is None:
            raise ConfigError("no input_csv configured")
        if not Path(cfg.input_csv).exists():
            raise DataError(f"input CSV not found: {cfg.input_csv}")
        work = Path(cfg.work_dir)
        with _work_dir_lock(work):
            _run_prepare(cfg, work)
    except FlowigError as e:
        _fail(e)


def _run_prepare(cfg: RunConfig, work: Path) -> None:
    schema = cfg.feature_schema()
    policy = cfg.format_policy()
    dataset, parse_report = flow_data.parse_flow_csv(
        cfg.input_csv, schema, cfg.label_column
    )
    deduped, dedup_report = flow_data.deduplicate(dataset, policy)
    split = flow_data.stratified_split(deduped, cfg.ratios, cfg.seed)
    overlap = flow_data.audit_overlap(split, policy)

    manifest_lines = []
    for name, ds in split.splits().items():
        _write_split_csv(work / f"split_{name}.csv", ds, cfg.label_column)
        for rec, label in ds.records:
            h = flow_data.record_hash(rec, schema, policy)
            manifest_lines.append(f"{h}\t{name}\t{label.name}\n")
    (work / "manifest.tsv").write_text("".join(manifest_lines), encoding="utf-8")

    report_text = (
        dedup_report.format()
        + f"rows dropped in parsing: {parse_report.rows_dropped}"
        f" (non-finite {parse_report.rows_dropped_nonfinite},"
        f" unparseable {parse_report.rows_dropped_unparseable})\n"
    )
    (work / "dedup_report.txt").write_text(report_text, encoding="utf-8")
    audit_text = "".join(
        f"{a} x {b}\t{n}\n" for (a, b), n in overlap.items()
    )
    (work / "overlap_audit.txt").write_text(audit_text, encoding="utf-8")

    _echo(f"{dedup_report.before} -> {dedup_report.after}")
    counts = deduped.class_counts()
    _echo("class counts: " + ", ".join(f"{c.name}={counts[c]}" for c in COARSE_LABELS))
    _echo("overlap audit: " + audit_text.replace("\n", "; ").rstrip("; "))
    if any(overlap.values()):
        raise AuditError(f"split overlap detected: {overlap}")


@main.command("train")
@_common_options
@click.option("--variant", type=click.Choice(VARIANTS), default=None)
def cmd_train(config_path, work_dir, seed, variant):
    """Train the selected attention variant on the prepared splits."""
    try:
        cfg = _resolve(config_path, work_dir, seed, variant=variant)
        work = Path(cfg.work_dir)
        with _work_dir_lock(work):
            _run_train(cfg, work)
    except FlowigError as e:
        _fail(e)


def _run_train(cfg: RunConfig, work: Path) -> None:
    schema = cfg.feature_schema()
    vocab = tokenizer.build_vocab(schema)
    (work / "vocab.tsv").write_text(vocab.to_lines(), encoding="utf-8")
    enc_cfg = cfg.encoder_config(vocab.size, cfg.variant)

    train_ds = _load_split(work, "train", cfg)
    val_ds = _load_split(work, "validation", cfg)
    train_ex = _tokenize_dataset(train_ds, vocab, cfg, enc_cfg.max_seq_len)
    val_ex = _tokenize_dataset(val_ds, vocab, cfg, enc_cfg.max_seq_len)

    counts = train_ds.class_counts()
    weights = training.class_weights(tuple(counts[c] for c in COARSE_LABELS))
    params = encoder.init_params(enc_cfg)
    best, log = training.train(
        params, enc_cfg, train_ex, val_ex, weights, cfg.train_config()
    )
    checkpoint.save_checkpoint(_ckpt_path(work, cfg.variant), enc_cfg, best)
    log_lines = [
        json.dumps(dataclasses.asdict(rec), sort_keys=True) + "\n" for rec in log.epochs
    ]
    (work / f"train_log_{cfg.variant}.jsonl").write_text(
        "".join(log_lines), encoding="utf-8"
    )
    _echo(
        f"trained {cfg.variant}: best epoch {log.best_epoch},"
        f" val macro-F1 {log.best_val_macro_f1:.4f}"
    )


@main.command("evaluate")
@_common_options
@click.option("--variant", type=click.Choice(VARIANTS), default=None)
def cmd_evaluate(config_path, work_dir, seed, variant):
    """Compute the metrics report on the test split."""
    try:
        cfg = _resolve(config_path, work_dir, seed, variant=variant)
        work = Path(cfg.work_dir)
        with _work_dir_lock(work):
            _run_evaluate(cfg, work)
    except FlowigError as e:
        _fail(e)


def _run_evaluate(cfg: RunConfig, work: Path) -> None:
    ckpt = _ckpt_path(work, cfg.variant)
    if not ckpt.exists():
        raise DataError(f"missing checkpoint {ckpt}; run `flowig train` first")
    enc_cfg, params = checkpoint.load_checkpoint(ckpt)
    schema = cfg.feature_schema()
    vocab = tokenizer.build_vocab(schema)
    test_ds = _load_split(work, "test", cfg)
    counts = test_ds.class_counts()
    missing = [c.name for c in COARSE_LABELS if counts[c] == 0]
    if missing:
        raise DataError(f"class absent from test split: {', '.join(missing)}")
    test_ex = _tokenize_dataset(test_ds, vocab, cfg, enc_cfg.max_seq_len)
    _, preds = training.evaluate_examples(params, enc_cfg, test_ex)
    cm = evaluation.confusion(preds, [e.label for e in test_ex])
    report = evaluation.metrics(cm)
    text = report.format() + "confusion_matrix\n" + "".join(
        "\t".join(str(v) for v in row) + "\n" for row in cm.counts
    )
    (work / f"metrics_{cfg.variant}.txt").write_text(text, encoding="utf-8")
    _echo(text.rstrip("\n"))


@main.command("explain")
@_common_options
@click.option("--variant", type=click.Choice(VARIANTS), default=None)
@click.option("--steps", type=int, default=None, help="override IG steps")
@click.option("--top-k", type=int, default=None, help="override heatmap top-K")
def cmd_explain(config_path, work_dir, seed, variant, steps, top_k):
    """Build the class x feature attribution heatmap and per-example dump."""
    try:
        cfg = _resolve(config_path, work_dir, seed, variant=variant, steps=steps, top_k=top_k)
        work = Path(cfg.work_dir)
        with _work_dir_lock(work):
            _run_explain(cfg, work)
    except FlowigError as e:
        _fail(e)


def _select_examples(pairs, limit):
    """pairs: list of (hash, TokenizedExample)."""
    if limit is None or limit >= len(pairs):
        return pairs
    # round-robin across classes so a cap never starves the minority class
    by_class = {c: [] for c in COARSE_LABELS}
    for pair in pairs:
        by_class[pair[1].label].append(pair)
    out = []
    i = 0
    while len(out) < limit:
        added = False
        for c in COARSE_LABELS:
            if i < len(by_class[c]) and len(out) < limit:
                out.append(by_class[c][i])
                added = True
        if not added:
            break
        i += 1
    return out


def _run_explain(cfg: RunConfig, work: Path) -> None:
    ckpt = _ckpt_path(work, cfg.variant)
    if not ckpt.exists():
        raise DataError(f"missing checkpoint {ckpt}; run `flowig train` first")
    enc_cfg, params = checkpoint.load_checkpoint(ckpt)
    schema = cfg.feature_schema()
    vocab = tokenizer.build_vocab(schema)
    policy = cfg.format_policy()
    test_ds = _load_split(work, "test", cfg)
    counts = test_ds.class_counts()
    missing = [c.name for c in COARSE_LABELS if counts[c] == 0]
    if missing:
        raise DataError(f"class absent from test split: {', '.join(missing)}")
    all_ex = _tokenize_dataset(test_ds, vocab, cfg, enc_cfg.max_seq_len)
    pairs = [
        (flow_data.record_hash(rec, schema, policy), ex)
        for (rec, _), ex in zip(test_ds.records, all_ex)
    ]
    pairs = _select_examples(pairs, cfg.ig_max_examples)
    hashes = [h for h, _ in pairs]
    test_ex = [e for _, e in pairs]

    ig_cfg = cfg.ig_config()
    matrix, results = attribution.class_attribution_matrix(
        params, enc_cfg, test_ex, schema, ig_cfg, cfg.top_k, pad_id=vocab.pad_id
    )
    for fmt in cfg.heatmap_formats:
        data = attribution.export_heatmap(matrix, fmt)
        (work / f"heatmap_{cfg.variant}.{fmt}").write_bytes(data)

    dump_lines = []
    for h, ex, res in zip(hashes, test_ex, results):
        dump_lines.append(
            json.dumps(
                {
                    "hash": h,
                    "class": res.target_class.name,
                    "feature_attr": [float(v) for v in res.feature_attr],
                    "completeness_gap": res.completeness_gap,
                    "relative_gap": res.relative_gap,
                },
                sort_keys=True,
            )
            + "\n"
        )
    (work / f"attributions_{cfg.variant}.jsonl").write_text(
        "".join(dump_lines), encoding="utf-8"
    )
    frac = sum(r.tolerance_exceeded for r in results) / len(results)
    summary = (
        f"examples: {len(results)}\n"
        f"ig_steps: {ig_cfg.steps}\n"
        f"completeness_tolerance: {ig_cfg.completeness_tolerance}\n"
        f"fraction_exceeding_tolerance: {frac:.6f}\n"
    )
    (work / f"completeness_{cfg.variant}.txt").write_text(summary, encoding="utf-8")
    _echo(f"fraction of examples exceeding completeness tolerance: {frac:.4f}")


@main.command("report")
@_common_options
def cmd_report(config_path, work_dir, seed):
    """Aggregate all stage artifacts into one run report."""
    try:
        cfg = _resolve(config_path, work_dir, seed)
        work = Path(cfg.work_dir)
        with _work_dir_lock(work):
            _run_report(cfg, work)
    except FlowigError as e:
        _fail(e)


def _run_report(cfg: RunConfig, work: Path) -> None:
    required = {
        "dedup_report.txt": "flowig prepare",
        "overlap_audit.txt": "flowig prepare",
    }
    trained = [v for v in VARIANTS if _ckpt_path(work, v).exists()]
    if not trained:
        raise DataError("no checkpoints found; run `flowig train` first")
    missing = [f"{name} (run `{cmd}`)" for name, cmd in required.items()
               if not (work / name).exists()]
    if missing:
        raise DataError("missing artifacts: " + "; ".join(missing))

    sections = ["# Run report\n"]
    sections.append("## Deduplication\n\n```\n" + (work / "dedup_report.txt").read_text() + "```\n")
    sections.append("## Overlap audit\n\n```\n" + (work / "overlap_audit.txt").read_text() + "```\n")

    sections.append("## Training\n")
    for v in trained:
        log = work / f"train_log_{v}.jsonl"
        if log.exists():
            sections.append(f"### {v}\n\n```\n" + log.read_text() + "```\n")

    metrics_rows = []
    for v in trained:
        mfile = work / f"metrics_{v}.txt"
        if not mfile.exists():
            raise DataError(f"missing metrics for {v}; run `flowig evaluate --variant {v}`")
        text = mfile.read_text()
        macro = next(
            line.split("\t")[1] for line in text.splitlines() if line.startswith("macro_f1")
        )
        weighted = next(
            line.split("\t")[1] for line in text.splitlines() if line.startswith("weighted_f1")
        )
        metrics_rows.append((v, macro, weighted))
        sections.append(f"## Metrics ({v})\n\n```\n" + text + "```\n")
    if len(metrics_rows) > 1:
        table = ["| variant | macro F1 | weighted F1 |", "|---|---|---|"]
        table += [f"| {v} | {m} | {w} |" for v, m, w in metrics_rows]
        sections.append("## Variant comparison\n\n" + "\n".join(table) + "\n")

    sections.append("## Heatmaps\n")
    for v in trained:
        for fmt in cfg.heatmap_formats:
            p = work / f"heatmap_{v}.{fmt}"
            if p.exists():
                sections.append(f"- `{p.name}`")
        c = work / f"completeness_{v}.txt"
        if c.exists():
            sections.append(f"- `{c.name}`")
    sections.append("")

    (work / "report.md").write_text("\n".join(sections), encoding="utf-8")
    _echo(f"wrote {work / 'report.md'}")


@main.command("synthetic")
@click.option("--out", type=click.Path(), required=True)
@click.option("--n", type=int, default=3000)
@click.option("--seed", type=int, default=0)
def cmd_synthetic(out, n, seed):
    """Write the bundled synthetic 3-class fixture as a flow CSV."""
    ds = synthetic.generate_synthetic_dataset(n=n, seed=seed)
    Path(out).write_bytes(synthetic.dataset_to_csv_bytes(ds))
    _echo(f"wrote {n} synthetic flows to {out}")


if __name__ == "__main__":
    main()
