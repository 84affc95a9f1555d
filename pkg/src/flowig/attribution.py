"""Integrated Gradients over input embeddings, feature aggregation, heatmaps.

Attributions target the pre-softmax logit of the requested class. The path
integral uses midpoint Riemann quadrature and is verified against the
completeness identity: attributions must sum to F(input) - F(baseline).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import encoder
from .encoder import EncoderConfig, Params
from .errors import ConfigError, DataError, NumericError
from .evaluation import predict_labels
from .flow_data import COARSE_LABELS, CoarseLabel, FeatureSchema
from .textualize import format_value
from .tokenizer import TokenizedExample

ALL_PAD_EMBEDDINGS = "all_pad_embeddings"
ZERO_EMBEDDINGS = "zero_embeddings"


@dataclass(frozen=True)
class IGConfig:
    steps: int = 64
    baseline_kind: str = ALL_PAD_EMBEDDINGS
    completeness_tolerance: float = 0.01  # relative

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("IG steps must be >= 1")
        if self.completeness_tolerance <= 0:
            raise ConfigError("completeness tolerance must be positive")
        if self.baseline_kind not in (ALL_PAD_EMBEDDINGS, ZERO_EMBEDDINGS):
            raise ConfigError(f"unknown baseline kind {self.baseline_kind!r}")


@dataclass(frozen=True)
class AttributionResult:
    token_attr: np.ndarray         # (max_seq_len,), signed
    feature_attr: np.ndarray       # (d,), signed, span sums
    structural_residue: float      # attribution on CLS/SEP/PAD positions
    target_class: CoarseLabel
    completeness_gap: float        # sum(token_attr) - (F(x) - F(x'))
    output_delta: float            # F(x) - F(x')
    tolerance_exceeded: bool

    @property
    def relative_gap(self) -> float:
        denom = abs(self.output_delta)
        return abs(self.completeness_gap) / denom if denom > 0 else 0.0


@dataclass(frozen=True)
class ClassAttributionMatrix:
    feature_names: tuple[str, ...]          # top-K, global rank order
    values: np.ndarray                      # (3, K) mean |feature_attr| per class
    sample_counts: tuple[int, int, int]

    def class_row(self, label: CoarseLabel) -> np.ndarray:
        return self.values[label.value]


def baseline_embeddings(
    params: Params,
    config: EncoderConfig,
    example: TokenizedExample,
    kind: str = ALL_PAD_EMBEDDINGS,
    pad_id: int = 0,
) -> np.ndarray:
    """ALL_PAD: every token replaced by PAD (positions kept); ZERO: zero matrix."""
    if kind == ZERO_EMBEDDINGS:
        return np.zeros((config.max_seq_len, config.d_model))
    if kind != ALL_PAD_EMBEDDINGS:
        raise ConfigError(f"unknown baseline kind {kind!r}")
    pad_ids = np.full((1, config.max_seq_len), pad_id, dtype=np.int64)
    return encoder.embed_ids(params, config, pad_ids)[0]


def integrated_gradients(
    params: Params,
    config: EncoderConfig,
    example: TokenizedExample,
    target_class: CoarseLabel,
    cfg: IGConfig = IGConfig(),
    pad_id: int = 0,
) -> AttributionResult:
    emb = encoder.embed(params, config, example)
    base = baseline_embeddings(params, config, example, cfg.baseline_kind, pad_id)
    mask = np.array(example.attention_mask, dtype=np.float64)

    delta = emb - base
    alphas = (np.arange(cfg.steps) + 0.5) / cfg.steps
    points = base[None] + alphas[:, None, None] * delta[None]
    logits, trace = encoder.forward_from_embeddings(
        params, config, points, np.tile(mask, (cfg.steps, 1))
    )
    dlogits = np.zeros_like(logits)
    dlogits[:, target_class.value] = 1.0
    _, demb = encoder.backward(params, trace, dlogits)
    if not np.all(np.isfinite(demb)):
        bad = int(np.where(~np.isfinite(demb).all(axis=(1, 2)))[0][0])
        raise NumericError(f"non-finite gradient at integration step {bad}")
    avg_grad = demb.mean(axis=0)
    token_attr = (delta * avg_grad).sum(axis=-1)

    f_x, _ = encoder.forward_from_embeddings(params, config, emb, mask)
    f_b, _ = encoder.forward_from_embeddings(params, config, base, mask)
    output_delta = float(f_x[target_class.value] - f_b[target_class.value])
    gap = float(token_attr.sum() - output_delta)

    feature_attr, residue = aggregate_to_features(
        token_attr, example.feature_token_spans
    )
    rel = abs(gap) / abs(output_delta) if output_delta != 0 else 0.0
    return AttributionResult(
        token_attr=token_attr,
        feature_attr=feature_attr,
        structural_residue=residue,
        target_class=target_class,
        completeness_gap=gap,
        output_delta=output_delta,
        tolerance_exceeded=rel > cfg.completeness_tolerance,
    )


def aggregate_to_features(
    token_attr: np.ndarray, spans: tuple[tuple[int, int, int], ...]
) -> tuple[np.ndarray, float]:
    """Sum token attribution over each feature span; remainder is structural residue."""
    if not spans:
        raise DataError("example has no feature spans")
    d = max(fi for fi, _, _ in spans) + 1
    feature_attr = np.zeros(d)
    covered = np.zeros(len(token_attr), dtype=bool)
    for fi, start, end in spans:
        if end > len(token_attr) or start < 1:
            raise DataError(f"feature span {fi} out of range")
        if covered[start:end].any():
            raise DataError("feature spans overlap")
        covered[start:end] = True
        feature_attr[fi] = token_attr[start:end].sum()
    residue = float(token_attr[~covered].sum())
    return feature_attr, residue


def class_attribution_matrix(
    params: Params,
    config: EncoderConfig,
    examples: list[TokenizedExample],
    schema: FeatureSchema,
    cfg: IGConfig = IGConfig(),
    top_k: int = 15,
    pad_id: int = 0,
    use_predicted_class: bool = False,
) -> tuple[ClassAttributionMatrix, list[AttributionResult]]:
    """Per-class mean |attribution| over the top-K globally ranked features."""
    counts = {c: 0 for c in COARSE_LABELS}
    for e in examples:
        if e.label is not None:
            counts[e.label] += 1
    if not use_predicted_class:
        empty = [c.name for c in COARSE_LABELS if counts[c] == 0]
        if empty:
            raise DataError(f"no examples for class: {', '.join(empty)}")

    results: list[AttributionResult] = []
    targets: list[CoarseLabel] = []
    for e in examples:
        if use_predicted_class:
            logits, _ = encoder.forward(params, config, e)
            target = predict_labels(logits[None])[0]
        else:
            target = e.label
        results.append(
            integrated_gradients(params, config, e, target, cfg, pad_id)
        )
        targets.append(target)

    abs_attr = np.abs(np.stack([r.feature_attr for r in results]))  # (N, d)
    global_score = abs_attr.mean(axis=0)
    top_k = min(top_k, schema.d)
    # stable sort keeps schema order among ties
    order = np.argsort(-global_score, kind="stable")[:top_k]

    values = np.zeros((3, top_k))
    sample_counts = [0, 0, 0]
    for c in COARSE_LABELS:
        sel = [i for i, t in enumerate(targets) if t == c]
        sample_counts[c.value] = len(sel)
        if sel:
            values[c.value] = abs_attr[sel][:, order].mean(axis=0)
    matrix = ClassAttributionMatrix(
        feature_names=tuple(schema.names[i] for i in order),
        values=values,
        sample_counts=tuple(sample_counts),
    )
    return matrix, results


# ---------------------------------------------------------------------------
# exports

def export_heatmap_csv(matrix: ClassAttributionMatrix) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["class", *matrix.feature_names])
    for c in COARSE_LABELS:
        writer.writerow(
            [c.name, *(format_value(float(v)) for v in matrix.class_row(c))]
        )
    return buf.getvalue().encode("utf-8")


# compact sequential colormap: dark blue -> teal -> yellow (viridis-like anchors)
_RAMP = [(68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37)]


def _color(v: float) -> str:
    x = min(max(v, 0.0), 1.0) * (len(_RAMP) - 1)
    i = min(int(x), len(_RAMP) - 2)
    t = x - i
    rgb = [round(_RAMP[i][c] + t * (_RAMP[i + 1][c] - _RAMP[i][c])) for c in range(3)]
    return f"#{rgb[0]:02x}{rgb[1]:02x}{rgb[2]:02x}"


def export_heatmap_svg(matrix: ClassAttributionMatrix) -> bytes:
    k = len(matrix.feature_names)
    cell_w, cell_h = 90, 40
    left, top = 110, 130
    bar_h = 16
    width = left + k * cell_w + 20
    height = top + 3 * cell_h + bar_h + 60
    vmax = float(matrix.values.max()) or 1.0

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for j, name in enumerate(matrix.feature_names):
        x = left + j * cell_w + cell_w // 2
        parts.append(
            f'<text x="{x}" y="{top - 8}" text-anchor="start" '
            f'transform="rotate(-60 {x} {top - 8})">{_escape(name)}</text>'
        )
    for c in COARSE_LABELS:
        y = top + c.value * cell_h
        parts.append(
            f'<text x="{left - 8}" y="{y + cell_h // 2 + 4}" text-anchor="end">{c.name}</text>'
        )
        for j in range(k):
            v = float(matrix.values[c.value, j])
            x = left + j * cell_w
            fill = _color(v / vmax)
            txt = "#000000" if v / vmax > 0.6 else "#ffffff"
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" fill="{fill}"/>'
            )
            parts.append(
                f'<text x="{x + cell_w // 2}" y="{y + cell_h // 2 + 4}" '
                f'text-anchor="middle" fill="{txt}">{format_value(v)}</text>'
            )
    # color bar
    bar_y = top + 3 * cell_h + 24
    bar_w = k * cell_w
    for s in range(100):
        x = left + s * bar_w / 100
        parts.append(
            f'<rect x="{x:.2f}" y="{bar_y}" width="{bar_w / 100 + 0.5:.2f}" '
            f'height="{bar_h}" fill="{_color(s / 99)}"/>'
        )
    parts.append(f'<text x="{left}" y="{bar_y + bar_h + 14}">0</text>')
    parts.append(
        f'<text x="{left + bar_w}" y="{bar_y + bar_h + 14}" '
        f'text-anchor="end">{format_value(vmax)}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts).encode("utf-8")


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def export_heatmap(matrix: ClassAttributionMatrix, fmt: str) -> bytes:
    if fmt == "csv":
        return export_heatmap_csv(matrix)
    if fmt == "svg":
        return export_heatmap_svg(matrix)
    raise ConfigError(f"unknown heatmap format {fmt!r}")
