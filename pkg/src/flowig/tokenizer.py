"""Closed-vocabulary tokenizer for serialized flows.

Feature names get one token each and values are split into digit-level
tokens, so every non-special token belongs to exactly one feature span and
attributions can be mapped back to features without heuristics.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import SchemaError, TruncationError, DataError
from .flow_data import CoarseLabel, FeatureSchema
from .textualize import TextFlow

PAD = "[PAD]"
CLS = "[CLS]"
SEP = "[SEP]"
IS = "[IS]"
SPECIALS = (PAD, CLS, SEP, IS)

# sign, digits, decimal point, exponent marker
NUMBER_TOKENS = tuple("0123456789") + (".", "e", "-", "+")


@dataclass(frozen=True)
class Vocab:
    id_of: dict[str, int]
    feature_names: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.id_of)

    @property
    def pad_id(self) -> int:
        return self.id_of[PAD]

    def token_of(self, tid: int) -> str:
        for tok, i in self.id_of.items():
            if i == tid:
                return tok
        raise KeyError(tid)

    def to_lines(self) -> str:
        ordered = sorted(self.id_of.items(), key=lambda kv: kv[1])
        return "".join(f"{tok}\t{tid}\n" for tok, tid in ordered)


@dataclass(frozen=True)
class TokenizedExample:
    ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    # (feature_index, tok_start, tok_end) end exclusive; covers [FEAT][IS][value...]
    feature_token_spans: tuple[tuple[int, int, int], ...]
    label: CoarseLabel | None = None


def build_vocab(schema: FeatureSchema) -> Vocab:
    if schema.d < 1:
        raise SchemaError("cannot build a vocabulary for an empty schema")
    id_of: dict[str, int] = {}
    for tok in SPECIALS:
        id_of[tok] = len(id_of)
    for name in schema.names:
        if name in id_of:
            raise SchemaError(f"feature name collides with a reserved token: {name!r}")
        id_of[name] = len(id_of)
    for tok in NUMBER_TOKENS:
        id_of[tok] = len(id_of)
    return Vocab(id_of=id_of, feature_names=schema.names)


def tokenize(
    flow: TextFlow,
    vocab: Vocab,
    max_seq_len: int,
    label: CoarseLabel | None = None,
) -> TokenizedExample:
    """[CLS] then per feature [FEAT][IS][value chars...][SEP], padded to max_seq_len."""
    ids = [vocab.id_of[CLS]]
    spans = []
    for fi, start, end in flow.spans:
        name = vocab.feature_names[fi]
        clause = flow.text[start:end]
        prefix = f"{name} is "
        if not clause.startswith(prefix):
            raise DataError(f"span {fi} does not match schema feature {name!r}")
        value = clause[len(prefix):]
        tok_start = len(ids)
        ids.append(vocab.id_of[name])
        ids.append(vocab.id_of[IS])
        for ch in value:
            if ch not in vocab.id_of:
                raise DataError(f"value character {ch!r} not in vocabulary")
            ids.append(vocab.id_of[ch])
        spans.append((fi, tok_start, len(ids)))
        ids.append(vocab.id_of[SEP])
        if len(ids) > max_seq_len:
            raise TruncationError(
                f"sequence exceeds max_seq_len={max_seq_len} at feature {name!r}"
            )
    mask = [1] * len(ids) + [0] * (max_seq_len - len(ids))
    ids = ids + [vocab.pad_id] * (max_seq_len - len(ids))
    return TokenizedExample(
        ids=tuple(ids),
        attention_mask=tuple(mask),
        feature_token_spans=tuple(spans),
        label=label,
    )


def reconstruct_values(example: TokenizedExample, vocab: Vocab) -> list[tuple[str, str]]:
    """Recover (feature name, formatted value string) per span; the round-trip check."""
    inverse = {tid: tok for tok, tid in vocab.id_of.items()}
    out = []
    for fi, start, end in example.feature_token_spans:
        name = inverse[example.ids[start]]
        value = "".join(inverse[t] for t in example.ids[start + 2 : end])
        assert name == vocab.feature_names[fi]
        out.append((name, value))
    return out
