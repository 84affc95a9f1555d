"""Small encoder-only transformer with exact analytical gradients.

Everything runs in float64 numpy so finite-difference checks and the
attribution completeness identity are meaningful. Two attention variants:
standard scaled dot-product with absolute position embeddings, and a
disentangled variant that scores content-content, content-position and
position-content terms over clipped relative distances.

Public single-example functions wrap a batched core; the batch dimension
is also how integration-path gradient evaluations are vectorized.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError
from .tokenizer import TokenizedExample

ABSOLUTE = "absolute"
DISENTANGLED = "disentangled"

_LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    max_seq_len: int
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    n_classes: int = 3
    attention_variant: str = ABSOLUTE
    rel_window: int = 16
    dropout_rate: float = 0.1
    use_final_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by heads={self.heads}"
            )
        if self.n_classes != 3:
            raise ConfigError("the classification head is fixed at 3 classes")
        if self.attention_variant not in (ABSOLUTE, DISENTANGLED):
            raise ConfigError(f"unknown attention variant {self.attention_variant!r}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.layers < 0 or self.vocab_size < 1 or self.max_seq_len < 1:
            raise ConfigError("invalid encoder dimensions")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def rel_size(self) -> int:
        return 2 * self.rel_window + 1


Params = dict[str, np.ndarray]


def init_params(config: EncoderConfig, seed: int | None = None) -> Params:
    """Seeded init: matrices ~ N(0, 1/fan_in), classifier zeroed for uniform logits."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    D, F = config.d_model, config.d_ff

    def mat(fan_in, shape):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

    p: Params = {}
    p["tok_emb"] = mat(D, (config.vocab_size, D))
    if config.attention_variant == ABSOLUTE:
        p["pos_emb"] = mat(D, (config.max_seq_len, D))
    else:
        p["rel_emb"] = mat(D, (config.rel_size, D))
    for i in range(config.layers):
        pre = f"layers.{i}."
        p[pre + "ln1.g"] = np.ones(D)
        p[pre + "ln1.b"] = np.zeros(D)
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + name] = mat(D, (D, D))
        for name in ("bq", "bk", "bv", "bo"):
            p[pre + "attn." + name] = np.zeros(D)
        p[pre + "ln2.g"] = np.ones(D)
        p[pre + "ln2.b"] = np.zeros(D)
        p[pre + "ffn.w1"] = mat(D, (D, F))
        p[pre + "ffn.b1"] = np.zeros(F)
        p[pre + "ffn.w2"] = mat(F, (F, D))
        p[pre + "ffn.b2"] = np.zeros(D)
    p["ln_f.g"] = np.ones(D)
    p["ln_f.b"] = np.zeros(D)
    p["head.w"] = np.zeros((D, config.n_classes))
    p["head.b"] = np.zeros(config.n_classes)
    return p


def zero_grads_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# primitive layers

def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * ivar
    return g * xhat + b, (xhat, ivar, g)


def _ln_backward(dy, cache):
    xhat, ivar, g = cache
    dxhat = dy * g
    dx = ivar * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def _gelu_forward(a):
    phi = 0.5 * (1.0 + erf(a * _INV_SQRT2))
    return a * phi, phi


def _gelu_backward(da_out, a, phi):
    return da_out * (phi + a * np.exp(-0.5 * a * a) * _INV_SQRT2PI)


def _split_heads(x, heads):
    B, L, D = x.shape
    return x.reshape(B, L, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


def _sum_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum over batch and sequence of outer products: (B,L,D),(B,L,E) -> (D,E)."""
    B, L, D = a.shape
    return a.reshape(B * L, D).T @ b.reshape(B * L, -1)


_rel_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _rel_index(L: int, k: int) -> np.ndarray:
    """rel_idx[i, j] = clip(i - j, -k, k) + k, shape (L, L)."""
    key = (L, k)
    if key not in _rel_cache:
        i = np.arange(L)[:, None]
        j = np.arange(L)[None, :]
        idx = np.clip(i - j, -k, k) + k
        onehot = np.zeros((L, L, 2 * k + 1))
        onehot[i, j, idx] = 1.0
        _rel_cache[key] = (idx, onehot)
    return _rel_cache[key][0]


def _rel_onehot(L: int, k: int) -> np.ndarray:
    _rel_index(L, k)
    return _rel_cache[(L, k)][1]


def attention_scores_disentangled(q, k_content, qr, kr, rel_idx):
    """Disentangled attention logits for one batch of heads.

    q, k_content: (B, H, L, dh); qr, kr: (H, R, dh) projected relative-position
    embeddings; rel_idx[i, j] indexes the clipped relative distance from query
    i to key j. Scale is 1/sqrt(3*dh) because three score terms are summed.
    """
    dh = q.shape[-1]
    c2c = q @ k_content.swapaxes(-1, -2)
    qkr = q @ kr.swapaxes(-1, -2)        # broadcasts (H, dh, R) over the batch
    kqr = k_content @ qr.swapaxes(-1, -2)
    L = q.shape[2]
    ii = np.arange(L)[:, None]
    jj = np.arange(L)[None, :]
    c2p = qkr[:, :, ii, rel_idx]          # [b,h,i,rel_idx[i,j]]
    p2c = kqr[:, :, jj, rel_idx.T]        # [b,h,j,rel_idx[j,i]]
    return (c2c + c2p + p2c) / math.sqrt(3.0 * dh)


def _masked_softmax(scores, mask):
    # mask: (B, L) over keys, 1 = attend
    neg = np.where(mask[:, None, None, :] > 0, 0.0, -np.inf)
    s = scores + neg
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    e = np.where(np.isfinite(s), e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardTrace:
    config: EncoderConfig
    training: bool
    mask: np.ndarray                 # (B, L)
    x0: np.ndarray                   # input embeddings (B, L, D)
    layer_caches: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    logits: np.ndarray | None = None
    squeeze: bool = False            # True when the caller passed a single example


def _check_finite(x, where: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values produced in {where}")


def forward_from_embeddings(
    params: Params,
    config: EncoderConfig,
    embeddings: np.ndarray,
    attention_mask: np.ndarray,
    training: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Pre-norm encoder stack from raw embeddings to class logits.

    Accepts (L, D) or batched (B, L, D); logits are (3,) or (B, 3) to match.
    """
    squeeze = embeddings.ndim == 2
    x = np.asarray(embeddings, dtype=np.float64)
    mask = np.asarray(attention_mask, dtype=np.float64)
    if squeeze:
        x = x[None]
        mask = mask[None]
    B, L, D = x.shape
    if L != config.max_seq_len or D != config.d_model:
        raise ConfigError(f"embedding shape {x.shape} does not match config")
    if training and config.dropout_rate > 0 and dropout_rng is None:
        raise ConfigError("training-mode forward with dropout requires dropout_rng")

    trace = ForwardTrace(config, training, mask, x, squeeze=squeeze)
    H, dh = config.heads, config.d_head
    keep = 1.0 - config.dropout_rate

    for li in range(config.layers):
        pre = f"layers.{li}."
        cache: dict = {"pre": pre, "x_in": x}
        h1, cache["ln1"] = _ln_forward(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        cache["h1"] = h1
        q = _split_heads(h1 @ params[pre + "attn.wq"] + params[pre + "attn.bq"], H)
        k = _split_heads(h1 @ params[pre + "attn.wk"] + params[pre + "attn.bk"], H)
        v = _split_heads(h1 @ params[pre + "attn.wv"] + params[pre + "attn.bv"], H)
        cache["q"], cache["k"], cache["v"] = q, k, v
        if config.attention_variant == DISENTANGLED:
            rel = params["rel_emb"]
            # no bias on the positional projections so a zero table ablates cleanly
            kr = (rel @ params[pre + "attn.wk"]).reshape(config.rel_size, H, dh).transpose(1, 0, 2)
            qr = (rel @ params[pre + "attn.wq"]).reshape(config.rel_size, H, dh).transpose(1, 0, 2)
            cache["kr"], cache["qr"] = kr, qr
            scores = attention_scores_disentangled(q, k, qr, kr, _rel_index(L, config.rel_window))
        else:
            scores = (q @ k.swapaxes(-1, -2)) / math.sqrt(dh)
        cache["scores"] = scores
        attn = _masked_softmax(scores, mask)
        cache["attn"] = attn
        o = _merge_heads(attn @ v)
        cache["o"] = o
        out = o @ params[pre + "attn.wo"] + params[pre + "attn.bo"]
        if training and config.dropout_rate > 0:
            dm = (dropout_rng.random(out.shape) >= config.dropout_rate) / keep
            cache["attn_drop"] = dm
            out = out * dm
        x = x + out
        h2, cache["ln2"] = _ln_forward(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        cache["h2"] = h2
        a = h2 @ params[pre + "ffn.w1"] + params[pre + "ffn.b1"]
        g, phi = _gelu_forward(a)
        cache["a"], cache["phi"], cache["g"] = a, phi, g
        y = g @ params[pre + "ffn.w2"] + params[pre + "ffn.b2"]
        if training and config.dropout_rate > 0:
            dm = (dropout_rng.random(y.shape) >= config.dropout_rate) / keep
            cache["ffn_drop"] = dm
            y = y * dm
        cache["x_mid"] = x
        x = x + y
        _check_finite(x, f"encoder layer {li}")
        trace.layer_caches.append(cache)

    if config.use_final_norm:
        hf, trace.final["ln_f"] = _ln_forward(x, params["ln_f.g"], params["ln_f.b"])
    else:
        hf = x
    trace.final["x_last"] = x
    trace.final["cls"] = hf[:, 0, :]
    logits = trace.final["cls"] @ params["head.w"] + params["head.b"]
    _check_finite(logits, "classification head")
    trace.logits = logits
    return (logits[0] if squeeze else logits), trace


def embed(params: Params, config: EncoderConfig, example: TokenizedExample) -> np.ndarray:
    return embed_ids(params, config, np.array([example.ids], dtype=np.int64))[0]


def embed_ids(params: Params, config: EncoderConfig, ids: np.ndarray) -> np.ndarray:
    """Token embedding lookup for an id batch (B, L); absolute positions added here."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ConfigError("token id out of vocabulary range")
    x = params["tok_emb"][ids]
    if config.attention_variant == ABSOLUTE:
        x = x + params["pos_emb"][None, : ids.shape[1], :]
    return x


def forward(
    params: Params,
    config: EncoderConfig,
    example: TokenizedExample,
    training: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    emb = embed(params, config, example)
    mask = np.array(example.attention_mask, dtype=np.float64)
    return forward_from_embeddings(params, config, emb, mask, training, dropout_rng)


def forward_batch(
    params: Params,
    config: EncoderConfig,
    ids: np.ndarray,
    mask: np.ndarray,
    training: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    emb = embed_ids(params, config, ids)
    return forward_from_embeddings(params, config, emb, mask, training, dropout_rng)


def backward(
    params: Params,
    trace: ForwardTrace,
    dlogits: np.ndarray,
) -> tuple[Params, np.ndarray]:
    """Exact reverse-mode gradients for all parameters and the input embeddings."""
    config = trace.config
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if trace.squeeze and dlogits.ndim == 1:
        dlogits = dlogits[None]
    if dlogits.shape != trace.logits.shape:
        raise ConfigError(
            f"dlogits shape {dlogits.shape} does not match logits {trace.logits.shape}"
        )
    grads = zero_grads_like(params)
    H, dh, L = config.heads, config.d_head, config.max_seq_len

    cls = trace.final["cls"]
    grads["head.w"] += cls.T @ dlogits
    grads["head.b"] += dlogits.sum(axis=0)
    dcls = dlogits @ params["head.w"].T
    dhf = np.zeros_like(trace.x0)
    dhf[:, 0, :] = dcls
    if config.use_final_norm:
        dx, dg, db = _ln_backward(dhf, trace.final["ln_f"])
        grads["ln_f.g"] += dg
        grads["ln_f.b"] += db
    else:
        dx = dhf

    for cache in reversed(trace.layer_caches):
        pre = cache["pre"]
        # FFN block
        dy = dx.copy()
        if "ffn_drop" in cache:
            dy = dy * cache["ffn_drop"]
        grads[pre + "ffn.w2"] += _sum_outer(cache["g"], dy)
        grads[pre + "ffn.b2"] += dy.sum(axis=(0, 1))
        dg_act = dy @ params[pre + "ffn.w2"].T
        da = _gelu_backward(dg_act, cache["a"], cache["phi"])
        grads[pre + "ffn.w1"] += _sum_outer(cache["h2"], da)
        grads[pre + "ffn.b1"] += da.sum(axis=(0, 1))
        dh2 = da @ params[pre + "ffn.w1"].T
        dx2, dgn, dbn = _ln_backward(dh2, cache["ln2"])
        grads[pre + "ln2.g"] += dgn
        grads[pre + "ln2.b"] += dbn
        dx = dx + dx2  # residual

        # attention block
        dout = dx.copy()
        if "attn_drop" in cache:
            dout = dout * cache["attn_drop"]
        grads[pre + "attn.wo"] += _sum_outer(cache["o"], dout)
        grads[pre + "attn.bo"] += dout.sum(axis=(0, 1))
        do = dout @ params[pre + "attn.wo"].T
        do_h = _split_heads(do, H)
        attn, v = cache["attn"], cache["v"]
        dattn = do_h @ v.swapaxes(-1, -2)
        dv = attn.swapaxes(-1, -2) @ do_h
        # softmax backward; masked columns have attn == 0 so their dscores vanish
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))

        q, k = cache["q"], cache["k"]
        if config.attention_variant == DISENTANGLED:
            scale = 1.0 / math.sqrt(3.0 * dh)
            ds = dscores * scale
            kr, qr = cache["kr"], cache["qr"]
            onehot = _rel_onehot(L, config.rel_window)
            B = ds.shape[0]
            dq = ds @ k
            dk = ds.swapaxes(-1, -2) @ q
            # content-to-position: score += q[i] . kr[rel(i,j)]
            dqkr = (ds.transpose(2, 0, 1, 3).reshape(L, B * H, L) @ onehot)
            dqkr = dqkr.reshape(L, B, H, -1).transpose(1, 2, 0, 3)  # (B,H,L,R)
            dq += dqkr @ kr
            dkr = (dqkr.transpose(1, 3, 0, 2).reshape(H, config.rel_size, B * L)
                   @ q.transpose(1, 0, 2, 3).reshape(H, B * L, dh))
            # position-to-content: score += k[j] . qr[rel(j,i)]
            dkqr = (ds.transpose(3, 0, 1, 2).reshape(L, B * H, L) @ onehot)
            dkqr = dkqr.reshape(L, B, H, -1).transpose(1, 2, 0, 3)  # (B,H,L,R)
            dk += dkqr @ qr
            dqr = (dkqr.transpose(1, 3, 0, 2).reshape(H, config.rel_size, B * L)
                   @ k.transpose(1, 0, 2, 3).reshape(H, B * L, dh))
            dkr_flat = dkr.transpose(1, 0, 2).reshape(config.rel_size, config.d_model)
            dqr_flat = dqr.transpose(1, 0, 2).reshape(config.rel_size, config.d_model)
            grads[pre + "attn.wk"] += params["rel_emb"].T @ dkr_flat
            grads[pre + "attn.wq"] += params["rel_emb"].T @ dqr_flat
            grads["rel_emb"] += dkr_flat @ params[pre + "attn.wk"].T
            grads["rel_emb"] += dqr_flat @ params[pre + "attn.wq"].T
        else:
            ds = dscores / math.sqrt(dh)
            dq = ds @ k
            dk = ds.swapaxes(-1, -2) @ q

        dq_m, dk_m, dv_m = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        h1 = cache["h1"]
        grads[pre + "attn.wq"] += _sum_outer(h1, dq_m)
        grads[pre + "attn.bq"] += dq_m.sum(axis=(0, 1))
        grads[pre + "attn.wk"] += _sum_outer(h1, dk_m)
        grads[pre + "attn.bk"] += dk_m.sum(axis=(0, 1))
        grads[pre + "attn.wv"] += _sum_outer(h1, dv_m)
        grads[pre + "attn.bv"] += dv_m.sum(axis=(0, 1))
        dh1 = (
            dq_m @ params[pre + "attn.wq"].T
            + dk_m @ params[pre + "attn.wk"].T
            + dv_m @ params[pre + "attn.wv"].T
        )
        dx1, dgn, dbn = _ln_backward(dh1, cache["ln1"])
        grads[pre + "ln1.g"] += dgn
        grads[pre + "ln1.b"] += dbn
        dx = dx + dx1  # residual

    demb = dx
    return grads, (demb[0] if trace.squeeze else demb)


def accumulate_embedding_grads(
    grads: Params, config: EncoderConfig, ids: np.ndarray, demb: np.ndarray
) -> None:
    """Scatter embedding-matrix gradients back to the lookup tables."""
    if demb.ndim == 2:
        demb = demb[None]
        ids = np.asarray(ids).reshape(1, -1)
    np.add.at(grads["tok_emb"], np.asarray(ids, dtype=np.int64), demb)
    if config.attention_variant == ABSOLUTE:
        grads["pos_emb"][: demb.shape[1]] += demb.sum(axis=0)
