"""Multi-shot attention kernels.

Self-attention modulates Q/K with the boundary-shifted 3D rotary
embedding; cross-attention aligns visual queries with per-shot caption
keys via the 1D shot-index rotation.  Nothing is ever masked in the
plain multi-shot mode: inter-shot interaction is suppressed by rotary
distance only.  The reference mode computes two attention blocks so
shot-0 rows depend on shot-0 inputs alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rope, tensor as T
from .tensor import ConfigError, ShapeError, Tensor


@dataclass
class AttentionWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


def _expand_pair_table(tab):
    """[n, d/2] per-pair table -> [n, d] with each entry duplicated."""
    n, half = tab.shape
    out = np.empty((n, 2 * half), dtype=tab.dtype)
    out[:, 0::2] = tab
    out[:, 1::2] = tab
    return out


def scaled_dot_attention(Q, K, V, probs_out=None):
    """softmax(Q K^T / sqrt(d_head)) V with deterministic reductions."""
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ShapeError(
            f"scaled_dot_attention: incompatible shapes {Q.shape} {K.shape} {V.shape}"
        )
    inv = 1.0 / np.sqrt(Q.shape[1])
    logits = T.scale(T.matmul(Q, T.transpose(K)), inv)
    probs = T.softmax_rows(logits)
    if probs_out is not None:
        probs_out.append(probs.data)
    return T.matmul(probs, V)


def _ref_attention_split(Q, K, V, nq0, nk0, probs_out=None):
    out0 = scaled_dot_attention(
        T.slice_rows(Q, 0, nq0), T.slice_rows(K, 0, nk0), T.slice_rows(V, 0, nk0)
    )
    if nq0 == Q.shape[0]:
        if probs_out is not None:
            probs_out.append(None)
        return out0
    out_rest = scaled_dot_attention(T.slice_rows(Q, nq0, Q.shape[0]), K, V)
    if probs_out is not None:
        probs_out.append(None)
    return T.concat_rows([out0, out_rest])


def ref_attention(Q, K, V, layout):
    """Shot-0 rows attend only to shot-0 keys; later rows attend to all."""
    if Q.shape[0] != layout.total_tokens or K.shape[0] != layout.total_tokens:
        raise ShapeError("ref_attention: token count does not match layout")
    n0 = layout.token_spans()[0][1]
    return _ref_attention_split(Q, K, V, n0, n0)


@dataclass
class ContextTokens:
    """Embedded caption tokens plus the shot index of every token row."""

    embeddings: Tensor
    shot_index: np.ndarray

    def __post_init__(self):
        self.shot_index = np.asarray(self.shot_index, dtype=np.int64)
        if self.embeddings.shape[0] != self.shot_index.shape[0]:
            raise ShapeError("ContextTokens: shot index length mismatch")


def _split_heads(x, heads):
    d = x.shape[1]
    dh = d // heads
    return [T.slice_cols(x, i * dh, (i + 1) * dh) for i in range(heads)]


def multishot_self_attention(
    tokens, layout, params, basis3d, weights, heads=4, use_ref=False, probs_out=None
):
    """Full unmasked attention across all shots with TcRoPE-indexed Q/K."""
    if tokens.shape[0] != layout.total_tokens:
        raise ShapeError(
            f"token count {tokens.shape[0]} != layout tokens {layout.total_tokens}"
        )
    d_model = tokens.shape[1]
    dh = d_model // heads
    if basis3d.dim != dh:
        raise ShapeError(f"basis dim {basis3d.dim} != head dim {dh}")
    t, h, w = layout.token_positions(j=params.j)
    cos, sin = rope.phase_tables_3d(basis3d, t, h, w)
    cosf = _expand_pair_table(cos)
    sinf = _expand_pair_table(sin)

    q = T.matmul(tokens, weights.wq)
    k = T.matmul(tokens, weights.wk)
    v = T.matmul(tokens, weights.wv)
    outs = []
    for qh, kh, vh in zip(*(
        _split_heads(x, heads) for x in (q, k, v)
    )):
        qh = T.rope_pairs(qh, cosf, sinf)
        kh = T.rope_pairs(kh, cosf, sinf)
        if use_ref:
            outs.append(ref_attention(qh, kh, vh, layout))
        else:
            outs.append(scaled_dot_attention(qh, kh, vh, probs_out=probs_out))
    return T.matmul(T.concat_cols(outs), weights.wo)


def multishot_cross_attention(
    tokens,
    context,
    layout,
    params,
    basis1d,
    weights,
    heads=4,
    use_ref=False,
    probs_out=None,
):
    """Visual queries over concatenated per-shot caption tokens.

    Queries rotate by their token's shot index times k; keys by their
    caption's shot index times k.  Values are left unrotated.
    """
    if tokens.shape[0] != layout.total_tokens:
        raise ShapeError("cross attention: token count does not match layout")
    shots_present = set(int(s) for s in context.shot_index)
    if shots_present != set(range(layout.shot_count)):
        raise ConfigError(
            f"caption bundle covers shots {sorted(shots_present)}, "
            f"layout has {layout.shot_count} shots"
        )
    d_model = tokens.shape[1]
    dh = d_model // heads
    if basis1d.dim != dh:
        raise ShapeError(f"basis dim {basis1d.dim} != head dim {dh}")

    q_shot = layout.token_shot_index()
    qcos, qsin = rope.phase_tables_1d(basis1d, q_shot * params.k)
    kcos, ksin = rope.phase_tables_1d(basis1d, context.shot_index * params.k)
    qcosf, qsinf = _expand_pair_table(qcos), _expand_pair_table(qsin)
    kcosf, ksinf = _expand_pair_table(kcos), _expand_pair_table(ksin)

    if use_ref and not np.all(np.diff(context.shot_index) >= 0):
        raise ConfigError("reference mode requires captions sorted by shot")

    q = T.matmul(tokens, weights.wq)
    k = T.matmul(context.embeddings, weights.wk)
    v = T.matmul(context.embeddings, weights.wv)
    outs = []
    for qh, kh, vh in zip(*(
        _split_heads(x, heads) for x in (q, k, v)
    )):
        qh = T.rope_pairs(qh, qcosf, qsinf)
        kh = T.rope_pairs(kh, kcosf, ksinf)
        if use_ref:
            nq0 = layout.token_spans()[0][1]
            nk0 = int(np.sum(context.shot_index == 0))
            outs.append(_ref_attention_split(qh, kh, vh, nq0, nk0))
        else:
            outs.append(scaled_dot_attention(qh, kh, vh, probs_out=probs_out))
    return T.matmul(T.concat_cols(outs), weights.wo)
