"""Knowledge fusion: CLS/SEP fusion encoder, emotion discrimination and classification."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import numcore as nc
from .dataio import PairBatch
from .errors import ShapeError
from .layers import MLP, LayerNorm, Linear, Module
from .numcore import RngStream, Tensor
from .orl import LOG_CLAMP

SPECIAL, SPEECH, TEXT = 0, 1, 2


class EncoderLayer(Module):
    """Post-LN transformer encoder layer (self-attention + SiLU feed-forward)."""

    def __init__(self, d: int, heads: int, rng: RngStream):
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.ln1 = LayerNorm(d)
        self.ff1 = Linear(d, 4 * d, rng)
        self.ff2 = Linear(4 * d, d, rng)
        self.ln2 = LayerNorm(d)
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor, P: int, L: int) -> Tensor:
        dh = x.shape[-1] // self.heads
        return nc.transpose(nc.reshape(x, (P, L, self.heads, dh)), (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        P, L, d = x.shape
        q = self._split(self.q(x), P, L)
        k = self._split(self.k(x), P, L)
        v = self._split(self.v(x), P, L)
        scores = (q @ nc.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d // self.heads))
        attn = nc.softmax(scores, axis=-1)
        self.last_attention = attn.value
        ctx = nc.reshape(nc.transpose(attn @ v, (0, 2, 1, 3)), (P, L, d))
        x = self.ln1(x + self.o(ctx))
        return self.ln2(x + self.ff2(nc.silu(self.ff1(x))))


class FusionEncoder(Module):
    def __init__(self, d_z: int, rng: RngStream, layers: int = 1, heads: int = 8,
                 pos_emb: bool = False, max_len: int = 256):
        if d_z % heads:
            raise ValueError(f"d_z={d_z} is not divisible by heads={heads}")
        self.d_z = d_z
        self.cls = nc.parameter(rng.normal(d_z, scale=0.5))
        self.sep = nc.parameter(rng.normal(d_z, scale=0.5))
        self.segment = nc.parameter(rng.normal((3, d_z), scale=0.5))
        self.pos_emb = pos_emb
        if pos_emb:
            self.position = nc.parameter(rng.normal((max_len, d_z), scale=0.1))
        self.layers = [EncoderLayer(d_z, heads, rng) for _ in range(layers)]

    def encode(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def attention_maps(self) -> list[np.ndarray]:
        return [layer.last_attention for layer in self.layers]

    def _add_embeddings(self, x: Tensor, seg_ids: np.ndarray) -> Tensor:
        x = x + nc.take(self.segment, seg_ids)
        if self.pos_emb:
            L = seg_ids.shape[-1]
            if L > self.position.shape[0]:
                raise ShapeError(f"sequence length {L} exceeds positional table {self.position.shape[0]}")
            x = x + self.position[:L]
        return x


def segment_ids(m: int, n: int) -> np.ndarray:
    return np.array([SPECIAL] + [SPEECH] * m + [SPECIAL] + [TEXT] * n + [SPECIAL], dtype=np.intp)


def build_fusion_sequence(speech_seq, text_seq, fe: FusionEncoder) -> tuple[Tensor, np.ndarray]:
    """[CLS, speech tokens, SEP, text tokens, SEP] plus segment embeddings."""
    s, t = nc.as_tensor(speech_seq), nc.as_tensor(text_seq)
    if s.ndim != 2 or t.ndim != 2 or s.shape[1] != fe.d_z or t.shape[1] != fe.d_z:
        raise ShapeError(f"expected (len, {fe.d_z}) token matrices, got {s.shape} and {t.shape}")
    d = fe.d_z
    cls = nc.reshape(fe.cls, (1, d))
    sep = nc.reshape(fe.sep, (1, d))
    seq = nc.concat([cls, s, sep, t, sep], axis=0)
    ids = segment_ids(s.shape[0], t.shape[0])
    return fe._add_embeddings(seq, ids), ids


def fuse(speech_seq, text_seq, fe: FusionEncoder) -> Tensor:
    """Fused vector for a single pair: the encoder output at the CLS position."""
    seq, _ = build_fusion_sequence(speech_seq, text_seq, fe)
    out = fe.encode(nc.reshape(seq, (1,) + seq.shape))
    return out[0, 0]


def fuse_pairs(speech_seqs: Sequence, text_seqs: Sequence, pairs: Sequence[tuple[int, int]],
               fe: FusionEncoder) -> Tensor:
    """Fused vectors for many (speech_i, text_j) pairs at once, shape (P, d_z).

    Pairs with equal (m_i, n_j) are stacked into one batched encoder pass;
    each pair still attends only within its own sequence, so row p equals
    ``fuse(speech_seqs[i], text_seqs[j], fe)``.
    """
    s_list = [nc.as_tensor(s) for s in speech_seqs]
    t_list = [nc.as_tensor(t) for t in text_seqs]
    for x in s_list + t_list:
        if x.ndim != 2 or x.shape[1] != fe.d_z:
            raise ShapeError(f"expected (len, {fe.d_z}) token matrices, got {x.shape}")
    return fuse_packed(nc.concat(s_list), [x.shape[0] for x in s_list],
                       nc.concat(t_list), [x.shape[0] for x in t_list], pairs, fe)


def fuse_packed(speech_tokens, m: Sequence[int], text_tokens, n: Sequence[int],
                pairs: Sequence[tuple[int, int]], fe: FusionEncoder) -> Tensor:
    """Like :func:`fuse_pairs` but with each modality's records stacked row-wise.

    ``speech_tokens`` is (sum(m), d_z) with record i occupying ``m[i]`` rows.
    """
    s_all, t_all = nc.as_tensor(speech_tokens), nc.as_tensor(text_tokens)
    d = fe.d_z
    if s_all.shape != (sum(m), d) or t_all.shape != (sum(n), d):
        raise ShapeError(f"packed tokens {s_all.shape}/{t_all.shape} do not match lengths and d_z={d}")
    s_off = 2 + np.concatenate([[0], np.cumsum(m)[:-1]]).astype(int)
    t_off = 2 + sum(m) + np.concatenate([[0], np.cumsum(n)[:-1]]).astype(int)
    src = nc.concat([nc.reshape(fe.cls, (1, d)), nc.reshape(fe.sep, (1, d)), s_all, t_all], axis=0)

    groups: dict[tuple[int, int], list[int]] = {}
    for p, (i, j) in enumerate(pairs):
        groups.setdefault((m[i], n[j]), []).append(p)

    outs, order = [], []
    for (mi, nj), members in groups.items():
        idx = np.empty((len(members), mi + nj + 3), dtype=np.intp)
        for r, p in enumerate(members):
            i, j = pairs[p]
            idx[r] = np.concatenate([[0], s_off[i] + np.arange(mi), [1], t_off[j] + np.arange(nj), [1]])
        x = fe._add_embeddings(nc.take(src, idx), segment_ids(mi, nj))
        outs.append(fe.encode(x)[:, 0, :])
        order.extend(members)
    fused = outs[0] if len(outs) == 1 else nc.concat(outs, axis=0)
    if order != list(range(len(order))):
        fused = nc.take(fused, np.argsort(order))
    return fused


class EmotionDiscriminator(MLP):
    """Consistency probability for a fused pair: sigmoid(MLP(x))."""

    def __call__(self, x: Tensor) -> Tensor:
        out = nc.sigmoid(super().__call__(x))
        return nc.reshape(out, out.shape[:-1])


class EmotionClassifier(MLP):
    def __call__(self, x: Tensor) -> Tensor:
        return nc.softmax(super().__call__(x), axis=-1)


def bce_loss(y_hat: Tensor, y) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-12, 1 - 1e-12]."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = nc.as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ShapeError(f"labels {y.shape} vs predictions {y_hat.shape}")
    p = nc.clip(y_hat, LOG_CLAMP, 1.0 - LOG_CLAMP)
    ll = nc.log(p) * y + nc.log(1.0 - p) * (1.0 - y)
    return nc.sum_(ll) * (-1.0 / y.size)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """-(1/M) sum_i log p_i[label_i], probabilities clamped below at 1e-12."""
    labels = np.asarray(labels, dtype=np.intp)
    probs = nc.as_tensor(probs)
    M = labels.shape[0]
    picked = nc.clip(probs, LOG_CLAMP, None)[np.arange(M), labels]
    return nc.sum_(nc.log(picked)) * (-1.0 / M)


def ed_loss(pair_batch: PairBatch, fe: FusionEncoder, ed: EmotionDiscriminator,
            speech_seqs: Sequence | None = None, text_seqs: Sequence | None = None) -> Tensor:
    """Discriminator loss over all M*M shuffled pairs.

    By default the raw record features are fused; pass ``speech_seqs`` /
    ``text_seqs`` to fuse other (e.g. augmented) representations.
    """
    recs = pair_batch.records
    speech = speech_seqs if speech_seqs is not None else [r.speech_seq for r in recs]
    text = text_seqs if text_seqs is not None else [r.text_seq for r in recs]
    pairs = [(i, j) for i, j, _ in pair_batch.shuffled_pairs]
    return bce_loss(ed(fuse_pairs(speech, text, pairs, fe)), pair_batch.pair_labels())


def ec_loss(records, fe: FusionEncoder, ec: EmotionClassifier,
            speech_seqs: Sequence | None = None, text_seqs: Sequence | None = None) -> Tensor:
    speech = speech_seqs if speech_seqs is not None else [r.speech_seq for r in records]
    text = text_seqs if text_seqs is not None else [r.text_seq for r in records]
    pairs = [(i, i) for i in range(len(records))]
    return cross_entropy(ec(fuse_pairs(speech, text, pairs, fe)), [r.label for r in records])


def total_loss(augmentation, contrastive, classification, discrimination, beta: float, gamma: float, delta: float):
    """augmentation + beta * contrastive + gamma * classification + delta * discrimination.

    Plain floats are summed with ``math.fsum`` so the result is correctly rounded.
    """
    terms = (augmentation, contrastive, classification, discrimination)
    if not any(isinstance(v, Tensor) for v in terms):
        return math.fsum([augmentation, beta * contrastive, gamma * classification, delta * discrimination])
    return augmentation + contrastive * beta + classification * gamma + discrimination * delta
