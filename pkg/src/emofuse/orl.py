"""Learned per-modality augmentation and the contrastive mutual-information losses."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import ShapeError
from .layers import MLP, Linear, Module
from .numcore import RngStream, Tensor

LOG_CLAMP = 1e-12


class ResidualAutoencoder(Module):
    """Stack of residual blocks mapping each d_z token to a d_z token.

    Every block is ``x + f(x)`` where ``f`` is ``layers`` affine maps with SiLU
    between them and none after the last, so all-zero weights give the
    identity map.
    """

    def __init__(self, d_z: int, rng: RngStream, init_scale: float = 1e-3, blocks: int = 5, layers: int = 6):
        self.blocks = [[Linear(d_z, d_z, rng, scale=init_scale) for _ in range(layers)] for _ in range(blocks)]

    # Module does not walk nested lists
    def named_parameters(self, prefix: str = ""):
        for b, block in enumerate(self.blocks):
            for k, lin in enumerate(block):
                yield from lin.named_parameters(f"{prefix}block{b}.linear{k}.")

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            h = x
            for k, lin in enumerate(block):
                h = lin(h)
                if k < len(block) - 1:
                    h = nc.silu(h)
            x = x + h
        return x


class ProjectionHead(MLP):
    """Shared projection d_z -> d_h -> d_p applied before the contrastive losses."""


class AugLabelHead(Module):
    """Affine map to C logits followed by softmax."""

    def __init__(self, d_z: int, C: int, rng: RngStream):
        self.fc = Linear(d_z, C, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return nc.softmax(self.fc(x), axis=-1)


def augment(seq: Tensor, ae: ResidualAutoencoder) -> tuple[Tensor, Tensor]:
    """Apply the autoencoder token-wise; also return the mean-pooled vector."""
    seq = nc.as_tensor(seq)
    aug = ae(seq)
    return aug, nc.mean(aug, axis=0)


def mse_loss(speech, speech_aug, text, text_aug, M: int) -> Tensor:
    """Squared reconstruction error summed over whole sequences, over 2M.

    Each argument is a tensor or a list of per-record tensors; token matrices
    of a batch may also be passed pre-concatenated.
    """
    def total_sq(a, b):
        if isinstance(a, (list, tuple)):
            if len(a) != len(b):
                raise ShapeError(f"got {len(a)} originals but {len(b)} augmentations")
            parts = [total_sq(x, y) for x, y in zip(a, b)]
            out = parts[0]
            for p in parts[1:]:
                out = out + p
            return out
        a, b = nc.as_tensor(a), nc.as_tensor(b)
        if a.shape != b.shape:
            raise ShapeError(f"original shape {a.shape} != augmented shape {b.shape}")
        d = a - b
        return nc.sum_(d * d)

    return (total_sq(speech, speech_aug) + total_sq(text, text_aug)) * (1.0 / (2 * M))


def kld_loss(y, y_hat) -> Tensor:
    """Mean KL(y || y_hat) over rows; y is a (M, C) target distribution."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = nc.as_tensor(y_hat)
    if y.shape != y_hat.shape or y.ndim != 2:
        raise ShapeError(f"target shape {y.shape} != prediction shape {y_hat.shape}")
    row_sums = y_hat.value.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6) or np.any(y_hat.value < 0):
        raise ValueError("prediction rows must be probability distributions")
    M = y.shape[0]
    pos = y > 0
    entropy_term = float(np.sum(y[pos] * np.log(y[pos])))
    cross = nc.sum_(nc.log(nc.clip(y_hat, LOG_CLAMP, None)) * y)
    return (entropy_term - cross) * (1.0 / M)


def augmentation_loss(mse, kld_speech, kld_text, alpha: float):
    return alpha * mse + (kld_speech + kld_text) * 0.5


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def intra_modality_infonce(z: Tensor, z_aug: Tensor, tau: float) -> Tensor:
    """NT-Xent over the 2M bank [z; z_aug], positive z_aug[i], anchor excluded."""
    _check_tau(tau)
    z, z_aug = nc.as_tensor(z), nc.as_tensor(z_aug)
    M = z.shape[0]
    bank = nc.concat([z, z_aug], axis=0)
    logits = nc.cosine_matrix(z, bank) * (1.0 / tau)
    mask = np.zeros((M, 2 * M))
    mask[np.arange(M), np.arange(M)] = -np.inf
    rows = np.arange(M)
    positive = logits[rows, rows + M]
    return nc.mean(nc.logsumexp(logits + mask, axis=1) - positive)


def inter_modality_infonce(z_s: Tensor, z_t: Tensor, tau: float) -> Tensor:
    """InfoNCE of speech anchors against all M text embeddings."""
    _check_tau(tau)
    z_s, z_t = nc.as_tensor(z_s), nc.as_tensor(z_t)
    M = z_s.shape[0]
    logits = nc.cosine_matrix(z_s, z_t) * (1.0 / tau)
    rows = np.arange(M)
    return nc.mean(nc.logsumexp(logits, axis=1) - logits[rows, rows])


def contrastive_mi_loss(speech_term, text_term, cross_term):
    return speech_term + text_term + cross_term


def pooling_matrix(lengths: Sequence[int]) -> np.ndarray:
    """(M, sum(lengths)) matrix whose product with stacked tokens gives per-record means."""
    P = np.zeros((len(lengths), int(sum(lengths))))
    start = 0
    for i, n in enumerate(lengths):
        P[i, start:start + n] = 1.0 / n
        start += n
    return P
