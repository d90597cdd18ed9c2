"""Model assembly, loss orchestration, training loop, evaluation and export."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .dataio import FeatureRecord, cross_pair_shuffle, make_batches, num_batches
from .errors import NumericalError, ShapeError
from .kf import (EmotionClassifier, EmotionDiscriminator, FusionEncoder, bce_loss, cross_entropy,
                 fuse_packed, total_loss)
from .layers import Module
from .metrics import MetricsReport, confusion_matrix, metrics_from_confusion
from .numcore import RngStream, Tensor
from .optim import AdamW
from .orl import (AugLabelHead, ProjectionHead, ResidualAutoencoder, augmentation_loss, contrastive_mi_loss,
                  inter_modality_infonce, intra_modality_infonce, kld_loss, mse_loss, pooling_matrix)

log = logging.getLogger(__name__)

EVAL_CHUNK = 64


class EmotionFusionModel(Module):
    def __init__(self, cfg: RunConfig):
        rng = RngStream(cfg.seed)
        self.d_z, self.C = cfg.d_z, cfg.C
        self.ae_speech = ResidualAutoencoder(cfg.d_z, rng.child(1), cfg.ae_init_scale)
        self.ae_text = ResidualAutoencoder(cfg.d_z, rng.child(2), cfg.ae_init_scale)
        self.projection = ProjectionHead(cfg.d_z, cfg.d_h, cfg.d_p, rng.child(3))
        self.aug_speech = AugLabelHead(cfg.d_z, cfg.C, rng.child(4))
        self.aug_text = AugLabelHead(cfg.d_z, cfg.C, rng.child(5))
        self.fusion = FusionEncoder(cfg.d_z, rng.child(6), layers=cfg.fe_layers, heads=cfg.fe_heads,
                                    pos_emb=cfg.pos_emb)
        self.discriminator = EmotionDiscriminator(cfg.d_z, cfg.d_h, 1, rng.child(7))
        self.classifier = EmotionClassifier(cfg.d_z, cfg.d_h, cfg.C, rng.child(8))


@dataclass
class LossBreakdown:
    mse: float
    kld: float
    augmentation: float
    mi_speech: float
    mi_text: float
    mi_cross: float
    contrastive: float
    classification: float
    discrimination: float
    total: float

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_tuple(self) -> tuple[float, ...]:
        return astuple(self)


# the nine loss components; "total" is the composite
COMPONENTS = LossBreakdown.names()[:-1]


@dataclass
class ForwardResult:
    losses: dict[str, Tensor]
    fused: Tensor  # (M*M, d_z) pair fusions, row i*M + j
    consistency: Tensor  # (M*M,) discriminator probabilities
    class_probs: Tensor  # (M, C) classifier probabilities on matched pairs
    pair_labels: np.ndarray

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(**{k: float(v.value) for k, v in self.losses.items()})


def _pack(records: Sequence[FeatureRecord], d_z: int):
    for r in records:
        if r.speech_seq.shape[1] != d_z or r.text_seq.shape[1] != d_z:
            raise ShapeError(f"record '{r.id}' has d_z={r.speech_seq.shape[1]}, model expects {d_z}")
    m = [r.speech_seq.shape[0] for r in records]
    n = [r.text_seq.shape[0] for r in records]
    return np.concatenate([r.speech_seq for r in records]), m, np.concatenate([r.text_seq for r in records]), n


def forward(model: EmotionFusionModel, records: Sequence[FeatureRecord], cfg: RunConfig) -> ForwardResult:
    """Build the full loss graph for one batch."""
    if not records:
        raise ValueError("empty batch")
    M = len(records)
    s_all, m, t_all, n = _pack(records, model.d_z)
    labels = np.array([r.label for r in records], dtype=np.intp)
    onehot = np.eye(model.C)[labels]

    # progressive augmentation
    s_aug = model.ae_speech(nc.Tensor(s_all))
    t_aug = model.ae_text(nc.Tensor(t_all))
    pool_s, pool_t = pooling_matrix(m), pooling_matrix(n)
    s_cls, t_cls = nc.Tensor(pool_s @ s_all), nc.Tensor(pool_t @ t_all)
    s_aug_cls = nc.Tensor(pool_s) @ s_aug
    t_aug_cls = nc.Tensor(pool_t) @ t_aug
    mse = mse_loss(s_all, s_aug, t_all, t_aug, M)
    kld_s = kld_loss(onehot, model.aug_speech(s_aug_cls))
    kld_t = kld_loss(onehot, model.aug_text(t_aug_cls))
    l_a = augmentation_loss(mse, kld_s, kld_t, cfg.alpha)

    # contrastive MI estimation
    g = model.projection
    z_s, z_s_aug, z_t, z_t_aug = g(s_cls), g(s_aug_cls), g(t_cls), g(t_aug_cls)
    mi_s = intra_modality_infonce(z_s, z_s_aug, cfg.tau)
    mi_t = intra_modality_infonce(z_t, z_t_aug, cfg.tau)
    mi_x = inter_modality_infonce(z_s, z_t, cfg.tau)
    l_c = contrastive_mi_loss(mi_s, mi_t, mi_x)

    # knowledge fusion over every shuffled pair; the diagonal feeds the classifier
    if cfg.fuse_input == "augmented":
        kf_s, kf_t = s_aug, t_aug
    else:
        kf_s, kf_t = nc.Tensor(s_all), nc.Tensor(t_all)
    shuffled = cross_pair_shuffle(records)
    pairs = [(i, j) for i, j, _ in shuffled.shuffled_pairs]
    fused = fuse_packed(kf_s, m, kf_t, n, pairs, model.fusion)
    consistency = model.discriminator(fused)
    pair_labels = shuffled.pair_labels()
    l_b = bce_loss(consistency, pair_labels)
    probs = model.classifier(nc.take(fused, np.arange(M) * (M + 1)))
    l_f = cross_entropy(probs, labels)

    total = total_loss(l_a, l_c, l_f, l_b, cfg.beta, cfg.gamma, cfg.delta)
    losses = dict(zip(LossBreakdown.names(), (mse, (kld_s + kld_t) * 0.5, l_a, mi_s, mi_t, mi_x, l_c, l_f, l_b, total)))
    return ForwardResult(losses, fused, consistency, probs, pair_labels)


def make_optimizer(model: EmotionFusionModel, cfg: RunConfig) -> AdamW:
    return AdamW(list(model.named_parameters()), lr=cfg.lr, weight_decay=cfg.weight_decay)


def train_step(batch: Sequence[FeatureRecord], model: EmotionFusionModel, optim: AdamW, cfg: RunConfig) -> LossBreakdown:
    """Forward, one backward sweep from the composite loss, one AdamW update."""
    optim.zero_grad()
    result = forward(model, batch, cfg)
    total = result.losses["total"]
    if not np.isfinite(total.value):
        raise NumericalError("total loss is not finite")
    nc.backward(total)
    optim.step()
    return result.breakdown()


def epoch_batches(dataset: Sequence[FeatureRecord], cfg: RunConfig, epoch: int) -> list[list[FeatureRecord]]:
    seed = RngStream(cfg.seed).child(1000, epoch).seed
    return make_batches(dataset, cfg.M, seed, cfg.drop_last)


def total_steps(cfg: RunConfig, n_records: int) -> int:
    if cfg.epochs is not None:
        return cfg.epochs * num_batches(n_records, cfg.M, cfg.drop_last)
    return cfg.steps


def fit(model: EmotionFusionModel, optim: AdamW, dataset: Sequence[FeatureRecord], cfg: RunConfig,
        steps: int | None = None, on_step: Callable[[int, LossBreakdown], None] | None = None
        ) -> list[LossBreakdown]:
    """Train from the optimizer's current step up to ``steps`` total steps.

    The batch for global step t depends only on (seed, t), so training
    resumed from a checkpoint follows the same trajectory.
    """
    steps = total_steps(cfg, len(dataset)) if steps is None else steps
    nb = num_batches(len(dataset), cfg.M, cfg.drop_last)
    if nb == 0:
        raise ValueError(f"dataset of {len(dataset)} records yields no batches of size {cfg.M}")
    history = []
    cached_epoch, batches = -1, []
    for t in range(optim.state.step, steps):
        epoch = t // nb
        if epoch != cached_epoch:
            batches, cached_epoch = epoch_batches(dataset, cfg, epoch), epoch
        try:
            bd = train_step(batches[t % nb], model, optim, cfg)
        except NumericalError as exc:
            exc.step = t
            raise
        history.append(bd)
        if on_step is not None:
            on_step(t, bd)
    return history


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _chunks(seq, k):
    for s in range(0, len(seq), k):
        yield seq[s:s + k]


def fused_representations(dataset: Sequence[FeatureRecord], model: EmotionFusionModel, cfg: RunConfig) -> np.ndarray:
    """Fused vector of every matched record, shape (N, d_z)."""
    if not dataset:
        raise ValueError("empty dataset")
    out = []
    with nc.no_grad():
        for chunk in _chunks(list(dataset), EVAL_CHUNK):
            s_all, m, t_all, n = _pack(chunk, model.d_z)
            s, t = nc.Tensor(s_all), nc.Tensor(t_all)
            if cfg.fuse_input == "augmented":
                s, t = model.ae_speech(s), model.ae_text(t)
            out.append(fuse_packed(s, m, t, n, [(i, i) for i in range(len(chunk))], model.fusion).value)
    return np.concatenate(out)


def predict_proba(dataset: Sequence[FeatureRecord], model: EmotionFusionModel, cfg: RunConfig) -> np.ndarray:
    fused = fused_representations(dataset, model, cfg)
    with nc.no_grad():
        return model.classifier(nc.Tensor(fused)).value


def evaluate(dataset: Sequence[FeatureRecord], model: EmotionFusionModel, cfg: RunConfig) -> MetricsReport:
    """Classify matched pairs; argmax ties go to the lowest class index."""
    probs = predict_proba(dataset, model, cfg)
    pred = np.argmax(probs, axis=1)
    true = np.array([r.label for r in dataset])
    return metrics_from_confusion(confusion_matrix(true, pred, model.C))


@dataclass
class DiscriminationReport:
    accuracy: float
    pairs: int
    consistent_pairs: int
    # synthetic data only: agreement with the cluster-level truth, and the
    # accuracy of the best possible rule (predict 1 iff the speech and text
    # clusters match), which bounds ``accuracy`` when some text is mismatched
    content_accuracy: float | None = None
    ceiling: float | None = None


def evaluate_discrimination(dataset: Sequence[FeatureRecord], model: EmotionFusionModel, cfg: RunConfig,
                            seed: int | None = None) -> DiscriminationReport:
    """Discriminator accuracy over the cross-shuffled pairs of every batch of ``dataset``."""
    batches = make_batches(dataset, cfg.M, cfg.seed if seed is None else seed, drop_last=False)
    correct = total = consistent = content_hits = oracle_hits = 0
    have_content = all(r.text_label is not None for r in dataset)
    with nc.no_grad():
        for batch in batches:
            s_all, m, t_all, n = _pack(batch, model.d_z)
            s, t = nc.Tensor(s_all), nc.Tensor(t_all)
            if cfg.fuse_input == "augmented":
                s, t = model.ae_speech(s), model.ae_text(t)
            shuffled = cross_pair_shuffle(batch)
            pairs = [(i, j) for i, j, _ in shuffled.shuffled_pairs]
            prob = model.discriminator(fuse_packed(s, m, t, n, pairs, model.fusion)).value
            pred = prob > 0.5
            y = shuffled.pair_labels() > 0.5
            correct += int(np.sum(pred == y))
            consistent += int(np.sum(y))
            total += len(pairs)
            if have_content:
                truth = np.array([batch[i].label == batch[j].text_label for i, j in pairs])
                content_hits += int(np.sum(pred == truth))
                oracle_hits += int(np.sum(truth == y))
    if not have_content:
        return DiscriminationReport(correct / total, total, consistent)
    return DiscriminationReport(correct / total, total, consistent, content_hits / total, oracle_hits / total)


def export_embeddings(dataset: Sequence[FeatureRecord], model: EmotionFusionModel, cfg: RunConfig,
                      path: str | os.PathLike) -> Path:
    """CSV with header ``id,label,component_0..component_{d-1}``, one fused vector per record."""
    path = Path(path)
    emb = fused_representations(dataset, model, cfg)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "label"] + [f"component_{k}" for k in range(emb.shape[1])])
            for rec, row in zip(dataset, emb):
                w.writerow([rec.id, rec.label] + [repr(float(v)) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
    return path
