"""Finite-difference verification of every loss component's gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .dataio import FeatureRecord, SyntheticSpec, gen_synthetic
from .numcore import RngStream
from .training import EmotionFusionModel, LossBreakdown, forward

DEFAULT_FLOOR = 1e-6


@dataclass
class ComponentResult:
    name: str
    max_rel_error: float
    worst_param: str
    checked: int
    offenders: list[str] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


@dataclass
class GradcheckReport:
    seed: int
    tol: float
    components: list[ComponentResult]

    @property
    def passed(self) -> bool:
        return all(c.passed(self.tol) for c in self.components)


def gradcheck_batch(cfg: RunConfig, seed: int) -> list[FeatureRecord]:
    """A small batch with unequal sequence lengths so grouped fusion is exercised."""
    recs = gen_synthetic(SyntheticSpec(C=cfg.C, d_z=cfg.d_z, m=3, n=2, records=cfg.M, separation=2.0,
                                       inconsistency_rate=0.5, seed=seed))
    out = []
    for k, r in enumerate(recs):
        m = max(1, r.speech_seq.shape[0] - (k % 2))
        out.append(FeatureRecord(r.id, r.speech_seq[:m].copy(), r.text_seq.copy(), r.label, r.text_label))
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def run_gradcheck(cfg: RunConfig, seed: int, h: float = 1e-5, tol: float = 1e-3, coords_per_tensor: int | None = 6,
                  floor: float = DEFAULT_FLOOR) -> GradcheckReport:
    """Compare backward-sweep gradients with central differences for all ten losses.

    ``coords_per_tensor=None`` probes every coordinate of every parameter;
    otherwise each parameter tensor gets that many seeded random coordinates
    (all of them if it is smaller).
    """
    cfg = cfg.replace(seed=seed)
    batch = gradcheck_batch(cfg, seed)
    model = EmotionFusionModel(cfg)
    named = list(model.named_parameters())
    names = LossBreakdown.names()

    analytic = {}
    for comp in names:
        model.zero_grad()
        nc.backward(forward(model, batch, cfg).losses[comp])
        analytic[comp] = [p.grad.copy() for _, p in named]
    model.zero_grad()

    def all_losses(_theta):
        with nc.no_grad():
            losses = forward(model, batch, cfg).losses
        return np.array([float(losses[c].value) for c in names])

    pick = RngStream(seed).child(77)
    worst = {c: (0.0, "", []) for c in names}
    checked = 0
    for k, (pname, p) in enumerate(named):
        size = p.value.size
        if coords_per_tensor is None or size <= coords_per_tensor:
            coords = np.arange(size)
        else:
            coords = np.sort(pick.permutation(size)[:coords_per_tensor])
        numeric = nc.finite_diff_grad(all_losses, p.value, h, coords)  # (len(coords), 10)
        checked += len(coords)
        for ci, comp in enumerate(names):
            a = analytic[comp][k].reshape(-1)[coords]
            err = rel_error(a, numeric[:, ci], floor)
            best, bname, bad = worst[comp]
            if np.any(err > tol):
                bad = bad + [pname]
            if err.max() > best:
                best, bname = float(err.max()), pname
            worst[comp] = (best, bname, bad)
    comps = [ComponentResult(c, worst[c][0], worst[c][1], checked, worst[c][2]) for c in names]
    return GradcheckReport(seed, tol, comps)
