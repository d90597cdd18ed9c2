"""Feature fixtures, synthetic data, batching and cross-record pair shuffling.

Fixture format is JSON Lines, one utterance per line::

    {"id": "rec-00000", "label": 2, "speech_seq": [[...], ...], "text_seq": [[...], ...]}

with a sidecar ``<path>.meta.json`` holding ``{"C": int, "d_z": int, "class_names": [...]}``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FixtureError
from .numcore import RngStream


@dataclass(frozen=True, eq=False)
class FeatureRecord:
    id: str
    speech_seq: np.ndarray  # (m, d_z)
    text_seq: np.ndarray  # (n, d_z)
    label: int
    # Cluster the text tokens were drawn from; synthetic data only, never serialized.
    text_label: int | None = None

    @property
    def d_z(self) -> int:
        return self.speech_seq.shape[1]

    @property
    def consistent(self) -> bool:
        return self.text_label is None or self.text_label == self.label


@dataclass(frozen=True)
class DatasetMeta:
    C: int
    d_z: int
    class_names: list[str]


@dataclass
class PairBatch:
    """M matched records plus all M*M (speech_i, text_j) recombinations."""

    records: list[FeatureRecord]
    shuffled_pairs: list[tuple[int, int, int]]

    @property
    def M(self) -> int:
        return len(self.records)

    def pair_labels(self) -> np.ndarray:
        return np.array([y for _, _, y in self.shuffled_pairs], dtype=np.float64)


@dataclass
class SyntheticSpec:
    C: int = 4
    d_z: int = 32
    m: int = 6
    n: int = 5
    records: int = 1000
    separation: float = 4.0
    sigma: float = 1.0
    inconsistency_rate: float = 0.0
    seed: int = 0
    class_names: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if self.C < 2:
            raise ValueError("need at least two classes")
        if self.d_z < 1 or self.m < 1 or self.n < 1 or self.records < 1:
            raise ValueError("d_z, m, n and records must be positive")
        if not self.separation > 0 or not self.sigma > 0:
            raise ValueError("separation and sigma must be positive")
        if not 0.0 <= self.inconsistency_rate < 1.0:
            raise ValueError("inconsistency_rate must lie in [0, 1)")


def default_class_names(C: int) -> list[str]:
    if C == 4:
        return ["neutral", "happy", "sad", "angry"]
    return [f"class_{c}" for c in range(C)]


# ---------------------------------------------------------------------------
# fixture I/O
# ---------------------------------------------------------------------------

def meta_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".meta.json")


def _parse_matrix(obj, lineno: int, name: str) -> np.ndarray:
    if not isinstance(obj, list) or not obj:
        raise FixtureError(f"line {lineno}: field '{name}' must be a non-empty array of arrays")
    rows = []
    width = None
    for r, row in enumerate(obj):
        if not isinstance(row, list) or not row:
            raise FixtureError(f"line {lineno}: field '{name}' row {r} is not a non-empty array")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise FixtureError(f"line {lineno}: field '{name}' row {r} has length {len(row)}, expected {width}")
        for v in row:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise FixtureError(f"line {lineno}: field '{name}' row {r} holds a non-numeric entry")
        rows.append(row)
    arr = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FixtureError(f"line {lineno}: field '{name}' contains a non-finite value")
    return arr


def load_meta(path: str | os.PathLike) -> DatasetMeta | None:
    mp = meta_path(path)
    if not mp.exists():
        return None
    try:
        raw = json.loads(mp.read_text(encoding="utf-8"))
        return DatasetMeta(C=int(raw["C"]), d_z=int(raw["d_z"]), class_names=list(raw.get("class_names", [])))
    except (ValueError, KeyError, TypeError) as exc:
        raise FixtureError(f"{mp}: malformed metadata sidecar ({exc})") from exc


def load_fixture(path: str | os.PathLike, num_classes: int | None = None) -> list[FeatureRecord]:
    """Read and validate a JSONL fixture.

    The class count comes from ``num_classes`` or, failing that, the metadata
    sidecar; one of the two must be available so labels can be range-checked.
    """
    path = Path(path)
    if not path.exists():
        raise FixtureError(f"{path}: no such fixture file")
    meta = load_meta(path)
    C = num_classes if num_classes is not None else (meta.C if meta else None)
    if C is None:
        raise FixtureError(f"{path}: class count unknown (no {meta_path(path).name} and none given)")

    records: list[FeatureRecord] = []
    first: FeatureRecord | None = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FixtureError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise FixtureError(f"line {lineno}: record must be a JSON object")
            for key in ("id", "label", "speech_seq", "text_seq"):
                if key not in obj:
                    raise FixtureError(f"line {lineno}: missing field '{key}'")
            if not isinstance(obj["id"], str):
                raise FixtureError(f"line {lineno}: field 'id' must be a string")
            label = obj["label"]
            if isinstance(label, bool) or not isinstance(label, int):
                raise FixtureError(f"line {lineno}: field 'label' must be an integer")
            if not 0 <= label < C:
                raise FixtureError(f"line {lineno}: field 'label' = {label} out of range [0, {C})")
            speech = _parse_matrix(obj["speech_seq"], lineno, "speech_seq")
            text = _parse_matrix(obj["text_seq"], lineno, "text_seq")
            if speech.shape[1] != text.shape[1]:
                raise FixtureError(
                    f"line {lineno}: speech_seq width {speech.shape[1]} != text_seq width {text.shape[1]}"
                )
            rec = FeatureRecord(obj["id"], speech, text, label)
            if first is None:
                first = rec
            elif rec.d_z != first.d_z:
                raise FixtureError(
                    f"line {lineno}: record '{rec.id}' has d_z={rec.d_z} but record '{first.id}' has d_z={first.d_z}"
                )
            records.append(rec)
    if meta is not None and first is not None and meta.d_z != first.d_z:
        raise FixtureError(f"{path}: records have d_z={first.d_z} but metadata says {meta.d_z}")
    return records


def _matrix_json(a: np.ndarray) -> list[list[float]]:
    return [[float(v) for v in row] for row in a]


def write_fixture(path: str | os.PathLike, records: Sequence[FeatureRecord], C: int,
                  class_names: Sequence[str] | None = None) -> None:
    """Write records as JSONL plus the metadata sidecar.

    Floats use Python's shortest round-trip repr, so load -> write is stable.
    """
    path = Path(path)
    d_z = records[0].d_z if records else 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            obj = {
                "id": r.id,
                "label": int(r.label),
                "speech_seq": _matrix_json(r.speech_seq),
                "text_seq": _matrix_json(r.text_seq),
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
    names = list(class_names) if class_names else default_class_names(C)
    meta = {"C": int(C), "d_z": int(d_z), "class_names": names}
    meta_path(path).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _centroids(rng: RngStream, C: int, d_z: int, separation: float) -> np.ndarray:
    dirs = rng.normal((C, d_z))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return separation * dirs


def gen_synthetic(spec: SyntheticSpec) -> list[FeatureRecord]:
    """Gaussian-cluster features per class and modality.

    With probability ``inconsistency_rate`` a record's text tokens come from a
    different (uniformly chosen) class's text cluster; its label always
    follows the speech class.
    """
    spec.validate()
    root = RngStream(spec.seed)
    mu_speech = _centroids(root.child(0), spec.C, spec.d_z, spec.separation)
    mu_text = _centroids(root.child(1), spec.C, spec.d_z, spec.separation)
    rng = root.child(2)
    width = max(5, len(str(spec.records - 1)))
    out = []
    for k in range(spec.records):
        label = int(rng.integers(0, spec.C))
        text_label = label
        if rng.uniform() < spec.inconsistency_rate:
            text_label = int((label + rng.integers(1, spec.C)) % spec.C)
        speech = mu_speech[label] + rng.normal((spec.m, spec.d_z), scale=spec.sigma)
        text = mu_text[text_label] + rng.normal((spec.n, spec.d_z), scale=spec.sigma)
        out.append(FeatureRecord(f"rec-{k:0{width}d}", speech, text, label, text_label))
    return out


def class_histogram(records: Sequence[FeatureRecord], C: int) -> list[int]:
    counts = [0] * C
    for r in records:
        counts[r.label] += 1
    return counts


# ---------------------------------------------------------------------------
# batching and shuffling
# ---------------------------------------------------------------------------

def make_batches(dataset: Sequence[FeatureRecord], M: int, seed: int, drop_last: bool = False
                 ) -> list[list[FeatureRecord]]:
    """Seeded shuffle, then contiguous chunks of ``M`` records."""
    if M < 1:
        raise ValueError(f"batch size must be >= 1, got {M}")
    if len(dataset) == 0:
        raise ValueError("cannot batch an empty dataset")
    order = RngStream(seed).permutation(len(dataset))
    batches = [[dataset[i] for i in order[s:s + M]] for s in range(0, len(dataset), M)]
    if drop_last and len(batches[-1]) < M:
        batches.pop()
    return batches


def num_batches(n: int, M: int, drop_last: bool) -> int:
    return n // M if drop_last else math.ceil(n / M)


def cross_pair_shuffle(records: Sequence[FeatureRecord]) -> PairBatch:
    """All M*M (speech_i, text_j) pairs, i outer / j inner, labeled 1 iff labels match."""
    records = list(records)
    labels = [r.label for r in records]
    pairs = [(i, j, int(li == lj)) for i, li in enumerate(labels) for j, lj in enumerate(labels)]
    return PairBatch(records, pairs)
