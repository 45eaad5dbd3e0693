"""Datasets: synthetic API-presence corpora, Cuckoo report featurization,
random-forest feature selection, stratified splits and CSV I/O."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import BENIGN, MALWARE, DatasetError, LabeledDataset

log = logging.getLogger(__name__)

__all__ = ["SyntheticSpec", "default_synthetic_spec", "synth_generate", "split",
           "CuckooReport", "ReportError", "parse_cuckoo_report", "FeatureVocabulary",
           "vectorize", "select_features", "save_csv", "load_csv", "LabeledDataset"]


# ---------------------------------------------------------------- synthetic corpus

@dataclass
class SyntheticSpec:
    """Per-class independent Bernoulli features.

    With ``overlap`` = t each class draws feature ``j`` with probability
    ``(1 - t) * p_class[j] + t * (p_benign[j] + p_malware[j]) / 2``, so t = 0
    keeps the classes as specified and t = 1 makes them identical.
    """

    benign_probs: np.ndarray
    malware_probs: np.ndarray
    overlap: float = 0.3
    malware_fraction: float = 0.7
    n: int = 20_000

    def __post_init__(self):
        self.benign_probs = np.asarray(self.benign_probs, dtype=np.float64)
        self.malware_probs = np.asarray(self.malware_probs, dtype=np.float64)
        if self.benign_probs.shape != self.malware_probs.shape or self.benign_probs.ndim != 1:
            raise ValueError("benign and malware probability vectors must be 1-D and equally long")
        for name, p in (("benign_probs", self.benign_probs), ("malware_probs", self.malware_probs)):
            if not np.all((p >= 0) & (p <= 1)):
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        if not 0.0 < self.malware_fraction < 1.0:
            raise ValueError("malware_fraction must lie strictly between 0 and 1")
        if self.n < 2:
            raise ValueError("n must be at least 2")

    @property
    def M(self) -> int:
        return len(self.benign_probs)

    def effective_probs(self) -> tuple[np.ndarray, np.ndarray]:
        mid = 0.5 * (self.benign_probs + self.malware_probs)
        t = self.overlap
        return (1 - t) * self.benign_probs + t * mid, (1 - t) * self.malware_probs + t * mid


def default_probs(M: int = 160, gap: float = 0.45) -> tuple[np.ndarray, np.ndarray]:
    """Fixed benign/malware activation profiles for ``M`` API features.

    A quarter of the features lean malicious, three eighths lean benign and the
    rest are shared background calls. Leaning features fire with probability
    0.1-0.3 in the other class and ``gap`` x (0.6-1.4) more in their own.
    """
    n_mal = M // 4
    n_ben = (3 * M) // 8
    n_bg = M - n_mal - n_ben
    base_mal = np.linspace(0.10, 0.30, n_mal)
    base_ben = np.linspace(0.10, 0.30, n_ben)
    malware = np.concatenate([base_mal + gap * np.linspace(0.6, 1.4, n_mal), base_ben,
                              np.linspace(0.1, 0.5, n_bg)])
    benign = np.concatenate([base_mal, base_ben + gap * np.linspace(0.6, 1.4, n_ben),
                             np.linspace(0.1, 0.5, n_bg)])
    # interleave groups so feature index carries no group information
    perm = np.random.default_rng(160).permutation(M)
    return np.clip(benign[perm], 0, 1), np.clip(malware[perm], 0, 1)


def default_synthetic_spec(M: int = 160, n: int = 20_000, malware_fraction: float = 0.7,
                           overlap: float = 0.3) -> SyntheticSpec:
    benign, malware = default_probs(M)
    return SyntheticSpec(benign, malware, overlap, malware_fraction, n)


def synth_generate(spec: SyntheticSpec, seed: int = 0) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    n_mal = int(round(spec.n * spec.malware_fraction))
    y = np.zeros(spec.n, dtype=np.uint8)
    y[:n_mal] = MALWARE
    y = y[rng.permutation(spec.n)]
    p_ben, p_mal = spec.effective_probs()
    probs = np.where(y[:, None] == MALWARE, p_mal[None, :], p_ben[None, :])
    X = (rng.random((spec.n, spec.M)) < probs).astype(np.uint8)
    return LabeledDataset(X, y)


def split(data: LabeledDataset, train_fraction: float = 0.8, seed: int = 0):
    """Stratified, seeded train/test split; returns ``(train, test)``."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for label in (BENIGN, MALWARE):
        idx = np.flatnonzero(data.y == label)
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(len(idx) * train_fraction))
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise DatasetError(f"split of {len(data)} rows at {train_fraction} leaves an empty part")
    return data.subset(train_idx), data.subset(test_idx)


# ---------------------------------------------------------------- Cuckoo reports

class ReportError(ValueError):
    pass


@dataclass
class CuckooReport:
    api_calls: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        self.api_calls = frozenset(self.api_calls)


def parse_cuckoo_report(text: str | bytes) -> CuckooReport:
    """Collect API names from ``behavior.processes[*].calls[*].api``.

    Names listed in ``behavior.apistats`` (pid -> {api: count}) are merged in.
    A report with no behavior section yields an empty set.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ReportError(f"malformed report at line {exc.lineno}, column {exc.colno}: "
                          f"{exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ReportError("malformed report: top level must be a JSON object")
    behavior = doc.get("behavior")
    if behavior is None:
        log.warning("report has no behavior section; no API calls extracted")
        return CuckooReport()
    if not isinstance(behavior, dict):
        raise ReportError("malformed report: 'behavior' must be an object")
    apis: set[str] = set()
    processes = behavior.get("processes") or []
    if not isinstance(processes, list):
        raise ReportError("malformed report: 'behavior.processes' must be a list")
    for p_i, proc in enumerate(processes):
        if not isinstance(proc, dict):
            raise ReportError(f"malformed report: behavior.processes[{p_i}] must be an object")
        calls = proc.get("calls") or []
        if not isinstance(calls, list):
            raise ReportError(f"malformed report: behavior.processes[{p_i}].calls must be a list")
        for c_i, call in enumerate(calls):
            if not isinstance(call, dict):
                raise ReportError(f"malformed report: behavior.processes[{p_i}].calls[{c_i}] "
                                  f"must be an object")
            api = call.get("api")
            if isinstance(api, str) and api:
                apis.add(api)
    apistats = behavior.get("apistats") or {}
    if isinstance(apistats, dict):
        for per_pid in apistats.values():
            if isinstance(per_pid, dict):
                apis.update(k for k in per_pid if isinstance(k, str) and k)
    return CuckooReport(apis)


class FeatureVocabulary:
    """Ordered API names; ``index(name)`` is the feature column."""

    def __init__(self, names):
        names = list(names)
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"vocabulary has duplicate names: {dup}")
        self.names = names
        self._index = {n: i for i, n in enumerate(names)}

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self._index[name]

    def __contains__(self, name):
        return name in self._index

    @classmethod
    def load(cls, path) -> "FeatureVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(l.strip() for l in lines if l.strip() and not l.lstrip().startswith("#"))

    def save(self, path) -> None:
        Path(path).write_text("".join(n + "\n" for n in self.names), encoding="utf-8")


def vectorize(report: CuckooReport, vocab: FeatureVocabulary) -> np.ndarray:
    v = np.zeros(len(vocab), dtype=np.uint8)
    for api in report.api_calls:
        if api in vocab:
            v[vocab.index(api)] = 1
    return v


# ---------------------------------------------------------------- feature selection

def select_features(full: LabeledDataset, k: int, seed: int = 0, params: dict | None = None):
    """Keep the ``k`` columns with the highest random-forest impurity importance.

    Returns ``(indices, reduced)`` with indices in descending importance;
    equal importances keep the lower column first.
    """
    from .detectors import RandomForest

    if k > full.n_features or k < 1:
        raise ValueError(f"k={k} must lie in [1, {full.n_features}]")
    rf = RandomForest(params).fit(full, seed)
    imp = rf.importances_
    order = np.lexsort((np.arange(len(imp)), -imp))[:k]
    return order, LabeledDataset(full.X[:, order], full.y)


# ---------------------------------------------------------------- CSV

def save_csv(data: LabeledDataset, path) -> None:
    M = data.n_features
    buf = io.StringIO()
    buf.write(",".join([f"f{i}" for i in range(M)] + ["label"]) + "\n")
    rows = np.hstack([data.X, data.y[:, None]]).astype(np.uint8)
    # '0'/'1' bytes: 48 + value
    chars = (rows + 48).astype(np.uint8)
    for r in chars:
        buf.write(",".join(map(chr, r)) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="ascii", newline="")


def load_csv(path) -> LabeledDataset:
    text = Path(path).read_text(encoding="ascii")
    if not text.strip():
        raise DatasetError(f"{path}: empty file")
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    M = len(header) - 1
    expected = [f"f{i}" for i in range(M)] + ["label"]
    if M < 1 or header != expected:
        raise DatasetError(f"{path}: missing or malformed header "
                           f"(expected 'f0,...,f{{M-1}},label')")
    rows = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != M + 1:
            raise DatasetError(f"{path}: row {line_no} has {len(row)} cells, expected {M + 1}")
        for col, cell in enumerate(row):
            if cell not in ("0", "1"):
                raise DatasetError(f"{path}: row {line_no}, column {header[col]}: "
                                   f"value {cell!r} is not 0 or 1")
        rows.append(row)
    arr = np.array(rows, dtype=np.uint8).reshape(len(rows), M + 1)
    return LabeledDataset(arr[:, :M], arr[:, M])
