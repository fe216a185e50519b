"""Realism and privacy checks for a synthetic corpus.

Similarity: cosine of each synthetic event with the measured event it was
generated from, and of each PMU's concatenated series across all events.
Utility: an event classifier (voltage vs frequency) trained on one corpus
and scored on another.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import CHANNELS
from .dataio import ConfigError, EventRecord, Label
from .model import ArchConfig, FeatureExtractor
from .nnkit import Adam, Layer, backward, conv1d, dense
from .tensor3 import ShapeError, inner_product
from .training import batches

logger = logging.getLogger(__name__)

BIN_WIDTH = 0.05
EVENT_THRESHOLD = 0.25
PMU_THRESHOLD = 0.21


class PairingError(ValueError):
    pass


def histogram(values, width: float = BIN_WIDTH) -> tuple[np.ndarray, np.ndarray]:
    n_bins = int(round(2.0 / width))
    edges = np.linspace(-1.0, 1.0, n_bins + 1)
    counts, _ = np.histogram(np.clip(values, -1.0, 1.0), bins=edges)
    return counts, edges


@dataclass(frozen=True)
class Similarity:
    keys: tuple
    values: np.ndarray
    counts: np.ndarray
    edges: np.ndarray
    skipped: tuple = ()

    @property
    def max(self) -> float:
        return float(np.max(self.values)) if self.values.size else float("nan")


def _by_id(corpus) -> dict[str, EventRecord]:
    out = {}
    for r in corpus:
        if r.event_id in out:
            raise PairingError(f"duplicate event id {r.event_id}")
        out[r.event_id] = r
    return out


def _pair(synthetic, measured) -> list[tuple[EventRecord, EventRecord]]:
    syn, mea = _by_id(synthetic), _by_id(measured)
    only_s = sorted(set(syn) - set(mea))
    only_m = sorted(set(mea) - set(syn))
    if only_s or only_m:
        raise PairingError(f"unpaired events: synthetic-only {only_s}, measured-only {only_m}")
    return [(syn[k], mea[k]) for k in sorted(syn)]


def event_similarity(synthetic, measured) -> Similarity:
    pairs = _pair(synthetic, measured)
    vals = []
    for s, m in pairs:
        if s.tensor.dims != m.tensor.dims:
            raise ShapeError(f"event {s.event_id}: shapes {s.tensor.dims} and {m.tensor.dims}")
        vals.append(inner_product(s.tensor, m.tensor, normalized=True))
    vals = np.array(vals)
    return Similarity(tuple(s.event_id for s, _ in pairs), vals, *histogram(vals))


def pmu_similarity(synthetic, measured) -> Similarity:
    """Per PMU, cosine of its series concatenated over every event it is in."""
    pairs = _pair(synthetic, measured)
    parts: dict[str, tuple[list, list]] = {}
    skipped = set()
    for s, m in pairs:
        s_idx = {p: i for i, p in enumerate(s.pmu_ids)}
        m_idx = {p: i for i, p in enumerate(m.pmu_ids)}
        for p in set(s_idx) ^ set(m_idx):
            skipped.add(p)
        for p in sorted(set(s_idx) & set(m_idx)):
            a, b = parts.setdefault(p, ([], []))
            a.append(s.tensor.data[:, s_idx[p], :].ravel())
            b.append(m.tensor.data[:, m_idx[p], :].ravel())
    keys, vals = [], []
    for p in sorted(parts):
        a, b = (np.concatenate(x) for x in parts[p])
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            skipped.add(p)
            continue
        keys.append(p)
        vals.append(float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)))
    skipped -= set(keys)
    if skipped:
        logger.warning("%d PMU(s) skipped (absent from one corpus or zero norm)", len(skipped))
    vals = np.array(vals)
    return Similarity(tuple(keys), vals, *histogram(vals), tuple(sorted(skipped)))


# ------------------------------------------------------------ classifier


@dataclass(frozen=True)
class ClassifierConfig:
    width: int = 16          # channels after the input projection
    T: int = 600
    H: int = 32
    depth: int = 3
    n_blocks: int = 2
    epochs: int = 200
    batch_size: int = 50
    lr: float = 1e-3
    voltage_weight: float = 1 / 7

    def arch(self) -> ArchConfig:
        return ArchConfig(D=1, S=self.width, T=self.T, H=self.H, C=1, N=1, depth=self.depth,
                          n_blocks=self.n_blocks)


class EventClassifier(torch.nn.Module):
    """1x1 projection of the pooled channel rows, cascade features, dense, sigmoid.

    The input is the mean and RMS over PMUs of each channel, so the score
    does not depend on PMU order or count. A synthetic event places its
    PMUs at random, and a per-PMU input would learn positions instead.
    """

    def __init__(self, cfg: ClassifierConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(int(seed))
        self.project = Layer(conv1d(2 * len(CHANNELS), cfg.width, 1), g)
        self.features = FeatureExtractor(cfg.arch(), g)
        self.head = Layer(dense(cfg.H, 1), g)

    def forward(self, x):
        return torch.sigmoid(self.head(self.features(self.project(x))))[:, 0]


def pooled_channels(X: np.ndarray) -> np.ndarray:
    """(D, N, T) -> (2D, T): per-channel mean and RMS over PMUs."""
    return np.concatenate([X.mean(axis=1), np.sqrt((X ** 2).mean(axis=1))])


def _inputs(corpus, cfg: ClassifierConfig) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for r in corpus:
        X = r.tensor.data
        if X.shape[0] != len(CHANNELS) or X.shape[2] != cfg.T:
            raise ShapeError(f"event {r.event_id} is {X.shape}, classifier expects "
                             f"({len(CHANNELS)}, N, {cfg.T})")
        xs.append(pooled_channels(X))
        ys.append(1.0 if Label(r.label) is Label.FREQUENCY else 0.0)
    return np.stack(xs), np.array(ys)


def weighted_bce(prob: torch.Tensor, y: torch.Tensor, voltage_weight: float) -> torch.Tensor:
    """Batch mean of per-sample BCE, voltage samples scaled by ``voltage_weight``."""
    w = torch.where(y > 0.5, torch.ones_like(y), torch.full_like(y, voltage_weight))
    p = prob.clamp(1e-12, 1 - 1e-12)
    return torch.mean(w * -(y * torch.log(p) + (1 - y) * torch.log(1 - p)))


@dataclass
class TrainedClassifier:
    model: EventClassifier
    log: list = field(default_factory=list)   # (epoch, mean loss, train accuracy)

    def predict(self, corpus) -> np.ndarray:
        x, _ = _inputs(corpus, self.model.cfg)
        self.model.eval()
        with torch.no_grad():
            return self.model(torch.as_tensor(x, dtype=torch.float32)).double().numpy()


def train_event_classifier(corpus, cfg: ClassifierConfig = ClassifierConfig(),
                           seed: int = 0) -> TrainedClassifier:
    corpus = list(corpus)
    x, y = _inputs(corpus, cfg)
    if len(np.unique(y)) < 2:
        raise ConfigError("classifier training needs both voltage and frequency events")
    s_model, s_batch = np.random.SeedSequence(seed).spawn(2)
    model = EventClassifier(cfg, int(s_model.generate_state(1)[0]))
    opt = Adam(model, cfg.lr)
    rng = np.random.default_rng(s_batch)
    xt = torch.as_tensor(x, dtype=torch.float32)
    yt = torch.as_tensor(y, dtype=torch.float32)
    out = TrainedClassifier(model)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        losses, correct = [], 0
        for idx in batches(len(y), cfg.batch_size, rng):
            prob = model(xt[idx])
            loss = weighted_bce(prob, yt[idx], cfg.voltage_weight)
            opt.step(backward(loss, model))
            losses.append(float(loss.detach()))
            correct += int(((prob.detach() > 0.5).float() == yt[idx]).sum())
        out.log.append((epoch, float(np.mean(losses)), correct / len(y)))
    return out


def scores(y_true, y_pred) -> tuple[float, float, float]:
    """Accuracy, F1, F2 with frequency (label 1) as the positive class."""
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    if y_true.size == 0:
        raise ValueError("empty test set")
    acc = float(np.mean(y_true == y_pred))
    tp = float(np.sum(y_true & y_pred))
    prec = tp / float(np.sum(y_pred)) if np.any(y_pred) else 0.0
    rec = tp / float(np.sum(y_true)) if np.any(y_true) else 0.0

    def f(beta):
        den = beta ** 2 * prec + rec
        return 0.0 if den == 0 else (1 + beta ** 2) * prec * rec / den
    return acc, f(1.0), f(2.0)


def cross_score(clf: TrainedClassifier, test_corpus) -> tuple[float, float, float]:
    test_corpus = list(test_corpus)
    if not test_corpus:
        raise ValueError("empty test set")
    prob = clf.predict(test_corpus)
    y = [Label(r.label) is Label.FREQUENCY for r in test_corpus]
    return scores(y, prob > 0.5)


def inception_grid(synthetic, measured, cfg: ClassifierConfig, seed: int) -> dict:
    """Scores for every (train, test) pair of corpora, keyed like 'synthetic-measured'."""
    corpora = {"measured": list(measured), "synthetic": list(synthetic)}
    out = {}
    for i, (tr_name, tr) in enumerate(corpora.items()):
        clf = train_event_classifier(tr, cfg, seed + i)
        for te_name, te in corpora.items():
            out[f"{tr_name}-{te_name}"] = cross_score(clf, te)
    return out


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    event: Similarity
    pmu: Similarity
    inception: dict = field(default_factory=dict)

    @property
    def privacy_ok(self) -> bool:
        return self.event.max <= EVENT_THRESHOLD and self.pmu.max <= PMU_THRESHOLD

    def lines(self) -> list[str]:
        out = [f"max_event_corr\t{self.event.max!r}",
               f"max_pmu_corr\t{self.pmu.max!r}",
               f"event_corr_threshold\t{EVENT_THRESHOLD!r}",
               f"pmu_corr_threshold\t{PMU_THRESHOLD!r}",
               f"privacy_ok\t{int(self.privacy_ok)}",
               f"n_events\t{self.event.values.size}",
               f"n_pmus\t{self.pmu.values.size}",
               f"n_pmus_skipped\t{len(self.pmu.skipped)}"]
        for name, (acc, f1, f2) in self.inception.items():
            out += [f"{name}.accuracy\t{acc!r}", f"{name}.f1\t{f1!r}", f"{name}.f2\t{f2!r}"]
        return out

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text("\n".join(self.lines()) + "\n", encoding="utf-8")
        for name, sim in (("event", self.event), ("pmu", self.pmu)):
            rows = ["bin_lo\tbin_hi\tcount"] + [f"{lo:.2f}\t{hi:.2f}\t{c}" for lo, hi, c in
                                                 zip(sim.edges[:-1], sim.edges[1:], sim.counts)]
            (out / f"{name}_hist.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
            vals = ["id\tcorr"] + [f"{k}\t{v!r}" for k, v in zip(sim.keys, sim.values)]
            (out / f"{name}_corr.tsv").write_text("\n".join(vals) + "\n", encoding="utf-8")
        return out / "report.txt"
