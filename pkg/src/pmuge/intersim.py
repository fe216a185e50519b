"""Statistical simulator for the participation factors of the shared signatures.

Per event, each shared-signature factor column is sorted in descending
order and resampled to a common length. Across events the sorted profiles
of one (signature, channel) are close to rank one, so each is summarized by
a single principal vector and a coordinate per event. The P-channel
coordinate is modeled as Gaussian and the Q, V, F coordinates as linear
functions of it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .dataio import Label, read_container, write_container

logger = logging.getLogger(__name__)


class DegenerateError(ValueError):
    pass


def _factor_array(item) -> np.ndarray:
    f = getattr(item, "factors", item)
    return np.asarray(f, dtype=np.float64)


@dataclass(frozen=True)
class SortedFactors:
    data: np.ndarray              # (events, K, D, N_sort), descending along the last axis
    event_ids: tuple
    excluded: tuple               # ids of events with fewer than 2 PMUs

    @property
    def n_sort(self) -> int:
        return self.data.shape[-1]


def resample_profile(profile: np.ndarray, length: int) -> np.ndarray:
    """Piecewise-linear resampling of a sorted profile to ``length`` points."""
    n = profile.shape[-1]
    if length == n:
        return profile.copy()
    pos = np.linspace(0.0, n - 1.0, length)
    grid = np.arange(n, dtype=np.float64)
    flat = profile.reshape(-1, n)
    out = np.stack([np.interp(pos, grid, row) for row in flat])
    return out.reshape(profile.shape[:-1] + (length,))


def sort_factors(corpus_factors, k: int = 5, n_sort: int | None = None, scale: bool = True,
                 event_ids=None) -> SortedFactors:
    """Descending-sorted shared-signature factors on a common length.

    Each item is an EPDecomposition or a (D, N, S) factor array of which the
    first ``k`` columns are used. With ``scale`` factors are multiplied by
    sqrt(N) so unit-norm columns of different lengths are comparable.
    ``n_sort`` defaults to the smallest PMU count.
    """
    items = list(corpus_factors)
    if event_ids is None:
        event_ids = [getattr(it, "event_id", str(i)) for i, it in enumerate(items)]
    kept, ids, excluded = [], [], []
    for eid, it in zip(event_ids, items):
        P = _factor_array(it)
        if P.ndim != 3 or P.shape[2] < k:
            raise ValueError(f"event {eid}: factors of shape {P.shape} lack {k} columns")
        if P.shape[1] < 2:
            excluded.append(eid)
            logger.warning("event %s has %d PMU(s); excluded from sorting", eid, P.shape[1])
            continue
        block = np.transpose(P[:, :, :k], (2, 0, 1))          # (k, D, N)
        if scale:
            block = block * math.sqrt(P.shape[1])
        kept.append(-np.sort(-block, axis=-1))
        ids.append(eid)
    if not kept:
        raise DegenerateError("no event has at least 2 PMUs")
    length = n_sort or min(b.shape[-1] for b in kept)
    data = np.stack([resample_profile(b, length) for b in kept])
    return SortedFactors(data, tuple(ids), tuple(excluded))


@dataclass(frozen=True)
class InterEventModel:
    vectors: np.ndarray        # (K, D, N_sort) unit principal vectors
    explained_ratio: np.ndarray  # (K, D)
    slope: np.ndarray          # (K, D): coordinate_d = slope * coordinate_P + intercept
    intercept: np.ndarray      # (K, D); channel P has slope 1, intercept 0
    mu_p: np.ndarray           # (K,)
    sigma_p: np.ndarray        # (K,)

    @property
    def n_sort(self) -> int:
        return self.vectors.shape[-1]

    @property
    def k(self) -> int:
        return self.vectors.shape[0]


def _sign_fix(v: np.ndarray) -> np.ndarray:
    return v if v[np.argmax(np.abs(v))] >= 0 else -v


def principal_coordinates(data: np.ndarray):
    """Top uncentered principal vector of (events, L), event coordinates and ratio."""
    _, s, vt = np.linalg.svd(data, full_matrices=False)
    total = float(np.sum(s ** 2))
    if total == 0.0:
        raise DegenerateError("sorted factors are identically zero")
    v = _sign_fix(vt[0])
    return v, data @ v, float(s[0] ** 2 / total)


def fit_inter_model(sorted_data) -> InterEventModel:
    data = sorted_data.data if isinstance(sorted_data, SortedFactors) else np.asarray(sorted_data)
    if data.ndim != 4:
        raise ValueError(f"expected (events, K, D, N_sort), got {data.shape}")
    n_ev, K, D, L = data.shape
    if n_ev < 3:
        raise ValueError(f"need at least 3 events, got {n_ev}")
    vectors = np.empty((K, D, L))
    ratio = np.empty((K, D))
    slope = np.ones((K, D))
    intercept = np.zeros((K, D))
    mu = np.empty(K)
    sigma = np.empty(K)
    for k in range(K):
        coords = np.empty((D, n_ev))
        for d in range(D):
            vectors[k, d], coords[d], ratio[k, d] = principal_coordinates(data[:, k, d, :])
        A = np.column_stack([coords[0], np.ones(n_ev)])
        for d in range(1, D):
            (slope[k, d], intercept[k, d]), *_ = np.linalg.lstsq(A, coords[d], rcond=None)
        mu[k] = coords[0].mean()
        sigma[k] = coords[0].std(ddof=1)
    return InterEventModel(vectors, ratio, slope, intercept, mu, sigma)


def model_coordinates(model: InterEventModel, data) -> np.ndarray:
    """Coordinates (events, K, D) of sorted data on the model's vectors."""
    data = data.data if isinstance(data, SortedFactors) else np.asarray(data)
    return np.einsum("ekdl,kdl->ekd", data, model.vectors)


def sample_coordinates(model: InterEventModel, n_events: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(n_events, model.k)) * model.sigma_p + model.mu_p
    return g[:, :, None] * model.slope[None] + model.intercept[None]


def sample_inter_factors(model: InterEventModel, n_events: int, seed: int) -> np.ndarray:
    """Sorted factor profiles (n_events, K, D, N_sort), in the fitted (sqrt(N)-scaled) units."""
    coords = sample_coordinates(model, n_events, seed)
    return coords[..., None] * model.vectors[None]


def fit_label_models(corpus_factors, labels, k: int = 5, min_events: int = 3) -> dict:
    """One inter-event model per event label.

    Participation profiles of the shared signatures differ between event
    types, so each label gets its own fit. A label with fewer than
    ``min_events`` usable events falls back to the model of all events.
    """
    items = list(corpus_factors)
    labels = [Label(lab) for lab in labels]
    if len(items) != len(labels):
        raise ValueError(f"{len(items)} factor sets but {len(labels)} labels")
    ids = [getattr(it, "event_id", str(i)) for i, it in enumerate(items)]
    pooled = None
    out = {}
    for lab in sorted(set(labels), key=lambda x: x.value):
        idx = [i for i, x in enumerate(labels) if x is lab]
        sf = sort_factors([items[i] for i in idx], k, event_ids=[ids[i] for i in idx])
        if len(sf.event_ids) >= min_events:
            out[lab] = fit_inter_model(sf)
            continue
        logger.warning("label %s has %d usable event(s); using the pooled model",
                       lab.value, len(sf.event_ids))
        if pooled is None:
            pooled = fit_inter_model(sort_factors(items, k, event_ids=ids))
        out[lab] = pooled
    return out


# --------------------------------------------------------------------- KS


def kolmogorov_sf(lam: float, terms: int = 100) -> float:
    """P(K > lam) for the Kolmogorov distribution."""
    if lam <= 0.0:
        return 1.0
    if lam < 1.0:
        # theta-function form; the alternating series is slow for small lam
        j = np.arange(1, terms + 1)
        cdf = math.sqrt(2 * math.pi) / lam * np.sum(np.exp(-((2 * j - 1) ** 2) * math.pi ** 2
                                                            / (8 * lam ** 2)))
        return float(min(1.0, max(0.0, 1.0 - cdf)))
    j = np.arange(1, terms + 1)
    s = 2.0 * np.sum((-1.0) ** (j - 1) * np.exp(-2.0 * j ** 2 * lam ** 2))
    return float(min(1.0, max(0.0, s)))


def ks_statistic(a, b) -> float:
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("KS test needs two nonempty samples")
    x = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, x, side="right") / a.size
    cdf_b = np.searchsorted(b, x, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample KS statistic and its asymptotic p-value."""
    d = ks_statistic(a, b)
    n, m = np.size(a), np.size(b)
    lam = math.sqrt(n * m / (n + m)) * d
    return d, kolmogorov_sf(lam)


# ---------------------------------------------------------- serialization


def save_inter_model(model: InterEventModel, path, extra: dict | None = None):
    meta = {"kind": "inter_event_model"}
    meta.update(extra or {})
    return write_container(path, meta, {
        "vectors": model.vectors, "explained_ratio": model.explained_ratio,
        "slope": model.slope, "intercept": model.intercept,
        "mu_p": model.mu_p, "sigma_p": model.sigma_p})


_FIELDS = ("vectors", "explained_ratio", "slope", "intercept", "mu_p", "sigma_p")


def load_inter_model(path) -> InterEventModel:
    meta, t = read_container(path)
    if meta.get("kind") != "inter_event_model":
        raise ValueError(f"{path}: not an inter-event model file")
    return InterEventModel(*(t[f] for f in _FIELDS))


def save_label_models(models: dict, path, extra: dict | None = None):
    meta = {"kind": "inter_event_models", "labels": [Label(k).value for k in models]}
    meta.update(extra or {})
    tensors = {f"{Label(k).value}.{f}": getattr(m, f) for k, m in models.items() for f in _FIELDS}
    return write_container(path, meta, tensors)


def load_label_models(path) -> dict:
    meta, t = read_container(path)
    if meta.get("kind") != "inter_event_models":
        raise ValueError(f"{path}: not an inter-event model file")
    return {Label(lab): InterEventModel(*(t[f"{lab}.{f}"] for f in _FIELDS))
            for lab in meta["labels"]}
