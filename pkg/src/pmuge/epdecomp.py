"""Event-participation decomposition of standardized event tensors.

An event tensor X (4 channels x N PMUs x T samples) is factored per channel
as X ~= P @ E where the rows of E (S x T) are event signatures and the
columns of P (N x S) are orthonormal participation factors. The 25
signatures come in three blocks:

    [0, 5)    inter-event signatures shared by the whole corpus (PCA)
    [5, 10)   sparse intra-event signatures (L1-thresholded power iteration)
    [10, 25)  dense intra-event signatures (SVD of what is left)

Signatures are stored row-wise, so ``matmul3(P, E)`` rebuilds the event.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dataio import EventRecord, read_container, write_container
from .tensor3 import Tensor3

logger = logging.getLogger(__name__)

N_INTER = 5
N_SPARSE = 5
N_SVD = 15
N_SIGNATURES = N_INTER + N_SPARSE + N_SVD
BLOCKS = {"inter": (0, N_INTER), "sparse": (N_INTER, N_INTER + N_SPARSE),
          "svd": (N_INTER + N_SPARSE, N_SIGNATURES)}


class RankError(ValueError):
    pass


class SingularityError(np.linalg.LinAlgError):
    pass


class ConvergenceError(RuntimeError):
    pass


class InsufficientPMUsError(ValueError):
    pass


def _tensor_data(x) -> np.ndarray:
    if isinstance(x, EventRecord):
        x = x.tensor
    return np.asarray(x, dtype=np.float64)


def fix_signs(E: np.ndarray, P: np.ndarray | None = None):
    """Make each signature's largest-magnitude entry positive.

    E is (..., S, T); P, if given, is (..., N, S) and flips with it.
    """
    idx = np.argmax(np.abs(E), axis=-1)
    pick = np.take_along_axis(E, idx[..., None], axis=-1)[..., 0]
    sign = np.where(pick < 0, -1.0, 1.0)
    E = E * sign[..., None]
    if P is None:
        return E
    return E, P * sign[..., None, :]


# --------------------------------------------------------------- inter-event


@dataclass(frozen=True)
class InterEventBasis:
    basis: Tensor3                   # (4, k, T), unit-norm rows
    explained_variance_ratio: np.ndarray  # (4, k)

    @property
    def k(self) -> int:
        return self.basis.dims[1]


def _top_components(rows: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Uncentered PCA: leading right singular vectors and their variance ratios."""
    if rows.shape[0] < k:
        raise RankError(f"{rows.shape[0]} rows cannot give {k} components")
    if k > rows.shape[1]:
        raise RankError(f"k={k} exceeds series length {rows.shape[1]}")
    _, s, vt = np.linalg.svd(rows, full_matrices=False)
    total = float(np.sum(s ** 2))
    ratio = s[:k] ** 2 / total if total > 0 else np.zeros(k)
    return fix_signs(vt[:k]), ratio


def fit_inter_event_basis(corpus, sample_per_event: int = 20, k: int = N_INTER,
                          seed: int = 0) -> InterEventBasis:
    """PCA over a random sample of PMU rows from every event, per channel.

    The rows are z-scored in time already, so the principal directions are
    taken without further centering.
    """
    if sample_per_event < 1:
        raise ValueError("sample_per_event must be >= 1")
    tensors = [_tensor_data(x) for x in corpus]
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(tensors))]
    picks = []
    for X, rng in zip(tensors, rngs):
        n = X.shape[1]
        idx = np.sort(rng.choice(n, size=min(sample_per_event, n), replace=False))
        picks.append(X[:, idx, :])
    pool = np.concatenate(picks, axis=1)
    basis, ratios = [], []
    for c in range(pool.shape[0]):
        v, r = _top_components(pool[c], k)
        basis.append(v)
        ratios.append(r)
    return InterEventBasis(Tensor3(np.stack(basis)), np.stack(ratios))


@dataclass(frozen=True)
class BootstrapTable:
    first_ratio: np.ndarray       # (n_boot, 4) variance ratio of component 1
    cumulative_ratio: np.ndarray  # (n_boot, 4) summed ratio of all k components

    def to_csv(self, path, channels=("P", "Q", "V", "F")):
        lines = ["replicate,channel,first_ratio,cumulative_ratio"]
        for b in range(self.first_ratio.shape[0]):
            for c, name in enumerate(channels):
                lines.append(f"{b},{name},{self.first_ratio[b, c]:.17g},"
                             f"{self.cumulative_ratio[b, c]:.17g}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def _ratios_from_gram(G: np.ndarray, k: int) -> tuple[float, float]:
    total = float(np.trace(G))
    if total <= 0:
        return 0.0, 0.0
    n = G.shape[0]
    # only the top k eigenvalues are needed; the trace gives the total
    ev = scipy.linalg.eigh(G, eigvals_only=True, subset_by_index=[max(0, n - k), n - 1])[::-1]
    ev = np.clip(ev, 0, None)
    return float(ev[0] / total), float(np.sum(ev[:k]) / total)


def bootstrap_explained_variance(corpus, n_boot: int = 5000, resample: int = 2000,
                                 k: int = N_INTER, seed: int = 0) -> BootstrapTable:
    """Bootstrap the explained-variance ratios of the top-k inter-event components.

    Each replicate draws ``resample`` PMUs with replacement from the pooled
    PMUs of all events and redoes the PCA on those rows. Replicates use
    independent RNG streams spawned from ``seed``.
    """
    pool = np.concatenate([_tensor_data(x) for x in corpus], axis=1)  # (4, M, T)
    n_rows, T = pool.shape[1], pool.shape[2]
    if n_rows < 1:
        raise RankError("empty PMU pool")
    if k > T:
        raise RankError(f"k={k} exceeds series length {T}")
    # work in the row space of the pool: X_b^T X_b has the eigenvalues of
    # Y^T diag(counts) Y with Y = U S from the pool's SVD
    reduced = []
    for c in range(4):
        u, s, _ = np.linalg.svd(pool[c], full_matrices=False)
        reduced.append(u * s)
    first = np.empty((n_boot, 4))
    cumul = np.empty((n_boot, 4))
    for b, ss in enumerate(np.random.SeedSequence(seed).spawn(n_boot)):
        rng = np.random.default_rng(ss)
        counts = np.bincount(rng.integers(0, n_rows, size=resample), minlength=n_rows)
        used = counts > 0
        w = counts[used].astype(np.float64)
        for c in range(4):
            Y = reduced[c][used]
            first[b, c], cumul[b, c] = _ratios_from_gram((Y * w[:, None]).T @ Y, k)
    return BootstrapTable(first, cumul)


# ------------------------------------------------------------ factor algebra


def project_factors(x, E_block) -> Tensor3:
    """Least-squares participation factors P = X E^T (E E^T)^-1, per channel."""
    X = _tensor_data(x)
    E = np.asarray(E_block, dtype=np.float64)
    if X.shape[0] != E.shape[0] or X.shape[2] != E.shape[2]:
        raise ValueError(f"shapes {X.shape} and {E.shape} are incompatible")
    out = np.empty((X.shape[0], X.shape[1], E.shape[1]))
    for c in range(X.shape[0]):
        G = E[c] @ E[c].T
        if G.size and np.linalg.cond(G) > 1e12:
            raise SingularityError(f"signature Gram matrix of channel {c} is singular")
        out[c] = np.linalg.solve(G, E[c] @ X[c].T).T if G.size else 0.0
    return Tensor3(out)


def qr_reorthogonalize(P_tilde, E_tilde, rank_tol: float = 1e-12,
                       strict: bool = True) -> tuple[Tensor3, Tensor3]:
    """Re-orthogonalize factors with a thin QR, moving R into the signatures.

    For each channel P~ = QR, so P~ E~ = Q (R E~). R is upper triangular,
    hence the last signature row only gets rescaled: place signatures to be
    preserved last. R's diagonal is made positive, which makes the map the
    identity on factors that are already orthonormal.

    With ``strict=False`` dependent columns are accepted: Householder QR
    still returns orthonormal Q and the product is still exact.
    """
    P = np.asarray(P_tilde, dtype=np.float64)
    E = np.asarray(E_tilde, dtype=np.float64)
    if P.shape[0] != E.shape[0] or P.shape[2] != E.shape[1]:
        raise ValueError(f"shapes {P.shape} and {E.shape} are incompatible")
    Qs, Es = [], []
    for c in range(P.shape[0]):
        q, r = np.linalg.qr(P[c], mode="reduced")
        d = np.sign(np.diag(r))
        d[d == 0] = 1.0
        q, r = q * d, r * d[:, None]
        scale = np.linalg.norm(P[c])
        bad = np.flatnonzero(np.abs(np.diag(r)) < rank_tol * max(scale, 1e-300))
        if bad.size and strict:
            raise RankError(f"channel {c}: factor column {int(bad[0])} is numerically dependent")
        Qs.append(q)
        Es.append(r @ E[c])
    return Tensor3(np.stack(Qs)), Tensor3(np.stack(Es))


# -------------------------------------------------------------- sparse PCA


def _soft(v: np.ndarray, thresh: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0)


def _sparse_direction(X: np.ndarray, penalty: float, iters: int, tol: float,
                      ref_norm: float) -> np.ndarray:
    """One sparse time-direction of X by thresholded power iteration.

    Starts from the leading right singular vector. Each step forms
    X^T X v, zeroes entries below ``penalty`` times the largest magnitude
    and renormalizes. Stops once the captured variance ||X v||^2 changes by
    less than ``tol`` relative to itself.
    """
    _, s, vt = np.linalg.svd(X, full_matrices=False)
    if s.size == 0 or s[0] <= 1e-12 * ref_norm:
        return np.zeros(X.shape[1])
    v = vt[0]
    obj = s[0] ** 2
    delta = np.inf
    for _ in range(iters):
        xv = X @ v
        w = _soft(X.T @ xv, penalty * np.max(np.abs(X.T @ xv)))
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return np.zeros_like(v)
        v = w / nrm
        new_obj = float(np.sum((X @ v) ** 2))
        delta = abs(new_obj - obj) / max(obj, 1e-300)
        obj = new_obj
        if delta < tol:
            return v
    raise ConvergenceError(f"sparse power iteration did not converge, final delta {delta:.3e}")


def sparse_components(residual, k: int = N_SPARSE, l1_penalty: float = 0.1,
                      iters: int = 5000, tol: float = 1e-8) -> tuple[Tensor3, Tensor3]:
    """k sparse signatures per channel, with orthonormal induced factors.

    ``l1_penalty`` is relative: the soft threshold is that fraction of the
    largest entry of X^T X v, so 0 gives plain (uncentered) PCA. Components
    are extracted with projection deflation X <- X (I - v v^T). Channels
    whose residual is exhausted get zero signatures and zero factors.
    """
    X = _tensor_data(residual)
    C, N, T = X.shape
    E = np.zeros((C, k, T))
    for c in range(C):
        R = X[c].copy()
        ref = max(np.linalg.norm(R), 1e-300)
        for j in range(k):
            v = _sparse_direction(R, l1_penalty, iters, tol, ref)
            E[c, j] = v
            R = R - np.outer(R @ v, v)
    P = np.zeros((C, N, k))
    Eout = np.zeros_like(E)
    for c in range(C):
        live = np.flatnonzero(np.linalg.norm(E[c], axis=1) > 0)
        if live.size == 0:
            continue
        Pc = np.asarray(project_factors(X[c:c + 1], E[c:c + 1, live]))
        q, e = qr_reorthogonalize(Pc, E[c:c + 1, live], strict=False)
        P[c][:, live] = np.asarray(q)[0]
        Eout[c, live] = np.asarray(e)[0]
    return Tensor3(P), Tensor3(Eout)


# -------------------------------------------------------------- full event


@dataclass(frozen=True)
class DecomposeConfig:
    l1_penalty: float = 0.1
    sparse_iters: int = 5000
    sparse_tol: float = 1e-8


@dataclass(frozen=True)
class EPDecomposition:
    signatures: Tensor3   # (4, 25, T)
    factors: Tensor3      # (4, N, 25)
    residuals: np.ndarray  # (4, 4): per channel ||X||, then residual after inter, +sparse, +svd
    event_id: str = ""
    blocks: dict = field(default_factory=lambda: dict(BLOCKS))

    @property
    def n_pmus(self) -> int:
        return self.factors.dims[1]

    def reconstruct(self) -> Tensor3:
        return self.factors @ self.signatures

    def orthogonality_error(self) -> float:
        P = self.factors.data
        G = np.swapaxes(P, 1, 2) @ P
        return float(np.max(np.abs(G - np.eye(P.shape[2]))))

    def relative_residual(self) -> np.ndarray:
        return self.residuals[:, 3] / np.maximum(self.residuals[:, 0], 1e-300)


def decompose_event(x, basis: InterEventBasis, cfg: DecomposeConfig = DecomposeConfig(),
                    event_id: str | None = None) -> EPDecomposition:
    """Full 25-signature decomposition of one standardized event."""
    if event_id is None:
        event_id = x.event_id if isinstance(x, EventRecord) else ""
    X = _tensor_data(x)
    C, N, T = X.shape
    if N < N_SIGNATURES:
        raise InsufficientPMUsError(f"event {event_id!r} has {N} PMUs, need {N_SIGNATURES}")
    if basis.basis.dims[2] != T:
        raise ValueError(f"basis length {basis.basis.dims[2]} != event length {T}")
    norms = np.linalg.norm(X, axis=(1, 2))

    # every stage fits factors, orthonormalizes them and removes the least-
    # squares fit X -> (I - Q Q^T) X, so later factors live in the PMU-space
    # complement of earlier ones and no direction is spent twice
    P_inter = project_factors(X, basis.basis)
    Q_inter, _ = qr_reorthogonalize(P_inter, basis.basis, strict=False)
    Q_inter = np.asarray(Q_inter)
    R1 = X - _fit(Q_inter, X)
    r_inter = np.linalg.norm(R1, axis=(1, 2))

    P_sp, _ = sparse_components(R1, N_SPARSE, cfg.l1_penalty, cfg.sparse_iters, cfg.sparse_tol)
    P_sp = np.asarray(P_sp)
    R2 = R1 - _fit(P_sp, R1)
    r_sparse = np.linalg.norm(R2, axis=(1, 2))

    P_svd = np.empty((C, N, N_SVD))
    for c in range(C):
        u, _, _ = np.linalg.svd(R2[c], full_matrices=False)
        P_svd[c] = u[:, :N_SVD]
    r_svd = np.linalg.norm(R2 - _fit(P_svd, R2), axis=(1, 2))

    # a final QR only matters where a stage ran out of residual: exhausted
    # sparse columns are zero and null-space SVD columns need not be
    # orthogonal to the earlier blocks
    P_all = np.concatenate([Q_inter, P_sp, P_svd], axis=2)
    Q, _ = qr_reorthogonalize(P_all, np.zeros((C, N_SIGNATURES, T)), strict=False)
    Q = np.asarray(Q)
    E = np.swapaxes(Q, 1, 2) @ X
    E, P = fix_signs(E, Q)
    residuals = np.stack([norms] + [_projection_residual(X, P[:, :, :hi])
                                    for _, hi in BLOCKS.values()], axis=1)
    logger.debug("event %s stage residuals %s", event_id,
                 np.stack([norms, r_inter, r_sparse, r_svd], axis=1))
    return EPDecomposition(Tensor3(E), Tensor3(P), residuals, event_id)


def _fit(Q: np.ndarray, X: np.ndarray) -> np.ndarray:
    return Q @ (np.swapaxes(Q, 1, 2) @ X)


def _projection_residual(X: np.ndarray, Q: np.ndarray) -> np.ndarray:
    R = X - Q @ (np.swapaxes(Q, 1, 2) @ X)
    return np.linalg.norm(R, axis=(1, 2))


def svd_residual(x, rank: int = N_SIGNATURES) -> np.ndarray:
    """Per-channel Frobenius residual of the best rank-``rank`` approximation."""
    X = _tensor_data(x)
    out = np.empty(X.shape[0])
    for c in range(X.shape[0]):
        s = np.linalg.svd(X[c], compute_uv=False)
        out[c] = np.sqrt(np.sum(s[rank:] ** 2))
    return out


# ---------------------------------------------------------- serialization


def save_decomposition(d: EPDecomposition, path, extra: dict | None = None):
    meta = {"kind": "ep_decomposition", "event_id": d.event_id,
            "blocks": {k: list(v) for k, v in d.blocks.items()}}
    meta.update(extra or {})
    return write_container(path, meta, {"signatures": d.signatures.data,
                                        "factors": d.factors.data,
                                        "residuals": d.residuals})


def load_decomposition(path) -> tuple[EPDecomposition, dict]:
    meta, t = read_container(path)
    if meta.get("kind") != "ep_decomposition":
        raise ValueError(f"{path}: not a decomposition file")
    d = EPDecomposition(Tensor3(t["signatures"]), Tensor3(t["factors"]), t["residuals"],
                        meta["event_id"], {k: tuple(v) for k, v in meta["blocks"].items()})
    return d, meta


def save_basis(basis: InterEventBasis, path):
    return write_container(path, {"kind": "inter_event_basis"},
                           {"basis": basis.basis.data, "ratio": basis.explained_variance_ratio})


def load_basis(path) -> InterEventBasis:
    meta, t = read_container(path)
    if meta.get("kind") != "inter_event_basis":
        raise ValueError(f"{path}: not a basis file")
    return InterEventBasis(Tensor3(t["basis"]), t["ratio"])
