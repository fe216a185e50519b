"""Assemble synthetic event tensors from generated and simulated factors."""

from __future__ import annotations

import math

import numpy as np

from .dataio import EventRecord, Label
from .epdecomp import N_INTER, EPDecomposition, qr_reorthogonalize
from .intersim import InterEventModel, resample_profile, sample_inter_factors
from .model import Generator, unstack_factors
from .tensor3 import Tensor3


def place_sorted(profiles: np.ndarray, n_pmus: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted profiles (K, D, L) -> factors (D, N, K) on random PMU orders.

    A sorted profile does not follow any one PMU, so every (signature,
    channel) gets its own permutation. A shared one would line up the peaks
    of all columns on the same PMUs and make them nearly collinear.
    """
    prof = resample_profile(profiles, n_pmus)            # (K, D, N)
    out = np.empty_like(prof)
    for k in range(prof.shape[0]):
        for d in range(prof.shape[1]):
            out[k, d, rng.permutation(n_pmus)] = prof[k, d]
    return np.transpose(out, (1, 2, 0))


def synthesize(decomp: EPDecomposition, template: EventRecord, gen: Generator,
               inter_model: InterEventModel | dict, seed: int) -> EventRecord:
    """Synthetic version of one measured event.

    The measured signatures are kept. Factors for the shared signatures come
    from the inter-event simulator and the rest from the generator. A final
    QR with the simulated block placed last makes the factors orthonormal
    and moves R into the signatures, so the tensor is unchanged by it.
    ``inter_model`` may be a dict keyed by label; the template's label picks.
    """
    if isinstance(inter_model, dict):
        inter_model = inter_model[Label(template.label)]
    E = decomp.signatures.data
    N = decomp.n_pmus
    k = inter_model.k
    if k != N_INTER:
        raise ValueError(f"inter-event model has {k} signatures, expected {N_INTER}")
    s_gen, s_inter, s_perm = np.random.SeedSequence(seed).spawn(3)
    raw = gen.generate(E, N, seed=int(s_gen.generate_state(1)[0]))[0]
    P_gen = unstack_factors(raw / math.sqrt(N), E.shape[0])
    prof = sample_inter_factors(inter_model, 1, int(s_inter.generate_state(1)[0]))[0]
    P_inter = place_sorted(prof, N, np.random.default_rng(s_perm)) / math.sqrt(N)

    P_t = np.concatenate([P_gen[:, :, k:], P_inter], axis=2)
    E_t = np.concatenate([E[:, k:], E[:, :k]], axis=1)
    Q, E2 = qr_reorthogonalize(P_t, E_t, strict=False)
    X = np.asarray(Q) @ np.asarray(E2)
    return EventRecord(template.event_id, template.label, template.sub_cause, Tensor3(X),
                       template.pmu_ids, template.sample_rate_hz, template.event_start_sample)
