"""Training objectives for the participation-factor generator.

Factor tensors are (B, N, K): events, PMUs, stacked signature slots. Real
and fake may have different N. Statistics are taken along the PMU axis,
so every loss here is invariant to reordering PMUs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

FEATURES = tuple(f"f{i}" for i in range(1, 11))


class DegenerateError(ValueError):
    pass


def _t(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _check(real: torch.Tensor, fake: torch.Tensor):
    if real.dim() != 3 or fake.dim() != 3:
        raise ValueError(f"factor tensors must be (B, N, K), got {tuple(real.shape)} and "
                         f"{tuple(fake.shape)}")
    if real.shape[0] != fake.shape[0] or real.shape[2] != fake.shape[2]:
        raise ValueError(f"batch/slot mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")


def gan_losses(d_real, d_fake) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares GAN: (generator loss, discriminator loss)."""
    d_fake = _t(d_fake)
    d_real = _t(d_real, d_fake)
    l_g = torch.mean((d_fake - 1.0) ** 2)
    l_d = torch.mean(d_fake ** 2) + torch.mean((d_real - 1.0) ** 2)
    return l_g, l_d


def pmu_statistics(x: torch.Tensor, eps: float = 1e-8) -> dict[str, torch.Tensor]:
    """The ten matched statistics. f1..f9 are (B, K); f10 is (K,)."""
    lo = x.min(dim=1).values
    hi = x.max(dim=1).values
    scaled = x * 2.0 / torch.clamp(hi - lo, min=eps)[:, None, :]
    c = x - x.mean(dim=1, keepdim=True)
    return {
        "f1": x.mean(dim=1),
        "f2": lo,
        "f3": hi,
        "f4": torch.sigmoid(scaled).mean(dim=1),
        "f5": torch.sigmoid(-scaled).mean(dim=1),
        "f6": torch.relu(x).mean(dim=1),
        "f7": torch.relu(-x).mean(dim=1),
        "f8": (torch.relu(c) ** 2).mean(dim=1),
        "f9": (torch.relu(-c) ** 2).mean(dim=1),
        "f10": (c ** 3).mean(dim=(0, 1)),
    }


def feature_match_loss(real, fake, eps: float = 1e-8) -> dict[str, torch.Tensor]:
    """Mean absolute gap between real and fake statistics, one scalar per f."""
    fake = _t(fake)
    real = _t(real, fake)
    _check(real, fake)
    sr, sf = pmu_statistics(real, eps), pmu_statistics(fake, eps)
    return {k: torch.mean(torch.abs(sr[k] - sf[k])) for k in FEATURES}


def pmu_covariance(x: torch.Tensor) -> torch.Tensor:
    """(B, K, K) sample covariance over the PMU axis."""
    n = x.shape[1]
    if n < 2:
        raise DegenerateError("covariance over a single PMU is undefined")
    c = x - x.mean(dim=1, keepdim=True)
    return c.transpose(1, 2) @ c / (n - 1)


def covariance_match_loss(real, fake) -> torch.Tensor:
    fake = _t(fake)
    real = _t(real, fake)
    _check(real, fake)
    return torch.mean(torch.abs(pmu_covariance(real) - pmu_covariance(fake)))


def quantile_grid(real: torch.Tensor, dq: float = 1 / 25, eps: float = 1e-8):
    """Real quantiles q_1..q_{M-1} and sigmoid slopes a_i, each (M-1, B, K).

    M = 1/dq. Quantiles use linear interpolation and q_0 is the minimum.
    a_i = 2 / (q_{i+1} - q_i); the last one reuses the previous gap.
    """
    m = int(round(1.0 / dq))
    if m < 2 or abs(m * dq - 1.0) > 1e-9:
        raise ValueError(f"1/dq must be an integer >= 2, got dq={dq}")
    if real.shape[1] < m:
        raise ValueError(f"need at least {m} real PMUs per event for dq={dq}, got {real.shape[1]}")
    levels = torch.arange(m, dtype=real.dtype) * dq
    q = torch.quantile(real.detach(), levels, dim=1)    # (M, B, K), q[0] = min
    gap = torch.empty_like(q[1:])
    gap[:-1] = q[2:] - q[1:-1]
    gap[-1] = q[-1] - q[-2]
    a = 2.0 / torch.clamp(gap, min=eps)
    return q[1:], a


def quantile_loss(real, fake, dq: float = 1 / 25, target: str = "smoothed",
                  eps: float = 1e-8) -> torch.Tensor:
    """Sigmoid-smoothed exceedance matching at the real quantiles.

    For each real quantile q_i the fake exceedance E[sigmoid(a_i (x - q_i))]
    is compared by absolute difference with a target: ``"smoothed"`` uses
    the same smoothed exceedance of the real data (zero when fake == real),
    ``"nominal"`` uses the ideal proportion 1 - i*dq. The sum over i is
    averaged over events and slots.
    """
    fake = _t(fake)
    real = _t(real, fake)
    _check(real, fake)
    q, a = quantile_grid(real, dq, eps)
    fake_ex = torch.sigmoid(a[:, :, None, :] * (fake[None] - q[:, :, None, :])).mean(dim=2)
    if target == "smoothed":
        real_ex = torch.sigmoid(a[:, :, None, :] * (real.detach()[None] - q[:, :, None, :])).mean(dim=2)
    elif target == "nominal":
        i = torch.arange(1, q.shape[0] + 1, dtype=fake.dtype)
        real_ex = (1.0 - i * dq)[:, None, None].expand_as(fake_ex)
    else:
        raise ValueError(f"unknown quantile target {target!r}")
    return torch.abs(fake_ex - real_ex).sum(dim=0).mean()


@dataclass
class LossReport:
    gan_g: float = 0.0
    gan_d: float = 0.0
    feature_match: dict = field(default_factory=lambda: {k: 0.0 for k in FEATURES})
    covariance_match: float = 0.0
    quantile: float = 0.0

    @property
    def total_g(self) -> float:
        return (self.gan_g + sum(self.feature_match.values()) + self.covariance_match
                + self.quantile)

    @property
    def matching(self) -> float:
        """Feature-match terms plus the quantile loss."""
        return sum(self.feature_match.values()) + self.quantile

    def values(self) -> list[float]:
        return ([self.gan_g, self.gan_d] + [self.feature_match[k] for k in FEATURES]
                + [self.covariance_match, self.quantile, self.total_g])

    @staticmethod
    def columns() -> list[str]:
        return ["gan_g", "gan_d", *FEATURES, "covariance", "quantile", "total_g"]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values())))

    @classmethod
    def mean(cls, reports: list["LossReport"]) -> "LossReport":
        n = len(reports)
        return cls(sum(r.gan_g for r in reports) / n, sum(r.gan_d for r in reports) / n,
                   {k: sum(r.feature_match[k] for r in reports) / n for k in FEATURES},
                   sum(r.covariance_match for r in reports) / n,
                   sum(r.quantile for r in reports) / n)


def generator_objective(real, fake, d_fake, dq: float = 1 / 25,
                        quantile_target: str = "smoothed") -> tuple[torch.Tensor, LossReport]:
    """Unit-weight sum of GAN, feature-match, covariance and quantile terms."""
    l_g = torch.mean((_t(d_fake) - 1.0) ** 2)
    fm = feature_match_loss(real, fake)
    cov = covariance_match_loss(real, fake)
    qu = quantile_loss(real, fake, dq, quantile_target)
    total = l_g + sum(fm.values()) + cov + qu
    report = LossReport(float(l_g.detach()), 0.0, {k: float(v.detach()) for k, v in fm.items()},
                        float(cov.detach()), float(qu.detach()))
    return total, report
