"""Participation-factor generator and discriminator.

Signatures enter as a (B, D*S, T) stack, row i holding signature i // D of
channel i % D. Three cascade feature extractors turn that stack into H
hidden features each. The generator draws one normal tensor z of shape
(B, N, D*S), passes it through two residual pre-maps, and builds three
heads per (event, PMU, signature): mode probabilities p (Gumbel-softmax),
mode locations mu (shared by every PMU) and per-PMU offsets sigma (zero
mean over PMUs). The output factor is sum_c p * (mu + sigma).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .dataio import ConfigError
from .nnkit import (Layer, LayerKind, batch_norm, conv1d, dense, down_conv, gumbel_softmax_sample,
                    instance_norm, selu, sequential, simple, up_conv)
from .tensor3 import ShapeError, Tensor3


@dataclass(frozen=True)
class ArchConfig:
    D: int = 4
    S: int = 25
    T: int = 600
    H: int = 1000
    C: int = 3
    N: int = 180           # PMUs per event seen by the discriminator
    depth: int = 3
    n_blocks: int = 10
    cardinality: int = 5   # parallel paths of a ResNext block, identity included
    bottleneck: int = 4
    temperature: float = 1.0

    def __post_init__(self):
        for name in ("D", "S", "T", "H", "C", "N", "cardinality", "bottleneck"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.depth < 0 or self.n_blocks < 0:
            raise ConfigError("depth and n_blocks must be >= 0")
        if self.T % (2 ** self.depth):
            raise ConfigError(f"T={self.T} is not divisible by 2**depth={2 ** self.depth}")
        if self.H % (self.D * self.S):
            raise ConfigError(f"H={self.H} is not divisible by D*S={self.D * self.S}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")

    @property
    def DS(self) -> int:
        return self.D * self.S

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ stacking


def stack_signatures(E) -> np.ndarray:
    """(D, S, T) -> (D*S, T); also (B, D, S, T) -> (B, D*S, T)."""
    E = np.asarray(E, dtype=np.float64)
    if E.ndim not in (3, 4):
        raise ShapeError(f"expected (D, S, T) or (B, D, S, T), got {E.shape}")
    D, S, T = E.shape[-3:]
    out = np.swapaxes(E, -3, -2)
    return out.reshape(E.shape[:-3] + (S * D, T))


def unstack_signatures(M, D: int = 4) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim not in (2, 3) or M.shape[-2] % D:
        raise ShapeError(f"cannot unstack shape {M.shape} into {D} channels")
    S, T = M.shape[-2] // D, M.shape[-1]
    out = M.reshape(M.shape[:-2] + (S, D, T))
    return np.swapaxes(out, -3, -2)


def stack_factors(P) -> np.ndarray:
    """(D, N, S) factors -> (N, D*S), columns in signature-stack order."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 3:
        raise ShapeError(f"expected (D, N, S), got {P.shape}")
    D, N, S = P.shape
    return np.transpose(P, (1, 2, 0)).reshape(N, S * D)


def unstack_factors(F, D: int = 4) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] % D:
        raise ShapeError(f"cannot unstack shape {F.shape} into {D} channels")
    N, S = F.shape[0], F.shape[1] // D
    return np.transpose(F.reshape(N, S, D), (2, 0, 1))


# ----------------------------------------------------------- feature maps


class ResNextBlock(torch.nn.Module):
    """Identity plus parallel bottleneck paths, summed."""

    def __init__(self, channels: int, paths: int = 4, bottleneck: int = 4,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.paths = torch.nn.ModuleList(
            sequential(conv1d(channels, bottleneck, 1), batch_norm(bottleneck),
                       simple(LayerKind.SELU), simple(LayerKind.REFLECTION_PAD1),
                       conv1d(bottleneck, channels, 3), simple(LayerKind.SELU),
                       batch_norm(channels), generator=generator)
            for _ in range(paths))

    def forward(self, x):
        out = x
        for p in self.paths:
            out = out + p(x)
        return out


class FeatureExtractor(torch.nn.Module):
    """Down cascade, ResNext blocks, up cascade, pooling to H features."""

    def __init__(self, cfg: ArchConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        c = cfg.DS
        down, up = [], []
        for i in range(cfg.depth):
            ci = c * 2 ** i
            down += [down_conv(ci, 2 * ci), instance_norm(2 * ci), simple(LayerKind.SELU)]
        for i in reversed(range(cfg.depth)):
            ci = c * 2 ** i
            up += [up_conv(2 * ci, ci), instance_norm(ci), simple(LayerKind.SELU)]
        inner = c * 2 ** cfg.depth
        self.down = sequential(*down, generator=generator)
        self.blocks = torch.nn.Sequential(*(ResNextBlock(inner, cfg.cardinality - 1, cfg.bottleneck,
                                                         generator) for _ in range(cfg.n_blocks)))
        self.up = sequential(*up, generator=generator)
        self.pool = Layer(simple(LayerKind.ADAPTIVE_AVG_POOL1D, pool_size=cfg.H // cfg.DS))

    def trace(self, x) -> list[tuple[int, int]]:
        """(channels, length) after every cascade stage, for shape checks."""
        shapes = [tuple(x.shape[1:])]
        for layer in list(self.down) + list(self.blocks) + list(self.up):
            x = layer(x)
            if not isinstance(layer, Layer) or layer.spec.kind in (LayerKind.CONV1D,
                                                                  LayerKind.CONV_TRANSPOSE1D):
                shapes.append(tuple(x.shape[1:]))
        return shapes

    def forward(self, x):
        cfg = self.cfg
        if x.dim() != 3 or x.shape[1] != cfg.DS:
            raise ShapeError(f"expected (B, {cfg.DS}, T), got {tuple(x.shape)}")
        if x.shape[2] % (2 ** cfg.depth):
            raise ShapeError(f"time length {x.shape[2]} not divisible by {2 ** cfg.depth}")
        h = self.up(self.blocks(self.down(x)))
        return self.pool(h).flatten(1)


class PreMap(torch.nn.Module):
    """z -> z + Dense2(SELU(Dense1(z)))."""

    def __init__(self, width: int, generator: torch.Generator | None = None):
        super().__init__()
        self.width = width
        self.d1 = Layer(dense(width, width), generator)
        self.d2 = Layer(dense(width, width), generator)

    def forward(self, z):
        if z.shape[-1] != self.width:
            raise ShapeError(f"pre-map expects last axis {self.width}, got {tuple(z.shape)}")
        return z + self.d2(selu(self.d1(z)))


class ProbabilityMap(torch.nn.Module):
    def __init__(self, cfg: ArchConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        w = cfg.DS + cfg.H
        self.d1 = Layer(dense(w, w), generator)
        self.d2 = Layer(dense(w, cfg.DS * cfg.H), generator)
        self.d3 = Layer(dense(cfg.H, cfg.C), generator)
        self.d4 = Layer(dense(cfg.C, cfg.C), generator)

    def logits(self, features, z_p):
        cfg = self.cfg
        B, N = z_p.shape[:2]
        if features.shape != (B, N, cfg.H) or z_p.shape[2] != cfg.DS:
            raise ShapeError(f"probability map got features {tuple(features.shape)}, "
                             f"z {tuple(z_p.shape)}")
        h = self.d2(selu(self.d1(torch.cat([features, z_p], dim=-1))))
        h = h.reshape(B, N, cfg.DS, cfg.H)
        return self.d4(selu(self.d3(h)))

    def forward(self, features, z_p, generator: torch.Generator | None = None):
        return gumbel_softmax_sample(self.logits(features, z_p), self.cfg.temperature,
                                     generator=generator)


class MeanMap(torch.nn.Module):
    def __init__(self, cfg: ArchConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        k = cfg.DS * cfg.C
        self.d1 = Layer(dense(cfg.H, k), generator)
        self.d2 = Layer(dense(k, k), generator)

    def forward(self, features, n_pmus: int):
        """features: (B, H), or (B, N, H) repeats of it, of which row 0 is used."""
        cfg = self.cfg
        if features.dim() == 3:
            features = features[:, 0]
        if features.dim() != 2 or features.shape[1] != cfg.H:
            raise ShapeError(f"mean map expects (B, {cfg.H}), got {tuple(features.shape)}")
        mu = self.d2(selu(self.d1(features))).reshape(-1, 1, cfg.DS, cfg.C)
        return mu.expand(-1, n_pmus, -1, -1)


class CovarianceMap(torch.nn.Module):
    def __init__(self, cfg: ArchConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        k = cfg.DS * cfg.C
        self.d1 = Layer(dense(k + cfg.H + cfg.DS, k), generator)
        self.d2 = Layer(dense(k, k), generator)

    def forward(self, mu, features, z_c):
        cfg = self.cfg
        B, N = z_c.shape[:2]
        if (mu.shape != (B, N, cfg.DS, cfg.C) or features.shape != (B, N, cfg.H)
                or z_c.shape[2] != cfg.DS):
            raise ShapeError(f"covariance map got mu {tuple(mu.shape)}, features "
                             f"{tuple(features.shape)}, z {tuple(z_c.shape)}")
        h = torch.cat([mu.reshape(B, N, -1), features, z_c], dim=-1)
        sigma = self.d2(selu(self.d1(h))).reshape(B, N, cfg.DS, cfg.C)
        return sigma - sigma.mean(dim=1, keepdim=True)


def combine(p, mu, sigma):
    """out[b, n, s] = sum_c p * (mu + sigma)."""
    return (p * (mu + sigma)).sum(dim=-1)


def _as_batch(E, cfg: ArchConfig, dtype) -> torch.Tensor:
    """Signatures in any of (D,S,T), (B,D,S,T), (B,D*S,T) -> torch (B, D*S, T)."""
    if isinstance(E, torch.Tensor):
        x = E
    else:
        if isinstance(E, Tensor3):
            E = E.data
        E = np.asarray(E, dtype=np.float64)
        if E.ndim == 3 and E.shape[0] == cfg.D and E.shape[1] == cfg.S:
            E = stack_signatures(E)[None]
        elif E.ndim == 4:
            E = stack_signatures(E)
        x = torch.as_tensor(E)
    x = x.to(dtype)
    if x.dim() != 3 or x.shape[1] != cfg.DS:
        raise ShapeError(f"signatures must stack to (B, {cfg.DS}, T), got {tuple(x.shape)}")
    return x


class Generator(torch.nn.Module):
    def __init__(self, cfg: ArchConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(int(seed))
        self.feature_mean = FeatureExtractor(cfg, g)
        self.feature_cov = FeatureExtractor(cfg, g)
        self.feature_prob = FeatureExtractor(cfg, g)
        self.pre_prob = PreMap(cfg.DS, g)
        self.pre_cov = PreMap(cfg.DS, g)
        self.prob_map = ProbabilityMap(cfg, g)
        self.mean_map = MeanMap(cfg, g)
        self.cov_map = CovarianceMap(cfg, g)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def heads(self, x, n_pmus: int, generator: torch.Generator | None = None,
              z: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        """p, mu, sigma (each (B, N, D*S, C)) and z for stacked signatures x."""
        if n_pmus < 1:
            raise ConfigError(f"need at least one PMU, got {n_pmus}")
        cfg = self.cfg
        B = x.shape[0]
        if z is None:
            z = torch.randn((B, n_pmus, cfg.DS), generator=generator, dtype=x.dtype)
        f_mean = self.feature_mean(x)
        f_cov = self.feature_cov(x)[:, None].expand(-1, n_pmus, -1)
        f_prob = self.feature_prob(x)[:, None].expand(-1, n_pmus, -1)
        mu = self.mean_map(f_mean, n_pmus)
        sigma = self.cov_map(mu, f_cov, self.pre_cov(z))
        p = self.prob_map(f_prob, self.pre_prob(z), generator)
        return {"p": p, "mu": mu, "sigma": sigma, "z": z}

    def forward(self, x, n_pmus: int, generator: torch.Generator | None = None):
        h = self.heads(x, n_pmus, generator)
        return combine(h["p"], h["mu"], h["sigma"])

    def generate(self, E, n_pmus: int, seed: int, training: bool = False) -> np.ndarray:
        """Factors (B, N, D*S) as float64 for signatures E; deterministic per seed."""
        x = _as_batch(E, self.cfg, self.dtype)
        g = torch.Generator().manual_seed(int(seed))
        was = self.training
        self.train(training)
        try:
            with torch.no_grad():
                out = self.forward(x, n_pmus, g)
        finally:
            self.train(was)
        return out.to(torch.float64).numpy()


class Discriminator(torch.nn.Module):
    def __init__(self, cfg: ArchConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(int(seed))
        self.features = FeatureExtractor(cfg, g)
        w = cfg.H + cfg.N
        self.d1 = Layer(dense(w, w), g)
        self.d2 = Layer(dense(w, 1), g)
        self.to(dtype)

    def forward(self, x, factors):
        """x: (B, D*S, T) signatures; factors: (B, D*S, N) in the same row order."""
        cfg = self.cfg
        B = x.shape[0]
        if factors.shape != (B, cfg.DS, cfg.N):
            raise ShapeError(f"expected factors (B, {cfg.DS}, {cfg.N}), got {tuple(factors.shape)}")
        h = self.features(x)[:, None].expand(-1, cfg.DS, -1)
        s = self.d2(selu(self.d1(torch.cat([h, factors], dim=-1))))
        return s[..., 0].mean(dim=1)

    def score(self, E, factors) -> np.ndarray:
        x = _as_batch(E, self.cfg, next(self.parameters()).dtype)
        f = torch.as_tensor(np.asarray(factors), dtype=x.dtype)
        with torch.no_grad():
            return self.forward(x, f).to(torch.float64).numpy()
